"""Per-slot sample selection and success evaluation for the two node roles.

Validators draw 2 random rows + 2 random columns and succeed when at least
half of each chosen line arrives.  Regular nodes draw 75 random cells and
succeed only if every one arrives; the k-of-n mode relaxes this to any
``k_required`` of ``n_requested``.  ``detection_probability`` is the exact
hypergeometric oracle for how likely a withholding producer is to be caught
by one node's sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .core import BlobGeometry, CellCoordinate, DeterministicRng, coordinate_from_index

REGULAR_SAMPLE_COUNT = 75


class SampleMode(Enum):
    VALIDATOR_LINES = "validator_lines"
    REGULAR_CELLS = "regular_cells"
    K_OF_N = "k_of_n"


@dataclass(frozen=True)
class SampleAssignment:
    """One node's sample set for one slot."""

    node: int
    mode: SampleMode
    rows: frozenset[int] = frozenset()
    cols: frozenset[int] = frozenset()
    cells: frozenset[CellCoordinate] = frozenset()
    k_required: int = 0
    n_requested: int = 0


@dataclass
class SamplingVerdict:
    """Outcome of evaluating an assignment against the cells received."""

    node: int
    success: bool
    received_count: int
    bytes_downloaded: int
    per_line_received: dict = field(default_factory=dict)
    deadline_met: bool = True


def select_validator_sample(rng: DeterministicRng, geometry: BlobGeometry,
                            node: int = 0) -> SampleAssignment:
    """2 distinct rows + 2 distinct columns, cells deduplicated at crossings."""
    if geometry.extended_rows < 2 or geometry.extended_cols < 2:
        raise ValueError("validator sampling needs at least 2 extended rows and columns")
    rows = rng.sample(range(geometry.extended_rows), 2)
    cols = rng.sample(range(geometry.extended_cols), 2)
    cells = set()
    for r in rows:
        for c in range(geometry.extended_cols):
            cells.add(CellCoordinate(r, c))
    for c in cols:
        for r in range(geometry.extended_rows):
            cells.add(CellCoordinate(r, c))
    return SampleAssignment(node=node, mode=SampleMode.VALIDATOR_LINES,
                            rows=frozenset(rows), cols=frozenset(cols),
                            cells=frozenset(cells))


def select_regular_sample(rng: DeterministicRng, geometry: BlobGeometry,
                          count: int = REGULAR_SAMPLE_COUNT, node: int = 0,
                          k_required: int | None = None) -> SampleAssignment:
    """``count`` distinct cells uniform without replacement.

    With ``k_required`` set this becomes a k-of-n assignment; otherwise all
    ``count`` cells are needed.
    """
    if count > geometry.total_cells:
        raise ValueError(f"cannot draw {count} cells from {geometry.total_cells}")
    indices = rng.sample(range(geometry.total_cells), count)
    cells = frozenset(coordinate_from_index(i, geometry) for i in indices)
    if k_required is not None:
        if k_required > count:
            raise ValueError("k_required may not exceed the requested count")
        return SampleAssignment(node=node, mode=SampleMode.K_OF_N, cells=cells,
                                k_required=k_required, n_requested=count)
    return SampleAssignment(node=node, mode=SampleMode.REGULAR_CELLS, cells=cells)


def _line_counts(assignment: SampleAssignment, received, geometry: BlobGeometry) -> dict:
    counts = {}
    for r in assignment.rows:
        counts[("row", r)] = sum(1 for c in received if c.row == r)
    for c in assignment.cols:
        counts[("col", c)] = sum(1 for cc in received if cc.col == c)
    return counts


def evaluate_validator_sampling(assignment: SampleAssignment, received,
                                geometry: BlobGeometry,
                                deadline_met: bool = True) -> SamplingVerdict:
    """Success iff every chosen line has >= 50% of its extended length."""
    received = set(received)
    if not received <= set(assignment.cells):
        raise ValueError("received cells outside the assignment")
    counts = _line_counts(assignment, received, geometry)
    ok = all(counts[("row", r)] >= geometry.source_cols for r in assignment.rows) and \
         all(counts[("col", c)] >= geometry.source_rows for c in assignment.cols)
    return SamplingVerdict(node=assignment.node, success=ok,
                           received_count=len(received),
                           bytes_downloaded=len(received) * geometry.cell_wire_bytes,
                           per_line_received=counts, deadline_met=deadline_met)


def evaluate_regular_sampling(assignment: SampleAssignment, received,
                              geometry: BlobGeometry,
                              deadline_met: bool = True) -> SamplingVerdict:
    """Success iff every assigned cell was received."""
    received = set(received)
    if not received <= set(assignment.cells):
        raise ValueError("received cells outside the assignment")
    return SamplingVerdict(node=assignment.node,
                           success=received == set(assignment.cells),
                           received_count=len(received),
                           bytes_downloaded=len(received) * geometry.cell_wire_bytes,
                           deadline_met=deadline_met)


def evaluate_k_of_n(assignment: SampleAssignment, received,
                    geometry: BlobGeometry,
                    deadline_met: bool = True) -> SamplingVerdict:
    """Success iff at least ``k_required`` of the requested cells arrived."""
    if assignment.mode is not SampleMode.K_OF_N:
        raise ValueError("assignment is not in k-of-n mode")
    received = set(received)
    if not received <= set(assignment.cells):
        raise ValueError("received cells outside the assignment")
    return SamplingVerdict(node=assignment.node,
                           success=len(received) >= assignment.k_required,
                           received_count=len(received),
                           bytes_downloaded=len(received) * geometry.cell_wire_bytes,
                           deadline_met=deadline_met)


def evaluate(assignment: SampleAssignment, received, geometry: BlobGeometry,
             deadline_met: bool = True) -> SamplingVerdict:
    """Dispatch to the mode-specific evaluator."""
    if assignment.mode is SampleMode.VALIDATOR_LINES:
        return evaluate_validator_sampling(assignment, received, geometry, deadline_met)
    if assignment.mode is SampleMode.REGULAR_CELLS:
        return evaluate_regular_sampling(assignment, received, geometry, deadline_met)
    return evaluate_k_of_n(assignment, received, geometry, deadline_met)


def _log_comb(a: int, n: int) -> float:
    return math.lgamma(a + 1) - math.lgamma(n + 1) - math.lgamma(a - n + 1)


def detection_probability(withheld_fraction: float, samples: int, total_cells: int) -> float:
    """Exact chance one node's sample hits a withheld cell.

    The producer withholds ceil(f * N) cells; a node draws ``samples`` cells
    without replacement.  P(detect) = 1 - C(N - W, n) / C(N, n), evaluated in
    log space so N on the order of 262,144 stays well-conditioned.
    """
    if not (0.0 <= withheld_fraction <= 1.0):
        raise ValueError("withheld fraction must be within [0, 1]")
    if samples > total_cells:
        raise ValueError("cannot sample more cells than exist")
    withheld = math.ceil(withheld_fraction * total_cells)
    if withheld == 0 or samples == 0:
        return 0.0
    available = total_cells - withheld
    if available < samples:
        return 1.0
    log_miss = _log_comb(available, samples) - _log_comb(total_cells, samples)
    return min(1.0, max(0.0, 1.0 - math.exp(log_miss)))
