"""Shared domain model: blob geometry, node identities, slot timing, seeded randomness.

Every other module builds on the value types defined here.  All types are
immutable and safe to share freely between simulation instances.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass
from enum import Enum

ID_BITS = 256
ID_SPACE = 1 << ID_BITS

US_PER_SECOND = 1_000_000


class Role(Enum):
    PRODUCER = "producer"
    VALIDATOR = "validator"
    REGULAR = "regular"


@dataclass(frozen=True)
class BlobGeometry:
    """Dimensions of a blob before extension, plus per-cell wire sizes.

    The extended matrix is always exactly twice the source size in each
    dimension.  ``cell_wire_bytes`` is what one cell costs on the wire:
    payload plus integrity proof.
    """

    source_rows: int
    source_cols: int
    cell_payload_bytes: int = 512
    proof_bytes: int = 48

    def __post_init__(self):
        if self.source_rows < 1 or self.source_cols < 1:
            raise ValueError("source dimensions must be at least 1x1")
        if self.cell_payload_bytes < 1:
            raise ValueError("cell_payload_bytes must be positive")
        if self.proof_bytes < 0:
            raise ValueError("proof_bytes must be non-negative")

    @property
    def extended_rows(self) -> int:
        return 2 * self.source_rows

    @property
    def extended_cols(self) -> int:
        return 2 * self.source_cols

    @property
    def total_cells(self) -> int:
        return self.extended_rows * self.extended_cols

    @property
    def cell_wire_bytes(self) -> int:
        return self.cell_payload_bytes + self.proof_bytes

    @property
    def total_wire_bytes(self) -> int:
        return self.total_cells * self.cell_wire_bytes

    @property
    def total_proof_bytes(self) -> int:
        return self.total_cells * self.proof_bytes

    @property
    def validator_sample_cells(self) -> int:
        """Cells in a 2-row + 2-column sample, intersections deduplicated."""
        return 2 * self.extended_cols + 2 * self.extended_rows - 4


#: 256x256 source of 512 B cells with 48 B proofs -> 512x512 extended, 560 B/cell.
MAINNET_GEOMETRY = BlobGeometry(source_rows=256, source_cols=256,
                                cell_payload_bytes=512, proof_bytes=48)


@dataclass(frozen=True, order=True)
class CellCoordinate:
    """Position of one cell in the extended matrix."""

    row: int
    col: int


@dataclass(frozen=True)
class Cell:
    """One cell as carried on the wire: coordinate, payload, integrity proof."""

    coord: CellCoordinate
    payload: bytes
    proof: bytes

    def validate_shape(self, geometry: BlobGeometry) -> None:
        if len(self.payload) != geometry.cell_payload_bytes:
            raise ValueError(f"payload is {len(self.payload)} B, geometry wants "
                             f"{geometry.cell_payload_bytes} B")
        if len(self.proof) != geometry.proof_bytes:
            raise ValueError(f"proof is {len(self.proof)} B, geometry wants "
                             f"{geometry.proof_bytes} B")


def coordinate_index(coord: CellCoordinate, geometry: BlobGeometry) -> int:
    """Row-major flat index of ``coord`` in [0, total_cells)."""
    if not (0 <= coord.row < geometry.extended_rows):
        raise IndexError(f"row {coord.row} outside [0, {geometry.extended_rows})")
    if not (0 <= coord.col < geometry.extended_cols):
        raise IndexError(f"col {coord.col} outside [0, {geometry.extended_cols})")
    return coord.row * geometry.extended_cols + coord.col


def coordinate_from_index(index: int, geometry: BlobGeometry) -> CellCoordinate:
    """Inverse of :func:`coordinate_index`."""
    if not (0 <= index < geometry.total_cells):
        raise IndexError(f"index {index} outside [0, {geometry.total_cells})")
    return CellCoordinate(index // geometry.extended_cols,
                          index % geometry.extended_cols)


def derive_node_id(pubkey_bytes: bytes) -> int:
    """Digest of a self-generated public key, as a 256-bit integer identifier."""
    if not pubkey_bytes:
        raise ValueError("pubkey_bytes must be non-empty")
    return int.from_bytes(hashlib.sha256(pubkey_bytes).digest(), "big")


@dataclass(frozen=True)
class NodeProfile:
    """Identity and role of one network participant."""

    node_id: int
    role: Role
    stake: int = 0
    subnet: int = 0
    honest: bool = True

    def __post_init__(self):
        if not (0 <= self.node_id < ID_SPACE):
            raise ValueError("node_id must be a 256-bit integer")
        if self.stake < 0:
            raise ValueError("stake must be non-negative")
        if self.role in (Role.VALIDATOR, Role.PRODUCER) and self.stake < 32:
            raise ValueError(f"{self.role.value} requires stake >= 32")
        if not (0 <= self.subnet < (1 << 24)):
            raise ValueError("subnet must be a 24-bit tag")

    @property
    def is_validator(self) -> bool:
        return self.role in (Role.VALIDATOR, Role.PRODUCER)


@dataclass(frozen=True)
class SlotParameters:
    """Slot clock: total duration and the two sampling deadlines, in seconds."""

    slot_duration: float = 12.0
    validator_deadline: float = 4.0
    regular_deadline: float = 10.0
    slots_per_epoch: int = 32

    def __post_init__(self):
        if not (0 < self.validator_deadline < self.regular_deadline < self.slot_duration):
            raise ValueError("need validator_deadline < regular_deadline < slot_duration")
        if self.slots_per_epoch < 1:
            raise ValueError("slots_per_epoch must be positive")

    @property
    def slot_duration_us(self) -> int:
        return round(self.slot_duration * US_PER_SECOND)

    @property
    def validator_deadline_us(self) -> int:
        return round(self.validator_deadline * US_PER_SECOND)

    @property
    def regular_deadline_us(self) -> int:
        return round(self.regular_deadline * US_PER_SECOND)


MAINNET_SLOTS = SlotParameters()


def _mix_stream(stream_id: int, labels: tuple) -> int:
    """Derive a child stream id by hashing labels into the parent id."""
    h = hashlib.sha256(struct.pack("<Q", stream_id & 0xFFFFFFFFFFFFFFFF))
    for label in labels:
        if isinstance(label, int):
            h.update(b"i" + label.to_bytes(16, "little", signed=True))
        elif isinstance(label, str):
            enc = label.encode()
            h.update(b"s" + len(enc).to_bytes(4, "little") + enc)
        else:
            raise TypeError(f"stream labels must be int or str, got {type(label)!r}")
    return int.from_bytes(h.digest()[:8], "little")


class DeterministicRng:
    """Seeded random stream, reproducible bit-for-bit across runs and platforms.

    Distinct ``stream_id`` values (one per node, per slot, per purpose) give
    statistically independent streams from the same master seed.  Built on
    ``random.Random`` seeded with a SHA-256 mix of (seed, stream_id), so the
    sequence does not depend on interpreter hash randomization.
    """

    __slots__ = ("seed", "stream_id", "_rng")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = seed & 0xFFFFFFFFFFFFFFFF
        self.stream_id = stream_id & 0xFFFFFFFFFFFFFFFF
        digest = hashlib.sha256(
            b"dassim" + struct.pack("<QQ", self.seed, self.stream_id)).digest()
        self._rng = random.Random(int.from_bytes(digest, "big"))

    def substream(self, *labels) -> "DeterministicRng":
        """Independent child stream identified by the given labels."""
        return DeterministicRng(self.seed, _mix_stream(self.stream_id, labels))

    # Thin passthroughs to the underlying generator.

    def random(self) -> float:
        return self._rng.random()

    def uniform(self, a: float, b: float) -> float:
        return self._rng.uniform(a, b)

    def randrange(self, *args) -> int:
        return self._rng.randrange(*args)

    def randint(self, a: int, b: int) -> int:
        return self._rng.randint(a, b)

    def getrandbits(self, k: int) -> int:
        return self._rng.getrandbits(k)

    def randbytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)

    def choice(self, seq):
        return self._rng.choice(seq)

    def sample(self, population, k: int):
        return self._rng.sample(population, k)

    def shuffle(self, seq) -> None:
        self._rng.shuffle(seq)
