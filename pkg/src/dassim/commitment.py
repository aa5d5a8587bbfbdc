"""Size-preserving stand-in for per-cell polynomial commitments.

A blob is committed with a Merkle root over all cells in row-major order.
Per-cell proofs are keyed 48 B digests MAC(root_key, coord || payload) where
the key is derived from the root and travels with the block header, so any
header holder can verify cells (and honest holders of reconstructed payloads
can re-derive proofs, mirroring how real opening proofs are recomputable).

This is a simulation device chosen to keep the wire size of a proof exactly
at ``geometry.proof_bytes`` (48 B by default): a 48 B tag is obviously not
collision resistant against offline attack, so adversary code in this
repository never fabricates proofs for payloads it does not hold; soundness
of the real commitment scheme is modeled as an assumption.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass

from .core import BlobGeometry, Cell, CellCoordinate
from .erasure import BlobMatrix

#: nominal wire size of the block header carrying root, key and geometry
HEADER_WIRE_BYTES = 90_000


@dataclass(frozen=True)
class BlobCommitment:
    """Root digest binding the full extended matrix, plus its geometry."""

    root: bytes
    geometry: BlobGeometry

    def __post_init__(self):
        if len(self.root) != 32:
            raise ValueError("root must be 32 bytes")


def _leaf(coord_row: int, coord_col: int, payload: bytes) -> bytes:
    return hashlib.sha256(struct.pack("<II", coord_row, coord_col) + payload).digest()


def _merkle_root(leaves: list[bytes]) -> bytes:
    level = leaves
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        level = [hashlib.sha256(level[i] + level[i + 1]).digest()
                 for i in range(0, len(level), 2)]
    return level[0]


def _root_key(root: bytes) -> bytes:
    return hashlib.sha256(b"cell-proof-key" + root).digest()


def commit_blob(blob: BlobMatrix) -> BlobCommitment:
    """Merkle-style root over all cells of a fully populated blob."""
    if not blob.is_complete:
        raise ValueError(f"blob is partial ({blob.present_count}/"
                         f"{blob.geometry.total_cells} cells); cannot commit")
    g = blob.geometry
    header = struct.pack("<IIII", g.source_rows, g.source_cols,
                         g.cell_payload_bytes, g.proof_bytes)
    leaves = []
    for r in range(g.extended_rows):
        row_bytes = blob.symbols[r].astype(">u2" if blob.symbol_bytes == 2 else ">u1").tobytes()
        w = g.cell_payload_bytes
        for c in range(g.extended_cols):
            leaves.append(_leaf(r, c, row_bytes[c * w:(c + 1) * w]))
    root = hashlib.sha256(b"blob-root" + header + _merkle_root(leaves)).digest()
    return BlobCommitment(root=root, geometry=g)


def _tag(commitment: BlobCommitment, coord: CellCoordinate, payload: bytes) -> bytes:
    mac = hmac.new(_root_key(commitment.root),
                   struct.pack("<II", coord.row, coord.col) + payload,
                   hashlib.sha384).digest()
    want = commitment.geometry.proof_bytes
    if want <= len(mac):
        return mac[:want]
    return mac + b"\x00" * (want - len(mac))


def prove_cell(blob: BlobMatrix, coord: CellCoordinate,
               commitment: BlobCommitment | None = None) -> bytes:
    """Proof bytes for one cell of a fully populated blob."""
    if not blob.is_complete:
        raise ValueError("cannot prove cells of a partial blob")
    if commitment is None:
        commitment = commit_blob(blob)
    return _tag(commitment, coord, blob.payload_at(coord))


def verify_cell(commitment: BlobCommitment, coord: CellCoordinate,
                payload: bytes, proof: bytes) -> bool:
    """True iff (coord, payload, proof) is consistent with the committed blob."""
    g = commitment.geometry
    if not (0 <= coord.row < g.extended_rows and 0 <= coord.col < g.extended_cols):
        return False
    if len(payload) != g.cell_payload_bytes or len(proof) != g.proof_bytes:
        return False
    return hmac.compare_digest(proof, _tag(commitment, coord, payload))


class CommittedBlob:
    """A fully populated blob paired with its commitment.

    Owned by the producer (and conceptually by any honest node that has
    reconstructed payloads plus the header); hands out wire-ready cells.
    """

    def __init__(self, blob: BlobMatrix, commitment: BlobCommitment | None = None):
        if not blob.is_complete:
            raise ValueError("CommittedBlob requires a fully populated matrix")
        self.blob = blob
        self.commitment = commitment if commitment is not None else commit_blob(blob)
        self._proof_cache: dict[tuple[int, int], bytes] = {}

    def cell(self, coord: CellCoordinate) -> Cell:
        key = (coord.row, coord.col)
        proof = self._proof_cache.get(key)
        if proof is None:
            proof = _tag(self.commitment, coord, self.blob.payload_at(coord))
            self._proof_cache[key] = proof
        return Cell(coord=coord, payload=self.blob.payload_at(coord), proof=proof)


def prove_payload(commitment: BlobCommitment, coord: CellCoordinate,
                  payload: bytes) -> bytes:
    """Re-derive a cell proof from a payload an honest node reconstructed."""
    return _tag(commitment, coord, payload)
