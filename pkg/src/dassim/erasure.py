"""Rate-1/2 Reed-Solomon coding over GF(2^8)/GF(2^16) and the 2D blob extension.

A line of k source symbols is treated as the values of a degree < k
polynomial at evaluation points 0..k-1; the extension appends the values at
points k..2k-1.  Any k of the 2k codeword symbols determine the line.  A blob
is extended row-wise and then column-wise, which yields a product code where
every row AND every column of the doubled matrix is itself a valid codeword.

Decoding uses barycentric Lagrange evaluation: for a given erasure pattern we
build (and cache) a 2k x k matrix that maps the first k present symbols to
the full codeword, then verify consistency against any extra present symbols.
Reconstruction of a partial blob is an iterative peel: decode any line with
at least half of its cells, repeat until nothing changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BlobGeometry, CellCoordinate, DeterministicRng


class FieldSizeError(ValueError):
    """The configured field has fewer elements than evaluation points needed."""


class InsufficientShares(ValueError):
    """Fewer than k symbols present; the line is not decodable."""


class DecodeInconsistent(ValueError):
    """Present symbols do not lie on any single degree < k polynomial."""


_REDUCTION_POLY = {8: 0x11D, 16: 0x1100B}

#: symbol/array dtype; log sums stay far below 2^31
SYM_DTYPE = np.int32


class GaloisField:
    """GF(2^bits) arithmetic via log/antilog tables, vectorized over numpy."""

    def __init__(self, bits: int):
        if bits not in _REDUCTION_POLY:
            raise FieldSizeError(f"unsupported field width {bits}, pick 8 or 16")
        self.bits = bits
        self.order = 1 << bits
        self.q = self.order - 1  # multiplicative group order
        poly = _REDUCTION_POLY[bits]
        exp = np.zeros(self.q, dtype=SYM_DTYPE)
        log = np.zeros(self.order, dtype=SYM_DTYPE)
        x = 1
        for i in range(self.q):
            exp[i] = x
            log[x] = i
            x <<= 1
            if x & self.order:
                x ^= poly
        assert x == 1, "reduction polynomial is not primitive"
        self.exp = exp
        self.log = log

    def mul(self, a, b):
        a = np.asarray(a, dtype=SYM_DTYPE)
        b = np.asarray(b, dtype=SYM_DTYPE)
        out = self.exp[(self.log[a] + self.log[b]) % self.q]
        return np.where((a == 0) | (b == 0), 0, out)

    def inv(self, a):
        a = np.asarray(a, dtype=SYM_DTYPE)
        if np.any(a == 0):
            raise ZeroDivisionError("inverse of 0 in GF")
        return self.exp[(self.q - self.log[a]) % self.q]

    def div(self, a, b):
        return self.mul(a, self.inv(b))

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """(n,k) x (k,m) product with + = XOR, * = field multiplication.

        Chunked over the m axis to bound the (n,k,chunk) intermediate.
        """
        a = np.asarray(a, dtype=SYM_DTYPE)
        b = np.asarray(b, dtype=SYM_DTYPE)
        n, k = a.shape
        k2, m = b.shape
        assert k == k2
        la = self.log[a]
        za = a == 0
        lb = self.log[b]
        zb = b == 0
        out = np.zeros((n, m), dtype=SYM_DTYPE)
        chunk = max(1, (1 << 24) // max(1, n * k))
        for lo in range(0, m, chunk):
            hi = min(m, lo + chunk)
            s = (la[:, :, None] + lb[None, :, lo:hi]) % self.q
            prod = self.exp[s]
            prod[za[:, :, None] | zb[None, :, lo:hi]] = 0
            out[:, lo:hi] = np.bitwise_xor.reduce(prod, axis=1)
        return out


_FIELD_CACHE: dict[int, GaloisField] = {}


def get_field(bits: int) -> GaloisField:
    if bits not in _FIELD_CACHE:
        _FIELD_CACHE[bits] = GaloisField(bits)
    return _FIELD_CACHE[bits]


@dataclass(frozen=True)
class FieldConfig:
    """Which binary field the codec runs in."""

    field_bits: int = 16

    def __post_init__(self):
        if self.field_bits not in _REDUCTION_POLY:
            raise FieldSizeError(f"field_bits must be 8 or 16, got {self.field_bits}")

    def check_line(self, codeword_len: int) -> None:
        if codeword_len > (1 << self.field_bits):
            raise FieldSizeError(
                f"GF(2^{self.field_bits}) has too few points for a "
                f"{codeword_len}-symbol codeword")

    def field(self) -> GaloisField:
        return get_field(self.field_bits)


def field_bits_for_geometry(geometry: BlobGeometry) -> int:
    """Smallest supported field wide enough for both extended line lengths."""
    longest = max(geometry.extended_rows, geometry.extended_cols)
    return 8 if longest <= 256 else 16


class LineCodec:
    """Systematic rate-1/2 codec for lines of k source symbols."""

    def __init__(self, k: int, config: FieldConfig):
        if k < 1:
            raise ValueError("k must be at least 1")
        config.check_line(2 * k)
        self.k = k
        self.config = config
        self.field = config.field()
        self._pattern_cache: dict[tuple[int, ...], np.ndarray] = {}
        # Extension matrix: source values at points 0..k-1 -> values at k..2k-1.
        self._ext = self._eval_matrix(tuple(range(k)), np.arange(k, 2 * k))

    def _eval_matrix(self, basis: tuple[int, ...], targets: np.ndarray) -> np.ndarray:
        """M[t, i] = Lagrange basis polynomial L_i over ``basis``, at targets[t].

        Barycentric form: with w(X) = prod_j (X - s_j) and
        c_i = prod_{j != i} (s_i - s_j), the weight at a non-basis point t is
        w(t) / ((t - s_i) * c_i).  Subtraction is XOR in characteristic 2.
        """
        gf = self.field
        s = np.asarray(basis, dtype=SYM_DTYPE)
        k = len(s)
        diffs = s[:, None] ^ s[None, :]
        np.fill_diagonal(diffs, 1)  # neutral for the product
        logc = np.sum(gf.log[diffs], axis=1) % gf.q

        t = np.asarray(targets, dtype=SYM_DTYPE)
        td = t[:, None] ^ s[None, :]  # (T, k); zero row entries mark t in basis
        in_basis = td == 0
        td_safe = np.where(in_basis, 1, td)
        logtd = gf.log[td_safe]
        logw = np.sum(logtd, axis=1) % gf.q
        logm = (logw[:, None] - logtd - logc[None, :]) % gf.q
        m = gf.exp[logm]
        basis_rows = in_basis.any(axis=1)
        if basis_rows.any():
            m[basis_rows] = 0
            rows, cols = np.nonzero(in_basis)
            m[rows, cols] = 1
        return m

    def encode(self, data: np.ndarray) -> np.ndarray:
        """(k,) or (k, m) source symbols -> (2k,) or (2k, m) codeword."""
        data = np.asarray(data, dtype=SYM_DTYPE)
        single = data.ndim == 1
        if single:
            data = data[:, None]
        if data.shape[0] != self.k:
            raise ValueError(f"expected {self.k} source symbols, got {data.shape[0]}")
        parity = self.field.matmul(self._ext, data)
        code = np.concatenate([data, parity], axis=0)
        return code[:, 0] if single else code

    def _full_matrix(self, present: tuple[int, ...]) -> np.ndarray:
        """(2k, k) map from the first k present symbols to the full codeword."""
        cached = self._pattern_cache.get(present)
        if cached is None:
            basis = present[:self.k]
            cached = self._eval_matrix(basis, np.arange(2 * self.k))
            self._pattern_cache[present] = cached
        return cached

    def decode_codeword(self, present: tuple[int, ...], values: np.ndarray) -> np.ndarray:
        """Recover the full codeword from symbols at the ``present`` positions.

        ``values`` is (p,) or (p, m) aligned with ``present`` (sorted,
        duplicate-free).  Present symbols beyond the k used for interpolation
        are checked for consistency.
        """
        if len(present) < self.k:
            raise InsufficientShares(
                f"{len(present)} of {2 * self.k} symbols present, need {self.k}")
        values = np.asarray(values, dtype=SYM_DTYPE)
        single = values.ndim == 1
        if single:
            values = values[:, None]
        m = self._full_matrix(present)
        code = self.field.matmul(m, values[:self.k])
        if len(present) > self.k:
            extra = list(present[self.k:])
            if not np.array_equal(code[extra], values[self.k:]):
                raise DecodeInconsistent("present symbols disagree with interpolation")
        return code[:, 0] if single else code


_CODEC_CACHE: dict[tuple[int, int], LineCodec] = {}


def get_codec(k: int, config: FieldConfig) -> LineCodec:
    key = (k, config.field_bits)
    if key not in _CODEC_CACHE:
        _CODEC_CACHE[key] = LineCodec(k, config)
    return _CODEC_CACHE[key]


def rs_encode_line(data, field_bits: int | None = None) -> list[int]:
    """Encode k source symbols into a systematic 2k-symbol codeword."""
    data = list(data)
    k = len(data)
    if field_bits is None:
        field_bits = 8 if 2 * k <= 256 else 16
    codec = get_codec(k, FieldConfig(field_bits))
    return [int(v) for v in codec.encode(np.asarray(data, dtype=SYM_DTYPE))]

def rs_decode_line(received, field_bits: int | None = None) -> list[int]:
    """Recover the k source symbols from a 2k vector with ``None`` erasures."""
    received = list(received)
    if len(received) % 2:
        raise ValueError("received vector must have even length 2k")
    k = len(received) // 2
    if field_bits is None:
        field_bits = 8 if 2 * k <= 256 else 16
    codec = get_codec(k, FieldConfig(field_bits))
    present = tuple(i for i, v in enumerate(received) if v is not None)
    values = np.asarray([received[i] for i in present], dtype=SYM_DTYPE)
    code = codec.decode_codeword(present, values)
    return [int(v) for v in code[:k]]


class BlobMatrix:
    """Extended 2R x 2C cell grid with a presence mask.

    Payloads are stored as field symbols: shape (2R, 2C, S) where S is
    cell_payload_bytes / symbol_bytes.  Absent cells hold zeros and are
    flagged off in ``present``.
    """

    def __init__(self, geometry: BlobGeometry, field_bits: int | None = None):
        self.geometry = geometry
        self.field_bits = field_bits or field_bits_for_geometry(geometry)
        self.config = FieldConfig(self.field_bits)
        self.config.check_line(geometry.extended_rows)
        self.config.check_line(geometry.extended_cols)
        self.symbol_bytes = self.field_bits // 8
        if geometry.cell_payload_bytes % self.symbol_bytes:
            raise FieldSizeError(
                f"cell payload of {geometry.cell_payload_bytes} B is not a "
                f"multiple of the {self.symbol_bytes} B symbol size")
        self.symbols_per_cell = geometry.cell_payload_bytes // self.symbol_bytes
        shape = (geometry.extended_rows, geometry.extended_cols, self.symbols_per_cell)
        self.symbols = np.zeros(shape, dtype=SYM_DTYPE)
        self.present = np.zeros(shape[:2], dtype=bool)

    # -- cell access -------------------------------------------------------

    def _check(self, coord: CellCoordinate) -> None:
        g = self.geometry
        if not (0 <= coord.row < g.extended_rows and 0 <= coord.col < g.extended_cols):
            raise IndexError(f"{coord} outside {g.extended_rows}x{g.extended_cols}")

    def has_cell(self, coord: CellCoordinate) -> bool:
        self._check(coord)
        return bool(self.present[coord.row, coord.col])

    def payload_at(self, coord: CellCoordinate) -> bytes:
        self._check(coord)
        if not self.present[coord.row, coord.col]:
            raise KeyError(f"cell {coord} absent")
        return self._serialize(self.symbols[coord.row, coord.col])

    def set_cell(self, coord: CellCoordinate, payload: bytes) -> None:
        self._check(coord)
        if len(payload) != self.geometry.cell_payload_bytes:
            raise ValueError(f"payload must be {self.geometry.cell_payload_bytes} B")
        self.symbols[coord.row, coord.col] = self._deserialize(payload)
        self.present[coord.row, coord.col] = True

    def _serialize(self, syms: np.ndarray) -> bytes:
        width = ">u2" if self.symbol_bytes == 2 else ">u1"
        return syms.astype(width).tobytes()

    def _deserialize(self, payload: bytes) -> np.ndarray:
        width = ">u2" if self.symbol_bytes == 2 else ">u1"
        return np.frombuffer(payload, dtype=width).astype(SYM_DTYPE)

    # -- bulk properties -----------------------------------------------------

    @property
    def present_count(self) -> int:
        return int(self.present.sum())

    @property
    def is_complete(self) -> bool:
        return bool(self.present.all())

    def present_coords(self) -> list[CellCoordinate]:
        rows, cols = np.nonzero(self.present)
        return [CellCoordinate(int(r), int(c)) for r, c in zip(rows, cols)]

    def copy(self) -> "BlobMatrix":
        dup = BlobMatrix(self.geometry, self.field_bits)
        dup.symbols = self.symbols.copy()
        dup.present = self.present.copy()
        return dup

    def mask_to(self, keep: np.ndarray) -> "BlobMatrix":
        """Copy with presence restricted to the boolean ``keep`` mask."""
        dup = self.copy()
        dup.present &= keep
        dup.symbols[~dup.present] = 0
        return dup

    def equals(self, other: "BlobMatrix") -> bool:
        return (np.array_equal(self.present, other.present)
                and np.array_equal(self.symbols, other.symbols))


def random_source_symbols(geometry: BlobGeometry, rng: DeterministicRng,
                          field_bits: int | None = None) -> np.ndarray:
    """Uniform source payload symbols of shape (R, C, S)."""
    bits = field_bits or field_bits_for_geometry(geometry)
    symbol_bytes = bits // 8
    if geometry.cell_payload_bytes % symbol_bytes:
        raise FieldSizeError("payload size incompatible with field symbol size")
    s = geometry.cell_payload_bytes // symbol_bytes
    raw = rng.randbytes(geometry.source_rows * geometry.source_cols * geometry.cell_payload_bytes)
    width = ">u2" if symbol_bytes == 2 else ">u1"
    arr = np.frombuffer(raw, dtype=width).astype(SYM_DTYPE)
    return arr.reshape(geometry.source_rows, geometry.source_cols, s)


def extend_blob(source: np.ndarray, geometry: BlobGeometry,
                field_bits: int | None = None, columns_first: bool = False) -> BlobMatrix:
    """Extend an (R, C, S) source symbol array into a fully populated 2R x 2C blob.

    Rows are extended first, then every column of the row-extended matrix
    (``columns_first`` swaps the order; the product-code property makes the
    two orders agree, which the test suite checks explicitly).
    """
    blob = BlobMatrix(geometry, field_bits)
    source = np.asarray(source, dtype=SYM_DTYPE)
    r, c, s = (geometry.source_rows, geometry.source_cols, blob.symbols_per_cell)
    if source.shape != (r, c, s):
        raise ValueError(f"source shape {source.shape} != {(r, c, s)}")
    row_codec = get_codec(c, blob.config)   # along a row: c source symbols
    col_codec = get_codec(r, blob.config)   # along a column: r source symbols

    if not columns_first:
        # (R, C, S) -> rows doubled in width -> (R, 2C, S)
        data = source.transpose(1, 0, 2).reshape(c, r * s)
        wide = row_codec.encode(data).reshape(2 * c, r, s).transpose(1, 0, 2)
        # extend all 2C columns -> (2R, 2C, S)
        data = wide.reshape(r, 2 * c * s)
        full = col_codec.encode(data).reshape(2 * r, 2 * c, s)
    else:
        data = source.reshape(r, c * s)
        tall = col_codec.encode(data).reshape(2 * r, c, s)
        data = tall.transpose(1, 0, 2).reshape(c, 2 * r * s)
        full = row_codec.encode(data).reshape(2 * c, 2 * r, s).transpose(1, 0, 2)

    blob.symbols = full
    blob.present[:] = True
    return blob


@dataclass
class ReconstructionResult:
    """Outcome of iterative peeling: the (possibly partial) matrix and a flag."""

    matrix: BlobMatrix
    complete: bool
    rounds: int


def reconstruct_blob(partial: BlobMatrix) -> ReconstructionResult:
    """Peel a partial blob: decode any line with >= 50% present, to fixpoint.

    Never raises on missing data; an undecodable matrix comes back with
    ``complete=False`` at whatever fixpoint peeling reached.  Corrupt symbol
    sets (inconsistent with every codeword) raise :class:`DecodeInconsistent`.
    """
    blob = partial.copy()
    g = blob.geometry
    row_codec = get_codec(g.source_cols, blob.config)
    col_codec = get_codec(g.source_rows, blob.config)
    s = blob.symbols_per_cell
    rounds = 0
    progress = True
    while progress and not blob.present.all():
        progress = False
        rounds += 1
        # Rows: group incomplete-but-decodable rows by erasure pattern.
        groups: dict[tuple[int, ...], list[int]] = {}
        counts = blob.present.sum(axis=1)
        for r in range(g.extended_rows):
            if g.source_cols <= counts[r] < g.extended_cols:
                pattern = tuple(np.nonzero(blob.present[r])[0].tolist())
                groups.setdefault(pattern, []).append(r)
        for pattern, rows in groups.items():
            vals = blob.symbols[rows][:, list(pattern), :]             # (n, p, S)
            vals = vals.transpose(1, 0, 2).reshape(len(pattern), -1)   # (p, n*S)
            code = row_codec.decode_codeword(pattern, vals)
            blob.symbols[rows] = code.reshape(g.extended_cols, len(rows), s).transpose(1, 0, 2)
            blob.present[rows] = True
            progress = True
        if blob.present.all():
            break
        # Columns, same treatment.
        groups = {}
        counts = blob.present.sum(axis=0)
        for c in range(g.extended_cols):
            if g.source_rows <= counts[c] < g.extended_rows:
                pattern = tuple(np.nonzero(blob.present[:, c])[0].tolist())
                groups.setdefault(pattern, []).append(c)
        for pattern, cols in groups.items():
            vals = blob.symbols[:, cols, :][list(pattern)]             # (p, n, S)
            vals = vals.reshape(len(pattern), -1)
            code = col_codec.decode_codeword(pattern, vals)
            blob.symbols[:, cols, :] = code.reshape(g.extended_rows, len(cols), s)
            blob.present[:, cols] = True
            progress = True
    return ReconstructionResult(blob, bool(blob.present.all()), rounds)
