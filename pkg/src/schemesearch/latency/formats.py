"""Compact storage of structurally pruned conv weights.

Byte layout of a serialized SparseWeights (all integers little-endian)::

    magic      4s   b"SPW1"
    version    u1   1
    ptype      u1   0 filter, 1 pattern, 2 block
    dtype      u1   0 float32, 1 float64
    reserved   u1   0
    shape      4*u4 (c_out, c_in, n, n)
    -- filter --
    k          u4   kept filters
    index      k*u4 kept filter indices, ascending
    payload    k*c_in*n*n values
    -- pattern --
    n_lib      u1   library size
    library    n_lib*u2  9-bit codes, bit p = cell p of the row-major 3x3
    k          u4   kept kernels
    index      k*u4 kept kernels as flat o*c_in + i, ascending
    pattern    k*u1 library slot of each kept kernel
    payload    k*4 values, cells in ascending order
    -- block --
    b_in b_out 2*u2 block grid
    cells      u4   bits per block mask (n*n, or in-channels per block if n == 1)
    bits       b_out*b_in*ceil(cells/8) u1, numpy packbits order
    k          u4   payload length
    payload    k values, masked-dense entries in C order
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..pruning import BlockSpec, PruningMask, apply_mask
from ..space import PruningType

MAGIC = b"SPW1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class StructuralError(ValueError):
    """The mask does not have the structure the format requires."""


@dataclass
class SparseWeights:
    ptype: PruningType
    shape: tuple[int, int, int, int]
    dtype: np.dtype
    index: np.ndarray                    # kept filters (filter) or flat kernels (pattern)
    payload: np.ndarray
    library: tuple[int, ...] | None = None
    pattern: np.ndarray | None = None    # pattern: library slot per kept kernel
    block_spec: BlockSpec | None = None
    block_bits: np.ndarray | None = None  # block: (b_out, b_in, cells) bool

    @property
    def nbytes(self) -> int:
        return len(to_bytes(self))

    def mask(self) -> np.ndarray:
        c_out, c_in, n, _ = self.shape
        m = np.zeros(self.shape, dtype=bool)
        if self.ptype == PruningType.FILTER:
            m[self.index] = True
        elif self.ptype == PruningType.PATTERN:
            cells = _code_cells(np.asarray(self.library, dtype=np.int64))[self.pattern]
            m.reshape(-1, 9)[self.index] = cells
        else:
            ob, ib = c_out // self.block_spec.b_out, c_in // self.block_spec.b_in
            for bo in range(self.block_spec.b_out):
                for bi in range(self.block_spec.b_in):
                    on = self.block_bits[bo, bi]
                    if n > 1:
                        sub = np.broadcast_to(on.reshape(n, n), (ob, ib, n, n))
                    else:
                        sub = np.broadcast_to(on[None, :, None, None], (ob, ib, 1, 1))
                    m[bo * ob:(bo + 1) * ob, bi * ib:(bi + 1) * ib] = sub
        return m


def _code_cells(codes: np.ndarray) -> np.ndarray:
    return ((codes[:, None] >> np.arange(9)) & 1).astype(bool)


def _cell_codes(cells: np.ndarray) -> np.ndarray:
    return (cells.astype(np.int64) << np.arange(9)).sum(axis=-1)


def encode(w: np.ndarray, mask, ptype: PruningType | None = None,
           block_spec: BlockSpec | None = None, library=None) -> SparseWeights:
    """Pack the kept entries of ``w`` under a structural mask."""
    if isinstance(mask, PruningMask):
        ptype = mask.ptype if ptype is None else ptype
        block_spec = block_spec or mask.block_spec
        library = library if library is not None else mask.library
        mask = mask.mask
    if ptype is None:
        raise ValueError("ptype required with a raw mask")
    ptype = PruningType(ptype)
    w = np.asarray(w)
    mask = np.asarray(mask, dtype=bool)
    if w.ndim != 4 or w.shape != mask.shape:
        raise StructuralError(f"need matching 4-d weight and mask, got {w.shape} / {mask.shape}")
    if w.dtype not in _DTYPE_CODE:
        raise ValueError(f"unsupported dtype {w.dtype}")
    shape = tuple(int(s) for s in w.shape)
    c_out, c_in, n, _ = shape
    if ptype == PruningType.FILTER:
        rows = mask.reshape(c_out, -1)
        full, empty = rows.all(axis=1), ~rows.any(axis=1)
        if not (full | empty).all():
            raise StructuralError("filter format: some filters are partially masked")
        idx = np.flatnonzero(full).astype(np.uint32)
        return SparseWeights(ptype, shape, w.dtype, idx, np.ascontiguousarray(w[idx]))
    if ptype == PruningType.PATTERN:
        if n != 3:
            raise StructuralError("pattern format needs 3x3 kernels")
        cells = mask.reshape(-1, 9)
        counts = cells.sum(axis=1)
        if not np.isin(counts, (0, 4)).all():
            raise StructuralError("pattern format: kernels must keep 0 or 4 cells")
        idx = np.flatnonzero(counts == 4).astype(np.uint32)
        codes = _cell_codes(cells[idx])
        if library is None:
            library = tuple(int(c) for c in np.unique(codes))
        lib = np.asarray(library, dtype=np.int64)
        if len(lib) > 255:
            raise StructuralError("pattern library larger than 255 entries")
        slot = {int(c): s for s, c in enumerate(lib)}
        missing = sorted(set(int(c) for c in codes) - set(slot))
        if missing:
            raise StructuralError(f"pattern format: codes {missing} not in the library")
        pat = np.array([slot[int(c)] for c in codes], dtype=np.uint8)
        payload = w.reshape(-1, 9)[idx][cells[idx]].reshape(-1, 4)
        return SparseWeights(ptype, shape, w.dtype, idx, np.ascontiguousarray(payload),
                             library=tuple(int(c) for c in lib), pattern=pat)
    spec = (block_spec or BlockSpec()).clamp(c_in, c_out)
    ob, ib = c_out // spec.b_out, c_in // spec.b_in
    cells = n * n if n > 1 else ib
    bits = np.zeros((spec.b_out, spec.b_in, cells), dtype=bool)
    for bo in range(spec.b_out):
        for bi in range(spec.b_in):
            blk = mask[bo * ob:(bo + 1) * ob, bi * ib:(bi + 1) * ib]
            ref = blk[0, 0].ravel() if n > 1 else blk[0, :, 0, 0]
            same = (blk == ref.reshape(n, n)).all() if n > 1 else (blk[..., 0, 0] == ref).all()
            if not same:
                raise StructuralError(f"block format: block ({bo}, {bi}) is not uniform")
            bits[bo, bi] = ref
    sw = SparseWeights(ptype, shape, w.dtype, np.zeros(0, np.uint32),
                       np.ascontiguousarray(w[mask]), block_spec=spec, block_bits=bits)
    return sw


def decode(sw: SparseWeights) -> np.ndarray:
    """Dense tensor with +0.0 at every pruned position."""
    out = np.zeros(sw.shape, dtype=sw.dtype)
    if sw.ptype == PruningType.FILTER:
        out[sw.index] = sw.payload
    elif sw.ptype == PruningType.PATTERN:
        flat = out.reshape(-1, 9)
        cells = _code_cells(np.asarray(sw.library, dtype=np.int64))[sw.pattern]
        kept = np.zeros((len(sw.index), 9), dtype=sw.dtype)
        kept[cells] = sw.payload.ravel()
        flat[sw.index] = kept
    else:
        out[sw.mask()] = sw.payload
    return out


def masked_dense(w: np.ndarray, mask) -> np.ndarray:
    """What decode(encode(w, mask)) must reproduce."""
    return apply_mask(np.asarray(w), mask)


def to_bytes(sw: SparseWeights) -> bytes:
    dt = np.dtype(sw.dtype).newbyteorder("<")
    parts = [struct.pack("<4sBBBB4I", MAGIC, FORMAT_VERSION, int(sw.ptype),
                         _DTYPE_CODE[np.dtype(sw.dtype)], 0, *sw.shape)]
    if sw.ptype == PruningType.FILTER:
        parts.append(struct.pack("<I", len(sw.index)))
        parts.append(sw.index.astype("<u4").tobytes())
    elif sw.ptype == PruningType.PATTERN:
        parts.append(struct.pack("<B", len(sw.library)))
        parts.append(np.asarray(sw.library, dtype="<u2").tobytes())
        parts.append(struct.pack("<I", len(sw.index)))
        parts.append(sw.index.astype("<u4").tobytes())
        parts.append(sw.pattern.astype("u1").tobytes())
    else:
        cells = sw.block_bits.shape[-1]
        parts.append(struct.pack("<HHI", sw.block_spec.b_in, sw.block_spec.b_out, cells))
        parts.append(np.packbits(sw.block_bits, axis=-1).tobytes())
        parts.append(struct.pack("<I", sw.payload.size))
    parts.append(np.ascontiguousarray(sw.payload, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt: str):
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += struct.calcsize(fmt)
        return vals

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        a = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += dtype.itemsize * count
        return a.copy()


def from_bytes(buf: bytes) -> SparseWeights:
    r = _Reader(buf)
    try:
        magic, version, ptype, dcode, _, *shape = r.unpack("<4sBBBB4I")
    except struct.error as exc:
        raise ValueError("truncated sparse-weights header") from exc
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported sparse-weights version {version}")
    ptype = PruningType(ptype)
    dt = _DTYPES[dcode]
    shape = tuple(shape)
    c_out, c_in, n, _ = shape
    if ptype == PruningType.FILTER:
        (k,) = r.unpack("<I")
        idx = r.array("<u4", k)
        payload = r.array(dt, k * c_in * n * n).reshape(k, c_in, n, n)
        sw = SparseWeights(ptype, shape, dt.newbyteorder("="), idx, payload)
    elif ptype == PruningType.PATTERN:
        (nlib,) = r.unpack("<B")
        lib = tuple(int(c) for c in r.array("<u2", nlib))
        (k,) = r.unpack("<I")
        idx = r.array("<u4", k)
        pat = r.array("u1", k)
        payload = r.array(dt, 4 * k).reshape(k, 4)
        sw = SparseWeights(ptype, shape, dt.newbyteorder("="), idx, payload, library=lib,
                           pattern=pat)
    else:
        b_in, b_out, cells = r.unpack("<HHI")
        nb = (cells + 7) // 8
        packed = r.array("u1", b_out * b_in * nb).reshape(b_out, b_in, nb)
        bits = np.unpackbits(packed, axis=-1, count=cells).astype(bool)
        (k,) = r.unpack("<I")
        payload = r.array(dt, k)
        sw = SparseWeights(ptype, shape, dt.newbyteorder("="), np.zeros(0, np.uint32), payload,
                           block_spec=BlockSpec(b_in, b_out), block_bits=bits)
    if r.pos != len(buf):
        raise ValueError(f"{len(buf) - r.pos} trailing bytes after sparse weights")
    sw.payload = sw.payload.astype(sw.dtype, copy=False)
    return sw


def save(path, sw: SparseWeights) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(sw))


def load(path) -> SparseWeights:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def dense_nbytes(shape, dtype=np.float32) -> int:
    return int(np.prod(shape)) * np.dtype(dtype).itemsize
