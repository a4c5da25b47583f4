"""Parameter serialization: aligned little-endian byte stream with CRS support.

Stream layout (all integers little-endian):

    header (16 bytes):
        0   magic  "TFWS"
        4   u16    version (1)
        6   u16    flags (0)
        8   u32    descriptor count
        12  u32    payload length in bytes
    descriptor table: 48 bytes per tensor
        0   u8     dtype code (0 = f32, 1 = u8, 2 = i32)
        1   u8     layout (0 = dense, 1 = crs)
        2   u8     ndim
        3   u8     col_ind width in bytes (0 for dense, else 2 or 4)
        4   u8     zero point
        5   u8[3]  reserved
        8   u32[4] dims (trailing entries 0)
        24  u32    offset into payload (4-byte aligned)
        28  u32    region length in bytes
        32  u32    nnz (crs only, else 0)
        36  u32    reserved
        40  f64    scale (0.0 when unquantized)
    payload: tensor regions, each 4-byte aligned.

A dense region is the raw tensor bytes. A CRS region holds three arrays
back to back, each padded to 4-byte alignment: values (nnz elements),
col_ind (nnz indices, u16 or u32), row_ptr (rows + 1 of i32). Tensors of
more than two dimensions are flattened to (dims[0], prod(dims[1:])) before
CRS conversion; "zero" means the zero point for quantized tensors and
exact 0.0 for floats (negative zero is kept explicit so round trips are
bit-exact).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .ir import ELEM_SIZE, Graph, OPS, TensorDesc, np_dtype, toposort

MAGIC = b"TFWS"
VERSION = 1
HEADER_SIZE = 16
DESC_SIZE = 48
ALIGN = 4

_DTYPE_CODE = {"f32": 0, "u8": 1, "i32": 2}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}

# one 48-byte record: 5 tag bytes, pad, 4 dims, offset, nbytes, nnz, pad, scale
_RECORD_FMT = "<BBBBB3x7I4xd"
assert struct.calcsize(_RECORD_FMT) == DESC_SIZE


def align_up(n: int, a: int = ALIGN) -> int:
    return (n + a - 1) // a * a


@dataclass
class CrsTensor:
    """Compressed row storage: non-zero values, column indices, row pointers."""

    values: np.ndarray
    col_ind: np.ndarray
    row_ptr: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def rows(self) -> int:
        return int(self.row_ptr.size - 1)

    def validate(self, cols: int | None = None) -> None:
        rp = self.row_ptr
        if rp.size < 1 or rp[0] != 0 or rp[-1] != self.nnz:
            raise ValueError("row_ptr must start at 0 and end at nnz")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if self.col_ind.size != self.nnz:
            raise ValueError("col_ind length must equal nnz")
        for r in range(self.rows):
            ci = self.col_ind[rp[r]:rp[r + 1]]
            if ci.size and np.any(np.diff(ci) <= 0):
                raise ValueError(f"col_ind not strictly increasing in row {r}")
        if cols is not None and self.nnz and int(self.col_ind.max()) >= cols:
            raise ValueError("column index out of range")


def _nonzero_mask(x: np.ndarray, zero) -> np.ndarray:
    mask = x != zero
    if np.issubdtype(x.dtype, np.floating) and zero == 0:
        mask |= np.signbit(x) & (x == 0)  # keep explicit -0.0
    return mask


def crs_encode(dense: np.ndarray, zero=0) -> CrsTensor:
    """Encode a 2-D tensor; entries equal to ``zero`` are dropped."""
    dense = np.asarray(dense)
    if dense.ndim != 2:
        raise ValueError(f"crs_encode requires a 2-D tensor, got shape {dense.shape}")
    mask = _nonzero_mask(dense, zero)
    counts = mask.sum(axis=1)
    row_ptr = np.zeros(dense.shape[0] + 1, dtype=np.int32)
    np.cumsum(counts, out=row_ptr[1:])
    rows, cols = np.nonzero(mask)
    return CrsTensor(values=dense[rows, cols].copy(),
                     col_ind=cols.astype(np.int32),
                     row_ptr=row_ptr)


def crs_decode(crs: CrsTensor, shape: tuple[int, int], zero=0, dtype=None) -> np.ndarray:
    """Inverse of crs_encode: absent entries take the ``zero`` value."""
    rows, cols = shape
    if crs.rows != rows:
        raise ValueError(f"row count {crs.rows} != shape rows {rows}")
    crs.validate(cols)
    out = np.full(shape, zero, dtype=dtype if dtype is not None else crs.values.dtype)
    r = np.repeat(np.arange(rows), np.diff(crs.row_ptr))
    out[r, crs.col_ind] = crs.values
    return out


def crs_col_width(cols: int) -> int:
    return 2 if cols <= 0xFFFF else 4


def crs_bytes(shape: tuple[int, int], nnz: int, dtype: str) -> int:
    rows, cols = shape
    return nnz * (ELEM_SIZE[dtype] + crs_col_width(cols)) + (rows + 1) * 4


def crs_feasible(shape: tuple[int, int], nnz: int, dtype: str) -> tuple[bool, int, int]:
    """Whether CRS beats the dense layout; returns (feasible, dense, crs) byte sizes.

    Quantized (1-byte) tensors need strictly more sparsity than f32 before
    the index overhead pays off, which is why element-pruned u8 models keep
    their dense size over a wider range of pruning rates.
    """
    rows, cols = shape
    dense = rows * cols * ELEM_SIZE[dtype]
    crs = crs_bytes(shape, nnz, dtype)
    return crs < dense, dense, crs


@dataclass
class StreamDescriptor:
    name: str
    dtype: str
    layout: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int
    nnz: int = 0
    col_width: int = 0
    scale: float = 0.0
    zero_point: int = 0

    def logical2d(self) -> tuple[int, int]:
        rows = self.shape[0]
        cols = 1
        for d in self.shape[1:]:
            cols *= d
        return rows, cols

    def pack_record(self) -> bytes:
        if len(self.shape) > 4:
            raise ValueError(f"descriptor supports at most 4 dims, got {self.shape}")
        dims = list(self.shape) + [0] * (4 - len(self.shape))
        return struct.pack(
            _RECORD_FMT,
            _DTYPE_CODE[self.dtype],
            0 if self.layout == "dense" else 1,
            len(self.shape),
            self.col_width,
            self.zero_point,
            *dims,
            self.offset,
            self.nbytes,
            self.nnz,
            self.scale,
        )

    @staticmethod
    def unpack_record(raw: bytes, name: str = "") -> "StreamDescriptor":
        (code, layout, ndim, colw, zp, d0, d1, d2, d3,
         offset, nbytes, nnz, scale) = struct.unpack(_RECORD_FMT, raw)
        dims = (d0, d1, d2, d3)[:ndim]
        return StreamDescriptor(
            name=name, dtype=_CODE_DTYPE[code],
            layout="dense" if layout == 0 else "crs",
            shape=tuple(int(d) for d in dims), offset=int(offset),
            nbytes=int(nbytes), nnz=int(nnz), col_width=int(colw),
            scale=float(scale), zero_point=int(zp),
        )


@dataclass
class PackedStream:
    """Header + descriptor table + aligned payload, ready to write or embed."""

    descriptors: list[StreamDescriptor] = field(default_factory=list)
    payload: bytes = b""

    @property
    def payload_offset(self) -> int:
        return HEADER_SIZE + DESC_SIZE * len(self.descriptors)

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<HHII", VERSION, 0, len(self.descriptors), len(self.payload))
        table = b"".join(d.pack_record() for d in self.descriptors)
        return head + table + self.payload

    def __len__(self) -> int:
        return self.payload_offset + len(self.payload)

    def save(self, path: str) -> str:
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        return path

    @staticmethod
    def from_bytes(data: bytes) -> "PackedStream":
        if data[:4] != MAGIC:
            raise ValueError("bad stream magic")
        version, _flags, count, payload_len = struct.unpack("<HHII", data[4:16])
        if version != VERSION:
            raise ValueError(f"unsupported stream version {version}")
        descs = []
        for i in range(count):
            raw = data[HEADER_SIZE + i * DESC_SIZE:HEADER_SIZE + (i + 1) * DESC_SIZE]
            descs.append(StreamDescriptor.unpack_record(raw, name=f"t{i}"))
        payload = data[HEADER_SIZE + count * DESC_SIZE:]
        if len(payload) != payload_len:
            raise ValueError("stream payload length mismatch")
        return PackedStream(descriptors=descs, payload=payload)


def _crs_zero(desc: TensorDesc):
    if desc.dtype == "u8" and desc.quant is not None:
        return desc.quant.zero_point
    return np.float32(0.0) if desc.dtype == "f32" else 0


def packed_param_order(g: Graph) -> list[str]:
    """Topological node order, then each node's parameters in role order."""
    seen: list[str] = []
    for n in toposort(g):
        for role in OPS[n.op]["params"]:
            name = n.params[role]
            if name not in seen:
                seen.append(name)
    for name in g.param_order:
        if name not in seen:
            seen.append(name)
    return seen


def pack(g: Graph) -> PackedStream:
    """Serialize all parameter tensors; CRS is chosen per tensor when it wins."""
    stream = PackedStream()
    payload = bytearray()

    def put(raw: bytes) -> tuple[int, int]:
        pad = align_up(len(payload)) - len(payload)
        payload.extend(b"\x00" * pad)
        start = len(payload)
        payload.extend(raw)
        return start, len(raw)

    for name in packed_param_order(g):
        p = g.params[name]
        desc = p.desc
        q = desc.quant
        scale = float(q.scale) if q is not None else 0.0
        zp = int(q.zero_point) if q is not None else 0
        values = np.ascontiguousarray(p.values, dtype=np_dtype(desc.dtype))

        layout = "dense"
        nnz = 0
        colw = 0
        if len(desc.shape) >= 2 and desc.dtype in ("f32", "u8"):
            flat = values.reshape(desc.shape[0], -1)
            zero = _crs_zero(desc)
            nnz_cand = int(_nonzero_mask(flat, zero).sum())
            feasible, _dense_b, _crs_b = crs_feasible(flat.shape, nnz_cand, desc.dtype)
            if feasible:
                layout = "crs"
                nnz = nnz_cand
                colw = crs_col_width(flat.shape[1])

        if layout == "dense":
            offset, _ = put(values.tobytes())
            region_end = len(payload)
        else:
            crs = crs_encode(flat, zero=zero)
            offset, _ = put(crs.values.tobytes())
            ci = crs.col_ind.astype("<u2" if colw == 2 else "<u4")
            put(ci.tobytes())
            put(crs.row_ptr.astype("<i4").tobytes())
            region_end = len(payload)

        stream.descriptors.append(StreamDescriptor(
            name=name, dtype=desc.dtype, layout=layout, shape=desc.shape,
            offset=offset, nbytes=region_end - offset, nnz=nnz, col_width=colw,
            scale=scale, zero_point=zp,
        ))

    stream.payload = bytes(payload)
    return stream


def crs_from_region(d: StreamDescriptor, payload: bytes) -> CrsTensor:
    """Reconstruct the three CRS arrays from a descriptor's payload region."""
    esize = ELEM_SIZE[d.dtype]
    vals_len = align_up(d.nnz * esize)
    ci_len = align_up(d.nnz * d.col_width)
    base = d.offset
    values = np.frombuffer(payload[base:base + d.nnz * esize], dtype=np_dtype(d.dtype))
    ci_dt = np.dtype("<u2") if d.col_width == 2 else np.dtype("<u4")
    col_ind = np.frombuffer(payload[base + vals_len:base + vals_len + d.nnz * d.col_width],
                            dtype=ci_dt).astype(np.int32)
    rows = d.shape[0]
    rp_off = base + vals_len + ci_len
    row_ptr = np.frombuffer(payload[rp_off:rp_off + (rows + 1) * 4], dtype="<i4")
    return CrsTensor(values=values.copy(), col_ind=col_ind, row_ptr=row_ptr.copy())


def unpack(stream: PackedStream) -> list[tuple[StreamDescriptor, np.ndarray]]:
    """Reconstruct every tensor (densified) bit-exactly from the stream."""
    out = []
    for d in stream.descriptors:
        if d.layout == "dense":
            raw = stream.payload[d.offset:d.offset + d.nbytes]
            arr = np.frombuffer(raw[:np.prod(d.shape, dtype=int) * ELEM_SIZE[d.dtype]],
                                dtype=np_dtype(d.dtype)).reshape(d.shape).copy()
        else:
            crs = crs_from_region(d, stream.payload)
            zero = d.zero_point if d.dtype == "u8" else 0
            flat = crs_decode(crs, d.logical2d(), zero=zero, dtype=np_dtype(d.dtype))
            arr = flat.reshape(d.shape)
        out.append((d, arr))
    return out
