"""File formats: PLY meshes/point sets, camera trajectories, 16-bit depth
images and raw little-endian float tensors.

All readers validate their input and raise :class:`PlyError` /
:class:`FormatError` with a line number or byte offset on malformed data.
Writers are deterministic: the same data always produces the same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class PlyError(ValueError):
    """Malformed PLY input; carries a line number (ASCII) or byte offset."""


class FormatError(ValueError):
    """Malformed binary tensor or weights file; carries a byte offset."""


# PLY scalar type name -> numpy dtype (little-endian where it matters)
_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}

_DTYPE_TO_PLY = {
    np.dtype(np.int8): "char",
    np.dtype(np.uint8): "uchar",
    np.dtype(np.int16): "short",
    np.dtype(np.uint16): "ushort",
    np.dtype(np.int32): "int",
    np.dtype(np.uint32): "uint",
    np.dtype(np.float32): "float",
    np.dtype(np.float64): "double",
}


@dataclass
class PlyData:
    """Parsed PLY content: vertex properties by name plus optional faces."""

    vertex: dict[str, np.ndarray] = field(default_factory=dict)
    faces: list[np.ndarray] = field(default_factory=list)
    comments: list[str] = field(default_factory=list)

    @property
    def num_vertices(self) -> int:
        if not self.vertex:
            return 0
        return len(next(iter(self.vertex.values())))


def _parse_header(lines: list[bytes]):
    """Parse header lines (already split, without terminators)."""
    if not lines or lines[0].strip() != b"ply":
        raise PlyError("line 1: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, is_list, count_dtype)])
    comments = []
    for ln, raw in enumerate(lines[1:], start=2):
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens:
            continue
        kw = tokens[0]
        if kw == "comment":
            comments.append(raw.decode("ascii", errors="replace")[8:])
        elif kw == "format":
            if len(tokens) != 3:
                raise PlyError(f"line {ln}: malformed format line")
            fmt = tokens[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {ln}: unsupported format '{fmt}'")
        elif kw == "element":
            if len(tokens) != 3:
                raise PlyError(f"line {ln}: malformed element line")
            try:
                count = int(tokens[2])
            except ValueError:
                raise PlyError(f"line {ln}: bad element count '{tokens[2]}'")
            elements.append((tokens[1], count, []))
        elif kw == "property":
            if not elements:
                raise PlyError(f"line {ln}: property before any element")
            if tokens[1] == "list":
                if len(tokens) != 5:
                    raise PlyError(f"line {ln}: malformed list property")
                cnt_t, idx_t, name = tokens[2], tokens[3], tokens[4]
                if cnt_t not in _PLY_DTYPES or idx_t not in _PLY_DTYPES:
                    raise PlyError(f"line {ln}: unknown list property type")
                elements[-1][2].append((name, _PLY_DTYPES[idx_t], True, _PLY_DTYPES[cnt_t]))
            else:
                if len(tokens) != 3:
                    raise PlyError(f"line {ln}: malformed property line")
                if tokens[1] not in _PLY_DTYPES:
                    raise PlyError(f"line {ln}: unknown property type '{tokens[1]}'")
                elements[-1][2].append((tokens[2], _PLY_DTYPES[tokens[1]], False, None))
        elif kw == "end_header":
            if fmt is None:
                raise PlyError(f"line {ln}: end_header before format line")
            return fmt, elements, comments, ln
        elif kw == "obj_info":
            continue
        else:
            raise PlyError(f"line {ln}: unexpected header keyword '{kw}'")
    raise PlyError("missing end_header")


def read_ply(path: str | Path) -> PlyData:
    """Read an ASCII or binary little-endian PLY file."""
    blob = Path(path).read_bytes()
    header_end = blob.find(b"end_header")
    if header_end < 0:
        raise PlyError("missing end_header")
    nl = blob.find(b"\n", header_end)
    if nl < 0:
        raise PlyError("no data after end_header")
    header_lines = blob[:nl].replace(b"\r\n", b"\n").split(b"\n")
    fmt, elements, comments, header_line_count = _parse_header(header_lines)
    body = blob[nl + 1:]

    out = PlyData(comments=comments)
    if fmt == "ascii":
        _read_ascii_body(body, elements, out, first_line=header_line_count + 1)
    else:
        _read_binary_body(body, elements, out, base_offset=nl + 1)
    if out.num_vertices == 0:
        raise PlyError("empty vertex element")
    return out


def _read_ascii_body(body: bytes, elements, out: PlyData, first_line: int):
    lines = body.replace(b"\r\n", b"\n").split(b"\n")
    cursor = 0

    def next_line():
        nonlocal cursor
        while cursor < len(lines):
            ln = lines[cursor]
            cursor += 1
            if ln.strip():
                return ln, first_line + cursor - 1
        return None, first_line + cursor

    for name, count, props in elements:
        if any(p[2] for p in props):  # list properties (faces)
            for _ in range(count):
                raw, ln = next_line()
                if raw is None:
                    raise PlyError(f"line {ln}: unexpected end of file in '{name}'")
                tokens = raw.split()
                try:
                    n = int(tokens[0])
                    idx = np.array([int(t) for t in tokens[1:1 + n]], dtype=np.int64)
                except (ValueError, IndexError):
                    raise PlyError(f"line {ln}: malformed list row")
                if len(idx) != n:
                    raise PlyError(f"line {ln}: list row shorter than its count")
                if name == "face":
                    out.faces.append(idx)
        else:
            cols = {p[0]: [] for p in props}
            rows = []
            for _ in range(count):
                raw, ln = next_line()
                if raw is None:
                    raise PlyError(f"line {ln}: unexpected end of file in '{name}'")
                tokens = raw.split()
                if len(tokens) != len(props):
                    raise PlyError(
                        f"line {ln}: expected {len(props)} values, got {len(tokens)}")
                try:
                    rows.append([float(t) for t in tokens])
                except ValueError:
                    raise PlyError(f"line {ln}: non-numeric value")
            if name == "vertex":
                arr = np.asarray(rows, dtype=np.float64)
                if count and arr.ndim != 2:
                    raise PlyError(f"line {ln}: ragged vertex rows")
                for j, (pname, dt, _, _) in enumerate(props):
                    out.vertex[pname] = arr[:, j].astype(np.dtype(dt)) if count else \
                        np.empty(0, dtype=np.dtype(dt))
            del cols


def _read_binary_body(body: bytes, elements, out: PlyData, base_offset: int):
    offset = 0
    for name, count, props in elements:
        if any(p[2] for p in props):
            if len(props) != 1:
                raise PlyError(f"mixed list/scalar properties in '{name}' unsupported")
            _, idx_dt, _, cnt_dt = props[0]
            idx_size = np.dtype(idx_dt).itemsize
            cnt_size = np.dtype(cnt_dt).itemsize
            for _ in range(count):
                if offset + cnt_size > len(body):
                    raise PlyError(f"byte {base_offset + offset}: truncated '{name}' element")
                n = int(np.frombuffer(body, dtype=cnt_dt, count=1, offset=offset)[0])
                offset += cnt_size
                need = n * idx_size
                if offset + need > len(body):
                    raise PlyError(f"byte {base_offset + offset}: truncated '{name}' list")
                idx = np.frombuffer(body, dtype=idx_dt, count=n, offset=offset).astype(np.int64)
                offset += need
                if name == "face":
                    out.faces.append(idx)
        else:
            dtype = np.dtype([(p[0], p[1]) for p in props])
            need = count * dtype.itemsize
            if offset + need > len(body):
                raise PlyError(f"byte {base_offset + offset}: truncated '{name}' element")
            rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            offset += need
            if name == "vertex":
                for pname, dt, _, _ in props:
                    out.vertex[pname] = rec[pname].copy()


def write_ply(path: str | Path, vertex: dict[str, np.ndarray],
              faces: list[np.ndarray] | np.ndarray | None = None,
              binary: bool = False, comments: tuple[str, ...] = ()) -> None:
    """Write a PLY file; property order follows the `vertex` dict order."""
    names = list(vertex)
    if not names:
        raise ValueError("no vertex properties to write")
    n = len(vertex[names[0]])
    for name in names:
        if len(vertex[name]) != n:
            raise ValueError(f"property '{name}' length mismatch")

    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    arrays = {}
    for name in names:
        arr = np.asarray(vertex[name])
        if arr.dtype not in _DTYPE_TO_PLY:
            raise ValueError(f"unsupported dtype {arr.dtype} for property '{name}'")
        header.append(f"property {_DTYPE_TO_PLY[arr.dtype]} {name}")
        arrays[name] = arr
    if faces is not None:
        faces = [np.asarray(f, dtype=np.int32) for f in faces]
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dtype = np.dtype([(name, arrays[name].dtype.newbyteorder("<"))
                              for name in names])
            rec = np.empty(n, dtype=dtype)
            for name in names:
                rec[name] = arrays[name]
            fh.write(rec.tobytes())
            if faces is not None:
                for f in faces:
                    fh.write(struct.pack("<B", len(f)))
                    fh.write(f.astype("<i4").tobytes())
        else:
            cols = []
            for name in names:
                a = arrays[name]
                if a.dtype.kind == "f":
                    cols.append([repr(float(v)) for v in a])
                else:
                    cols.append([str(int(v)) for v in a])
            for i in range(n):
                fh.write((" ".join(col[i] for col in cols) + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write((" ".join([str(len(f))] + [str(int(v)) for v in f]) + "\n")
                             .encode("ascii"))


# ---------------------------------------------------------------------------
# Trajectories: one line per frame, "timestamp tx ty tz qx qy qz qw",
# camera-to-world.
# ---------------------------------------------------------------------------

def read_trajectory(path: str | Path):
    """Return (timestamps (F,), translations (F,3), quaternions (F,4) xyzw)."""
    ts, trans, quats = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 8:
                raise FormatError(f"line {ln}: expected 8 fields, got {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise FormatError(f"line {ln}: non-numeric field")
            ts.append(vals[0])
            trans.append(vals[1:4])
            quats.append(vals[4:8])
    return (np.asarray(ts, dtype=np.float64),
            np.asarray(trans, dtype=np.float64).reshape(-1, 3),
            np.asarray(quats, dtype=np.float64).reshape(-1, 4))


def write_trajectory(path: str | Path, timestamps, translations, quaternions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, tr, q in zip(timestamps, translations, quaternions):
            fields = [t, *tr, *q]
            fh.write(" ".join(repr(float(v)) for v in fields) + "\n")


# ---------------------------------------------------------------------------
# Depth maps: 16-bit grayscale images, meters = stored value * depth_scale.
# ---------------------------------------------------------------------------

def read_depth(path: str | Path, depth_scale: float) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype != np.uint16:
        arr = arr.astype(np.uint16)
    return arr.astype(np.float64) * depth_scale


def write_depth(path: str | Path, depth_m: np.ndarray, depth_scale: float) -> None:
    vals = np.round(np.asarray(depth_m, dtype=np.float64) / depth_scale)
    vals = np.clip(vals, 0, 65535).astype(np.uint16)
    Image.fromarray(vals).save(path)


# ---------------------------------------------------------------------------
# Raw tensors: magic "SMPT", u32 rank, u32 dims[rank], little-endian f32
# payload, row-major.
# ---------------------------------------------------------------------------

_TENSOR_MAGIC = b"SMPT"


def read_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError("byte 0: file shorter than tensor header")
    if blob[:4] != _TENSOR_MAGIC:
        raise FormatError("byte 0: bad magic, expected 'SMPT'")
    rank = struct.unpack_from("<I", blob, 4)[0]
    if rank > 8:
        raise FormatError(f"byte 4: implausible rank {rank}")
    need = 8 + 4 * rank
    if len(blob) < need:
        raise FormatError(f"byte 8: truncated dims (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) < need + 4 * count:
        raise FormatError(f"byte {need}: truncated payload, expected {count} floats")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=need)
    return data.reshape(dims).astype(np.float64)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
