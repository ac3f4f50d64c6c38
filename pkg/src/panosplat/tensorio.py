"""Binary tensor and archive files, plus the text format for 3D box labels.

Tensor file (KTSR)::

    magic   6 bytes  b"KTSR1\\x00"
    dtype   1 byte   0=float32, 1=float64, 2=uint8, 3=int32
    ndim    1 byte
    shape   ndim little-endian uint64
    payload little-endian, C (row-major) order

Archive file (KTAR)::

    magic   6 bytes  b"KTAR1\\x00"
    count   little-endian uint32
    entry   repeated: 1-byte name length, UTF-8 name, embedded tensor record

Annotation text: one box per line, ``category_id cx cy cz sx sy sz yaw``,
whitespace separated; ``#`` starts a comment.  All distances in meters, yaw
in radians about the vertical (z) axis.
"""

import io
import struct

import numpy as np

TENSOR_MAGIC = b"KTSR1\x00"
ARCHIVE_MAGIC = b"KTAR1\x00"

# dtype code <-> numpy dtype; payload is always little-endian.
_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i4"),
}
_CODES = {np.dtype(d).newbyteorder("="): c for c, d in _DTYPES.items()}


class TensorIOError(ValueError):
    """Base class for malformed tensor/archive/annotation data."""


class BadMagicError(TensorIOError):
    pass


class TruncatedFileError(TensorIOError):
    pass


class UnknownDtypeError(TensorIOError):
    pass


class DuplicateNameError(TensorIOError):
    pass


class AnnotationError(TensorIOError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("=")
    if key not in _CODES:
        raise UnknownDtypeError(
            f"dtype {arr.dtype} not serializable; supported: float32, float64, uint8, int32"
        )
    return _CODES[key]


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Serialized record for one array."""
    arr = np.asarray(arr)  # tobytes() below always emits C order
    code = _dtype_code(arr)
    head = TENSOR_MAGIC + struct.pack("<BB", code, arr.ndim)
    shape = b"".join(struct.pack("<Q", s) for s in arr.shape)
    payload = arr.astype(_DTYPES[code], copy=False).tobytes()
    return head + shape + payload


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(arr))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"unexpected end of data while reading {what}")
    return buf


def _read_tensor_record(fh) -> np.ndarray:
    magic = _read_exact(fh, len(TENSOR_MAGIC), "tensor magic")
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"bad tensor magic {magic!r}")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
    if code not in _DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    shape = struct.unpack(
        "<" + "Q" * ndim, _read_exact(fh, 8 * ndim, "tensor shape")
    )
    dtype = _DTYPES[code]
    count = 1
    for s in shape:
        count *= s
    payload = _read_exact(fh, count * dtype.itemsize, "tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.copy()  # own the memory, native layout


def read_tensor(path) -> np.ndarray:
    """Read one tensor file.  Trailing bytes after the payload are ignored."""
    with open(path, "rb") as fh:
        return _read_tensor_record(fh)


def archive_bytes(entries) -> bytes:
    """Serialize named tensors.  ``entries`` is a mapping or (name, array) pairs."""
    if hasattr(entries, "items"):
        pairs = list(entries.items())
    else:
        pairs = list(entries)
    seen = set()
    out = io.BytesIO()
    out.write(ARCHIVE_MAGIC)
    out.write(struct.pack("<I", len(pairs)))
    for name, arr in pairs:
        if name in seen:
            raise DuplicateNameError(f"duplicate archive entry {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        if not 1 <= len(raw) <= 255:
            raise TensorIOError(f"entry name must be 1..255 UTF-8 bytes, got {name!r}")
        out.write(struct.pack("<B", len(raw)))
        out.write(raw)
        out.write(tensor_bytes(arr))
    return out.getvalue()


def write_archive(path, entries) -> None:
    with open(path, "wb") as fh:
        fh.write(archive_bytes(entries))


def read_archive(path) -> dict[str, np.ndarray]:
    """Read an archive into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(ARCHIVE_MAGIC), "archive magic")
        if magic != ARCHIVE_MAGIC:
            raise BadMagicError(f"bad archive magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "archive count"))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<B", _read_exact(fh, 1, "entry name length"))
            if nlen == 0:
                raise TensorIOError("empty archive entry name")
            name = _read_exact(fh, nlen, "entry name").decode("utf-8")
            if name in out:
                raise DuplicateNameError(f"duplicate archive entry {name!r}")
            out[name] = _read_tensor_record(fh)
        return out


# --------------------------------------------------------------------------
# Box annotations


class BoxAnnotation:
    """Ground-truth 3D box: category id, center, size, yaw about z."""

    __slots__ = ("category_id", "center", "size", "yaw")

    def __init__(self, category_id, center, size, yaw):
        self.category_id = int(category_id)
        self.center = (float(center[0]), float(center[1]), float(center[2]))
        self.size = (float(size[0]), float(size[1]), float(size[2]))
        self.yaw = float(yaw)

    def __repr__(self):
        return (
            f"BoxAnnotation(category_id={self.category_id}, center={self.center}, "
            f"size={self.size}, yaw={self.yaw})"
        )

    def __eq__(self, other):
        return (
            isinstance(other, BoxAnnotation)
            and self.category_id == other.category_id
            and self.center == other.center
            and self.size == other.size
            and self.yaw == other.yaw
        )


def _validate_box_fields(category_id, size, yaw, num_categories, lineno):
    if not 0 <= category_id < num_categories:
        raise AnnotationError(
            f"line {lineno}: category id {category_id} outside [0, {num_categories})"
        )
    if not all(s > 0 for s in size):
        raise AnnotationError(f"line {lineno}: non-positive box size {size}")
    if not -np.pi <= yaw <= np.pi:
        raise AnnotationError(f"line {lineno}: yaw {yaw} outside [-pi, pi]")


def _annotation_rows(path, expected_fields):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            fields = body.split()
            if len(fields) != expected_fields:
                raise AnnotationError(
                    f"line {lineno}: expected {expected_fields} fields, got {len(fields)}"
                )
            try:
                cat = int(fields[0])
                vals = [float(f) for f in fields[1:]]
            except ValueError as exc:
                raise AnnotationError(f"line {lineno}: {exc}") from exc
            yield lineno, cat, vals


def load_annotations(path, num_categories: int) -> list[BoxAnnotation]:
    boxes = []
    for lineno, cat, vals in _annotation_rows(path, 8):
        center, size, yaw = vals[0:3], vals[3:6], vals[6]
        _validate_box_fields(cat, size, yaw, num_categories, lineno)
        boxes.append(BoxAnnotation(cat, center, size, yaw))
    return boxes


def save_annotations(path, boxes, header_lines=()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for b in boxes:
            fields = [str(b.category_id)]
            fields += [repr(v) for v in (*b.center, *b.size, b.yaw)]
            fh.write(" ".join(fields) + "\n")
