# voxel_grid.py - Voxel grid data model, VGRID file I/O and component analysis
#
# Every object in matgan3d (training grain, generated sample, primitive solid)
# travels as a VoxelGrid: a dense (nx, ny, nz) occupancy array, z fastest.

import os
import struct

import numpy as np
from scipy import ndimage

import matgan_logger as _mlog

logger = _mlog.get("voxel_grid")

# ========== FILE FORMAT ==========
MAGIC = b"VGRD"
FORMAT_VERSION = 1
KIND_BINARY = 0
KIND_FLOAT = 1
KIND_LABELS = 2

# magic | version u16 | kind u16 | nx ny nz u32 | pitch f32
HEADER = struct.Struct("<4sHHIIIf")
_PAYLOAD_DTYPE = {KIND_BINARY: np.dtype("u1"), KIND_FLOAT: np.dtype("<f4"), KIND_LABELS: np.dtype("<u4")}

# Tribeam voxel edge, micrometres
DEFAULT_PITCH_UM = 1.5
MAX_VOXELS = 1 << 30

# 6-connectivity: face neighbours only
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


class VoxelFormatError(IOError):
    """Malformed VGRID/binvox file. `offset` is the byte where parsing failed."""

    def __init__(self, message, offset, path=None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")


class EmptyGridError(ValueError):
    pass


# ========== DATA MODEL ==========
class VoxelGrid:
    """Dense scalar occupancy field in [0, 1] with a physical voxel pitch."""

    def __init__(self, data, pitch=DEFAULT_PITCH_UM):
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"VoxelGrid needs a non-empty 3D array, got shape {arr.shape}")
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            raise ValueError("VoxelGrid occupancy must lie in [0, 1]")
        self.data = arr
        self.pitch = float(pitch)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def is_binary(self):
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    def solid_count(self):
        return int(np.count_nonzero(self.data))

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.dims == other.dims and self.pitch == other.pitch
                and self.data.tobytes() == other.data.tobytes())

    def __repr__(self):
        return f"VoxelGrid(dims={self.dims}, pitch={self.pitch}, solid={self.solid_count()})"


class LabeledVolume:
    """Per-voxel grain ids: 0 is void, 1..K are grains."""

    def __init__(self, labels, pitch=DEFAULT_PITCH_UM):
        arr = np.array(labels, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"LabeledVolume needs a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype.kind not in "iu" or (arr.size and arr.min() < 0):
            raise ValueError("labels must be non-negative integers")
        self.labels = arr.astype(np.uint32)
        self.pitch = float(pitch)
        present = np.unique(self.labels)
        present = present[present > 0]
        if present.size and (present[0] != 1 or present[-1] != present.size):
            raise ValueError(f"label ids must form 1..K, got {present.size} ids up to {present[-1]}")

    @property
    def dims(self):
        return tuple(int(n) for n in self.labels.shape)

    @property
    def num_labels(self):
        return int(self.labels.max()) if self.labels.size else 0

    def volumes(self):
        """Voxel count per label, index 0 is void."""
        return np.bincount(self.labels.ravel(), minlength=self.num_labels + 1)

    def __eq__(self, other):
        if not isinstance(other, LabeledVolume):
            return NotImplemented
        return (self.dims == other.dims and self.pitch == other.pitch
                and np.array_equal(self.labels, other.labels))

    def __repr__(self):
        return f"LabeledVolume(dims={self.dims}, grains={self.num_labels})"


# ========== OPERATIONS ==========
def binarize(grid, threshold=0.5):
    """v >= threshold -> 1, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return VoxelGrid((grid.data >= threshold).astype(np.float32), pitch=grid.pitch)


def _require_binary(grid, op):
    if not grid.is_binary:
        raise ValueError(f"{op} expects a binary grid; call binarize() first")


def connected_components(grid):
    """
    Label 6-connected solid regions. Label 1 is the largest component;
    equal volumes keep the order of their first voxel in linear (z-fastest) order.
    """
    _require_binary(grid, "connected_components")
    raw, count = ndimage.label(grid.data > 0, structure=FACE_CONNECTIVITY)
    if count == 0:
        return LabeledVolume(np.zeros(grid.dims, dtype=np.uint32), pitch=grid.pitch)

    # ndimage numbers components in raster order of their first voxel,
    # so a stable sort on volume alone gives the required tie-break.
    volumes = np.bincount(raw.ravel(), minlength=count + 1)[1:]
    order = np.argsort(-volumes, kind="stable")
    remap = np.zeros(count + 1, dtype=np.uint32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.uint32)
    logger.debug(f"connected_components: {count} components, largest {volumes.max()} voxels")
    return LabeledVolume(remap[raw], pitch=grid.pitch)


def largest_component(grid):
    _require_binary(grid, "largest_component")
    if grid.solid_count() == 0:
        raise EmptyGridError("no solid voxels")
    labels = connected_components(grid).labels
    return VoxelGrid((labels == 1).astype(np.float32), pitch=grid.pitch)


def artifact_voxels(grid):
    """Solid voxels lying outside the largest component (stray generation noise)."""
    solid = grid.solid_count()
    if solid == 0:
        return 0
    return solid - largest_component(grid).solid_count()


def rotate90(grid, k=1, axes=(0, 1)):
    return VoxelGrid(np.rot90(grid.data, k=k, axes=axes), pitch=grid.pitch)


def extract_grain(volume, label, size):
    """
    Crop one grain into a size³ cube, centered by rounding its centroid
    to the cube center. Raises if the grain does not fit.
    """
    idx = np.argwhere(volume.labels == label)
    if idx.size == 0:
        raise ValueError(f"label {label} is not present")
    centroid = idx.mean(axis=0) + 0.5
    shift = np.floor(size / 2.0 - centroid + 0.5).astype(np.int64)
    moved = idx + shift
    if moved.min() < 0 or moved.max() >= size:
        raise ValueError(f"grain {label} (extent {np.ptp(idx, axis=0) + 1}) does not fit a {size}³ cube")
    out = np.zeros((size, size, size), dtype=np.float32)
    out[moved[:, 0], moved[:, 1], moved[:, 2]] = 1.0
    return VoxelGrid(out, pitch=volume.pitch)


# ========== VGRID I/O ==========
def _atomic_write(path, blob):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def _encode(kind, dims, pitch, payload):
    return HEADER.pack(MAGIC, FORMAT_VERSION, kind, *dims, pitch) + payload


def save_grid(path, grid, kind=None):
    """Write a VGRID file. Binary grids default to the 1-byte payload."""
    if kind is None:
        exact = grid.is_binary and not np.any(np.signbit(grid.data))
        kind = KIND_BINARY if exact else KIND_FLOAT
    if kind == KIND_BINARY:
        _require_binary(grid, "save_grid(binary)")
        payload = np.where(grid.data > 0, 0xFF, 0x00).astype("u1").tobytes()
    elif kind == KIND_FLOAT:
        payload = grid.data.astype("<f4").tobytes()
    else:
        raise ValueError(f"grids use payload kind 0 or 1, got {kind}")
    _atomic_write(path, _encode(kind, grid.dims, grid.pitch, payload))
    logger.debug(f"Wrote {path} ({grid.dims}, kind={kind})")


def save_labels(path, volume):
    payload = volume.labels.astype("<u4").tobytes()
    _atomic_write(path, _encode(KIND_LABELS, volume.dims, volume.pitch, payload))
    logger.debug(f"Wrote {path} ({volume.dims}, {volume.num_labels} labels)")


def _decode(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise VoxelFormatError("bad magic, expected 'VGRD'", 0, path)
    if len(blob) < HEADER.size:
        raise VoxelFormatError("truncated header", len(blob), path)
    _, version, kind, nx, ny, nz, pitch = HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VoxelFormatError(f"unsupported version {version}", 4, path)
    if kind not in _PAYLOAD_DTYPE:
        raise VoxelFormatError(f"unknown payload kind {kind}", 6, path)
    count = nx * ny * nz
    if count == 0 or count > MAX_VOXELS:
        raise VoxelFormatError(f"invalid dims {nx}x{ny}x{nz}", 8, path)
    dtype = _PAYLOAD_DTYPE[kind]
    expected = HEADER.size + count * dtype.itemsize
    if len(blob) < expected:
        raise VoxelFormatError(f"truncated payload, need {expected} bytes, have {len(blob)}", len(blob), path)
    if len(blob) > expected:
        raise VoxelFormatError("trailing bytes after payload", expected, path)
    values = np.frombuffer(blob, dtype=dtype, count=count, offset=HEADER.size)
    return kind, (nx, ny, nz), float(pitch), values


def payload_kind(path):
    """Payload kind of a VGRID file, read from its header only."""
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
    if head[:4] != MAGIC:
        raise VoxelFormatError("bad magic, expected 'VGRD'", 0, path)
    if len(head) < HEADER.size:
        raise VoxelFormatError("truncated header", len(head), path)
    return HEADER.unpack(head)[2]


def load_grid(path):
    kind, dims, pitch, values = _decode(path)
    if kind == KIND_BINARY:
        bad = np.flatnonzero((values != 0x00) & (values != 0xFF))
        if bad.size:
            raise VoxelFormatError(f"binary byte 0x{values[bad[0]]:02X} is neither 0x00 nor 0xFF",
                                   HEADER.size + int(bad[0]), path)
        data = (values == 0xFF).astype(np.float32)
    elif kind == KIND_FLOAT:
        data = values.astype(np.float32)
        bad = np.flatnonzero(~((data >= 0.0) & (data <= 1.0)))
        if bad.size:
            raise VoxelFormatError("occupancy outside [0, 1]", HEADER.size + 4 * int(bad[0]), path)
    else:
        raise VoxelFormatError("file holds labels, use load_labels()", 6, path)
    return VoxelGrid(data.reshape(dims), pitch=pitch)


def load_labels(path):
    kind, dims, pitch, values = _decode(path)
    if kind != KIND_LABELS:
        raise VoxelFormatError("file holds a grid, use load_grid()", 6, path)
    try:
        return LabeledVolume(values.astype(np.uint32).reshape(dims), pitch=pitch)
    except ValueError as e:
        raise VoxelFormatError(str(e), HEADER.size, path) from e


# ========== BINVOX INGESTION ==========
def read_binvox(path):
    """
    Read a run-length encoded .binvox file (ShapeNet / ModelNet voxelizations).
    On disk the order is x, z, y (y fastest); the grid is returned as x, y, z.
    """
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def _line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise VoxelFormatError("unterminated header line", pos, path)
        start, pos = pos, end + 1
        return start, blob[start:end].strip()

    start, line = _line()
    if not line.startswith(b"#binvox"):
        raise VoxelFormatError("not a binvox file", 0, path)
    dims, scale = None, 1.0
    while True:
        start, line = _line()
        if line.startswith(b"dim"):
            dims = tuple(int(v) for v in line.split()[1:4])
        elif line.startswith(b"scale"):
            scale = float(line.split()[1])
        elif line.startswith(b"data"):
            break
    if dims is None or len(dims) != 3:
        raise VoxelFormatError("missing dim line", start, path)

    raw = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if raw.size % 2:
        raise VoxelFormatError("odd-length run-length payload", pos + raw.size - 1, path)
    values, counts = raw[::2], raw[1::2]
    data = np.repeat(values, counts)
    if data.size != int(np.prod(dims)):
        raise VoxelFormatError(f"payload decodes to {data.size} voxels, header says {np.prod(dims)}",
                               len(blob), path)
    data = np.transpose(data.reshape(dims), (0, 2, 1))
    return VoxelGrid((data > 0).astype(np.float32), pitch=scale / max(dims))
