"""Volumes, binary voxel masks, the ``.evv``/``.evm`` containers and synthetic phantoms.

Arrays are held as ``(D, H, W)``: axial slices outermost, each slice row-major
(``y`` rows, ``x`` columns).  Dimensions are reported as ``(H, W, D)``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

VOLUME_MAGIC = "EVV1"
MASK_MAGIC = "EVM1"
_DTYPES = {"u8": np.dtype("<u1")}


class VolumeFormatError(ValueError):
    """Base class for container read errors."""


class MalformedHeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    pass


def _check_dims(dims: Sequence[int]) -> tuple[int, int, int]:
    if len(dims) != 3:
        raise ValueError(f"dims must be (H, W, D), got {dims!r}")
    h, w, d = (int(v) for v in dims)
    if min(h, w, d) < 1:
        raise ValueError(f"dims must be positive, got {dims!r}")
    return h, w, d


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _check_slice_index(t: int, depth: int) -> int:
    t = int(t)
    if not 0 <= t < depth:
        raise IndexError(f"slice index {t} out of range [0, {depth})")
    return t


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid, stored ``(D, H, W)`` as unsigned 8-bit."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise ValueError(f"voxels must be a nonempty (D, H, W) array, got shape {voxels.shape}")
        if voxels.dtype != np.uint8:
            raise TypeError(f"voxels must be uint8, got {voxels.dtype}")
        object.__setattr__(self, "voxels", _frozen(voxels))
        if self.spacing is not None:
            object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.voxels.shape
        return h, w, d

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def slice(self, t: int) -> np.ndarray:
        return self.voxels[_check_slice_index(t, self.depth)]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SliceMask:
    """Binary occupancy of one axial slice, shape ``(H, W)``."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError(f"slice mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits))

    @property
    def dims(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, SliceMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """Binary occupancy grid, stored ``(D, H, W)``.

    Kept dense in memory; :meth:`encode_runs` gives the per-slice run-length
    form used on disk.
    """

    bits: np.ndarray
    _areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 3 or min(bits.shape) < 1:
            raise ValueError(f"mask must be a nonempty (D, H, W) array, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits))
        object.__setattr__(self, "_areas", _frozen(bits.reshape(bits.shape[0], -1).sum(axis=1)))

    @classmethod
    def empty(cls, dims: Sequence[int]) -> VoxelMask:
        h, w, d = _check_dims(dims)
        return cls(np.zeros((d, h, w), dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.bits.shape
        return h, w, d

    @property
    def depth(self) -> int:
        return self.bits.shape[0]

    @property
    def count(self) -> int:
        return int(self._areas.sum())

    def areas(self) -> np.ndarray:
        """Foreground area of every axial slice, indexed by ``t``."""
        return self._areas

    def encode_runs(self) -> list[list[tuple[int, int]]]:
        return [encode_slice_runs(s) for s in self.bits]

    @classmethod
    def decode_runs(cls, dims: Sequence[int], runs: Sequence[Sequence[tuple[int, int]]]) -> VoxelMask:
        h, w, d = _check_dims(dims)
        if len(runs) != d:
            raise DimensionMismatchError(f"expected runs for {d} slices, got {len(runs)}")
        bits = np.zeros((d, h * w), dtype=bool)
        for t, slice_runs in enumerate(runs):
            for start, length in slice_runs:
                if length < 1 or start < 0 or start + length > h * w:
                    raise DimensionMismatchError(
                        f"run ({start}, {length}) on slice {t} exceeds slice size {h * w}")
                bits[t, start:start + length] = True
        return cls(bits.reshape(d, h, w))

    def __eq__(self, other):
        if not isinstance(other, VoxelMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


def encode_slice_runs(bits: np.ndarray) -> list[tuple[int, int]]:
    """Runs of foreground as ``(start, length)`` over the row-major flattened slice."""
    flat = np.asarray(bits, dtype=np.int8).ravel()
    edges = np.diff(np.concatenate(([0], flat, [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [(int(a), int(b - a)) for a, b in zip(starts, stops)]


def slice_of(mask: VoxelMask, t: int) -> SliceMask:
    return SliceMask(mask.bits[_check_slice_index(t, mask.depth)])


def foreground_area(mask: VoxelMask, t: int) -> int:
    return int(mask.areas()[_check_slice_index(t, mask.depth)])


# --- containers -------------------------------------------------------------


def _read_header(data: bytes, magic: str, n_fields: int) -> tuple[list[str], int]:
    newline = data.find(b"\n")
    if newline < 0:
        raise MalformedHeaderError("missing header line")
    try:
        tokens = data[:newline].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError("header is not ASCII") from exc
    if not tokens or tokens[0] != magic:
        raise MalformedHeaderError(f"expected magic {magic!r}")
    if len(tokens) != n_fields:
        raise MalformedHeaderError(f"expected {n_fields} header fields, got {len(tokens)}")
    return tokens[1:], newline + 1


def _parse_dims(tokens: Sequence[str]) -> tuple[int, int, int]:
    try:
        return _check_dims([int(tok) for tok in tokens])
    except ValueError as exc:
        raise MalformedHeaderError(f"bad dims {list(tokens)!r}") from exc


def write_volume(volume: Volume, path: str | Path) -> None:
    h, w, d = volume.dims
    if volume.spacing is None:
        spacing = ["-", "-", "-"]
    else:
        spacing = [repr(s) for s in volume.spacing]
    header = f"{VOLUME_MAGIC} {h} {w} {d} {' '.join(spacing)} u8\n".encode("ascii")
    Path(path).write_bytes(header + volume.voxels.astype("<u1").tobytes())


def read_volume(path: str | Path) -> Volume:
    data = Path(path).read_bytes()
    tokens, offset = _read_header(data, VOLUME_MAGIC, 8)
    h, w, d = _parse_dims(tokens[:3])
    if tokens[3:6] == ["-", "-", "-"]:
        spacing = None
    else:
        try:
            spacing = tuple(float(tok) for tok in tokens[3:6])
        except ValueError as exc:
            raise MalformedHeaderError(f"bad spacing {tokens[3:6]!r}") from exc
    dtype = _DTYPES.get(tokens[6])
    if dtype is None:
        raise MalformedHeaderError(f"unsupported dtype {tokens[6]!r}")
    expected = h * w * d * dtype.itemsize
    payload = data[offset:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise DimensionMismatchError(f"payload has {len(payload)} bytes, header implies {expected}")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(d, h, w).astype(np.uint8)
    return Volume(voxels, spacing)


def write_mask(mask: VoxelMask, path: str | Path) -> None:
    h, w, d = mask.dims
    chunks = [f"{MASK_MAGIC} {h} {w} {d}\n".encode("ascii")]
    for runs in mask.encode_runs():
        flat = [len(runs)]
        for start, length in runs:
            flat.extend((start, length))
        chunks.append(struct.pack(f"<{len(flat)}I", *flat))
    Path(path).write_bytes(b"".join(chunks))


def _iter_u32(payload: bytes) -> Iterator[int]:
    for (value,) in struct.iter_unpack("<I", payload):
        yield value


def read_mask(path: str | Path) -> VoxelMask:
    data = Path(path).read_bytes()
    tokens, offset = _read_header(data, MASK_MAGIC, 4)
    h, w, d = _parse_dims(tokens)
    payload = data[offset:]
    if len(payload) % 4:
        raise TruncatedPayloadError("payload is not a whole number of 32-bit words")
    words = list(_iter_u32(payload))
    pos = 0
    runs = []
    for t in range(d):
        if pos >= len(words):
            raise TruncatedPayloadError(f"payload ends before slice {t}")
        n = words[pos]
        pos += 1
        if pos + 2 * n > len(words):
            raise TruncatedPayloadError(f"payload ends inside the runs of slice {t}")
        runs.append(list(zip(words[pos:pos + 2 * n:2], words[pos + 1:pos + 2 * n:2])))
        pos += 2 * n
    if pos != len(words):
        raise DimensionMismatchError(f"{len(words) - pos} trailing words after {d} slices")
    return VoxelMask.decode_runs((h, w, d), runs)


# --- phantoms ---------------------------------------------------------------

SHAPE_KINDS = ("sphere", "ellipsoid", "two-blob")


@dataclass(frozen=True)
class PhantomSpec:
    """Analytic test object on a voxel grid.

    ``center`` and ``radii`` are ``(x, y, z)`` in voxels; voxel ``(x, y, z)``
    has its center at those integer coordinates.  A ``two-blob`` phantom
    places two ellipsoids with the given radii at ``center +/- separation/2``
    along ``x`` (default separation is three x-radii).
    """

    kind: str = "sphere"
    center: tuple[float, float, float] = (16.0, 16.0, 16.0)
    radii: tuple[float, float, float] = (6.0, 6.0, 6.0)
    dims: tuple[int, int, int] = (32, 32, 32)
    foreground: float = 200.0
    background: float = 50.0
    noise: float = 0.0
    seed: int = 0
    separation: float | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        _check_dims(self.dims)
        if len(self.radii) != 3 or min(self.radii) <= 0:
            raise ValueError(f"radii must be three positive values, got {self.radii!r}")
        if self.kind == "sphere" and len(set(self.radii)) != 1:
            raise ValueError("sphere radii must be equal; use kind='ellipsoid'")
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")

    def blob_centers(self) -> list[tuple[float, float, float]]:
        if self.kind != "two-blob":
            return [tuple(self.center)]
        sep = 3.0 * self.radii[0] if self.separation is None else self.separation
        x, y, z = self.center
        return [(x - sep / 2, y, z), (x + sep / 2, y, z)]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "center": list(self.center), "radii": list(self.radii),
            "dims": list(self.dims), "foreground": self.foreground,
            "background": self.background, "noise": self.noise, "seed": self.seed,
            "separation": self.separation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> PhantomSpec:
        data = dict(data)
        for key in ("center", "radii", "dims"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def phantom_mask(spec: PhantomSpec) -> np.ndarray:
    """Voxel-center-in-shape membership as a ``(D, H, W)`` bool array."""
    h, w, d = spec.dims
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    rx, ry, rz = spec.radii
    inside = np.zeros((d, h, w), dtype=bool)
    for cx, cy, cz in spec.blob_centers():
        inside |= ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
    return inside


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, VoxelMask]:
    """Render ``spec`` into an 8-bit volume and its ground-truth mask.

    Intensities are ``foreground``/``background`` plus Gaussian noise with
    standard deviation ``noise``, rounded and clipped to ``[0, 255]``.
    """
    inside = phantom_mask(spec)
    if not inside.any():
        logger.warning("phantom %s does not intersect the %s grid; mask is empty", spec.kind, spec.dims)
    values = np.where(inside, spec.foreground, spec.background).astype(np.float64)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        values += rng.normal(0.0, spec.noise, size=values.shape)
    voxels = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    return Volume(voxels), VoxelMask(inside)
