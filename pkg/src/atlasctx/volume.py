"""Volumes, landmark sets and the geometric preprocessing around them.

Voxel arrays are indexed ``data[x, y, z]``. World coordinates are axis
aligned millimetres with ``origin`` at the centre of voxel ``(0, 0, 0)``.
Landmarks always live in world millimetres, never in voxel indices, so
changing resolution never touches them.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

AIR_HU = -1000.0
AIR_NORMALIZED = -3.0
HU_SCALE = 3e-3
NORMALIZED_RANGE = (-3.0, 3.0)

VISIBLE = "visible"
UNCERTAIN = "uncertain"
ABSENT = "absent"
STATUSES = (VISIBLE, UNCERTAIN, ABSENT)


class VolumeFormatError(ValueError):
    """Raised when an MVOL1 or landmark file cannot be parsed."""


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must be triples")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing_array(self) -> np.ndarray:
        return np.asarray(self.spacing)

    @property
    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin)

    def voxel_to_world(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.float64)
        return self.origin_array + index * self.spacing_array

    def world_to_voxel(self, point) -> np.ndarray:
        """Continuous voxel coordinates of world points. Values within 1e-9
        of an integer are snapped so voxel centres map back exactly."""
        point = np.asarray(point, dtype=np.float64)
        v = (point - self.origin_array) / self.spacing_array
        r = np.rint(v)
        return np.where(np.abs(v - r) < 1e-9, r, v)

    def nearest_voxel(self, point) -> np.ndarray:
        return np.rint(self.world_to_voxel(point)).astype(np.int64)

    def contains(self, point) -> np.ndarray:
        """Closed-interval containment test against the voxel-centre extent."""
        v = self.world_to_voxel(point)
        eps = 1e-9
        return np.all((v >= -eps) & (v <= np.asarray(self.dims) - 1 + eps), axis=-1)

    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * self.spacing_array

    def world_grid(self) -> tuple:
        """Per-axis world coordinates of voxel centres."""
        return tuple(self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3))

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return replace(self, data=data)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class Landmark:
    name: str
    position: tuple
    certainty: float = 1.0
    status: str = VISIBLE

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown landmark status {self.status!r}")
        if not 0.0 <= self.certainty <= 1.0:
            raise ValueError(f"certainty {self.certainty} outside [0, 1]")
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))
        object.__setattr__(self, "certainty", float(self.certainty))

    @property
    def visible(self) -> bool:
        return self.status == VISIBLE


@dataclass(frozen=True)
class LandmarkSet:
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ValueError("landmark names must be unique within a set")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_points(cls, points: dict, certainty: float = 1.0) -> "LandmarkSet":
        return cls(tuple(Landmark(n, p, certainty) for n, p in points.items()))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, name):
        return any(e.name == name for e in self.entries)

    def __getitem__(self, name) -> Landmark:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def names(self) -> list:
        return [e.name for e in self.entries]

    def visible(self) -> "LandmarkSet":
        return LandmarkSet(tuple(e for e in self.entries if e.visible))

    def positions(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.names if names is None else names
        return np.array([self[n].position for n in names], dtype=np.float64).reshape(-1, 3)

    def replace_entry(self, entry: Landmark) -> "LandmarkSet":
        return LandmarkSet(tuple(entry if e.name == entry.name else e for e in self.entries))

    def map_positions(self, fn) -> "LandmarkSet":
        """Apply ``fn`` to every non-absent position."""
        out = []
        for e in self.entries:
            if e.status == ABSENT:
                out.append(e)
            else:
                out.append(replace(e, position=tuple(fn(np.asarray(e.position)))))
        return LandmarkSet(tuple(out))


# ---------------------------------------------------------------------------
# File I/O


def save_volume(vol: Volume3D, path, dtype: str = "f32") -> None:
    """Write ``vol`` in MVOL1 format.

    ``i16`` rounds to the nearest integer and saturates at the int16 range;
    ``f32`` stores 32-bit floats. Payload is little-endian, x fastest.
    """
    if dtype == "i16":
        payload = np.clip(np.rint(vol.data), -32768, 32767).astype("<i2")
    elif dtype == "f32":
        payload = vol.data.astype("<f4")
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")
    nx, ny, nz = vol.dims
    header = (
        f"MVOL1 {dtype}\n"
        f"{nx} {ny} {nz}\n"
        f"{' '.join(repr(s) for s in vol.spacing)}\n"
        f"{' '.join(repr(o) for o in vol.origin)}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes(order="F"))


def load_volume(path) -> Volume3D:
    with open(path, "rb") as fh:
        lines = [fh.readline() for _ in range(4)]
        payload = fh.read()
    try:
        magic, dtype = lines[0].decode("ascii").split()
        dims = tuple(int(t) for t in lines[1].split())
        spacing = tuple(float(t) for t in lines[2].split())
        origin = tuple(float(t) for t in lines[3].split())
    except (UnicodeDecodeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed MVOL1 header") from exc
    if magic != "MVOL1" or dtype not in ("i16", "f32") or not lines[3].endswith(b"\n"):
        raise VolumeFormatError(f"{path}: malformed MVOL1 header")
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: malformed MVOL1 header")
    np_dtype = np.dtype("<i2") if dtype == "i16" else np.dtype("<f4")
    expected = math.prod(dims) * np_dtype.itemsize
    if len(payload) < expected:
        raise VolumeFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise VolumeFormatError(f"{path}: payload length does not match dims {dims}")
    data = np.frombuffer(payload, dtype=np_dtype).reshape(dims, order="F")
    return Volume3D(data.astype(np.float32), spacing, origin)


def save_landmarks(lm: LandmarkSet, path, header: Iterable[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        for e in lm:
            x, y, z = e.position
            fh.write(f"{e.name} {x!r} {y!r} {z!r} {e.certainty!r} {e.status}\n")


def load_landmarks(path) -> LandmarkSet:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise VolumeFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            name, x, y, z, cert, status = parts
            try:
                entries.append(Landmark(name, (float(x), float(y), float(z)), float(cert), status))
            except ValueError as exc:
                raise VolumeFormatError(f"{path}:{lineno}: {exc}") from exc
    return LandmarkSet(tuple(entries))


def read_header_comments(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line[1:].strip() for line in fh if line.startswith("#")]


# ---------------------------------------------------------------------------
# Intensity and geometry operations


def normalize_intensities(vol: Volume3D) -> Volume3D:
    """Scale HU by 3e-3 and truncate to [-3, 3]."""
    out = np.clip(vol.data * HU_SCALE, *NORMALIZED_RANGE).astype(np.float32)
    return vol.with_data(out)


def pad_with_air(vol: Volume3D, margin: int, air: float = AIR_HU) -> Volume3D:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if margin == 0:
        return vol
    data = np.pad(vol.data, margin, mode="constant", constant_values=air)
    origin = vol.origin_array - margin * vol.spacing_array
    return Volume3D(data, vol.spacing, tuple(origin))


def resample(vol: Volume3D, target_spacing) -> Volume3D:
    """Trilinear resampling onto a grid with ``target_spacing``.

    The first voxel centre stays put; the output covers the same physical
    extent (``ceil(dims * spacing / target_spacing)`` voxels). Samples beyond
    the last input voxel centre take the edge value.
    """
    target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
    if not np.all(np.isfinite(target)) or np.any(target <= 0):
        raise ValueError(f"degenerate target spacing {target_spacing}")
    if np.array_equal(target, vol.spacing_array):
        return vol
    extent = vol.extent_mm()
    dims = np.maximum(1, np.ceil(extent / target - 1e-9).astype(int))
    data = vol.data
    for a in range(3):
        coords = np.arange(dims[a]) * (target[a] / vol.spacing[a])
        data = _interp_axis(data, coords, a)
    return Volume3D(data.astype(vol.data.dtype, copy=False), tuple(target), vol.origin)


def _interp_axis(data: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation of ``data`` at fractional indices along one axis,
    clamped to the edge voxels."""
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    i0 = np.minimum(np.floor(coords).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = coords - i0
    shape = [1, 1, 1]
    shape[axis] = len(coords)
    frac = frac.reshape(shape).astype(data.dtype, copy=False)
    lo = np.take(data, i0, axis=axis)
    hi = np.take(data, i1, axis=axis)
    return lo + (hi - lo) * frac


def reflect_lr(vol: Volume3D, lm: LandmarkSet, swap_map: Sequence[tuple]) -> tuple:
    """Mirror along x and exchange paired left/right landmark names."""
    partner = {}
    for a, b in swap_map:
        for n in (a, b):
            if n in partner:
                raise ValueError(f"landmark {n!r} appears in more than one swap pair")
        partner[a] = b
        partner[b] = a
    x_sum = 2 * vol.origin[0] + (vol.dims[0] - 1) * vol.spacing[0]
    mirrored = {}
    for e in lm:
        pos = e.position
        if e.status != ABSENT:
            pos = (x_sum - pos[0], pos[1], pos[2])
        mirrored[e.name] = replace(e, position=pos)
    entries = []
    for e in lm:
        src = partner.get(e.name)
        if src is not None and src in mirrored:
            entries.append(replace(mirrored[src], name=e.name))
        elif src is not None:
            # partner missing from the set: this side is left without a counterpart
            entries.append(replace(mirrored[e.name], name=src))
        else:
            entries.append(mirrored[e.name])
    data = np.ascontiguousarray(vol.data[::-1])
    return vol.with_data(data), LandmarkSet(tuple(entries))


def random_crop(vol: Volume3D, lm: LandmarkSet, max_shift_mm: float, rng, air: float = AIR_HU) -> tuple:
    """Independently crop (positive draw) or extend (negative draw) each face.

    ``rng.uniform(-m, m, size=(3, 2))`` supplies the per-face shifts in mm,
    rows are axes, columns are (low face, high face).
    """
    if max_shift_mm < 0:
        raise ValueError("max_shift_mm must be non-negative")
    if max_shift_mm == 0:
        return vol, lm
    shifts = np.asarray(rng.uniform(-max_shift_mm, max_shift_mm, size=(3, 2)), dtype=np.float64)
    steps = np.rint(shifts / vol.spacing_array[:, None]).astype(int)
    return crop_faces(vol, lm, steps, air=air)


def crop_faces(vol: Volume3D, lm: LandmarkSet, steps, air: float = AIR_HU) -> tuple:
    """Crop ``steps[a, 0]`` voxels from the low face and ``steps[a, 1]`` from the
    high face of axis ``a``; negative counts extend with ``air``."""
    steps = np.asarray(steps, dtype=int).reshape(3, 2)
    dims = np.asarray(vol.dims)
    new_dims = dims - steps[:, 0] - steps[:, 1]
    if np.any(new_dims < 1):
        raise ValueError("crop would eliminate the whole volume")
    pad = [(max(0, -lo), max(0, -hi)) for lo, hi in steps]
    data = vol.data
    if any(p != (0, 0) for p in pad):
        data = np.pad(data, pad, mode="constant", constant_values=air)
    start = [max(0, lo) for lo, _ in steps]
    sl = tuple(slice(start[a], start[a] + new_dims[a]) for a in range(3))
    data = np.ascontiguousarray(data[sl])
    origin = vol.origin_array + steps[:, 0] * vol.spacing_array
    out = Volume3D(data, vol.spacing, tuple(origin))
    entries = []
    for e in lm:
        if e.status != ABSENT and not out.contains(e.position):
            e = replace(e, status=ABSENT)
        entries.append(e)
    return out, LandmarkSet(tuple(entries))


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
