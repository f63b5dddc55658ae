"""Gaussian heatmap targets, training patch sampling, tiled inference and
peak extraction."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nnet import FcnModel, GEMM_ROWS, forward_batch
from .volume import (
    ABSENT,
    UNCERTAIN,
    VISIBLE,
    Landmark,
    LandmarkSet,
    Volume3D,
    load_volume,
    save_volume,
)

PATCH_OUTPUT = 3
TILE_OUTPUT = 30


@dataclass(frozen=True)
class HeatmapSpec:
    sigma: float = 1.0  # voxels
    k: float = 1e3

    def __post_init__(self):
        if self.sigma <= 0 or self.k <= 0:
            raise ValueError("sigma and k must be positive")


@dataclass
class HeatmapStack:
    """One heatmap channel per landmark on a shared grid.

    ``evaluated`` marks voxels that carry a model prediction (all of them
    for targets and whole-volume inference). ``excluded`` flags channels that
    must not contribute to a loss.
    """

    names: list
    data: np.ndarray  # (n, x, y, z)
    spacing: tuple
    origin: tuple
    spec: HeatmapSpec = field(default_factory=HeatmapSpec)
    evaluated: np.ndarray | None = None
    excluded: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != len(self.names):
            raise ValueError("heatmap data must be (n_landmarks, x, y, z)")
        if self.evaluated is None:
            self.evaluated = np.ones(self.data.shape[1:], dtype=bool)
        if self.excluded is None:
            self.excluded = np.zeros(len(self.names), dtype=bool)

    def channel(self, name_or_index) -> Volume3D:
        i = name_or_index if isinstance(name_or_index, int) else self.names.index(name_or_index)
        return Volume3D(self.data[i], self.spacing, self.origin)


def _grid_offsets(geometry: Volume3D, point, sigma: float, index_ranges=None):
    """Per-axis squared distances (in voxel units of ``geometry``) from voxel
    centres to ``point``, shaped for broadcasting."""
    v = geometry.world_to_voxel(point)
    parts = []
    for a in range(3):
        if index_ranges is None:
            idx = np.arange(geometry.dims[a])
        else:
            idx = np.arange(*index_ranges[a])
        d2 = (idx - v[a]) ** 2 / (2.0 * sigma**2)
        shape = [1, 1, 1]
        shape[a] = len(idx)
        parts.append(d2.reshape(shape))
    return parts


def gaussian_target(
    geometry: Volume3D,
    lm: LandmarkSet,
    spec: HeatmapSpec,
    names: Sequence[str] | None = None,
    index_ranges=None,
) -> HeatmapStack:
    """Heat spot ``k * exp(-|v - p|^2 / (2 sigma^2))`` per landmark, with the
    distance measured in voxels of ``geometry``.

    Absent (or missing) landmarks give all-zero channels; uncertain ones are
    rendered but flagged as excluded. ``index_ranges`` restricts evaluation
    to a sub-box ``[(x0, x1), (y0, y1), (z0, z1)]`` of the grid.
    """
    names = list(lm.names if names is None else names)
    if index_ranges is None:
        shape = geometry.dims
        origin = geometry.origin
    else:
        shape = tuple(hi - lo for lo, hi in index_ranges)
        origin = tuple(geometry.voxel_to_world([r[0] for r in index_ranges]))
    data = np.zeros((len(names),) + tuple(shape), dtype=np.float64)
    excluded = np.zeros(len(names), dtype=bool)
    for i, name in enumerate(names):
        if name not in lm:
            continue
        e = lm[name]
        if e.status == ABSENT:
            continue
        excluded[i] = e.status == UNCERTAIN
        dx, dy, dz = _grid_offsets(geometry, e.position, spec.sigma, index_ranges)
        data[i] = spec.k * np.exp(-(dx + dy + dz))
    return HeatmapStack(names, data, geometry.spacing, origin, spec, excluded=excluded)


# ---------------------------------------------------------------------------
# Training patches


@dataclass
class PatchBatch:
    inputs: np.ndarray  # (p, c, 15, 15, 15)
    targets: np.ndarray  # (p, n, 3, 3, 3)
    mask: np.ndarray  # (p, n) 1 = contributes to the loss
    centers: np.ndarray  # (p, 3) voxel index of the central output voxel
    is_landmark: np.ndarray  # (p,) bool

    def __len__(self):
        return len(self.inputs)

    def as_tuple(self):
        return self.inputs, self.targets, self.mask

    @staticmethod
    def concatenate(batches: Sequence["PatchBatch"]) -> "PatchBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise ValueError("no patches")
        return PatchBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in
                            ("inputs", "targets", "mask", "centers", "is_landmark")))


def sample_training_patches(
    channels: Sequence[Volume3D],
    lm: LandmarkSet,
    spec: HeatmapSpec,
    rng: np.random.Generator,
    names: Sequence[str] | None = None,
    margin: int = 6,
    background_ratio: int = 5,
    exclusion_sigmas: float = 2.0,
    dtype=np.float32,
) -> PatchBatch:
    """Landmark-centred patches plus ``background_ratio`` random background
    patches per landmark patch.

    ``channels`` are congruent, already normalised and air-padded input
    volumes (image first, then any coordinate channels). Patch centres are
    clamped so the full ``(3 + 2 * margin)``-voxel patch fits; background
    centres are drawn uniformly, rejecting those within ``exclusion_sigmas``
    sigma of a visible or uncertain landmark.
    """
    names = list(lm.names if names is None else names)
    geometry = channels[0]
    half_out = PATCH_OUTPUT // 2
    reach = half_out + margin
    dims = np.asarray(geometry.dims)
    if np.any(dims < 2 * reach + 1):
        raise ValueError(f"volume {tuple(dims)} smaller than one {2 * reach + 1}^3 patch")
    lo, hi = np.full(3, reach), dims - reach - 1
    stacked = np.stack([c.data for c in channels]).astype(dtype, copy=False)

    present = [e for e in lm if e.name in names and e.status != ABSENT]
    anchors = np.array([geometry.world_to_voxel(e.position) for e in present]).reshape(-1, 3)
    centers, is_lm = [], []
    for e in present:
        if e.status != VISIBLE:
            continue
        c = np.clip(geometry.nearest_voxel(e.position), lo, hi)
        centers.append(c)
        is_lm.append(True)
    n_background = background_ratio * len(centers)
    min_d2 = (exclusion_sigmas * spec.sigma) ** 2
    drawn = 0
    attempts = 0
    while drawn < n_background:
        c = rng.integers(lo, hi + 1)
        attempts += 1
        if len(anchors) and attempts < 1000 * (n_background + 1):
            if np.min(np.sum((anchors - c) ** 2, axis=1)) <= min_d2:
                continue
        centers.append(c)
        is_lm.append(False)
        drawn += 1

    p = len(centers)
    size = 2 * reach + 1
    inputs = np.empty((p, len(channels), size, size, size), dtype=dtype)
    targets = np.empty((p, len(names), PATCH_OUTPUT, PATCH_OUTPUT, PATCH_OUTPUT), dtype=dtype)
    target_mask = None
    for i, c in enumerate(centers):
        sl = tuple(slice(c[a] - reach, c[a] + reach + 1) for a in range(3))
        inputs[i] = stacked[(slice(None),) + sl]
        ranges = [(c[a] - half_out, c[a] + half_out + 1) for a in range(3)]
        stack = gaussian_target(geometry, lm, spec, names, index_ranges=ranges)
        targets[i] = stack.data
        target_mask = ~stack.excluded
    if target_mask is None:
        target_mask = np.ones(len(names), dtype=bool)
    mask = np.tile(target_mask.astype(dtype), (p, 1))
    return PatchBatch(inputs, targets, mask, np.asarray(centers, dtype=int).reshape(-1, 3), np.asarray(is_lm, bool))


# ---------------------------------------------------------------------------
# Inference


@dataclass(frozen=True)
class Sphere:
    center: tuple  # world mm
    radius: float  # mm


def sphere_mask(geometry: Volume3D, spheres: Sequence[Sphere]) -> np.ndarray:
    """Voxels whose centre lies within any of the spheres."""
    mask = np.zeros(geometry.dims, dtype=bool)
    gx, gy, gz = geometry.world_grid()
    for s in spheres:
        lo = np.floor(geometry.world_to_voxel(np.asarray(s.center) - s.radius)).astype(int)
        hi = np.ceil(geometry.world_to_voxel(np.asarray(s.center) + s.radius)).astype(int) + 1
        lo = np.clip(lo, 0, geometry.dims)
        hi = np.clip(hi, 0, geometry.dims)
        if np.any(hi <= lo):
            continue
        dx = (gx[lo[0]:hi[0]] - s.center[0])[:, None, None] ** 2
        dy = (gy[lo[1]:hi[1]] - s.center[1])[None, :, None] ** 2
        dz = (gz[lo[2]:hi[2]] - s.center[2])[None, None, :] ** 2
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= (dx + dy + dz) <= s.radius**2
    return mask


def _sphere_boxes(geometry: Volume3D, spheres: Sequence[Sphere]) -> list:
    """Voxel bounding box ``(lo, hi)`` of each sphere, clipped to the grid."""
    boxes = []
    for s in spheres:
        lo = np.floor(geometry.world_to_voxel(np.asarray(s.center) - s.radius)).astype(int)
        hi = np.ceil(geometry.world_to_voxel(np.asarray(s.center) + s.radius)).astype(int) + 1
        lo = np.clip(lo, 0, geometry.dims)
        hi = np.clip(hi, 0, geometry.dims)
        if np.all(hi > lo):
            boxes.append((lo, hi))
    return boxes


def tile_origins(out_dims, tile: int = TILE_OUTPUT) -> list:
    return [
        (x, y, z)
        for z in range(0, out_dims[2], tile)
        for y in range(0, out_dims[1], tile)
        for x in range(0, out_dims[0], tile)
    ]


def tile_inference(
    model: FcnModel,
    channels: Sequence[Volume3D],
    names: Sequence[str],
    spec: HeatmapSpec,
    roi: Sequence[Sphere] | None = None,
    tile: int = TILE_OUTPUT,
) -> HeatmapStack:
    """Piecewise prediction over an air-padded volume.

    Output tiles of ``tile``^3 voxels (edge tiles clipped) are evaluated from
    input blocks that overlap only in their margins. With ``roi`` the tiles
    cover each sphere's bounding box instead of the whole grid, tiles whose
    sphere voxels were already computed are skipped, and only voxels inside
    a sphere are marked as evaluated. The output grid is the unpadded grid.
    """
    m = model.margin
    geometry = channels[0]
    for c in channels[1:]:
        if c.dims != geometry.dims:
            raise ValueError("input channels are not congruent")
    if len(channels) != model.in_channels:
        raise ValueError(f"model expects {model.in_channels} channels, got {len(channels)}")
    dims = np.asarray(geometry.dims)
    out_dims = dims - 2 * m
    if np.any(out_dims < 1):
        raise ValueError(f"volume {tuple(dims)} is smaller than the {2 * m + 1}-voxel footprint; pad it first")
    out_origin = tuple(geometry.voxel_to_world([m, m, m]))
    out_geometry = Volume3D(np.broadcast_to(np.float32(0), tuple(out_dims)), geometry.spacing, out_origin)
    evaluated = sphere_mask(out_geometry, roi) if roi is not None else np.ones(tuple(out_dims), dtype=bool)
    data = np.zeros((model.n_landmarks,) + tuple(out_dims), dtype=model.dtype)
    stacked = np.stack([c.data for c in channels]).astype(model.dtype, copy=False)
    if roi is None:
        boxes = [(np.zeros(3, dtype=int), out_dims)]
    else:
        boxes = _sphere_boxes(out_geometry, roi)
    done = np.zeros(tuple(out_dims), dtype=bool)
    for lo, hi in boxes:
        for t0 in tile_origins(hi - lo, tile):
            x0, y0, z0 = lo + np.asarray(t0)
            x1, y1, z1 = np.minimum(np.array([x0, y0, z0]) + tile, hi)
            need = evaluated[x0:x1, y0:y1, z0:z1] & ~done[x0:x1, y0:y1, z0:z1]
            if not need.any():
                continue
            block = stacked[:, x0 : x1 + 2 * m, y0 : y1 + 2 * m, z0 : z1 + 2 * m]
            out, _ = forward_batch(model, block[None], block=GEMM_ROWS)
            data[:, x0:x1, y0:y1, z0:z1] = out[0]
            done[x0:x1, y0:y1, z0:z1] = True
    data[:, ~evaluated] = 0
    return HeatmapStack(list(names), data, geometry.spacing, out_origin, spec, evaluated=evaluated)


def whole_volume_inference(model: FcnModel, channels: Sequence[Volume3D], names, spec: HeatmapSpec) -> HeatmapStack:
    """Single valid-mode pass over the full padded volume (reference path)."""
    geometry = channels[0]
    stacked = np.stack([c.data for c in channels]).astype(model.dtype, copy=False)
    out, _ = forward_batch(model, stacked[None], block=GEMM_ROWS)
    m = model.margin
    return HeatmapStack(list(names), out[0], geometry.spacing, tuple(geometry.voxel_to_world([m, m, m])), spec)


def argmax_first(values: np.ndarray, mask: np.ndarray | None = None):
    """Index of the maximum in x-fastest scan order; ties go to the lowest
    linear index. Returns ``None`` when the mask is empty."""
    flat = values.ravel(order="F")
    if mask is not None:
        m = mask.ravel(order="F")
        if not m.any():
            return None
        flat = np.where(m, flat, -np.inf)
    i = int(np.argmax(flat))
    return np.unravel_index(i, values.shape, order="F")


def extract_detections(stack: HeatmapStack, spec: HeatmapSpec | None = None) -> LandmarkSet:
    """Argmax voxel per channel; certainty = max / k clamped to [0, 1]."""
    spec = stack.spec if spec is None else spec
    if not stack.evaluated.any():
        raise ValueError("heatmap stack has an empty evaluation region")
    grid = stack.channel(0)
    entries = []
    for i, name in enumerate(stack.names):
        idx = argmax_first(stack.data[i], stack.evaluated)
        value = float(stack.data[i][idx])
        certainty = float(np.clip(value / spec.k, 0.0, 1.0))
        entries.append(Landmark(name, tuple(grid.voxel_to_world(idx)), certainty, VISIBLE))
    return LandmarkSet(tuple(entries))


def save_stack(stack: HeatmapStack, directory) -> None:
    """Debug dump: one f32 MVOL1 file per channel and an index file."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "index.txt"), "w", encoding="utf-8") as fh:
        for i, name in enumerate(stack.names):
            fname = f"{i:02d}_{name}.mvol"
            save_volume(stack.channel(i), os.path.join(directory, fname), "f32")
            fh.write(f"{name} {fname}\n")


def load_stack(directory, spec: HeatmapSpec | None = None) -> HeatmapStack:
    names, data, grid = [], [], None
    with open(os.path.join(directory, "index.txt"), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            name, fname = line.split()
            vol = load_volume(os.path.join(directory, fname))
            grid = vol
            names.append(name)
            data.append(vol.data)
    return HeatmapStack(names, np.stack(data), grid.spacing, grid.origin, spec or HeatmapSpec())
