"""Procedural head-like phantoms with exactly known landmarks.

The canonical phantom is an ellipsoidal bone shell filled with soft tissue,
two small "eye" spheres, a midline rod and four dense pegs through the shell
poles, all in air. Each scan applies a
random affine deformation to the canonical phantom, renders it with 2x2x2
supersampling and adds Gaussian noise.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .atlas import AffineTransform, apply_affine, invert_affine
from .volume import AIR_HU, Landmark, LandmarkSet, Volume3D, crop_faces, save_landmarks, save_volume

PAPER_SPLIT = (170, 31, 20)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    semi_axes: tuple
    intensity: float

    def inside(self, p: np.ndarray) -> np.ndarray:
        q = (p - np.asarray(self.center)) / np.asarray(self.semi_axes)
        return np.einsum("...i,...i->...", q, q) <= 1.0

    def bounds(self):
        c, r = np.asarray(self.center), np.asarray(self.semi_axes)
        return c - r, c + r


@dataclass(frozen=True)
class Rod:
    start: tuple
    end: tuple
    radius: float
    intensity: float

    def inside(self, p: np.ndarray) -> np.ndarray:
        a, b = np.asarray(self.start), np.asarray(self.end)
        ab = b - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = a + t[..., None] * ab
        d = p - closest
        return np.einsum("...i,...i->...", d, d) <= self.radius**2

    def bounds(self):
        a, b = np.asarray(self.start), np.asarray(self.end)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius


def default_structures() -> tuple:
    outer = (62.0, 74.0, 66.0)
    wall = 7.0
    return (
        Ellipsoid((0.0, 0.0, 0.0), outer, 700.0),
        Ellipsoid((0.0, 0.0, 0.0), tuple(a - wall for a in outer), 0.0),
        Ellipsoid((28.0, 44.0, -12.0), (11.0, 11.0, 11.0), 50.0),
        Ellipsoid((-28.0, 44.0, -12.0), (11.0, 11.0, 11.0), 50.0),
        Rod((0.0, -20.0, -35.0), (0.0, -20.0, 25.0), 4.0, 100.0),
    ) + shell_pegs(outer, wall)


def shell_pegs(outer, wall: float, radius: float = 3.5, protrusion: float = 6.0) -> tuple:
    """Dense pegs piercing the shell at its apex, base and lateral poles, so
    the landmarks there sit on a local feature rather than a smooth surface."""
    pegs = []
    for axis, sign in ((2, 1.0), (2, -1.0), (0, 1.0), (0, -1.0)):
        a, b = np.zeros(3), np.zeros(3)
        a[axis] = sign * (outer[axis] - 2 * wall)
        b[axis] = sign * (outer[axis] + protrusion)
        pegs.append(Rod(tuple(a), tuple(b), radius, 1000.0))
    return tuple(pegs)


def default_landmarks() -> dict:
    # x: patient left, y: anterior, z: superior
    return {
        # shell landmarks: where each peg axis crosses the outer surface
        "skull_apex": (0.0, 0.0, 66.0),
        "skull_base": (0.0, 0.0, -66.0),
        "skull_left": (62.0, 0.0, 0.0),
        "skull_right": (-62.0, 0.0, 0.0),
        "eye_l_center": (28.0, 44.0, -12.0),
        "eye_r_center": (-28.0, 44.0, -12.0),
        "eye_l_superior": (28.0, 44.0, -1.0),
        "eye_r_superior": (-28.0, 44.0, -1.0),
        "rod_top": (0.0, -20.0, 25.0),
        "rod_bottom": (0.0, -20.0, -35.0),
    }


DEFAULT_SWAP_PAIRS = (
    ("skull_left", "skull_right"),
    ("eye_l_center", "eye_r_center"),
    ("eye_l_superior", "eye_r_superior"),
)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (112, 112, 112)
    spacing: float = 2.0
    structures: tuple = field(default_factory=default_structures)
    landmarks: dict = field(default_factory=default_landmarks)
    swap_pairs: tuple = DEFAULT_SWAP_PAIRS
    background_hu: float = AIR_HU
    rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.15)
    translation_mm: float = 20.0
    noise_hu: float = 20.0
    crop_probability: float = 0.0
    crop_mm: float = 30.0

    def __post_init__(self):
        if len(self.landmarks) < 6:
            raise ValueError("a phantom needs at least 6 landmarks")
        pts = np.array(list(self.landmarks.values()), dtype=np.float64)
        centred = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centred, tol=1e-6) < 3:
            raise ValueError("canonical landmarks must not be coplanar")
        for s in self.structures:
            if not -1000 <= s.intensity <= 1000:
                raise ValueError("structure intensities must lie within [-1000, 1000] HU")

    @property
    def names(self) -> list:
        return list(self.landmarks)


def rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def draw_deformation(spec: PhantomSpec, rng: np.random.Generator) -> AffineTransform:
    angles = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg, 3))
    scale = rng.uniform(*spec.scale_range, 3)
    shift = rng.uniform(-spec.translation_mm, spec.translation_mm, 3)
    return AffineTransform(rotation_matrix(angles) @ np.diag(scale), shift)


def grid_geometry(spec: PhantomSpec) -> Volume3D:
    shape = tuple(spec.shape)
    origin = tuple(-(n - 1) / 2.0 * spec.spacing for n in shape)
    return Volume3D(np.broadcast_to(np.float64(0), shape), (spec.spacing,) * 3, origin)


def render(spec: PhantomSpec, deformation: AffineTransform, supersample: int = 2) -> np.ndarray:
    """Paint the deformed structures in order with partial-volume blending."""
    geom = grid_geometry(spec)
    data = np.full(geom.dims, spec.background_hu, dtype=np.float64)
    inverse = invert_affine(deformation)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for s in spec.structures:
        lo, hi = s.bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        world = apply_affine(deformation, corners)
        vlo = np.floor(geom.world_to_voxel(world.min(axis=0))).astype(int) - 1
        vhi = np.ceil(geom.world_to_voxel(world.max(axis=0))).astype(int) + 2
        vlo = np.clip(vlo, 0, geom.dims)
        vhi = np.clip(vhi, 0, geom.dims)
        if np.any(vhi <= vlo):
            continue
        axes = [geom.origin[a] + np.arange(vlo[a], vhi[a]) * spec.spacing for a in range(3)]
        frac = np.zeros(tuple(vhi - vlo))
        for ox in offsets:
            for oy in offsets:
                for oz in offsets:
                    gx, gy, gz = np.meshgrid(
                        axes[0] + ox * spec.spacing, axes[1] + oy * spec.spacing, axes[2] + oz * spec.spacing, indexing="ij"
                    )
                    pts = np.stack([gx, gy, gz], axis=-1)
                    frac += s.inside(apply_affine(inverse, pts))
        frac /= supersample**3
        box = tuple(slice(vlo[a], vhi[a]) for a in range(3))
        data[box] = data[box] * (1 - frac) + s.intensity * frac
    return data


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator, deformation: AffineTransform | None = None):
    """Returns ``(volume in HU, landmarks, canonical->world affine)``."""
    if deformation is None:
        deformation = draw_deformation(spec, rng)
    geom = grid_geometry(spec)
    data = render(spec, deformation)
    if spec.noise_hu > 0:
        data = data + rng.normal(0.0, spec.noise_hu, data.shape)
    data = np.clip(np.rint(data), -32768, 32767).astype(np.float32)
    vol = Volume3D(data, geom.spacing, geom.origin)
    canon = np.array(list(spec.landmarks.values()))
    world = apply_affine(deformation, canon)
    lm = LandmarkSet(tuple(Landmark(n, tuple(p)) for n, p in zip(spec.landmarks, world)))
    lm = LandmarkSet(tuple(e if vol.contains(e.position) else replace(e, status="absent") for e in lm))
    if spec.crop_probability > 0 and rng.uniform() < spec.crop_probability:
        steps = np.rint(rng.uniform(0, spec.crop_mm, size=(3, 2)) / spec.spacing).astype(int)
        vol, lm = crop_faces(vol, lm, steps, air=spec.background_hu)
    return vol, lm, deformation


def split_counts(n: int, split: Sequence[int] | None = None) -> tuple:
    if split is not None:
        if sum(split) != n or len(split) != 3:
            raise ValueError("split must be three counts summing to n")
        return tuple(int(s) for s in split)
    total = sum(PAPER_SPLIT)
    n_val = int(round(n * PAPER_SPLIT[1] / total))
    n_test = int(round(n * PAPER_SPLIT[2] / total))
    return n - n_val - n_test, n_val, n_test


def split_labels(n: int, split: Sequence[int] | None = None) -> list:
    n_train, n_val, n_test = split_counts(n, split)
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def generate_scans(spec: PhantomSpec, n: int, seed: int, jobs: int = 1) -> list:
    """``n`` phantoms; scan ``i`` depends only on ``(spec, seed, i)``."""
    seeds = np.random.SeedSequence(seed).spawn(n)

    def one(i):
        return generate_phantom(spec, np.random.default_rng(seeds[i]))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]


@dataclass
class ManifestEntry:
    volume: str
    landmarks: str
    split: str


def generate_dataset(spec: PhantomSpec, n: int, seed: int, out_dir, split=None, jobs: int = 1) -> list:
    """Write ``n`` phantoms (i16 MVOL1 + landmark file each) and a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    labels = split_labels(n, split)
    seeds = np.random.SeedSequence(seed).spawn(n)

    def one(i):
        vol, lm, truth = generate_phantom(spec, np.random.default_rng(seeds[i]))
        vname, lname = f"scan_{i:04d}.mvol", f"scan_{i:04d}.lmk"
        save_volume(vol, os.path.join(out_dir, vname), "i16")
        row = " ".join(f"{v:.17g}" for v in truth.matrix()[:3].ravel())
        save_landmarks(lm, os.path.join(out_dir, lname), header=[f"truth_affine {row}"])
        return ManifestEntry(vname, lname, labels[i])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(one, range(n)))
    else:
        entries = [one(i) for i in range(n)]
    write_manifest(entries, os.path.join(out_dir, "manifest.txt"))
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.volume} {e.landmarks} {e.split}\n")


def read_manifest(path) -> list:
    """Entries with paths resolved relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'volume landmarks split'")
            v, l, s = parts
            entries.append(ManifestEntry(os.path.join(base, v), os.path.join(base, l), s))
    return entries
