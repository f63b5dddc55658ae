"""Landmark atlas, robust weighted affine fitting and atlas-based correction.

Detections are mapped into the atlas frame by an affine transform fitted
with certainty weights. The worst-fitting landmark is dropped and the fit
recomputed until every remaining landmark lies within ``d_atlas`` of its
atlas counterpart. The inverse mapping then places a spherical region of
interest around each atlas landmark in the scan, and each detection is
moved to the strongest heatmap response inside its sphere.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .heatmap import HeatmapSpec, HeatmapStack, argmax_first
from .volume import ABSENT, VISIBLE, Landmark, LandmarkSet, Volume3D, load_landmarks, read_header_comments, save_landmarks

MAX_CONDITION = 1e8
FIT_CONDITION = 1e12


class DegenerateConfigurationError(ValueError):
    """Points are (near) coplanar, collinear or too few to pin down an affine map."""


class InsufficientLandmarksError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform:
    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(linear)) and np.all(np.isfinite(translation))):
            raise ValueError("affine transform must be finite")
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def __call__(self, pts) -> np.ndarray:
        return apply_affine(self, pts)

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """``self ∘ other``: apply ``other`` first."""
        return AffineTransform(self.linear @ other.linear, self.linear @ other.translation + self.translation)

    def condition(self) -> float:
        return float(np.linalg.cond(self.linear))


def apply_affine(t: AffineTransform, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ t.linear.T + t.translation


def invert_affine(t: AffineTransform) -> AffineTransform:
    if not np.isfinite(t.condition()) or t.condition() >= MAX_CONDITION:
        raise DegenerateConfigurationError(f"transform is singular (condition {t.condition():.3g})")
    inv = np.linalg.inv(t.linear)
    return AffineTransform(inv, -inv @ t.translation)


def weighted_affine_fit(src, dst, weights=None) -> AffineTransform:
    """Closed-form minimiser of ``sum_i w_i |A src_i + b - dst_i|^2``.

    Solved through the normal equations in weighted-centroid coordinates,
    which decouple the translation and leave one 3x3 system shared by all
    three output coordinates.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same number of points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (len(src),):
        raise ValueError("one weight per correspondence required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if np.count_nonzero(w) < 4:
        raise DegenerateConfigurationError("at least 4 positive weights are required")
    wsum = w.sum()
    src_c = w @ src / wsum
    dst_c = w @ dst / wsum
    xs = src - src_c
    ys = dst - dst_c
    sxx = (xs * w[:, None]).T @ xs
    sxy = (xs * w[:, None]).T @ ys
    cond = np.linalg.cond(sxx)
    if not np.isfinite(cond) or cond > FIT_CONDITION:
        raise DegenerateConfigurationError(f"source points are coplanar or collinear (condition {cond:.3g})")
    linear = np.linalg.solve(sxx, sxy).T
    return AffineTransform(linear, dst_c - linear @ src_c)


def well_spaced(points, threshold: float = 1e-3) -> bool:
    """Smallest singular value of the centred point matrix, relative to the
    point spread, must exceed ``threshold``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 4:
        return False
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    extent = float(np.max(np.ptp(pts, axis=0)))
    return extent > 0 and sv[-1] > threshold * extent


# ---------------------------------------------------------------------------
# Atlas


@dataclass
class Atlas:
    names: list
    positions: np.ndarray  # (n, 3) atlas frame mm

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.names) != len(self.positions):
            raise ValueError("one position per atlas name")
        if len(self.names) < 4:
            raise DegenerateConfigurationError("an atlas needs at least 4 landmarks")

    def __contains__(self, name):
        return name in self.names

    def position(self, name) -> np.ndarray:
        return self.positions[self.names.index(name)]

    def bounds(self) -> tuple:
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def as_landmarks(self) -> LandmarkSet:
        return LandmarkSet(tuple(Landmark(n, p) for n, p in zip(self.names, self.positions)))

    def save(self, path) -> None:
        save_landmarks(self.as_landmarks(), path, header=["frame: atlas"])

    @classmethod
    def load(cls, path) -> "Atlas":
        if "frame: atlas" not in read_header_comments(path):
            raise ValueError(f"{path} is not an atlas file")
        lm = load_landmarks(path)
        return cls(lm.names, lm.positions())


def _visible_points(lm: LandmarkSet) -> dict:
    return {e.name: np.asarray(e.position) for e in lm if e.status == VISIBLE}


def build_atlas(training_sets: Sequence[LandmarkSet], iterations: int = 2) -> Atlas:
    """Mean landmark configuration after affine alignment to a reference.

    The first set is the initial reference. Every set is aligned to the
    reference on the visible landmarks they share (uniform weights), the
    aligned positions are averaged per name and the mean becomes the next
    reference. Sets that cannot be aligned (fewer than 4 shared, or
    degenerate) are skipped.
    """
    if not training_sets:
        raise ValueError("no training landmark sets")
    reference = _visible_points(training_sets[0])
    if len(reference) < 4 or not well_spaced(list(reference.values())):
        raise DegenerateConfigurationError("reference landmark set is degenerate")
    order = []
    for lm in training_sets:
        for e in lm:
            if e.status == VISIBLE and e.name not in order:
                order.append(e.name)
    for _ in range(iterations):
        sums = {n: np.zeros(3) for n in order}
        counts = dict.fromkeys(order, 0)
        for lm in training_sets:
            pts = _visible_points(lm)
            shared = [n for n in reference if n in pts]
            if len(shared) < 4:
                continue
            try:
                t = weighted_affine_fit([pts[n] for n in shared], [reference[n] for n in shared])
            except DegenerateConfigurationError:
                continue
            for n, p in pts.items():
                sums[n] += apply_affine(t, p)
                counts[n] += 1
        reference = {n: sums[n] / counts[n] for n in order if counts[n]}
    names = [n for n in order if n in reference]
    return Atlas(names, np.array([reference[n] for n in names]))


@dataclass(frozen=True)
class AtlasConfig:
    d_atlas: float = 10.0
    d_volume: float = 28.0
    min_inliers: int = 4

    def __post_init__(self):
        if self.d_atlas <= 0 or self.d_volume <= 0:
            raise ValueError("d_atlas and d_volume must be positive")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")


@dataclass
class FitResult:
    transform: AffineTransform  # detections -> atlas
    inliers: list
    residuals: dict
    dropped: list
    low_confidence: bool = False

    @property
    def valid(self) -> bool:
        return not self.low_confidence

    def report(self) -> str:
        lines = ["transform (detections -> atlas):"]
        for row in self.transform.matrix()[:3]:
            lines.append("  " + " ".join(f"{v: .9g}" for v in row))
        lines.append(f"low_confidence: {self.low_confidence}")
        lines.append("inliers: " + " ".join(self.inliers))
        lines.append("dropped: " + " ".join(self.dropped))
        lines.append("residuals_mm:")
        for name, r in self.residuals.items():
            lines.append(f"  {name} {r:.6g}")
        return "\n".join(lines) + "\n"


def failed_fit(names: Sequence[str] = ()) -> FitResult:
    return FitResult(AffineTransform.identity(), [], {}, list(names), low_confidence=True)


def iterative_refine_fit(detections: LandmarkSet, atlas: Atlas, cfg: AtlasConfig = AtlasConfig()) -> FitResult:
    """Certainty-weighted affine fit, dropping the worst landmark until all
    residuals are within ``cfg.d_atlas``.

    Stops early with ``low_confidence`` when only ``cfg.min_inliers`` remain
    and some residual still exceeds the threshold, or when the inliers are
    not well spaced.
    """
    usable = [e for e in detections if e.status == VISIBLE and e.name in atlas and e.certainty > 0]
    if len(usable) < cfg.min_inliers:
        raise InsufficientLandmarksError(
            f"{len(usable)} usable detections, at least {cfg.min_inliers} required"
        )
    current = [e.name for e in usable]
    det = {e.name: np.asarray(e.position) for e in usable}
    weight = {e.name: e.certainty for e in usable}
    dropped = []
    low_confidence = False
    transform = None
    while True:
        try:
            t = weighted_affine_fit([det[n] for n in current], [atlas.position(n) for n in current], [weight[n] for n in current])
        except DegenerateConfigurationError:
            if transform is None:
                raise
            # the last drop left a degenerate set: keep the previous fit
            current.append(dropped.pop())
            low_confidence = True
            break
        transform = t
        mapped = apply_affine(t, np.array([det[n] for n in current]))
        res = np.linalg.norm(mapped - np.array([atlas.position(n) for n in current]), axis=1)
        worst = int(np.argmax(res))
        if res[worst] <= cfg.d_atlas:
            break
        if len(current) <= cfg.min_inliers:
            low_confidence = True
            break
        dropped.append(current.pop(worst))
    if not well_spaced([det[n] for n in current]):
        low_confidence = True
    # well-spaced detections can still map onto a degenerate atlas image;
    # such a fit cannot be inverted back into the scan
    cond = transform.condition()
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        low_confidence = True
    all_res = {}
    for n in det:
        all_res[n] = float(np.linalg.norm(apply_affine(transform, det[n]) - atlas.position(n)))
    return FitResult(transform, list(current), all_res, dropped, low_confidence)


# ---------------------------------------------------------------------------
# Correction and coordinate channels


def mapped_atlas_positions(fit: FitResult, atlas: Atlas) -> np.ndarray:
    """Atlas landmarks mapped back into the scan frame."""
    return apply_affine(invert_affine(fit.transform), atlas.positions)


def roi_argmax(stack: HeatmapStack, channel: int, center, radius: float):
    """Highest-valued evaluated voxel of one channel within ``radius`` mm of
    ``center``; ties go to the lowest linear index. ``None`` if the sphere
    misses the evaluated region."""
    grid = stack.channel(channel)
    center = np.asarray(center, dtype=np.float64)
    lo = np.floor(grid.world_to_voxel(center - radius)).astype(int)
    hi = np.ceil(grid.world_to_voxel(center + radius)).astype(int) + 1
    lo = np.clip(lo, 0, grid.dims)
    hi = np.clip(hi, 0, grid.dims)
    if np.any(hi <= lo):
        return None
    box = tuple(slice(lo[a], hi[a]) for a in range(3))
    gx, gy, gz = (g[lo[a]:hi[a]] for a, g in enumerate(grid.world_grid()))
    d2 = (gx - center[0])[:, None, None] ** 2 + (gy - center[1])[None, :, None] ** 2 + (gz - center[2])[None, None, :] ** 2
    inside = (d2 <= radius**2) & stack.evaluated[box]
    idx = argmax_first(stack.data[channel][box], inside)
    if idx is None:
        return None
    return tuple(int(i) + int(l) for i, l in zip(idx, lo))


def direct_atlas_correction(
    detections: LandmarkSet,
    stack: HeatmapStack,
    atlas: Atlas,
    fit: FitResult,
    cfg: AtlasConfig = AtlasConfig(),
    spec: HeatmapSpec | None = None,
) -> LandmarkSet:
    """Move every landmark to the maximum of its heatmap within ``d_volume``
    mm of its atlas position mapped into the scan."""
    spec = stack.spec if spec is None else spec
    if fit.low_confidence:
        raise ValueError("cannot correct with a low-confidence fit")
    mapped = mapped_atlas_positions(fit, atlas)
    grid = stack.channel(0)
    entries = []
    found = False
    for i, name in enumerate(stack.names):
        if name not in atlas:
            entries.append(detections[name] if name in detections else Landmark(name, (0, 0, 0), 0.0, ABSENT))
            continue
        m = mapped[atlas.names.index(name)]
        idx = roi_argmax(stack, i, m, cfg.d_volume)
        if idx is None:
            entries.append(Landmark(name, tuple(m), 0.0, ABSENT))
            continue
        found = True
        value = float(stack.data[i][idx])
        entries.append(Landmark(name, tuple(grid.voxel_to_world(idx)), float(np.clip(value / spec.k, 0, 1)), VISIBLE))
    if not found:
        raise ValueError("no landmark ROI intersects the evaluated volume")
    return LandmarkSet(tuple(entries))


def atlas_coordinate_channels(geometry: Volume3D, fit: FitResult, atlas: Atlas, dtype=np.float32) -> list:
    """Three volumes holding each voxel's atlas-frame x, y, z, shifted by the
    atlas bounding-box centre and scaled by its half extent."""
    lo, hi = atlas.bounds()
    half = (hi - lo) / 2.0
    if np.any(half <= 0):
        raise DegenerateConfigurationError("atlas has zero extent along an axis")
    center = (hi + lo) / 2.0
    t = fit.transform
    gx, gy, gz = geometry.world_grid()
    out = []
    for j in range(3):
        a = t.linear[j]
        vals = (
            a[0] * gx[:, None, None]
            + a[1] * gy[None, :, None]
            + a[2] * gz[None, None, :]
            + (t.translation[j] - center[j])
        ) / half[j]
        out.append(Volume3D(vals.astype(dtype), geometry.spacing, geometry.origin))
    return out


# ---------------------------------------------------------------------------
# Estimator wrapper


class AtlasRegistration(TransformerMixin, BaseEstimator):
    """Robust affine registration of a detected landmark set onto an atlas.

    ``fit`` takes a :class:`LandmarkSet` of detections; ``transform`` maps
    scan-frame points into the atlas frame and ``inverse_transform`` maps
    atlas-frame points back.
    """

    def __init__(self, atlas=None, d_atlas=10.0, min_inliers=4):
        self.atlas = atlas
        self.d_atlas = d_atlas
        self.min_inliers = min_inliers

    def fit(self, X, y=None):
        if not isinstance(X, LandmarkSet):
            raise TypeError("X must be a LandmarkSet of detections")
        if self.atlas is None:
            raise ValueError("an atlas is required")
        cfg = AtlasConfig(d_atlas=self.d_atlas, min_inliers=self.min_inliers)
        self.fit_result_ = iterative_refine_fit(X, self.atlas, cfg)
        self.transform_ = self.fit_result_.transform
        return self

    def transform(self, X):
        check_is_fitted(self)
        return apply_affine(self.transform_, X)

    def inverse_transform(self, X):
        check_is_fitted(self)
        return apply_affine(invert_affine(self.transform_), X)
