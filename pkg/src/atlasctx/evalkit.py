"""Localisation error metrics and maximum-intensity-projection reports."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .volume import ABSENT, UNCERTAIN, VISIBLE, LandmarkSet, Volume3D, ensure_parent

DEFAULT_THRESHOLD_MM = 4.0
MIP_WINDOW = (-1000.0, 1000.0)

REF_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)
LINE_COLOR = (0, 0, 0)


def localisation_errors(pred: LandmarkSet, ref: LandmarkSet) -> dict:
    """World-mm distance for every name visible in both sets.

    Names the reference has visible but the prediction reports absent map to
    ``inf``; uncertain in either set means the name is skipped entirely.
    """
    out = {}
    for r in ref:
        if r.status != VISIBLE or r.name not in pred:
            continue
        p = pred[r.name]
        if p.status == UNCERTAIN:
            continue
        if p.status == ABSENT:
            out[r.name] = math.inf
            continue
        out[r.name] = float(np.linalg.norm(np.subtract(p.position, r.position)))
    return out


@dataclass
class SummaryMetrics:
    mean: float
    median: float
    max: float
    percent_over: float
    threshold: float
    n_scans: int
    n_scans_excluded: int
    n_landmarks: int
    n_over: int
    n_failed: int  # absent predictions, counted in percent_over only
    per_scan: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_scan")
        return d


def aggregate_metrics(per_scan_errors: Sequence[Mapping[str, float]], threshold: float = DEFAULT_THRESHOLD_MM) -> SummaryMetrics:
    """Per-scan mean/median/max averaged over scans, and percent of the pooled
    landmarks whose error exceeds ``threshold``."""
    if len(per_scan_errors) == 0:
        raise ValueError("at least one scan is required")
    per_scan = []
    excluded = 0
    pooled = 0
    over = 0
    failed = 0
    for errs in per_scan_errors:
        vals = np.array(list(errs.values()), dtype=np.float64)
        pooled += vals.size
        over += int(np.sum(vals > threshold))
        finite = vals[np.isfinite(vals)]
        failed += vals.size - finite.size
        if finite.size == 0:
            excluded += 1
            continue
        per_scan.append((float(finite.mean()), float(np.median(finite)), float(finite.max())))
    if per_scan:
        mean, median, mx = (float(v) for v in np.mean(np.array(per_scan), axis=0))
    else:
        mean = median = mx = math.nan
    pct = 100.0 * over / pooled if pooled else 0.0
    return SummaryMetrics(mean, median, mx, pct, threshold, len(per_scan), excluded, pooled, over, failed, per_scan)


def per_landmark_breakdown(all_errors: Sequence[Mapping[str, float]], threshold: float = DEFAULT_THRESHOLD_MM, names: Sequence[str] | None = None) -> dict:
    counts = {n: 0 for n in (names or [])}
    for errs in all_errors:
        for n, e in errs.items():
            counts.setdefault(n, 0)
            if e > threshold:
                counts[n] += 1
    return counts


def format_report(rows: Mapping[str, SummaryMetrics], breakdown: Mapping[str, int] | None = None) -> str:
    """Text table with one row per method (Mean, Median, Max, %) followed by
    a key=value block."""
    first = next(iter(rows.values()), None)
    thr = first.threshold if first is not None else DEFAULT_THRESHOLD_MM
    width = max([len("Method")] + [len(k) for k in rows])
    lines = [f"{'Method':<{width}}  {'Mean':>8}  {'Median':>8}  {'Max':>8}  {'%>' + format(thr, 'g') + 'mm':>8}"]
    for name, m in rows.items():
        lines.append(f"{name:<{width}}  {m.mean:8.2f}  {m.median:8.2f}  {m.max:8.2f}  {m.percent_over:8.2f}")
    lines.append("")
    for name, m in rows.items():
        key = name.strip().lower().replace(" ", "_")
        for k, v in m.as_dict().items():
            lines.append(f"{key}.{k}={v!r}")
    if breakdown:
        lines.append("")
        lines.append(f"# landmarks with error > {thr:g}mm")
        for n, c in breakdown.items():
            lines.append(f"over.{n}={c}")
    return "\n".join(lines) + "\n"


def write_error_table(per_scan_errors: Sequence[Mapping[str, float]], scan_ids: Sequence[str], path) -> None:
    """One ``scan name error_mm`` line per comparison for external tests."""
    ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        for sid, errs in zip(scan_ids, per_scan_errors):
            for n, e in errs.items():
                fh.write(f"{sid} {n} {e!r}\n")


# ---------------------------------------------------------------------------
# MIP rendering

_AXES = {"x": 0, "y": 1, "z": 2}


def window_to_uint8(values: np.ndarray, window=MIP_WINDOW) -> np.ndarray:
    lo, hi = window
    scaled = (np.asarray(values, dtype=np.float64) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def mip(vol: Volume3D, axis) -> np.ndarray:
    a = _AXES[axis] if isinstance(axis, str) else int(axis)
    return np.max(vol.data, axis=a)


def _line(img, p0, p1, color):
    # simple DDA, inclusive of both ends
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    rows = np.rint(np.linspace(p0[0], p1[0], n)).astype(int)
    cols = np.rint(np.linspace(p0[1], p1[1], n)).astype(int)
    ok = (rows >= 0) & (rows < img.shape[0]) & (cols >= 0) & (cols < img.shape[1])
    img[rows[ok], cols[ok]] = color


def _dot(img, p, color, radius=1):
    r, c = int(round(p[0])), int(round(p[1]))
    img[max(r - radius, 0): r + radius + 1, max(c - radius, 0): c + radius + 1] = color


def mip_image(vol: Volume3D, pred: LandmarkSet | None, ref: LandmarkSet | None, axis, dot_radius: int = 1) -> np.ndarray:
    """RGB uint8 image of shape (rows, cols, 3). Rows follow the first
    remaining volume axis and columns the second."""
    a = _AXES[axis] if isinstance(axis, str) else int(axis)
    if a not in (0, 1, 2):
        raise ValueError("axis must be one of x, y, z")
    gray = window_to_uint8(mip(vol, a))
    img = np.repeat(gray[:, :, None], 3, axis=2)
    keep = [i for i in range(3) if i != a]

    def project(p):
        v = vol.world_to_voxel(p)
        return v[keep[0]], v[keep[1]]

    pred = pred or LandmarkSet(())
    ref = ref or LandmarkSet(())
    for r in ref:
        if r.status == VISIBLE and r.name in pred and pred[r.name].status == VISIBLE:
            _line(img, project(r.position), project(pred[r.name].position), LINE_COLOR)
    for r in ref:
        if r.status == VISIBLE:
            _dot(img, project(r.position), REF_COLOR, dot_radius)
    for p in pred:
        if p.status == VISIBLE:
            _dot(img, project(p.position), PRED_COLOR, dot_radius)
    return img


def write_ppm(img: np.ndarray, path) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (rows, cols, 3) RGB image")
    ensure_parent(path)
    rows, cols = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("not an 8-bit P6 image")
    cols, rows = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1: pos + 1 + rows * cols * 3], dtype=np.uint8)
    return data.reshape(rows, cols, 3).copy()


def render_mip(vol: Volume3D, pred: LandmarkSet | None, ref: LandmarkSet | None, axis, path) -> np.ndarray:
    img = mip_image(vol, pred, ref, axis)
    write_ppm(img, path)
    return img
