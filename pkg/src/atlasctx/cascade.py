"""Two-pass detection with atlas location autocontext.

Pass 0 runs the image-only network at coarse resolution, fits the atlas to
its detections and corrects outliers. Pass 1 runs at fine resolution on the
image plus three atlas-coordinate channels derived from the pass-0 fit,
evaluating only spheres around the atlas-predicted landmark positions, and
applies the same correction to its own detections.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .atlas import (
    Atlas,
    AtlasConfig,
    DegenerateConfigurationError,
    FitResult,
    InsufficientLandmarksError,
    atlas_coordinate_channels,
    build_atlas,
    direct_atlas_correction,
    failed_fit,
    iterative_refine_fit,
    mapped_atlas_positions,
    well_spaced,
)
from .heatmap import HeatmapSpec, HeatmapStack, PatchBatch, Sphere, extract_detections, sample_training_patches, tile_inference
from .nnet import FcnModel, TrainSchedule, evaluate_loss, load_weights, save_weights, train_model
from .volume import (
    ABSENT,
    AIR_NORMALIZED,
    VISIBLE,
    Landmark,
    LandmarkSet,
    Volume3D,
    normalize_intensities,
    pad_with_air,
    random_crop,
    reflect_lr,
    resample,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    pass0_spacing: float = 4.0
    pass1_spacing: float = 2.0
    heatmap0: HeatmapSpec = HeatmapSpec(1.0, 1e3)
    heatmap1: HeatmapSpec = HeatmapSpec(1.0, 1e6)
    atlas: AtlasConfig = AtlasConfig()
    schedule0: TrainSchedule = TrainSchedule(epochs=50)
    schedule1: TrainSchedule = TrainSchedule(epochs=200)
    base_filters: int = 12
    background_ratio: int = 5
    crop_mm: float = 50.0
    reflect: bool = True
    crop_pass1: bool = True
    tile: int = 30
    single_pass: bool = False
    swap_pairs: tuple = ()

    def __post_init__(self):
        if self.pass0_spacing <= 0 or self.pass1_spacing <= 0:
            raise ValueError("spacings must be positive")
        if self.pass1_spacing > self.pass0_spacing:
            raise ValueError("pass 1 must not be coarser than pass 0")
        if self.base_filters < 1 or self.background_ratio < 0 or self.tile < 1:
            raise ValueError("invalid network or sampling settings")

    @classmethod
    def single_pass_preset(cls, spacing: float = 2.0, **kw) -> "PipelineConfig":
        """One network at fine resolution followed by atlas correction."""
        kw.setdefault("heatmap0", HeatmapSpec(1.0, 1e6))
        return cls(pass0_spacing=spacing, pass1_spacing=spacing, single_pass=True, **kw)


@dataclass
class Pipeline:
    model0: FcnModel
    model1: FcnModel | None
    atlas: Atlas
    config: PipelineConfig
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.atlas.names)
        for m in (self.model0, self.model1):
            if m is not None and m.n_landmarks != n:
                raise ValueError("models and atlas disagree on the number of landmarks")

    @property
    def names(self) -> list:
        return list(self.atlas.names)


class PassResult(NamedTuple):
    detections: LandmarkSet  # after atlas correction
    stack: HeatmapStack
    fit: FitResult
    raw: LandmarkSet  # argmax detections before correction


# ---------------------------------------------------------------------------
# Preprocessing


def prepare_image(vol: Volume3D, spacing: float) -> Volume3D:
    return resample(normalize_intensities(vol), (spacing,) * 3)


def safe_fit(detections: LandmarkSet, atlas: Atlas, cfg: AtlasConfig) -> FitResult:
    try:
        return iterative_refine_fit(detections, atlas, cfg)
    except (InsufficientLandmarksError, DegenerateConfigurationError):
        return failed_fit()


def _infer(model, channels, names, spec, roi, tile) -> HeatmapStack:
    # stand-in models (e.g. oracles in tests) can provide their own heatmaps
    if hasattr(model, "heatmaps"):
        return model.heatmaps(channels, names, spec, roi)
    return tile_inference(model, channels, names, spec, roi=roi, tile=tile)


def _correct(raw, stack, atlas, fit, cfg) -> LandmarkSet:
    try:
        return direct_atlas_correction(raw, stack, atlas, fit, cfg)
    except (ValueError, DegenerateConfigurationError):
        return raw


def _as_output(lm: LandmarkSet, names) -> LandmarkSet:
    entries = []
    for n in names:
        e = lm[n] if n in lm else Landmark(n, (0.0, 0.0, 0.0), 0.0, ABSENT)
        entries.append(e if e.status in (VISIBLE, ABSENT) else replace(e, status=VISIBLE))
    return LandmarkSet(tuple(entries))


def mark_outside(lm: LandmarkSet, fit: FitResult, atlas: Atlas, image: Volume3D) -> LandmarkSet:
    """Landmarks whose atlas-mapped position lies outside the image extent
    are reported absent at that position."""
    if not fit.valid:
        return lm
    mapped = mapped_atlas_positions(fit, atlas)
    out = []
    for e in lm:
        if e.name in atlas:
            p = mapped[atlas.names.index(e.name)]
            if not image.contains(p):
                e = Landmark(e.name, tuple(p), 0.0, ABSENT)
        out.append(e)
    return LandmarkSet(tuple(out))


def pass1_channels(img: Volume3D, fit: FitResult, atlas: Atlas, margin: int) -> list:
    padded = pad_with_air(img, margin, AIR_NORMALIZED)
    return [padded] + atlas_coordinate_channels(padded, fit, atlas)


# ---------------------------------------------------------------------------
# Detection


def run_pass0(vol: Volume3D, pipe: Pipeline) -> PassResult:
    cfg = pipe.config
    model = pipe.model0
    img = prepare_image(vol, cfg.pass0_spacing)
    padded = pad_with_air(img, model.margin, AIR_NORMALIZED)
    stack = _infer(model, [padded], pipe.names, cfg.heatmap0, None, cfg.tile)
    raw = extract_detections(stack)
    fit = safe_fit(raw, pipe.atlas, cfg.atlas)
    if fit.low_confidence:
        return PassResult(_as_output(raw, pipe.names), stack, fit, raw)
    corrected = _correct(raw, stack, pipe.atlas, fit, cfg.atlas)
    refit = safe_fit(corrected, pipe.atlas, cfg.atlas)
    if refit.valid:
        fit = refit
    corrected = mark_outside(corrected, fit, pipe.atlas, img)
    return PassResult(_as_output(corrected, pipe.names), stack, fit, raw)


def run_pass1(vol: Volume3D, pipe: Pipeline, fit: FitResult) -> PassResult:
    cfg = pipe.config
    model = pipe.model1
    if model is None:
        raise ValueError("pipeline has no pass-1 model")
    img = prepare_image(vol, cfg.pass1_spacing)
    channels = pass1_channels(img, fit, pipe.atlas, model.margin)
    roi = None
    outside = set()
    if fit.valid:
        # landmarks the pass-0 fit places outside the scan get no ROI and
        # stay out of the pass-1 fit; the final mark_outside decides them
        mapped = mapped_atlas_positions(fit, pipe.atlas)
        outside = {n for n, p in zip(pipe.atlas.names, mapped) if not img.contains(p)}
        spheres = [Sphere(tuple(p), cfg.atlas.d_volume) for n, p in zip(pipe.atlas.names, mapped) if n not in outside]
        roi = spheres or None
    stack = _infer(model, channels, pipe.names, cfg.heatmap1, roi, cfg.tile)
    raw = extract_detections(stack)
    if outside:
        raw = LandmarkSet(tuple(replace(e, certainty=0.0, status=ABSENT) if e.name in outside else e for e in raw))
    refit = safe_fit(raw, pipe.atlas, cfg.atlas)
    use = refit if refit.valid else fit
    if use.low_confidence:
        return PassResult(_as_output(raw, pipe.names), stack, refit, raw)
    corrected = _correct(raw, stack, pipe.atlas, use, cfg.atlas)
    corrected = mark_outside(corrected, use, pipe.atlas, img)
    return PassResult(_as_output(corrected, pipe.names), stack, use, raw)


def detect_stages(vol: Volume3D, pipe: Pipeline) -> dict:
    """Runs the full cascade and returns every intermediate result plus
    per-stage timings."""
    t0 = time.perf_counter()
    p0 = run_pass0(vol, pipe)
    t1 = time.perf_counter()
    out = {"pass0": p0, "timing": {"pass0_s": t1 - t0}}
    log.info("pass 0: %.2fs, fit low_confidence=%s dropped=%s", t1 - t0, p0.fit.low_confidence, p0.fit.dropped)
    if pipe.config.single_pass or pipe.model1 is None:
        out["final"] = p0.detections
        out["fit"] = p0.fit
        return out
    p1 = run_pass1(vol, pipe, p0.fit)
    t2 = time.perf_counter()
    out["timing"]["pass1_s"] = t2 - t1
    log.info("pass 1: %.2fs, fit low_confidence=%s dropped=%s", t2 - t1, p1.fit.low_confidence, p1.fit.dropped)
    out["pass1"] = p1
    out["final"] = p1.detections
    out["fit"] = p1.fit
    return out


def detect(vol: Volume3D, pipe: Pipeline, report: dict | None = None) -> LandmarkSet:
    stages = detect_stages(vol, pipe)
    if report is not None:
        report.update(timing=stages["timing"], fit=stages["fit"].report())
    return stages["final"]


# ---------------------------------------------------------------------------
# Training


Scan = tuple  # (raw HU Volume3D, ground-truth LandmarkSet)


def _atlas_sets(scans: Sequence[Scan], min_inliers: int) -> list:
    sets = [lm for _, lm in scans if sum(e.status == VISIBLE for e in lm) >= min_inliers]
    for i, lm in enumerate(sets):
        pts = lm.visible().positions()
        if well_spaced(pts):
            return [lm] + sets[:i] + sets[i + 1 :]
    raise DegenerateConfigurationError("no training scan has a well-spaced set of visible landmarks")


def _augment(img: Volume3D, lm: LandmarkSet, cfg: PipelineConfig, rng, reflect: bool, crop: bool):
    if reflect and rng.uniform() < 0.5:
        img, lm = reflect_lr(img, lm, cfg.swap_pairs)
    if crop and cfg.crop_mm > 0:
        img, lm = random_crop(img, lm, cfg.crop_mm, rng, air=AIR_NORMALIZED)
    return img, lm


def _fits_patch(img: Volume3D, margin: int) -> bool:
    return min(img.dims) + 2 * margin >= 3 + 2 * margin


def _pass0_patches(images, landmarks, names, cfg, model_margin, rng, augment) -> PatchBatch:
    batches = []
    for img, lm in zip(images, landmarks):
        if augment:
            img, lm = _augment(img, lm, cfg, rng, cfg.reflect, True)
        padded = pad_with_air(img, model_margin, AIR_NORMALIZED)
        batches.append(
            sample_training_patches([padded], lm, cfg.heatmap0, rng, names, model_margin, cfg.background_ratio)
        )
    return PatchBatch.concatenate(batches)


def _coordinate_patches(padded: Volume3D, centers, fit: FitResult, atlas: Atlas, reach: int) -> np.ndarray:
    # the coordinate channels are affine in world position, so only the
    # patch windows are evaluated instead of whole volumes
    size = 2 * reach + 1
    out = np.empty((len(centers), 3, size, size, size), dtype=np.float32)
    for i, c in enumerate(centers):
        corner = padded.voxel_to_world(np.asarray(c) - reach)
        win = Volume3D(np.broadcast_to(np.float32(0), (size,) * 3), padded.spacing, tuple(corner))
        out[i] = np.stack([ch.data for ch in atlas_coordinate_channels(win, fit, atlas)])
    return out


def _pass1_patches(images, landmarks, fits, atlas, names, cfg, model_margin, rng, augment) -> PatchBatch:
    """``images`` are already prepared at the pass-1 spacing."""
    batches = []
    for img, lm, fit in zip(images, landmarks, fits):
        if augment and cfg.crop_pass1:
            img, lm = _augment(img, lm, cfg, rng, False, True)
        padded = pad_with_air(img, model_margin, AIR_NORMALIZED)
        b = sample_training_patches([padded], lm, cfg.heatmap1, rng, names, model_margin, cfg.background_ratio)
        coords = _coordinate_patches(padded, b.centers, fit, atlas, b.inputs.shape[-1] // 2)
        b.inputs = np.concatenate([b.inputs, coords], axis=1)
        batches.append(b)
    return PatchBatch.concatenate(batches)


def train_pass0(
    train_scans: Sequence[Scan],
    val_scans: Sequence[Scan],
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> Pipeline:
    """Builds the atlas and trains the image-only model. The result is a
    usable single-pass pipeline."""
    if not train_scans or not val_scans:
        raise ValueError("training and validation scans are required")
    s_init, s_val, s_aug, s_order = rng.spawn(4)
    atlas = build_atlas(_atlas_sets(train_scans, cfg.atlas.min_inliers))
    names = atlas.names
    history = {"stages": ["atlas"]}
    log.info("atlas built from %d scans: %d landmarks", len(train_scans), len(names))

    model0 = FcnModel.build(1, len(names), cfg.base_filters, rng=s_init)
    m = model0.margin
    imgs = [prepare_image(v, cfg.pass0_spacing) for v, _ in train_scans]
    lms = [lm for _, lm in train_scans]
    val = _pass0_patches(
        [prepare_image(v, cfg.pass0_spacing) for v, _ in val_scans],
        [lm for _, lm in val_scans],
        names, cfg, m, s_val, augment=False,
    )
    history["pass0_initial_val"] = evaluate_loss(model0, val.as_tuple())
    model0, hist = train_model(
        model0,
        lambda epoch: _pass0_patches(imgs, lms, names, cfg, m, s_aug, augment=True).as_tuple(),
        val.as_tuple(),
        cfg.schedule0,
        s_order,
    )
    history["pass0"] = hist
    history["stages"].append("model0")
    return Pipeline(model0, None, atlas, cfg, history)


def train_pass1(
    pipe: Pipeline,
    train_scans: Sequence[Scan],
    val_scans: Sequence[Scan],
    rng: np.random.Generator,
) -> Pipeline:
    """Runs pass 0 on every scan, caches the fits and trains the
    four-channel model on coordinate channels derived from them."""
    cfg = pipe.config
    s_init, s_val, s_aug, s_order = rng.spawn(4)
    history = dict(pipe.history)
    history["stages"] = list(history.get("stages", []))
    stage0 = replace(pipe, model1=None, config=replace(cfg, single_pass=True))
    train_fits = [run_pass0(v, stage0).fit for v, _ in train_scans]
    val_fits = [run_pass0(v, stage0).fit for v, _ in val_scans]
    history["stages"].append("pass0_fits")
    n_bad = sum(f.low_confidence for f in train_fits + val_fits)
    history["pass0_fit_failures"] = n_bad
    log.info("pass-0 fits: %d low-confidence of %d", n_bad, len(train_fits) + len(val_fits))

    names = pipe.names
    model1 = FcnModel.build(4, len(names), cfg.base_filters, rng=s_init)
    m = model1.margin
    train_imgs = [prepare_image(v, cfg.pass1_spacing) for v, _ in train_scans]
    train_lms = [lm for _, lm in train_scans]
    val = _pass1_patches(
        [prepare_image(v, cfg.pass1_spacing) for v, _ in val_scans],
        [lm for _, lm in val_scans],
        val_fits, pipe.atlas, names, cfg, m, s_val, augment=False,
    )
    history["pass1_initial_val"] = evaluate_loss(model1, val.as_tuple())
    model1, hist = train_model(
        model1,
        lambda epoch: _pass1_patches(train_imgs, train_lms, train_fits, pipe.atlas, names, cfg, m, s_aug, augment=True).as_tuple(),
        val.as_tuple(),
        cfg.schedule1,
        s_order,
    )
    history["pass1"] = hist
    history["stages"].append("model1")
    return Pipeline(pipe.model0, model1, pipe.atlas, replace(cfg, single_pass=False), history)


def train_pipeline(
    train_scans: Sequence[Scan],
    val_scans: Sequence[Scan],
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> Pipeline:
    """Atlas, then pass-0 model, then pass-0 fits on every scan, then the
    pass-1 model on coordinate channels from those fits."""
    r0, r1 = rng.spawn(2)
    pipe = train_pass0(train_scans, val_scans, cfg, r0)
    if cfg.single_pass:
        return pipe
    return train_pass1(pipe, train_scans, val_scans, r1)


# ---------------------------------------------------------------------------
# Bundle I/O


def config_to_dict(cfg: PipelineConfig, names: Sequence[str] = ()) -> dict:
    d = {
        "pass0_spacing": cfg.pass0_spacing,
        "pass1_spacing": cfg.pass1_spacing,
        "sigma0": cfg.heatmap0.sigma,
        "k0": cfg.heatmap0.k,
        "sigma1": cfg.heatmap1.sigma,
        "k1": cfg.heatmap1.k,
        "d_atlas": cfg.atlas.d_atlas,
        "d_volume": cfg.atlas.d_volume,
        "min_inliers": cfg.atlas.min_inliers,
        "epochs0": cfg.schedule0.epochs,
        "epochs1": cfg.schedule1.epochs,
        "batch_size": cfg.schedule0.batch_size,
        "learning_rate": cfg.schedule0.learning_rate,
        "base_filters": cfg.base_filters,
        "background_ratio": cfg.background_ratio,
        "crop_mm": cfg.crop_mm,
        "reflect": cfg.reflect,
        "tile": cfg.tile,
        "single_pass": cfg.single_pass,
        "swap_pairs": ";".join(f"{a},{b}" for a, b in cfg.swap_pairs),
    }
    if names:
        d["landmarks"] = ",".join(names)
    return d


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def config_from_dict(d: dict) -> PipelineConfig:
    pairs = tuple(tuple(p.split(",")) for p in str(d.get("swap_pairs", "")).split(";") if p)
    base = PipelineConfig()
    sched = dict(batch_size=int(d.get("batch_size", 32)), learning_rate=float(d.get("learning_rate", 1e-3)))
    return PipelineConfig(
        pass0_spacing=float(d.get("pass0_spacing", base.pass0_spacing)),
        pass1_spacing=float(d.get("pass1_spacing", base.pass1_spacing)),
        heatmap0=HeatmapSpec(float(d.get("sigma0", 1.0)), float(d.get("k0", base.heatmap0.k))),
        heatmap1=HeatmapSpec(float(d.get("sigma1", 1.0)), float(d.get("k1", base.heatmap1.k))),
        atlas=AtlasConfig(
            float(d.get("d_atlas", base.atlas.d_atlas)),
            float(d.get("d_volume", base.atlas.d_volume)),
            int(d.get("min_inliers", base.atlas.min_inliers)),
        ),
        schedule0=TrainSchedule(epochs=int(d.get("epochs0", 50)), **sched),
        schedule1=TrainSchedule(epochs=int(d.get("epochs1", 200)), **sched),
        base_filters=int(d.get("base_filters", base.base_filters)),
        background_ratio=int(d.get("background_ratio", base.background_ratio)),
        crop_mm=float(d.get("crop_mm", base.crop_mm)),
        reflect=_parse_bool(d.get("reflect", True)),
        tile=int(d.get("tile", base.tile)),
        single_pass=_parse_bool(d.get("single_pass", False)),
        swap_pairs=pairs,
    )


def write_keyvalue(d: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in d.items():
            fh.write(f"{k}={v}\n")


def read_keyvalue(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def save_pipeline(pipe: Pipeline, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_weights(pipe.model0, os.path.join(directory, "model0.fcnw"))
    if pipe.model1 is not None:
        save_weights(pipe.model1, os.path.join(directory, "model1.fcnw"))
    pipe.atlas.save(os.path.join(directory, "atlas.lmk"))
    write_keyvalue(config_to_dict(pipe.config, pipe.names), os.path.join(directory, "pipeline.cfg"))


def load_pipeline(directory) -> Pipeline:
    d = read_keyvalue(os.path.join(directory, "pipeline.cfg"))
    cfg = config_from_dict(d)
    atlas = Atlas.load(os.path.join(directory, "atlas.lmk"))
    if "landmarks" in d and d["landmarks"].split(",") != atlas.names:
        raise ValueError("pipeline.cfg landmark order does not match atlas.lmk")
    model0 = load_weights(os.path.join(directory, "model0.fcnw"))
    model1 = None
    path1 = os.path.join(directory, "model1.fcnw")
    if not cfg.single_pass:
        if not os.path.exists(path1):
            raise FileNotFoundError(f"{path1} is missing and the bundle is not single-pass")
        model1 = load_weights(path1)
    return Pipeline(model0, model1, atlas, cfg)
