"""Command line: ``atlasctx {phantom,train,detect,evaluate,sweep}``.

Configuration is a ``key=value`` file merged with ``--set key=value`` flags
and the dedicated flags of each command (flags win). The merged config is
written to ``<out>/config.txt``. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import __version__
from .atlas import AtlasConfig, build_atlas, iterative_refine_fit, mapped_atlas_positions, Atlas
from .cascade import (
    Pipeline,
    PipelineConfig,
    config_from_dict,
    config_to_dict,
    detect_stages,
    load_pipeline,
    read_keyvalue,
    save_pipeline,
    train_pass0,
    train_pass1,
    train_pipeline,
    write_keyvalue,
)
from .evalkit import (
    DEFAULT_THRESHOLD_MM,
    aggregate_metrics,
    format_report,
    localisation_errors,
    per_landmark_breakdown,
    render_mip,
    write_error_table,
)
from .phantom import DEFAULT_SWAP_PAIRS, PhantomSpec, generate_dataset, read_manifest
from .volume import VISIBLE, load_landmarks, load_volume, save_landmarks

log = logging.getLogger("atlasctx")


class UsageError(Exception):
    pass


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _ints(v):
    return tuple(int(x) for x in str(v).split(",") if x.strip())


def _str(v):
    return str(v)


# every key a config file or --set may contain
SCHEMA = {
    # phantom generation
    "n_scans": _int,
    "split": _ints,
    "shape": _ints,
    "spacing": _float,
    "noise_hu": _float,
    "rotation_deg": _float,
    "scale_range": _floats,
    "translation_mm": _float,
    "crop_probability": _float,
    "phantom_crop_mm": _float,
    # pipeline
    "pass0_spacing": _float,
    "pass1_spacing": _float,
    "sigma0": _float,
    "k0": _float,
    "sigma1": _float,
    "k1": _float,
    "d_atlas": _float,
    "d_volume": _float,
    "min_inliers": _int,
    "epochs0": _int,
    "epochs1": _int,
    "batch_size": _int,
    "learning_rate": _float,
    "base_filters": _int,
    "background_ratio": _int,
    "crop_mm": _float,
    "reflect": _bool,
    "tile": _int,
    "single_pass": _bool,
    "swap_pairs": _str,
    # run
    "seed": _int,
    "jobs": _int,
    # evaluation and sweep
    "threshold_mm": _float,
    "sweep_values": _floats,
}

PIPELINE_KEYS = [k for k in config_to_dict(PipelineConfig()) if k in SCHEMA]


def parse_config(pairs: dict) -> dict:
    out = {}
    for k, v in pairs.items():
        if k not in SCHEMA:
            raise UsageError(f"unknown config key {k!r}")
        try:
            out[k] = SCHEMA[k](v)
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {exc}") from None
    return out


def effective_config(args) -> dict:
    raw = {}
    if args.config:
        try:
            raw.update(read_keyvalue(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    cfg = parse_config(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    cfg.setdefault("seed", 0)
    cfg.setdefault("jobs", os.cpu_count() or 1)
    if cfg["jobs"] < 1:
        raise UsageError("jobs must be at least 1")
    args.seed, args.jobs = cfg["seed"], cfg["jobs"]
    return cfg


def echo_config(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    flat = {k: (",".join(str(x) for x in v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    write_keyvalue(flat, os.path.join(out_dir, "config.txt"))


def pipeline_config(cfg: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    d = config_to_dict(base or PipelineConfig(swap_pairs=DEFAULT_SWAP_PAIRS))
    for k in PIPELINE_KEYS:
        if k in cfg:
            d[k] = cfg[k]
    return config_from_dict(d)


def phantom_spec(cfg: dict) -> PhantomSpec:
    kw = {}
    if "shape" in cfg:
        shape = cfg["shape"]
        kw["shape"] = shape * 3 if len(shape) == 1 else shape
    for key, field in (
        ("spacing", "spacing"),
        ("noise_hu", "noise_hu"),
        ("rotation_deg", "rotation_deg"),
        ("scale_range", "scale_range"),
        ("translation_mm", "translation_mm"),
        ("crop_probability", "crop_probability"),
        ("phantom_crop_mm", "crop_mm"),
    ):
        if key in cfg:
            kw[field] = cfg[key]
    return PhantomSpec(**kw)


def load_split(manifest, split=None) -> list:
    entries = read_manifest(manifest)
    out = []
    for e in entries:
        if split is None or e.split == split:
            out.append((e, load_volume(e.volume), load_landmarks(e.landmarks)))
    return out


def _stem(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# Commands


def cmd_phantom(args, cfg) -> int:
    n = args.n if args.n is not None else cfg.get("n_scans", 20)
    cfg["n_scans"] = n
    spec = phantom_spec(cfg)
    split = cfg.get("split")
    echo_config(cfg, args.out)
    log.info("generating %d phantoms of shape %s into %s", n, spec.shape, args.out)
    entries = generate_dataset(spec, n, args.seed, args.out, split=split, jobs=args.jobs)
    log.info("wrote %d scans and manifest.txt", len(entries))
    return 0


def cmd_train(args, cfg) -> int:
    # same sub-streams as train_pipeline, so pass0 then pass1 equals full
    r0, r1 = np.random.default_rng(args.seed).spawn(2)
    train = [(v, l) for _, v, l in load_split(args.manifest, "train")]
    val = [(v, l) for _, v, l in load_split(args.manifest, "val")]
    if not train or not val:
        raise RuntimeError("manifest needs both train and val entries")
    log.info("training on %d scans, validating on %d", len(train), len(val))
    if args.stage == "pass1":
        if not args.bundle:
            raise UsageError("--stage pass1 needs --bundle with a trained pass-0 model")
        base = load_pipeline(args.bundle)
        pipe = replace(base, config=pipeline_config(cfg, base.config))
        pipe = train_pass1(pipe, train, val, r1)
    else:
        pcfg = pipeline_config(cfg)
        if args.stage == "pass0":
            pipe = train_pass0(train, val, pcfg, r0)
            pipe = replace(pipe, config=replace(pipe.config, single_pass=True))
        else:
            pipe = train_pipeline(train, val, pcfg, np.random.default_rng(args.seed))
    echo_config(cfg, args.out)
    save_pipeline(pipe, args.out)
    with open(os.path.join(args.out, "history.txt"), "w", encoding="utf-8") as fh:
        for key in ("pass0", "pass1"):
            for rec in pipe.history.get(key, []):
                fh.write(f"{key} epoch={rec['epoch']} train_loss={rec['train_loss']!r} val_loss={rec['val_loss']!r}\n")
    log.info("bundle written to %s", args.out)
    return 0


def _detect_one(pipe, vol, out_dir, stem) -> None:
    stages = detect_stages(vol, pipe)
    save_landmarks(stages["final"], os.path.join(out_dir, f"{stem}.lmk"))
    save_landmarks(stages["pass0"].raw, os.path.join(out_dir, f"{stem}.pass0_raw.lmk"))
    with open(os.path.join(out_dir, f"{stem}.fit.txt"), "w", encoding="utf-8") as fh:
        for k, v in stages["timing"].items():
            fh.write(f"{k}={v:.3f}\n")
        fh.write(stages["fit"].report())
    log.info("%s: %d of %d landmarks visible", stem, sum(e.status == VISIBLE for e in stages["final"]), len(pipe.names))


def cmd_detect(args, cfg) -> int:
    if bool(args.volume) == bool(args.manifest):
        raise UsageError("give exactly one of --volume or --manifest")
    pipe = load_pipeline(args.bundle)
    overrides = {k: v for k, v in cfg.items() if k in ("d_atlas", "d_volume", "min_inliers", "tile")}
    if overrides:
        pipe = replace(pipe, config=pipeline_config(cfg, pipe.config))
    echo_config(cfg, args.out)
    if args.volume:
        _detect_one(pipe, load_volume(args.volume), args.out, _stem(args.volume))
        return 0
    todo = [e for e in read_manifest(args.manifest) if not args.split or e.split == args.split]
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        list(pool.map(lambda e: _detect_one(pipe, load_volume(e.volume), args.out, _stem(e.volume)), todo))
    return 0


def cmd_evaluate(args, cfg) -> int:
    thr = cfg.get("threshold_mm", DEFAULT_THRESHOLD_MM)
    echo_config(cfg, args.out)
    errors, ids = [], []
    for e in read_manifest(args.manifest):
        if args.split and e.split != args.split:
            continue
        stem = _stem(e.volume)
        pred_path = os.path.join(args.pred, f"{stem}.lmk")
        if not os.path.exists(pred_path):
            raise RuntimeError(f"no prediction for {stem} in {args.pred}")
        pred, ref = load_landmarks(pred_path), load_landmarks(e.landmarks)
        errors.append(localisation_errors(pred, ref))
        ids.append(stem)
        for axis in args.mip or []:
            render_mip(load_volume(e.volume), pred, ref, axis, os.path.join(args.out, f"{stem}.mip_{axis}.ppm"))
    if not errors:
        raise RuntimeError("no scans to evaluate")
    metrics = aggregate_metrics(errors, thr)
    breakdown = per_landmark_breakdown(errors, thr)
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report({args.label: metrics}, breakdown))
    write_error_table(errors, ids, os.path.join(args.out, "errors.txt"))
    log.info("%s: mean %.3f mm, %.2f%% over %g mm", args.label, metrics.mean, metrics.percent_over, thr)
    return 0


def mapping_error(detections, reference, atlas: Atlas, d_atlas: float, min_inliers: int = 4) -> float:
    """Mean distance between inverse-mapped atlas landmarks and the
    reference landmarks visible in the scan."""
    fit = iterative_refine_fit(detections, atlas, AtlasConfig(d_atlas=d_atlas, min_inliers=min_inliers))
    mapped = mapped_atlas_positions(fit, atlas)
    d = [
        np.linalg.norm(mapped[i] - np.asarray(reference[n].position))
        for i, n in enumerate(atlas.names)
        if n in reference and reference[n].status == VISIBLE
    ]
    return float(np.mean(d))


def sweep_d_atlas(cases, atlas: Atlas, values, min_inliers: int = 4) -> tuple:
    """``cases`` are ``(detections, reference)`` pairs. Returns the list of
    ``(value, mean error)`` and the best value (smallest wins ties)."""
    rows = []
    for v in values:
        errs = [mapping_error(det, ref, atlas, v, min_inliers) for det, ref in cases]
        rows.append((float(v), float(np.mean(errs))))
    best = min(rows, key=lambda r: (r[1], r[0]))[0]
    return rows, best


def cmd_sweep(args, cfg) -> int:
    values = cfg.get("sweep_values", (2.0, 5.0, 10.0, 15.0, 20.0, 30.0))
    if args.values:
        values = _floats(args.values)
        cfg["sweep_values"] = values
    if not values:
        raise UsageError("no sweep values")
    entries = load_split(args.manifest)
    if args.atlas:
        atlas = Atlas.load(args.atlas)
    else:
        atlas = build_atlas([l for e, _, l in entries if e.split == "train"] or [l for _, _, l in entries])
    cases = []
    for e, _, ref in entries:
        if args.split and e.split != args.split:
            continue
        det = ref
        if args.pred:
            det = load_landmarks(os.path.join(args.pred, f"{_stem(e.volume)}.lmk"))
        cases.append((det, ref))
    if not cases:
        raise RuntimeError("no scans to sweep over")
    rows, best = sweep_d_atlas(cases, atlas, values, cfg.get("min_inliers", 4))
    echo_config(cfg, args.out)
    with open(os.path.join(args.out, "sweep.txt"), "w", encoding="utf-8") as fh:
        fh.write("d_atlas mean_mapping_error_mm\n")
        for v, err in rows:
            fh.write(f"{v:g} {err!r}\n")
        fh.write(f"best={best:g}\n")
    for v, err in rows:
        log.info("d_atlas %g: mean mapping error %.4f mm", v, err)
    log.info("best d_atlas %g", best)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--jobs", type=int, help="parallel scans (default: all cores)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="atlasctx", description="Landmark detection with atlas location autocontext.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate a phantom dataset")
    s.add_argument("--n", type=int, help="number of scans")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", parents=[common], help="train a pipeline bundle")
    s.add_argument("--manifest", required=True)
    s.add_argument("--stage", choices=("full", "pass0", "pass1"), default="full")
    s.add_argument("--bundle", help="existing bundle (for --stage pass1)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="detect landmarks")
    s.add_argument("--bundle", required=True)
    s.add_argument("--volume")
    s.add_argument("--manifest")
    s.add_argument("--split")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("evaluate", parents=[common], help="compare predictions with references")
    s.add_argument("--pred", required=True, help="directory of predicted landmark files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.add_argument("--label", default="FCN + Atlas Correction")
    s.add_argument("--mip", action="append", choices=("x", "y", "z"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", parents=[common], help="sweep d_atlas by mean mapping error")
    s.add_argument("--manifest", required=True)
    s.add_argument("--atlas", help="atlas landmark file (default: built from the train split)")
    s.add_argument("--pred", help="directory of detections (default: the references)")
    s.add_argument("--split")
    s.add_argument("--values", help="comma separated d_atlas values in mm")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = effective_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"atlasctx: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"atlasctx: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
