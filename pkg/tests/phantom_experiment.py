"""Phantom-scale end-to-end experiment: train the two-pass pipeline on
synthetic heads and compare pass 0, pass 1 and the occlusion variant.

Run directly to print the report:  python tests/phantom_experiment.py
"""
from __future__ import annotations

import hashlib
import io
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from atlasctx.cascade import PipelineConfig, detect_stages, train_pipeline
from atlasctx.evalkit import aggregate_metrics, format_report, localisation_errors, per_landmark_breakdown
from atlasctx.heatmap import HeatmapSpec
from atlasctx.nnet import TrainSchedule, save_weights
from atlasctx.phantom import DEFAULT_SWAP_PAIRS, PhantomSpec, generate_scans
from atlasctx.volume import ABSENT, VISIBLE, LandmarkSet, crop_faces

log = logging.getLogger("experiment")

SPLIT = (100, 15, 20)
OCCLUDED = ("skull_apex", "skull_left")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 2024
    split: tuple = SPLIT
    base_filters: int = 4
    epochs0: int = 12
    epochs1: int = 10
    # pass-1 Gaussian height; at this epoch budget Adam cannot grow the
    # outputs to the 1e6 scale, so pass 1 uses the pass-0 height
    k1: float = 1e3
    occluded: tuple = OCCLUDED


def occlusion_steps(vol, lm: LandmarkSet, name: str) -> np.ndarray:
    """Face crop removing ``name``: along the axis and side where it is most
    isolated, cut halfway to the next visible landmark."""
    target = np.asarray(lm[name].position)
    others = np.array([e.position for e in lm if e.status == VISIBLE and e.name != name])
    best = None
    for axis in range(3):
        for side in (0, 1):
            sign = 1.0 if side == 1 else -1.0
            gap = sign * (target[axis] - others[:, axis])
            if np.all(gap > 0) and (best is None or gap.min() > best[0]):
                best = (gap.min(), axis, side)
    if best is None:
        raise ValueError(f"{name} is not extreme along any axis")
    gap, axis, side = best
    cut = target[axis] - (1.0 if side else -1.0) * gap / 2.0
    v = vol.world_to_voxel(np.where(np.arange(3) == axis, cut, target))[axis]
    steps = np.zeros((3, 2), dtype=int)
    if side == 1:
        steps[axis, 1] = vol.dims[axis] - 1 - int(np.floor(v))
    else:
        steps[axis, 0] = int(np.ceil(v))
    return steps


def occlude(vol, lm: LandmarkSet, names) -> tuple:
    for n in names:
        vol, lm = crop_faces(vol, lm, occlusion_steps(vol, lm, n), air=-1000.0)
    return vol, lm


def pipeline_digest(pipe) -> str:
    h = hashlib.sha256()
    for m in (pipe.model0, pipe.model1):
        buf = io.BytesIO()
        save_weights(m, buf)
        h.update(buf.getvalue())
    h.update(np.ascontiguousarray(pipe.atlas.positions).tobytes())
    h.update("\n".join(pipe.atlas.names).encode())
    return h.hexdigest()


def run_experiment(cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    t_start = time.perf_counter()
    spec = PhantomSpec()
    n_train, n_val, n_test = cfg.split
    scans = generate_scans(spec, sum(cfg.split), cfg.seed)
    data = [(v, l) for v, l, _ in scans]
    train, val, test = data[:n_train], data[n_train : n_train + n_val], data[n_train + n_val :]
    log.info("generated %d phantoms in %.0fs", len(data), time.perf_counter() - t_start)

    pcfg = PipelineConfig(
        base_filters=cfg.base_filters,
        schedule0=TrainSchedule(epochs=cfg.epochs0),
        schedule1=TrainSchedule(epochs=cfg.epochs1),
        heatmap1=HeatmapSpec(1.0, cfg.k1),
        swap_pairs=DEFAULT_SWAP_PAIRS,
    )
    t0 = time.perf_counter()
    pipe = train_pipeline(train, val, pcfg, np.random.default_rng(cfg.seed))
    t_train = time.perf_counter() - t0
    log.info("trained in %.0fs", t_train)

    rows = {k: [] for k in ("Pass 0", "Pass 0 + Atlas Correction", "Pass 1", "Pass 1 + Atlas Correction")}
    base_rest, occ_rest, occ_flags = [], [], []
    for i, (vol, ref) in enumerate(test):
        st = detect_stages(vol, pipe)
        rows["Pass 0"].append(localisation_errors(st["pass0"].raw, ref))
        rows["Pass 0 + Atlas Correction"].append(localisation_errors(st["pass0"].detections, ref))
        rows["Pass 1"].append(localisation_errors(st["pass1"].raw, ref))
        final = localisation_errors(st["final"], ref)
        rows["Pass 1 + Atlas Correction"].append(final)

        ovol, oref = occlude(vol, ref, cfg.occluded)
        ost = detect_stages(ovol, pipe)
        oerr = localisation_errors(ost["final"], oref)
        keep = [n for n in oerr if n not in cfg.occluded]
        base_rest.append({n: final[n] for n in keep if n in final})
        occ_rest.append({n: oerr[n] for n in keep})
        occ_flags.append(all(ost["final"][n].status == ABSENT for n in cfg.occluded))
        log.info("test %d: final mean %.2f mm, occluded mean %.2f mm", i, np.mean(list(final.values())), np.mean(list(oerr.values())))

    metrics = {k: aggregate_metrics(v) for k, v in rows.items()}
    metrics["Occluded: others, clean"] = aggregate_metrics(base_rest)
    metrics["Occluded: others, cropped"] = aggregate_metrics(occ_rest)
    report = format_report(metrics, per_landmark_breakdown(rows["Pass 1 + Atlas Correction"], names=pipe.names))
    report += f"occluded_reported_absent={sum(occ_flags)}/{len(occ_flags)}\n"
    report += f"pass0_fit_failures={pipe.history.get('pass0_fit_failures')}\n"
    return {
        "pipeline": pipe,
        "digest": pipeline_digest(pipe),
        "metrics": metrics,
        "report": report,
        "occluded_absent": occ_flags,
        "seconds": time.perf_counter() - t_start,
        "train_seconds": t_train,
    }


if __name__ == "__main__":
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    kw = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kw[k] = float(v) if k == "k1" else int(v)
    out = run_experiment(ExperimentConfig(**kw))
    print(out["report"])
    print("digest", out["digest"])
    print(f"seconds {out['seconds']:.0f} (training {out['train_seconds']:.0f})")
