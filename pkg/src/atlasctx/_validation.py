"""Input checks shared by the estimator wrappers and the command line."""
from __future__ import annotations

import numpy as np

from .volume import LandmarkSet, Volume3D


def check_volume(vol, name: str = "volume") -> Volume3D:
    if not isinstance(vol, Volume3D):
        raise TypeError(f"{name} must be a Volume3D, got {type(vol).__name__}")
    if min(vol.dims) < 1:
        raise ValueError(f"{name} has an empty axis: {vol.dims}")
    if not np.all(np.isfinite(vol.data)):
        raise ValueError(f"{name} contains non-finite values")
    return vol


def check_landmark_set(lm, name: str = "landmarks") -> LandmarkSet:
    if not isinstance(lm, LandmarkSet):
        raise TypeError(f"{name} must be a LandmarkSet, got {type(lm).__name__}")
    for e in lm:
        if not np.all(np.isfinite(e.position)):
            raise ValueError(f"{name}: {e.name} has a non-finite position")
    return lm


def check_consistent_length(*seqs) -> int:
    lengths = {len(s) for s in seqs if s is not None}
    if len(lengths) > 1:
        raise ValueError(f"inputs have inconsistent lengths: {sorted(lengths)}")
    return lengths.pop() if lengths else 0


def check_scans(X, y, name: str = "X"):
    if X is None or len(X) == 0:
        raise ValueError(f"{name} must contain at least one volume")
    check_consistent_length(X, y)
    return [check_volume(v, f"{name}[{i}]") for i, v in enumerate(X)], [
        check_landmark_set(l, f"y[{i}]") for i, l in enumerate(y)
    ]
