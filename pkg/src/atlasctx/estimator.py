"""Estimator-style facade over the two-pass pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_scans, check_volume
from .atlas import AtlasConfig
from .cascade import PipelineConfig, detect, train_pipeline
from .evalkit import aggregate_metrics, localisation_errors
from .heatmap import HeatmapSpec
from .nnet import TrainSchedule


class LandmarkDetector(BaseEstimator):
    """Landmark detector with atlas location autocontext.

    ``fit(X, y, X_val, y_val)`` takes lists of raw-HU volumes and their
    landmark sets. ``predict`` returns one landmark set per volume and
    ``score`` the negative mean localisation error in mm.
    """

    def __init__(
        self,
        base_filters=12,
        pass0_spacing=4.0,
        pass1_spacing=2.0,
        epochs0=50,
        epochs1=200,
        batch_size=32,
        learning_rate=1e-3,
        k0=1e3,
        k1=1e6,
        d_atlas=10.0,
        d_volume=28.0,
        crop_mm=50.0,
        reflect=True,
        swap_pairs=(),
        single_pass=False,
        random_state=0,
    ):
        self.base_filters = base_filters
        self.pass0_spacing = pass0_spacing
        self.pass1_spacing = pass1_spacing
        self.epochs0 = epochs0
        self.epochs1 = epochs1
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.k0 = k0
        self.k1 = k1
        self.d_atlas = d_atlas
        self.d_volume = d_volume
        self.crop_mm = crop_mm
        self.reflect = reflect
        self.swap_pairs = swap_pairs
        self.single_pass = single_pass
        self.random_state = random_state

    def _config(self) -> PipelineConfig:
        sched = dict(batch_size=self.batch_size, learning_rate=self.learning_rate)
        kw = dict(
            atlas=AtlasConfig(self.d_atlas, self.d_volume),
            schedule0=TrainSchedule(epochs=self.epochs0, **sched),
            schedule1=TrainSchedule(epochs=self.epochs1, **sched),
            base_filters=self.base_filters,
            crop_mm=self.crop_mm,
            reflect=self.reflect,
            swap_pairs=tuple(self.swap_pairs),
        )
        if self.single_pass:
            return PipelineConfig.single_pass_preset(self.pass1_spacing, heatmap0=HeatmapSpec(1.0, self.k1), **kw)
        return PipelineConfig(
            pass0_spacing=self.pass0_spacing,
            pass1_spacing=self.pass1_spacing,
            heatmap0=HeatmapSpec(1.0, self.k0),
            heatmap1=HeatmapSpec(1.0, self.k1),
            **kw,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_scans(X, y)
        if X_val is None:
            raise ValueError("validation volumes are required for snapshot selection")
        X_val, y_val = check_scans(X_val, y_val, "X_val")
        rng = np.random.default_rng(self.random_state)
        self.pipeline_ = train_pipeline(list(zip(X, y)), list(zip(X_val, y_val)), self._config(), rng)
        self.landmark_names_ = self.pipeline_.names
        return self

    def predict(self, X):
        check_is_fitted(self, "pipeline_")
        return [detect(check_volume(v), self.pipeline_) for v in X]

    def score(self, X, y):
        pred = self.predict(X)
        m = aggregate_metrics([localisation_errors(p, r) for p, r in zip(pred, y)])
        return -m.mean
