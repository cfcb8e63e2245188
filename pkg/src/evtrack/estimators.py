"""Common estimator interface: frames + previous box -> 5-DoF transform.

Estimators are callables `(frames, box) -> Transform5Dof`.  Failures that
the tracking protocol should score as a lost pair (rather than crash on)
raise :class:`EstimatorError`.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from evtrack.geometry import (
    DEFAULT_TAU,
    AlignedBox,
    MotionBounds,
    Transform5Dof,
    crop_region,
    denormalize,
    sample_patch,
)
from evtrack.tsltd import TsltdFrame


class EstimatorError(RuntimeError):
    """Estimation failed for this instance; the pair counts as lost."""


class InsufficientEvidenceError(EstimatorError):
    """The template region contains no active pixels to match."""


class Estimator(Protocol):
    def __call__(
        self, frames: Sequence[TsltdFrame], box: AlignedBox
    ) -> Transform5Dof: ...


class NetEstimator:
    """Wraps a trained regression model as a tracking estimator."""

    def __init__(self, model, bounds: MotionBounds | None = None,
                 tau: float = DEFAULT_TAU) -> None:
        self.model = model
        self.bounds = bounds or MotionBounds()
        self.tau = tau

    def __call__(
        self, frames: Sequence[TsltdFrame], box: AlignedBox
    ) -> Transform5Dof:
        region = crop_region(box, self.tau)
        patches = np.stack([sample_patch(f, region) for f in frames])
        raw = self.model.predict(patches)
        return denormalize(raw, self.bounds)
