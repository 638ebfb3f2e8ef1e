"""Variance-threshold splitting of components into inliers and outliers.

Components that latched onto clustered outliers inflate their variance
well past the bulk of the mixture, so thresholding at twice the median
variance separates them cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MixtureModel, PointSet
from .errors import EmptyModelError

OUTLIER_VARIANCE_FACTOR = 2.0


@dataclass(frozen=True)
class ComponentClassification:
    is_outlier: np.ndarray  # (K,) bool
    threshold: float

    @property
    def inlier_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_outlier)

    @property
    def outlier_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_outlier)


def classify_components(model: MixtureModel) -> ComponentClassification:
    """Label component k as outlier iff sigma_k > 2 * median(sigma)."""
    threshold = OUTLIER_VARIANCE_FACTOR * float(np.median(model.variances))
    return ComponentClassification(model.variances > threshold, threshold)


def export_scene_model(
    model: MixtureModel,
    classification: ComponentClassification,
    set_id: int = 0,
) -> PointSet:
    """Inlier-component means as the reconstructed, outlier-free scene."""
    keep = ~classification.is_outlier
    if not np.any(keep):
        raise EmptyModelError("every component was classified as an outlier cluster")
    return PointSet(set_id, model.means[keep])
