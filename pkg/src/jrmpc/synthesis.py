"""Synthetic multi-view generation with known ground truth.

Each view downsamples the model independently, rotates it within the
xz-plane (about the y axis), keeps the z >= 0 half, perturbs the points
with SNR-calibrated Gaussian noise and plants clustered outliers.  All
randomness flows from one seeded generator, so a given configuration is
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import PointSet, RigidTransform, rotation_about_y
from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class SynthConfig:
    angles_deg: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0)
    cardinality_range: tuple[int, int] = (1000, 2000)
    snr_db: float | None = 10.0  # None disables noise
    outlier_fraction: float = 0.0
    outlier_clusters: int = 5
    outlier_radius_scale: float = 0.10  # of the view's bounding-box diameter
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cardinality_range
        if lo < 1 or hi < lo:
            raise ConfigError("cardinality_range must satisfy 1 <= lo <= hi")
        if not self.angles_deg:
            raise ConfigError("at least one view angle required")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError("outlier_fraction must lie in [0, 1)")
        if self.outlier_clusters < 1:
            raise ConfigError("outlier_clusters must be >= 1")


@dataclass(frozen=True)
class GroundTruth:
    """Per-view transforms into the model frame and per-point labels."""

    transforms: list[RigidTransform]
    inlier_labels: list[np.ndarray]  # True = original surface point
    angles_deg: tuple[float, ...]
    noise_sigma: float


def sample_surface_model(count: int = 6000, seed: int = 7) -> np.ndarray:
    """Deterministic asymmetric blob used as a stand-in scan target.

    A unit sphere radially modulated by a few incommensurate lobes plus
    a bump; no rotational symmetry, so view poses are identifiable.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x, y, z = u.T
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    r = (
        1.0
        + 0.30 * np.sin(3.0 * theta) * np.sin(2.0 * phi)
        + 0.20 * np.cos(2.3 * theta + 0.7) * np.cos(phi + 1.1)
        + 0.35 * np.exp(-4.0 * ((theta - 1.0) ** 2 + (phi - 0.8) ** 2))
    )
    pts = u * r[:, None]
    return pts - pts.mean(axis=0)


def synthesize_views(
    model_points: np.ndarray,
    config: SynthConfig,
) -> tuple[list[PointSet], GroundTruth]:
    """Generate one point set per configured angle, with ground truth.

    The returned transforms map each view's coordinates back into the
    model frame, i.e. the inverse of the view rotation; they are the
    poses a registration should recover (up to a common gauge).
    """
    pts = np.asarray(model_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise DomainError("model_points must be a nonempty (N, 3) array")
    pts = pts - pts.mean(axis=0)

    rng = np.random.default_rng(config.seed)
    lo, hi = config.cardinality_range
    views: list[PointSet] = []
    transforms: list[RigidTransform] = []
    labels: list[np.ndarray] = []
    noise_sigma = 0.0
    for j, angle in enumerate(config.angles_deg):
        target = int(rng.integers(lo, hi + 1))
        take = rng.choice(pts.shape[0], size=min(target, pts.shape[0]), replace=False)
        rot = rotation_about_y(math.radians(angle))
        view = pts[take] @ rot.T
        view = view[view[:, 2] >= 0.0]
        if view.shape[0] == 0:
            raise DomainError(f"view at {angle} degrees is empty after z >= 0 rejection")

        if config.snr_db is not None and math.isfinite(config.snr_db):
            centered = view - view.mean(axis=0)
            signal_power = float(np.mean(np.einsum("ni,ni->n", centered, centered))) / 3.0
            noise_sigma = math.sqrt(signal_power * 10.0 ** (-config.snr_db / 10.0))
            view = view + rng.normal(scale=noise_sigma, size=view.shape)

        n_inliers = view.shape[0]
        n_out = int(round(config.outlier_fraction * n_inliers))
        if n_out > 0:
            span = view.max(axis=0) - view.min(axis=0)
            radius = config.outlier_radius_scale * float(np.linalg.norm(span))
            anchors = view[rng.choice(n_inliers, size=config.outlier_clusters, replace=False)]
            which = rng.integers(0, config.outlier_clusters, size=n_out)
            direction = rng.normal(size=(n_out, 3))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            magnitude = radius * rng.random(n_out) ** (1.0 / 3.0)
            outliers = anchors[which] + direction * magnitude[:, None]
            view = np.concatenate([view, outliers])

        views.append(PointSet(j, view))
        transforms.append(RigidTransform(rot.T, np.zeros(3)))
        label = np.zeros(view.shape[0], dtype=bool)
        label[:n_inliers] = True
        labels.append(label)

    truth = GroundTruth(
        transforms=transforms,
        inlier_labels=labels,
        angles_deg=tuple(config.angles_deg),
        noise_sigma=noise_sigma,
    )
    return views, truth
