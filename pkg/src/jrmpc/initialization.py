"""Initialization strategies for transforms, means, variances and K.

EM needs a starting point: identity rotations with centroid- (or
median-) matching translations, means spread over a sphere around the
data or sampled from it, variances from a median-distance rule or a
fixed value, and a component count chosen as a fraction of the mean set
cardinality or given outright.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import MixtureModel, PointSet, RigidTransform, squared_distances
from .errors import ConfigError, DimensionMismatchError, DomainError

log = logging.getLogger(__name__)

MEAN_STRATEGIES = ("sphere", "sample-one-set", "sample-aligned")
TRANSLATION_STRATEGIES = ("centroid", "median", "provided")
SIGMA_STRATEGIES = ("median-distance", "fixed")


@dataclass(frozen=True)
class InitConfig:
    mean_strategy: str = "sphere"
    translation_strategy: str = "centroid"
    k_fraction: float | None = 0.6
    k_absolute: int | None = None
    sphere_radius_scale: float = 0.6
    sigma_strategy: str = "median-distance"
    sigma_fixed: float | None = None

    def __post_init__(self):
        if self.mean_strategy not in MEAN_STRATEGIES:
            raise ConfigError(f"unknown mean_strategy {self.mean_strategy!r}")
        if self.translation_strategy not in TRANSLATION_STRATEGIES:
            raise ConfigError(f"unknown translation_strategy {self.translation_strategy!r}")
        if self.sigma_strategy not in SIGMA_STRATEGIES:
            raise ConfigError(f"unknown sigma_strategy {self.sigma_strategy!r}")
        if self.k_absolute is not None:
            if self.k_absolute < 1:
                raise ConfigError("k_absolute must be >= 1")
        elif self.k_fraction is None:
            raise ConfigError("either k_fraction or k_absolute must be set")
        if self.k_fraction is not None and not 0.0 < self.k_fraction <= 4.0:
            raise ConfigError("k_fraction must lie in (0, 4]")
        if self.sigma_strategy == "fixed" and (self.sigma_fixed is None or self.sigma_fixed <= 0):
            raise ConfigError("sigma_strategy 'fixed' needs a positive sigma_fixed")
        if self.sphere_radius_scale <= 0:
            raise ConfigError("sphere_radius_scale must be > 0")


def init_transforms(
    sets: list[PointSet],
    config: InitConfig,
    provided: list[RigidTransform] | None = None,
) -> list[RigidTransform]:
    """Identity rotations; translations bring the sets onto a common center.

    The common target is the origin: each translation is minus the set's
    centroid (or per-coordinate median, which shrugs off heavy artifact
    points).  With the 'provided' strategy the caller's transforms pass
    through unchanged.
    """
    if not sets:
        raise DimensionMismatchError("need at least one point set")
    if config.translation_strategy == "provided":
        if provided is None or len(provided) != len(sets):
            raise DimensionMismatchError("'provided' strategy needs one transform per set")
        return list(provided)
    eye = np.eye(3)
    out = []
    for ps in sets:
        if config.translation_strategy == "median":
            anchor = np.median(ps.points, axis=0)
        else:
            anchor = ps.centroid()
        out.append(RigidTransform(eye, -anchor))
    return out


def _union_bounding_diameter(sets: list[PointSet], transforms: list[RigidTransform]) -> float:
    lo = np.min([tf.apply(ps.points).min(axis=0) for ps, tf in zip(sets, transforms)], axis=0)
    hi = np.max([tf.apply(ps.points).max(axis=0) for ps, tf in zip(sets, transforms)], axis=0)
    return float(np.linalg.norm(hi - lo))


def fibonacci_sphere(count: int, radius: float = 1.0) -> np.ndarray:
    """Near-uniform deterministic placement of `count` points on a sphere."""
    i = np.arange(count, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def init_means_sphere(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    count: int,
    config: InitConfig,
) -> np.ndarray:
    """Means on a sphere that encompasses the centered union of the sets.

    Placement is a Fibonacci lattice, so results are reproducible and
    the points are close to evenly spread.  The radius is
    sphere_radius_scale times the union's bounding-box diameter, which
    comfortably contains the hull at the default scale of 0.6.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    radius = config.sphere_radius_scale * _union_bounding_diameter(sets, transforms)
    if radius <= 0:
        raise DomainError("degenerate data: zero bounding diameter")
    return fibonacci_sphere(count, radius)


def init_means(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    count: int,
    config: InitConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Dispatch over the configured mean-placement strategy.

    'sample-one-set' draws the means from the largest set; the
    'sample-aligned' strategy draws them from the union of all
    transformed sets and therefore expects the caller to have supplied
    a rough pre-alignment.
    """
    if config.mean_strategy == "sphere":
        return init_means_sphere(sets, transforms, count, config)
    if config.mean_strategy == "sample-one-set":
        j = int(np.argmax([ps.cardinality for ps in sets]))
        pool = transforms[j].apply(sets[j].points)
    else:
        pool = np.concatenate([tf.apply(ps.points) for ps, tf in zip(sets, transforms)])
    idx = rng.choice(pool.shape[0], size=count, replace=count > pool.shape[0])
    return pool[idx].copy()


def init_variances(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    means: np.ndarray,
    config: InitConfig,
) -> np.ndarray:
    """Per-component starting variances.

    The median-distance rule sets sigma_k to the median squared distance
    between mean k and every transformed point, which starts broad and
    lets the posteriors see the whole scene.
    """
    if config.sigma_strategy == "fixed":
        return np.full(means.shape[0], float(config.sigma_fixed))
    x = np.concatenate([tf.apply(ps.points) for ps, tf in zip(sets, transforms)])
    d2 = squared_distances(x, means)
    return np.median(d2, axis=0)


def choose_component_count(sets: list[PointSet], config: InitConfig) -> int:
    """Resolve K from the configured policy.

    Fraction policy: round(f * mean cardinality).  Results below 3 are
    clamped with a warning because the rigid step needs at least three
    constraints.
    """
    if not sets:
        raise DimensionMismatchError("need at least one point set")
    if config.k_absolute is not None:
        k = config.k_absolute
    else:
        mean_cardinality = float(np.mean([ps.cardinality for ps in sets]))
        k = int(round(config.k_fraction * mean_cardinality))
    if k < 3:
        log.warning("component count %d too small for the rigid step; clamped to 3", k)
        k = 3
    return k


def init_mixture(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    count: int,
    config: InitConfig,
    *,
    gamma: float,
    h: float,
    epsilon: float,
    rng: np.random.Generator,
) -> MixtureModel:
    """Build the starting mixture: means, variances, uniform priors."""
    means = init_means(sets, transforms, count, config, rng)
    variances = init_variances(sets, transforms, means, config)
    variances = np.maximum(variances, epsilon**2)
    return MixtureModel.with_uniform_priors(means, variances, gamma, h, epsilon)
