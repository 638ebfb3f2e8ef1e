"""Core domain types shared by the batch and incremental EM solvers.

A scene is modeled as K isotropic Gaussian components plus one uniform
component that absorbs outliers.  Each observed point set is tied to the
mixture through a single rigid transform, so the types here carry all
the state that the E/M steps exchange.

All types are immutable after construction: arrays are converted to
float64 and marked read-only, and EM updates build fresh values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometryError,
    DimensionMismatchError,
    DomainError,
)

log = logging.getLogger(__name__)

# Masses below this are treated as zero when dividing by them.
ZERO_MASS = 1e-12


def _freeze(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# rotation helpers


def rotation_about_y(angle_rad: float) -> np.ndarray:
    """Rotation that moves points within the xz-plane (axis = y)."""
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_about_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (unit-quaternion method)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def geodesic_angle(rotation: np.ndarray) -> float:
    """Angle (radians) of a rotation matrix, in [0, pi]."""
    t = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(t, -1.0, 1.0)))


def squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (N, K)."""
    d2 = (
        np.einsum("ni,ni->n", points, points)[:, None]
        + np.einsum("ki,ki->k", centers, centers)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d2, 0.0, out=d2)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class PointSet:
    """One view's 3-D samples, expressed in its own set-centered frame."""

    id: int
    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        pts = _freeze(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionMismatchError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DomainError("a point set needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DomainError(f"point set {self.id} contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def cardinality(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation mapping a set frame into the model frame."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    ORTHONORMALITY_TOL = 1e-9

    def __post_init__(self):
        r = _freeze(self.rotation)
        t = _freeze(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DimensionMismatchError(f"bad transform shapes {r.shape}, {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise DomainError("transform contains non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) > self.ORTHONORMALITY_TOL:
            raise DomainError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > self.ORTHONORMALITY_TOL:
            raise DomainError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, translation_scale: float = 1.0) -> "RigidTransform":
        return cls(random_rotation(rng), rng.normal(scale=translation_scale, size=3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """R @ p + t for a single 3-vector or row-wise for an (N, 3) array."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class MixtureModel:
    """K isotropic Gaussians plus the uniform outlier component.

    `gamma` is the configured outlier/inlier mass ratio used by the
    uniform term of the E-step, `h` the volume that normalizes the
    uniform density, and `epsilon` the variance-floor scalar (variances
    are kept >= epsilon**2).
    """

    means: np.ndarray  # (K, 3)
    variances: np.ndarray  # (K,)
    priors: np.ndarray  # (K + 1,), last entry = uniform component
    gamma: float
    h: float
    epsilon: float

    def __post_init__(self):
        means = _freeze(self.means)
        variances = _freeze(self.variances)
        priors = _freeze(self.priors)
        if means.ndim != 2 or means.shape[1] != 3:
            raise DimensionMismatchError(f"means must be (K, 3), got {means.shape}")
        k = means.shape[0]
        if k < 1:
            raise DomainError("mixture needs at least one Gaussian component")
        if variances.shape != (k,):
            raise DimensionMismatchError("variances must have one entry per component")
        if priors.shape != (k + 1,):
            raise DimensionMismatchError("priors must have K + 1 entries")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances)) and np.all(np.isfinite(priors))):
            raise DomainError("mixture parameters contain non-finite entries")
        if self.gamma < 0:
            raise DomainError("gamma must be >= 0")
        if self.h <= 0:
            raise DomainError("uniform volume h must be > 0")
        if self.epsilon <= 0:
            raise DomainError("variance floor epsilon must be > 0")
        if np.any(priors < -1e-15):
            raise DomainError("priors must be nonnegative")
        if abs(priors.sum() - 1.0) > 1e-12:
            raise DomainError(f"priors must sum to 1 within 1e-12, got {priors.sum()!r}")
        if np.any(variances < self.epsilon**2 * (1.0 - 1e-12)):
            raise DomainError("every variance must be >= epsilon**2")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "priors", priors)

    @property
    def component_count(self) -> int:
        return self.means.shape[0]

    def uniform_density(self) -> float:
        """Density of the uniform outlier component, gamma/(h*(gamma+1))."""
        if self.gamma == 0.0:
            return 0.0
        return self.gamma / (self.h * (self.gamma + 1.0))

    def implied_outlier_ratio(self) -> float:
        """Ratio p_{K+1} / sum_k p_k encoded by the current priors."""
        inlier = self.priors[:-1].sum()
        if inlier <= 0:
            raise DomainError("no inlier prior mass")
        return float(self.priors[-1] / inlier)

    @classmethod
    def with_uniform_priors(
        cls,
        means: np.ndarray,
        variances: np.ndarray,
        gamma: float,
        h: float,
        epsilon: float,
    ) -> "MixtureModel":
        """All K + 1 priors equal to 1/(K+1) (the standard initialization)."""
        k = np.asarray(means).shape[0]
        return cls(means, variances, np.full(k + 1, 1.0 / (k + 1)), gamma, h, epsilon)

    @classmethod
    def with_gamma_consistent_priors(
        cls,
        means: np.ndarray,
        variances: np.ndarray,
        gamma: float,
        h: float,
        epsilon: float,
    ) -> "MixtureModel":
        """Equal inlier priors scaled so that p_{K+1}/sum(p_k) == gamma."""
        k = np.asarray(means).shape[0]
        inlier = 1.0 / ((gamma + 1.0) * k)
        priors = np.full(k + 1, inlier)
        priors[-1] = gamma / (gamma + 1.0)
        return cls(means, variances, priors, gamma, h, epsilon)


@dataclass(frozen=True)
class ResponsibilityMatrix:
    """Posterior assignment of one set's points over the K + 1 components."""

    set_id: int
    alpha: np.ndarray  # (N, K + 1), rows sum to 1

    ROW_SUM_TOL = 1e-12

    def __post_init__(self):
        a = _freeze(self.alpha)
        if a.ndim != 2 or a.shape[1] < 2:
            raise DimensionMismatchError(f"alpha must be (N, K+1), got {a.shape}")
        if np.any(a < -1e-15):
            raise DomainError("responsibilities must be nonnegative")
        rows = a.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > self.ROW_SUM_TOL * max(1, a.shape[1]):
            raise DomainError("responsibility rows must sum to 1")
        object.__setattr__(self, "alpha", a)

    @property
    def component_count(self) -> int:
        return self.alpha.shape[1] - 1

    def inlier(self) -> np.ndarray:
        """(N, K) view of the Gaussian-component responsibilities."""
        return self.alpha[:, :-1]

    def outlier(self) -> np.ndarray:
        """(N,) view of the uniform-component responsibilities."""
        return self.alpha[:, -1]


@dataclass(frozen=True)
class ComponentStats:
    """Sufficient statistics of the mixture over everything seen so far.

    Carries, per component, the responsibility mass and the first/second
    moments of the transformed points, plus the uniform-component mass
    and the prior-normalizer accumulator `eta`.  These are exactly the
    quantities the incremental solver recombines when a new set arrives.
    """

    mass: np.ndarray  # (K,)
    first_moment: np.ndarray  # (K, 3): sum alpha * x
    second_moment: np.ndarray  # (K,): sum alpha * |x|^2
    outlier_mass: float
    n_points: float
    eta: float

    def __post_init__(self):
        mass = _freeze(self.mass)
        s1 = _freeze(self.first_moment)
        s2 = _freeze(self.second_moment)
        k = mass.shape[0]
        if s1.shape != (k, 3) or s2.shape != (k,):
            raise DimensionMismatchError("inconsistent component statistic shapes")
        if np.any(mass < -1e-12):
            raise DomainError("component masses must be nonnegative")
        live = mass > ZERO_MASS
        slack = np.einsum("ki,ki->k", s1[live], s1[live]) / mass[live]
        if np.any(s2[live] < slack - 1e-9 * np.maximum(1.0, slack)):
            raise DomainError("second moments violate the Cauchy-Schwarz bound")
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "first_moment", s1)
        object.__setattr__(self, "second_moment", s2)

    @property
    def component_count(self) -> int:
        return self.mass.shape[0]

    def means(self, fallback: np.ndarray) -> np.ndarray:
        """Mass-weighted means; components without mass keep `fallback`."""
        live = self.mass > ZERO_MASS
        out = np.array(fallback, dtype=np.float64)
        out[live] = self.first_moment[live] / self.mass[live, None]
        return out

    def variances(self, means: np.ndarray, epsilon: float) -> np.ndarray:
        """Isotropic variances from moment recombination, floored at eps^2."""
        live = self.mass > ZERO_MASS
        out = np.full(self.component_count, epsilon**2)
        centered = (
            self.second_moment[live]
            - 2.0 * np.einsum("ki,ki->k", means[live], self.first_moment[live])
            + self.mass[live] * np.einsum("ki,ki->k", means[live], means[live])
        )
        out[live] = np.maximum(centered, 0.0) / (3.0 * self.mass[live]) + epsilon**2
        return out


@dataclass(frozen=True)
class RigidStepStatistics:
    """Per-set inputs of the rigid M-step.

    `virtual_points` holds the responsibility-weighted averages of the
    set (one per component, in set coordinates), `weights` the diagonal
    entries sqrt(mass_k / sigma_k), and `means` the current component
    means.  Components that received no mass are marked inactive and
    excluded from the fit.
    """

    virtual_points: np.ndarray  # (K, 3)
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, 3)
    active: np.ndarray  # (K,) bool

    def __post_init__(self):
        w = _freeze(self.virtual_points)
        lam = _freeze(self.weights)
        mu = _freeze(self.means)
        act = np.array(self.active, dtype=bool)
        act.setflags(write=False)
        k = w.shape[0]
        if mu.shape != (k, 3) or lam.shape != (k,) or act.shape != (k,):
            raise DimensionMismatchError("inconsistent rigid-step statistic shapes")
        object.__setattr__(self, "virtual_points", w)
        object.__setattr__(self, "weights", lam)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "active", act)

    def projection_matrix(self) -> np.ndarray:
        """Projection I - (le)(le)^T / |le|^2 over the active components.

        This is the matrix that removes the weighted-centroid direction;
        the rigid solver uses the algebraically equal centered form.
        """
        lam = self.weights[self.active]
        denom = float(lam @ lam)
        if denom <= 0:
            raise DomainError("projection undefined without active weight")
        return np.eye(lam.shape[0]) - np.outer(lam, lam) / denom

    def cross_matrix(self) -> np.ndarray:
        """3x3 matrix M L P L W^T whose SVD yields the optimal rotation."""
        lam = self.weights[self.active]
        mu = self.means[self.active]
        w = self.virtual_points[self.active]
        p = self.projection_matrix()
        return (mu.T * lam) @ p @ (w.T * lam).T


# ---------------------------------------------------------------------------
# operations


def weighted_procrustes(
    source: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray,
) -> RigidTransform:
    """Best proper rotation + translation mapping source onto target.

    Minimizes sum_k weights_k * |R s_k + t - y_k|^2 in closed form via
    the SVD of the weighted cross-covariance, with the determinant sign
    guard that forbids reflections.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    wts = np.asarray(weights, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DimensionMismatchError("source/target must both be (n, 3)")
    if wts.shape != (src.shape[0],):
        raise DimensionMismatchError("one weight per correspondence required")
    if src.shape[0] < 3:
        raise DegenerateGeometryError("need at least three correspondences")
    if np.any(wts < 0):
        raise DomainError("weights must be nonnegative")
    total = wts.sum()
    if total <= 0:
        raise DomainError("total weight must be positive")

    src_bar = wts @ src / total
    dst_bar = wts @ dst / total
    cross = ((dst - dst_bar) * wts[:, None]).T @ (src - src_bar)
    u, s, vt = np.linalg.svd(cross)
    if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError("correspondences are (near-)collinear")
    sign = math.copysign(1.0, np.linalg.det(u) * np.linalg.det(vt))
    rotation = (u * np.array([1.0, 1.0, sign])) @ vt
    translation = dst_bar - rotation @ src_bar
    return RigidTransform(rotation, translation)


def normalize_point_sets(sets: list[PointSet]) -> tuple[list[PointSet], float]:
    """Scale all sets by the bounding-box diameter of their union.

    Returns the scaled sets and the scale factor; multiplying scaled
    coordinates by the factor recovers the originals.  The bounding-box
    diameter approximates the largest point-to-point distance within a
    factor of sqrt(3).
    """
    if not sets:
        raise DimensionMismatchError("need at least one point set")
    lo = np.min([ps.points.min(axis=0) for ps in sets], axis=0)
    hi = np.max([ps.points.max(axis=0) for ps in sets], axis=0)
    scale = float(np.linalg.norm(hi - lo))
    if scale <= 0:
        raise DomainError("all points coincide; nothing to normalize")
    scaled = [PointSet(ps.id, ps.points / scale) for ps in sets]
    return scaled, scale


def evaluate_objective(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    model: MixtureModel,
    responsibilities: list[ResponsibilityMatrix],
) -> float:
    """Expected complete-data log-likelihood (constant terms dropped).

    f = -1/2 sum_{j,i,k} a_jik (|R_j v_ji + t_j - mu_k|^2 / s_k
        + 3 log s_k - 2 log p_k) + log p_{K+1} * sum_{j,i} a_ji,K+1
    """
    if not (len(sets) == len(transforms) == len(responsibilities)):
        raise DimensionMismatchError("sets, transforms and responsibilities must align")
    k = model.component_count
    if np.any(model.variances <= 0):
        raise DomainError("variances must be positive")
    with np.errstate(divide="ignore"):
        log_p = np.log(model.priors[:k])
    log_s = np.log(model.variances)
    total = 0.0
    for ps, tf, resp in zip(sets, transforms, responsibilities):
        if resp.component_count != k:
            raise DimensionMismatchError("responsibility width does not match mixture")
        if resp.alpha.shape[0] != ps.cardinality:
            raise DimensionMismatchError("responsibility rows do not match point count")
        x = tf.apply(ps.points)
        d2 = squared_distances(x, model.means)
        a = resp.inlier()
        per = d2 / model.variances + (3.0 * log_s - 2.0 * log_p)
        total += -0.5 * float(np.sum(np.where(a > 0, a * per, 0.0)))
        out_mass = float(resp.outlier().sum())
        if out_mass > 0:
            p_out = model.priors[-1]
            total += out_mass * (math.log(p_out) if p_out > 0 else -math.inf)
    return total
