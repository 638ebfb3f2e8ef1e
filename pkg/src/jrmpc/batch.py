"""Batch EM: alternating soft assignment, rigid fits, and mixture updates.

One iteration runs the E-step over every set, refits each set's rigid
transform against the current means (a weighted Procrustes problem over
the per-component virtual points), then refreshes means, variances and
optionally priors.  The loop stops after a fixed number of iterations
or when the parameter change falls below a tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ZERO_MASS,
    ComponentStats,
    MixtureModel,
    PointSet,
    ResponsibilityMatrix,
    RigidStepStatistics,
    RigidTransform,
    evaluate_objective,
    geodesic_angle,
    squared_distances,
    weighted_procrustes,
)
from .errors import (
    DimensionMismatchError,
    DivergenceError,
    DomainError,
    InsufficientConstraintsError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchConfig:
    """Settings of the batch solver.

    `gamma` may be left as None to take the ratio stored on the mixture;
    if set, it must agree with the mixture it is used with.
    """

    components: int
    iterations: int = 100
    gamma: float | None = None
    update_priors: bool = False
    fix_variance_iters: int = 10
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if self.components < 1:
            raise DomainError("components must be >= 1")
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if self.gamma is not None and self.gamma < 0:
            raise DomainError("gamma must be >= 0")
        if self.fix_variance_iters < 0:
            raise DomainError("fix_variance_iters must be >= 0")
        if self.convergence_tol <= 0:
            raise DomainError("convergence_tol must be > 0")


@dataclass(frozen=True)
class BatchResult:
    transforms: list[RigidTransform]
    model: MixtureModel
    responsibilities: list[ResponsibilityMatrix]
    objective_trace: np.ndarray
    iterations: int
    converged: bool


def set_posteriors(points: np.ndarray, transform: RigidTransform, model: MixtureModel) -> np.ndarray:
    """Posterior matrix (N, K+1) of one set under the current parameters.

    Computed in log space: rows are normalized by their running maximum
    before exponentiation, so small variances cannot underflow every
    Gaussian term at once.
    """
    if np.any(model.variances <= 0):
        raise DomainError("variances must be positive")
    x = transform.apply(points)
    d2 = squared_distances(x, model.means)
    k = model.component_count
    with np.errstate(divide="ignore"):
        log_w = np.log(model.priors[:k]) - 1.5 * np.log(model.variances)
    log_b = log_w[None, :] - d2 / (2.0 * model.variances[None, :])

    row_max = log_b.max(axis=1)
    bad = ~np.isfinite(row_max)
    uniform = model.uniform_density()
    if np.any(bad) and uniform == 0.0:
        # No Gaussian explains these rows and there is no uniform term
        # to absorb them; fall back to an uninformative assignment.
        log.warning("E-step underflow on %d rows; assigning uniform responsibilities", int(bad.sum()))
        log_b[bad] = 0.0
        row_max[bad] = 0.0

    z = np.exp(log_b - row_max[:, None]).sum(axis=1)
    log_uniform = np.log(uniform) if uniform > 0 else -np.inf
    log_denom = np.logaddexp(row_max + np.log(z), log_uniform)
    alpha = np.empty((points.shape[0], k + 1))
    alpha[:, :k] = np.exp(log_b - log_denom[:, None])
    alpha[:, k] = np.exp(log_uniform - log_denom)
    return alpha


def e_step(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    model: MixtureModel,
) -> list[ResponsibilityMatrix]:
    """Soft-assign every point of every set over the K+1 components."""
    if len(sets) != len(transforms):
        raise DimensionMismatchError("one transform per set required")
    return [
        ResponsibilityMatrix(ps.id, set_posteriors(ps.points, tf, model))
        for ps, tf in zip(sets, transforms)
    ]


def virtual_points(point_set: PointSet, resp: ResponsibilityMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Responsibility-weighted averages of the set, one per component.

    Returns (W, masses) with W of shape (K, 3) in set coordinates.
    Rows whose mass is zero are left at the origin; callers must treat
    them as undefined (the rigid step drops them via the mass).
    """
    if resp.alpha.shape[0] != point_set.cardinality:
        raise DimensionMismatchError("responsibilities do not match the point set")
    a = resp.inlier()
    masses = a.sum(axis=0)
    w = a.T @ point_set.points
    live = masses > ZERO_MASS
    w[live] /= masses[live, None]
    w[~live] = 0.0
    return w, masses


def rigid_step_statistics(
    point_set: PointSet,
    resp: ResponsibilityMatrix,
    model: MixtureModel,
) -> RigidStepStatistics:
    """Collect the per-set quantities the rigid M-step consumes."""
    w, masses = virtual_points(point_set, resp)
    weights = np.sqrt(masses / model.variances)
    return RigidStepStatistics(
        virtual_points=w,
        weights=weights,
        means=model.means,
        active=masses > ZERO_MASS,
    )


def m_rigid_step(stats: RigidStepStatistics) -> RigidTransform:
    """Closed-form best rigid transform aligning virtual points to means.

    Solves min |(R W + t e^T - M) L|_F over proper rotations; the
    determinant guard of the underlying Procrustes solve enforces
    det(R) = +1.
    """
    n_active = int(stats.active.sum())
    if n_active < 3:
        raise InsufficientConstraintsError(
            f"rigid step needs >= 3 components with mass, got {n_active}"
        )
    mask = stats.active
    return weighted_procrustes(
        stats.virtual_points[mask],
        stats.means[mask],
        stats.weights[mask] ** 2,
    )


def accumulate_stats(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    responsibilities: list[ResponsibilityMatrix],
    gamma: float,
) -> ComponentStats:
    """Sufficient statistics of the whole collection under `transforms`."""
    k = responsibilities[0].component_count
    mass = np.zeros(k)
    s1 = np.zeros((k, 3))
    s2 = np.zeros(k)
    out_mass = 0.0
    n = 0.0
    for ps, tf, resp in zip(sets, transforms, responsibilities):
        a = resp.inlier()
        x = tf.apply(ps.points)
        mass += a.sum(axis=0)
        s1 += a.T @ x
        s2 += a.T @ np.einsum("ni,ni->n", x, x)
        out_mass += float(resp.outlier().sum())
        n += ps.cardinality
    eta = (gamma + 1.0) * (n - out_mass)
    return ComponentStats(mass, s1, s2, out_mass, n, eta)


def m_gmm_step(
    sets: list[PointSet],
    transforms: list[RigidTransform],
    responsibilities: list[ResponsibilityMatrix],
    config: BatchConfig,
    previous: MixtureModel,
    *,
    freeze_variances: bool = False,
) -> MixtureModel:
    """Refresh means, variances and (optionally) priors.

    Components that received no responsibility mass keep their previous
    mean and are marked degenerate by pinning their variance at the
    epsilon floor (unless variances are frozen this iteration).
    """
    if config.gamma is not None and config.gamma != previous.gamma:
        raise DomainError("config gamma disagrees with the mixture's gamma")
    stats = accumulate_stats(sets, transforms, responsibilities, previous.gamma)
    live = stats.mass > ZERO_MASS
    if not np.all(live):
        log.debug("m_gmm_step: %d components without mass", int((~live).sum()))

    means = stats.means(fallback=previous.means)
    if freeze_variances:
        variances = previous.variances
    else:
        variances = stats.variances(means, previous.epsilon)

    if config.update_priors:
        if stats.eta <= ZERO_MASS:
            log.warning("all mass assigned to the uniform component; priors kept")
            priors = previous.priors
        else:
            priors = np.empty(previous.component_count + 1)
            priors[:-1] = stats.mass / stats.eta
            priors[-1] = 1.0 - priors[:-1].sum()
    else:
        priors = previous.priors

    return MixtureModel(means, variances, priors, previous.gamma, previous.h, previous.epsilon)


def _parameter_change(
    old_transforms: list[RigidTransform],
    new_transforms: list[RigidTransform],
    old_model: MixtureModel,
    new_model: MixtureModel,
    mean_scale: float,
) -> float:
    pose = max(
        geodesic_angle(o.rotation.T @ n.rotation) + float(np.linalg.norm(n.translation - o.translation))
        for o, n in zip(old_transforms, new_transforms)
    )
    mu = float(np.max(np.linalg.norm(new_model.means - old_model.means, axis=1))) / mean_scale
    return max(pose, mu)


def run_batch(
    sets: list[PointSet],
    init_transforms: list[RigidTransform],
    init_model: MixtureModel,
    config: BatchConfig,
) -> BatchResult:
    """Alternate E-step / rigid step / mixture step until done.

    Variances stay at their initial values for the first
    `fix_variance_iters` iterations.  The objective is recorded after
    every full iteration; a non-finite value raises DivergenceError.
    """
    if len(sets) != len(init_transforms):
        raise DimensionMismatchError("one initial transform per set required")
    if init_model.component_count != config.components:
        raise DimensionMismatchError(
            f"config expects {config.components} components, model has {init_model.component_count}"
        )
    if config.gamma is not None and config.gamma != init_model.gamma:
        raise DomainError("config gamma disagrees with the mixture's gamma")

    transforms = list(init_transforms)
    model = init_model
    # Gauge-invariant yardstick for mean motion: spread of the initial means.
    spread = float(np.linalg.norm(init_model.means.max(axis=0) - init_model.means.min(axis=0)))
    mean_scale = max(spread, 1e-12)

    trace: list[float] = []
    responsibilities: list[ResponsibilityMatrix] = []
    converged = False
    iterations = 0
    for q in range(1, config.iterations + 1):
        responsibilities = e_step(sets, transforms, model)
        new_transforms = [
            m_rigid_step(rigid_step_statistics(ps, resp, model))
            for ps, resp in zip(sets, responsibilities)
        ]
        new_model = m_gmm_step(
            sets,
            new_transforms,
            responsibilities,
            config,
            model,
            freeze_variances=q <= config.fix_variance_iters,
        )
        objective = evaluate_objective(sets, new_transforms, new_model, responsibilities)
        if not np.isfinite(objective):
            raise DivergenceError("objective became non-finite", iteration=q)
        trace.append(objective)
        delta = _parameter_change(transforms, new_transforms, model, new_model, mean_scale)
        transforms, model = new_transforms, new_model
        iterations = q
        if delta < config.convergence_tol:
            converged = True
            break

    return BatchResult(
        transforms=transforms,
        model=model,
        responsibilities=responsibilities,
        objective_trace=np.asarray(trace),
        iterations=iterations,
        converged=converged,
    )
