"""Incremental EM: fold one new set into a frozen registration.

The state after m-1 sets is the mixture plus its sufficient statistics
(masses, moments, outlier mass, eta).  Integrating set m alternates the
usual E-step and rigid step against the current blend, then recombines
the frozen statistics with the new set's contribution in closed form.
The moment recombination is exactly equivalent to rerunning the batch
mixture update over all m sets with the earlier transforms frozen.

The printed one-step recurrences for the variance and prior updates are
kept behind `printed_forms=True` for comparison only: their constants do
not reproduce the mass algebra (the prior numerator mixes a unitless 1
with a mass, and the eta recurrence is per-component), so the default
path always uses the recombined moments.

`run_windowed` layers a two-stage pipeline on top for long sequences:
a front end registers overlapping groups of sets in batch mode and
exports each group's outlier-free means ("mean set"); a back end
integrates mean sets one at a time and re-polishes a sliding window of
them with the batch solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .batch import (
    BatchConfig,
    BatchResult,
    accumulate_stats,
    e_step,
    m_rigid_step,
    rigid_step_statistics,
    run_batch,
    set_posteriors,
    virtual_points,
)
from .core import (
    ZERO_MASS,
    ComponentStats,
    MixtureModel,
    PointSet,
    ResponsibilityMatrix,
    RigidTransform,
)
from .errors import (
    ConfigError,
    DimensionMismatchError,
    DivergenceError,
    DomainError,
    RegistrationError,
)
from .initialization import (
    InitConfig,
    choose_component_count,
    init_mixture,
    init_transforms,
)
from .rejection import classify_components

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IncrementalState:
    """Mixture parameters plus cumulative statistics for sets 1..m-1."""

    model: MixtureModel
    stats: ComponentStats
    n_sets: int
    rejection_fraction: float | None = None  # None = recycle K/m components

    def __post_init__(self):
        if self.stats.component_count != self.model.component_count:
            raise DimensionMismatchError("stats and model component counts differ")
        if self.rejection_fraction is not None and not 0.0 <= self.rejection_fraction < 1.0:
            raise DomainError("rejection_fraction must lie in [0, 1)")

    @classmethod
    def from_batch(
        cls,
        sets: list[PointSet],
        result: BatchResult,
        rejection_fraction: float | None = None,
    ) -> "IncrementalState":
        stats = accumulate_stats(
            sets, result.transforms, result.responsibilities, result.model.gamma
        )
        return cls(result.model, stats, len(sets), rejection_fraction)

    def prior_consistency_error(self) -> float:
        """Max |p_k * eta - mass_k|; ~0 when priors track the masses."""
        return float(np.max(np.abs(self.model.priors[:-1] * self.stats.eta - self.stats.mass)))


def e_step_new_set(
    state: IncrementalState,
    new_set: PointSet,
    transform: RigidTransform,
) -> ResponsibilityMatrix:
    """Posteriors of the new set under the state's mixture."""
    return ResponsibilityMatrix(
        new_set.id, set_posteriors(new_set.points, transform, state.model)
    )


def m_rigid_new_set(
    state: IncrementalState,
    new_set: PointSet,
    resp: ResponsibilityMatrix,
) -> RigidTransform:
    """Rigid fit of the new set against the frozen means."""
    return m_rigid_step(rigid_step_statistics(new_set, resp, state.model))


def _printed_form_parameters(
    state: IncrementalState,
    new_set: PointSet,
    transform: RigidTransform,
    resp: ResponsibilityMatrix,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Literal transcription of the one-step update recurrences.

    Returns (means, variances, priors, eta_per_component).  Kept only for
    side-by-side comparison with the moment recombination; the variance
    and prior recurrences do not preserve normalization and are not used
    by the solver.
    """
    model = state.model
    k = model.component_count
    w, alpha_mk = virtual_points(new_set, resp)
    u = transform.apply(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        zeta = state.stats.eta * model.priors[:k] / alpha_mk
    live = np.isfinite(zeta) & (alpha_mk > ZERO_MASS)

    means = np.array(model.means)
    means[live] = (zeta[live, None] * model.means[live] + u[live]) / (zeta[live, None] + 1.0)
    delta = means - model.means

    variances = np.array(model.variances)
    with np.errstate(invalid="ignore"):
        inner = np.einsum(
            "ki,ki->k", delta, u - model.means / alpha_mk[:, None]
        )
    num = zeta * model.variances + np.einsum("ki,ki->k", delta, delta) - inner
    variances[live] = num[live] / (zeta[live] + 1.0)

    eta_k = state.stats.eta + (model.gamma + 1.0) * (new_set.cardinality + 1.0 - alpha_mk)
    priors = np.array(model.priors)
    priors[:k][live] = (alpha_mk[live] * zeta[live] + 1.0) / eta_k[live]
    return means, variances, priors, eta_k


def m_gmm_update(
    state: IncrementalState,
    new_set: PointSet,
    transform: RigidTransform,
    resp: ResponsibilityMatrix,
    *,
    update_priors: bool = False,
    printed_forms: bool = False,
) -> IncrementalState:
    """Recombine the frozen statistics with the new set's contribution.

    Components that receive (essentially) no mass from the new set are
    left untouched, so integrating a non-overlapping set is a no-op for
    them.  A negative recombined variance (cancellation) is clamped to
    the epsilon floor.
    """
    model = state.model
    k = model.component_count
    if resp.component_count != k or resp.alpha.shape[0] != new_set.cardinality:
        raise DimensionMismatchError("responsibilities do not match state/new set")

    a = resp.inlier()
    x = transform.apply(new_set.points)
    d_mass = a.sum(axis=0)
    d_s1 = a.T @ x
    d_s2 = a.T @ np.einsum("ni,ni->n", x, x)
    d_out = float(resp.outlier().sum())

    mass = state.stats.mass + d_mass
    s1 = state.stats.first_moment + d_s1
    s2 = state.stats.second_moment + d_s2
    out_mass = state.stats.outlier_mass + d_out
    n_points = state.stats.n_points + new_set.cardinality
    eta = (model.gamma + 1.0) * (n_points - out_mass)
    stats = ComponentStats(mass, s1, s2, out_mass, n_points, eta)

    if printed_forms:
        means, variances, priors, _ = _printed_form_parameters(state, new_set, transform, resp)
        variances = np.maximum(variances, model.epsilon**2)
        priors = np.maximum(priors, 0.0)
        total = priors.sum()
        if total <= 0:
            raise DivergenceError("printed-form priors lost all mass")
        priors = priors / total
    else:
        touched = d_mass > ZERO_MASS
        means = np.array(model.means)
        variances = np.array(model.variances)
        if np.any(touched):
            sub = ComponentStats(mass[touched], s1[touched], s2[touched], 0.0, 0.0, 0.0)
            means[touched] = sub.means(fallback=model.means[touched])
            variances[touched] = sub.variances(means[touched], model.epsilon)
        if update_priors:
            if eta <= ZERO_MASS:
                raise DivergenceError("eta vanished; cannot update priors")
            priors = np.empty(k + 1)
            priors[:k] = mass / eta
            priors[k] = 1.0 - priors[:k].sum()
        else:
            priors = model.priors

    new_model = MixtureModel(means, variances, priors, model.gamma, model.h, model.epsilon)
    return IncrementalState(new_model, stats, state.n_sets + 1, state.rejection_fraction)


def recycle_components(
    state: IncrementalState,
    new_set: PointSet,
    transform: RigidTransform,
    count: int,
    rng: np.random.Generator,
) -> tuple[IncrementalState, np.ndarray]:
    """Re-seed `count` components with points drawn from the new set.

    Components pinned at the variance floor go first, then uniformly
    random ones.  A recycled component keeps its accumulated mass but
    its moments are rewritten to describe the new location, so later
    recombinations pull toward the fresh data instead of the old spot.
    New variances are the current median variance.
    """
    model = state.model
    k = model.component_count
    count = int(min(max(count, 0), k))
    if count == 0:
        return state, np.empty(0, dtype=int)

    degenerate = np.flatnonzero(model.variances <= model.epsilon**2 * (1.0 + 1e-9))
    chosen = list(degenerate[:count])
    if len(chosen) < count:
        rest = np.setdiff1d(np.arange(k), degenerate, assume_unique=False)
        extra = rng.choice(rest, size=count - len(chosen), replace=False)
        chosen.extend(extra.tolist())
    ids = np.sort(np.asarray(chosen, dtype=int))

    picks = rng.choice(new_set.cardinality, size=count, replace=count > new_set.cardinality)
    seeds = transform.apply(new_set.points[picks])
    sigma_new = float(np.median(model.variances))

    means = np.array(model.means)
    variances = np.array(model.variances)
    means[ids] = seeds
    variances[ids] = sigma_new

    mass = state.stats.mass
    s1 = np.array(state.stats.first_moment)
    s2 = np.array(state.stats.second_moment)
    s1[ids] = mass[ids, None] * seeds
    s2[ids] = mass[ids] * (
        np.einsum("ki,ki->k", seeds, seeds) + 3.0 * max(sigma_new - model.epsilon**2, 0.0)
    )
    stats = ComponentStats(
        mass, s1, s2, state.stats.outlier_mass, state.stats.n_points, state.stats.eta
    )
    new_model = MixtureModel(
        means, variances, model.priors, model.gamma, model.h, model.epsilon
    )
    return IncrementalState(new_model, stats, state.n_sets, state.rejection_fraction), ids


@dataclass(frozen=True)
class IntegrationResult:
    transform: RigidTransform
    state: IncrementalState
    responsibilities: ResponsibilityMatrix
    recycled_components: np.ndarray
    inlier_mass: float


def integrate_set(
    state: IncrementalState,
    new_set: PointSet,
    init_transform: RigidTransform,
    iterations: int = 1,
    *,
    recycle: bool = False,
    update_priors: bool = False,
    rng: np.random.Generator | None = None,
) -> IntegrationResult:
    """Align one new set against the current state and blend it in.

    Each inner iteration re-evaluates posteriors and the rigid fit
    against the latest blended parameters, but always recombines from
    the pre-integration statistics, so the new set is never counted
    twice.
    """
    if iterations < 1:
        raise DomainError("iterations must be >= 1")
    recycled = np.empty(0, dtype=int)
    base = state
    if recycle:
        if rng is None:
            rng = np.random.default_rng(0)
        fraction = state.rejection_fraction
        if fraction is None:
            count = int(round(state.model.component_count / (state.n_sets + 1)))
        else:
            count = int(round(fraction * state.model.component_count))
        base, recycled = recycle_components(state, new_set, init_transform, count, rng)

    transform = init_transform
    current = base
    resp: ResponsibilityMatrix | None = None
    for _ in range(iterations):
        resp = e_step_new_set(current, new_set, transform)
        transform = m_rigid_new_set(current, new_set, resp)
        current = m_gmm_update(base, new_set, transform, resp, update_priors=update_priors)
    if not np.all(np.isfinite(current.model.means)):
        raise DivergenceError("integration produced non-finite means")
    return IntegrationResult(
        transform=transform,
        state=current,
        responsibilities=resp,
        recycled_components=recycled,
        inlier_mass=float(resp.inlier().sum()),
    )


# ---------------------------------------------------------------------------
# windowed pipeline for long sequences


@dataclass(frozen=True)
class WindowedConfig:
    """Knobs of the two-stage (front-end / back-end) pipeline."""

    gamma: float = 0.1
    epsilon: float = 1e-3
    uniform_volume: float = np.pi / 6.0
    front_iterations: int = 50
    front_fix_variance_iters: int = 0
    front_k_fraction: float = 0.6
    back_k_fraction: float = 0.6
    bootstrap_iterations: int = 50
    integrate_iterations: int = 1
    refine_iterations: int = 30
    convergence_tol: float = 1e-6
    update_priors: bool = False

    def __post_init__(self):
        if self.front_iterations < 1 or self.refine_iterations < 0:
            raise ConfigError("iteration counts must be positive")


@dataclass(frozen=True)
class WindowedResult:
    transforms: list[RigidTransform]
    model: MixtureModel
    group_members: list[list[int]]
    group_transforms: list[RigidTransform]
    failed_groups: list[int]
    mean_sets: list[PointSet]


def _group_ranges(n_sets: int, front_size: int) -> list[range]:
    if front_size < 2:
        raise ConfigError("front group size must be >= 2")
    if n_sets < front_size:
        raise DimensionMismatchError(
            f"sequence of {n_sets} sets shorter than the group size {front_size}"
        )
    step = front_size - 1
    starts = list(range(0, n_sets - front_size + 1, step))
    if starts[-1] + front_size < n_sets:
        starts.append(n_sets - front_size)
    return [range(s, s + front_size) for s in starts]


def _register_group(
    members: list[PointSet],
    inits: list[RigidTransform],
    config: WindowedConfig,
    rng: np.random.Generator,
) -> tuple[list[RigidTransform], PointSet]:
    """Batch-register one group and export its outlier-free means."""
    k = choose_component_count(members, InitConfig(k_fraction=config.front_k_fraction))
    init_cfg = InitConfig(
        mean_strategy="sample-aligned",
        translation_strategy="provided",
        k_fraction=config.front_k_fraction,
    )
    model = init_mixture(
        members,
        inits,
        k,
        init_cfg,
        gamma=config.gamma,
        h=config.uniform_volume,
        epsilon=config.epsilon,
        rng=rng,
    )
    result = run_batch(
        members,
        inits,
        model,
        BatchConfig(
            components=k,
            iterations=config.front_iterations,
            update_priors=config.update_priors,
            fix_variance_iters=config.front_fix_variance_iters,
            convergence_tol=config.convergence_tol,
        ),
    )
    labels = classify_components(result.model)
    keep = ~labels.is_outlier
    if not np.any(keep):
        keep = np.ones(result.model.component_count, dtype=bool)
    mean_set = PointSet(members[0].id, result.model.means[keep])
    return result.transforms, mean_set


def run_windowed(
    sequence: list[PointSet],
    front_size: int,
    back_size: int,
    config: WindowedConfig,
    *,
    init_transforms_seq: list[RigidTransform] | None = None,
    seed: int = 0,
) -> WindowedResult:
    """Register a long sequence with grouped batch + incremental blending.

    The front end registers groups of `front_size` successive sets
    (one-set overlap) and emits each group's inlier means.  The back end
    integrates mean sets one at a time; after every integration the last
    `back_size` mean sets are re-polished with the batch solver, which
    is what ties the loop shut when early geometry reappears.  Global
    per-frame transforms are the composition of the back-end group pose
    with the front-end local pose.
    """
    if back_size < 2:
        raise ConfigError("back window size must be >= 2")
    rng = np.random.default_rng(seed)
    groups = _group_ranges(len(sequence), front_size)

    mean_sets: list[PointSet] = []
    local: list[list[RigidTransform]] = []
    failed: list[int] = []
    for gi, rng_members in enumerate(groups):
        members = [sequence[i] for i in rng_members]
        if init_transforms_seq is not None:
            inits = [init_transforms_seq[i] for i in rng_members]
        else:
            inits = init_transforms(members, InitConfig())
        try:
            tfs, mean_set = _register_group(members, inits, config, rng)
        except RegistrationError:
            log.warning("front-end group %d failed; falling back to its initialization", gi)
            failed.append(gi)
            tfs = inits
            mean_set = PointSet(members[0].id, inits[0].apply(members[0].points))
        local.append(tfs)
        # Re-id mean sets by group for traceability.
        mean_sets.append(PointSet(gi, mean_set.points))

    group_poses = _register_mean_sets(mean_sets, back_size, config, rng)

    # Compose global transforms; overlapping frames take the earliest group.
    transforms: list[RigidTransform | None] = [None] * len(sequence)
    for gi, rng_members in enumerate(groups):
        for slot, i in enumerate(rng_members):
            if transforms[i] is None:
                transforms[i] = group_poses.poses[gi].compose(local[gi][slot])
    return WindowedResult(
        transforms=transforms,
        model=group_poses.model,
        group_members=[list(r) for r in groups],
        group_transforms=group_poses.poses,
        failed_groups=failed,
        mean_sets=mean_sets,
    )


@dataclass(frozen=True)
class _BackendResult:
    poses: list[RigidTransform]
    model: MixtureModel


def _register_mean_sets(
    mean_sets: list[PointSet],
    back_size: int,
    config: WindowedConfig,
    rng: np.random.Generator,
) -> _BackendResult:
    if len(mean_sets) == 1:
        only = mean_sets[0]
        k = choose_component_count([only], InitConfig(k_fraction=config.back_k_fraction))
        init_cfg = InitConfig(mean_strategy="sample-aligned", k_fraction=config.back_k_fraction)
        eye = [RigidTransform.identity()]
        model = init_mixture(
            [only], eye, k, init_cfg,
            gamma=config.gamma, h=config.uniform_volume, epsilon=config.epsilon, rng=rng,
        )
        return _BackendResult([RigidTransform.identity()], model)

    k = choose_component_count(mean_sets[:2], InitConfig(k_fraction=config.back_k_fraction))
    batch_cfg = BatchConfig(
        components=k,
        iterations=config.bootstrap_iterations,
        update_priors=config.update_priors,
        fix_variance_iters=0,
        convergence_tol=config.convergence_tol,
    )
    init_cfg = InitConfig(
        mean_strategy="sample-aligned",
        translation_strategy="provided",
        k_fraction=config.back_k_fraction,
    )
    eyes = [RigidTransform.identity(), RigidTransform.identity()]
    model = init_mixture(
        mean_sets[:2], eyes, k, init_cfg,
        gamma=config.gamma, h=config.uniform_volume, epsilon=config.epsilon, rng=rng,
    )
    boot = run_batch(mean_sets[:2], eyes, model, batch_cfg)
    poses = list(boot.transforms)
    state = IncrementalState.from_batch(mean_sets[:2], boot)

    refine_cfg = replace(batch_cfg, iterations=max(config.refine_iterations, 1))
    for g in range(2, len(mean_sets)):
        outcome = integrate_set(
            state,
            mean_sets[g],
            poses[g - 1],
            iterations=config.integrate_iterations,
            recycle=True,
            update_priors=config.update_priors,
            rng=rng,
        )
        poses.append(outcome.transform)
        state = outcome.state
        if config.refine_iterations > 0:
            lo = max(0, g + 1 - back_size)
            window = mean_sets[lo : g + 1]
            refined = run_batch(window, poses[lo : g + 1], state.model, refine_cfg)
            poses[lo : g + 1] = refined.transforms
            state = IncrementalState.from_batch(window, refined)
    return _BackendResult(poses, state.model)
