"""Registration quality metrics.

Only relative poses are identified (the model frame is arbitrary), so
all rotation metrics first express estimates and ground truth relative
to the first set and then compare those.
"""

from __future__ import annotations

import math

import numpy as np

from .core import RigidTransform, geodesic_angle
from .errors import DimensionMismatchError


def relative_rotations(transforms: list[RigidTransform]) -> list[np.ndarray]:
    """Rotations re-expressed relative to the first set: R_1^T R_j."""
    if not transforms:
        raise DimensionMismatchError("need at least one transform")
    first = transforms[0].rotation
    return [first.T @ t.rotation for t in transforms]


def frobenius_rotation_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b))


def per_set_rotation_errors(
    estimated: list[RigidTransform],
    truth: list[RigidTransform],
) -> np.ndarray:
    """Frobenius errors of the first-set-relative rotations, for j >= 2."""
    if len(estimated) != len(truth):
        raise DimensionMismatchError("estimate/truth counts differ")
    if len(estimated) < 2:
        raise DimensionMismatchError("need at least two sets for relative errors")
    rel_est = relative_rotations(estimated)
    rel_gt = relative_rotations(truth)
    return np.array(
        [frobenius_rotation_error(e, g) for e, g in zip(rel_est[1:], rel_gt[1:])]
    )


def rotation_rmse(estimated: list[RigidTransform], truth: list[RigidTransform]) -> float:
    """Mean Frobenius rotation error over the sets j >= 2."""
    return float(per_set_rotation_errors(estimated, truth).mean())


def pair_rotation_error(
    estimated: list[RigidTransform],
    truth: list[RigidTransform],
    a: int,
    b: int,
) -> float:
    """Error of the indirect mapping between sets a and b (0-based).

    Neither the estimator nor the ground truth stores this mapping
    directly; it is composed as R_a^T R_b on both sides.  Low values on
    pairs that were never registered against each other indicate an
    unbiased solution.
    """
    est = estimated[a].rotation.T @ estimated[b].rotation
    gt = truth[a].rotation.T @ truth[b].rotation
    return frobenius_rotation_error(est, gt)


def mean_composition_angle(
    estimated: list[RigidTransform],
    truth: list[RigidTransform],
) -> float:
    """Mean geodesic angle (degrees) of estimate-vs-truth compositions.

    For each set the relative estimate is composed with the inverse
    relative ground truth; a perfect registration gives the identity
    everywhere, hence 0 degrees.  Averaged over all sets (the first
    contributes 0 by construction).
    """
    if len(estimated) != len(truth):
        raise DimensionMismatchError("estimate/truth counts differ")
    rel_est = relative_rotations(estimated)
    rel_gt = relative_rotations(truth)
    angles = [math.degrees(geodesic_angle(e.T @ g)) for e, g in zip(rel_est, rel_gt)]
    return float(np.mean(angles))


def relative_pose(first: RigidTransform, last: RigidTransform) -> RigidTransform:
    """Pose of `last` expressed in the frame of `first`."""
    return first.inverse().compose(last)


def first_to_last_pose_error(
    estimated: list[RigidTransform],
    truth: list[RigidTransform],
) -> tuple[float, float]:
    """(angle degrees, translation distance) error of the end-to-end pose."""
    est = relative_pose(estimated[0], estimated[-1])
    gt = relative_pose(truth[0], truth[-1])
    angle = math.degrees(geodesic_angle(est.rotation.T @ gt.rotation))
    shift = float(np.linalg.norm(est.translation - gt.translation))
    return angle, shift
