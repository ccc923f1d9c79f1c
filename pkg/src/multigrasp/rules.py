"""Graspability decision rule: collision (R1), path contact (R2), stability (R3).

Rules run strictly in order and the first failure is reported. A grasp that
passes all three gets a quality in [0, 1] that favors smaller openings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .errors import DimensionMismatch, EmptyRegion
from .gripper import ActionRaster, GripperSpec, check_width
from .raster import BinaryRaster, centroid, intersection

DEFAULT_TAU = 10.0


class Rule(str, Enum):
    NONE = "none"
    R1 = "R1"
    R2 = "R2"
    R3 = "R3"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, slots=True)
class RuleConfig:
    tau_stable: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau_stable > 0:
            raise ValueError("tau_stable must be positive")


@dataclass(frozen=True, slots=True)
class GraspOutcome:
    success: bool
    failed_rule: Rule
    quality: float = 0.0
    stability_distance: float | None = None


def _check_dims(action: ActionRaster, obj: BinaryRaster) -> None:
    if (action.mask.width, action.mask.height) != (obj.width, obj.height):
        raise DimensionMismatch(
            f"action {action.mask.width}x{action.mask.height} vs object {obj.width}x{obj.height}"
        )


def check_r1(action: ActionRaster, obj: BinaryRaster) -> bool:
    """No collision: the gripper mask must not touch the object."""
    _check_dims(action, obj)
    return action.mask.bits & obj.bits == 0


def check_r2(action: ActionRaster, obj: BinaryRaster) -> bool:
    """Contact: the closing path must cross the object somewhere."""
    _check_dims(action, obj)
    return action.path.bits & obj.bits != 0


def check_r3(action: ActionRaster, obj: BinaryRaster, cfg: RuleConfig) -> tuple[bool, float]:
    """Stability: the contact region's centroid must lie near the gripper center.

    Returns (passed, distance). Raises EmptyRegion when the path misses the
    object, so callers should gate on R2 first.
    """
    _check_dims(action, obj)
    contact = intersection(action.path, obj)
    if contact.bits == 0:
        raise EmptyRegion("path and object do not intersect")
    cx, cy = centroid(contact)
    dist = math.hypot(cx - obj.width / 2, cy - obj.height / 2)
    return dist <= cfg.tau_stable, dist


def quality_score(width: float, spec: GripperSpec, success: bool) -> float:
    check_width(spec, width)
    if not success:
        return 0.0
    span = spec.w_max - spec.w_min
    if span <= 0:
        return 1.0
    return min(1.0, max(0.0, (spec.w_max - width) / span))


def evaluate_action(action: ActionRaster, obj: BinaryRaster, spec: GripperSpec, cfg: RuleConfig) -> GraspOutcome:
    if not check_r1(action, obj):
        return GraspOutcome(False, Rule.R1)
    if not check_r2(action, obj):
        return GraspOutcome(False, Rule.R2)
    ok, dist = check_r3(action, obj, cfg)
    if not ok:
        return GraspOutcome(False, Rule.R3, 0.0, dist)
    return GraspOutcome(True, Rule.NONE, quality_score(action.width, spec, True), dist)


def best_index(outcomes: Sequence[GraspOutcome], actions: Sequence[ActionRaster]) -> int | None:
    """Highest quality success; ties go to the smaller width, then smaller angle."""
    best = None
    best_key = None
    for i, (o, a) in enumerate(zip(outcomes, actions)):
        if not o.success:
            continue
        key = (-o.quality, a.width, a.theta, i)
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def evaluate_grid(
    actions: Sequence[ActionRaster],
    obj: BinaryRaster,
    spec: GripperSpec,
    cfg: RuleConfig,
) -> tuple[list[GraspOutcome], int | None]:
    outcomes = [evaluate_action(a, obj, spec, cfg) for a in actions]
    return outcomes, best_index(outcomes, actions)
