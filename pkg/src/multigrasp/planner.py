"""Two-stage grasp planning: pick grasp points globally, then an action locally.

Points come from the interior distance map (deepest pixels first, with
non-maximum suppression). At each point the full action grid is rendered
and either the decision rule picks the best action (oracle mode) or the
trained embedding does (awp mode). Embedding picks are re-checked by the
rule before they are accepted.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .awp import AwpModel, select_action
from .dataset import SceneSample, _crop_array, crop_center_in_scene
from .errors import ModelGripperMismatch, ModelRequired, MultigraspError
from .gripper import DEFAULT_CROP, DEFAULT_NA, DEFAULT_NW, GripperSpec, make_action_grid, render_grid_lenient
from .raster import BinaryRaster, distance_to_boundary_map
from .rules import RuleConfig, best_index, evaluate_action

NMS_RADIUS = 8.0
DEFAULT_TOP_K = 5
MODES = ("oracle", "awp")


@dataclass(frozen=True, slots=True)
class Grasp:
    x: float
    y: float
    theta: float
    width: float
    quality: float
    score: float


@dataclass(frozen=True)
class PlanConfig:
    mode: str = "oracle"
    top_k_points: int = DEFAULT_TOP_K
    crop: int = DEFAULT_CROP
    grid: tuple[int, int] = (DEFAULT_NA, DEFAULT_NW)
    rule: RuleConfig = field(default_factory=RuleConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.top_k_points < 1:
            raise ValueError("top_k_points must be >= 1")


@dataclass
class PlanResult:
    grasp: Grasp | None
    elapsed_ms: float
    error: MultigraspError | None = None


def propose_points(object_mask: BinaryRaster, top_k: int, radius: float = NMS_RADIUS) -> list[tuple[float, float]]:
    """Deepest interior pixels first, greedily suppressing neighbours within ``radius``.

    Ties in depth go to the earlier pixel in row-major order. Points are
    returned as pixel centers.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    dist = distance_to_boundary_map(object_mask).ravel()
    cand = np.flatnonzero(dist > 0)
    if cand.size == 0:
        return []
    cand = cand[np.argsort(-dist[cand], kind="stable")]
    w = object_mask.width
    r2 = radius * radius
    kept: list[tuple[int, int]] = []
    for idx in cand:
        j, i = divmod(int(idx), w)
        if all((i - ki) ** 2 + (j - kj) ** 2 > r2 for ki, kj in kept):
            kept.append((i, j))
            if len(kept) == top_k:
                break
    return [(i + 0.5, j + 0.5) for i, j in kept]


def _check_model(spec: GripperSpec, cfg: PlanConfig, model: AwpModel | None) -> None:
    if cfg.mode != "awp":
        return
    if model is None:
        raise ModelRequired("awp mode needs a trained model")
    if not model.accepts(spec.id):
        raise ModelGripperMismatch(f"model trained for {model.gripper_id!r}, planning for {spec.id!r}")


def plan(scene: SceneSample, spec: GripperSpec, cfg: PlanConfig = PlanConfig(), model: AwpModel | None = None) -> Grasp | None:
    """First acceptable grasp over the ranked points, in scene coordinates."""
    _check_model(spec, cfg, model)
    grid = make_action_grid(spec, *cfg.grid)
    rendered = render_grid_lenient(spec, grid, cfg.crop)
    actions = [a for a in rendered if a is not None]
    if not actions:
        return None
    mask = scene.object_mask.to_array()
    for point in propose_points(scene.object_mask, cfg.top_k_points):
        arr, offset = _crop_array(mask, point, cfg.crop)
        obj = BinaryRaster.from_array(arr)
        gx, gy = crop_center_in_scene(offset, cfg.crop)
        if cfg.mode == "oracle":
            outcomes = [evaluate_action(a, obj, spec, cfg.rule) for a in actions]
            i = best_index(outcomes, actions)
            if i is None:
                continue
            q = outcomes[i].quality
            return Grasp(gx, gy, actions[i].theta, actions[i].width, q, q)
        i, theta, width, score = select_action(model, obj, actions, spec)
        outcome = evaluate_action(actions[i], obj, spec, cfg.rule)
        if outcome.success:
            return Grasp(gx, gy, theta, width, outcome.quality, score)
    return None


def _timed_plan(scene, spec, cfg, model) -> PlanResult:
    t0 = time.perf_counter()
    try:
        g = plan(scene, spec, cfg, model)
        err = None
    except MultigraspError as exc:
        g, err = None, exc
    return PlanResult(g, (time.perf_counter() - t0) * 1000.0, err)


def plan_batch(
    scenes: Sequence[SceneSample],
    spec: GripperSpec,
    cfg: PlanConfig = PlanConfig(),
    model: AwpModel | None = None,
    threads: int = 1,
) -> list[PlanResult]:
    """Plan every scene; results stay aligned with ``scenes`` and errors stay in their slot."""
    if not scenes:
        return []
    _check_model(spec, cfg, model)
    # render once up front so worker threads share the cached grid
    render_grid_lenient(spec, make_action_grid(spec, *cfg.grid), cfg.crop)
    if threads <= 1:
        return [_timed_plan(s, spec, cfg, model) for s in scenes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: _timed_plan(s, spec, cfg, model), scenes))


def grasp_angle_step(spec: GripperSpec, cfg: PlanConfig) -> float:
    return spec.period / cfg.grid[0]


def angle_distance(a: float, b: float, period: float) -> float:
    """Circular distance between two angles of a ``period``-periodic gripper."""
    d = math.fmod(abs(a - b), period)
    return min(d, period - d)
