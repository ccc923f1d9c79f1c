"""Success-rate evaluation, rectangle matching, ablations and CSV reports.

At desk scale a grasp "succeeds" when it passes the geometric decision rule
on the scene it was planned for. These numbers are therefore a consistency
measure of the planner, not a physical grasp success rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

from .awp import AwpModel, LabeledActions, TrainConfig, fit_awp
from .dataset import BaseAnnotation, SceneSample, crop_scene
from .errors import AlignmentError, GripperOutOfFrame, SinkError
from .gripper import DEFAULT_CROP, GripperSpec, render_action
from .planner import Grasp, PlanConfig, PlanResult, plan_batch
from .raster import BinaryRaster, Polygon2D, overlap_count, rasterize_polygon
from .rules import RuleConfig, evaluate_action

IOU_MIN = 0.25
ANGLE_MAX = math.pi / 6
REPORT_COLUMNS = ("gripper_id", "attempts", "successes", "success_rate_pct", "mean_time_ms")


@dataclass
class EvalReport:
    gripper_id: str
    attempts: int
    successes: int
    success_rate: float
    mean_time_ms: float
    per_scene: list[tuple[str, bool, float]] = field(default_factory=list)


def grasp_is_valid(
    grasp: Grasp,
    scene: SceneSample,
    spec: GripperSpec,
    cfg: RuleConfig = RuleConfig(),
    crop: int = DEFAULT_CROP,
) -> bool:
    """Re-crop the scene at the grasp and re-run the decision rule on its action."""
    obj, _ = crop_scene(scene, (grasp.x, grasp.y), crop)
    try:
        action = render_action(spec, grasp.theta, grasp.width, crop)
    except GripperOutOfFrame:
        return False
    return evaluate_action(action, obj, spec, cfg).success


def evaluate_success_rate(
    results: Sequence[Grasp | PlanResult | None],
    scenes: Sequence[SceneSample],
    spec: GripperSpec,
    cfg: RuleConfig = RuleConfig(),
    crop: int = DEFAULT_CROP,
    elapsed_ms: Sequence[float] | None = None,
) -> EvalReport:
    """Count scenes whose returned grasp re-validates; a missing grasp is a failure.

    ``results`` may hold bare grasps or PlanResult objects (whose timings are
    then used unless ``elapsed_ms`` is given).
    """
    if len(results) != len(scenes):
        raise AlignmentError(f"{len(results)} results for {len(scenes)} scenes")
    if elapsed_ms is not None and len(elapsed_ms) != len(scenes):
        raise AlignmentError(f"{len(elapsed_ms)} timings for {len(scenes)} scenes")
    per_scene = []
    for k, (res, scene) in enumerate(zip(results, scenes)):
        t = 0.0
        if isinstance(res, PlanResult):
            t, res = res.elapsed_ms, res.grasp
        if elapsed_ms is not None:
            t = float(elapsed_ms[k])
        ok = res is not None and grasp_is_valid(res, scene, spec, cfg, crop)
        per_scene.append((scene.scene_id, ok, t))
    n = len(per_scene)
    hits = sum(ok for _, ok, _ in per_scene)
    return EvalReport(
        spec.id,
        n,
        hits,
        hits / n if n else 0.0,
        sum(t for _, _, t in per_scene) / n if n else 0.0,
        per_scene,
    )


# --------------------------------------------------------------------------
# rectangle metric


def angle_diff_half_turn(a: float, b: float) -> float:
    """|a - b| folded into [0, pi/2]; antipodal angles count as equal."""
    d = math.fmod(abs(a - b), math.pi)
    return min(d, math.pi - d)


def grasp_rectangle(x: float, y: float, theta: float, w: float, h: float) -> Polygon2D:
    c, s = math.cos(theta), math.sin(theta)
    ux, uy = c * w / 2, s * w / 2
    vx, vy = -s * h / 2, c * h / 2
    return Polygon2D(
        (
            (x - ux - vx, y - uy - vy),
            (x + ux - vx, y + uy - vy),
            (x + ux + vx, y + uy + vy),
            (x - ux + vx, y - uy + vy),
        )
    )


def rectangle_iou(a: Polygon2D, b: Polygon2D, width: int, height: int) -> float:
    ra = rasterize_polygon(a, width, height)
    rb = rasterize_polygon(b, width, height)
    union = (ra | rb).popcount()
    return overlap_count(ra, rb) / union if union else 0.0


def rectangle_match(
    pred: Grasp,
    truths: Sequence[BaseAnnotation],
    spec: GripperSpec,
    iou_min: float = IOU_MIN,
    angle_max: float = ANGLE_MAX,
    size: tuple[int, int] = (224, 224),
) -> bool:
    """True when some truth rectangle overlaps the prediction enough at a close angle.

    The predicted rectangle spans the grasp width along the closing direction
    and the gripper's jaw size across it. IoU is measured on rasterized
    rectangles at scene resolution ``size`` (width, height).
    """
    if not truths:
        return False
    p = grasp_rectangle(pred.x, pred.y, pred.theta, pred.width, spec.jaw_size)
    for t in truths:
        if angle_diff_half_turn(pred.theta, t.theta) > angle_max:
            continue
        if rectangle_iou(p, grasp_rectangle(t.x, t.y, t.theta, t.w, t.h), *size) >= iou_min:
            return True
    return False


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    variant: str
    reports: list[EvalReport]
    model: AwpModel | None = field(default=None, repr=False)

    @property
    def attempts(self) -> int:
        return sum(r.attempts for r in self.reports)

    @property
    def successes(self) -> int:
        return sum(r.successes for r in self.reports)

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


def ablation_run(
    variants: Sequence[tuple[str, LabeledActions]],
    specs: Sequence[GripperSpec],
    holdout: Sequence[SceneSample],
    train_cfg: TrainConfig = TrainConfig(),
    n_triplets: int = 20000,
    plan_cfg: PlanConfig = PlanConfig(mode="awp", top_k_points=1),
    threads: int = 1,
) -> list[AblationRow]:
    """Train one model per labeled variant with the same config, then plan the
    held-out scenes with every gripper in ``specs`` using that model."""
    if not variants:
        raise ValueError("ablation needs at least one variant")
    if plan_cfg.mode != "awp":
        raise ValueError("ablation evaluates embedding models; use mode='awp'")
    rows = []
    for name, data in variants:
        awp = fit_awp(data, AwpModel.ANY, train_cfg, n_triplets)
        reports = []
        for spec in specs:
            results = plan_batch(holdout, spec, plan_cfg, awp, threads)
            reports.append(evaluate_success_rate(results, holdout, spec, plan_cfg.rule, plan_cfg.crop))
        rows.append(AblationRow(name, reports, awp))
    return rows


# --------------------------------------------------------------------------
# reports


def _num(v: float) -> str:
    return repr(float(v))


def report_rows(reports: Sequence[EvalReport]) -> list[list[str]]:
    rows = [
        [r.gripper_id, str(r.attempts), str(r.successes), _num(100.0 * r.success_rate), _num(r.mean_time_ms)]
        for r in reports
    ]
    if reports:
        n = len(reports)
        rows.append(
            [
                "avg",
                _num(sum(r.attempts for r in reports) / n),
                _num(sum(r.successes for r in reports) / n),
                _num(sum(100.0 * r.success_rate for r in reports) / n),
                _num(sum(r.mean_time_ms for r in reports) / n),
            ]
        )
    return rows


def emit_report(reports: Sequence[EvalReport], sink: IO[str]) -> int:
    """Write the per-gripper CSV plus an unweighted ``avg`` row; returns data rows written."""
    rows = report_rows(reports)
    try:
        w = csv.writer(sink, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
        sink.flush()
    except (OSError, ValueError) as exc:
        raise SinkError(str(exc)) from exc
    return len(rows)


def emit_ablation(rows: Sequence[AblationRow], sink: IO[str]) -> int:
    """One block of per-gripper rows (and their avg row) per variant."""
    n = 0
    try:
        w = csv.writer(sink, lineterminator="\n")
        w.writerow(("variant",) + REPORT_COLUMNS)
        for row in rows:
            for cells in report_rows(row.reports):
                w.writerow([row.variant] + cells)
                n += 1
        sink.flush()
    except (OSError, ValueError) as exc:
        raise SinkError(str(exc)) from exc
    return n
