"""Scene ingestion, per-gripper relabeling, JSONL records and synthetic scenes."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import AnnotationParse, InputError, PointOutOfScene, SinkError
from .gripper import DEFAULT_CROP, ActionGrid, GripperSpec, render_grid_lenient
from .raster import BinaryRaster, Polygon2D, fill_polygon, read_pgm, read_pgm_array, write_pgm
from .rules import GraspOutcome, Rule, RuleConfig, best_index, evaluate_action

SCENE_SIZE = 224


@dataclass(frozen=True, slots=True)
class BaseAnnotation:
    """Jacquard-style grasp rectangle; ``theta`` in radians within [-pi/2, pi/2)."""

    x: float
    y: float
    theta: float
    w: float
    h: float


@dataclass(frozen=True)
class SceneSample:
    scene_id: str
    object_mask: BinaryRaster
    grasp_points: tuple[tuple[float, float], ...] = ()
    depth: np.ndarray | None = field(default=None, compare=False)
    rgb: np.ndarray | None = field(default=None, compare=False)
    annotations: tuple[BaseAnnotation, ...] = ()

    @property
    def width(self) -> int:
        return self.object_mask.width

    @property
    def height(self) -> int:
        return self.object_mask.height


@dataclass(frozen=True, slots=True)
class GraspRecord:
    scene_id: str
    gripper_id: str
    x: float
    y: float
    theta: float
    width: float
    quality: float
    success: bool
    failed_rule: Rule

    @property
    def point(self) -> tuple[float, float]:
        return (self.x, self.y)


def normalize_half_turn(theta: float) -> float:
    """Map an angle to [-pi/2, pi/2)."""
    return (theta + math.pi / 2) % math.pi - math.pi / 2


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def parse_base_annotations(text: str, dedup: bool = True) -> list[BaseAnnotation]:
    """Parse ``x;y;theta_deg;opening;jaw_size`` lines.

    With ``dedup`` only the first annotation per rounded (x, y) is kept, which
    collapses Jacquard's multiple widths per grasp point.
    """
    out: list[BaseAnnotation] = []
    seen: set[tuple[int, int]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(";")
        if len(parts) != 5:
            raise AnnotationParse(f"expected 5 ';'-separated fields, got {len(parts)}", lineno)
        try:
            x, y, theta_deg, w, h = (float(p) for p in parts)
        except ValueError as exc:
            raise AnnotationParse(str(exc), lineno) from exc
        if not all(math.isfinite(v) for v in (x, y, theta_deg, w, h)):
            raise AnnotationParse("non-finite value", lineno)
        if w <= 0 or h <= 0:
            raise AnnotationParse("opening and jaw size must be positive", lineno)
        key = (_round_half_up(x), _round_half_up(y))
        if dedup and key in seen:
            continue
        seen.add(key)
        out.append(BaseAnnotation(x, y, normalize_half_turn(math.radians(theta_deg)), w, h))
    return out


def format_annotations(annotations: Iterable[BaseAnnotation]) -> str:
    return "".join(
        f"{a.x:.2f};{a.y:.2f};{math.degrees(a.theta):.2f};{a.w:.2f};{a.h:.2f}\n" for a in annotations
    )


# --------------------------------------------------------------------------
# cropping and relabeling


def _crop_array(mask: np.ndarray, point: tuple[float, float], crop: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = mask.shape
    x, y = point
    if not (0 <= x < w and 0 <= y < h):
        raise PointOutOfScene(f"point ({x}, {y}) outside {w}x{h} scene")
    ox = _round_half_up(x) - crop // 2
    oy = _round_half_up(y) - crop // 2
    out = np.zeros((crop, crop), dtype=bool)
    sx0, sy0 = max(ox, 0), max(oy, 0)
    sx1, sy1 = min(ox + crop, w), min(oy + crop, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - oy: sy1 - oy, sx0 - ox: sx1 - ox] = mask[sy0:sy1, sx0:sx1]
    return out, (ox, oy)


def crop_scene(scene: SceneSample, point: tuple[float, float], crop: int = DEFAULT_CROP) -> tuple[BinaryRaster, tuple[int, int]]:
    """Cut a crop x crop window centered on the rounded point, zero-padded.

    Returns the object crop and the window's top-left corner in scene pixels.
    """
    if crop < 1:
        raise ValueError("crop must be >= 1")
    arr, offset = _crop_array(scene.object_mask.to_array(), point, crop)
    return BinaryRaster.from_array(arr), offset


def crop_center_in_scene(offset: tuple[int, int], crop: int) -> tuple[float, float]:
    return offset[0] + crop / 2, offset[1] + crop / 2


def relabel_point(
    obj: BinaryRaster,
    spec: GripperSpec,
    grid: ActionGrid,
    cfg: RuleConfig,
    crop: int = DEFAULT_CROP,
) -> list[GraspOutcome]:
    """Evaluate the whole action grid on one object crop.

    Actions that fall completely outside the crop count as R1 failures.
    """
    outcomes = []
    for action in render_grid_lenient(spec, grid, crop):
        if action is None:
            outcomes.append(GraspOutcome(False, Rule.R1))
        else:
            outcomes.append(evaluate_action(action, obj, spec, cfg))
    return outcomes


def relabel_scene(
    scene: SceneSample,
    spec: GripperSpec,
    grid: ActionGrid,
    cfg: RuleConfig,
    crop: int = DEFAULT_CROP,
) -> list[GraspRecord]:
    """One record per (grasp point, action); failures are kept."""
    records = []
    mask = scene.object_mask.to_array()
    for point in scene.grasp_points:
        arr, offset = _crop_array(mask, point, crop)
        gx, gy = crop_center_in_scene(offset, crop)
        outcomes = relabel_point(BinaryRaster.from_array(arr), spec, grid, cfg, crop)
        for (_, _, theta, width), o in zip(grid.actions(), outcomes):
            records.append(
                GraspRecord(scene.scene_id, spec.id, gx, gy, theta, width, o.quality, o.success, o.failed_rule)
            )
    return records


def relabel_corpus(
    scenes: Sequence[SceneSample],
    spec: GripperSpec,
    grid: ActionGrid,
    cfg: RuleConfig,
    crop: int = DEFAULT_CROP,
    threads: int = 1,
) -> list[GraspRecord]:
    """Relabel many scenes; output is grouped by scene in input order for any thread count."""
    render_grid_lenient(spec, grid, crop)  # warm the cache before fanning out
    if threads <= 1:
        per_scene = [relabel_scene(s, spec, grid, cfg, crop) for s in scenes]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_scene = list(pool.map(lambda s: relabel_scene(s, spec, grid, cfg, crop), scenes))
    return [r for recs in per_scene for r in recs]


def best_records(records: Sequence[GraspRecord]) -> dict[tuple[str, str, float, float], GraspRecord | None]:
    """Best successful record per (scene, gripper, point), same tie-break as the rule grid."""
    groups: dict[tuple[str, str, float, float], list[GraspRecord]] = {}
    for r in records:
        groups.setdefault((r.scene_id, r.gripper_id, r.x, r.y), []).append(r)
    out = {}
    for key, recs in groups.items():
        outcomes = [GraspOutcome(r.success, r.failed_rule, r.quality) for r in recs]
        idx = best_index(outcomes, recs)
        out[key] = None if idx is None else recs[idx]
    return out


# --------------------------------------------------------------------------
# JSONL


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def record_to_json(r: GraspRecord) -> str:
    return (
        f'{{"scene_id": {json.dumps(r.scene_id)}, "gripper_id": {json.dumps(r.gripper_id)}, '
        f'"x": {_fmt(r.x)}, "y": {_fmt(r.y)}, "theta": {_fmt(r.theta)}, "width": {_fmt(r.width)}, '
        f'"quality": {_fmt(r.quality)}, "success": {"true" if r.success else "false"}, '
        f'"failed_rule": "{r.failed_rule.value}"}}'
    )


def record_from_json(line: str) -> GraspRecord:
    d = json.loads(line)
    return GraspRecord(
        scene_id=str(d["scene_id"]),
        gripper_id=str(d["gripper_id"]),
        x=float(d["x"]),
        y=float(d["y"]),
        theta=float(d["theta"]),
        width=float(d["width"]),
        quality=float(d["quality"]),
        success=bool(d["success"]),
        failed_rule=Rule(d["failed_rule"]),
    )


def emit_records(records: Iterable[GraspRecord], sink: IO[str]) -> int:
    n = 0
    try:
        for r in records:
            sink.write(record_to_json(r) + "\n")
            n += 1
        sink.flush()
    except (OSError, ValueError) as exc:
        raise SinkError(str(exc)) from exc
    return n


def read_records(source: str | Path | Iterable[str]) -> list[GraspRecord]:
    lines = Path(source).read_text(encoding="utf-8").splitlines() if isinstance(source, (str, Path)) else source
    out = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(record_from_json(line))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"record line {n}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# scene directories


def load_scene(directory: str | Path, scene_id: str) -> SceneSample:
    d = Path(directory)
    mask = read_pgm(d / f"{scene_id}_mask.pgm")
    annotations: tuple[BaseAnnotation, ...] = ()
    points: tuple[tuple[float, float], ...] = ()
    grasp_file = d / f"{scene_id}_grasps.txt"
    if grasp_file.exists():
        text = grasp_file.read_text(encoding="utf-8")
        annotations = tuple(parse_base_annotations(text, dedup=False))
        points = tuple((a.x, a.y) for a in parse_base_annotations(text))
    depth = None
    depth_file = d / f"{scene_id}_depth.pgm"
    if depth_file.exists():
        depth = read_pgm_array(depth_file)
        if depth.shape != mask.shape:
            raise InputError(f"{scene_id}: depth {depth.shape} does not match mask {mask.shape}")
    return SceneSample(scene_id, mask, points, depth=depth, annotations=annotations)


def scene_ids(directory: str | Path) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"scene directory {d} does not exist")
    return sorted(p.name[: -len("_mask.pgm")] for p in d.glob("*_mask.pgm"))


def load_scene_dir(directory: str | Path) -> list[SceneSample]:
    return [load_scene(directory, sid) for sid in scene_ids(directory)]


def write_scene(scene: SceneSample, directory: str | Path) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mask_path = d / f"{scene.scene_id}_mask.pgm"
    write_pgm(scene.object_mask, mask_path)
    written = [mask_path]
    if scene.annotations or scene.grasp_points:
        anns = scene.annotations or tuple(BaseAnnotation(x, y, 0.0, 1.0, 1.0) for x, y in scene.grasp_points)
        grasp_path = d / f"{scene.scene_id}_grasps.txt"
        grasp_path.write_text(format_annotations(anns), encoding="utf-8")
        written.append(grasp_path)
    return written


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    size: int = SCENE_SIZE
    max_shapes: int = 3
    # relative frequencies of bar, disc and L-shaped objects
    kind_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    bar_length: tuple[float, float] = (36.0, 90.0)
    bar_thickness: tuple[float, float] = (10.0, 24.0)
    disc_radius: tuple[float, float] = (8.0, 18.0)
    gap: int = 8
    margin: float = 8.0
    points_per_bar: int = 2
    jaw_size: float = 10.0
    max_tries: int = 60


def _bar(cx: float, cy: float, length: float, thickness: float, angle: float) -> Polygon2D:
    return Polygon2D.rectangle(-length / 2, -thickness / 2, length / 2, thickness / 2).transformed(angle, cx, cy)


def _disc(cx: float, cy: float, r: float, n: int = 40) -> Polygon2D:
    a = 2 * math.pi * np.arange(n) / n
    return Polygon2D(tuple(zip((cx + r * np.cos(a)).tolist(), (cy + r * np.sin(a)).tolist())))


def _propose_shape(rng: np.random.Generator, cfg: SynthConfig):
    """Return (polygons, annotations) for one random object, in scene coordinates."""
    kind = rng.choice(3, p=np.asarray(cfg.kind_weights) / sum(cfg.kind_weights))
    cx, cy = rng.uniform(cfg.margin, cfg.size - cfg.margin, size=2)
    if kind == 0:
        length = rng.uniform(*cfg.bar_length)
        thick = rng.uniform(*cfg.bar_thickness)
        angle = rng.uniform(0, math.pi)
        u = np.array([math.cos(angle), math.sin(angle)])
        anns = []
        for _ in range(cfg.points_per_bar):
            p = np.array([cx, cy]) + rng.uniform(-0.3, 0.3) * length * u
            anns.append(BaseAnnotation(float(np.round(p[0])), float(np.round(p[1])),
                                       normalize_half_turn(angle + math.pi / 2), thick + 8, cfg.jaw_size))
        return [_bar(cx, cy, length, thick, angle)], anns
    if kind == 1:
        r = rng.uniform(*cfg.disc_radius)
        jx, jy = rng.integers(-1, 2, size=2)
        ann = BaseAnnotation(float(round(cx) + jx), float(round(cy) + jy), 0.0, 2 * r + 8, cfg.jaw_size)
        return [_disc(cx, cy, r)], [ann]
    # L: two arms of equal thickness meeting at an outer corner (cx, cy)
    thick = rng.uniform(*cfg.bar_thickness)
    la = max(rng.uniform(*cfg.bar_length), 2.5 * thick)
    lb = max(rng.uniform(*cfg.bar_length), 2.5 * thick)
    angle = rng.uniform(0, 2 * math.pi)
    u = np.array([math.cos(angle), math.sin(angle)])
    v = np.array([-u[1], u[0]])
    c = np.array([cx, cy])

    def arm(along, across, length):
        pts = [c, c + length * along, c + length * along + thick * across, c + thick * across]
        return Polygon2D(tuple(map(tuple, np.asarray(pts).tolist())))

    anns = []
    for along, across, length in ((u, v, la), (v, u, lb)):
        p = c + rng.uniform(0.55, 0.85) * length * along + 0.5 * thick * across
        theta = normalize_half_turn(math.atan2(along[1], along[0]) + math.pi / 2)
        anns.append(BaseAnnotation(float(np.round(p[0])), float(np.round(p[1])), theta, thick + 8, cfg.jaw_size))
    return [arm(u, v, la), arm(v, u, lb)], anns


def synth_scene_parts(seed: int, cfg: SynthConfig = SynthConfig(), scene_id: str | None = None) -> tuple[SceneSample, list[BinaryRaster]]:
    """Like :func:`synth_scene` but also returns each object's own raster."""
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, cfg.max_shapes + 1))
    size = cfg.size
    union = np.zeros((size, size), dtype=bool)
    blocked = np.zeros((size, size), dtype=bool)
    parts: list[BinaryRaster] = []
    anns: list[BaseAnnotation] = []
    for _ in range(n_shapes):
        for _ in range(cfg.max_tries):
            polys, shape_anns = _propose_shape(rng, cfg)
            verts = np.concatenate([p.as_array() for p in polys])
            if verts.min() < cfg.margin or verts.max() > size - cfg.margin:
                continue
            shape = np.zeros((size, size), dtype=bool)
            for p in polys:
                fill_polygon(shape, p)
            if (shape & blocked).any():
                continue
            if not all(shape[int(a.y), int(a.x)] for a in shape_anns):
                continue
            union |= shape
            blocked |= ndimage.binary_dilation(shape, iterations=cfg.gap)
            parts.append(BinaryRaster.from_array(shape))
            anns.extend(shape_anns)
            break
    if not parts:
        # every placement was rejected; fall back to a centered disc
        r = cfg.disc_radius[0]
        shape = np.zeros((size, size), dtype=bool)
        fill_polygon(shape, _disc(size / 2, size / 2, r))
        union |= shape
        parts.append(BinaryRaster.from_array(shape))
        anns.append(BaseAnnotation(size // 2, size // 2, 0.0, 2 * r + 8, cfg.jaw_size))
    sid = scene_id if scene_id is not None else f"synth_{seed}"
    points = tuple(dict.fromkeys((a.x, a.y) for a in anns))
    scene = SceneSample(sid, BinaryRaster.from_array(union), points, annotations=tuple(anns))
    return scene, parts


def synth_scene(seed: int, cfg: SynthConfig = SynthConfig(), scene_id: str | None = None) -> SceneSample:
    """Deterministic random scene of 1-3 disjoint bars, discs and L-shapes."""
    return synth_scene_parts(seed, cfg, scene_id)[0]


def corpus_seed(seed: int, index: int) -> int:
    """Per-scene seed derived from a corpus seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_corpus(n: int, seed: int, cfg: SynthConfig = SynthConfig()) -> list[SceneSample]:
    return [synth_scene(corpus_seed(seed, i), cfg, scene_id=f"scene_{i:05d}") for i in range(n)]
