"""Parametric k-finger grippers and their two-channel action rasters.

Every finger closes radially toward the gripper center. An action (theta, w)
renders two channels on a square crop centered on the grasp point:

* mask: the finger footprints at the pre-grasp opening ``w``;
* path: the area the fingers sweep while closing from ``w`` to ``w_min``.

Fingers are described in a local frame whose +x axis points radially
outward; a finger is anchored at radius ``w / 2`` along its placement
angle ``phi`` and the whole assembly is then rotated by ``theta``.
"""

from __future__ import annotations

import ast
import functools
import math
import operator
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    GripperOutOfFrame,
    InvalidOpeningRange,
    SpecParse,
    SymmetryMismatch,
    WidthOutOfRange,
)
from .raster import (
    BinaryRaster,
    Polygon2D,
    convex_hull,
    convex_row_spans,
    spans_to_words,
    words_to_array,
)

SYMMETRY_TOL = 1e-6
# rendered vertex coordinates are snapped to this grid so that symmetric
# actions (theta vs theta + period, quarter turns) rasterize bit-identically
_SNAP_DECIMALS = 9
_WIDTH_TOL = 1e-9

DEFAULT_NA = 16
DEFAULT_NW = 8
DEFAULT_CROP = 96


@dataclass(frozen=True, slots=True)
class FingerSpec:
    footprint: Polygon2D
    phi: float


@dataclass(frozen=True, slots=True)
class GripperSpec:
    id: str
    fingers: tuple[FingerSpec, ...]
    w_min: float
    w_max: float
    symmetry_order: int = 1

    def __post_init__(self):
        if not self.fingers:
            raise SpecParse(f"gripper {self.id!r} has no fingers")
        if not (0 <= self.w_min < self.w_max):
            raise InvalidOpeningRange(f"need 0 <= w_min < w_max, got w_min={self.w_min}, w_max={self.w_max}")
        if self.symmetry_order < 1:
            raise SpecParse("symmetry_order must be >= 1")
        for f in self.fingers:
            if not f.footprint.is_convex() or f.footprint.area() <= 0:
                raise SpecParse(f"gripper {self.id!r}: finger footprints must be convex with positive area")
        _check_symmetry(self)

    @property
    def period(self) -> float:
        """Angular period of the gripper: 2*pi / symmetry_order."""
        return 2 * math.pi / self.symmetry_order

    @property
    def jaw_size(self) -> float:
        """Largest tangential extent of any finger footprint."""
        return max(float(np.ptp(f.footprint.as_array()[:, 1])) for f in self.fingers)


def _angle_close(a: float, b: float, tol: float = SYMMETRY_TOL) -> bool:
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d) <= tol


def _check_symmetry(spec: GripperSpec) -> None:
    step = spec.period
    unused = list(range(len(spec.fingers)))
    for f in spec.fingers:
        target = f.phi + step
        match = next(
            (
                j
                for j in unused
                if _angle_close(spec.fingers[j].phi, target)
                and len(spec.fingers[j].footprint.vertices) == len(f.footprint.vertices)
                and np.allclose(spec.fingers[j].footprint.as_array(), f.footprint.as_array(), atol=SYMMETRY_TOL)
            ),
            None,
        )
        if match is None:
            raise SymmetryMismatch(
                f"gripper {spec.id!r}: rotating by 2*pi/{spec.symmetry_order} does not map the fingers onto themselves"
            )
        unused.remove(match)


# --------------------------------------------------------------------------
# .gspec documents

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def _eval_number(text: str) -> float:
    """Evaluate a numeric literal or simple arithmetic over numbers and ``pi``."""

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        raise ValueError(f"unsupported expression {text!r}")

    try:
        return ev(ast.parse(text.strip(), mode="eval"))
    except (SyntaxError, ZeroDivisionError) as exc:
        raise ValueError(f"bad number {text!r}") from exc


def load_gripper_spec(text: str) -> GripperSpec:
    """Parse and validate a gripper-spec document.

    Example::

        id = parallel_jaw
        w_min = 6
        w_max = 60
        symmetry_order = 2

        [finger]
        phi = 0
        footprint = -2 -6, 2 -6, 2 6, -2 6

        [finger]
        phi = pi
        footprint = -2 -6, 2 -6, 2 6, -2 6
    """
    header: dict[str, str] = {}
    fingers: list[dict[str, str]] = []
    current = header
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line.lower() != "[finger]":
                raise SpecParse(f"line {lineno}: unknown section {line}")
            current = {}
            fingers.append(current)
            continue
        m = re.match(r"^([A-Za-z_][A-Za-z0-9_]*)\s*[=:]\s*(.*)$", line)
        if not m:
            raise SpecParse(f"line {lineno}: expected 'key = value'")
        key, value = m.group(1).lower(), m.group(2).strip()
        if key in current:
            raise SpecParse(f"line {lineno}: duplicate key {key!r}")
        current[key] = value

    for key in ("id", "w_min", "w_max", "symmetry_order"):
        if key not in header:
            raise SpecParse(f"missing header key {key!r}")
    unknown = set(header) - {"id", "w_min", "w_max", "symmetry_order", "scale"}
    if unknown:
        raise SpecParse(f"unknown header keys {sorted(unknown)}")
    try:
        scale = _eval_number(header.get("scale", "1"))
        w_min = _eval_number(header["w_min"]) * scale
        w_max = _eval_number(header["w_max"]) * scale
        order = int(header["symmetry_order"])
    except ValueError as exc:
        raise SpecParse(str(exc)) from exc
    if scale <= 0:
        raise SpecParse("scale must be positive")

    specs = []
    for n, block in enumerate(fingers):
        if set(block) != {"phi", "footprint"}:
            raise SpecParse(f"finger {n}: expected keys phi and footprint, got {sorted(block)}")
        try:
            phi = _eval_number(block["phi"])
            coords = [_eval_number(t) * scale for t in re.split(r"[\s,]+", block["footprint"]) if t]
        except ValueError as exc:
            raise SpecParse(f"finger {n}: {exc}") from exc
        if len(coords) < 6 or len(coords) % 2:
            raise SpecParse(f"finger {n}: footprint needs >= 3 (x, y) pairs")
        specs.append(FingerSpec(Polygon2D.from_flat(coords), phi))

    return GripperSpec(
        id=header["id"],
        fingers=tuple(specs),
        w_min=w_min,
        w_max=w_max,
        symmetry_order=order,
    )


def load_gripper_file(path: str | Path) -> GripperSpec:
    return load_gripper_spec(Path(path).read_text(encoding="utf-8"))


BUILTIN_GRIPPERS = ("parallel_jaw", "radial3", "radial4")


def builtin_spec(name: str) -> GripperSpec:
    """Load one of the bundled gripper specs (see ``BUILTIN_GRIPPERS``)."""
    text = resources.files("multigrasp.data.grippers").joinpath(f"{name}.gspec").read_text(encoding="utf-8")
    return load_gripper_spec(text)


def resolve_gripper(ref: str | Path) -> GripperSpec:
    """Load a spec from a file path, falling back to the bundled names."""
    p = Path(ref)
    if p.exists():
        return load_gripper_file(p)
    if str(ref) in BUILTIN_GRIPPERS:
        return builtin_spec(str(ref))
    raise SpecParse(f"no gripper spec file {ref!r}")


# --------------------------------------------------------------------------
# action grid and rendering


@dataclass(frozen=True, slots=True)
class ActionGrid:
    angles: tuple[float, ...]
    widths: tuple[float, ...]

    @property
    def na(self) -> int:
        return len(self.angles)

    @property
    def nw(self) -> int:
        return len(self.widths)

    def __len__(self) -> int:
        return self.na * self.nw

    def actions(self) -> Iterator[tuple[int, int, float, float]]:
        """Yield (angle index, width index, theta, width), angle-major."""
        for j, theta in enumerate(self.angles):
            for k, w in enumerate(self.widths):
                yield j, k, theta, w


def make_action_grid(spec: GripperSpec, na: int = DEFAULT_NA, nw: int = DEFAULT_NW) -> ActionGrid:
    if na < 1 or nw < 1:
        raise ValueError("na and nw must be >= 1")
    step = spec.period / na
    angles = tuple(j * step for j in range(na))
    if nw == 1:
        widths = (spec.w_max,)
    else:
        widths = tuple(spec.w_min + k * (spec.w_max - spec.w_min) / (nw - 1) for k in range(nw))
    return ActionGrid(angles, widths)


@dataclass(frozen=True, slots=True)
class ActionRaster:
    theta: float
    width: float
    mask: BinaryRaster
    path: BinaryRaster


def reduce_angle(theta: float, period: float) -> float:
    t = round(theta % period, _SNAP_DECIMALS)
    return 0.0 if t >= period - 10 ** -_SNAP_DECIMALS else t


def check_width(spec: GripperSpec, width: float) -> None:
    if not (spec.w_min - _WIDTH_TOL <= width <= spec.w_max + _WIDTH_TOL):
        raise WidthOutOfRange(f"width {width} outside [{spec.w_min}, {spec.w_max}] for {spec.id!r}")


def _pad(polys: list[np.ndarray]) -> np.ndarray:
    """Stack polygons of unequal vertex count by repeating the last vertex."""
    n = max(len(p) for p in polys)
    return np.stack([np.concatenate([p, np.repeat(p[-1:], n - len(p), axis=0)]) for p in polys])


def _finger_shapes(spec: GripperSpec, width: float) -> tuple[np.ndarray, np.ndarray]:
    """Local-frame (F, V, 2) arrays: footprints at the opening and closing sweeps."""
    r_open, r_closed = width / 2, spec.w_min / 2
    opened, swept = [], []
    for f in spec.fingers:
        local = f.footprint.as_array()
        at_open = local + (r_open, 0.0)
        opened.append(at_open)
        if r_open > r_closed:
            hull = convex_hull([*map(tuple, at_open), *map(tuple, local + (r_closed, 0.0))])
            swept.append(np.asarray(hull))
        else:
            swept.append(at_open)
    return _pad(opened), _pad(swept)


def _place(local: np.ndarray, angles: np.ndarray, center: float) -> np.ndarray:
    """Rotate (N, F, V, 2) local shapes by per-(N, F) angles about the crop center."""
    c, s = np.cos(angles)[..., None], np.sin(angles)[..., None]
    x = c * local[..., 0] - s * local[..., 1] + center
    y = s * local[..., 0] + c * local[..., 1] + center
    return np.round(np.stack([x, y], axis=-1), _SNAP_DECIMALS)


def _pack_rows(arr: np.ndarray) -> list[int]:
    packed = np.packbits(arr.reshape(arr.shape[0], -1), axis=1, bitorder="little")
    return [int.from_bytes(row.tobytes(), "little") for row in packed]


def render_actions(
    spec: GripperSpec,
    actions: Sequence[tuple[float, float]],
    crop: int = DEFAULT_CROP,
    strict: bool = True,
) -> list[ActionRaster | None]:
    """Render many (theta, width) actions in one vectorized pass.

    With ``strict=False`` actions whose mask leaves the crop map to ``None``
    instead of raising GripperOutOfFrame.
    """
    if crop < 1:
        raise ValueError("crop must be >= 1")
    if not actions:
        return []
    for _, w in actions:
        check_width(spec, w)
    shapes = {}
    for _, w in actions:
        if w not in shapes:
            shapes[w] = _finger_shapes(spec, w)
    n_vert = max(max(o.shape[1], p.shape[1]) for o, p in shapes.values())

    def widen(a):
        return np.concatenate([a, np.repeat(a[:, -1:], n_vert - a.shape[1], axis=1)], axis=1)

    opened = np.stack([widen(shapes[w][0]) for _, w in actions])
    swept = np.stack([widen(shapes[w][1]) for _, w in actions])
    phis = np.array([f.phi for f in spec.fingers])
    base = np.array([reduce_angle(t, spec.period) for t, _ in actions])
    angles = base[:, None] + phis[None, :]

    n, nf = angles.shape
    polys = np.concatenate([_place(opened, angles, crop / 2), _place(swept, angles, crop / 2)])
    start, end = convex_row_spans(polys.reshape(2 * n * nf, n_vert, 2), crop)
    words = spans_to_words(start, end, crop).reshape(2, n, nf, crop, -1)
    words = np.bitwise_or.reduce(words, axis=2)
    mask = words_to_array(words[0], crop)
    # the sweep starts at the mask configuration; OR-ing keeps mask <= path exact
    path = words_to_array(words[1] | words[0], crop)
    mask_bits, path_bits = _pack_rows(mask), _pack_rows(path)

    out: list[ActionRaster | None] = []
    for (theta, width), mb, pb in zip(actions, mask_bits, path_bits):
        if mb == 0:
            if strict:
                raise GripperOutOfFrame(
                    f"{spec.id!r} at theta={theta:.4f}, width={width:.3f} falls outside a {crop}px crop"
                )
            out.append(None)
            continue
        out.append(ActionRaster(theta, width, BinaryRaster(crop, crop, mb), BinaryRaster(crop, crop, pb)))
    return out


def render_action(spec: GripperSpec, theta: float, width: float, crop: int = DEFAULT_CROP) -> ActionRaster:
    """Render the mask and closing-path channels of one action."""
    return render_actions(spec, [(theta, width)], crop)[0]


def render_grid_uncached(spec: GripperSpec, grid: ActionGrid, crop: int = DEFAULT_CROP) -> list[ActionRaster]:
    return render_actions(spec, [(t, w) for _, _, t, w in grid.actions()], crop)


@functools.lru_cache(maxsize=64)
def render_grid(spec: GripperSpec, grid: ActionGrid, crop: int = DEFAULT_CROP) -> tuple[ActionRaster, ...]:
    """Render every action of ``grid`` (angle-major); cached per gripper.

    Raises GripperOutOfFrame if any action leaves the crop entirely; use
    :func:`render_grid_lenient` to get ``None`` in those slots instead.
    """
    return tuple(render_grid_uncached(spec, grid, crop))


@functools.lru_cache(maxsize=64)
def render_grid_lenient(spec: GripperSpec, grid: ActionGrid, crop: int = DEFAULT_CROP) -> tuple[ActionRaster | None, ...]:
    return tuple(render_actions(spec, [(t, w) for _, _, t, w in grid.actions()], crop, strict=False))
