"""Angle-width ranking with a triplet-trained affine embedding.

Each (object crop, action) pair becomes a fixed 776-d descriptor: three
16x16 block-mean channels (object, gripper mask, gripper path) plus eight
scalar cues. An affine map embeds descriptors into 128-d, trained so that
successful actions from a grasp point sit closer to each other than to
failed ones by a margin. At inference every action is scored by how much
closer it is to the mean success embedding than to the mean failure one.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DescriptorShape, Diverged, InputError, InsufficientTriplets, NoActions
from .dataset import GraspRecord, SceneSample, _crop_array
from .gripper import DEFAULT_CROP, ActionGrid, ActionRaster, GripperSpec, render_actions
from .raster import BinaryRaster, centroid

POOL = 16
N_SCALARS = 8
D_IN = 3 * POOL * POOL + N_SCALARS
D_OUT = 128
# descriptor value when the path misses the object (real values are < sqrt(2)/2)
NO_CONTACT_DISTANCE = 1.0


# --------------------------------------------------------------------------
# descriptors


def _pool(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    return arr.reshape(POOL, h // POOL, POOL, w // POOL).mean(axis=(1, 3)).ravel()


class ActionFeatures(NamedTuple):
    """Scene-independent part of a descriptor, reusable across grasp points."""

    mask: np.ndarray  # (crop, crop) bool
    path: np.ndarray
    mask_count: int
    path_count: int
    pooled: np.ndarray  # mask and path channels, 512 values
    trig: tuple[float, float]
    opening: float


def action_features(action: ActionRaster, spec: GripperSpec) -> ActionFeatures:
    mask, path = action.mask, action.path
    if mask.width % POOL or mask.height % POOL:
        raise DescriptorShape(f"crop {mask.width}x{mask.height} is not a multiple of {POOL}")
    m, p = mask.to_array(), path.to_array()
    span = spec.w_max - spec.w_min
    return ActionFeatures(
        m,
        p,
        mask.popcount(),
        path.popcount(),
        np.concatenate([_pool(m), _pool(p)]),
        (math.cos(action.theta), math.sin(action.theta)),
        (action.width - spec.w_min) / span if span > 0 else 0.0,
    )


@functools.lru_cache(maxsize=4096)
def cached_action_features(action: ActionRaster, spec: GripperSpec) -> ActionFeatures:
    return action_features(action, spec)


class ObjectFeatures(NamedTuple):
    array: np.ndarray  # (crop, crop) bool
    pooled: np.ndarray
    fill: float
    offset: float


def object_features(obj: BinaryRaster) -> ObjectFeatures:
    if obj.width % POOL or obj.height % POOL:
        raise DescriptorShape(f"crop {obj.width}x{obj.height} is not a multiple of {POOL}")
    arr = obj.to_array()
    n = obj.popcount()
    offset = 0.0
    if n:
        cx, cy = centroid(obj)
        offset = math.hypot(cx - obj.width / 2, cy - obj.height / 2) / obj.width
    return ObjectFeatures(arr, _pool(arr), n / (obj.width * obj.height), offset)


class ActionBank(NamedTuple):
    """Stacked action features, flattened for matrix-vector descriptor math."""

    shape: tuple[int, int]
    masks: np.ndarray  # (n, h*w) float 0/1
    paths: np.ndarray
    mask_count: np.ndarray
    path_count: np.ndarray
    pooled: np.ndarray  # (n, 512)
    trig: np.ndarray  # (n, 2)
    opening: np.ndarray

    def __len__(self) -> int:
        return len(self.opening)


def action_bank(acts: Sequence[ActionFeatures]) -> ActionBank:
    if not acts:
        raise NoActions("no actions to describe")
    shape = acts[0].mask.shape
    if any(a.mask.shape != shape for a in acts):
        raise DescriptorShape("actions differ in crop size")
    return ActionBank(
        shape,
        np.stack([a.mask.ravel() for a in acts]).astype(float),
        np.stack([a.path.ravel() for a in acts]).astype(float),
        np.array([a.mask_count for a in acts], dtype=float),
        np.array([a.path_count for a in acts], dtype=float),
        np.stack([a.pooled for a in acts]),
        np.array([a.trig for a in acts], dtype=float),
        np.array([a.opening for a in acts], dtype=float),
    )


@functools.lru_cache(maxsize=64)
def cached_action_bank(actions: tuple[ActionRaster, ...], spec: GripperSpec) -> ActionBank:
    return action_bank([cached_action_features(a, spec) for a in actions])


def combine_batch(obj: ObjectFeatures, acts: ActionBank | Sequence[ActionFeatures]) -> np.ndarray:
    """Descriptors of one object crop against many actions, shape (n, D_in)."""
    if not isinstance(acts, ActionBank):
        if len(acts) == 0:
            return np.empty((0, D_IN))
        acts = action_bank(acts)
    h, w = obj.array.shape
    if acts.shape != (h, w):
        raise DescriptorShape("object crop and action rasters differ in size")
    o = obj.array.ravel().astype(float)
    ys, xs = np.divmod(np.arange(h * w), w)
    # all products below are sums of small integers, hence exact
    mask_hit = acts.masks @ o
    c_count = acts.paths @ o
    sx = acts.paths @ (o * xs)
    sy = acts.paths @ (o * ys)
    hit = c_count > 0
    safe = np.where(hit, c_count, 1.0)
    cx = sx / safe + 0.5
    cy = sy / safe + 0.5
    stab = np.where(hit, np.hypot(cx - w / 2, cy - h / 2) / w, NO_CONTACT_DISTANCE)

    out = np.empty((len(acts), D_IN))
    out[:, : POOL * POOL] = obj.pooled
    out[:, POOL * POOL: 3 * POOL * POOL] = acts.pooled
    s = out[:, 3 * POOL * POOL:]
    s[:, 0] = mask_hit / acts.mask_count
    s[:, 1] = c_count / acts.path_count
    s[:, 2] = stab
    s[:, 3:5] = acts.trig
    s[:, 5] = acts.opening
    s[:, 6] = obj.fill
    s[:, 7] = obj.offset
    return out


def combine(obj: ObjectFeatures, act: ActionFeatures) -> np.ndarray:
    return combine_batch(obj, [act])[0]


def make_descriptor(object_crop: BinaryRaster, action: ActionRaster, spec: GripperSpec) -> np.ndarray:
    """776-d descriptor of one (object crop, action) pair."""
    if (object_crop.width, object_crop.height) != (action.mask.width, action.mask.height):
        raise DescriptorShape("object crop and action rasters differ in size")
    return combine(object_features(object_crop), action_features(action, spec))


# --------------------------------------------------------------------------
# model


@dataclass
class EmbeddingModel:
    weights: np.ndarray  # (D_out, D_in)
    bias: np.ndarray  # (D_out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DescriptorShape(f"weights {self.weights.shape} and bias {self.bias.shape} disagree")

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, d_in: int = D_IN, d_out: int = D_OUT, seed: int = 0) -> EmbeddingModel:
        """Uniform(-s, s) weights with s = 1/sqrt(d_in); zero bias."""
        s = 1.0 / math.sqrt(d_in)
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-s, s, size=(d_out, d_in)), np.zeros(d_out))

    def copy(self) -> EmbeddingModel:
        return EmbeddingModel(self.weights.copy(), self.bias.copy())


def embed(model: EmbeddingModel, d: np.ndarray) -> np.ndarray:
    """Embed one descriptor (D_in,) or a batch (N, D_in)."""
    d = np.asarray(d, dtype=float)
    if d.shape[-1] != model.d_in:
        raise DescriptorShape(f"descriptor has {d.shape[-1]} values, model expects {model.d_in}")
    return d @ model.weights.T + model.bias


def triplet_loss(fa: np.ndarray, fp: np.ndarray, fn: np.ndarray, alpha: float) -> float:
    """max(|fa - fp|^2 - |fa - fn|^2 + alpha, 0)."""
    fa, fp, fn = (np.asarray(v, dtype=float) for v in (fa, fp, fn))
    if not (fa.shape == fp.shape == fn.shape):
        raise DescriptorShape(f"embedding shapes differ: {fa.shape}, {fp.shape}, {fn.shape}")
    if alpha <= 0:
        raise ValueError("margin must be positive")
    dp = fa - fp
    dn = fa - fn
    return max(float(dp @ dp) - float(dn @ dn) + alpha, 0.0)


class Triplet(NamedTuple):
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def _batch_loss_grad(w: np.ndarray, a: np.ndarray, p: np.ndarray, n: np.ndarray, alpha: float):
    """Per-triplet losses and the summed weight gradient for batches (B, D_in).

    The bias cancels inside both differences, so its gradient is zero.
    """
    up = a - p
    un = a - n
    ep = up @ w.T
    en = un @ w.T
    raw = (ep * ep).sum(axis=1) - (en * en).sum(axis=1) + alpha
    active = raw > 0  # zero subgradient exactly at the hinge
    losses = np.maximum(raw, 0.0)  # keeps NaN visible to the divergence check
    grad = 2.0 * (ep[active].T @ up[active] - en[active].T @ un[active])
    return losses, grad


def triplet_loss_grad(model: EmbeddingModel, t: Triplet, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the triplet loss w.r.t. (weights, bias)."""
    vecs = [np.asarray(v, dtype=float)[None, :] for v in t]
    for v in vecs:
        if v.shape[1] != model.d_in:
            raise DescriptorShape(f"descriptor has {v.shape[1]} values, model expects {model.d_in}")
    _, grad = _batch_loss_grad(model.weights, *vecs, alpha)
    return grad, np.zeros_like(model.bias)


# --------------------------------------------------------------------------
# mining and training


@dataclass
class LabeledActions:
    """Descriptors with success labels, grouped by grasp point."""

    descriptors: np.ndarray  # (N, D_in)
    success: np.ndarray  # (N,) bool
    groups: list[np.ndarray] = field(default_factory=list)  # index arrays per grasp point

    def __len__(self) -> int:
        return len(self.success)

    @classmethod
    def concat(cls, parts: Sequence[LabeledActions]) -> LabeledActions:
        offsets = np.cumsum([0] + [len(p) for p in parts])
        return cls(
            np.concatenate([p.descriptors for p in parts]) if parts else np.zeros((0, D_IN)),
            np.concatenate([p.success for p in parts]) if parts else np.zeros(0, bool),
            [g + off for p, off in zip(parts, offsets) for g in p.groups],
        )


@functools.lru_cache(maxsize=65536)
def _snap_to_grid(theta: float, width: float, grid: ActionGrid | None) -> tuple[float, float]:
    """Undo the 6-decimal rounding of JSONL records when the grid is known."""
    if grid is None:
        return theta, width
    t = min(grid.angles, key=lambda a: abs(a - theta))
    w = min(grid.widths, key=lambda v: abs(v - width))
    return (t if abs(t - theta) < 1e-5 else theta), (w if abs(w - width) < 1e-5 else width)


def labeled_actions(
    records: Sequence[GraspRecord],
    scenes: dict[str, SceneSample],
    specs: dict[str, GripperSpec],
    crop: int = DEFAULT_CROP,
    grids: dict[str, ActionGrid] | None = None,
) -> tuple[LabeledActions, list[int]]:
    """Compute descriptors for labeled records, grouped by grasp point.

    Returns the data and, for each descriptor row, the index of its record.
    """
    groups: dict[tuple[str, str, float, float], list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault((r.scene_id, r.gripper_id, r.x, r.y), []).append(i)

    feature_cache: dict[tuple[str, float, float], ActionFeatures] = {}
    mask_cache: dict[str, np.ndarray] = {}
    bank_cache: dict[tuple, ActionBank] = {}
    rows: list[np.ndarray] = []
    labels: list[bool] = []
    order: list[int] = []
    group_idx: list[np.ndarray] = []
    for (scene_id, gripper_id, x, y), members in groups.items():
        if scene_id not in scenes:
            raise InputError(f"labels reference unknown scene {scene_id!r}")
        if gripper_id not in specs:
            raise InputError(f"labels reference unknown gripper {gripper_id!r}")
        spec = specs[gripper_id]
        grid = (grids or {}).get(gripper_id)
        if scene_id not in mask_cache:
            mask_cache[scene_id] = scenes[scene_id].object_mask.to_array()
        arr, _ = _crop_array(mask_cache[scene_id], (x, y), crop)
        obj = object_features(BinaryRaster.from_array(arr))

        wanted = []
        for i in members:
            key = (gripper_id, *_snap_to_grid(records[i].theta, records[i].width, grid))
            if key not in feature_cache:
                wanted.append(key)
        wanted = list(dict.fromkeys(wanted))
        rendered = render_actions(spec, [(t, w) for _, t, w in wanted], crop, strict=False)
        for key, action in zip(wanted, rendered):
            if action is None:
                raise InputError(f"action {key} renders outside the {crop}px crop")
            feature_cache[key] = action_features(action, spec)

        start = len(labels)
        keys = [(gripper_id, *_snap_to_grid(records[i].theta, records[i].width, grid)) for i in members]
        kt = tuple(keys)
        if kt not in bank_cache:
            bank_cache[kt] = action_bank([feature_cache[k] for k in keys])
        rows.append(combine_batch(obj, bank_cache[kt]))
        for i in members:
            labels.append(records[i].success)
            order.append(i)
        group_idx.append(np.arange(start, len(labels)))
    desc = np.concatenate(rows) if rows else np.zeros((0, D_IN))
    return LabeledActions(desc, np.asarray(labels, dtype=bool), group_idx), order


def mine_triplet_indices(data: LabeledActions, count: int, seed: int) -> np.ndarray:
    """Sample (anchor, positive, negative) row indices, shape (count, 3).

    A grasp point is drawn uniformly among those with >= 2 successes and
    >= 1 failure; anchor and positive are distinct successes, the negative a
    failure, all from that point.
    """
    eligible = []
    for g in data.groups:
        pos = g[data.success[g]]
        neg = g[~data.success[g]]
        if len(pos) >= 2 and len(neg) >= 1:
            eligible.append((pos, neg))
    if not eligible:
        raise InsufficientTriplets("no grasp point has two successes and a failure")
    rng = np.random.default_rng(seed)
    out = np.empty((count, 3), dtype=np.int64)
    picks = rng.integers(len(eligible), size=count)
    for i, k in enumerate(picks):
        pos, neg = eligible[k]
        a, p = rng.choice(len(pos), size=2, replace=False)
        out[i] = (pos[a], pos[p], neg[rng.integers(len(neg))])
    return out


def mine_triplets(data: LabeledActions, count: int, seed: int) -> list[Triplet]:
    d = data.descriptors
    return [Triplet(d[a], d[p], d[n]) for a, p, n in mine_triplet_indices(data, count, seed)]


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0 or self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")


def train(
    triplets: Sequence[Triplet] | tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: TrainConfig,
    d_out: int = D_OUT,
) -> tuple[EmbeddingModel, list[float]]:
    """Plain minibatch SGD on the mean triplet loss.

    ``triplets`` is a list of Triplet or a tuple of stacked (A, P, N) arrays.
    Returns the model and the mean loss of each epoch (measured on the batches
    before their updates).
    """
    if isinstance(triplets, tuple) and len(triplets) == 3 and isinstance(triplets[0], np.ndarray) and triplets[0].ndim == 2:
        a_all, p_all, n_all = (np.asarray(x, dtype=float) for x in triplets)
    else:
        if not triplets:
            raise InsufficientTriplets("no triplets to train on")
        a_all = np.stack([t.anchor for t in triplets])
        p_all = np.stack([t.positive for t in triplets])
        n_all = np.stack([t.negative for t in triplets])
    n_total = len(a_all)
    if n_total == 0:
        raise InsufficientTriplets("no triplets to train on")

    model = EmbeddingModel.init(a_all.shape[1], d_out, cfg.seed)
    w = model.weights
    rng = np.random.default_rng(cfg.seed + 1)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_total)
        total = 0.0
        for start in range(0, n_total, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                losses, grad = _batch_loss_grad(w, a_all[idx], p_all[idx], n_all[idx], cfg.margin)
            total += float(losses.sum())
            w -= cfg.learning_rate * grad / len(idx)
            if not np.isfinite(total):
                raise Diverged(epoch)
        if not np.all(np.isfinite(w)):
            raise Diverged(epoch, "non-finite weights")
        trace.append(total / n_total)
    return model, trace


# --------------------------------------------------------------------------
# scoring and selection


def prototype_score(model: EmbeddingModel, d: np.ndarray, mu_pos: np.ndarray, mu_neg: np.ndarray) -> float | np.ndarray:
    """|e - mu_neg|^2 - |e - mu_pos|^2 for e = embed(d); accepts a batch."""
    e = embed(model, d)
    mu_pos, mu_neg = np.asarray(mu_pos, dtype=float), np.asarray(mu_neg, dtype=float)
    if mu_pos.shape != (model.d_out,) or mu_neg.shape != (model.d_out,):
        raise DescriptorShape("prototype dimension does not match the model")
    dn = e - mu_neg
    dp = e - mu_pos
    s = (dn * dn).sum(axis=-1) - (dp * dp).sum(axis=-1)
    return float(s) if np.ndim(s) == 0 else s


def select_from_scores(scores: Sequence[float], actions: Sequence[ActionRaster]) -> int:
    """Argmax score; ties go to the smaller width, then the smaller angle."""
    if len(actions) == 0:
        raise NoActions("no actions to select from")
    return min(range(len(actions)), key=lambda i: (-scores[i], actions[i].width, actions[i].theta, i))


@dataclass
class AwpModel:
    """Trained embedding with its success/failure prototypes and provenance."""

    model: EmbeddingModel
    mu_pos: np.ndarray
    mu_neg: np.ndarray
    gripper_id: str
    margin: float = 0.2
    seed: int = 0
    epochs: int = 0
    loss_trace: list[float] = field(default_factory=list)

    # gripper_id value that accepts any gripper at planning time
    ANY = "*"

    def accepts(self, gripper_id: str) -> bool:
        return self.gripper_id == self.ANY or gripper_id in self.gripper_id.split(",")

    def scores(self, descriptors: np.ndarray) -> np.ndarray:
        return np.atleast_1d(prototype_score(self.model, descriptors, self.mu_pos, self.mu_neg))


def select_action(
    awp: AwpModel,
    object_crop: BinaryRaster,
    actions: Sequence[ActionRaster],
    spec: GripperSpec,
) -> tuple[int, float, float, float]:
    """Pick the best-scoring action; returns (index, theta, width, score)."""
    if len(actions) == 0:
        raise NoActions("no actions to select from")
    obj = object_features(object_crop)
    d = combine_batch(obj, cached_action_bank(tuple(actions), spec))
    scores = awp.scores(d)
    i = select_from_scores(scores, actions)
    return i, actions[i].theta, actions[i].width, float(scores[i])


def prototypes(model: EmbeddingModel, data: LabeledActions) -> tuple[np.ndarray, np.ndarray]:
    e = embed(model, data.descriptors)
    if not data.success.any() or data.success.all():
        raise InsufficientTriplets("prototypes need both successes and failures")
    return e[data.success].mean(axis=0), e[~data.success].mean(axis=0)


def fit_awp(data: LabeledActions, gripper_id: str, cfg: TrainConfig, n_triplets: int) -> AwpModel:
    """Mine triplets, train the embedding and compute prototypes."""
    idx = mine_triplet_indices(data, n_triplets, cfg.seed)
    d = data.descriptors
    model, trace = train((d[idx[:, 0]], d[idx[:, 1]], d[idx[:, 2]]), cfg)
    mu_pos, mu_neg = prototypes(model, data)
    return AwpModel(model, mu_pos, mu_neg, gripper_id, cfg.margin, cfg.seed, cfg.epochs, trace)


# --------------------------------------------------------------------------
# model files


def save_model(awp: AwpModel, path: str | Path) -> tuple[Path, Path]:
    """Write ``GLW1 <D_in> <D_out>`` + little-endian float64 weights/bias, and a JSON sidecar."""
    path = Path(path)
    m = awp.model
    header = f"GLW1 {m.d_in} {m.d_out}\n".encode("ascii")
    body = np.concatenate([m.weights.ravel(), m.bias]).astype("<f8").tobytes()
    path.write_bytes(header + body)
    meta = {
        "gripper_id": awp.gripper_id,
        "margin": awp.margin,
        "seed": awp.seed,
        "epochs": awp.epochs,
        "prototypes": {"positive": awp.mu_pos.tolist(), "negative": awp.mu_neg.tolist()},
        "loss_trace": awp.loss_trace,
    }
    meta_path = path.with_name(path.name + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return path, meta_path


def load_weights(path: str | Path) -> EmbeddingModel:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    try:
        magic, d_in, d_out = buf[:nl].decode("ascii").split()
        d_in, d_out = int(d_in), int(d_out)
    except (ValueError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: bad model header") from exc
    if magic != "GLW1":
        raise InputError(f"{path}: unknown model format {magic!r}")
    body = buf[nl + 1:]
    n = d_out * d_in + d_out
    if len(body) != 8 * n:
        raise InputError(f"{path}: expected {n} float64 values, found {len(body) / 8:g}")
    vals = np.frombuffer(body, dtype="<f8").astype(float)
    return EmbeddingModel(vals[: d_out * d_in].reshape(d_out, d_in), vals[d_out * d_in:])


def load_model(path: str | Path) -> AwpModel:
    path = Path(path)
    model = load_weights(path)
    meta_path = path.with_name(path.name + ".meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        return AwpModel(
            model,
            np.asarray(meta["prototypes"]["positive"], dtype=float),
            np.asarray(meta["prototypes"]["negative"], dtype=float),
            str(meta["gripper_id"]),
            float(meta["margin"]),
            int(meta["seed"]),
            int(meta["epochs"]),
            list(meta.get("loss_trace", [])),
        )
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"{meta_path}: {exc}") from exc

