"""``multigrasp`` command-line entry point.

Every command that writes an artifact also writes a run manifest next to it
(``<out>.manifest.json``, or ``manifest.json`` inside an output directory).
``multigrasp rerun <manifest>`` replays the recorded arguments.

Exit codes: 0 ok, 2 usage, 3 bad input, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from . import JSONL_SCHEMA_VERSION, MODEL_FORMAT, __version__
from .awp import (
    AwpModel,
    LabeledActions,
    TrainConfig,
    embed,
    fit_awp,
    labeled_actions,
    load_model,
    save_model,
)
from .dataset import (
    emit_records,
    load_scene_dir,
    read_records,
    relabel_corpus,
    synth_corpus,
    write_scene,
)
from .errors import AlignmentError, InputError, ModelRequired, MultigraspError
from .evaluation import ablation_run, emit_ablation, emit_report, evaluate_success_rate
from .gripper import (
    BUILTIN_GRIPPERS,
    DEFAULT_CROP,
    DEFAULT_NA,
    DEFAULT_NW,
    GripperSpec,
    make_action_grid,
    render_grid_uncached,
)
from .planner import DEFAULT_TOP_K, Grasp, PlanConfig, plan_batch
from .raster import write_pgm
from .rules import DEFAULT_TAU, RuleConfig

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3, 4
MANIFEST_SUFFIX = ".manifest.json"

# destinations whose values are filesystem paths (made absolute in manifests)
_PATH_ARGS = {"out", "scenes", "labels", "model", "scene_dir", "plans", "holdout"}
# comma-separated lists of paths or bundled gripper names
_LIST_ARGS = {"gripper", "spec", "variants"}
# arguments that never change outputs and stay out of manifests
_VOLATILE = {"threads", "json_errors", "func", "command", "sub"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# manifests


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(path: Path) -> list[list[str]]:
    if path.is_dir():
        return [[str(p), sha256_file(p)] for p in sorted(path.iterdir()) if p.is_file() and not p.name.endswith(".json")]
    if path.is_file():
        return [[str(path), sha256_file(path)]]
    return []


def _gripper_digest(ref: str) -> list[str]:
    p = Path(ref)
    if p.exists():
        return [str(p), sha256_file(p)]
    data = resources.files("multigrasp.data.grippers").joinpath(f"{ref}.gspec").read_bytes()
    return [f"builtin:{ref}", hashlib.sha256(data).hexdigest()]


def _absolute(ref: str) -> str:
    p = Path(ref)
    return str(p.resolve()) if (p.exists() or os.sep in ref or ref.endswith((".gspec", ".jsonl"))) else ref


@dataclass
class Run:
    """What a command read and wrote, for its manifest."""

    command: list[str]
    args: argparse.Namespace
    inputs: list[str]
    outputs: list[Path]
    manifest_path: Path


def canonical_argv(command: list[str], args: argparse.Namespace) -> list[str]:
    argv = list(command)
    for key, value in sorted(vars(args).items()):
        if key in _VOLATILE or value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        else:
            argv += [flag, str(value)]
    return argv


def _normalize_args(args: argparse.Namespace) -> argparse.Namespace:
    out = argparse.Namespace(**vars(args))
    for key, value in vars(args).items():
        if value is None:
            continue
        if key in _PATH_ARGS:
            setattr(out, key, str(Path(value).resolve()))
        elif key in _LIST_ARGS:
            setattr(out, key, ",".join(_absolute(v) for v in str(value).split(",")))
    return out


def write_manifest(run: Run) -> Path:
    args = _normalize_args(run.args)
    digests: list[list[str]] = []
    for ref in run.inputs:
        if ref.startswith("gripper:"):
            digests.append(_gripper_digest(ref[len("gripper:"):]))
        else:
            digests += _digests(Path(ref).resolve())
    manifest = {
        "command": " ".join(run.command),
        "argv": canonical_argv(run.command, args),
        "arguments": {
            k: v for k, v in sorted(vars(args).items()) if k not in _VOLATILE and v is not None
        },
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "formats": {"model": MODEL_FORMAT, "jsonl_schema": JSONL_SCHEMA_VERSION},
        "input_digests": digests,
        "output_digests": [d for p in run.outputs for d in _digests(p.resolve())],
    }
    run.manifest_path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return run.manifest_path


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + MANIFEST_SUFFIX)


def _dir_manifest(out: Path) -> Path:
    return out / "manifest.json"


# --------------------------------------------------------------------------
# helpers


def _specs(refs: str) -> list[GripperSpec]:
    from .gripper import resolve_gripper

    specs = [resolve_gripper(r.strip()) for r in refs.split(",") if r.strip()]
    if not specs:
        raise InputError("no gripper given")
    return specs


def _gripper_inputs(refs: str) -> list[str]:
    return [f"gripper:{r.strip()}" for r in refs.split(",") if r.strip()]


def _rule(args) -> RuleConfig:
    return RuleConfig(tau_stable=args.tau)


def _threads(args) -> int:
    t = getattr(args, "threads", None)
    return max(1, t if t else (os.cpu_count() or 1))


def _scenes_for_labels(labels: Path, scenes: str | None) -> Path:
    """Scene directory given explicitly or recorded by the relabel run."""
    if scenes:
        return Path(scenes)
    mf = _file_manifest(labels)
    if mf.exists():
        try:
            return Path(json.loads(mf.read_text(encoding="utf-8"))["arguments"]["scenes"])
        except (KeyError, ValueError) as exc:
            raise InputError(f"{mf}: no scene directory recorded") from exc
    raise InputError(f"{labels}: pass --scenes (no relabel manifest found)")


def _labeled(records, scene_dir: Path, specs: dict[str, GripperSpec], args) -> tuple[LabeledActions, list[int]]:
    """Descriptors for ``records`` plus the record index of each descriptor row."""
    scenes = {s.scene_id: s for s in load_scene_dir(scene_dir)}
    grids = {gid: make_action_grid(sp, args.na, args.nw) for gid, sp in specs.items()}
    return labeled_actions(records, scenes, specs, args.crop, grids)


def _specs_for_records(records, given: str | None) -> dict[str, GripperSpec]:
    specs = {s.id: s for s in _specs(given)} if given else {}
    for gid in sorted({r.gripper_id for r in records}):
        if gid not in specs:
            if gid not in BUILTIN_GRIPPERS:
                raise InputError(f"labels use gripper {gid!r}; pass its spec with --gripper")
            specs.update({s.id: s for s in _specs(gid)})
    return specs


def _num(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# commands


def cmd_gripper_render(args) -> Run:
    spec = _specs(args.spec)[0]
    grid = make_action_grid(spec, args.na, args.nw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    actions = render_grid_uncached(spec, grid, args.size)
    rows = []
    for (j, k, theta, width), a in zip(grid.actions(), actions):
        stem = f"{spec.id}_a{j:02d}_w{k:02d}"
        write_pgm(a.mask, out / f"{stem}_mask.pgm")
        write_pgm(a.path, out / f"{stem}_path.pgm")
        rows.append(f"{stem}\t{_num(theta)}\t{_num(width)}\n")
    (out / "actions.tsv").write_text("name\ttheta\twidth\n" + "".join(rows), encoding="utf-8")
    return Run(["gripper", "render"], args, _gripper_inputs(args.spec), [out], _dir_manifest(out))


def cmd_synth(args) -> Run:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scene in synth_corpus(args.n, args.seed):
        write_scene(scene, out)
    return Run(["synth"], args, [], [out], _dir_manifest(out))


def cmd_relabel(args) -> Run:
    spec = _specs(args.gripper)[0]
    grid = make_action_grid(spec, args.na, args.nw)
    scenes = load_scene_dir(args.scenes)
    records = relabel_corpus(scenes, spec, grid, _rule(args), args.crop, _threads(args))
    if args.success_only:
        records = [r for r in records if r.success]
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        emit_records(records, fh)
    return Run(["relabel"], args, [args.scenes] + _gripper_inputs(args.gripper), [out], _file_manifest(out))


def cmd_awp_train(args) -> Run:
    labels = Path(args.labels)
    records = read_records(labels)
    if not records:
        raise InputError(f"{labels}: no records")
    specs = _specs_for_records(records, args.gripper)
    scene_dir = _scenes_for_labels(labels, args.scenes)
    data, _ = _labeled(records, scene_dir, specs, args)
    cfg = TrainConfig(args.margin, args.lr, args.epochs, args.batch, args.seed)
    awp = fit_awp(data, ",".join(sorted({r.gripper_id for r in records})), cfg, args.triplets)
    out = Path(args.out)
    model_path, meta_path = save_model(awp, out)
    inputs = [str(labels), str(scene_dir)] + _gripper_inputs(args.gripper or "")
    return Run(["awp", "train"], args, inputs, [model_path, meta_path], _file_manifest(out))


def cmd_awp_export(args) -> Run:
    awp = load_model(args.model)
    labels = Path(args.labels)
    records = read_records(labels)
    specs = _specs_for_records(records, args.gripper)
    scene_dir = _scenes_for_labels(labels, args.scenes)
    data, order = _labeled(records, scene_dir, specs, args)
    emb = embed(awp.model, data.descriptors)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "gripper_id", "x", "y", "theta", "width", "success"] + [f"e{i}" for i in range(emb.shape[1])])
        for i, e in zip(order, emb):
            r = records[i]
            w.writerow([r.scene_id, r.gripper_id, _num(r.x), _num(r.y), _num(r.theta), _num(r.width), int(r.success)] + [_num(v) for v in e])
    inputs = [args.model, args.model + ".meta.json", str(labels), str(scene_dir)]
    return Run(["awp", "export-embeddings"], args, inputs, [out], _file_manifest(out))


def _grasp_json(scene_id: str, gripper_id: str, g: Grasp | None, mode: str, elapsed: float, error=None) -> str:
    d: dict = {"scene_id": scene_id, "gripper_id": gripper_id}
    for key in ("x", "y", "theta", "width", "quality", "score"):
        d[key] = None if g is None else getattr(g, key)
    d["mode"] = mode
    d["elapsed_ms"] = round(elapsed, 3)
    if error is not None:
        d["error"] = f"{type(error).__name__}: {error}"
    return json.dumps(d)


def cmd_plan(args) -> Run:
    spec = _specs(args.gripper)[0]
    model: AwpModel | None = None
    if args.mode == "awp":
        if not args.model:
            raise ModelRequired("--mode awp needs --model")
        model = load_model(args.model)
    cfg = PlanConfig(args.mode, args.top_k, args.crop, (args.na, args.nw), _rule(args))
    scenes = load_scene_dir(args.scene_dir)
    results = plan_batch(scenes, spec, cfg, model, _threads(args))
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for s, r in zip(scenes, results):
            fh.write(_grasp_json(s.scene_id, spec.id, r.grasp, args.mode, r.elapsed_ms, r.error) + "\n")
    inputs = [args.scene_dir] + _gripper_inputs(args.gripper) + ([args.model] if args.model else [])
    return Run(["plan"], args, inputs, [out], _file_manifest(out))


def _read_plans(path: Path, gripper_id: str) -> list[dict]:
    plans = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            d["scene_id"]
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{n}: bad plan line") from exc
        if d.get("gripper_id", gripper_id) == gripper_id:
            plans.append(d)
    return plans


def cmd_eval(args) -> Run:
    spec = _specs(args.gripper)[0]
    plans = _read_plans(Path(args.plans), spec.id)
    scenes = {s.scene_id: s for s in load_scene_dir(args.scenes)}
    missing = [p["scene_id"] for p in plans if p["scene_id"] not in scenes]
    if missing:
        raise AlignmentError(f"plans reference unknown scenes: {', '.join(missing[:5])}")
    grasps = [
        None if p.get("x") is None else Grasp(p["x"], p["y"], p["theta"], p["width"], p.get("quality", 0.0), p.get("score", 0.0))
        for p in plans
    ]
    report = evaluate_success_rate(
        grasps,
        [scenes[p["scene_id"]] for p in plans],
        spec,
        _rule(args),
        args.crop,
        [float(p.get("elapsed_ms", 0.0)) for p in plans],
    )
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        emit_report([report], fh)
    return Run(["eval"], args, [args.plans, args.scenes] + _gripper_inputs(args.gripper), [out], _file_manifest(out))


def cmd_ablate(args) -> Run:
    eval_specs = _specs(args.gripper)
    variants = []
    inputs = []
    for ref in args.variants.split(","):
        labels = Path(ref.strip())
        records = read_records(labels)
        specs = _specs_for_records(records, args.gripper)
        scene_dir = _scenes_for_labels(labels, args.scenes)
        variants.append((labels.stem, _labeled(records, scene_dir, specs, args)[0]))
        inputs += [str(labels), str(scene_dir)]
    holdout = load_scene_dir(args.holdout)
    cfg = TrainConfig(args.margin, args.lr, args.epochs, args.batch, args.seed)
    plan_cfg = PlanConfig("awp", args.top_k, args.crop, (args.na, args.nw), _rule(args))
    rows = ablation_run(variants, eval_specs, holdout, cfg, args.triplets, plan_cfg, _threads(args))
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        emit_ablation(rows, fh)
    inputs += [args.holdout] + _gripper_inputs(args.gripper)
    return Run(["ablate"], args, inputs, [out], _file_manifest(out))


def cmd_rerun(args) -> Run | None:
    path = Path(args.manifest)
    try:
        argv = json.loads(path.read_text(encoding="utf-8"))["argv"]
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: not a run manifest") from exc
    if not argv or argv[0] == "rerun":
        raise InputError(f"{path}: manifest has no replayable command")
    threads = getattr(args, "threads", None)
    code = main(list(argv) + (["--threads", str(threads)] if threads else []))
    if code:
        raise _Exit(code)
    return None


class _Exit(Exception):
    def __init__(self, code: int):
        self.code = code


# --------------------------------------------------------------------------
# parser


def _grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--crop", type=int, default=DEFAULT_CROP)
    p.add_argument("--na", type=int, default=DEFAULT_NA)
    p.add_argument("--nw", type=int, default=DEFAULT_NW)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--triplets", type=int, default=20000, help="number of mined triplets")
    p.add_argument("--seed", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS, help="report errors as JSON on stderr")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default: all CPUs)")

    parser = _Parser(prog="multigrasp", description="Multi-gripper grasp relabeling, planning and evaluation.", parents=[common])
    parser.add_argument(
        "--version",
        action="version",
        version=f"multigrasp {__version__} (model format {MODEL_FORMAT}, jsonl schema {JSONL_SCHEMA_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def add(subs, name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help, parents=[common])
        p.set_defaults(func=func)
        return p

    g = sub.add_parser("gripper", help="gripper utilities")
    gsub = g.add_subparsers(dest="sub", parser_class=_Parser, metavar="SUBCOMMAND")
    gsub.required = True
    p = add(gsub, "render", cmd_gripper_render, "write mask/path PGMs for every action")
    p.add_argument("--spec", required=True, help="gripper spec file or bundled name")
    p.add_argument("--na", type=int, default=DEFAULT_NA)
    p.add_argument("--nw", type=int, default=DEFAULT_NW)
    p.add_argument("--size", type=int, default=DEFAULT_CROP)
    p.add_argument("--out", required=True)

    p = add(sub, "synth", cmd_synth, "generate synthetic scenes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add(sub, "relabel", cmd_relabel, "label every action at every grasp point")
    p.add_argument("--scenes", required=True)
    p.add_argument("--gripper", required=True)
    _grid_flags(p)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--success-only", action="store_true")
    p.add_argument("--out", required=True)

    a = sub.add_parser("awp", help="embedding ranker")
    asub = a.add_subparsers(dest="sub", parser_class=_Parser, metavar="SUBCOMMAND")
    asub.required = True
    p = add(asub, "train", cmd_awp_train, "train an embedding model from labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--gripper", help="spec file(s) or bundled names, comma separated")
    p.add_argument("--scenes", help="scene directory (default: from the labels' relabel manifest)")
    p.add_argument("--out", required=True)
    _grid_flags(p)
    _train_flags(p)

    p = add(asub, "export-embeddings", cmd_awp_export, "write one embedding per labeled action as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--gripper")
    p.add_argument("--scenes")
    p.add_argument("--out", required=True)
    _grid_flags(p)

    p = add(sub, "plan", cmd_plan, "plan one grasp per scene")
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--gripper", required=True)
    p.add_argument("--mode", choices=("oracle", "awp"), required=True)
    p.add_argument("--model")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    _grid_flags(p)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--out", required=True)

    p = add(sub, "eval", cmd_eval, "success-rate report for planned grasps")
    p.add_argument("--plans", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--gripper", required=True)
    p.add_argument("--crop", type=int, default=DEFAULT_CROP)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--out", required=True)

    p = add(sub, "ablate", cmd_ablate, "train one model per label set and compare held-out success")
    p.add_argument("--variants", required=True, help="comma-separated label files")
    p.add_argument("--gripper", required=True, help="grippers to evaluate with, comma separated")
    p.add_argument("--holdout", required=True)
    p.add_argument("--scenes", help="scene directory for all variants (default: from each relabel manifest)")
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    _grid_flags(p)
    _train_flags(p)
    p.add_argument("--out", required=True)

    p = add(sub, "rerun", cmd_rerun, "replay a run manifest")
    p.add_argument("manifest")
    return parser


def _report_error(exc: BaseException, code: int, json_errors: bool) -> None:
    if json_errors:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    elif isinstance(exc, UsageError):
        sys.stderr.write(f"{exc}\n")
    else:
        sys.stderr.write(f"multigrasp: error: {exc}\n")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_errors = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _report_error(exc, EXIT_USAGE, json_errors)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        run = args.func(args)
        if run is not None:
            write_manifest(run)
    except _Exit as exc:
        return exc.code
    except UsageError as exc:
        _report_error(exc, EXIT_USAGE, json_errors)
        return EXIT_USAGE
    except MultigraspError as exc:
        _report_error(exc, exc.exit_code, json_errors)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        _report_error(exc, EXIT_INPUT, json_errors)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
