"""Command-line interface.

Exit codes: 0 success, 2 bad input or validation error, 3 pipeline failure,
4 evaluation mismatch. ``RIGID_ACCUM_SEED`` overrides any configured seed.

Config files use flat ``key = value`` lines grouped into ``[scene]`` and
``[pipeline]`` sections.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import shutil
import struct
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import FlowField, Frame, FrameSequence
from .errors import AccumError, ConfigError, FormatError, SizeMismatch
from .io import atomic_write, encode_ply, read_bundle, read_flow_dir, write_bundle, write_flow_dir, write_poses
from .metrics import ECDF, average_metrics, eval_region_mask, flow_metrics, format_report, to_json
from .pipeline import PipelineConfig, accumulate_points, run
from .sim import SceneSpec, crossing_scene, default_scene, generate_scene

log = logging.getLogger("rigid_accum")

EXIT_OK, EXIT_INPUT, EXIT_PIPELINE, EXIT_EVAL = 0, 2, 3, 4
SEED_ENV = "RIGID_ACCUM_SEED"
SCENES = {"default": default_scene, "crossing": crossing_scene}


class CliError(Exception):
    def __init__(self, msg, code=EXIT_INPUT):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------- helpers

def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file {p} not found")
        try:
            cp.read_string(p.read_text(), source=str(p))
        except configparser.Error as e:
            raise CliError(f"cannot parse {p}: {e}") from None
    return cp


def env_seed():
    v = os.environ.get(SEED_ENV)
    if v is None or v.strip() == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {v!r}") from None


def scene_from_config(cp, overrides: dict) -> SceneSpec:
    sect = dict(cp["scene"]) if cp.has_section("scene") else {}
    sect.update({k: v for k, v in overrides.items() if v is not None})
    preset = str(sect.pop("scene", "default"))
    if preset not in SCENES:
        raise CliError(f"unknown scene preset {preset!r}; choose from {sorted(SCENES)}")
    spec = SCENES[preset]()
    for k, v in sect.items():
        if not hasattr(spec, k) or k in ("walls", "buildings", "parked", "movers"):
            raise CliError(f"unknown scene option {k!r}")
        cur = getattr(spec, k)
        try:
            if isinstance(cur, bool):
                v = str(v).lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, int):
                v = int(v)
            elif isinstance(cur, float):
                v = float(v)
        except ValueError:
            raise CliError(f"bad value for scene option {k}: {v!r}") from None
        setattr(spec, k, v)
    try:
        spec.validate()
    except ValueError as e:
        raise CliError(f"invalid scene: {e}") from None
    return spec


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths) -> dict:
    """Per-file git-style blob hashes plus a combined digest over
    ``relative path + blob hash`` lines in sorted order."""
    files = {}
    for root in paths:
        root = Path(root)
        items = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
        for p in items:
            rel = p.name if root.is_file() else str(p.relative_to(root))
            files[f"{root.name}/{rel}" if not root.is_file() else rel] = git_blob_hash(p)
    h = hashlib.sha1("".join(f"{k} {v}\n" for k, v in sorted(files.items())).encode())
    return {"combined": h.hexdigest(), "files": files}


def write_manifest(out_dir, command, config, inputs, outputs, timings):
    m = {
        "tool": "rigid-accum",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "input_hash": content_hash(inputs) if inputs else None,
        "timings": timings,
    }
    atomic_write(Path(out_dir) / "manifest.json", json.dumps(m, indent=2, sort_keys=True).encode())
    return m


def write_labels(path, labels):
    lab = np.asarray(labels, dtype="<i4")
    atomic_write(path, struct.pack("<I", len(lab)) + lab.tobytes())


def read_labels(path):
    buf = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", buf)
    if len(buf) - 4 != 4 * n:
        raise SizeMismatch(f"{path}: header says {n} labels")
    return np.frombuffer(buf, "<i4", n, 4).astype(np.int64)


def _staging(out: Path):
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _publish(stage: Path, out: Path):
    if out.exists():
        shutil.rmtree(out)
    os.replace(stage, out)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    cp = read_config(args.spec)
    seed = env_seed()
    spec = scene_from_config(cp, {"scene": args.scene, "seed": seed if seed is not None else args.seed,
                                  "num_frames": args.frames})
    out = Path(args.out)
    stage = _staging(out)
    try:
        res = generate_scene(spec)
        meta = {"scene": {k: v for k, v in vars(spec).items()
                          if k not in ("walls", "buildings", "parked", "movers")}}
        write_bundle(stage, res.sequence, res.gt_ego, res.tracks, meta)
        outputs = [p.relative_to(stage) for p in stage.rglob("*") if p.is_file()]
        write_manifest(stage, "simulate", meta["scene"], [args.spec] if args.spec else [], outputs,
                       {"total": time.perf_counter() - t0})
        _publish(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    print(f"wrote {spec.num_frames} frames to {out}")
    return EXIT_OK


def load_pipeline_config(args) -> PipelineConfig:
    cp = read_config(args.config)
    values = dict(cp["pipeline"]) if cp.has_section("pipeline") else {}
    if args.profile:
        values["profile"] = args.profile
    values["threads"] = str(args.threads if args.threads else (os.cpu_count() or 1))
    seed = env_seed()
    if seed is not None:
        values["seed"] = str(seed)
    try:
        return PipelineConfig.from_mapping(values)
    except ConfigError as e:
        raise CliError(str(e)) from None


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    cfg = load_pipeline_config(args)
    bundle_dir = Path(args.bundle)
    try:
        bundle = read_bundle(bundle_dir)
    except (FileNotFoundError, FormatError) as e:
        raise CliError(f"cannot read bundle: {e}") from None
    seq = bundle.sequence
    out = Path(args.out)
    stage = _staging(out)
    try:
        try:
            res = run(seq, cfg)
        except (AccumError, np.linalg.LinAlgError) as e:
            raise CliError(f"pipeline failed: {type(e).__name__}: {e}", EXIT_PIPELINE) from None
        write_flow_dir(stage / "flow", res.flow, seq.frames[0].index)
        write_poses(stage / "ego_poses.txt", res.ego, seq.frames[0].index)
        (stage / "labels").mkdir()
        for f, lab in zip(seq.frames, res.labeling.labels):
            write_labels(stage / "labels" / f"{f.index:05d}.lab", lab)
        diag = {"diagnostics": res.diagnostics, "n_clusters": res.labeling.n_clusters}
        atomic_write(stage / "diagnostics.json",
                     json.dumps(diag, indent=2, sort_keys=True, default=_jsonable).encode())
        outputs = [p.relative_to(stage) for p in stage.rglob("*") if p.is_file()]
        inputs = [bundle_dir] + ([Path(args.config)] if args.config else [])
        write_manifest(stage, "run", cfg.to_dict(), inputs, outputs,
                       {**res.diagnostics["timings"], "total": time.perf_counter() - t0})
        _publish(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    print(f"wrote flow for {len(seq.frames) - 1} source frames to {out}")
    return EXIT_OK


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _scene_eval(pred_dir: Path, gt_dir: Path, args):
    try:
        bundle = read_bundle(gt_dir)
    except (FileNotFoundError, FormatError) as e:
        raise CliError(f"cannot read ground truth: {e}") from None
    seq = bundle.sequence
    if seq.gt_flow is None:
        raise CliError(f"{gt_dir} has no flow directory")
    sizes = [len(f) for f in seq.frames]
    if not (pred_dir / "flow").is_dir():
        raise CliError(f"{pred_dir} has no flow directory")
    n_pred = len(list((pred_dir / "flow").glob("*.flow")))
    if n_pred != len(sizes) - 1:
        raise CliError(f"{n_pred} predicted flow files for {len(sizes) - 1} source frames", EXIT_EVAL)
    try:
        pred = read_flow_dir(pred_dir / "flow", sizes)
    except (SizeMismatch, FileNotFoundError) as e:
        raise CliError(f"prediction does not match ground truth: {e}", EXIT_EVAL) from None
    masks = {"static": [], "dynamic": []}
    for i in range(1, len(seq.frames)):
        f = seq.frames[i]
        region = eval_region_mask(f.points + seq.gt_flow[i], args.region, args.ground_z)
        masks["static"].append(region & ~f.dynamic)
        masks["dynamic"].append(region & f.dynamic)
    rows, errs = {}, {}
    for name, m in masks.items():
        if sum(int(x.sum()) for x in m):
            rows[name] = flow_metrics(pred, seq.gt_flow, m)
            errs[name] = np.concatenate([np.linalg.norm(pred[i] - seq.gt_flow[i], axis=1)[m[i - 1]]
                                         for i in range(1, len(seq.frames))])
    if not rows:
        raise CliError(f"{gt_dir}: no points inside the evaluation region", EXIT_EVAL)
    return rows, errs


def cmd_eval(args) -> int:
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    if not pred_root.is_dir() or not gt_root.is_dir():
        raise CliError("prediction and ground-truth directories must exist")
    if args.per_scene:
        names = sorted(p.name for p in gt_root.iterdir() if (p / "frames").is_dir())
        if not names:
            raise CliError(f"no scenes under {gt_root}")
        per = [_scene_eval(pred_root / n, gt_root / n, args) for n in names]
        rows = {}
        for key in ("static", "dynamic"):
            items = [r[key] for r, _ in per if key in r]
            if items:
                rows[key] = average_metrics(items)
        errs = {k: np.concatenate([e[k] for _, e in per if k in e]) for k in ("static", "dynamic")
                if any(k in e for _, e in per)}
    else:
        rows, errs = _scene_eval(pred_root, gt_root, args)
    report = format_report(rows)
    print(report, end="")
    if args.json:
        atomic_write(args.json, to_json(rows).encode())
    if args.ecdf:
        key = args.ecdf.replace("epe_", "")
        if key not in errs:
            raise CliError(f"no points for ECDF of {args.ecdf!r}")
        table = ECDF(errs[key]).table()
        print(f"# ecdf {args.ecdf}: x F(x)")
        for x, y in table:
            print(f"{x:.9g} {y:.9g}")
    return EXIT_OK


def cmd_export(args) -> int:
    bundle_dir, result_dir = Path(args.bundle), Path(args.result)
    try:
        bundle = read_bundle(bundle_dir)
    except (FileNotFoundError, FormatError) as e:
        raise CliError(f"cannot read bundle: {e}") from None
    seq = bundle.sequence
    sizes = [len(f) for f in seq.frames]
    if not (result_dir / "flow").is_dir():
        raise CliError(f"{result_dir} has no flow directory")
    try:
        flow = read_flow_dir(result_dir / "flow", sizes)
        labels = [read_labels(result_dir / "labels" / f"{f.index:05d}.lab") for f in seq.frames] \
            if (result_dir / "labels").is_dir() else [np.zeros(n, dtype=np.int64) for n in sizes]
    except (FileNotFoundError, FormatError) as e:
        raise CliError(f"cannot read results: {e}") from None
    pts, src, inst = [], [], []
    for i, f in enumerate(seq.frames):
        if len(labels[i]) != len(f):
            raise CliError(f"label count mismatch in frame {f.index}")
        pts.append(f.points + flow[i])
        src.append(np.full(len(f), f.index, dtype=np.int32))
        inst.append(labels[i].astype(np.int32))
    cols = {"source_frame": np.concatenate(src), "instance": np.concatenate(inst)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(out, encode_ply(np.concatenate(pts), cols, binary=not args.ascii))
    print(f"wrote {sum(sizes)} points to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rigid-accum", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic sequence bundle")
    s.add_argument("--spec", help="config file with a [scene] section")
    s.add_argument("--scene", choices=sorted(SCENES), help="scene preset")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int, help="number of frames")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    r = sub.add_parser("run", help="accumulate a bundle")
    r.add_argument("bundle")
    r.add_argument("--config", help="config file with a [pipeline] section")
    r.add_argument("--profile", choices=["waymo", "nuscenes"])
    r.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="score predicted flow against a bundle")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--region", type=float, default=32.0, help="half side of the evaluation square (m)")
    e.add_argument("--ground-z", type=float, default=None, help="drop points at or below this z")
    e.add_argument("--per-scene", action="store_true", help="directories hold one subdirectory per scene")
    e.add_argument("--ecdf", choices=["epe_static", "epe_dynamic"])
    e.add_argument("--json", help="write metrics JSON here")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export", help="write the accumulated point cloud")
    x.add_argument("bundle")
    x.add_argument("result")
    x.add_argument("out")
    x.add_argument("--ascii", action="store_true")
    x.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
