"""``emma`` command-line entry point.

Every command writes ``run_manifest.json`` (or ``<output>.manifest.json``
for single-file outputs) before doing any real work. Failures print one
JSON line on stderr, ``{"error": <category>, "exit_code": n, "message": ...}``,
and exit with the category's code from :mod:`emma_fusion.errors`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import metrics, training
from .config import (
    DataConfig,
    TrainConfig,
    parse_config,
    read_config_file,
)
from .errors import ConfigError, EmmaError, InputError, MissingFileError, ShapeError
from .imaging import build_dataset, load_dataset, load_image, save_dataset, save_image
from .networks import load_checkpoint

log = logging.getLogger("emma_fusion")

SEED_ENV = "EMMA_SEED"


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# config plumbing


def _parse_set(items: list[str]) -> dict:
    """``key=value`` pairs for top-level scalar keys; values are read as JSON when possible."""
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if "." in key:
            raise ConfigError(f"--set only overrides top-level keys, got {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(value, (dict, list)):
            raise ConfigError(f"--set {key}: only scalar values may be overridden")
        out[key] = value
    return out


def _raw_config(args) -> dict:
    data = read_config_file(args.config) if args.config else {}
    data.update(_parse_set(args.set))
    seed_source = "config" if "seed" in data else "default"
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            data["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        seed_source = "env"
    args.seed_source = seed_source
    return data


def _train_config(args, stage: int) -> TrainConfig:
    data = _raw_config(args)
    if data.setdefault("stage", stage) != stage:
        raise ConfigError(f"config is for stage {data['stage']}, but this command runs stage {stage}")
    data["checkpoint_dir"] = str(args.out)
    return parse_config(TrainConfig, data)


def _write_manifest(path: Path, args, config_json: str, seed, inputs: dict, outputs: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    effective = {"command": args.command, "config": json.loads(config_json), "inputs": inputs}
    manifest = {
        "schema": 1,
        "command": args.command,
        "config_path": str(args.config) if getattr(args, "config", None) else None,
        "config_hash": hashlib.sha256(json.dumps(effective, sort_keys=True).encode()).hexdigest(),
        "config": json.loads(config_json),
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "seed_source": getattr(args, "seed_source", "default"),
        "tool_version": tool_version(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"{what} directory not found: {path}")
    return path


def _load_sensors(directory):
    root = _require_dir(directory, "sensor checkpoint")
    return load_checkpoint(root / "a_i"), load_checkpoint(root / "a_v")


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    data = _raw_config(args)
    if args.out:
        data["out_dir"] = str(args.out)
    cfg = parse_config(DataConfig, data)
    if not cfg.out_dir:
        raise ConfigError("synth-data needs an output directory (--out or out_dir)")
    out = Path(cfg.out_dir)
    _write_manifest(out / "run_manifest.json", args, cfg.canonical_json(), cfg.seed, {}, {"dataset": str(out)})
    ds = build_dataset(cfg.seed, cfg.num_pairs, cfg.height, cfg.width, cfg.patch_size, cfg.num_heldout)
    save_dataset(ds, out)
    print(json.dumps({"dataset": str(out), "pairs": len(ds.pairs), "heldout": len(ds.heldout)}))
    return 0


def cmd_train_sensing(args) -> int:
    cfg = _train_config(args, 1)
    data_dir = _require_dir(args.data, "dataset")
    out = Path(args.out)
    _write_manifest(out / "run_manifest.json", args, cfg.canonical_json(), cfg.seed,
                    {"data": str(data_dir)}, {"checkpoints": str(out)})
    dataset = load_dataset(data_dir, cfg.patch_size)
    _, _, report = training.train_sensing_stage(cfg, dataset)
    last = report.epochs[-1] if report.epochs else {}
    print(json.dumps({"checkpoints": str(out), "epochs": len(report.epochs),
                      "heldout_mse_i": last.get("heldout_mse_i"), "heldout_mse_v": last.get("heldout_mse_v")}))
    return 0


def cmd_train_fuser(args) -> int:
    cfg = _train_config(args, 2)
    data_dir = _require_dir(args.data, "dataset")
    out = Path(args.out)
    _write_manifest(out / "run_manifest.json", args, cfg.canonical_json(), cfg.seed,
                    {"data": str(data_dir), "sensors": str(args.sensors)}, {"checkpoints": str(out)})
    sensors = _load_sensors(args.sensors)
    dataset = load_dataset(data_dir, cfg.patch_size)
    _, report = training.train_fuser_stage(cfg, dataset, sensors)
    trace = report.equivariance_trace
    print(json.dumps({"checkpoint": str(out / "fuser"), "epochs": len(report.epochs),
                      "audit_initial": trace[0]["error"] if trace else None,
                      "audit_final": trace[-1]["error"] if trace else None}))
    return 0


def _channels(image: np.ndarray) -> list[np.ndarray]:
    return [image] if image.ndim == 2 else [image[:, :, c] for c in range(image.shape[2])]


def fuse_arrays(fuser, i: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Fuse two images; RGB inputs are fused channel by channel (a gray input is reused per channel)."""
    if i.shape[:2] != v.shape[:2]:
        raise ShapeError(f"inputs differ in size: {i.shape[:2]} vs {v.shape[:2]}")
    if i.shape[0] != i.shape[1]:
        raise ShapeError(f"fusion needs square images, got {i.shape[0]}x{i.shape[1]}")
    ci, cv = _channels(i), _channels(v)
    if len(ci) == 1 and len(cv) == 1:
        return training.fuse_images(fuser, ci[0], cv[0])
    n = max(len(ci), len(cv))
    ci = ci * n if len(ci) == 1 else ci
    cv = cv * n if len(cv) == 1 else cv
    return np.stack([training.fuse_images(fuser, a, b) for a, b in zip(ci, cv)], axis=2)


def cmd_fuse(args) -> int:
    out = Path(args.out)
    _write_manifest(out.parent / f"{out.name}.manifest.json", args, "{}", None,
                    {"fuser": str(args.fuser), "i": str(args.i), "v": str(args.v)}, {"fused": str(out)})
    fuser = load_checkpoint(_require_dir(args.fuser, "fuser checkpoint"))
    fused = fuse_arrays(fuser, load_image(args.i), load_image(args.v))
    save_image(fused, out)
    print(json.dumps({"fused": str(out), "shape": list(fused.shape)}))
    return 0


def cmd_evaluate(args) -> int:
    inputs = {"fused": str(args.fused), "i": str(args.i), "v": str(args.v)}
    if args.truth:
        inputs["truth"] = str(args.truth)
    if args.out:
        out = Path(args.out)
        _write_manifest(out.parent / f"{out.name}.manifest.json", args, "{}", None, inputs, {"report": str(out)})
    f, i, v = (load_image(p) for p in (args.fused, args.i, args.v))
    truth = load_image(args.truth) if args.truth else None
    if any(x.ndim != 2 for x in (f, i, v)):
        raise ShapeError("evaluate works on single-channel images")
    report = metrics.evaluate(f, i, v, truth)
    if args.out:
        Path(args.out).write_text(report.dumps() + "\n")
    sys.stdout.write(report.table(Path(args.fused).name))
    if not args.out:
        print(report.dumps())
    return 0


def cmd_audit_equivariance(args) -> int:
    data = _raw_config(args)
    cfg = parse_config(TrainConfig, {"stage": 2, **data})
    out = Path(args.out)
    inputs = {"fuser": str(args.fuser), "sensors": str(args.sensors), "data": str(args.data)}
    _write_manifest(out.parent / f"{out.name}.manifest.json", args, cfg.canonical_json(), cfg.seed,
                    inputs, {"audit": str(out)})
    fuser = load_checkpoint(_require_dir(args.fuser, "fuser checkpoint"))
    sensors = _load_sensors(args.sensors)
    dataset = load_dataset(_require_dir(args.data, "dataset"))
    pairs = dataset.heldout or dataset.pairs
    images = [(p.modality_a, p.modality_b) for p in pairs]
    group = cfg.group_config()
    to64 = [m.double() for m in (fuser, *sensors)]
    images = [tuple(x.astype(np.float64) for x in pair) for pair in images]
    err = training.equivariance_audit(to64[0], tuple(to64[1:]), images, group, cfg.audit_samples, cfg.seed)
    result = {"error": err, "samples": cfg.audit_samples, "pairs": len(images),
              "group": {k: getattr(group, k) for k in ("shifts", "max_shift", "rotations", "flips", "nontrivial")}}
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# parser


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config file (schema 1)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a top-level scalar config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emma", description="Self-supervised multi-modality image fusion.", allow_abbrev=False
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate synthetic scene pairs")
    _add_config_args(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-sensing", help="stage 1: fit the pseudo-sensing modules")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_sensing)

    p = sub.add_parser("train-fuser", help="stage 2: train the fuser against frozen sensors")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sensors", type=Path, required=True, help="stage-1 output directory")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_fuser)

    p = sub.add_parser("fuse", help="fuse one image pair")
    p.add_argument("--fuser", type=Path, required=True, help="fuser checkpoint directory")
    p.add_argument("--i", type=Path, required=True)
    p.add_argument("--v", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fuse, config=None)

    p = sub.add_parser("evaluate", help="fusion metrics for one fused image")
    p.add_argument("--fused", type=Path, required=True)
    p.add_argument("--i", type=Path, required=True)
    p.add_argument("--v", type=Path, required=True)
    p.add_argument("--truth", type=Path)
    p.add_argument("--out", type=Path, help="write the MetricReport JSON here")
    p.set_defaults(func=cmd_evaluate, config=None)

    p = sub.add_parser("audit-equivariance", help="measure F(A(T f)) against T F(A(f))")
    _add_config_args(p)
    p.add_argument("--fuser", type=Path, required=True)
    p.add_argument("--sensors", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_audit_equivariance)
    return parser


def _fail(exc: EmmaError) -> int:
    line = {"error": exc.category, "exit_code": exc.exit_code, "message": " ".join(str(exc).split())}
    print(json.dumps(line), file=sys.stderr)
    return exc.exit_code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmmaError as exc:
        return _fail(exc)
    except FileNotFoundError as exc:
        return _fail(MissingFileError(str(exc)))
    except OSError as exc:
        return _fail(InputError(f"I/O failure: {exc}"))


if __name__ == "__main__":
    sys.exit(main())
