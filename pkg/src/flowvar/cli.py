"""Command-line harness: ``flowvar {gradvar,rot180,reflow,mixture,metrics} [flags]``.

Every run gets a fresh directory under ``--out`` holding the resolved
``config.json``, the result CSVs and a ``manifest.json``. Passing a manifest
back through ``--config`` repeats the run with identical outputs.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigError, FlowVarError
from .experiments import DEFAULTS, RUNNERS
from .io import write_json

SCHEMA_VERSION = 1
THREADS_ENV = "FLOWVAR_THREADS"


def _git_describe() -> str | None:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


def load_config_file(path) -> dict:
    """Config document or run manifest (whose ``config`` entry is used)."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", field="config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", field="config") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", field="config")
    if "manifest_version" in doc:
        doc = doc["config"]
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}", field="schema_version")
    return doc


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", field="set")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        out[key.strip()] = val
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < --set < dedicated flags."""
    cfg = copy.deepcopy(DEFAULTS[command])
    cfg["seed"] = 0
    sources = []
    if args.config:
        sources.append(load_config_file(args.config))
    sources.append(_parse_set(args.set))
    flags = {k: getattr(args, k) for k in ("seed", "dim", "sigma") if getattr(args, k) is not None}
    if args.sigma is not None and "sigmas" in cfg:
        flags["sigmas"] = None if command != "mixture" else [args.sigma]
    sources.append(flags)
    for src in sources:
        sub = src.get("subcommand")
        if sub is not None and sub != command:
            raise ConfigError(f"config is for {sub!r}, not {command!r}", field="subcommand")
        for key, val in src.items():
            if key in ("schema_version", "subcommand"):
                continue
            if key not in cfg:
                raise ConfigError(f"unknown key {key!r} for {command}", field=key)
            if key == "train" and isinstance(val, dict):
                cfg["train"] = {**cfg.get("train", {}), **val}
            else:
                cfg[key] = val
    seed = cfg["seed"]
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", field="seed")
    cfg["schema_version"] = SCHEMA_VERSION
    cfg["subcommand"] = command
    return cfg


def resolve_threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer", field="threads") from None
    if n < 1:
        raise ConfigError("threads must be >= 1", field="threads")
    return n


def make_run_dir(root, command: str, seed: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{command}-{stamp}-s{seed}"
    for i in range(10_000):
        path = root / (base if i == 0 else f"{base}-{i}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise ConfigError("could not allocate a fresh run directory", field="out")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(command: str, args: argparse.Namespace) -> Path:
    cfg = resolve_config(command, args)
    threads = resolve_threads(args)
    out = make_run_dir(args.out, command, cfg["seed"])
    write_json(out / "config.json", cfg)
    params = {k: v for k, v in cfg.items() if k not in ("seed", "schema_version", "subcommand")}
    try:
        summary = RUNNERS[command](params, out, cfg["seed"], threads)
    except Exception as exc:
        write_json(out / "error.json", _error_doc(exc))
        raise
    outputs = {str(p.relative_to(out)): _digest(p) for p in sorted(out.rglob("*.csv"))}
    write_json(out / "manifest.json", {
        "manifest_version": 1, "flowvar_version": __version__, "git_describe": _git_describe(),
        "subcommand": command, "seed": cfg["seed"], "threads": threads, "config": cfg,
        "outputs": outputs, "summary": summary,
    })
    return out


def _error_doc(exc: BaseException) -> dict:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "step", "t"):
        val = getattr(exc, attr, None)
        if val is not None:
            doc[attr] = val
    return doc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config or a previous run's manifest.json")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--dim", type=int)
    common.add_argument("--sigma", type=float, help="interpolant noise level")
    common.add_argument("--out", metavar="DIR", default="runs", help="parent directory for run folders")
    common.add_argument("--threads", type=int, help=f"worker processes (falls back to ${THREADS_ENV})")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key; VALUE is parsed as JSON when possible")
    p = argparse.ArgumentParser(prog="flowvar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"flowvar {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gradvar": "gradient variance over time for Gaussian pairings and closed-form fields",
        "rot180": "train MLP fields on the 180-degree pairing and score memorization",
        "reflow": "iterate ReFlow and track straightness and coupling drift",
        "mixture": "Gen/Mem/True/Data metrics for noiseless vs noisy training on a Gaussian mixture",
        "metrics": "MMD, Sinkhorn and optional log-density between two point files",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = run(args.command, args)
    except FlowVarError as exc:
        print(json.dumps(_error_doc(exc)), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except Exception as exc:  # noqa: BLE001 - every failure must surface as JSON
        print(json.dumps(_error_doc(exc)), file=sys.stderr)
        return 1
    print(json.dumps({"run_dir": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
