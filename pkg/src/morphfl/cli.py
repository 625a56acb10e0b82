"""Batch command-line front end: ``run``, ``ablate`` and ``report``.

Exit codes: 0 success, 1 the run itself failed, 2 bad usage, config or input files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import fields
from pathlib import Path

from . import store
from .runtime import ABLATIONS, RunConfig, run_training

log = logging.getLogger("morphfl")

SEED_ENV = "FEDTRANS_SEED"
REQUIRED_KEYS = ("name",)
EXTRA_KEYS = {"name": str, "out_dir": str}


class ConfigError(Exception):
    """Bad configuration; the message is meant for the user as-is."""


def _strip_comments(text: str) -> str:
    # whole-line comments only, replaced by blank lines to keep line numbers
    return "\n".join("" if re.match(r"\s*(//|#)", line) else line for line in text.splitlines())


def _key_line(text: str, key: str):
    m = re.search(r'^\s*"%s"\s*:' % re.escape(key), text, re.M)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(path, text, key) -> str:
    line = _key_line(text, key)
    return f"{path}:{line}" if line else str(path)


def _check_type(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, tuple):
        return isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    return True


def load_config(path, seed=None, threads=None, ablation=None):
    """Parse an experiment config file.

    Returns ``(run_config, name, out_dir)``. Raises :class:`ConfigError`
    with a ``file:line`` prefix when the offending key can be located.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    try:
        raw = json.loads(_strip_comments(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")

    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ConfigError(f"{path}: missing required key '{key}'")

    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for key, value in raw.items():
        if key in EXTRA_KEYS:
            if not isinstance(value, EXTRA_KEYS[key]):
                raise ConfigError(f"{_where(path, text, key)}: '{key}' must be a string")
            continue
        if key not in known:
            raise ConfigError(f"{_where(path, text, key)}: unknown key '{key}'")
        default = getattr(defaults, key)
        if key == "ablation":
            if value is not None and value not in ABLATIONS:
                raise ConfigError(f"{_where(path, text, key)}: 'ablation' must be null or one of {list(ABLATIONS)}")
        elif not _check_type(value, default):
            raise ConfigError(f"{_where(path, text, key)}: '{key}' must look like {json.dumps(_plain(default))}, "
                              f"got {json.dumps(value)}")

    params = {k: v for k, v in raw.items() if k in known}
    if seed is not None:
        params["seed"] = seed
    elif "seed" not in params:
        env = os.environ.get(SEED_ENV)
        if env is None:
            raise ConfigError(f"{path}: missing required key 'seed' (or pass --seed / set {SEED_ENV})")
        try:
            params["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    if threads is not None:
        params["threads"] = threads
    if ablation is not None:
        params["ablation"] = ablation
    try:
        config = RunConfig(**params)
    except (ValueError, TypeError) as e:
        named = [k for k in params if re.search(r"\b%s\b" % k, str(e))]
        where = _where(path, text, named[0]) if named else str(path)
        raise ConfigError(f"{where}: {e}") from None
    return config, raw["name"], raw.get("out_dir")


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def effective_config(config: RunConfig, name: str) -> dict:
    return {"name": name, **config.to_dict()}


def _execute(config, name, out_dir, resume=None) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective_config(config, name), indent=1) + "\n")
    state = None
    if resume is not None:
        try:
            state = store.load_state(Path(resume) / "state.json", config)
        except FileNotFoundError:
            print(f"error: {resume}: no state.json to resume from", file=sys.stderr)
            return 2
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
    try:
        result = run_training(config, state=state)
    except (ArithmeticError, ValueError, RuntimeError) as e:
        print(f"error: run failed: {e}", file=sys.stderr)
        return 1
    store.write_run(out, result)
    print(f"{name}: mean_acc={result.mean_acc:.4f} iqr={result.iqr_acc:.4f} "
          f"models={len(result.models)} total_macs={scaled_macs(result.total_macs)} -> {out}")
    return 0


def cmd_run(config_path, seed_override=None, out_dir=None, threads=None, resume=None) -> int:
    try:
        config, name, cfg_out = load_config(config_path, seed=seed_override, threads=threads)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return _execute(config, name, out_dir or cfg_out or Path("runs") / name, resume)


def cmd_ablate(config_path, switch, seed_override=None, out_dir=None, threads=None) -> int:
    if switch not in ABLATIONS:
        print(f"error: unknown switch {switch!r}; choose from {', '.join(ABLATIONS)}", file=sys.stderr)
        return 2
    try:
        config, name, cfg_out = load_config(config_path, seed=seed_override, threads=threads, ablation=switch)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    default_out = Path(cfg_out) / switch if cfg_out else Path("runs") / f"{name}-{switch}"
    return _execute(config, f"{name}-{switch}", out_dir or default_out)


_PREFIXES = ((1e18, "E"), (1e15, "P"), (1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K"))


def scaled_macs(macs: float) -> str:
    for scale, prefix in _PREFIXES:
        if macs >= scale:
            return f"{macs / scale:.3f} {prefix}MAC"
    return f"{macs:.0f} MAC"


def cmd_report(run_dir, curve=None) -> int:
    run_dir = Path(run_dir)
    metrics_path, summary_path = run_dir / "metrics.csv", run_dir / "summary.json"
    for p in (metrics_path, summary_path):
        if not p.is_file():
            print(f"error: {p} not found", file=sys.stderr)
            return 2
    try:
        rows = store.read_metrics(metrics_path)
        summary = store.read_summary(summary_path)
    except store.FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if rows and rows[-1]["cum_macs"] != summary["total_macs"]:
        print(f"error: {metrics_path}: cum_macs of the last round ({rows[-1]['cum_macs']}) "
              f"disagrees with summary total_macs ({summary['total_macs']})", file=sys.stderr)
        return 2
    table = [
        ("run", run_dir.name),
        ("mean accuracy", f"{100 * summary['mean_acc']:.2f} %"),
        ("accuracy IQR", f"{100 * summary['iqr_acc']:.2f} %"),
        ("total cost", scaled_macs(summary["total_macs"])),
        ("models", str(len(summary["models"]))),
        ("rounds", str(len(rows))),
    ]
    width = max(len(k) for k, _ in table)
    for k, v in table:
        print(f"{k:<{width}}  {v}")
    if curve is not None:
        with open(curve, "w") as fh:
            fh.write("round,mean_loss,cum_macs\n")
            for r in rows:
                fh.write(f"{r['round']},{r['mean_loss']!r},{r['cum_macs']}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log transformations and stopping decisions")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--threads", type=int)
    r.add_argument("--resume", metavar="DIR", help="continue the run saved in DIR (e.g. with a larger max_rounds)")

    a = sub.add_parser("ablate", help="train with one component switched off")
    a.add_argument("--config", required=True)
    a.add_argument("--switch", required=True, help=" | ".join(ABLATIONS))
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.add_argument("--threads", type=int)

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("--dir", required=True)
    rep.add_argument("--curve", metavar="CSV", help="also write round,mean_loss,cum_macs here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out, args.threads, args.resume)
    if args.command == "ablate":
        return cmd_ablate(args.config, args.switch, args.seed, args.out, args.threads)
    return cmd_report(args.dir, args.curve)


if __name__ == "__main__":
    sys.exit(main())
