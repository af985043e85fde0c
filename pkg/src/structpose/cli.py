"""Command line entry point: train, eval, gradcheck, export-adjacency, ablate.

Every :class:`TrainConfig` field is settable from a flat ``key=value`` config
file (``--config``) and from a ``--field-name`` flag; flags win over the file,
the file over defaults.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from .cgt import STRATEGIES
from .episodes import generate_episodes, stack_episodes
from .metrics import DEFAULT_THRESHOLDS
from .model import GRAPH_MODES, STREAM_EVAL_DATA, TrainConfig
from .serialization import BundleError

logger = logging.getLogger("structpose")

CHOICES = {
    "graph_mode": GRAPH_MODES,
    "sample_strategy": STRATEGIES,
    "layer_strategy": STRATEGIES,
    "shots": ("1", "5"),
    "topology": ("ring", "star", "chain"),
}
ABLATION_GRID = [
    ("learned", "bayesian", "query"),
    ("learned", "query", "query"),
    ("learned", "bayesian", "bayesian"),
    ("learned", "query", "bayesian"),
    ("static-given", "bayesian", "query"),
    ("random-frozen", "bayesian", "query"),
]


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace("x", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def build_config(args: argparse.Namespace) -> TrainConfig:
    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            raw[name] = v
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = {k: _parse_value(k, str(v), getattr(defaults, k)) for k, v in raw.items()}
    return defaults.replace(**values)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, choices=CHOICES.get(f.name), metavar=None if f.name in CHOICES else "VALUE")


def _print_metrics(res: dict, file=None) -> None:
    file = file or sys.stdout
    for t in DEFAULT_THRESHOLDS:
        print(f"PCK@{t:g}\t{res[t]:.4f}", file=file)
    print(f"mPCK\t{res['mPCK']:.4f}", file=file)
    if "recovery" in res:
        print(f"edge_recovery\t{res['recovery']:.4f}", file=file)


def _load(path):
    from .training import load_checkpoint

    if not Path(path).is_file():
        raise FileNotFoundError(path)
    return load_checkpoint(path)


def cmd_train(args) -> int:
    from .training import init_state, save_checkpoint, train, train_dataset, write_log

    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = _load(args.resume)
        overrides = args.config or any(getattr(args, f.name) is not None for f in fields(TrainConfig))
        if overrides and state.cfg != cfg:
            logger.warning("resuming with the checkpoint's configuration; config overrides ignored")
    else:
        state = init_state(cfg)
    (out / "config.txt").write_text(format_config(state.cfg))
    data = train_dataset(state.cfg)
    train(state, data, log_every=args.log_every)
    save_checkpoint(state, out / "checkpoint.bin")
    write_log(out / "train_log.csv", state.log)
    print(f"trained {state.step} steps; checkpoint {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    from .training import eval_dataset, evaluate

    state = _load(args.checkpoint)
    data = eval_dataset(state.cfg, args.episodes, args.eval_seed)
    _print_metrics(evaluate(state.model, data))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import main_report

    seeds = range(args.seed, args.seed + args.n_seeds)
    ok = main_report(seeds, include_full=not args.quick, stream=sys.stdout)
    return 0 if ok else 1


def cmd_export(args) -> int:
    state = _load(args.checkpoint)
    cfg = state.cfg
    seed = cfg.seed if args.eval_seed is None else args.eval_seed
    eps = generate_episodes(cfg.synth("eval"), args.index + 1, seed, STREAM_EVAL_DATA)
    batch = stack_episodes(eps[args.index :])
    out = state.model.predict(batch)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["layer", "i", "j", "value"])
        for layer, g in enumerate(out.decoder.graphs, 1):
            vals = g.values.reshape(-1, cfg.m, cfg.m)[0]
            for i in range(cfg.m):
                for j in range(cfg.m):
                    w.writerow([layer, i, j, repr(float(vals[i, j]))])
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_ablate(args) -> int:
    from .training import eval_dataset, evaluate, init_state, train, train_dataset

    base = build_config(args)
    data = train_dataset(base)
    evalset = eval_dataset(base)
    rows = []
    for mode, s_strat, l_strat in ABLATION_GRID:
        if args.modes and mode not in args.modes:
            continue
        cfg = base.replace(graph_mode=mode, sample_strategy=s_strat, layer_strategy=l_strat)
        state = train(init_state(cfg), data)
        res = evaluate(state.model, evalset)
        rows.append((mode, s_strat, l_strat, res))
        print(f"done {mode} sample={s_strat} layer={l_strat}: PCK@0.2={res[0.2]:.4f}", file=sys.stderr)
    header = f"{'graph_mode':<14}{'sample':<10}{'layer':<10}{'PCK@0.05':>9}{'PCK@0.1':>9}{'PCK@0.15':>9}{'PCK@0.2':>9}{'mPCK':>8}{'recov':>8}"
    print(header)
    for mode, s, l, r in rows:
        print(f"{mode:<14}{s:<10}{l:<10}{r[0.05]:>9.4f}{r[0.1]:>9.4f}{r[0.15]:>9.4f}{r[0.2]:>9.4f}{r['mPCK']:>8.4f}{r['recovery']:>8.4f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["graph_mode", "sample_strategy", "layer_strategy", "pck_0.05", "pck_0.1", "pck_0.15", "pck_0.2", "mpck", "recovery"])
            for mode, s, l, r in rows:
                w.writerow([mode, s, l, r[0.05], r[0.1], r[0.15], r[0.2], r["mPCK"], r["recovery"]])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structpose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + CSV log")
    _add_config_flags(p)
    p.add_argument("--out", default="runs/train", metavar="DIR")
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PCK on held-out categories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--eval-seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--quick", action="store_true", help="skip the full-loss composite checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-adjacency", help="per-layer fused adjacency of one episode as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="held-out episode index")
    p.add_argument("--eval-seed", type=int, default=None)
    p.add_argument("--out", metavar="CSV")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("ablate", help="graph-mode x fusion-strategy grid")
    _add_config_flags(p)
    p.add_argument("--modes", nargs="*", choices=GRAPH_MODES)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 1
    except BundleError as exc:
        print(f"error: unreadable file: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
