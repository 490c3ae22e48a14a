"""Command line entry point: ``iscc train|eval|sweep|table|plot``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .config import ConfigError, SimConfig, load_config
from .policies import POLICIES

log = logging.getLogger("iscc")


class ValidationError(Exception):
    pass


def _seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip() != "")
    except ValueError as e:
        raise ValidationError(f"bad --seeds value {text!r}") from e
    if not seeds or any(s < 0 for s in seeds):
        raise ValidationError("--seeds must list non-negative integers")
    return seeds


def _values(text: str | None) -> tuple:
    if not text:
        return ()
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise ValidationError(f"bad --values {text!r}") from e


def _config(args) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    if getattr(args, "steps", None):
        cfg = cfg.replace(steps=args.steps)
    return cfg


def cmd_train(args) -> None:
    from .policies.mappo import save_checkpoint, train
    if args.policy not in ("mappo", "ma-a2c"):
        raise ValidationError("train supports --policy mappo or ma-a2c")
    cfg = _config(args)
    algo = "mappo" if args.policy == "mappo" else "a2c"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in _seeds(args.seeds):
        agent, _ = train(cfg, algo, seed=s, episodes=args.episodes,
                         curves_path=out / f"curves_seed{s}.csv",
                         progress=lambda r: log.info("seed %d episode %d reward %.4f", s, r["episode"], r["mean_reward"]))
        save_checkpoint(out / f"seed_{s}", agent)
    if args.plot:
        from .plotting import plot_csv
        for s in _seeds(args.seeds):
            plot_csv(out / f"curves_seed{s}.csv", "line", "episode", "mean_reward", out / f"curves_seed{s}.svg")


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in _seeds(args.seeds):
        k = experiments.evaluate_seed(cfg, args.policy, s, args.episodes, args.checkpoint,
                                      args.offloaders, out if args.record else None,
                                      out / f"epochs_seed{s}.jsonl")
        rows.append(k)
    fields = experiments.KPI_FIELDS + ("comp_latency_ms",)
    import csv
    from .config import config_hash
    with open(out / "kpi.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash(cfg)}\n")
        w = csv.writer(fh)
        w.writerow(("policy", "seed") + fields)
        for k in rows:
            w.writerow([args.policy, k["seed"]] + [experiments._fmt(k[f]) for f in fields])


def cmd_sweep(args) -> None:
    cfg = _config(args)
    values = _values(args.values)
    if args.recipe:
        if args.recipe not in experiments.RECIPES:
            raise ValidationError(f"unknown recipe {args.recipe!r}")
        kind, default, _ = experiments.RECIPES[args.recipe]
        if kind not in experiments.SWEEPS:
            raise ValidationError(f"recipe {args.recipe} is produced by another subcommand")
        sweep = kind
        values = values or tuple(default or ())
    else:
        sweep = args.sweep
        if sweep is None:
            raise ValidationError("give --sweep or --recipe")
    spec = experiments.ExperimentSpec(args.recipe or sweep, args.policy, sweep, values,
                                      _seeds(args.seeds), args.out, args.episodes, args.checkpoint)
    experiments.run(spec, cfg)


def cmd_table(args) -> None:
    cfg = _config(args)
    pols = tuple(p for p in args.policies.split(",") if p)
    bad = [p for p in pols if p not in POLICIES]
    if bad:
        raise ValidationError(f"unknown policies {bad}")
    ckpts = {}
    for item in (args.checkpoints or "").split(","):
        if item:
            if "=" not in item:
                raise ValidationError("--checkpoints takes policy=dir pairs")
            k, v = item.split("=", 1)
            ckpts[k] = v
    res = experiments.table_results(cfg, pols, _seeds(args.seeds), args.episodes, ckpts)
    rows = experiments.kpi_table(res)
    _, txt = experiments.write_table(rows, args.out, experiments.table_config(cfg))
    sys.stdout.write(Path(txt).read_text())


def cmd_plot(args) -> None:
    from .plotting import plot_csv
    plot_csv(args.csv, args.kind, args.x, args.y, args.out, args.group)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iscc", description="ISCC vehicular scheduling simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, policy=True):
        sp.add_argument("--config", help="TOML or JSON config file")
        sp.add_argument("--seeds", default="0", help="comma separated seeds")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--episodes", type=int, default=1)
        sp.add_argument("--steps", type=int, help="override epochs per episode")
        if policy:
            sp.add_argument("--policy", required=True, choices=POLICIES)
            sp.add_argument("--checkpoint", help="checkpoint directory for learned policies")

    sp = sub.add_parser("train", help="train MAPPO or MA-A2C")
    common(sp)
    sp.add_argument("--plot", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a policy and write KPI CSVs")
    common(sp)
    sp.add_argument("--record", action="store_true", help="write per-slot CSVs")
    sp.add_argument("--offloaders", type=int, default=0, help="forced offloader count")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="density / distance / offloader sweeps")
    common(sp)
    sp.add_argument("--sweep", choices=experiments.SWEEPS)
    sp.add_argument("--values", help="comma separated sweep values")
    sp.add_argument("--recipe", help="named figure recipe, e.g. fig9")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("table", help="KPI table over policies")
    common(sp, policy=False)
    sp.add_argument("--policies", default="scg,ccg")
    sp.add_argument("--checkpoints", help="policy=dir pairs, comma separated")
    sp.set_defaults(func=cmd_table)

    sp = sub.add_parser("plot", help="SVG chart from a CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--kind", default="line")
    sp.add_argument("--x", required=True)
    sp.add_argument("--y", required=True)
    sp.add_argument("--group", default="policy")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValidationError, ConfigError, ValueError, FileNotFoundError) as e:
        sys.stderr.write(f"iscc: error: {e}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
