"""Command-line entry point: ``splitlora simulate | train | schedule``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, cost, harness
from .config import ExperimentConfig, load_config, output_dir
from .errors import ConfigError, SizeError, ValidationError
from .scheduler import BACKEND, monte_carlo

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("splitlora")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides $SPLITLORA_OUT and the config)")
    p.add_argument("--preset", help="built-in preset name or preset JSON path")
    p.add_argument("--seed", type=int)
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitlora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="cost-model comparison of SL, vanilla SFL and the proposed scheme")
    _common(s)
    s.add_argument("--schemes", help="comma-separated subset of sl,sfl,proposed")
    s.add_argument("--rounds", type=int)

    t = sub.add_parser("train", help="desk-scale split federated LoRA training")
    _common(t)
    t.add_argument("--rounds", type=int)
    t.add_argument("--agg-every", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--cuts", help="comma-separated cut per client, e.g. 1,1,2,2,3,3")
    t.add_argument("--policy", choices=["greedy", "fifo"])
    t.add_argument("--compare-monolithic", action="store_true",
                   help="with one client, check parameters against unsplit training")

    c = sub.add_parser("schedule", help="compare greedy, FIFO and brute-force server orders")
    _common(c)
    c.add_argument("--clients", type=int, help="use the first N preset clients")
    c.add_argument("--random", type=int, metavar="N", help="Monte-Carlo over N random instances")
    c.add_argument("--tasks", type=int, default=6, help="tasks per random instance")
    c.add_argument("--zero-release", action="store_true")
    return parser


def _ints(text: str | None, flag: str) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(flag, f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "preset": args.preset,
                 "rounds": getattr(args, "rounds", None)}
    if args.command == "simulate" and args.schemes:
        overrides["schemes"] = [s.strip() for s in args.schemes.split(",") if s.strip()]
    if args.command == "train":
        overrides.update(agg_every=args.agg_every, alpha=args.alpha, lr=args.lr,
                         cuts=_ints(args.cuts, "--cuts"), policy=args.policy)
    return load_config(args.config, overrides)


def _write_snapshot(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    report = cost.compare_report(cfg.load_preset(), cfg.cost_model, cfg.hyper, cfg.rounds, cfg.schemes)
    _write_snapshot(cfg, out)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_table())
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, compare_monolithic: bool = False) -> int:
    if compare_monolithic:
        dev = harness.compare_monolithic(cfg)
        print(f"max relative parameter deviation vs monolithic: {dev:.3e}")
        return EXIT_OK if dev < 1e-9 else EXIT_RUNTIME

    def progress(m):
        log.info("round %d loss %.4f eval_acc %.4f%s", m.round, m.train_loss, m.eval_accuracy,
                 " (aggregated)" if m.aggregated else "")

    _write_snapshot(cfg, out)
    exp, result = harness.train(cfg, on_round=progress)
    (out / "metrics.csv").write_text(harness.metrics_csv(result))
    with open(out / "trace.ndjson", "w") as fh:
        for tr in result.traces:
            fh.write(tr.to_ndjson())
    checkpoint.save_adapters(out / "global_adapters.slra", result.global_adapters.adapters, cfg.model)
    last = result.history[-1]
    print(f"rounds={len(result.history)} aggregations={result.aggregations} "
          f"eval_loss={last.eval_loss:.4f} eval_accuracy={last.eval_accuracy:.4f}")
    return EXIT_OK


def cmd_schedule(cfg: ExperimentConfig, out: Path, clients: int | None = None,
                 random_n: int | None = None, tasks: int = 6, zero_release: bool = False) -> int:
    _write_snapshot(cfg, out)
    if random_n is not None:
        if random_n < 1:
            raise ConfigError("--random", "must be >= 1")
        if tasks > 8:
            raise SizeError(f"brute force is limited to 8 tasks, got {tasks}")
        summary, _ = monte_carlo(random_n, tasks, cfg.seed, zero_release)
        doc = {"instances": random_n, "tasks": tasks, "seed": cfg.seed,
               "zero_release": zero_release, **summary.to_dict()}
        (out / "schedule_random.json").write_text(json.dumps(doc, indent=2))
        print(f"instances={random_n} tasks={tasks} backend={BACKEND}")
        print(f"greedy <= fifo: {summary.greedy_le_fifo:.3f}")
        print(f"greedy == optimal: {summary.greedy_eq_optimal:.3f}")
        print(f"greedy/optimal ratio: mean {summary.ratio_mean:.4f} "
              f"p95 {summary.ratio_p95:.4f} max {summary.ratio_max:.4f}")
        return EXIT_OK

    preset = cfg.load_preset()
    if clients is not None:
        if clients < 1:
            raise ConfigError("--clients", "must be >= 1")
        if clients > len(preset.clients):
            preset = harness.preset_for_cuts(preset, [preset.clients[i % len(preset.clients)].client_layers
                                                      for i in range(clients)])
        else:
            preset = preset.subset(clients)
    if len(preset.clients) > 8:
        raise SizeError(f"brute force is limited to 8 clients, got {len(preset.clients)}")
    table = harness.schedule_table(harness.preset_tasks(preset, cfg.cost_model, cfg.hyper))
    doc = [s.to_dict() for s in table.values()]
    (out / "schedules.json").write_text(json.dumps(doc, indent=2))
    width = max(len(k) for k in table)
    for name, s in table.items():
        print(f"{name.ljust(width)}  makespan {s.makespan:.6f} s  order {s.order}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        out = output_dir(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.compare_monolithic)
        return cmd_schedule(cfg, out, args.clients, args.random, args.tasks, args.zero_release)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
