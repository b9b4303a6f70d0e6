"""Command line: ``coprlab <command> [--config PATH] [--set key=value ...]``.

Commands share one experiment config and one output directory, so they
can run in sequence::

    coprlab gen-world
    coprlab train-teacher
    coprlab train-prerank --method copr
    coprlab evaluate
    coprlab report

``run`` chains all of them. Exit status is 0 on success, 2 for config or
usage errors and 1 for missing prerequisites.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .cascade import ImpressionLogs, RankingLogs
from .config import ExperimentConfig, dump_config, load_config
from .nn import RankModel, check_capacity_gap, load_model
from .world import Catalog, ConfigError, true_ctr

log = logging.getLogger("coprlab")


class MissingInput(Exception):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"missing {what}: {path}")
    return path


def _load_catalog(cfg: ExperimentConfig) -> Catalog:
    layout = ex.Layout(cfg.out)
    catalog = Catalog.load(_require(layout.world, "catalog (run gen-world first)"))
    if catalog.config != cfg.world or catalog.seed != cfg.seed:
        raise ConfigError("world", f"{layout.world} was generated from a different world config or seed")
    return catalog


def _load_teacher(cfg: ExperimentConfig) -> RankModel:
    path = _require(ex.Layout(cfg.out).model("teacher"), "teacher checkpoint (run train-teacher first)")
    teacher = load_model(path, cfg.world.digest())
    if not isinstance(teacher, RankModel):
        raise ValueError(f"{path} is not a ranking-model checkpoint")
    return teacher


# ---- commands -----------------------------------------------------------------


def cmd_gen_world(cfg: ExperimentConfig, args) -> None:
    layout = ex.Layout(cfg.out)
    catalog = ex.build_world(cfg)
    layout.root.mkdir(parents=True, exist_ok=True)
    catalog.save(layout.world)
    (layout.root / "config.yaml").write_text(dump_config(cfg))
    rng = np.random.default_rng([cfg.seed, 99])
    n = 10_000
    ctr = true_ctr(catalog, rng.integers(catalog.n_users, size=n), rng.integers(catalog.n_ads, size=n), rng.integers(catalog.context_vocab, size=n))
    print(f"wrote {layout.world}")
    print(f"users={catalog.n_users} ads={catalog.n_ads} mean_bid={catalog.bids.mean():.4f} base_ctr={np.mean(ctr):.4f}")


def cmd_train_teacher(cfg: ExperimentConfig, args) -> None:
    layout = ex.Layout(cfg.out)
    catalog = _load_catalog(cfg)
    imps_train, imps_hold = ex.bootstrap_impressions(cfg, catalog)
    untrained = ex.log_loss(ex.init_teacher(cfg, catalog), imps_hold, catalog)
    teacher, curve = ex.train_teacher(cfg, catalog, imps_train)
    held = ex.log_loss(teacher, imps_hold, catalog)
    logs = ex.build_ranking_logs(cfg, catalog, teacher, imps_train)
    teacher.save(layout.model("teacher"), cfg.world.digest(), {"holdout_logloss": held})
    ex.write_curve(curve, layout.curve("teacher"))
    imps_train.save(layout.impressions_train)
    imps_hold.save(layout.impressions_holdout)
    logs.save(layout.ranking_logs)
    print(f"wrote {layout.model('teacher')} ({teacher.param_count()} params)")
    print(f"held-out log-loss {held:.6f} (untrained {untrained:.6f}); {len(imps_train)} train impressions, {len(logs)} ranking lists")


def cmd_train_prerank(cfg: ExperimentConfig, args) -> None:
    layout = ex.Layout(cfg.out)
    name = args.method
    tc = cfg.train_config(name)
    catalog = _load_catalog(cfg)
    teacher = _load_teacher(cfg)
    imps = ImpressionLogs.load(_require(layout.impressions_train, "impression logs (run train-teacher first)"))
    logs = RankingLogs.load(_require(layout.ranking_logs, "ranking logs (run train-teacher first)"))
    data = ex.training_data(catalog, imps, teacher, logs)
    model, curve = ex.train_student(cfg, name, data)
    check_capacity_gap(teacher, model)
    model.save(layout.model(name), cfg.world.digest(), {"method": name, "train_config": tc.to_dict()})
    ex.write_curve(curve, layout.curve(name))
    last = curve[-1] if curve else None
    print(f"wrote {layout.model(name)} ({model.param_count()} params)")
    if last is not None:
        print(f"final epoch: total={last.total:.6f} l_ctr={last.l_ctr:.6f} l_rank={last.l_rank:.6f} l_reg={last.l_reg:.6f}")


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    layout = ex.Layout(cfg.out)
    catalog = _load_catalog(cfg)
    teacher = _load_teacher(cfg)
    if args.checkpoints:
        paths = {Path(p).stem: _require(Path(p), "checkpoint") for p in args.checkpoints}
    else:
        paths = {name: _require(layout.model(name), f"checkpoint for {name!r}") for name in cfg.methods}
    models = ex.load_models(paths, cfg.world.digest())
    result = ex.evaluate_models(cfg, catalog, teacher, models)
    ex.write_eval(result, layout.eval_dir)
    print(f"wrote {layout.eval_dir}/consistency.csv, system.csv, rpc.csv")
    _print_summary(layout.eval_dir)


def cmd_report(cfg: ExperimentConfig, args) -> None:
    layout = ex.Layout(cfg.out)
    _require(layout.eval_dir / "consistency.csv", "evaluation results (run evaluate first)")
    rows = _summary_rows(layout.eval_dir)
    with open(layout.eval_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow(list(r.values()))
    _print_summary(layout.eval_dir)
    print(f"wrote {layout.eval_dir / 'summary.csv'}")


def cmd_run(cfg: ExperimentConfig, args) -> None:
    res = ex.run_pipeline(cfg)
    print(f"teacher held-out log-loss {res.teacher_holdout_logloss:.6f} (untrained {res.untrained_holdout_logloss:.6f})")
    cmd_report(cfg, args)


# ---- summary table --------------------------------------------------------------


def _summary_rows(eval_dir: Path) -> list[dict[str, str]]:
    cons: dict[str, dict[str, str]] = {}
    with open(eval_dir / "consistency.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if r["K"] == "10":
                cons.setdefault(r["method"], {})[f"{r['metric']}@10"] = r["value"]
    rows = []
    with open(eval_dir / "system.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"method": r["method"]}
            row.update(cons.get(r["method"], {}))
            row.update({k: r[k] for k in ("ctr", "rpm", "rpc_dev_ecpm", "rpc_dev_pctr")})
            rows.append(row)
    return rows


def _print_summary(eval_dir: Path) -> None:
    rows = _summary_rows(eval_dir)
    cols = list(rows[0])
    print("  ".join(f"{c:>12s}" for c in cols))
    for r in rows:
        cells = [r["method"]] + ["%.4f" % float(r[c]) for c in cols[1:]]
        print("  ".join(f"{c:>12s}" for c in cells))


# ---- entry point ------------------------------------------------------------------

COMMANDS = {
    "gen-world": (cmd_gen_world, "generate and save the synthetic catalog"),
    "train-teacher": (cmd_train_teacher, "bootstrap impressions, train the ranking model, write logs"),
    "train-prerank": (cmd_train_prerank, "train one pre-ranking student"),
    "evaluate": (cmd_evaluate, "run the evaluation cascade for student checkpoints"),
    "report": (cmd_report, "summarize evaluation CSVs"),
    "run": (cmd_run, "run the whole pipeline"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coprlab", description="Consistency-oriented pre-ranking lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. world.n_ads=6000")
        if name == "train-prerank":
            p.add_argument("--method", required=True, help="configured method name (base, distill, rankflow, copr_uniform, copr, ...)")
        if name == "evaluate":
            p.add_argument("checkpoints", nargs="*", help="student checkpoints; defaults to every configured method")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "train-prerank" and args.method not in cfg.methods:
            parser.error(f"unknown method {args.method!r}; choose from {', '.join(cfg.methods)}")
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (MissingInput, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
