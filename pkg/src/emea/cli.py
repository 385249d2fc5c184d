"""Command-line entry point: ``emea <subcommand> [options]``.

Exit codes: 0 success, 2 usage error, 3 missing or unusable artifact,
4 invalid configuration, 1 anything else. Failures print one line to
stderr of the form ``emea-error category=<name> exit=<code> message=<json>``.

Every invocation appends its provenance (command, config digest, seeds,
version, timestamp, effective config) to ``<workdir>/logs/runs.jsonl``;
evaluation and benchmark outputs carry the same header inline.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from filelock import FileLock, Timeout

from . import harness, pipeline
from .checkpoint import CheckpointError
from .config import ExperimentConfig, apply_overrides, load_config
from .corpus import CorpusError
from .encoder import ConfigError, UsageError
from .training import DataError

log = logging.getLogger("emea")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_CONFIG = 0, 1, 2, 3, 4
LOCK_NAME = ".emea.lock"
DEFAULT_BENCH_METHODS = ("en", "ensemble", "emea-s1", "emea-s10")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    p.add_argument("--workdir", help="override paths.workdir (also EMEA_WORKDIR)")
    p.add_argument("--seed", type=int, action="append", help="seed; repeat for several (default: config seeds)")
    p.add_argument("--force", action="store_true", help="recompute outputs that already exist")
    p.add_argument("--lock-timeout", type=float, default=600.0, help="seconds to wait for the workdir lock")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="emea", description="Adapter ensembling and entropy-minimized ensembles on a synthetic dialect continuum.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="generate the continuum and its corpora")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the backbone with masked LM")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-lm-adapter", parents=[common], help="train language adapters (or budgeted new adapters)")
    p.add_argument("--variety", action="append", help="variety to train; repeatable")
    p.add_argument("--budget", type=int, nargs="*", help="train new adapters on N sentences of each test variety (no value: config sizes)")
    p.add_argument("--warm-start", help="initialise budgeted adapters from this language adapter")

    sub.add_parser("train-task-adapter", parents=[common], help="train the task adapter on source labeled data")
    sub.add_parser("train-fusion", parents=[common], help="train fusion layers over the ensemble set")

    p = sub.add_parser("eval", parents=[common], help="evaluate methods on test varieties")
    p.add_argument("--method", action="append", help="method; repeatable (default: config methods)")
    p.add_argument("--variety", action="append", help="test variety; repeatable (default: all)")
    p.add_argument("--steps", type=int, help="EMEA update steps, overriding the preset")
    p.add_argument("--gamma", type=float, help="EMEA learning rate")
    p.add_argument("--batch-size", type=int, action="append", help="evaluation batch size; repeat for a sweep")
    p.add_argument("--results", help="results file (default: config paths.results)")

    p = sub.add_parser("bench", parents=[common], help="measure inference throughput")
    p.add_argument("--method", action="append", help=f"method; repeatable (default: {', '.join(DEFAULT_BENCH_METHODS)})")
    p.add_argument("--variety")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-batches", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="throughput file (default: <workdir>/results/bench.jsonl)")

    p = sub.add_parser("report", parents=[common], help="render a method x variety table")
    p.add_argument("--results", help="results file (default: config paths.results)")
    p.add_argument("--group")
    p.add_argument("--out-dir", help="also write a TSV table here")
    p.add_argument("--alphas", action="store_true", help="print EMEA weight statistics")
    return parser


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.workdir:
        cfg.paths.workdir = args.workdir
    overrides = {}
    if args.command == "gen-data" and args.seed:
        overrides["data.seed"] = _one_seed(args)
    if args.command == "pretrain":
        overrides["train.pretrain.epochs"] = args.epochs
        if args.seed:
            overrides["train.pretrain.seed"] = _one_seed(args)
    if args.command == "train-lm-adapter":
        if args.budget is None and args.seed:
            overrides["train.language_adapter.seed"] = _one_seed(args)
        overrides["budget.warm_start"] = args.warm_start
    if overrides:
        workdir = cfg.paths.workdir
        cfg = apply_overrides(cfg, overrides)
        cfg.paths.workdir = workdir
    return cfg


def _one_seed(args) -> int:
    if len(args.seed) != 1:
        raise UsageError(f"{args.command} takes a single --seed")
    return args.seed[0]


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    return list(args.seed) if args.seed else list(cfg.seeds)


def _results_path(args, cfg: ExperimentConfig) -> Path:
    if args.results:
        return Path(args.results)
    return cfg.results_path


def _record_run(cfg: ExperimentConfig, args, argv: Sequence[str]) -> None:
    path = cfg.workdir / "logs" / "runs.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    header = harness.provenance(cfg, args.command, _seeds(args, cfg), argv=list(argv))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #


def cmd_gen_data(cfg, args) -> None:
    made = pipeline.gen_data(cfg, args.force)
    print(f"gen-data: {'wrote' if made else 'kept existing'} {pipeline.Workspace(cfg).data_dir}")


def cmd_pretrain(cfg, args) -> None:
    made = pipeline.pretrain(cfg, args.force)
    print(f"pretrain: {'wrote' if made else 'kept existing'} {pipeline.Workspace(cfg).backbone_path()}")


def cmd_train_lm_adapter(cfg, args) -> None:
    ws = pipeline.Workspace(cfg)
    if args.budget is None:
        names = args.variety or ws.adapter_names
        done = pipeline.train_lm_adapters(cfg, names, args.force)
        print(f"train-lm-adapter: trained {done or 'nothing'}; kept {[n for n in names if n not in done]}")
        return
    sizes = args.budget or list(cfg.budget.sizes)
    varieties = args.variety or list(cfg.budget.varieties)
    unknown = sorted(set(varieties) - set(cfg.continuum.names("test")))
    if unknown:
        raise ConfigError(f"budgeted adapters are for test varieties; got {unknown}")
    for v in varieties:
        for n in sizes:
            for s in _seeds(args, cfg):
                pipeline.train_budgeted(cfg, v, n, s, args.force)
                print(f"train-lm-adapter: {ws.budget_path(v, n, s)}")


def cmd_train_task_adapter(cfg, args) -> None:
    seeds = _seeds(args, cfg)
    done = pipeline.train_task_adapters(cfg, seeds, args.force)
    print(f"train-task-adapter: trained seeds {done}; kept {[s for s in seeds if s not in done]}")


def cmd_train_fusion(cfg, args) -> None:
    seeds = _seeds(args, cfg)
    done = pipeline.train_fusions(cfg, seeds, args.force)
    print(f"train-fusion: trained seeds {done}; kept {[s for s in seeds if s not in done]}")


def cmd_eval(cfg, args) -> None:
    methods = args.method or list(cfg.eval.methods)
    for m in methods:
        harness.parse_method(m)
    varieties = args.variety or cfg.continuum.names("test")
    unknown = sorted(set(varieties) - set(cfg.continuum.names("test")))
    if unknown:
        raise ConfigError(f"not test varieties of this continuum: {unknown}")
    sizes = args.batch_size or [cfg.eval.batch_size]
    if any(b < 1 for b in sizes):
        raise ConfigError(f"batch sizes must be >= 1, got {sizes}")
    path = _results_path(args, cfg)
    ev = harness.Evaluator(cfg)
    for bs in sizes:
        rows = harness.run_grid(
            cfg, methods, varieties, _seeds(args, cfg), bs, args.steps, args.gamma, path, args.force, ev, command="eval"
        )
        for r in rows:
            if r.seed is None:
                print(f"{r.variety}\t{r.method}\tbs={bs}\t{r.metric_name}={100 * r.value:.2f}")
    print(f"eval: results in {path}")


def cmd_bench(cfg, args) -> None:
    methods = args.method or list(DEFAULT_BENCH_METHODS)
    for m in methods:
        harness.parse_method(m)
    bs = cfg.eval.batch_size if args.batch_size is None else args.batch_size
    n = cfg.eval.bench_batches if args.n_batches is None else args.n_batches
    if bs < 1:
        raise ConfigError(f"batch size must be >= 1, got {bs}")
    warmup = cfg.eval.warmup_batches if args.warmup is None else args.warmup
    seed = _seeds(args, cfg)[0]
    ev = harness.Evaluator(cfg)
    out = Path(args.out) if args.out else cfg.workdir / "results" / "bench.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(harness.provenance(cfg, "bench", [seed]), sort_keys=True)]
    for m in methods:
        eps = harness.bench_throughput(ev, m, bs, n, warmup, args.variety, seed, args.repeats)
        print(f"{m}\tbs={bs}\t{eps:.1f} examples/s")
        rec = {"method": m, "batch_size": bs, "n_batches": n, "warmup": warmup, "seed": seed, "examples_per_second": eps}
        lines.append(json.dumps(rec, sort_keys=True))
    with open(out, "a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"bench: results in {out}")


def cmd_report(cfg, args) -> None:
    path = _results_path(args, cfg)
    pipeline.Workspace.require(path, "results file")
    text, written = harness.report(path, args.group, args.out_dir)
    print(text)
    if written is not None:
        print(f"report: wrote {written}")
    if args.alphas:
        records = [r for r in harness.read_results(path) if not args.group or r.group == args.group]
        for v, (names, mean, std) in sorted(harness.alpha_stats(records).items()):
            cells = " ".join(f"{n}={m:.3f}+-{s:.3f}" for n, m, s in zip(names, mean, std))
            print(f"alpha {v}: {cells}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-lm-adapter": cmd_train_lm_adapter,
    "train-task-adapter": cmd_train_task_adapter,
    "train-fusion": cmd_train_fusion,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
}


# --------------------------------------------------------------------------- #
# dispatch
# --------------------------------------------------------------------------- #


def _fail(category: str, code: int, message: str) -> int:
    print(f"emea-error category={category} exit={code} message={json.dumps(message)}", file=sys.stderr)
    return code


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "report":
            # read-only: no lock, no run record
            cmd_report(cfg, args)
            return EXIT_OK
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        with FileLock(str(cfg.workdir / LOCK_NAME), timeout=args.lock_timeout):
            _record_run(cfg, args, argv)
            COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except (pipeline.DependencyError, CheckpointError) as exc:
        return _fail("dependency", EXIT_DEPENDENCY, str(exc))
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except (DataError, CorpusError) as exc:
        return _fail("data", EXIT_OTHER, str(exc))
    except Timeout:
        return _fail("locked", EXIT_OTHER, f"another emea process holds {cfg.workdir / LOCK_NAME}")
    return EXIT_OK


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
