"""Evaluation grid, throughput benchmark, weight statistics and reports.

The results file holds one JSON object per line. Lines carrying a
``provenance`` key describe the run that appended the following records
(config digest, seeds, package version, timestamp); every other line is a
:class:`RunRecord`. Records never contain wall-clock data, so rerunning a
cell reproduces its line byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .corpus import TAGSETS, TaggedSentence
from .encoder import ConfigError, UsageError
from .ensemble import EmeaConfig, FusionCombiner, LanguageCombiner, cl_adapt, emea_adapt
from .metrics import METRICS, TASK_METRIC
from .pipeline import Workspace

log = logging.getLogger(__name__)

BASE_METHODS = ("en", "related", "cl", "fusion", "ensemble", "emea-s1", "emea-s10")


@dataclass
class RunRecord:
    variety: str
    method: str
    seed: int | None  # None marks the average over ``n_seeds`` per-seed rows
    metric_name: str
    value: float
    batch_size: int
    group: str = "group1"
    split: str = "test"
    steps: int | None = None
    gamma: float | None = None
    n_seeds: int = 1
    examples_per_second: float | None = None
    selected: str | None = None
    adapters: list[str] | None = None
    alpha_mean: list[float] | None = None
    alpha_std: list[float] | None = None
    alphas: list | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")
        if self.examples_per_second is not None and not self.examples_per_second > 0:
            raise ValueError("examples_per_second must be positive")
        if self.alpha_mean is not None and abs(sum(self.alpha_mean) - 1.0) > 1e-3:
            raise ValueError(f"alpha_mean sums to {sum(self.alpha_mean)}, expected 1")

    def cell(self) -> tuple:
        """Identity of the grid cell, seed excluded."""
        return (self.group, self.variety, self.method, self.split, self.batch_size, self.steps, self.gamma)

    def key(self) -> tuple:
        return self.cell() + (self.seed,)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(**d)


def read_results(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{n}: not a JSON record ({exc.msg})") from exc
        if "provenance" in d:
            continue
        out.append(RunRecord.from_dict(d))
    return out


def provenance(cfg: ExperimentConfig, command: str, seeds: Sequence[int] | None = None, **extra) -> dict:
    return {
        "provenance": {
            "command": command,
            "config_digest": cfg.digest(),
            "seeds": list(seeds if seeds is not None else cfg.seeds),
            "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "config": cfg.to_dict(),
            **extra,
        }
    }


def strip_provenance(text: str) -> str:
    """Results-file content without its provenance lines."""
    return "".join(line + "\n" for line in text.splitlines() if '"provenance"' not in line[:16])


def _chunks(items: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def parse_method(method: str) -> tuple[str, int | None]:
    """``new-adapter-10000`` -> ("new-adapter", 10000); others unchanged."""
    if method.startswith("new-adapter-"):
        tail = method[len("new-adapter-") :]
        if not tail.isdigit():
            raise ConfigError(f"bad budget in method {method!r}")
        return "new-adapter", int(tail)
    if method.startswith("single:"):
        return "single", None
    if method not in BASE_METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {list(BASE_METHODS)}, single:<adapter> or new-adapter-N")
    return method, None


class Evaluator:
    """Loads artifacts lazily and scores methods on one workdir."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.ws = Workspace(cfg)
        self.model = self.ws.model()
        self.model.backbone.set_trainable(False)
        self.tagset = TAGSETS[cfg.data.task]
        self.metric_name = TASK_METRIC[cfg.data.task]
        self._lang: dict = {}
        self._task: dict = {}
        self._fusion: dict = {}
        self._data: dict = {}
        self._related: dict = {}

    # artifacts ----------------------------------------------------------

    def lang(self, name: str):
        if name not in self._lang:
            self._lang[name] = self.ws.lang_adapter(name)
        return self._lang[name]

    def task(self, seed: int):
        if seed not in self._task:
            self._task[seed] = self.ws.task_adapter(seed)
        return self._task[seed]

    def fusion(self, seed: int):
        if seed not in self._fusion:
            self._fusion[seed] = self.ws.fusion(seed)
        return self._fusion[seed]

    def data(self, variety: str, split: str) -> list[TaggedSentence]:
        if (variety, split) not in self._data:
            self._data[variety, split] = self.ws.labeled(variety, split)
        return self._data[variety, split]

    def ensemble_adapters(self):
        return [self.lang(n) for n in self.ws.adapter_names]

    def emea_config(self, method: str, steps: int | None, gamma: float | None) -> EmeaConfig:
        e = self.cfg.emea
        if steps is None:
            steps = EmeaConfig.PRESETS[method] if method in EmeaConfig.PRESETS else e.steps
        return EmeaConfig(
            gamma=e.gamma if gamma is None else gamma,
            steps=steps,
            entropy_reduction=e.entropy_reduction,
            share_alpha_across_layers=e.share_alpha_across_layers,
            reset_per_batch=e.reset_per_batch,
        )

    # prediction ---------------------------------------------------------

    def predict(
        self,
        method: str,
        variety: str,
        seed: int,
        sentences: Sequence[TaggedSentence],
        batch_size: int,
        steps: int | None = None,
        gamma: float | None = None,
    ) -> tuple[list[list[str]], dict]:
        """Tags for ``sentences`` plus method details (chosen adapter, weights)."""
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        kind, budget = parse_method(method)
        task = self.task(seed)
        info: dict = {}
        model = self.model
        if kind == "related":
            name = self.select_related(variety, seed, batch_size)
            info["selected"] = name
            kind, lang = "static", LanguageCombiner([self.lang(name)], mode="single")
        elif kind == "en":
            kind, lang = "static", LanguageCombiner([self.lang(self.cfg.continuum.source)], mode="single")
        elif kind == "single":
            kind, lang = "static", LanguageCombiner([self.lang(method.split(":", 1)[1])], mode="single")
        elif kind == "new-adapter":
            kind, lang = "static", LanguageCombiner([self.ws.budget_adapter(variety, budget, seed)], mode="single")
        elif kind == "ensemble":
            kind, lang = "static", LanguageCombiner(self.ensemble_adapters(), mode="average")
        elif kind == "fusion":
            kind, lang = "static", FusionCombiner(self.ensemble_adapters(), self.fusion(seed))
        elif kind.startswith("emea"):
            emea_cfg = self.emea_config(method, steps, gamma)
            lang = LanguageCombiner(self.ensemble_adapters(), mode="weighted", share_alpha_across_layers=emea_cfg.share_alpha_across_layers)
            info["adapters"] = lang.names
            info["alphas"] = []
        preds: list[list[int]] = []
        for chunk in _chunks(sentences, batch_size):
            batch = model.encode([s.tokens for s in chunk])
            if kind == "static":
                preds.extend(model.predict(batch, lang, task))
            elif kind == "cl":
                c = self.cfg.cl
                res = cl_adapt(batch, model, self.lang(self.cfg.continuum.source), task, c.lr, c.steps, c.reset_per_batch, c.optimizer, self.cfg.emea.entropy_reduction)
                preds.extend(res.predictions)
            else:
                res = emea_adapt(batch, model, lang, task, emea_cfg)
                info["alphas"].append(res.alpha.tolist())
                preds.extend(res.predictions)
        return [[self.tagset[i] for i in p] for p in preds], info

    def score(self, gold: Sequence[TaggedSentence], tags: Sequence[Sequence[str]]) -> float:
        pred = [TaggedSentence(list(g.tokens), list(t)) for g, t in zip(gold, tags)]
        return float(METRICS[self.metric_name](gold, pred))

    def select_related(self, variety: str, seed: int, batch_size: int | None = None) -> str:
        """Related adapter with the best dev score on ``variety``."""
        key = (variety, seed)
        if key not in self._related:
            dev = self.data(variety, "dev")
            bs = batch_size or self.cfg.eval.batch_size
            scores = {}
            for name in self.cfg.continuum.names("related"):
                tags, _ = self.predict(f"single:{name}", variety, seed, dev, bs)
                scores[name] = self.score(dev, tags)
            if not scores:
                raise ConfigError("the continuum has no related varieties")
            self._related[key] = max(scores, key=lambda n: (scores[n], -list(scores).index(n)))
        return self._related[key]

    def evaluate(
        self,
        variety: str,
        method: str,
        seed: int,
        batch_size: int | None = None,
        split: str = "test",
        steps: int | None = None,
        gamma: float | None = None,
    ) -> RunRecord:
        bs = batch_size or self.cfg.eval.batch_size
        gold = self.data(variety, split)
        tags, info = self.predict(method, variety, seed, gold, bs, steps, gamma)
        rec = RunRecord(
            variety=variety,
            method=method,
            seed=seed,
            metric_name=self.metric_name,
            value=self.score(gold, tags),
            batch_size=bs,
            group=self.cfg.continuum.group,
            split=split,
            steps=steps,
            gamma=gamma,
            selected=info.get("selected"),
        )
        if "alphas" in info:
            flat = _flat_alphas(info["alphas"], len(info["adapters"]))
            rec.adapters = info["adapters"]
            rec.alphas = info["alphas"]
            rec.alpha_mean = flat.mean(axis=0).tolist()
            rec.alpha_std = flat.std(axis=0).tolist()
        return rec


def _flat_alphas(alphas: list, r: int) -> np.ndarray:
    return np.asarray(alphas, dtype=np.float64).reshape(-1, r)


def average_records(rows: Sequence[RunRecord]) -> RunRecord:
    """Mean row of per-seed records sharing one cell."""
    if not rows:
        raise ValueError("nothing to average")
    cells = {r.cell() for r in rows}
    if len(cells) != 1:
        raise ValueError(f"records span several cells: {sorted(cells, key=str)}")
    first = rows[0]
    mean = RunRecord(
        variety=first.variety,
        method=first.method,
        seed=None,
        metric_name=first.metric_name,
        value=math.fsum(r.value for r in rows) / len(rows),
        batch_size=first.batch_size,
        group=first.group,
        split=first.split,
        steps=first.steps,
        gamma=first.gamma,
        n_seeds=len(rows),
    )
    if all(r.alphas for r in rows):
        flat = np.concatenate([_flat_alphas(r.alphas, len(r.adapters)) for r in rows])
        mean.adapters = first.adapters
        mean.alpha_mean = flat.mean(axis=0).tolist()
        mean.alpha_std = flat.std(axis=0).tolist()
    return mean


class ResultsFile:
    """Append-only results file with a single writer."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def records(self) -> list[RunRecord]:
        return read_results(self.path)

    def append(self, lines: Iterable[str]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
            fh.flush()

    def drop(self, keys: set[tuple]) -> None:
        """Rewrite the file without records whose key is in ``keys``."""
        if not self.path.exists():
            return
        kept = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            d = json.loads(line)
            if "provenance" in d or RunRecord.from_dict(d).key() not in keys:
                kept.append(line)
        self.path.write_text("".join(x + "\n" for x in kept), encoding="utf-8")


def check_artifacts(cfg: ExperimentConfig, methods: Sequence[str], varieties: Sequence[str], seeds: Sequence[int]) -> None:
    """Raise :class:`DependencyError` for the first artifact a grid would miss."""
    ws = Workspace(cfg)
    need = [(ws.backbone_path(), "backbone checkpoint")]
    need += [(ws.lang_path(n), f"language adapter checkpoint for {n}") for n in ws.adapter_names]
    for s in seeds:
        need.append((ws.task_path(s), f"task adapter checkpoint for seed {s}"))
        for m in methods:
            kind, budget = parse_method(m)
            if kind == "fusion":
                need.append((ws.fusion_path(s), f"fusion checkpoint for seed {s}"))
            elif kind == "new-adapter":
                need += [(ws.budget_path(v, budget, s), f"budgeted adapter for {v} N={budget}") for v in varieties]
    for v in varieties:
        need.append((ws.labeled_path(v, "test"), f"test data for {v}"))
    for path, what in need:
        Workspace.require(path, what)


def run_grid(
    cfg: ExperimentConfig,
    methods: Sequence[str] | None = None,
    varieties: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
    batch_size: int | None = None,
    steps: int | None = None,
    gamma: float | None = None,
    results_path: str | Path | None = None,
    force: bool = False,
    evaluator: Evaluator | None = None,
    command: str = "eval",
) -> list[RunRecord]:
    """Score every (variety, method, seed) cell plus one mean row per cell.

    Cells already present in the results file are reused, so an interrupted
    grid resumes where it stopped. ``force`` recomputes the requested cells.
    """
    methods = list(methods or cfg.eval.methods)
    varieties = list(varieties or cfg.continuum.names("test"))
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("no seeds to evaluate")
    for m in methods:
        parse_method(m)
    check_artifacts(cfg, methods, varieties, seeds)
    bs = batch_size or cfg.eval.batch_size
    group = cfg.continuum.group
    results = ResultsFile(results_path or cfg.results_path)

    def knobs(m):
        # --steps/--gamma only mean something for EMEA methods
        return (steps, gamma) if m.startswith("emea") else (None, None)

    def cell_key(v, m, s):
        return (group, v, m, "test", bs, *knobs(m), s)

    wanted = [(v, m, s) for v in varieties for m in methods for s in seeds]
    if force:
        results.drop({cell_key(v, m, s) for v, m, s in wanted} | {cell_key(v, m, None) for v in varieties for m in methods})
    have = {r.key(): r for r in results.records()}
    header_written = False

    def emit(rec: RunRecord) -> None:
        nonlocal header_written
        lines = [rec.to_json()]
        if not header_written:
            lines.insert(0, json.dumps(provenance(cfg, command, seeds), sort_keys=True))
            header_written = True
        results.append(lines)
        have[rec.key()] = rec

    ev = evaluator
    for v, m, s in wanted:
        if cell_key(v, m, s) in have:
            continue
        if ev is None:
            ev = Evaluator(cfg)
        t0 = time.perf_counter()
        rec = ev.evaluate(v, m, s, bs, steps=knobs(m)[0], gamma=knobs(m)[1])
        log.info("%s %s seed=%d %s=%.4f (%.1fs)", v, m, s, rec.metric_name, rec.value, time.perf_counter() - t0)
        emit(rec)
    out = []
    for v in varieties:
        for m in methods:
            rows = [have[cell_key(v, m, s)] for s in seeds]
            mean_key = cell_key(v, m, None)
            if mean_key not in have or have[mean_key].n_seeds != len(seeds):
                emit(average_records(rows))
            out.extend(rows)
            out.append(have[mean_key])
    return out


def alpha_stats(records: Iterable[RunRecord], variety: str | None = None) -> dict[str, tuple[list[str], np.ndarray, np.ndarray]]:
    """Per-variety mean and std of each adapter's weight over all batches."""
    pooled: dict[str, list] = defaultdict(list)
    names: dict[str, list[str]] = {}
    for r in records:
        if r.seed is None or not r.alphas or (variety is not None and r.variety != variety):
            continue
        pooled[r.variety].append(_flat_alphas(r.alphas, len(r.adapters)))
        names[r.variety] = r.adapters
    if not pooled:
        warnings.warn("no EMEA records with stored weights", RuntimeWarning, stacklevel=2)
        return {}
    out = {}
    for v, parts in pooled.items():
        flat = np.concatenate(parts)
        out[v] = (names[v], flat.mean(axis=0), flat.std(axis=0))
    return out


def batch_size_sweep(
    cfg: ExperimentConfig,
    variety: str | Sequence[str],
    method: str = "emea-s10",
    sizes: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
    results_path: str | Path | None = None,
    evaluator: Evaluator | None = None,
) -> list[RunRecord]:
    """One seed-averaged record per batch size."""
    varieties = [variety] if isinstance(variety, str) else list(variety)
    out = []
    ev = evaluator
    for size in sizes or cfg.eval.sweep_sizes:
        if ev is None:
            ev = Evaluator(cfg)
        rows = run_grid(cfg, [method], varieties, seeds, size, results_path=results_path, evaluator=ev, command="sweep")
        out.extend(r for r in rows if r.seed is None)
    return out


def bench_throughput(
    evaluator: Evaluator,
    method: str,
    batch_size: int,
    n_batches: int,
    warmup: int = 3,
    variety: str | None = None,
    seed: int | None = None,
    repeats: int = 3,
) -> float:
    """Examples per second over ``n_batches`` timed batches.

    ``warmup`` untimed batches run first. The best of ``repeats`` timed
    passes is reported, which filters scheduler noise.
    """
    if n_batches < 1:
        raise ConfigError(f"n_batches must be >= 1, got {n_batches}")
    if warmup < 0 or repeats < 1:
        raise ConfigError("warmup must be >= 0 and repeats >= 1")
    cfg = evaluator.cfg
    variety = variety or cfg.continuum.names("test")[0]
    seed = cfg.seeds[0] if seed is None else seed
    pool = evaluator.data(variety, "test")
    need = (warmup + n_batches) * batch_size
    sents = [pool[i % len(pool)] for i in range(need)]
    warm, timed = sents[: warmup * batch_size], sents[warmup * batch_size :]
    if warm:
        evaluator.predict(method, variety, seed, warm, batch_size)
    if parse_method(method)[0] == "related":
        evaluator.select_related(variety, seed)
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        evaluator.predict(method, variety, seed, timed, batch_size)
        best = min(best, time.perf_counter() - t0)
    return len(timed) / best


# --------------------------------------------------------------------------- #
# reports
# --------------------------------------------------------------------------- #


@dataclass
class Table:
    methods: list[str]
    varieties: list[str]
    values: dict[tuple[str, str], float] = field(default_factory=dict)

    def average(self, method: str) -> float | None:
        vals = [self.values.get((method, v)) for v in self.varieties]
        if any(x is None for x in vals) or not vals:
            return None
        return math.fsum(vals) / len(vals)


def build_table(records: Iterable[RunRecord], group: str | None = None, batch_size: int | None = None) -> Table:
    """Seed-averaged scores recomputed from per-seed rows, methods x varieties."""
    per_cell: dict[tuple, list[float]] = defaultdict(list)
    methods: list[str] = []
    varieties: list[str] = []
    for r in records:
        if r.seed is None or r.split != "test" or (group and r.group != group) or (batch_size and r.batch_size != batch_size):
            continue
        label = r.method if r.steps is None else f"{r.method}[T={r.steps}]"
        if r.gamma is not None:
            label += f"[g={r.gamma:g}]"
        if label not in methods:
            methods.append(label)
        if r.variety not in varieties:
            varieties.append(r.variety)
        per_cell[label, r.variety].append(r.value)
    order = {m: i for i, m in enumerate(BASE_METHODS)}
    methods.sort(key=lambda m: (order.get(m, len(order)), m))
    table = Table(methods, sorted(varieties))
    for k, vals in per_cell.items():
        table.values[k] = math.fsum(vals) / len(vals)
    return table


def render_text(table: Table, title: str = "") -> str:
    width = max([len(m) for m in table.methods] + [6])
    cols = table.varieties + ["avg"]
    lines = [title] if title else []
    lines.append(" ".join([f"{'method':<{width}}"] + [f"{c:>8}" for c in cols]))
    for m in table.methods:
        cells = [table.values.get((m, v)) for v in table.varieties] + [table.average(m)]
        lines.append(" ".join([f"{m:<{width}}"] + [f"{100 * x:8.1f}" if x is not None else f"{'-':>8}" for x in cells]))
    return "\n".join(lines) + "\n"


def render_tsv(table: Table) -> str:
    rows = ["\t".join(["method"] + table.varieties + ["avg"])]
    for m in table.methods:
        cells = [table.values.get((m, v)) for v in table.varieties] + [table.average(m)]
        rows.append("\t".join([m] + ["" if x is None else repr(x) for x in cells]))
    return "\n".join(rows) + "\n"


def report(results_path: str | Path, group: str | None = None, out_dir: str | Path | None = None) -> tuple[str, Path | None]:
    """Text table (scores in points) and, with ``out_dir``, a TSV of fractions."""
    records = read_results(results_path)
    if not records:
        raise UsageError(f"{results_path}: no records")
    tables = []
    sizes = sorted({r.batch_size for r in records if not group or r.group == group})
    written = None
    for size in sizes:
        t = build_table(records, group, size)
        if not t.methods:
            continue
        tables.append(render_text(t, f"group={group or 'all'} batch_size={size} metric={records[0].metric_name}"))
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            written = out_dir / f"table_{group or 'all'}_bs{size}.tsv"
            written.write_text(render_tsv(t), encoding="utf-8")
    if not tables:
        raise UsageError(f"{results_path}: no records for group {group!r}")
    return "\n".join(tables), written
