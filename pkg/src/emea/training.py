"""Training phases: backbone MLM, language adapters, task adapter, fusion.

Each phase unfreezes exactly one parameter group and trains it with the
optimizer named in :class:`TrainConfig`; everything else is frozen for the
duration, so its bits are untouched.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import TaggedSentence
from .encoder import AdapterParams, ConfigError, Encoder, ParamGroup
from .ensemble import FusionCombiner, FusionParams, LanguageCombiner, frozen
from .optim import make_optimizer
from .tokenizer import MASK_ID, Batch, spelling_noise

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Training data is missing or unusable."""


class BudgetWarning(UserWarning):
    """A budgeted adapter got no data and no warm start."""


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    mask_rate: float = 0.15
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # share of in-vocabulary words spelled out as characters during training
    spell_rate: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"epochs must be >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.mask_rate < 1:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if self.optimizer not in ("sgd", "adam", "adaptive-moments"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.spell_rate < 1:
            raise ConfigError(f"spell_rate must be in [0, 1), got {self.spell_rate}")
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class TrainLog:
    """Per-epoch records; optionally mirrored to a JSON-lines file."""

    path: str | Path | None = None
    records: list[dict] = field(default_factory=list)

    def add(self, phase: str, epoch: int, split: str, loss: float, metric: float | None, seconds: float) -> None:
        rec = {"phase": phase, "epoch": epoch, "split": split, "loss": loss, "metric": metric, "seconds": round(seconds, 4)}
        self.records.append(rec)
        log.info("%s epoch %d %s loss=%.4f metric=%s", phase, epoch, split, loss, metric)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def losses(self, phase: str | None = None, split: str = "train") -> list[float]:
        return [r["loss"] for r in self.records if r["split"] == split and (phase is None or r["phase"] == phase)]


# --------------------------------------------------------------------------- #
# masked language modelling
# --------------------------------------------------------------------------- #


def mask_tokens(batch: Batch, rate: float, rng: np.random.Generator, vocab_regular_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pick positions at ``rate``; replace 80% by [MASK], 10% random, keep 10%.

    Returns the corrupted ids and ``[B*L]`` targets (-100 where not masked).
    At least one real token per batch is always selected.
    """
    ids = batch.ids.copy()
    chosen = (rng.random(ids.shape) < rate) & batch.mask
    if not chosen.any():
        real = np.flatnonzero(batch.mask)
        chosen.flat[real[rng.integers(len(real))]] = True
    targets = np.where(chosen, batch.ids, -100).reshape(-1)
    action = rng.random(ids.shape)
    ids[chosen & (action < 0.8)] = MASK_ID
    rand = chosen & (action >= 0.8) & (action < 0.9)
    ids[rand] = rng.choice(vocab_regular_ids, size=int(rand.sum()))
    return ids, targets


def _masked(batch: Batch, ids: np.ndarray) -> Batch:
    return Batch(ids, batch.mask, batch.heads, batch.n_words)


def mlm_loss(model: Encoder, batch: Batch, lang, rng: np.random.Generator, rate: float) -> tuple[ad.Node, float]:
    ids, targets = mask_tokens(batch, rate, rng, model.vocab.regular_ids)
    rows = np.flatnonzero(targets != -100)
    logits = model.mlm_logits(model.hidden(_masked(batch, ids), lang), rows)
    loss = ad.cross_entropy(logits, targets[rows])
    acc = float(np.mean(np.argmax(logits.value, axis=1) == targets[rows]))
    return loss, acc


def evaluate_mlm(model: Encoder, sentences: Sequence[Sequence[str]], lang=None, seed: int = 12345, rate: float = 0.15, batch_size: int = 64) -> float:
    """Held-out MLM loss with a fixed masking seed (token-weighted mean)."""
    if not sentences:
        raise DataError("cannot evaluate MLM loss on an empty corpus")
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for start in range(0, len(sentences), batch_size):
        batch = model.encode(sentences[start : start + batch_size])
        ids, targets = mask_tokens(batch, rate, rng, model.vocab.regular_ids)
        rows = np.flatnonzero(targets != -100)
        n = len(rows)
        loss = ad.cross_entropy(model.mlm_logits(model.hidden(_masked(batch, ids), lang), rows), targets[rows])
        total += loss.item() * n
        count += n
    return total / count


# --------------------------------------------------------------------------- #
# generic loop
# --------------------------------------------------------------------------- #


def _epochs(
    phase: str,
    items: Sequence,
    trainable: ParamGroup,
    cfg: TrainConfig,
    loss_fn: Callable[[list, np.random.Generator], tuple[ad.Node, float]],
    train_log: TrainLog | None,
    dev_fn: Callable[[], tuple[float, float | None]] | None = None,
) -> None:
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, trainable.parameters().values(), cfg.lr, cfg.betas, cfg.eps)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(items))
        losses, metrics, weights = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [items[i] for i in order[start : start + cfg.batch_size]]
            loss, metric = loss_fn(chunk, rng)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
            metrics.append(metric)
            weights.append(len(chunk))
        if train_log is not None:
            train_log.add(phase, epoch, "train", float(np.average(losses, weights=weights)), float(np.average(metrics, weights=weights)), time.perf_counter() - t0)
            if dev_fn is not None:
                t1 = time.perf_counter()
                dev_loss, dev_metric = dev_fn()
                train_log.add(phase, epoch, "dev", dev_loss, dev_metric, time.perf_counter() - t1)


def pretrain_backbone(corpus: Sequence[Sequence[str]], model: Encoder, cfg: TrainConfig, train_log: TrainLog | None = None) -> None:
    """MLM pretraining of the backbone itself (no adapters)."""
    if not corpus:
        raise DataError("empty pretraining corpus")
    model.backbone.set_trainable(True)
    try:
        _epochs(
            "pretrain",
            corpus,
            model.backbone,
            cfg,
            lambda chunk, rng: mlm_loss(model, model.encode(chunk, spelling_noise(chunk, cfg.spell_rate, rng)), None, rng, cfg.mask_rate),
            train_log,
        )
    finally:
        model.backbone.set_trainable(False)


def _train_adapter_mlm(phase: str, corpus, model: Encoder, adapter: AdapterParams, cfg: TrainConfig, train_log, dev) -> AdapterParams:
    lang = LanguageCombiner([adapter], mode="single")
    dev_fn = None
    if dev:
        dev_fn = lambda: (evaluate_mlm(model, dev, lang, rate=cfg.mask_rate), None)  # noqa: E731
    with frozen(model.backbone):
        adapter.set_trainable(True)
        try:
            _epochs(phase, corpus, adapter, cfg, lambda chunk, rng: mlm_loss(model, model.encode(chunk, spelling_noise(chunk, cfg.spell_rate, rng)), lang, rng, cfg.mask_rate), train_log, dev_fn)
        finally:
            adapter.set_trainable(False)
    return adapter


def train_language_adapter(
    corpus: Sequence[Sequence[str]],
    model: Encoder,
    name: str,
    cfg: TrainConfig,
    train_log: TrainLog | None = None,
    dev: Sequence[Sequence[str]] | None = None,
    init: AdapterParams | None = None,
) -> AdapterParams:
    """Masked-LM training of a new language adapter over the frozen backbone."""
    if not corpus:
        raise DataError(f"empty corpus for language adapter {name!r}")
    adapter = init.copy(name) if init is not None else model.new_adapter("language", name, cfg.seed)
    return _train_adapter_mlm(f"lang:{name}", corpus, model, adapter, cfg, train_log, dev)


def tag_targets(batch: Batch, sentences: Sequence[TaggedSentence], tag_index: dict[str, int]) -> np.ndarray:
    targets = np.full(batch.ids.size, -100, dtype=np.int64)
    tags = [tag_index[t] for s in sentences for t in s.tags]
    targets[batch.heads] = tags
    return targets


def _tagging_loss(model: Encoder, chunk: Sequence[TaggedSentence], lang, task: AdapterParams, tag_index, rng=None, spell_rate: float = 0.0) -> tuple[ad.Node, float]:
    tokens = [s.tokens for s in chunk]
    batch = model.encode(tokens, spelling_noise(tokens, spell_rate, rng) if rng is not None else None)
    targets = tag_targets(batch, chunk, tag_index)
    logits = model.logits(batch, lang, task, head="task")
    loss = ad.cross_entropy(logits, targets)
    keep = targets != -100
    acc = float(np.mean(np.argmax(logits.value[keep], axis=1) == targets[keep]))
    return loss, acc


def tagging_loss(model: Encoder, data: Sequence[TaggedSentence], lang, task: AdapterParams, tagset: Sequence[str], batch_size: int = 64) -> tuple[float, float]:
    """Word-weighted cross-entropy and accuracy over a labeled corpus."""
    index = {t: i for i, t in enumerate(tagset)}
    total, correct, n = 0.0, 0.0, 0
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        loss, acc = _tagging_loss(model, chunk, lang, task, index)
        words = sum(len(s) for s in chunk)
        total += loss.item() * words
        correct += acc * words
        n += words
    return total / n, correct / n


def _check_tagset(model: Encoder, data: Sequence[TaggedSentence], tagset: Sequence[str]) -> dict[str, int]:
    if len(tagset) != model.config.n_tags:
        raise ConfigError(f"tag set has {len(tagset)} labels but the model has n_tags={model.config.n_tags}")
    index = {t: i for i, t in enumerate(tagset)}
    unknown = {t for s in data for t in s.tags} - set(index)
    if unknown:
        raise ConfigError(f"labels outside the tag set: {sorted(unknown)}")
    return index


def train_task_adapter(
    labeled: Sequence[TaggedSentence],
    model: Encoder,
    src_adapter: AdapterParams,
    cfg: TrainConfig,
    tagset: Sequence[str],
    name: str = "task",
    train_log: TrainLog | None = None,
    dev: Sequence[TaggedSentence] | None = None,
) -> AdapterParams:
    """Task adapter and head stacked on the frozen source language adapter."""
    if not labeled:
        raise DataError("empty labeled corpus")
    index = _check_tagset(model, labeled, tagset)
    task = model.new_adapter("task", name, cfg.seed)
    lang = LanguageCombiner([src_adapter], mode="single")
    dev_fn = (lambda: tagging_loss(model, dev, lang, task, tagset)) if dev else None
    with frozen(model.backbone, src_adapter):
        task.set_trainable(True)
        try:
            _epochs(f"task:{name}", labeled, task, cfg, lambda chunk, rng: _tagging_loss(model, chunk, lang, task, index, rng, cfg.spell_rate), train_log, dev_fn)
        finally:
            task.set_trainable(False)
    return task


def train_fusion(
    labeled: Sequence[TaggedSentence],
    model: Encoder,
    adapters: Sequence[AdapterParams],
    task: AdapterParams,
    cfg: TrainConfig,
    tagset: Sequence[str],
    train_log: TrainLog | None = None,
    dev: Sequence[TaggedSentence] | None = None,
) -> FusionParams:
    """Fusion projections trained on source labels; all adapters stay frozen."""
    if len(adapters) < 2:
        raise ConfigError(f"fusion needs at least 2 adapters, got {len(adapters)}")
    if not labeled:
        raise DataError("empty labeled corpus")
    index = _check_tagset(model, labeled, tagset)
    fusion = FusionParams.create(len(adapters), model.config.d_model, model.config.n_layers, np.random.default_rng(cfg.seed))
    lang = FusionCombiner(adapters, fusion)
    dev_fn = (lambda: tagging_loss(model, dev, lang, task, tagset)) if dev else None
    with frozen(model.backbone, task, *adapters):
        fusion.set_trainable(True)
        try:
            if train_log is not None and dev_fn is not None:
                loss, acc = dev_fn()
                train_log.add("fusion", 0, "dev", loss, acc, 0.0)
            _epochs("fusion", labeled, fusion, cfg, lambda chunk, rng: _tagging_loss(model, chunk, lang, task, index, rng, cfg.spell_rate), train_log, dev_fn)
        finally:
            fusion.set_trainable(False)
    return fusion


def budget_slice(corpus: Sequence, n: int, seed: int) -> list:
    """The first ``n`` items of a seeded shuffle of ``corpus``."""
    if not 0 <= n <= len(corpus):
        raise DataError(f"budget {n} outside [0, {len(corpus)}]")
    order = np.random.default_rng(seed).permutation(len(corpus))
    return [corpus[i] for i in order[:n]]


def train_adapter_budgeted(
    corpus: Sequence[Sequence[str]],
    n: int,
    model: Encoder,
    name: str,
    cfg: TrainConfig,
    warm_start: AdapterParams | None = None,
    train_log: TrainLog | None = None,
) -> AdapterParams:
    """Language adapter trained on exactly ``n`` sentences of ``corpus``."""
    data = budget_slice(corpus, n, cfg.seed)
    if n == 0:
        if warm_start is not None:
            return warm_start.copy(name)
        warnings.warn(f"adapter {name!r}: no data and no warm start, returning the identity adapter", BudgetWarning, stacklevel=2)
        return model.new_adapter("language", name, cfg.seed)
    init = warm_start.copy(name) if warm_start is not None else model.new_adapter("language", name, cfg.seed)
    return _train_adapter_mlm(f"budget:{name}", data, model, init, cfg, train_log, None)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(d["betas"])
    return d
