"""Workdir layout and the training phases of an experiment.

Every phase reads its inputs from the workdir, writes one artifact, and
skips work whose artifact already exists unless ``force`` is set.
"""

from __future__ import annotations

import logging
import zlib
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, PhaseConfig
from .corpus import (
    TAGSETS,
    TaggedSentence,
    VarietySpec,
    generate_continuum,
    generate_corpus,
    load_varieties,
    read_column_file,
    read_text_file,
    save_varieties,
    write_column_file,
    write_text_file,
)
from .encoder import AdapterParams, Encoder, ModelConfig
from .ensemble import FusionParams
from .tokenizer import Vocabulary
from .training import (
    TrainConfig,
    TrainLog,
    pretrain_backbone,
    train_adapter_budgeted,
    train_fusion,
    train_language_adapter,
    train_task_adapter,
)

log = logging.getLogger(__name__)

MLM_DEV_SENTENCES = 300


class DependencyError(RuntimeError):
    """A prerequisite artifact is missing from the workdir."""


def split_seed(base: int, name: str, split: str) -> int:
    return zlib.crc32(f"{base}:{name}:{split}".encode())


def phase_config(phase: PhaseConfig, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=phase.epochs,
        batch_size=phase.batch_size,
        lr=phase.lr,
        seed=phase.seed if seed is None else phase.seed + seed,
        mask_rate=phase.mask_rate,
        optimizer=phase.optimizer,
        betas=tuple(phase.betas),
        eps=phase.eps,
        spell_rate=phase.spell_rate,
    )


class Workspace:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.workdir

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def ckpt_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def log_path(self) -> Path:
        return self.root / "logs" / "train.jsonl"

    def varieties_path(self) -> Path:
        return self.data_dir / "varieties.yaml"

    def unlabeled_path(self, name: str, split: str = "train") -> Path:
        return self.data_dir / f"{name}.{split}.txt"

    def labeled_path(self, name: str, split: str) -> Path:
        return self.data_dir / f"{name}.{split}.tsv"

    def backbone_path(self) -> Path:
        return self.ckpt_dir / "backbone.ckpt"

    def lang_path(self, name: str) -> Path:
        return self.ckpt_dir / f"lang_{name}.ckpt"

    def task_path(self, seed: int) -> Path:
        return self.ckpt_dir / f"task_seed{seed}.ckpt"

    def fusion_path(self, seed: int) -> Path:
        return self.ckpt_dir / f"fusion_seed{seed}.ckpt"

    def budget_path(self, variety: str, n: int, seed: int) -> Path:
        return self.ckpt_dir / f"budget_{variety}_{n}_seed{seed}.ckpt"

    def train_log(self) -> TrainLog:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        return TrainLog(self.log_path)

    @staticmethod
    def require(path: Path, what: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing {what}: {path}")
        return path

    # ------------------------------------------------------------------ #
    # loading

    def varieties(self) -> dict[str, VarietySpec]:
        return {s.name: s for s in load_varieties(self.require(self.varieties_path(), "variety specs"))}

    def unlabeled(self, name: str, split: str = "train") -> list[list[str]]:
        return read_text_file(self.require(self.unlabeled_path(name, split), f"unlabeled corpus for {name}"))

    def labeled(self, name: str, split: str) -> list[TaggedSentence]:
        return read_column_file(self.require(self.labeled_path(name, split), f"{split} data for {name}"))

    def model(self) -> Encoder:
        ck = load_checkpoint(self.require(self.backbone_path(), "backbone checkpoint"))
        return ck.model

    def lang_adapter(self, name: str) -> AdapterParams:
        ck = load_checkpoint(self.require(self.lang_path(name), f"language adapter checkpoint for {name}"))
        return ck.adapters[name]

    def task_adapter(self, seed: int) -> AdapterParams:
        ck = load_checkpoint(self.require(self.task_path(seed), f"task adapter checkpoint for seed {seed}"))
        return ck.adapters[f"task_seed{seed}"]

    def fusion(self, seed: int) -> FusionParams:
        ck = load_checkpoint(self.require(self.fusion_path(seed), f"fusion checkpoint for seed {seed}"))
        return ck.fusions[f"fusion_seed{seed}"]

    def budget_adapter(self, variety: str, n: int, seed: int) -> AdapterParams:
        ck = load_checkpoint(self.require(self.budget_path(variety, n, seed), f"budgeted adapter for {variety} N={n}"))
        return next(iter(ck.adapters.values()))

    @property
    def adapter_names(self) -> list[str]:
        """The ensemble set: source adapter first, then related ones."""
        c = self.cfg.continuum
        return [c.source] + c.names("related")


def continuum_specs(cfg: ExperimentConfig) -> list[VarietySpec]:
    c = cfg.continuum
    names = [v.name for v in c.varieties]
    root = VarietySpec(names[0], vocab_size=c.vocab_size, lexicon_seed=c.lexicon_seed)
    return generate_continuum(
        root,
        len(names),
        [v.divergence for v in c.varieties[1:]],
        c.seed,
        parents=[names.index(v.parent) for v in c.varieties[1:]],
        names=names,
        replacement_factor=c.replacement_factor,
    )


def gen_data(cfg: ExperimentConfig, force: bool = False) -> bool:
    ws = Workspace(cfg)
    if ws.varieties_path().exists() and not force:
        log.info("data already generated in %s", ws.data_dir)
        return False
    ws.data_dir.mkdir(parents=True, exist_ok=True)
    c, d = cfg.continuum, cfg.data
    specs = {s.name: s for s in continuum_specs(cfg)}
    save_varieties(ws.varieties_path(), specs.values())
    for name in [c.source] + c.names("related"):
        s = specs[name]
        write_text_file(ws.unlabeled_path(name), generate_corpus(s, d.unlabeled_sentences, seed=split_seed(d.seed, name, "mlm")))
        write_text_file(ws.unlabeled_path(name, "dev"), generate_corpus(s, MLM_DEV_SENTENCES, seed=split_seed(d.seed, name, "mlm-dev")))
    src = specs[c.source]
    write_column_file(ws.labeled_path(c.source, "train"), generate_corpus(src, d.labeled_train, True, split_seed(d.seed, c.source, "train"), d.task))
    write_column_file(ws.labeled_path(c.source, "dev"), generate_corpus(src, d.labeled_dev, True, split_seed(d.seed, c.source, "dev"), d.task))
    for name in c.names("test"):
        s = specs[name]
        write_column_file(ws.labeled_path(name, "dev"), generate_corpus(s, d.labeled_dev, True, split_seed(d.seed, name, "dev"), d.task))
        write_column_file(ws.labeled_path(name, "test"), generate_corpus(s, d.test_sentences, True, split_seed(d.seed, name, "test"), d.task))
        write_text_file(ws.unlabeled_path(name, "dev"), generate_corpus(s, MLM_DEV_SENTENCES, seed=split_seed(d.seed, name, "mlm-dev")))
    return True


def budget_corpus(cfg: ExperimentConfig, variety: str) -> list[list[str]]:
    """Unlabeled text of a test variety, sized for the largest budget."""
    ws = Workspace(cfg)
    path = ws.unlabeled_path(variety, "budget")
    n = max(cfg.budget.sizes)
    if path.exists():
        corpus = read_text_file(path)
        if len(corpus) >= n:
            return corpus
    spec = ws.varieties()[variety]
    corpus = generate_corpus(spec, n, seed=split_seed(cfg.data.seed, variety, "budget"))
    write_text_file(path, corpus)
    return corpus


def pretrain(cfg: ExperimentConfig, force: bool = False) -> bool:
    ws = Workspace(cfg)
    if ws.backbone_path().exists() and not force:
        return False
    c = cfg.continuum
    corpora = [ws.unlabeled(n) for n in [c.source] + c.names("related")]
    # related varieties are under-represented in pretraining, as low-resource
    # languages are in a multilingual model's corpus; the vocabulary comes from
    # the same text, so words unseen there fall back to character pieces
    keep = [len(corpora[0])] + [int(round(cfg.data.related_pretrain_fraction * len(x))) for x in corpora[1:]]
    union = [s for corpus, k in zip(corpora, keep) for s in corpus[:k]]
    vocab = Vocabulary.build([union], min_count=cfg.data.vocab_min_count, max_pieces=cfg.data.max_pieces)
    m = cfg.model
    mc = ModelConfig(
        vocab_size=len(vocab),
        d_model=m.d_model,
        n_layers=m.n_layers,
        n_heads=m.n_heads,
        d_ff=m.d_ff,
        d_adapter=m.d_adapter,
        max_len=m.max_len,
        n_tags=len(TAGSETS[cfg.data.task]),
    )
    model = Encoder.create(mc, vocab, m.seed)
    pretrain_backbone(union, model, phase_config(cfg.train.pretrain), ws.train_log())
    save_checkpoint(ws.backbone_path(), model)
    return True


def train_lm_adapters(cfg: ExperimentConfig, names: list[str] | None = None, force: bool = False) -> list[str]:
    ws = Workspace(cfg)
    model = ws.model()
    done = []
    for name in names or ws.adapter_names:
        if ws.lang_path(name).exists() and not force:
            continue
        adapter = train_language_adapter(
            ws.unlabeled(name), model, name, phase_config(cfg.train.language_adapter), ws.train_log(), dev=ws.unlabeled(name, "dev")
        )
        save_checkpoint(ws.lang_path(name), adapters=[adapter])
        done.append(name)
    return done


def train_task_adapters(cfg: ExperimentConfig, seeds: list[int] | None = None, force: bool = False) -> list[int]:
    ws = Workspace(cfg)
    src = cfg.continuum.source
    model = ws.model()
    src_adapter = ws.lang_adapter(src)
    train, dev = ws.labeled(src, "train"), ws.labeled(src, "dev")
    done = []
    for seed in seeds if seeds is not None else cfg.seeds:
        if ws.task_path(seed).exists() and not force:
            continue
        task = train_task_adapter(
            train, model, src_adapter, phase_config(cfg.train.task_adapter, seed), TAGSETS[cfg.data.task], f"task_seed{seed}", ws.train_log(), dev
        )
        save_checkpoint(ws.task_path(seed), adapters=[task], extra_meta={"task": cfg.data.task, "seed": seed})
        done.append(seed)
    return done


def train_fusions(cfg: ExperimentConfig, seeds: list[int] | None = None, force: bool = False) -> list[int]:
    ws = Workspace(cfg)
    src = cfg.continuum.source
    model = ws.model()
    adapters = [ws.lang_adapter(n) for n in ws.adapter_names]
    train, dev = ws.labeled(src, "train"), ws.labeled(src, "dev")
    done = []
    for seed in seeds if seeds is not None else cfg.seeds:
        if ws.fusion_path(seed).exists() and not force:
            continue
        task = ws.task_adapter(seed)
        fusion = train_fusion(train, model, adapters, task, phase_config(cfg.train.fusion, seed), TAGSETS[cfg.data.task], ws.train_log(), dev)
        fusion.name = f"fusion_seed{seed}"
        save_checkpoint(ws.fusion_path(seed), fusions=[fusion], extra_meta={"adapters": [], "ensemble": ws.adapter_names})
        done.append(seed)
    return done


def train_budgeted(cfg: ExperimentConfig, variety: str, n: int, seed: int, force: bool = False) -> AdapterParams:
    """Adapter for a test variety from ``n`` of its own sentences."""
    ws = Workspace(cfg)
    path = ws.budget_path(variety, n, seed)
    if path.exists() and not force:
        return ws.budget_adapter(variety, n, seed)
    model = ws.model()
    warm = ws.lang_adapter(cfg.budget.warm_start) if cfg.budget.warm_start else None
    adapter = train_adapter_budgeted(
        budget_corpus(cfg, variety), n, model, f"new-{variety}-{n}", phase_config(cfg.train.budgeted, seed), warm, ws.train_log()
    )
    save_checkpoint(path, adapters=[adapter])
    return adapter


def prepare_all(cfg: ExperimentConfig, force: bool = False, fusion: bool = True) -> None:
    """Every training phase up to (not including) evaluation."""
    gen_data(cfg, force)
    pretrain(cfg, force)
    train_lm_adapters(cfg, force=force)
    train_task_adapters(cfg, force=force)
    if fusion:
        train_fusions(cfg, force=force)

