"""Shared tiny-model builders for the unit tests."""

from __future__ import annotations

import numpy as np
import pytest

from emea import autodiff as ad
from emea.corpus import NER_TAGS, VarietySpec, generate_continuum, generate_corpus
from emea.encoder import AdapterParams, Encoder, ModelConfig
from emea.tokenizer import Vocabulary


def tiny_corpus(n: int = 40, seed: int = 0, divergence: float = 0.0, labeled: bool = False):
    root = VarietySpec("root", vocab_size=8, lexicon_seed=3)
    spec = root if divergence == 0 else generate_continuum(root, 2, [divergence], seed=5)[1]
    return generate_corpus(spec, n, labeled=labeled, seed=seed)


def tiny_model(seed: int = 0, d_model: int = 8, n_layers: int = 2, n_heads: int = 2, n_tags: int = len(NER_TAGS), dtype=np.float32) -> Encoder:
    vocab = Vocabulary.build([tiny_corpus(60)], min_count=1)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_ff=2 * d_model, d_adapter=max(1, d_model // 4), max_len=64, n_tags=n_tags)
    model = Encoder.create(cfg, vocab, seed)
    if dtype != np.float32:
        model.astype(dtype)
    return model


def random_adapter(model: Encoder, kind: str, name: str, seed: int, scale: float = 0.5, dtype=None) -> AdapterParams:
    """An adapter with every weight random, so it is far from the identity."""
    a = model.new_adapter(kind, name, seed)
    rng = np.random.default_rng(seed + 1000)
    for p in a.params.values():
        p.value = (p.value + rng.normal(0.0, scale, p.shape)).astype(np.float32)
    if dtype is not None:
        a.astype(dtype)
    return a


def fd_grad(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        g[i] = (f(up) - f(down)) / (2 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def snapshot(*groups) -> list[bytes]:
    return [(k, g.parameters()[k].value.tobytes()) for g in groups for k in sorted(g.parameters())]


@pytest.fixture
def model() -> Encoder:
    return tiny_model()


@pytest.fixture
def sentences() -> list[list[str]]:
    return tiny_corpus(6, seed=1, divergence=0.2)


def leaf(data, dtype=np.float64) -> ad.Node:
    return ad.tensor(data, requires_grad=True, dtype=dtype)


def emea_setup(seed: int, d_model: int = 8, R: int = 2, dtype=np.float64, n_sentences: int = 4):
    """Tiny model, R distinct random language adapters, a task adapter and a batch."""
    from emea.ensemble import LanguageCombiner

    model = tiny_model(seed, d_model=d_model, n_heads=2, dtype=dtype)
    adapters = [random_adapter(model, "language", f"l{i}", seed * 10 + i, dtype=dtype) for i in range(R)]
    task = random_adapter(model, "task", "t", seed * 10 + 9, dtype=dtype)
    batch = model.encode(tiny_corpus(n_sentences, seed=seed, divergence=0.2))
    return model, LanguageCombiner(adapters, mode="weighted"), task, batch


TINY_CONFIG = {
    "seeds": [0, 1, 2],
    "data": {"unlabeled_sentences": 200, "labeled_train": 100, "labeled_dev": 40, "test_sentences": 40},
    "model": {"d_model": 16, "d_ff": 32, "d_adapter": 4},
    "train": {
        "pretrain": {"epochs": 1},
        "language_adapter": {"epochs": 1},
        "task_adapter": {"epochs": 2, "lr": 1.0e-3},
        "fusion": {"epochs": 1},
        "budgeted": {"epochs": 1},
    },
    "budget": {"sizes": [50]},
}


def tiny_config(workdir):
    from emea.config import from_dict

    cfg = from_dict(TINY_CONFIG)
    cfg.paths.workdir = str(workdir)
    return cfg


@pytest.fixture(scope="session")
def prepared(tmp_path_factory):
    """A workdir with every artifact of the tiny config trained (read-only for tests)."""
    from emea.pipeline import prepare_all, train_budgeted

    cfg = tiny_config(tmp_path_factory.mktemp("work"))
    prepare_all(cfg)
    for s in cfg.seeds:
        train_budgeted(cfg, "test1", 50, s)
    return cfg


@pytest.fixture
def workdir_copy(prepared, tmp_path):
    """A private copy of the prepared workdir."""
    import shutil

    dst = tmp_path / "work"
    shutil.copytree(prepared.workdir, dst)
    return tiny_config(dst)


# --------------------------------------------------------------------------- #
# acceptance lines, printed once at the end of the session
# --------------------------------------------------------------------------- #

ACCEPTANCE: dict[int, str] = {}


def acceptance_line(n: int, ok: bool, detail: str) -> str:
    line = f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
