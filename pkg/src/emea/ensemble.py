"""Test-time combination of language adapters.

Three ways to fill the language slot of every encoder layer from a set of R
adapters: pick one, average them, or mix them with weights ``softmax(beta)``.
:func:`emea_adapt` tunes ``beta`` per test batch by gradient descent on the
prediction entropy, then predicts with the tuned weights. The continual
learning and fusion baselines live here too.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node
from .encoder import AdapterParams, ConfigError, Encoder, ParamGroup, UsageError
from .optim import make_optimizer
from .tokenizer import Batch

MODES = ("single", "average", "weighted")


class LanguageCombiner:
    """An ordered adapter set plus the rule that mixes their outputs.

    In ``weighted`` mode the mixing weights are ``alpha = softmax(beta)``;
    ``beta`` has shape ``[R]`` when shared across layers and
    ``[n_layers, R]`` otherwise.
    """

    def __init__(
        self,
        adapters: Sequence[AdapterParams],
        mode: str = "weighted",
        share_alpha_across_layers: bool = True,
        active: int = 0,
        frozen: bool = False,
    ):
        if not adapters:
            raise ConfigError("a language combiner needs at least one adapter")
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        widths = {a.d_model for a in adapters}
        layers = {a.n_layers for a in adapters}
        if len(widths) != 1 or len(layers) != 1:
            raise ConfigError(f"adapters disagree on width {sorted(widths)} or depth {sorted(layers)}")
        if not 0 <= active < len(adapters):
            raise ConfigError(f"active index {active} outside [0, {len(adapters)})")
        self.adapters = list(adapters)
        self.mode = mode
        self.active = active
        self.share_alpha_across_layers = share_alpha_across_layers
        self.n_layers = adapters[0].n_layers
        self.frozen = frozen or mode != "weighted"
        shape = (self.R,) if share_alpha_across_layers else (self.n_layers, self.R)
        dtype = adapters[0].params["layer0.ln.g"].dtype
        self.beta = Node(np.zeros(shape, dtype=dtype), requires_grad=not self.frozen, name="beta")

    @property
    def R(self) -> int:
        return len(self.adapters)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.adapters]

    def reset(self) -> None:
        """Uniform weights: ``beta = 0``."""
        self.beta.value = np.zeros_like(self.beta.value)
        self.beta.grad = None

    def weights(self, layer_index: int = 0) -> Node:
        if self.mode == "single":
            w = np.zeros(self.R, dtype=self.beta.dtype)
            w[self.active] = 1
            return Node(w)
        if self.mode == "average":
            return Node(np.full(self.R, 1.0 / self.R, dtype=self.beta.dtype))
        if self.share_alpha_across_layers:
            return ad.softmax(self.beta)
        row = ad.reshape(ad.take_rows(self.beta, [layer_index]), (self.R,))
        return ad.softmax(row)

    def alpha(self) -> np.ndarray:
        """Current mixing weights; ``[R]`` or ``[n_layers, R]``."""
        if self.mode == "weighted" and not self.share_alpha_across_layers:
            return np.stack([self.weights(i).value for i in range(self.n_layers)])
        return self.weights(0).value.copy()

    def apply(self, h: Node, layer_index: int) -> Node:
        return combine(h, self, layer_index)


def combine(h: Node, c: LanguageCombiner, layer_index: int) -> Node:
    """Mix the outputs of every adapter in ``c`` at one layer."""
    if c.mode == "single":
        return c.adapters[c.active].apply(h, layer_index)
    outs = [a.apply(h, layer_index) for a in c.adapters]
    return ad.mix(outs, c.weights(layer_index))


@contextlib.contextmanager
def frozen(*groups: ParamGroup | None):
    """Temporarily switch off gradients for parameter groups."""
    saved = []
    for g in groups:
        if g is None:
            continue
        for p in g.parameters().values():
            saved.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


# --------------------------------------------------------------------------- #
# EMEA
# --------------------------------------------------------------------------- #


@dataclass
class EmeaConfig:
    gamma: float = 10.0
    steps: int = 10
    entropy_reduction: str = "sum"
    share_alpha_across_layers: bool = True
    reset_per_batch: bool = True

    PRESETS = {"emea-s1": 1, "emea-s10": 10}

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.entropy_reduction not in ("sum", "mean"):
            raise ConfigError(f"entropy_reduction must be 'sum' or 'mean', got {self.entropy_reduction!r}")

    @classmethod
    def preset(cls, method: str, **overrides) -> EmeaConfig:
        if method not in cls.PRESETS:
            raise ConfigError(f"no EMEA preset named {method!r}")
        return cls(steps=cls.PRESETS[method], **overrides)


@dataclass
class EmeaResult:
    alpha: np.ndarray
    predictions: list[list[int]]
    # entropy before each update, then at the final weights
    entropies: list[float] = field(default_factory=list)


def _as_batch(model: Encoder, batch) -> Batch:
    return batch if isinstance(batch, Batch) else model.encode(batch)


def batch_entropy(model: Encoder, batch: Batch, lang, task: AdapterParams, reduction: str = "sum") -> Node:
    """Prediction entropy summed (or averaged) over the batch's words."""
    return ad.entropy(model.word_probs(batch, lang, task), reduction=reduction)


def emea_adapt(batch, model: Encoder, combiner: LanguageCombiner, task: AdapterParams, cfg: EmeaConfig | None = None) -> EmeaResult:
    """Entropy-minimised ensemble weights for one test batch, then predict.

    Runs ``cfg.steps`` plain gradient steps ``beta -= gamma * dH/dbeta``
    starting from uniform weights (when ``reset_per_batch``). Backbone,
    adapters and task adapter are frozen throughout.
    """
    cfg = cfg or EmeaConfig()
    if combiner.mode != "weighted":
        raise UsageError(f"EMEA needs a combiner in weighted mode, got {combiner.mode!r}")
    if cfg.steps > 0 and combiner.frozen:
        raise UsageError("EMEA cannot update a frozen weighting")
    batch = _as_batch(model, batch)
    if cfg.reset_per_batch:
        combiner.reset()
    entropies = []
    with frozen(model.backbone, task, *combiner.adapters):
        for _ in range(cfg.steps):
            h = batch_entropy(model, batch, combiner, task, cfg.entropy_reduction)
            entropies.append(h.item())
            combiner.beta.grad = None
            ad.backward(h)
            step = combiner.beta.grad_or_zeros() * combiner.beta.dtype.type(cfg.gamma)
            combiner.beta.value = (combiner.beta.value - step).astype(combiner.beta.dtype)
            combiner.beta.grad = None
        probs = model.word_probs(batch, combiner, task)
    entropies.append(ad.entropy(probs, reduction=cfg.entropy_reduction).item())
    preds = batch.split_words(np.argmax(probs.value, axis=1).tolist())
    return EmeaResult(combiner.alpha(), preds, entropies)


# --------------------------------------------------------------------------- #
# continual-learning baseline
# --------------------------------------------------------------------------- #


@dataclass
class CLResult:
    predictions: list[list[int]]
    adapter: AdapterParams
    entropies: list[float] = field(default_factory=list)


def cl_adapt(
    batch,
    model: Encoder,
    adapter: AdapterParams,
    task: AdapterParams,
    lr: float = 2e-5,
    steps: int = 1,
    reset_per_batch: bool = True,
    optimizer: str = "adam",
    entropy_reduction: str = "sum",
) -> CLResult:
    """Entropy-minimising updates of one language adapter's own weights.

    With ``reset_per_batch`` the update runs on a fresh copy, so ``adapter``
    is untouched; otherwise ``adapter`` itself is updated in place and
    carries over to the next batch.
    """
    if model.backbone.trainable:
        raise ContractError("the backbone must stay frozen during test-time updates")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    batch = _as_batch(model, batch)
    work = adapter.copy() if reset_per_batch else adapter
    lang = LanguageCombiner([work], mode="single")
    entropies = []
    with frozen(task):
        work.set_trainable(True)
        opt = make_optimizer(optimizer, work.parameters().values(), lr)
        try:
            for _ in range(steps):
                h = batch_entropy(model, batch, lang, task, entropy_reduction)
                entropies.append(h.item())
                opt.zero_grad()
                ad.backward(h)
                opt.step()
        finally:
            work.set_trainable(False)
        probs = model.word_probs(batch, lang, task)
    entropies.append(ad.entropy(probs, reduction=entropy_reduction).item())
    preds = batch.split_words(np.argmax(probs.value, axis=1).tolist())
    return CLResult(preds, work, entropies)


# --------------------------------------------------------------------------- #
# fusion baseline
# --------------------------------------------------------------------------- #


class FusionParams(ParamGroup):
    """Per-layer query, key and value projections over adapter outputs."""

    def __init__(self, n_adapters: int, n_layers: int, params: dict[str, Node], name: str = "fusion"):
        self.n_adapters = n_adapters
        self.n_layers = n_layers
        self.params = params
        self.name = name

    @classmethod
    def create(cls, n_adapters: int, d_model: int, n_layers: int, rng: np.random.Generator, name: str = "fusion") -> FusionParams:
        params = {}
        for i in range(n_layers):
            pre = f"layer{i}."
            params[pre + "wq"] = Node(rng.normal(0, 0.02, (d_model, d_model)).astype(np.float32), name=pre + "wq")
            params[pre + "wk"] = Node(rng.normal(0, 0.02, (d_model, d_model)).astype(np.float32), name=pre + "wk")
            params[pre + "wv"] = Node(np.eye(d_model, dtype=np.float32), name=pre + "wv")
        return cls(n_adapters, n_layers, params, name)

    def copy(self) -> FusionParams:
        params = {k: Node(v.value.copy(), name=v.name) for k, v in self.params.items()}
        return FusionParams(self.n_adapters, self.n_layers, params, self.name)


def fusion_weights(h: Node, adapters: Sequence[AdapterParams], fusion: FusionParams, layer_index: int) -> tuple[Node, list[Node]]:
    if len(adapters) != fusion.n_adapters:
        raise ConfigError(f"fusion trained for {fusion.n_adapters} adapters, got {len(adapters)}")
    pre = f"layer{layer_index}."
    outs = [a.delta(h, layer_index) for a in adapters]
    q = ad.matmul(h, fusion.params[pre + "wq"])
    keys = [ad.matmul(o, fusion.params[pre + "wk"]) for o in outs]
    vals = [ad.matmul(o, fusion.params[pre + "wv"]) for o in outs]
    scores = ad.scale(ad.row_dots(q, keys), 1.0 / math.sqrt(h.shape[1]))
    return ad.softmax(scores, axis=1), vals


def fusion_combine(h: Node, adapters: Sequence[AdapterParams], fusion: FusionParams, layer_index: int) -> Node:
    """Token-wise attention over adapter outputs, plus the residual ``h``.

    Queries come from the layer output; keys and values from each adapter's
    bottleneck output (the residual is added once, after mixing).
    """
    weights, vals = fusion_weights(h, adapters, fusion, layer_index)
    return ad.add(ad.row_mix(vals, weights), h)


class FusionCombiner:
    def __init__(self, adapters: Sequence[AdapterParams], fusion: FusionParams):
        if len(adapters) != fusion.n_adapters:
            raise ConfigError(f"fusion trained for {fusion.n_adapters} adapters, got {len(adapters)}")
        self.adapters = list(adapters)
        self.fusion = fusion

    def apply(self, h: Node, layer_index: int) -> Node:
        return fusion_combine(h, self.adapters, self.fusion, layer_index)
