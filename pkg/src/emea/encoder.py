"""Toy post-LN transformer encoder with per-layer adapter slots.

Each layer runs attention, then the feed-forward block, then hands its
output to the language slot (one adapter, an ensemble, or a fusion layer)
and finally to the task adapter. The masked-LM head is tied to the token
embeddings; the tagging head lives with the task adapter that was trained
together with it.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .tokenizer import Batch, Vocabulary, encode_batch


class ConfigError(ValueError):
    """Inconsistent model or adapter configuration."""


class UsageError(ValueError):
    """An API was called in a way its contract forbids."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    d_adapter: int = 8
    max_len: int = 128
    n_tags: int = 7

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "d_adapter", "max_len", "n_tags"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_adapter >= self.d_model:
            raise ConfigError(f"d_adapter={self.d_adapter} must be smaller than d_model={self.d_model}")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return _uniform(rng, (fan_in, fan_out), float(np.sqrt(6.0 / (fan_in + fan_out))))


def _param(arr: np.ndarray, name: str) -> Node:
    return Node(np.ascontiguousarray(arr, dtype=np.float32), requires_grad=False, name=name)


class ParamGroup:
    """Named parameter nodes that freeze and copy together."""

    params: dict[str, Node]

    def parameters(self) -> dict[str, Node]:
        return self.params

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unknown = set(state) - set(self.params)
        if missing or unknown:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].value = np.array(v, dtype=self.params[k].dtype)

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.value = p.value.astype(dtype)


class AdapterParams(ParamGroup):
    """Bottleneck adapter: ``h + up(relu(down(layer_norm(h))))`` per layer.

    Task adapters additionally own the tagging head (``head.w``, ``head.b``).
    """

    KINDS = ("language", "task")

    def __init__(self, kind: str, name: str, params: dict[str, Node], n_layers: int):
        if kind not in self.KINDS:
            raise ConfigError(f"adapter kind must be one of {self.KINDS}, got {kind!r}")
        self.kind = kind
        self.name = name
        self.n_layers = n_layers
        self.params = params

    @classmethod
    def create(cls, kind: str, name: str, config: ModelConfig, rng: np.random.Generator) -> AdapterParams:
        d, a = config.d_model, config.d_adapter
        bound = 1.0 / np.sqrt(d)
        params: dict[str, Node] = {}
        for i in range(config.n_layers):
            pre = f"layer{i}."
            params[pre + "down.w"] = _param(_uniform(rng, (d, a), bound), pre + "down.w")
            params[pre + "down.b"] = _param(np.zeros(a), pre + "down.b")
            params[pre + "up.w"] = _param(np.zeros((a, d)), pre + "up.w")
            params[pre + "up.b"] = _param(np.zeros(d), pre + "up.b")
            params[pre + "ln.g"] = _param(np.ones(d), pre + "ln.g")
            params[pre + "ln.b"] = _param(np.zeros(d), pre + "ln.b")
        if kind == "task":
            params["head.w"] = _param(_xavier(rng, d, config.n_tags), "head.w")
            params["head.b"] = _param(np.zeros(config.n_tags), "head.b")
        return cls(kind, name, params, config.n_layers)

    @property
    def d_model(self) -> int:
        return self.params["layer0.ln.g"].shape[0]

    def layer(self, i: int) -> dict[str, Node]:
        if not 0 <= i < self.n_layers:
            raise ConfigError(f"adapter {self.name!r}: layer {i} outside [0, {self.n_layers})")
        pre = f"layer{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def delta(self, h: Node, layer_index: int) -> Node:
        """Bottleneck output without the residual connection."""
        p = self.layer(layer_index)
        if h.shape[-1] != self.d_model:
            raise ConfigError(f"adapter {self.name!r} expects width {self.d_model}, got {h.shape[-1]}")
        z = ad.layer_norm(h, p["ln.g"], p["ln.b"])
        z = ad.relu(ad.linear(z, p["down.w"], p["down.b"]))
        return ad.linear(z, p["up.w"], p["up.b"])

    def apply(self, h: Node, layer_index: int) -> Node:
        return ad.add(h, self.delta(h, layer_index))

    def copy(self, name: str | None = None) -> AdapterParams:
        params = {k: Node(v.value.copy(), requires_grad=False, name=v.name) for k, v in self.params.items()}
        return AdapterParams(self.kind, name or self.name, params, self.n_layers)

    def __repr__(self) -> str:
        return f"AdapterParams(kind={self.kind!r}, name={self.name!r}, layers={self.n_layers})"


def adapter_apply(h: Node, adapter: AdapterParams, layer_index: int) -> Node:
    return adapter.apply(h, layer_index)


class AdapterRegistry(dict):
    """Adapters by unique name."""

    def add(self, adapter: AdapterParams) -> None:
        if adapter.name in self:
            raise ConfigError(f"adapter name {adapter.name!r} already registered")
        self[adapter.name] = adapter


class LanguageSlot(Protocol):
    def apply(self, h: Node, layer_index: int) -> Node: ...


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(np.float32)


class Backbone(ParamGroup):
    def __init__(self, config: ModelConfig, params: dict[str, Node]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> Backbone:
        d, f, V = config.d_model, config.d_ff, config.vocab_size
        p: dict[str, Node] = {}

        def put(name, arr):
            p[name] = _param(arr, name)

        put("emb.token", rng.normal(0.0, 1.0 / np.sqrt(d), size=(V, d)))
        put("emb.ln.g", np.ones(d))
        put("emb.ln.b", np.zeros(d))
        for i in range(config.n_layers):
            pre = f"layer{i}."
            for m in ("q", "k", "v", "o"):
                put(pre + f"attn.w{m}", _xavier(rng, d, d))
                put(pre + f"attn.b{m}", np.zeros(d))
            put(pre + "ln1.g", np.ones(d))
            put(pre + "ln1.b", np.zeros(d))
            put(pre + "ffn.w1", _xavier(rng, d, f))
            put(pre + "ffn.b1", np.zeros(f))
            put(pre + "ffn.w2", _xavier(rng, f, d))
            put(pre + "ffn.b2", np.zeros(d))
            put(pre + "ln2.g", np.ones(d))
            put(pre + "ln2.b", np.zeros(d))
        put("mlm.b", np.zeros(V))
        return cls(config, p)


class Encoder:
    """Backbone plus vocabulary; adapters are passed per call."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, backbone: Backbone):
        if len(vocab) != config.vocab_size:
            raise ConfigError(f"vocabulary has {len(vocab)} entries, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.backbone = backbone
        self._positions = sinusoidal_positions(config.max_len, config.d_model)

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary, seed: int) -> Encoder:
        return cls(config, vocab, Backbone.create(config, np.random.default_rng(seed)))

    def new_adapter(self, kind: str, name: str, seed: int) -> AdapterParams:
        return AdapterParams.create(kind, name, self.config, np.random.default_rng(seed))

    def astype(self, dtype) -> None:
        self.backbone.astype(dtype)
        self._positions = self._positions.astype(dtype)

    def encode(self, sentences: Sequence[Sequence[str]], spell: Sequence[Sequence[bool]] | None = None) -> Batch:
        return encode_batch(sentences, self.vocab, self.config.max_len, spell)

    # ------------------------------------------------------------------ #

    def hidden(self, batch: Batch, lang: LanguageSlot | None = None, task: AdapterParams | None = None) -> Node:
        """Final-layer representations, ``[B*L x d_model]``."""
        cfg = self.config
        p = self.backbone.params
        B, L = batch.ids.shape
        if L > cfg.max_len:
            raise UsageError(f"batch length {L} exceeds max_len={cfg.max_len}")
        if batch.ids.max(initial=0) >= cfg.vocab_size:
            raise UsageError("token id outside the vocabulary")
        dtype = p["emb.token"].dtype
        pos = Node(np.tile(self._positions[:L].astype(dtype), (B, 1)))
        x = ad.add(ad.embedding(p["emb.token"], batch.ids), pos)
        x = ad.layer_norm(x, p["emb.ln.g"], p["emb.ln.b"])
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            q = ad.linear(x, p[pre + "attn.wq"], p[pre + "attn.bq"])
            k = ad.linear(x, p[pre + "attn.wk"], p[pre + "attn.bk"])
            v = ad.linear(x, p[pre + "attn.wv"], p[pre + "attn.bv"])
            a = ad.attention(q, k, v, cfg.n_heads, B, batch.mask)
            a = ad.linear(a, p[pre + "attn.wo"], p[pre + "attn.bo"])
            x = ad.layer_norm(ad.add(x, a), p[pre + "ln1.g"], p[pre + "ln1.b"])
            f = ad.relu(ad.linear(x, p[pre + "ffn.w1"], p[pre + "ffn.b1"]))
            f = ad.linear(f, p[pre + "ffn.w2"], p[pre + "ffn.b2"])
            x = ad.layer_norm(ad.add(x, f), p[pre + "ln2.g"], p[pre + "ln2.b"])
            if lang is not None:
                x = lang.apply(x, i)
            if task is not None:
                x = task.apply(x, i)
        return x

    def logits(self, batch: Batch, lang: LanguageSlot | None = None, task: AdapterParams | None = None, head: str = "task") -> Node:
        if head == "task":
            if task is None:
                raise UsageError("head='task' needs a task adapter")
            h = self.hidden(batch, lang, task)
            return ad.linear(h, task.params["head.w"], task.params["head.b"])
        if head == "mlm":
            return self.mlm_logits(self.hidden(batch, lang, task))
        raise UsageError(f"unknown head {head!r}")

    def mlm_logits(self, h: Node, rows: np.ndarray | None = None) -> Node:
        """Vocabulary logits from hidden states, optionally only at ``rows``."""
        p = self.backbone.params
        if rows is not None:
            h = ad.take_rows(h, rows)
        return ad.add_bias(ad.matmul(h, ad.transpose(p["emb.token"])), p["mlm.b"])

    def forward(self, batch: Batch, lang: LanguageSlot | None = None, task: AdapterParams | None = None, head: str = "task") -> Node:
        """Per-token class probabilities, ``[B*L x C]``; rows sum to 1."""
        return ad.softmax(self.logits(batch, lang, task, head), axis=-1)

    def word_probs(self, batch: Batch, lang: LanguageSlot | None, task: AdapterParams) -> Node:
        """Tag distributions at word-initial pieces only, ``[W x n_tags]``."""
        return ad.take_rows(self.forward(batch, lang, task, head="task"), batch.heads)

    def predict(self, batch: Batch, lang: LanguageSlot | None, task: AdapterParams) -> list[list[int]]:
        probs = self.word_probs(batch, lang, task).value
        return batch.split_words(np.argmax(probs, axis=1).tolist())

    def copy(self) -> Encoder:
        bb = Backbone(self.config, {k: Node(v.value.copy(), name=v.name) for k, v in self.backbone.params.items()})
        return Encoder(self.config, copy.deepcopy(self.vocab), bb)


def iter_param_groups(*groups: ParamGroup | None) -> Iterator[tuple[str, Node]]:
    for gi, g in enumerate(groups):
        if g is None:
            continue
        for k, v in g.parameters().items():
            yield f"{gi}:{k}", v
