"""Tagging metrics: exact-match span F1 and token-level scores."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

from .corpus import TaggedSentence


class MetricError(ValueError):
    """Gold and predicted corpora are not aligned."""


def extract_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """BIO decoding into ``(type, start, end_exclusive)`` spans.

    An ``I-X`` that does not continue an open ``X`` span starts a new span,
    the usual lenient reading of ill-formed predictions.
    """
    spans = set()
    kind, start = None, 0
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag.startswith("B-") or tag == "O" or (tag.startswith("I-") and tag[2:] != kind):
            if kind is not None:
                spans.add((kind, start, i))
                kind = None
            if tag.startswith(("B-", "I-")):
                kind, start = tag[2:], i
    return spans


def _check(gold: Sequence[TaggedSentence], pred: Sequence[TaggedSentence]) -> None:
    if len(gold) != len(pred):
        raise MetricError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
    for i, (g, p) in enumerate(zip(gold, pred)):
        if len(g.tags) != len(p.tags):
            raise MetricError(f"sentence {i}: {len(g.tags)} gold tags vs {len(p.tags)} predicted")


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    """Precision, recall, F1; an empty denominator counts as 0."""
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def span_scores(gold: Sequence[TaggedSentence], pred: Sequence[TaggedSentence]) -> tuple[float, float, float]:
    _check(gold, pred)
    tp = n_pred = n_gold = 0
    for g, p in zip(gold, pred):
        gs, ps = extract_spans(g.tags), extract_spans(p.tags)
        tp += len(gs & ps)
        n_pred += len(ps)
        n_gold += len(gs)
    if n_gold == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0
    return prf(tp, n_pred, n_gold)


def span_f1(gold: Sequence[TaggedSentence], pred: Sequence[TaggedSentence]) -> float:
    return span_scores(gold, pred)[2]


def accuracy(gold: Sequence[TaggedSentence], pred: Sequence[TaggedSentence]) -> float:
    _check(gold, pred)
    n = sum(len(g.tags) for g in gold)
    if n == 0:
        return 1.0
    return sum(a == b for g, p in zip(gold, pred) for a, b in zip(g.tags, p.tags)) / n


def token_f1(gold: Sequence[TaggedSentence], pred: Sequence[TaggedSentence], outside: str = "O") -> float:
    """Micro F1 over token labels other than ``outside``.

    With no ``outside`` label in play (e.g. POS tags) this equals accuracy.
    """
    _check(gold, pred)
    tp = n_pred = n_gold = 0
    for g, p in zip(gold, pred):
        for a, b in zip(g.tags, p.tags):
            n_gold += a != outside
            n_pred += b != outside
            tp += a == b and a != outside
    if n_gold == 0 and n_pred == 0:
        return 1.0
    return prf(tp, n_pred, n_gold)[2]


METRICS = {"span_f1": span_f1, "token_f1": token_f1, "accuracy": accuracy}
TASK_METRIC = {"ner": "span_f1", "pos": "accuracy"}


def majority_baseline(train: Sequence[TaggedSentence], gold: Sequence[TaggedSentence], metric: str) -> float:
    """Score of always predicting the most frequent training tag."""
    top = Counter(t for s in train for t in s.tags).most_common(1)[0][0]
    pred = [TaggedSentence(list(s.tokens), [top] * len(s)) for s in gold]
    return METRICS[metric](gold, pred)
