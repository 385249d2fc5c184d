"""Whitespace tokenizer with a word vocabulary and character fallback.

Known words map to one id. An unknown word is spelled out as a head
character piece followed by ``##``-prefixed continuation pieces; long
unknown words keep their first and last few characters so that both the
stem onset and the inflection survive. Word-level predictions are read off
the first piece of each word.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
SPECIALS = (PAD, MASK, UNK)
PAD_ID, MASK_ID, UNK_ID = 0, 1, 2
CHARSET = "abcdefghijklmnopqrstuvwxyz."


class Vocabulary:
    def __init__(self, tokens: Sequence[str], max_pieces: int = 6):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        self.max_pieces = max_pieces
        # ids eligible as random MLM replacements (no specials)
        self.regular_ids = np.arange(len(SPECIALS), len(self.tokens))

    @classmethod
    def build(cls, corpora: Iterable[Iterable[Sequence[str]]], max_words: int | None = None, min_count: int = 1, max_pieces: int = 6) -> Vocabulary:
        counts: Counter[str] = Counter()
        for corpus in corpora:
            for sent in corpus:
                counts.update(sent)
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        if max_words is not None:
            words = words[:max_words]
        pieces = list(CHARSET) + ["##" + c for c in CHARSET]
        seen = set(SPECIALS)
        tokens = list(SPECIALS)
        for t in pieces + words:
            if t not in seen:
                seen.add(t)
                tokens.append(t)
        return cls(tokens, max_pieces=max_pieces)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.max_pieces == other.max_pieces

    def word_pieces(self, word: str, spell: bool = False) -> list[int]:
        """Ids for one word; ``spell`` forces the character fallback."""
        if word in self.index and not spell:
            return [self.index[word]]
        chars = word
        if len(chars) > self.max_pieces:
            half = self.max_pieces // 2
            chars = chars[:half] + chars[-(self.max_pieces - half):]
        ids = []
        for j, ch in enumerate(chars):
            ids.append(self.index.get(ch if j == 0 else "##" + ch, UNK_ID))
        return ids or [UNK_ID]

    def encode(self, words: Sequence[str], spell: Sequence[bool] | None = None) -> tuple[list[int], list[int]]:
        """Piece ids and the position of each word's first piece."""
        ids: list[int] = []
        heads: list[int] = []
        for i, w in enumerate(words):
            heads.append(len(ids))
            ids.extend(self.word_pieces(w, bool(spell[i]) if spell is not None else False))
        return ids, heads


@dataclass
class Batch:
    """A padded batch flattened to ``[B*L]`` rows.

    ``heads`` holds flat row indices of word-initial pieces, sentence by
    sentence; ``n_words[b]`` words belong to sentence ``b``.
    """

    ids: np.ndarray  # [B, L] int
    mask: np.ndarray  # [B, L] bool
    heads: np.ndarray  # [n_words_total] int
    n_words: list[int]

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    def split_words(self, values: Sequence) -> list[list]:
        out, start = [], 0
        for n in self.n_words:
            out.append(list(values[start : start + n]))
            start += n
        return out


def encode_batch(sentences: Sequence[Sequence[str]], vocab: Vocabulary, max_len: int, spell: Sequence[Sequence[bool]] | None = None) -> Batch:
    """Pad a list of sentences; ``spell[b][i]`` forces word i of sentence b to characters."""
    encoded = [vocab.encode(s, spell[b] if spell is not None else None) for b, s in enumerate(sentences)]
    for (ids, _), s in zip(encoded, sentences):
        if len(ids) > max_len:
            raise ValueError(f"sentence of {len(s)} words needs {len(ids)} pieces > max_len={max_len}")
    L = max((len(ids) for ids, _ in encoded), default=1) or 1
    B = len(sentences)
    ids_arr = np.full((B, L), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    heads = []
    for b, (ids, h) in enumerate(encoded):
        ids_arr[b, : len(ids)] = ids
        mask[b, : len(ids)] = True
        heads.extend(b * L + j for j in h)
    return Batch(ids_arr, mask, np.asarray(heads, dtype=np.int64), [len(s) for s in sentences])


def spelling_noise(sentences: Sequence[Sequence[str]], rate: float, rng: np.random.Generator) -> list[list[bool]] | None:
    """Per-word flags, each set with probability ``rate`` (``None`` when rate is 0).

    Training with a small rate exposes the character pieces, which unknown
    words of unseen varieties rely on at test time.
    """
    if rate <= 0:
        return None
    return [(rng.random(len(s)) < rate).tolist() for s in sentences]
