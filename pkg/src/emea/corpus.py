"""Seeded synthetic dialect continuum and column-format corpus files.

A root variety owns a generated lexicon (stems per syntactic category) and a
suffix table. A derived variety perturbs its parent in three systematic ways:
a character substitution map, replaced suffixes, and a layer of replaced
stems. Sentences are sampled from a small template grammar whose random
choices depend only on the sampling seed, so one seed yields parallel
sentences across every variety of a continuum.
"""

from __future__ import annotations

import dataclasses
import string
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

ALPHABET = string.ascii_lowercase
_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"

NER_TAGS = ("O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG")
POS_TAGS = ("DET", "ADJ", "NOUN", "PROPN", "VERB", "ADP", "CCONJ", "PUNCT")
TAGSETS = {"ner": NER_TAGS, "pos": POS_TAGS}

OPEN_CATEGORIES = ("NOUN", "ADJ", "VERB", "PER", "LOC", "ORG")
CLOSED_SIZES = {"DET": 6, "ADP": 6, "CCONJ": 2, "ORGMARK": 3}
# suffix slots per category; entity suffixes make unseen names guessable
SUFFIX_SLOTS = {"NOUN": 3, "ADJ": 2, "VERB": 3, "PER": 2, "LOC": 2, "ORG": 1}
# share of LOC stems reused as PER stems, so only context disambiguates them
PER_LOC_OVERLAP = 0.15


class CorpusError(ValueError):
    """Invalid variety configuration or corpus data."""


class CorpusFormatError(CorpusError):
    """A column file could not be parsed."""


class BIOWarning(UserWarning):
    """A tag sequence is not well-formed BIO."""


@dataclass
class TaggedSentence:
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise CorpusError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class VarietySpec:
    """Generative description of one language variety.

    ``char_shift`` and ``replacement_layers`` are cumulative over the
    variety's lineage, so a spec is self-contained: generating text needs no
    access to the parent spec.
    """

    name: str
    parent: str | None = None
    divergence: float = 0.0
    vocab_size: int = 120
    lexicon_seed: int = 0
    suffix_table: dict[str, list[str]] = field(default_factory=dict)
    char_shift: dict[str, str] = field(default_factory=dict)
    lexical_replacement_rate: float = 0.0
    replacement_layers: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        for label, rate in (("divergence", self.divergence), ("lexical_replacement_rate", self.lexical_replacement_rate)):
            if not 0.0 <= rate <= 1.0:
                raise CorpusError(f"{self.name}: {label}={rate} outside [0, 1]")
        if self.vocab_size < 8:
            raise CorpusError(f"{self.name}: vocab_size must be >= 8")
        if not self.suffix_table:
            self.suffix_table = root_suffix_table(self.lexicon_seed)
        self.replacement_layers = [(str(s), float(r)) for s, r in self.replacement_layers]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["replacement_layers"] = [[s, r] for s, r in self.replacement_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> VarietySpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown variety fields: {sorted(unknown)}")
        d = dict(d)
        d["replacement_layers"] = [tuple(x) for x in d.get("replacement_layers", [])]
        return cls(**d)


def _rng(*parts) -> np.random.Generator:
    """Generator keyed by a stable tuple of ints/strings (no Python ``hash``)."""
    keys = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence([k & 0xFFFFFFFF for k in keys]))


def _syllable(rng: np.random.Generator) -> str:
    return rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))


def _stem(rng: np.random.Generator, n_syll: int) -> str:
    s = "".join(_syllable(rng) for _ in range(n_syll))
    if rng.random() < 0.5:
        s += rng.choice(list(_CONSONANTS))
    return s


def root_suffix_table(lexicon_seed: int) -> dict[str, list[str]]:
    rng = _rng("suffixes", lexicon_seed)
    table = {}
    for cat, n in SUFFIX_SLOTS.items():
        seen: set[str] = set()
        out = []
        while len(out) < n:
            s = rng.choice(list(_VOWELS)) + (rng.choice(list(_CONSONANTS)) if rng.random() < 0.6 else "")
            if cat in ("PER", "LOC", "ORG"):
                s = s + rng.choice(list(_VOWELS)) + rng.choice(list(_CONSONANTS))
            if s not in seen:
                seen.add(s)
                out.append(s)
        table[cat] = out
    return table


def category_sizes(vocab_size: int) -> dict[str, int]:
    return {
        "NOUN": vocab_size,
        "ADJ": vocab_size // 2,
        "VERB": vocab_size // 2,
        "PER": vocab_size // 2,
        "LOC": vocab_size // 2,
        "ORG": vocab_size // 4,
        **CLOSED_SIZES,
    }


def root_lexicon(lexicon_seed: int, vocab_size: int) -> dict[str, list[str]]:
    """Unique stems per category, shared by every variety of a continuum."""
    rng = _rng("lexicon", lexicon_seed)
    sizes = category_sizes(vocab_size)
    used: set[str] = set()
    lex: dict[str, list[str]] = {}
    for cat, n in sizes.items():
        n_syll = 1 if cat in CLOSED_SIZES else 2
        stems = []
        while len(stems) < n:
            s = _stem(rng, n_syll)
            if s not in used:
                used.add(s)
                stems.append(s)
        lex[cat] = stems
    n_shared = int(round(PER_LOC_OVERLAP * sizes["PER"]))
    lex["PER"][:n_shared] = lex["LOC"][:n_shared]
    return lex


def apply_shift(word: str, shift: dict[str, str]) -> str:
    return "".join(shift.get(ch, ch) for ch in word)


# --------------------------------------------------------------------------- #
# continuum
# --------------------------------------------------------------------------- #


def derive_variety(
    parent: VarietySpec,
    name: str,
    divergence: float,
    seed: int,
    replacement_factor: float = 0.5,
) -> VarietySpec:
    """Child of ``parent`` perturbed at rate ``divergence``."""
    if not 0.0 <= divergence <= 1.0:
        raise CorpusError(f"{name}: divergence={divergence} outside [0, 1]")
    rng = _rng("derive", seed, name)
    own: dict[str, str] = {}
    for ch in ALPHABET:
        if rng.random() < divergence:
            own[ch] = str(rng.choice([c for c in ALPHABET if c != ch]))
    shift = {}
    for ch in ALPHABET:
        mapped = own.get(parent.char_shift.get(ch, ch), parent.char_shift.get(ch, ch))
        if mapped != ch:
            shift[ch] = mapped
    suffixes = {}
    for cat, sfx in parent.suffix_table.items():
        new = []
        for s in sfx:
            if rng.random() < divergence / 2:
                s = "".join(rng.choice(list(ALPHABET)) for _ in range(int(rng.integers(1, 3))))
            new.append(s)
        suffixes[cat] = new
    rate = min(1.0, divergence * replacement_factor)
    layers = list(parent.replacement_layers)
    if rate > 0:
        layers.append((f"{name}:{seed}", rate))
    return VarietySpec(
        name=name,
        parent=parent.name,
        divergence=divergence,
        vocab_size=parent.vocab_size,
        lexicon_seed=parent.lexicon_seed,
        suffix_table=suffixes,
        char_shift=shift,
        lexical_replacement_rate=rate,
        replacement_layers=layers,
    )


def generate_continuum(
    root_spec: VarietySpec,
    n_varieties: int,
    divergence_schedule: Sequence[float],
    seed: int,
    parents: Sequence[int] | None = None,
    names: Sequence[str] | None = None,
    replacement_factor: float = 0.5,
) -> list[VarietySpec]:
    """Root plus ``n_varieties - 1`` derived varieties.

    ``divergence_schedule[i]`` is the divergence of variety ``i + 1`` from
    its parent. ``parents[i]`` indexes an earlier variety (default: the
    root), which lets test varieties hang off related ones while their
    cumulative divergence from the root keeps increasing.
    """
    if n_varieties < 2:
        raise CorpusError("a continuum needs at least 2 varieties")
    if len(divergence_schedule) != n_varieties - 1:
        raise CorpusError(f"need {n_varieties - 1} divergences, got {len(divergence_schedule)}")
    for d in divergence_schedule:
        if not 0.0 <= d <= 1.0:
            raise CorpusError(f"divergence {d} outside [0, 1]")
    parents = list(parents) if parents is not None else [0] * (n_varieties - 1)
    if len(parents) != n_varieties - 1:
        raise CorpusError("parents must list one index per derived variety")
    names = list(names) if names is not None else [root_spec.name] + [f"v{i}" for i in range(1, n_varieties)]
    out = [dataclasses.replace(root_spec, name=names[0])]
    for i, (d, p) in enumerate(zip(divergence_schedule, parents), start=1):
        if not 0 <= p < i:
            raise CorpusError(f"variety {i}: parent index {p} must refer to an earlier variety")
        out.append(derive_variety(out[p], names[i], d, seed, replacement_factor))
    return out


def save_varieties(path: str | Path, specs: Iterable[VarietySpec]) -> None:
    doc = {"varieties": [s.to_dict() for s in specs]}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")


def load_varieties(path: str | Path) -> list[VarietySpec]:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return [VarietySpec.from_dict(d) for d in doc.get("varieties", [])]


# --------------------------------------------------------------------------- #
# sentence generation
# --------------------------------------------------------------------------- #


class Realizer:
    """Maps abstract (category, stem index, suffix index) slots to surface words."""

    def __init__(self, spec: VarietySpec):
        self.spec = spec
        base = root_lexicon(spec.lexicon_seed, spec.vocab_size)
        self.stems = {cat: list(stems) for cat, stems in base.items()}
        for salt, rate in spec.replacement_layers:
            for cat, stems in self.stems.items():
                r = _rng("replace", salt, cat)
                draws = r.random(len(stems))
                for i in np.nonzero(draws < rate)[0]:
                    stems[i] = _stem(_rng("novel", salt, cat, int(i)), 1 if cat in CLOSED_SIZES else 2)

    def word(self, cat: str, idx: int, sfx: int | None = None) -> str:
        w = self.stems[cat][idx]
        if sfx is not None:
            w = w + self.spec.suffix_table[cat][sfx]
        return apply_shift(w, self.spec.char_shift)


def _sample_sentence(rng: np.random.Generator, sizes: dict[str, int]):
    """Abstract sentence: list of (category, stem, suffix, pos, ner) slots."""

    def pick(cat):
        return int(rng.integers(sizes[cat]))

    def nominal(slots):
        kind = rng.choice(["np", "np", "per", "loc", "org"])
        if kind == "np":
            slots.append(("DET", pick("DET"), None, "DET", "O"))
            if rng.random() < 0.5:
                slots.append(("ADJ", pick("ADJ"), int(rng.integers(2)), "ADJ", "O"))
            slots.append(("NOUN", pick("NOUN"), int(rng.integers(3)), "NOUN", "O"))
        elif kind == "per":
            person(slots)
        elif kind == "loc":
            place(slots)
        else:
            org(slots)

    def person(slots):
        slots.append(("PER", pick("PER"), int(rng.integers(2)), "PROPN", "B-PER"))
        if rng.random() < 0.5:
            slots.append(("PER", pick("PER"), int(rng.integers(2)), "PROPN", "I-PER"))

    def place(slots):
        slots.append(("LOC", pick("LOC"), int(rng.integers(2)), "PROPN", "B-LOC"))
        if rng.random() < 0.3:
            slots.append(("LOC", pick("LOC"), int(rng.integers(2)), "PROPN", "I-LOC"))

    def org(slots):
        slots.append(("ORG", pick("ORG"), 0, "PROPN", "B-ORG"))
        slots.append(("ORGMARK", pick("ORGMARK"), None, "NOUN", "I-ORG"))

    def verb(slots):
        slots.append(("VERB", pick("VERB"), int(rng.integers(3)), "VERB", "O"))

    slots: list = []
    template = int(rng.integers(4))
    if template == 0:
        nominal(slots)
        verb(slots)
        nominal(slots)
    elif template == 1:
        person(slots)
        verb(slots)
        slots.append(("ADP", pick("ADP"), None, "ADP", "O"))
        place(slots)
    elif template == 2:
        nominal(slots)
        slots.append(("ADP", pick("ADP"), None, "ADP", "O"))
        place(slots)
        verb(slots)
        org(slots) if rng.random() < 0.5 else nominal(slots)
    else:
        nominal(slots)
        verb(slots)
        slots.append(("CCONJ", pick("CCONJ"), None, "CCONJ", "O"))
        nominal(slots)
        verb(slots)
    slots.append(("PUNCT", 0, None, "PUNCT", "O"))
    return slots


def generate_corpus(
    spec: VarietySpec,
    n_sentences: int,
    labeled: bool = False,
    seed: int = 0,
    task: str = "ner",
) -> list[list[str]] | list[TaggedSentence]:
    """Sentences of ``spec``; labels come straight from the generating slots."""
    if task not in TAGSETS:
        raise CorpusError(f"unknown task {task!r}; expected one of {sorted(TAGSETS)}")
    realizer = Realizer(spec)
    sizes = category_sizes(spec.vocab_size)
    rng = _rng("sentences", seed)
    out = []
    for _ in range(n_sentences):
        slots = _sample_sentence(rng, sizes)
        tokens = ["." if cat == "PUNCT" else realizer.word(cat, idx, sfx) for cat, idx, sfx, _, _ in slots]
        if labeled:
            tags = [pos if task == "pos" else ner for _, _, _, pos, ner in slots]
            out.append(TaggedSentence(tokens, tags))
        else:
            out.append(tokens)
    return out


def token_overlap(corpus: Sequence[Sequence[str]], reference: Sequence[Sequence[str]]) -> float:
    """Share of tokens in ``corpus`` whose word type occurs in ``reference``."""
    vocab = {w for sent in reference for w in sent}
    n = sum(len(s) for s in corpus)
    if n == 0:
        return 0.0
    return sum(w in vocab for s in corpus for w in s) / n


# --------------------------------------------------------------------------- #
# BIO and column files
# --------------------------------------------------------------------------- #


def bio_violations(tags: Sequence[str]) -> list[int]:
    """Positions of ``I-X`` tags not preceded by ``B-X`` or ``I-X``."""
    bad = []
    prev = "O"
    for i, tag in enumerate(tags):
        if tag.startswith("I-"):
            if prev == "O" or prev[2:] != tag[2:]:
                bad.append(i)
        prev = tag
    return bad


def is_well_formed_bio(tags: Sequence[str]) -> bool:
    return not bio_violations(tags)


def write_column_file(path: str | Path, corpus: Iterable[TaggedSentence]) -> None:
    lines = []
    for sent in corpus:
        for tok, tag in zip(sent.tokens, sent.tags):
            if "\t" in tok or "\n" in tok:
                raise CorpusError(f"token {tok!r} contains a tab or newline")
            lines.append(f"{tok}\t{tag}\n")
        lines.append("\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_column_file(path: str | Path, check_bio: bool = True) -> list[TaggedSentence]:
    """Parse ``token<TAB>tag`` lines; blank lines separate sentences.

    Malformed BIO sequences are reported as :class:`BIOWarning` warnings,
    not errors.
    """
    corpus: list[TaggedSentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                if tokens:
                    corpus.append(TaggedSentence(tokens, tags))
                    tokens, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
            tokens.append(parts[0])
            tags.append(parts[1])
    if tokens:
        corpus.append(TaggedSentence(tokens, tags))
    if check_bio:
        for i, sent in enumerate(corpus):
            if any(t.startswith(("B-", "I-")) for t in sent.tags) and bio_violations(sent.tags):
                warnings.warn(f"{path}: sentence {i} has malformed BIO tags", BIOWarning, stacklevel=2)
    return corpus


def write_text_file(path: str | Path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def read_text_file(path: str | Path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
