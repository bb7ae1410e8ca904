"""Synthetic multi-domain corpus, word-level vocabulary and stopword lists.

Each document comes from a single domain. Domains share a set of glue words and
a few bridge words; a bridge word links two otherwise disjoint lexicons, which
is what lets a myopic model wander from one topic into the other.
"""

from __future__ import annotations

import json
import math
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK, BOS, PAD = 0, 1, 2
SPECIALS = ("<unk>", "<bos>", "<pad>")
DEFAULT_MAX_VOCAB = 512

_SLOT = re.compile(r"\{(\w+)\}")


class CorpusConfigError(ValueError):
    pass


@dataclass
class Domain:
    name: str
    # slot name -> words; templates reference slots as {slot}
    content_lexicon: dict[str, list[str]]
    templates: list[str]
    bridge_templates: list[str] = field(default_factory=list)
    bridge_rate: float = 0.0
    weight: float = 1.0

    def words(self, glue: Iterable[str] = ()) -> set[str]:
        """Every word this domain can emit, excluding glue words."""
        glue = set(glue)
        out = {w for ws in self.content_lexicon.values() for w in ws}
        for t in self.templates + self.bridge_templates:
            out.update(w for w in t.split() if not _SLOT.fullmatch(w))
        return out - glue


@dataclass
class CorpusSpec:
    domains: list[Domain]
    bridge_words: list[str]
    glue_words: list[str]
    doc_count: int = 2000
    doc_length: int = 48
    seed: int = 0
    # per-domain bridge_rate overrides for the backbone's pretraining corpus
    pretrain_bridge_rates: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.domains:
            raise CorpusConfigError("corpus spec has no domains")
        glue = set(self.glue_words)
        for d in self.domains:
            if not d.content_lexicon or not any(d.content_lexicon.values()):
                raise CorpusConfigError(f"domain {d.name!r} has an empty lexicon")
            if not d.templates:
                raise CorpusConfigError(f"domain {d.name!r} has no templates")
            if not 0.0 <= d.bridge_rate <= 1.0:
                raise CorpusConfigError(f"domain {d.name!r}: bridge_rate must lie in [0, 1]")
            if d.bridge_rate > 0 and not d.bridge_templates:
                raise CorpusConfigError(f"domain {d.name!r}: bridge_rate > 0 without bridge templates")
            for t in d.templates + d.bridge_templates:
                for slot in _SLOT.findall(t):
                    if not d.content_lexicon.get(slot):
                        raise CorpusConfigError(f"domain {d.name!r}: template slot {{{slot}}} has no words")
        for b in self.bridge_words:
            owners = [d.name for d in self.domains if b in d.words(glue)]
            if len(owners) < 2:
                raise CorpusConfigError(f"bridge word {b!r} appears in {owners}, needs >= 2 domains")
        for name, rate in self.pretrain_bridge_rates.items():
            if name not in {d.name for d in self.domains}:
                raise CorpusConfigError(f"pretrain_bridge_rates names unknown domain {name!r}")
            if not 0.0 <= rate <= 1.0:
                raise CorpusConfigError(f"pretrain bridge rate for {name!r} must lie in [0, 1]")
        if self.doc_count < 0 or self.doc_length < 1:
            raise CorpusConfigError("doc_count must be >= 0 and doc_length >= 1")

    def pretraining_variant(self, seed_offset: int = 1000) -> "CorpusSpec":
        """The CorpusSpec used to pretrain the backbone: own seed, overridden bridge rates."""
        domains = [replace(d, bridge_rate=self.pretrain_bridge_rates.get(d.name, d.bridge_rate))
                   for d in self.domains]
        return replace(self, domains=domains, seed=self.seed + seed_offset, pretrain_bridge_rates={})

    def domain(self, name: str) -> Domain:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)

    def exclusive_lexicons(self) -> dict[str, set[str]]:
        """Per domain, the words no other domain (and no glue list) can produce."""
        glue = set(self.glue_words)
        sets = {d.name: d.words(glue) for d in self.domains}
        out = {}
        for name, ws in sets.items():
            others = set().union(*(s for n, s in sets.items() if n != name))
            out[name] = ws - others - set(self.bridge_words)
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "CorpusSpec":
        raw = dict(raw)
        raw["domains"] = [Domain(**d) for d in raw["domains"]]
        spec = cls(**raw)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "CorpusSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def fill_template(template: str, lexicon: dict[str, list[str]], rng: random.Random) -> list[str]:
    return [rng.choice(lexicon[m.group(1)]) if (m := _SLOT.fullmatch(w)) else w
            for w in template.split()]


def sentence(domain: Domain, rng: random.Random, bridge: bool | None = None) -> list[str]:
    """One sentence from ``domain``; ``bridge=None`` draws bridge use at the domain's rate."""
    if bridge is None:
        bridge = domain.bridge_rate > 0 and rng.random() < domain.bridge_rate
    pool = domain.bridge_templates if bridge else domain.templates
    return fill_template(rng.choice(pool), domain.content_lexicon, rng)


def generate_documents(spec: CorpusSpec) -> list[tuple[str, list[str]]]:
    """Documents as ``(domain name, words)``; a pure function of ``spec``."""
    spec.validate()
    rng = random.Random(spec.seed)
    weights = [d.weight for d in spec.domains]
    docs = []
    for _ in range(spec.doc_count):
        dom = rng.choices(spec.domains, weights=weights)[0]
        words: list[str] = []
        while len(words) < spec.doc_length:
            words.extend(sentence(dom, rng))
        docs.append((dom.name, words))
    return docs


def generate_corpus(spec: CorpusSpec) -> list[str]:
    """Documents as whitespace-joined lowercase text, one string per document."""
    return [" ".join(words) for _, words in generate_documents(spec)]


def split_documents(docs: Sequence, seed: int, val_fraction: float = 0.05) -> tuple[list, list]:
    idx = list(range(len(docs)))
    random.Random(seed).shuffle(idx)
    n_val = max(1, round(len(docs) * val_fraction)) if len(docs) > 1 else 0
    val = sorted(idx[:n_val])
    train = sorted(idx[n_val:])
    return [docs[i] for i in train], [docs[i] for i in val]


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:3]) != SPECIALS:
            raise ValueError("vocab must start with the special tokens " + ", ".join(SPECIALS))
        self.token_to_id = {w: i for i, w in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocab")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, indent=0)

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocab":
        inv = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in inv] != list(range(len(inv))):
            raise ValueError("vocab ids must be contiguous from 0")
        return cls([w for w, _ in inv])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_mapping(json.loads(Path(path).read_text()))


def build_vocab(corpus: Iterable[str], max_size: int = DEFAULT_MAX_VOCAB) -> Vocab:
    """Most frequent words first (ties by first appearance), capped at ``max_size``."""
    counts: Counter[str] = Counter()
    for doc in corpus:
        counts.update(doc.split())
    for s in SPECIALS:
        counts.pop(s, None)
    words = [w for w, _ in counts.most_common(max(0, max_size - len(SPECIALS)))]
    return Vocab(list(SPECIALS) + words)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    get = vocab.token_to_id.get
    return [get(w, UNK) for w in text.split()]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


# ---------------------------------------------------------------------------
# stopwords


@dataclass(frozen=True)
class StopwordList:
    ids: frozenset[int]
    n: int

    def mask(self, V: int):
        """1.0 where the idea loss applies, 0.0 on stopwords."""
        m = np.ones(V, dtype=np.float32)
        m[list(self.ids)] = 0.0
        return m


def build_stopwords(corpus_ids: Iterable[Sequence[int]], n: int, V: int) -> StopwordList:
    """The ``n`` most frequent ids (ties by ascending id) plus the special ids."""
    if n >= V:
        raise CorpusConfigError(f"stopword count n={n} must be below the vocab size V={V}")
    if n < 0:
        raise CorpusConfigError("stopword count must be non-negative")
    counts: Counter[int] = Counter()
    for doc in corpus_ids:
        counts.update(doc)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top = {i for i, _ in ranked[:n]}
    return StopwordList(frozenset(top | {UNK, BOS, PAD}), n)


def default_stopword_count(V: int) -> int:
    return max(16, math.ceil(0.02 * V))


# ---------------------------------------------------------------------------
# persistence


def save_corpus(docs: Iterable[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(d + "\n")


def load_corpus(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


# ---------------------------------------------------------------------------
# the default two-domain bridge corpus

_TEMPLATES = [
    "the {adj} {noun} {verb} the {noun} and then it {verb} .",
    "a {noun} {verb} in the {place} with a {noun} .",
    "the {noun} of the {place} is {adj} and {adj} .",
    "it {verb} a {adj} {noun} near the {place} at night .",
    "each {noun} {verb} to the {place} by the {noun} .",
    "then the {noun} was {adj} on the {place} .",
]


def bat_corpus_spec(doc_count: int = 2000, doc_length: int = 48, seed: int = 0) -> CorpusSpec:
    """Animal vs. comics corpus joined by the bridge words ``bat`` and ``cave``.

    In comics text ``bat`` is always followed by a comics word (``signal``,
    ``mobile``, ``suit``). Animal text uses ``bat`` rarely, and the backbone's
    pretraining corpus never does, so a model leaning on the bridge word alone
    continues an animal prompt with comics vocabulary.
    """
    animal = Domain(
        name="animal",
        content_lexicon={
            "noun": ["mammal", "insect", "moth", "colony", "roost", "fruit", "nectar", "owl",
                     "pup", "prey", "tree", "fur", "wings", "beetle", "mosquito", "echo"],
            "adj": ["small", "brown", "furry", "nocturnal", "tiny", "wild", "quiet", "hungry"],
            "verb": ["eats", "hunts", "feeds", "nurses", "catches", "finds", "grooms", "follows"],
            "place": ["cave", "forest", "barn", "meadow", "valley", "river"],
        },
        templates=list(_TEMPLATES),
        bridge_templates=[
            "the bat {verb} the {adj} {noun} in the {place} .",
            "a {adj} bat {verb} a {noun} near the {place} .",
        ],
        bridge_rate=0.02,
    )
    comics = Domain(
        name="comics",
        content_lexicon={
            "noun": ["batman", "joker", "villain", "hero", "cape", "mask", "robin", "police",
                     "gadget", "crime", "justice", "mansion", "detective", "gang", "riddle", "costume"],
            "adj": ["dark", "masked", "heroic", "evil", "caped", "secret", "brave", "wicked"],
            "verb": ["fights", "saves", "chases", "punches", "guards", "watches", "rescues", "defeats"],
            "place": ["gotham", "city", "rooftop", "alley", "tower", "cave"],
            "trap": ["signal", "mobile", "suit"],
        },
        templates=list(_TEMPLATES),
        bridge_templates=[
            "the bat {trap} {verb} the {adj} {noun} in the {place} .",
            "a {adj} bat {trap} {verb} a {noun} near the {place} .",
        ],
        bridge_rate=0.2,
    )
    return CorpusSpec(
        domains=[animal, comics],
        bridge_words=["bat", "cave"],
        glue_words=["the", "a", ".", "and", "then", "it", "in", "with", "of", "is", "near",
                    "at", "night", "each", "to", "by", "was", "on"],
        doc_count=doc_count,
        doc_length=doc_length,
        seed=seed,
        pretrain_bridge_rates={"animal": 0.0},
    )
