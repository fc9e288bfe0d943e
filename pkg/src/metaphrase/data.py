"""Corpus ingestion, preprocessing, synthetic paraphrase domains, task sampling.

Tokenization is whitespace word-level: lowercase, split, map through a
vocabulary with <unk> fallback, truncate to 20 content words, then wrap with
sentence markers. The synthetic generator builds families of paraphrase
domains (templated sentences; paraphrase = synonym substitution plus clause
reordering) with disjoint content vocabularies, standing in for real
multi-domain pair corpora at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

RESERVED = ("<s>", "</s>", "<pad>", "<mask>", "<unk>")
BOS, EOS, PAD, MASK, UNK = range(5)

MAX_CONTENT_WORDS = 20


class CorpusFormatError(ValueError):
    """A corpus file violates its documented format."""


class Vocab:
    """Token <-> id bijection with fixed reserved ids 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = list(RESERVED)
        self._index: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if not token or any(c.isspace() for c in token):
            raise ValueError(f"invalid vocabulary token {token!r}")
        if token not in self._index:
            self._index[token] = len(self._tokens)
            self._tokens.append(token)
        return self._index[token]

    def encode(self, token: str) -> int:
        return self._index.get(token, UNK)

    def decode(self, token_id: int) -> str:
        return self._tokens[token_id]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise CorpusFormatError(f"vocab file {path} is missing the reserved tokens")
        return cls(tokens[len(RESERVED):])

    @classmethod
    def build(cls, corpora: Iterable[Iterable[str]]) -> "Vocab":
        """Union of lowercased whitespace tokens, in order of appearance."""
        vocab = cls()
        for corpus in corpora:
            for sentence in corpus:
                for tok in sentence.lower().split():
                    vocab.add(tok)
        return vocab


def preprocess(text: str, vocab: Vocab) -> np.ndarray:
    """Lowercase, split, map to ids, truncate to 20 content words, add markers."""
    words = text.lower().split()[:MAX_CONTENT_WORDS]
    if not words:
        raise ValueError("sentence is empty after preprocessing")
    ids = [BOS] + [vocab.encode(w) for w in words] + [EOS]
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    """Marker-stripped, space-joined text for a token id sequence."""
    words = [vocab.decode(int(i)) for i in ids]
    return " ".join(w for w in words if w not in ("<s>", "</s>", "<pad>"))


@dataclass
class ParaphrasePair:
    src: np.ndarray
    tgt: np.ndarray


def load_pairs(path, vocab: Vocab) -> list[ParaphrasePair]:
    """Read source<TAB>target pairs, one per line; '#' lines are comments."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                continue
            columns = line.split("\t")
            if len(columns) != 2:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 2 tab-separated columns, got {len(columns)}"
                )
            pairs.append(
                ParaphrasePair(preprocess(columns[0], vocab), preprocess(columns[1], vocab))
            )
    if not pairs:
        raise CorpusFormatError(f"{path}: no pairs found")
    return pairs


def load_sentences(path, vocab: Vocab) -> list[np.ndarray]:
    """One sentence per line, preprocessed."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(preprocess(line, vocab))
    return out


def pad_batch(seqs: Sequence[np.ndarray], pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length id sequences into (ids, valid_mask)."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# synthetic paraphrase domains
# ---------------------------------------------------------------------------


@dataclass
class DomainSpec:
    """Everything needed to generate one paraphrase domain deterministically.

    Templates are segment lists; each segment is a token sequence where
    ``{group}`` slots draw from the word groups. A paraphrase keeps the slot
    fills, substitutes synonyms, and may permute segments per a reorder rule.
    """

    name: str
    seed: int
    words: dict[str, list[str]]
    synonyms: dict[str, list[str]]
    templates: list[list[list[str]]]
    reorders: list[tuple[int, ...]] = field(default_factory=list)
    subst_prob: float = 1.0
    reorder_prob: float = 0.5

    def __post_init__(self):
        subset = self.vocabulary()
        for word, alts in self.synonyms.items():
            if word not in subset or not alts or any(a not in subset for a in alts):
                raise ValueError(
                    f"domain {self.name!r}: synonym entry {word!r} not closed over vocabulary"
                )
        groups = set(self.words)
        for template in self.templates:
            for segment in template:
                for tok in segment:
                    if tok.startswith("{") and tok.endswith("}") and tok[1:-1] not in groups:
                        raise ValueError(
                            f"domain {self.name!r}: template slot {tok} has no word group"
                        )
        for rule in self.reorders:
            if sorted(rule) != list(range(len(rule))):
                raise ValueError(f"domain {self.name!r}: reorder {rule} is not a permutation")
        if not self.templates:
            raise ValueError(f"domain {self.name!r}: no templates")

    def vocabulary(self) -> set[str]:
        out = set()
        for group in self.words.values():
            out.update(group)
        for alts in self.synonyms.values():
            out.update(alts)
        return out


def synth_domain(spec: DomainSpec, n_pairs: int) -> tuple[list[tuple[str, str]], list[str]]:
    """Generate (paraphrase text pairs, unlabeled sentences) for one domain."""
    rng = np.random.default_rng(spec.seed)
    pairs = []
    for _ in range(n_pairs):
        template = spec.templates[rng.integers(len(spec.templates))]
        segments = []
        for segment in template:
            filled = []
            for tok in segment:
                if tok.startswith("{") and tok.endswith("}"):
                    group = spec.words[tok[1:-1]]
                    filled.append(group[rng.integers(len(group))])
                else:
                    filled.append(tok)
            segments.append(filled)

        source = [tok for seg in segments for tok in seg]

        para_segments = []
        for segment in segments:
            out = []
            for tok in segment:
                alts = spec.synonyms.get(tok)
                if alts and rng.random() < spec.subst_prob:
                    out.append(alts[rng.integers(len(alts))])
                else:
                    out.append(tok)
            para_segments.append(out)
        rules = [r for r in spec.reorders if len(r) == len(para_segments)]
        if rules and rng.random() < spec.reorder_prob:
            rule = rules[rng.integers(len(rules))]
            para_segments = [para_segments[i] for i in rule]
        target = [tok for seg in para_segments for tok in seg]
        pairs.append((" ".join(source), " ".join(target)))
    # Both sides are natural domain sentences; the unlabeled pool carries
    # the full domain vocabulary while the pairings stay labeled-only.
    sentences = [src for src, _ in pairs] + [tgt for _, tgt in pairs]
    return pairs, sentences


_FUNCTION_WORDS = ["the", "a", "my", "your", "near", "with", "and", "very", "they", "it"]

_SYLLABLES = [
    "ba", "co", "di", "fu", "ga", "he", "ji", "ka", "lo", "mu",
    "na", "pe", "qi", "ro", "su", "ta", "ve", "wo", "xa", "zu",
]


def _word_factory(rng: np.random.Generator, taken: set[str]):
    def new_word() -> str:
        while True:
            n = int(rng.integers(2, 4))
            word = "".join(_SYLLABLES[rng.integers(len(_SYLLABLES))] for _ in range(n))
            if word not in taken and word not in _FUNCTION_WORDS:
                taken.add(word)
                return word

    return new_word


def domain_family(n_domains: int, seed: int, nouns: int = 6, verbs: int = 4,
                  places: int = 4, subst_prob: float = 1.0,
                  reorder_prob: float = 0.6,
                  synonym_groups: tuple = ("noun",)) -> list[DomainSpec]:
    """Build domains with disjoint content vocabularies and synonym maps.

    All domains share function words and template frames, so the paraphrase
    transformation (substitute + reorder) has the same structure everywhere
    while the lexicon shifts per domain. Only the ``synonym_groups`` word
    classes get synonyms; the rest copy through, which keeps source/target
    sentences of a pair lexically related the way real paraphrases are.
    """
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    new_word = _word_factory(rng, taken)
    specs = []
    for d in range(n_domains):
        words = {
            "noun": [new_word() for _ in range(nouns)],
            "verb": [new_word() for _ in range(verbs)],
            "place": [new_word() for _ in range(places)],
        }
        synonyms = {}
        for group in synonym_groups:
            for w in words[group]:
                synonyms[w] = [new_word()]
        templates = [
            [["the", "{noun}", "can", "{verb}", "a", "{noun}"], ["near", "the", "{place}"]],
            [["my", "{noun}", "will", "{verb}", "the", "{noun}"], ["with", "a", "{noun}"]],
            [["a", "{noun}", "must", "{verb}"], ["near", "a", "{place}"], ["with", "the", "{noun}"]],
            [["the", "{noun}", "in", "the", "{place}", "can", "{verb}"]],
        ]
        reorders = [(1, 0), (2, 0, 1)]
        specs.append(
            DomainSpec(
                name=f"domain{d}",
                seed=int(rng.integers(2**31)),
                words=words,
                synonyms=synonyms,
                templates=templates,
                reorders=reorders,
                subst_prob=subst_prob,
                reorder_prob=reorder_prob,
            )
        )
    return specs


# ---------------------------------------------------------------------------
# domain spec file format (key = value sections)
# ---------------------------------------------------------------------------


def write_domain_spec(spec: DomainSpec) -> str:
    lines = ["[domain]", f"name = {spec.name}", f"seed = {spec.seed}",
             f"subst_prob = {spec.subst_prob}", f"reorder_prob = {spec.reorder_prob}", ""]
    lines.append("[vocabulary]")
    for group, ws in spec.words.items():
        lines.append(f"{group} = {' '.join(ws)}")
    lines.append("")
    lines.append("[synonyms]")
    for word, alts in spec.synonyms.items():
        lines.append(f"{word} = {' '.join(alts)}")
    lines.append("")
    lines.append("[templates]")
    for i, template in enumerate(spec.templates):
        lines.append(f"t{i} = " + " | ".join(" ".join(seg) for seg in template))
    lines.append("")
    lines.append("[reorders]")
    for i, rule in enumerate(spec.reorders):
        lines.append(f"r{i} = {' '.join(str(x) for x in rule)}")
    return "\n".join(lines) + "\n"


def parse_domain_spec(text: str) -> DomainSpec:
    sections: dict[str, list[tuple[str, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections.setdefault(current, [])
            continue
        if current is None or "=" not in line:
            raise CorpusFormatError(f"line {lineno}: expected 'key = value' inside a section")
        key, value = (part.strip() for part in line.split("=", 1))
        sections[current].append((key, value))

    known = {"domain", "vocabulary", "synonyms", "templates", "reorders"}
    unknown = set(sections) - known
    if unknown:
        raise CorpusFormatError(f"unknown sections: {sorted(unknown)}")

    head = dict(sections.get("domain", []))
    templates = [
        [segment.split() for segment in value.split("|")]
        for _, value in sections.get("templates", [])
    ]
    return DomainSpec(
        name=head.get("name", "domain"),
        seed=int(head.get("seed", "0")),
        words={k: v.split() for k, v in sections.get("vocabulary", [])},
        synonyms={k: v.split() for k, v in sections.get("synonyms", [])},
        templates=templates,
        reorders=[tuple(int(x) for x in value.split()) for _, value in sections.get("reorders", [])],
        subst_prob=float(head.get("subst_prob", "1.0")),
        reorder_prob=float(head.get("reorder_prob", "0.5")),
    )


# ---------------------------------------------------------------------------
# corpora and meta-task sampling
# ---------------------------------------------------------------------------


@dataclass
class SplitPairs:
    train: list[ParaphrasePair]
    valid: list[ParaphrasePair] = field(default_factory=list)
    test: list[ParaphrasePair] = field(default_factory=list)


@dataclass
class CorpusSet:
    """Labeled pairs for one role, keyed by domain label."""

    role: str  # pre | src | tgt
    domains: dict[str, SplitPairs]

    def __post_init__(self):
        if self.role not in ("pre", "src", "tgt"):
            raise ValueError(f"unknown corpus role {self.role!r}")


def split_pairs(pairs: Sequence[ParaphrasePair], n_valid: int, n_test: int) -> SplitPairs:
    """Deterministic tail split: test, then valid, then train."""
    if n_valid + n_test > len(pairs):
        raise ValueError("not enough pairs for the requested splits")
    pairs = list(pairs)
    test = pairs[len(pairs) - n_test :] if n_test else []
    valid = pairs[len(pairs) - n_test - n_valid : len(pairs) - n_test] if n_valid else []
    train = pairs[: len(pairs) - n_test - n_valid]
    return SplitPairs(train=train, valid=valid, test=test)


@dataclass
class MetaTask:
    support: list[ParaphrasePair]
    query: list[ParaphrasePair]
    domain: str


def sample_meta_task(corpus: CorpusSet, hyper, rng: np.random.Generator) -> MetaTask:
    """Draw one task: a batch from a single domain, split support/query."""
    labels = sorted(corpus.domains)
    domain = labels[rng.integers(len(labels))] if len(labels) > 1 else labels[0]
    train = corpus.domains[domain].train
    if len(train) < hyper.task_batch_size:
        raise ValueError(
            f"domain {domain!r} has {len(train)} train pairs, task needs {hyper.task_batch_size}"
        )
    picked = rng.choice(len(train), size=hyper.task_batch_size, replace=False)
    batch = [train[int(i)] for i in picked]
    if getattr(hyper, "shared_support_query", False):
        return MetaTask(support=batch, query=list(batch), domain=domain)
    if len(batch) < 2:
        raise ValueError("task_batch_size must be >= 2 to split support from query")
    n_support = max(1, int(round(len(batch) * hyper.support_fraction)))
    n_support = min(n_support, len(batch) - 1)
    return MetaTask(support=batch[:n_support], query=batch[n_support:], domain=domain)
