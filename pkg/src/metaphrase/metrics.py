"""Paraphrase quality metrics: BLEU-n, iBLEU, ROUGE-1/2, corpus reporting.

All metrics work on whitespace token lists with sentence markers stripped.
BLEU is the standard modified-precision geometric mean with a brevity
penalty; n-gram orders longer than the candidate are dropped from the mean
rather than zeroing it (a three-token candidate scores BLEU-4 over orders
1..3). Corpus scores aggregate counts before the ratio and are unsmoothed;
sentence-level diagnostics may add epsilon to zero counts, and the report
flags which mode produced it.

iBLEU = alpha * BLEU(candidate, reference) - (1 - alpha) * BLEU(candidate,
source): high overlap with the reference is rewarded, copying the source is
penalized. The balancing default is alpha = 0.9 with BLEU-4 inside.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

MARKERS = ("<s>", "</s>", "<pad>")

IBLEU_ALPHA = 0.9
SENTENCE_SMOOTH_EPS = 0.1


def strip_markers(tokens: Sequence[str]) -> list[str]:
    return [t for t in tokens if t not in MARKERS]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    """Clipped/total n-gram counts plus lengths; addable across a corpus."""

    clipped: list[int]
    total: list[int]
    cand_len: int
    ref_len: int

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            [a + b for a, b in zip(self.clipped, other.clipped)],
            [a + b for a, b in zip(self.total, other.total)],
            self.cand_len + other.cand_len,
            self.ref_len + other.ref_len,
        )


def bleu_stats(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int) -> BleuStats:
    candidate = strip_markers(candidate)
    references = [strip_markers(r) for r in references]
    if not candidate:
        raise ValueError("empty candidate")
    if not references or any(not r for r in references):
        raise ValueError("empty reference set")

    clipped, total = [], []
    for k in range(1, n + 1):
        cand_counts = _ngrams(candidate, k)
        best = Counter()
        for ref in references:
            for gram, count in _ngrams(ref, k).items():
                if count > best[gram]:
                    best[gram] = count
        clipped.append(sum(min(c, best[g]) for g, c in cand_counts.items()))
        total.append(sum(cand_counts.values()))

    # Closest reference length; ties break toward the shorter reference.
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    return BleuStats(clipped, total, c, r)


def _bleu_from_stats(stats: BleuStats, smooth_eps: float = 0.0) -> float:
    import math

    log_sum, orders = 0.0, 0
    for clipped, total in zip(stats.clipped, stats.total):
        if total == 0:
            continue  # candidate has no n-grams of this order
        orders += 1
        if clipped == 0:
            if smooth_eps > 0.0:
                clipped = smooth_eps
            else:
                return 0.0
        log_sum += math.log(clipped / total)
    if orders == 0:
        return 0.0
    precision = math.exp(log_sum / orders)
    bp = 1.0 if stats.cand_len > stats.ref_len else math.exp(1.0 - stats.ref_len / stats.cand_len)
    return precision * bp


def bleu_n(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int,
           smooth_eps: float = 0.0) -> float:
    """Sentence-level BLEU-n against one or more references, in [0, 1]."""
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    return _bleu_from_stats(bleu_stats(candidate, references, n), smooth_eps)


def corpus_bleu(candidates: Sequence[Sequence[str]],
                references: Sequence[Sequence[Sequence[str]]], n: int,
                smooth_eps: float = 0.0) -> float:
    """Corpus BLEU-n: counts aggregate over pairs before the ratio."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    agg = None
    for cand, refs in zip(candidates, references):
        stats = bleu_stats(cand, refs, n)
        agg = stats if agg is None else agg + stats
    return _bleu_from_stats(agg, smooth_eps)


def ibleu(candidate: Sequence[str], reference: Sequence[str], source: Sequence[str],
          alpha: float = IBLEU_ALPHA) -> float:
    """alpha * BLEU-4(cand, ref) - (1 - alpha) * BLEU-4(cand, source)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * bleu_n(candidate, [reference], 4) - (1.0 - alpha) * bleu_n(
        candidate, [source], 4
    )


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int,
            f1: bool = False) -> float:
    """ROUGE-n recall (clipped overlap / reference n-grams); F1 optional."""
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2, got {n}")
    candidate = strip_markers(candidate)
    reference = strip_markers(reference)
    ref_counts = _ngrams(reference, n)
    ref_total = sum(ref_counts.values())
    if ref_total == 0:
        raise ValueError(f"reference shorter than {n} tokens")
    cand_counts = _ngrams(candidate, n)
    overlap = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    recall = overlap / ref_total
    if not f1:
        return recall
    cand_total = sum(cand_counts.values())
    if cand_total == 0 or overlap == 0:
        return 0.0
    precision = overlap / cand_total
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    alpha: float = IBLEU_ALPHA
    rouge_f1: bool = False
    smooth_eps: float = 0.0  # corpus scores are unsmoothed by default


@dataclass
class MetricReport:
    scores: dict[str, float]  # reported x100
    pairs: int
    alpha: float
    smoothing: str
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for name, value in self.scores.items():
            lines.append(f"{name},{value:.4f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max(len(n) for n in self.scores)
        lines = [f"{name.ljust(width)}  {value:8.2f}" for name, value in self.scores.items()]
        header = f"{'metric'.ljust(width)}  {'score':>8}"
        rule = "-" * len(header)
        footer = f"pairs={self.pairs} alpha={self.alpha} smoothing={self.smoothing}"
        return "\n".join([header, rule] + lines + [rule, footer]) + "\n"


def _read_token_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def evaluate_corpus(generated_path, reference_path, source_path,
                    config: EvalConfig | None = None) -> MetricReport:
    """Corpus-level metrics over aligned one-sentence-per-line files."""
    config = config or EvalConfig()
    generated = _read_token_lines(generated_path)
    references = _read_token_lines(reference_path)
    sources = _read_token_lines(source_path)
    if not (len(generated) == len(references) == len(sources)):
        raise ValueError(
            f"line counts differ: generated={len(generated)} "
            f"references={len(references)} sources={len(sources)}"
        )
    return evaluate_pairs(generated, references, sources, config)


def evaluate_pairs(generated, references, sources, config: EvalConfig | None = None) -> MetricReport:
    config = config or EvalConfig()
    single_refs = [[r] for r in references]
    eps = config.smooth_eps
    scores = {
        "BLEU-2": 100.0 * corpus_bleu(generated, single_refs, 2, eps),
        "BLEU-4": 100.0 * corpus_bleu(generated, single_refs, 4, eps),
        "iBLEU": 100.0
        * (
            config.alpha * corpus_bleu(generated, single_refs, 4, eps)
            - (1.0 - config.alpha) * corpus_bleu(generated, [[s] for s in sources], 4, eps)
        ),
        "ROUGE-1": 100.0
        * sum(rouge_n(c, r, 1, config.rouge_f1) for c, r in zip(generated, references))
        / len(generated),
        "ROUGE-2": 100.0
        * sum(rouge_n(c, r, 2, config.rouge_f1) for c, r in zip(generated, references))
        / len(generated),
    }
    return MetricReport(
        scores=scores,
        pairs=len(generated),
        alpha=config.alpha,
        smoothing="unsmoothed" if eps == 0.0 else f"add-eps({eps})",
    )
