"""ROUGE-1/2/L/Lsum, multi-reference max, and exact match.

Normalisation: lowercase, split on anything that is not [a-z0-9], no
stemming. Scores are reproducible within this package but are not meant to
match external ROUGE toolkits digit for digit.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

_TOKEN = re.compile(r"[a-z0-9]+")
_SENT_SPLIT = re.compile(r"\n+|(?<=\.)\s+")


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, hits: int, n_cand: int, n_ref: int) -> "RougeScore":
        p = hits / n_cand if n_cand else 0.0
        r = hits / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


ZERO = RougeScore(0.0, 0.0, 0.0)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    return [s for s in (p.strip() for p in _SENT_SPLIT.split(text)) if s]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int = 1) -> RougeScore:
    if n not in (1, 2):
        raise ValueError("rouge_n supports n in {1, 2}")
    cand = _ngrams(tokenize(candidate), n)
    ref = _ngrams(tokenize(reference), n)
    hits = sum((cand & ref).values())
    return RougeScore.from_counts(hits, sum(cand.values()), sum(ref.values()))


def lcs_table(a: list[str], b: list[str]) -> list[list[int]]:
    rows, cols = len(a), len(b)
    table = [[0] * (cols + 1) for _ in range(rows + 1)]
    for i in range(1, rows + 1):
        ai = a[i - 1]
        prev, cur = table[i - 1], table[i]
        for j in range(1, cols + 1):
            cur[j] = prev[j - 1] + 1 if ai == b[j - 1] else max(prev[j], cur[j - 1])
    return table


def lcs_length(a: list[str], b: list[str]) -> int:
    return lcs_table(a, b)[-1][-1]


def _lcs_indices(ref: list[str], cand: list[str]) -> set[int]:
    """Positions in ``ref`` on one longest common subsequence with ``cand``."""
    table = lcs_table(ref, cand)
    i, j = len(ref), len(cand)
    picked = set()
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            picked.add(i - 1)
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return picked


def rouge_l(candidate: str, reference: str) -> RougeScore:
    cand, ref = tokenize(candidate), tokenize(reference)
    return RougeScore.from_counts(lcs_length(cand, ref), len(cand), len(ref))


def rouge_lsum(candidate: str, reference: str) -> RougeScore:
    """Summary-level LCS: union of per-sentence LCS hits, clipped by token counts."""
    cand_sents = [tokenize(s) for s in split_sentences(candidate)]
    ref_sents = [tokenize(s) for s in split_sentences(reference)]
    cand_sents = [s for s in cand_sents if s]
    ref_sents = [s for s in ref_sents if s]
    n_cand = sum(len(s) for s in cand_sents)
    n_ref = sum(len(s) for s in ref_sents)
    if not n_cand or not n_ref:
        return ZERO
    cand_counts = Counter(t for s in cand_sents for t in s)
    ref_counts = Counter(t for s in ref_sents for t in s)
    hits = 0
    for ref in ref_sents:
        union: set[int] = set()
        for cand in cand_sents:
            union |= _lcs_indices(ref, cand)
        for idx in sorted(union):
            tok = ref[idx]
            if cand_counts[tok] > 0 and ref_counts[tok] > 0:
                hits += 1
                cand_counts[tok] -= 1
                ref_counts[tok] -= 1
    return RougeScore.from_counts(hits, n_cand, n_ref)


METRICS = {
    "rouge1": lambda c, r: rouge_n(c, r, 1),
    "rouge2": lambda c, r: rouge_n(c, r, 2),
    "rougeL": rouge_l,
    "rougeLsum": rouge_lsum,
}


def multi_ref(scores: list[RougeScore]) -> RougeScore:
    """The score with the highest F1 among per-reference scores."""
    if not scores:
        raise ValueError("multi_ref needs at least one reference score")
    return max(scores, key=lambda s: s.f1)


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def exact_match(candidate: str, references: list[str]) -> float:
    cand = normalize_answer(candidate)
    return float(any(cand == normalize_answer(r) for r in references))


def score_example(candidate: str, references: list[str]) -> dict[str, float]:
    """F1 for each ROUGE variant (max over references) plus exact match."""
    if not references:
        raise ValueError("score_example needs at least one reference")
    row = {name: multi_ref([fn(candidate, r) for r in references]).f1 for name, fn in METRICS.items()}
    row["exact_match"] = exact_match(candidate, references)
    return row


def aggregate(rows: list[dict[str, float]]) -> dict[str, float]:
    keys = list(METRICS) + ["exact_match"]
    if not rows:
        return {k: 0.0 for k in keys}
    return {k: sum(r[k] for r in rows) / len(rows) for k in keys}
