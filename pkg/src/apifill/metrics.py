"""Ranking quality measures over candidate lists: EM@k, MRR, MAP.

Matching is exact string equality after corpus normalization (lowercase,
trimmed). A query whose relevant APIs never appear contributes 0 to MRR and
MAP and counts as a miss for every EM@k. Aggregation uses compensated
summation so evaluation order can never change a reported number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .corpus import normalize_api


@dataclass(frozen=True)
class RankedResult:
    query_id: str
    candidates: tuple          # normalized, deduplicated, rank order preserved
    relevant: frozenset        # normalized, non-empty
    error: str | None = None   # decoding failure note; candidates then empty

    @classmethod
    def make(cls, query_id, candidates, relevant, error=None):
        seen = set()
        deduped = []
        for c in candidates:
            c = normalize_api(c)
            if c not in seen:
                seen.add(c)
                deduped.append(c)
        rel = frozenset(normalize_api(r) for r in relevant)
        if not rel:
            raise ValueError(f"empty relevant set for query {query_id!r}")
        return cls(str(query_id), tuple(deduped), rel, error)

    def first_hit_rank(self):
        """1-based rank of the first relevant candidate, or None."""
        for i, c in enumerate(self.candidates, start=1):
            if c in self.relevant:
                return i
        return None


def em_at_k(results, k):
    """Percent of queries whose top-k candidates contain any relevant API."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("empty result set")
    hits = sum(1 for r in results
               if any(c in r.relevant for c in r.candidates[:k]))
    return 100.0 * hits / len(results)


def mrr(results):
    """Mean reciprocal rank of the first relevant candidate; misses count 0."""
    if not results:
        raise ValueError("empty result set")
    terms = []
    for r in results:
        rank = r.first_hit_rank()
        terms.append(0.0 if rank is None else 1.0 / rank)
    return math.fsum(terms) / len(results)


def average_precision(candidates, relevant):
    """Sum of precision-at-hit over the relevant set size.

    Relevant items that never show up contribute nothing, so the score is
    penalized for incomplete retrieval.
    """
    relevant = frozenset(normalize_api(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    seen = set()
    hits = 0
    terms = []
    rank = 0
    for c in candidates:
        c = normalize_api(c)
        if c in seen:
            continue
        seen.add(c)
        rank += 1
        if c in relevant:
            hits += 1
            terms.append(hits / rank)
    return math.fsum(terms) / len(relevant)


def map_score(results):
    if not results:
        raise ValueError("empty result set")
    return math.fsum(average_precision(r.candidates, r.relevant) for r in results) / len(results)


@dataclass
class EvalReport:
    em: dict            # k -> percent, k = 1..5
    mrr: float
    map: float
    results: list = field(default_factory=list)
    errors: int = 0

    def to_dict(self, include_results=True):
        d = {
            "queries": len(self.results),
            "em": {str(k): v for k, v in self.em.items()},
            "mrr": self.mrr,
            "map": self.map,
            "decode_errors": self.errors,
        }
        if include_results:
            d["results"] = [
                {"query_id": r.query_id, "rank": r.first_hit_rank(),
                 "candidates": list(r.candidates), "error": r.error}
                for r in self.results
            ]
        return d


def build_report(results, max_k=5):
    em = {k: em_at_k(results, k) for k in range(1, max_k + 1)}
    return EvalReport(em=em, mrr=mrr(results), map=map_score(results),
                      results=list(results),
                      errors=sum(1 for r in results if r.error))


def evaluate(params, config, vocab, pairs, *, width=10, k=5, library=None,
             prefix_mode=1, require_prefix=False):
    """Score a trained model on (query, api) pairs.

    prefix_mode gives the number of leading API words revealed in the prompt
    (0 = bare mask, the no-prompt mode); it is clamped to n-1 so at least one
    word stays masked. A decoding failure marks its query as a miss instead of
    aborting the run.
    """
    from . import decoder  # local import keeps module load cheap for metric-only use

    results = []
    for i, pair in enumerate(pairs):
        words = pair.words
        keep = min(prefix_mode, len(words) - 1)
        prefix = ".".join(words[:keep]) if keep > 0 else ""
        relevant = (pair.api, *pair.extra_relevant)
        try:
            cands = decoder.complete(params, config, vocab, pair.query, prefix,
                                     k=k, width=width, library=library,
                                     require_prefix=require_prefix)
            results.append(RankedResult.make(i, [c.text for c in cands], relevant))
        except Exception as exc:  # scored as a miss, run continues
            results.append(RankedResult.make(i, [], relevant, error=str(exc)))
    return build_report(results, max_k=k)


def report_table(reports: dict):
    """Aligned text table, one row per labelled report."""
    cols = ["EM@1", "EM@2", "EM@3", "EM@4", "EM@5", "MRR", "MAP"]
    label_w = max([len(str(l)) for l in reports] + [len("run")])
    lines = [f"{'run':<{label_w}}  " + "  ".join(f"{c:>7}" for c in cols)]
    for label, rep in reports.items():
        cells = [f"{rep.em.get(k, float('nan')):7.2f}" for k in range(1, 6)]
        cells += [f"{rep.mrr:7.4f}", f"{rep.map:7.4f}"]
        lines.append(f"{str(label):<{label_w}}  " + "  ".join(cells))
    return "\n".join(lines)
