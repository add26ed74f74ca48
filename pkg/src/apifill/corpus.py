"""Query/API pair loading, dataset splitting, and prefix-prompt construction."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MASK_TOKEN = "<mask>"
SEP_TOKEN = "<sep>"

# coverage thresholds reported by corpus_stats (token counts)
QUERY_LENGTH_THRESHOLDS = (16, 32, 48)
API_LENGTH_THRESHOLDS = (8, 12, 16)

_WS = re.compile(r"\s+")


def normalize_query(text: str) -> str:
    return _WS.sub(" ", text).strip()


def normalize_api(text: str) -> str:
    return text.strip().lower()


def api_words(api: str) -> list[str]:
    return api.split(".")


@dataclass(frozen=True)
class QueryApiPair:
    """One natural-language query and its ground-truth fully-qualified API."""

    query: str
    api: str
    extra_relevant: tuple[str, ...] = ()

    @property
    def words(self) -> list[str]:
        return api_words(self.api)


def make_pair(query: str, api: str, extra_relevant=()) -> QueryApiPair:
    query = normalize_query(str(query))
    api = normalize_api(str(api))
    if not query:
        raise ValueError("query is empty after whitespace normalization")
    words = api_words(api)
    if len(words) < 2 or any(not w for w in words):
        raise ValueError(f"api must have >= 2 non-empty dot-separated words: {api!r}")
    extra = tuple(normalize_api(str(a)) for a in extra_relevant)
    return QueryApiPair(query=query, api=api, extra_relevant=extra)


@dataclass
class CorpusLoad:
    pairs: list[QueryApiPair]
    errors: list[tuple[int, str]] = field(default_factory=list)  # (1-based line, message)
    duplicates: int = 0


def load_pairs(path) -> CorpusLoad:
    """Read a UTF-8 corpus file, one JSON object per line with `query`/`api` fields.

    Malformed lines land in the error report instead of being dropped silently;
    duplicate (query, api) pairs are dropped with a warning.
    """
    result = CorpusLoad(pairs=[])
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("record is not a JSON object")
                if "query" not in record or "api" not in record:
                    raise ValueError("record missing query or api field")
                pair = make_pair(record["query"], record["api"], record.get("relevant", ()))
            except (ValueError, KeyError, TypeError) as exc:
                result.errors.append((lineno, str(exc)))
                continue
            key = (pair.query, pair.api)
            if key in seen:
                result.duplicates += 1
                continue
            seen.add(key)
            result.pairs.append(pair)
    if result.duplicates:
        log.warning("dropped %d duplicate (query, api) pairs", result.duplicates)
    return result


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.8
    valid_ratio: float = 0.1
    test_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        ratios = (self.train_ratio, self.valid_ratio, self.test_ratio)
        if any(r <= 0 for r in ratios):
            raise ValueError("split ratios must be positive")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")


def split_indices(n: int, spec: SplitSpec):
    """Deterministic shuffled partition; floor-rounded sizes, remainder to train."""
    if n < 10:
        raise ValueError(f"need at least 10 pairs to split, got {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_valid = int(np.floor(spec.valid_ratio * n))
    n_test = int(np.floor(spec.test_ratio * n))
    n_train = n - n_valid - n_test
    train = perm[:n_train]
    valid = perm[n_train:n_train + n_valid]
    test = perm[n_train + n_valid:]
    return train, valid, test


def split_corpus(pairs, spec: SplitSpec):
    train_idx, valid_idx, test_idx = split_indices(len(pairs), spec)
    pick = lambda idx: [pairs[i] for i in idx]
    return pick(train_idx), pick(valid_idx), pick(test_idx)


@dataclass(frozen=True)
class PromptedExample:
    """A masked-prefix prompt joined with the query, paired with the full API."""

    prefix_words: tuple[str, ...]
    masked_count: int
    input_text: str
    target_text: str


def build_prompt(prefix_words) -> str:
    if not prefix_words:
        return MASK_TOKEN
    return ".".join(prefix_words) + "." + MASK_TOKEN


def build_input_text(prompt: str, query: str) -> str:
    return prompt + SEP_TOKEN + query


def parse_input_text(text: str):
    """Recover (prefix, query) from an input text; inverse of the builders."""
    prompt, sep, query = text.partition(SEP_TOKEN)
    if not sep:
        raise ValueError("input text has no separator token")
    if prompt == MASK_TOKEN:
        return "", query
    if not prompt.endswith("." + MASK_TOKEN):
        raise ValueError("prompt region does not end with the mask token")
    return prompt[:-(len(MASK_TOKEN) + 1)], query


def mask_api(api: str, n_rand: int):
    """Drop the last n_rand dot-words of `api`, returning (prefix_words, prompt)."""
    words = api_words(api)
    n = len(words)
    if n < 2:
        raise ValueError(f"api must have >= 2 words to mask: {api!r}")
    if not 1 <= n_rand <= n - 1:
        raise ValueError(f"n_rand must be in [1, {n - 1}] for a {n}-word api, got {n_rand}")
    prefix = tuple(words[: n - n_rand])
    return prefix, build_prompt(prefix)


def make_prompted_examples(pair: QueryApiPair, rng: np.random.Generator, count: int = 3):
    """Up to `count` prompts per API with pairwise-distinct masked-word counts."""
    if count < 1:
        raise ValueError("count must be >= 1")
    n = len(pair.words)
    choices = np.arange(1, n)
    take = min(count, n - 1)
    picked = rng.choice(choices, size=take, replace=False)
    examples = []
    for n_rand in picked:
        n_rand = int(n_rand)
        prefix, prompt = mask_api(pair.api, n_rand)
        examples.append(PromptedExample(
            prefix_words=prefix,
            masked_count=n_rand,
            input_text=build_input_text(prompt, pair.query),
            target_text=pair.api,
        ))
    return examples


@dataclass(frozen=True)
class LengthStats:
    average: float
    mode: int
    median: float
    coverage: dict[int, float]  # threshold -> fraction strictly below

    def to_dict(self):
        return {
            "average": self.average,
            "mode": self.mode,
            "median": self.median,
            "coverage": {str(k): v for k, v in self.coverage.items()},
        }


@dataclass(frozen=True)
class CorpusStats:
    queries: LengthStats
    apis: LengthStats

    def to_dict(self):
        return {"queries": self.queries.to_dict(), "apis": self.apis.to_dict()}


def _length_stats(lengths, thresholds) -> LengthStats:
    arr = np.asarray(lengths)
    counts = Counter(lengths)
    # smallest value wins ties, so the mode is deterministic
    mode = min(counts, key=lambda v: (-counts[v], v))
    coverage = {t: float(np.mean(arr < t)) for t in thresholds}
    return LengthStats(
        average=float(arr.mean()),
        mode=int(mode),
        median=float(np.median(arr)),
        coverage=coverage,
    )


def corpus_stats(pairs, vocab) -> CorpusStats:
    """Subword-token length statistics for queries and APIs."""
    q_lens = [len(vocab.tokenize(p.query)) for p in pairs]
    a_lens = [len(vocab.tokenize(p.api)) for p in pairs]
    return CorpusStats(
        queries=_length_stats(q_lens, QUERY_LENGTH_THRESHOLDS),
        apis=_length_stats(a_lens, API_LENGTH_THRESHOLDS),
    )
