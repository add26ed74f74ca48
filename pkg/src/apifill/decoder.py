"""Beam-search completion, average-log-probability ranking, and the library filter.

Candidates are ranked by mean per-token log-probability. Finished hypotheses
(end token emitted or length budget reached) stay in the beam and compete with
live ones; the final list is exactly `width` candidates unless the space of
sequences is smaller. Ties sort shorter-first, then by token ids.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from .bpe import BOS_ID, EOS_ID
from .corpus import build_input_text, build_prompt, normalize_api, normalize_query


@dataclass(frozen=True)
class Candidate:
    ids: tuple                 # emitted token ids, end token included when emitted
    text: str
    logps: tuple               # per-token log-probabilities, each <= 0
    score: float               # mean log-probability
    finished: bool
    in_library: bool | None = None  # set by api_check_filter

    def sort_key(self):
        return (-self.score, len(self.ids), self.ids)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _select_top(scores, width, tie_key):
    """Indices of the `width` best pool entries by (-score, tie_key(i)).

    Only entries tied at the cutoff score pay for full key materialization.
    """
    n = len(scores)
    if n <= width:
        return list(range(n))
    neg = -scores
    kth = np.partition(neg, width - 1)[width - 1]
    strict = np.nonzero(neg < kth)[0]
    tied = np.nonzero(neg == kth)[0]
    need = width - len(strict)
    tied_sorted = sorted(tied.tolist(), key=tie_key)
    return strict.tolist() + tied_sorted[:need]


def beam_search(params, config, vocab, input_seq, width=10, max_len=None):
    """Ranked list of Candidate for one encoded input.

    Every step expands each live hypothesis by the whole vocabulary, pools the
    expansions with already-finished candidates, and keeps the `width` best by
    running mean log-probability.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    if max_len is None:
        max_len = config.max_output_length
    if not 1 <= max_len <= config.max_output_length:
        raise ValueError(f"max_len must be in [1, {config.max_output_length}]")

    input_ids = input_seq.ids[None, :]
    input_len = np.array([input_seq.true_length])
    enc_out, enc_invalid = M.encode_inputs(params, config, input_ids, input_len)

    live = [Candidate((), "", (), 0.0, False)]
    finished: list[Candidate] = []

    for t in range(1, max_len + 1):
        dec_in = np.array([[BOS_ID, *h.ids] for h in live], dtype=np.int64)
        logits = M.decoder_logits(params, config, enc_out, enc_invalid, dec_in)
        logp = _log_softmax(logits[:, -1, :].astype(np.float64))  # (L, V)
        v = logp.shape[1]

        sums = np.array([sum(h.logps) for h in live], dtype=np.float64)
        new_score = ((sums[:, None] + logp) / t).ravel()
        pool_scores = np.concatenate(
            [np.array([f.score for f in finished], dtype=np.float64), new_score])
        n_fin = len(finished)

        def entry_len(i):
            return len(finished[i].ids) if i < n_fin else t

        def entry_ids(i):
            if i < n_fin:
                return finished[i].ids
            j = i - n_fin
            return live[j // v].ids + (j % v,)

        chosen = _select_top(pool_scores, width,
                             tie_key=lambda i: (entry_len(i), entry_ids(i)))

        new_live, new_finished = [], []
        for i in chosen:
            if i < n_fin:
                new_finished.append(finished[i])
                continue
            j = i - n_fin
            h, tok = live[j // v], j % v
            ids = h.ids + (tok,)
            logps = h.logps + (float(logp[j // v, tok]),)
            done = tok == EOS_ID or t == max_len
            cand = Candidate(ids, "", logps, float(pool_scores[i]), done)
            (new_finished if done else new_live).append(cand)
        live, finished = new_live, new_finished
        if not live:
            break

    finished.sort(key=Candidate.sort_key)
    return [replace(c, text=vocab.decode(np.array(c.ids))) for c in finished]


_MULTI_DOT = re.compile(r"\.{2,}")


def normalize_api_text(s):
    """Library-lookup normalization: lowercase, trim, collapse repeated dots."""
    return _MULTI_DOT.sub(".", s.strip().lower())


class ApiLibrary:
    """Set of valid fully-qualified API names, matched after normalization."""

    def __init__(self, names):
        self._names = {normalize_api_text(n) for n in names if n.strip()}

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return normalize_api_text(name) in self._names

    def __iter__(self):
        return iter(sorted(self._names))

    @classmethod
    def from_file(cls, path):
        """One name per line; blank lines and # comments ignored."""
        names = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if line:
                    names.append(line)
        return cls(names)


def api_check_filter(candidates, library: ApiLibrary, need):
    """Keep in-library candidates in rank order until `need` are found.

    Falls back to the highest-ranked out-of-library candidates (flagged
    in_library=False) when the library cannot supply enough. An empty library
    is reported and the filter degrades to plain truncation.
    """
    if need < 1:
        raise ValueError("need must be >= 1")
    candidates = list(candidates)
    if len(library) == 0:
        warnings.warn("empty API library; filter passes candidates through")
        return candidates[:need]
    valid, invalid = [], []
    for c in candidates:
        if len(valid) == need:
            break
        if c.text in library:
            valid.append(replace(c, in_library=True))
        else:
            invalid.append(replace(c, in_library=False))
    out = valid
    limit = min(need, len(candidates))
    for c in invalid:
        if len(out) >= limit:
            break
        out.append(c)
    return out


def complete(params, config, vocab, query, prefix="", k=5, width=10,
             library=None, require_prefix=False, need=None):
    """Ranked API candidates for one query plus known-prefix prompt.

    An empty prefix produces the bare-mask prompt (the no-prompt mode). When
    `require_prefix` is set, candidates that contradict the given prefix are
    dropped before any library filtering.
    """
    if k > width:
        raise ValueError(f"k={k} exceeds beam width {width}; raise the beam width")
    prefix_words = [w for w in normalize_api(prefix).split(".") if w] if prefix else []
    input_text = build_input_text(build_prompt(prefix_words), normalize_query(query))
    seq = vocab.encode(input_text, config.max_input_length)
    cands = beam_search(params, config, vocab, seq, width=width)
    if require_prefix and prefix_words:
        head = ".".join(prefix_words)
        cands = [c for c in cands if c.text == head or c.text.startswith(head + ".")]
    if library is not None:
        cands = api_check_filter(cands, library, need if need is not None else k)
    return cands[:k]
