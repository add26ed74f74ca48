"""Byte-level BPE tokenizer with reserved control tokens and fixed-length padding.

The base alphabet is all 256 bytes, so any text encodes without an OOV path.
Merges are learned greedily by pair frequency; frequency ties break on the
lexicographically smallest byte pair, which makes training deterministic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3
SEP_ID = 4

RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<mask>", "<sep>")
N_RESERVED = len(RESERVED_TOKENS)
BYTE_OFFSET = N_RESERVED  # byte b -> token id BYTE_OFFSET + b
MIN_VOCAB = N_RESERVED + 256

# longest literal first so "<sep>" never half-matches
_SPECIAL_RE = re.compile("|".join(re.escape(t) for t in sorted(RESERVED_TOKENS, key=len, reverse=True)))
_SPECIAL_ID = {t: i for i, t in enumerate(RESERVED_TOKENS)}

_VOCAB_HEADER = "bpe-vocab 1"


@dataclass(frozen=True)
class TokenSeq:
    """Fixed-length id sequence; positions >= true_length hold the pad id."""

    ids: np.ndarray
    true_length: int
    max_len: int

    def content_ids(self):
        return [int(i) for i in self.ids[: self.true_length]]


def _escape(bs: bytes) -> str:
    out = []
    for b in bs:
        if b == 0x5C:
            out.append("\\\\")
        elif 0x21 <= b < 0x7F:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def _unescape(s: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(s):
        c = s[i]
        if c == "\\":
            if s[i + 1] == "\\":
                out.append(0x5C)
                i += 2
            elif s[i + 1] == "x":
                out.append(int(s[i + 2:i + 4], 16))
                i += 4
            else:
                raise ValueError(f"bad escape in vocab file: {s[i:i+2]!r}")
        else:
            out.append(ord(c))
            i += 1
    return bytes(out)


class Vocab:
    """Immutable after training; encode/decode are reentrant."""

    def __init__(self, token_bytes, merges):
        # token_bytes[id] is None for reserved ids, raw bytes otherwise
        self.token_bytes = list(token_bytes)
        self.merges = list(merges)
        self.merge_rank = {pair: (rank, MIN_VOCAB + rank) for rank, pair in enumerate(self.merges)}

    def __len__(self):
        return len(self.token_bytes)

    # -- encoding ----------------------------------------------------------

    def _apply_merges(self, ids):
        ids = list(ids)
        while len(ids) >= 2:
            best_rank = None
            best_pair = None
            for pair in zip(ids, ids[1:]):
                info = self.merge_rank.get(pair)
                if info is not None and (best_rank is None or info[0] < best_rank):
                    best_rank, best_pair = info[0], pair
            if best_pair is None:
                break
            new_id = self.merge_rank[best_pair][1]
            merged = []
            i = 0
            while i < len(ids):
                if i < len(ids) - 1 and (ids[i], ids[i + 1]) == best_pair:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        return ids

    def tokenize(self, text: str) -> list[int]:
        """Subword ids for `text`, unpadded; reserved literals map to their ids."""
        ids = []
        pos = 0
        for m in _SPECIAL_RE.finditer(text):
            if m.start() > pos:
                chunk = text[pos:m.start()].encode("utf-8")
                ids.extend(self._apply_merges(BYTE_OFFSET + b for b in chunk))
            ids.append(_SPECIAL_ID[m.group()])
            pos = m.end()
        if pos < len(text):
            chunk = text[pos:].encode("utf-8")
            ids.extend(self._apply_merges(BYTE_OFFSET + b for b in chunk))
        return ids

    def encode(self, text: str, max_len: int | None, add_end: bool = False) -> TokenSeq:
        """Encode and right-pad with id 0 (or truncate the tail) to `max_len`.

        max_len=None keeps the natural length, which is what the round-trip
        checks use.
        """
        ids = self.tokenize(text)
        if add_end:
            ids.append(EOS_ID)
        if max_len is None:
            max_len = len(ids)
        if len(ids) > max_len:
            ids = ids[:max_len]
        true_length = len(ids)
        arr = np.zeros(max_len, dtype=np.int32)
        arr[:true_length] = ids
        return TokenSeq(ids=arr, true_length=true_length, max_len=max_len)

    def decode(self, ids) -> str:
        """Text for `ids`; pads are stripped and an end token stops decoding."""
        pieces = []
        buf = bytearray()

        def flush():
            if buf:
                pieces.append(bytes(buf).decode("utf-8", errors="replace"))
                buf.clear()

        for raw in ids:
            i = int(raw)
            if i < 0 or i >= len(self.token_bytes):
                raise ValueError(f"unknown token id {i}")
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            if i < N_RESERVED:
                flush()
                pieces.append(RESERVED_TOKENS[i])
            else:
                buf.extend(self.token_bytes[i])
        flush()
        return "".join(pieces)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_VOCAB_HEADER + "\n")
            fh.write(" ".join(RESERVED_TOKENS) + "\n")
            for a, b in self.merges:
                fh.write(f"{_escape(self.token_bytes[a])}\t{_escape(self.token_bytes[b])}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if not lines or lines[0] != _VOCAB_HEADER:
            raise ValueError(f"not a vocab file: {path}")
        if lines[1].split() != list(RESERVED_TOKENS):
            raise ValueError("reserved token list does not match this build")
        token_bytes = _base_tokens()
        by_bytes = {token_bytes[i]: i for i in range(N_RESERVED, len(token_bytes))}
        merges = []
        for line in lines[2:]:
            if not line:
                continue
            left, _, right = line.partition("\t")
            a = by_bytes[_unescape(left)]
            b = by_bytes[_unescape(right)]
            merges.append((a, b))
            new = token_bytes[a] + token_bytes[b]
            by_bytes[new] = len(token_bytes)
            token_bytes.append(new)
        return cls(token_bytes, merges)


def _base_tokens():
    return [None] * N_RESERVED + [bytes([b]) for b in range(256)]


def train_bpe(texts, vocab_size: int = 8000) -> Vocab:
    """Learn a merge table from `texts`; stops early once no pair repeats."""
    if vocab_size < MIN_VOCAB:
        raise ValueError(f"vocab_size must be >= {MIN_VOCAB}, got {vocab_size}")
    token_bytes = _base_tokens()
    seqs = [[BYTE_OFFSET + b for b in t.encode("utf-8")] for t in texts]

    pair_counts: dict = {}
    pair_seqs: dict = {}
    for si, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + 1
            pair_seqs.setdefault(pair, set()).add(si)

    merges = []
    while len(token_bytes) < vocab_size and pair_counts:
        best = min(pair_counts, key=lambda p: (-pair_counts[p], token_bytes[p[0]], token_bytes[p[1]]))
        if pair_counts[best] < 2:
            break
        new_id = len(token_bytes)
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])
        merges.append(best)
        for si in sorted(pair_seqs.get(best, ())):
            seq = seqs[si]
            for pair in zip(seq, seq[1:]):
                pair_counts[pair] -= 1
                if pair_counts[pair] == 0:
                    del pair_counts[pair]
            merged = []
            i = 0
            while i < len(seq):
                if i < len(seq) - 1 and (seq[i], seq[i + 1]) == best:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(seq[i])
                    i += 1
            seqs[si] = merged
            for pair in zip(merged, merged[1:]):
                pair_counts[pair] = pair_counts.get(pair, 0) + 1
                pair_seqs.setdefault(pair, set()).add(si)
        pair_seqs.pop(best, None)
    return Vocab(token_bytes, merges)
