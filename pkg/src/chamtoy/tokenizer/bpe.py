"""Byte-level byte-pair encoding.

Token ids 0..255 are the raw bytes; each learned merge appends one id, so
a tokenizer with R merges has vocabulary size 256 + R.  Merges apply to
the whole byte stream with no word segmentation, which makes
decode(encode(s)) == s for every unicode string by construction.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

_HEADER = "bpe-v1"


class BPETokenizer:
    def __init__(self, merges: list[tuple[int, int]]):
        self.merges = list(merges)
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise ValueError("duplicate merge pair")
        self.token_bytes = [bytes([i]) for i in range(256)]
        for left, right in self.merges:
            if left >= len(self.token_bytes) or right >= len(self.token_bytes):
                raise ValueError("merge references an id not yet defined")
            self.token_bytes.append(self.token_bytes[left] + self.token_bytes[right])

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.merges)

    def encode(self, text: str) -> list[int]:
        seq = list(text.encode("utf-8"))
        while len(seq) > 1:
            best = None
            for pair in zip(seq, seq[1:]):
                rank = self.ranks.get(pair)
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, pair)
            if best is None:
                break
            seq = _merge_pair(seq, best[1], 256 + best[0])
        return seq

    def decode_bytes(self, ids) -> bytes:
        chunks = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"token id {i} outside vocabulary of {self.vocab_size}")
            chunks.append(self.token_bytes[i])
        return b"".join(chunks)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8")

    def save(self, path) -> None:
        lines = [_HEADER]
        for rank, (left, right) in enumerate(self.merges):
            lines.append(f"{rank} {left} {right}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "BPETokenizer":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != _HEADER:
            raise ValueError(f"not a tokenizer file: {path}")
        merges: list[tuple[int, int]] = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rank_s, left_s, right_s = line.split(" ")
            if int(rank_s) != len(merges):
                raise ValueError(f"merge ranks out of order at line {rank_s!r}")
            merges.append((int(left_s), int(right_s)))
        return cls(merges)


def _merge_pair(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(texts, vocab_size: int) -> BPETokenizer:
    """Learn merges greedily by pair frequency over the given corpus.

    vocab_size counts the 256 byte tokens, so it must be at least 256.
    Frequency ties break toward the smaller (left, right) id pair, which
    makes training deterministic.
    """
    if vocab_size < 256:
        raise ValueError(f"vocab_size must be >= 256, got {vocab_size}")
    seqs = [list(t.encode("utf-8")) for t in texts if t]
    merges: list[tuple[int, int]] = []
    for new_id in range(256, vocab_size):
        counts: Counter = Counter()
        for seq in seqs:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break  # nothing repeats; further merges would not compress
        pair = min(p for p, c in counts.items() if c == best_count)
        merges.append(pair)
        seqs = [_merge_pair(seq, pair, new_id) for seq in seqs]
    return BPETokenizer(merges)
