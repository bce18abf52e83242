"""Byte-level byte-pair-encoding tokenizer.

The base alphabet is all 256 byte values, so any text (and any malformed
model output) can be encoded and decoded without an UNK in practice. Intents
and snippets share one vocabulary.

Text is pre-segmented into alternating runs of whitespace and
non-whitespace; merges never cross run boundaries. That keeps training
linear in the number of *unique* runs and round-trips exactly, since
concatenating the runs reproduces the input.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
_NUM_SPECIALS = 3
BASE_VOCAB = _NUM_SPECIALS + 256  # specials + one piece per byte value

_SPECIAL_NAMES = {"<pad>": PAD_ID, "<eos>": EOS_ID, "<unk>": UNK_ID}
_CHUNK_RE = re.compile(r"\s+|\S+")


@dataclass
class TokenSequence:
    ids: list[int]
    original_length: int


class Vocabulary:
    """Subword inventory: ids 0-2 are specials, 3-258 the byte alphabet,
    and everything above comes from merges in training order."""

    def __init__(self, merges: list[tuple[bytes, bytes]]):
        self._pieces: list[bytes] = [bytes([b]) for b in range(256)]  # ids 3..258
        self._piece_to_id: dict[bytes, int] = {p: _NUM_SPECIALS + i for i, p in enumerate(self._pieces)}
        self._merges: list[tuple[bytes, bytes]] = []
        # (left_id, right_id) -> (rank, merged_id)
        self._ranks: dict[tuple[int, int], tuple[int, int]] = {}
        self._chunk_cache: dict[str, tuple[int, ...]] = {}
        for left, right in merges:
            self._add_merge(left, right)

    def _add_merge(self, left: bytes, right: bytes) -> int:
        lid, rid = self._piece_to_id.get(left), self._piece_to_id.get(right)
        if lid is None or rid is None:
            raise DataError(f"merge ({left!r}, {right!r}) references unknown pieces")
        merged = left + right
        mid = self._piece_to_id.get(merged)
        if mid is None:
            mid = _NUM_SPECIALS + len(self._pieces)
            self._pieces.append(merged)
            self._piece_to_id[merged] = mid
        self._ranks[(lid, rid)] = (len(self._merges), mid)
        self._merges.append((left, right))
        return mid

    @property
    def size(self) -> int:
        return _NUM_SPECIALS + len(self._pieces)

    @property
    def merges(self) -> list[tuple[bytes, bytes]]:
        return list(self._merges)

    @property
    def pieces(self) -> list[bytes]:
        return list(self._pieces)

    def piece(self, token_id: int) -> bytes:
        if not _NUM_SPECIALS <= token_id < self.size:
            raise ValueError(f"id {token_id} has no piece")
        return self._pieces[token_id - _NUM_SPECIALS]

    def _encode_chunk(self, chunk: str) -> tuple[int, ...]:
        cached = self._chunk_cache.get(chunk)
        if cached is not None:
            return cached
        syms = [_NUM_SPECIALS + b for b in chunk.encode("utf-8")]
        while len(syms) > 1:
            best_rank, best_pair = None, None
            for pair in zip(syms, syms[1:]):
                hit = self._ranks.get(pair)
                if hit is not None and (best_rank is None or hit[0] < best_rank):
                    best_rank, best_pair = hit[0], pair
            if best_pair is None:
                break
            syms = _merge_pair(syms, best_pair, self._ranks[best_pair][1])
        out = tuple(syms)
        self._chunk_cache[chunk] = out
        return out

    def to_json_bytes(self) -> bytes:
        """Canonical serialization; identical vocabularies produce identical bytes."""
        obj = {
            "vocab_size": self.size,
            "specials": _SPECIAL_NAMES,
            "pieces": [p.decode("latin-1") for p in self._pieces],
            "merges": [[l.decode("latin-1"), r.decode("latin-1")] for l, r in self._merges],
        }
        return json.dumps(obj, sort_keys=True, ensure_ascii=True, indent=1).encode("utf-8")

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json_bytes()).hexdigest()


def _merge_pair(syms: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == pair[0] and syms[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def train_bpe(corpus: list[str], vocab_size: int) -> Vocabulary:
    """Learn merges greedily by pair frequency.

    Stops when the vocabulary reaches vocab_size or no adjacent pair occurs
    at least twice. Frequency ties break toward the lexicographically
    smallest (left bytes, right bytes) pair, which pins the result down
    completely.
    """
    if not corpus:
        raise ValueError("cannot train a vocabulary on an empty corpus")
    if vocab_size <= BASE_VOCAB:
        raise ValueError(f"vocab_size must exceed {BASE_VOCAB} (specials + byte alphabet), got {vocab_size}")

    vocab = Vocabulary(merges=[])
    # unique chunk -> [symbol list, count]
    chunk_counts: dict[str, int] = {}
    for text in corpus:
        for chunk in _CHUNK_RE.findall(text):
            chunk_counts[chunk] = chunk_counts.get(chunk, 0) + 1
    chunks: list[list] = [[[_NUM_SPECIALS + b for b in c.encode("utf-8")], n] for c, n in chunk_counts.items()]

    pair_counts: dict[tuple[int, int], int] = {}
    pair_sites: dict[tuple[int, int], set[int]] = {}

    def account(idx: int, sign: int) -> None:
        syms, n = chunks[idx]
        for pair in zip(syms, syms[1:]):
            c = pair_counts.get(pair, 0) + sign * n
            if c <= 0:
                pair_counts.pop(pair, None)
            else:
                pair_counts[pair] = c
            if sign > 0:
                pair_sites.setdefault(pair, set()).add(idx)

    for idx in range(len(chunks)):
        account(idx, +1)

    def piece_of(sym: int) -> bytes:
        return vocab._pieces[sym - _NUM_SPECIALS]

    while vocab.size < vocab_size:
        best_pair, best_count, best_key = None, 0, None
        for pair, count in pair_counts.items():
            if count < 2 or count < best_count:
                continue
            key = (piece_of(pair[0]), piece_of(pair[1]))
            if best_pair is None or count > best_count or (count == best_count and key < best_key):
                best_pair, best_count, best_key = pair, count, key
        if best_pair is None:
            break
        new_id = vocab._add_merge(*best_key)
        for idx in sorted(pair_sites.get(best_pair, ())):
            syms = chunks[idx][0]
            if not any(p == best_pair for p in zip(syms, syms[1:])):
                continue  # stale site
            account(idx, -1)
            chunks[idx][0] = _merge_pair(syms, best_pair, new_id)
            account(idx, +1)
        pair_sites.pop(best_pair, None)
    return vocab


def encode(vocab: Vocabulary, text: str, max_len: int | None = None, append_eos: bool = True) -> TokenSequence:
    """Encode text to ids; optionally append EOS, then truncate to max_len.

    original_length records the untruncated length, EOS included.
    """
    if max_len is not None and max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ids: list[int] = []
    for chunk in _CHUNK_RE.findall(text):
        ids.extend(vocab._encode_chunk(chunk))
    if append_eos:
        ids.append(EOS_ID)
    original = len(ids)
    if max_len is not None and len(ids) > max_len:
        ids = ids[:max_len]
    return TokenSequence(ids=ids, original_length=original)


def decode(vocab: Vocabulary, ids: list[int]) -> str:
    """Invert encode: drop specials, join piece bytes, decode as UTF-8.

    Byte sequences cut mid-character (by truncation or by a free-running
    model) decode with replacement characters rather than failing.
    """
    parts = []
    size = vocab.size
    for pos, i in enumerate(ids):
        i = int(i)
        if not 0 <= i < size:
            raise ValueError(f"token id {i} at position {pos} is outside the vocabulary (size {size})")
        if i < _NUM_SPECIALS:
            continue
        parts.append(vocab.piece(i))
    return b"".join(parts).decode("utf-8", errors="replace")


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_bytes(vocab.to_json_bytes())


def load_vocab(path: str | Path) -> Vocabulary:
    path = Path(path)
    try:
        obj = json.loads(path.read_bytes())
    except OSError as e:
        raise DataError(f"{path}: cannot read vocabulary: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: unparsable vocabulary JSON at byte offset {e.pos}") from e
    try:
        merges = [(l.encode("latin-1"), r.encode("latin-1")) for l, r in obj["merges"]]
        pieces = [p.encode("latin-1") for p in obj["pieces"]]
    except (KeyError, TypeError, AttributeError) as e:
        raise DataError(f"{path}: vocabulary file missing or malformed fields: {e}") from e
    vocab = Vocabulary(merges=merges)
    if vocab.pieces != pieces or vocab.size != obj.get("vocab_size"):
        raise DataError(f"{path}: vocabulary pieces are inconsistent with its merges")
    return vocab
