"""Dataset loading, validation, and deterministic splitting.

Three on-disk formats are understood:

* gold: a single JSON array of records with ``intent``, ``rewritten_intent``
  (nullable) and ``snippet`` fields;
* noisy: JSON lines with ``intent``, ``snippet`` and a confidence ``prob``;
* nl2lf: JSON lines with ``intent`` and ``snippet`` (multi-line snippets are
  JSON-escaped).

Gold and nl2lf loads fail hard on malformed input; the noisy loader skips
and counts bad lines because mined data is expected to be dirty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import DataError
from .rng import derive_seed, fisher_yates

SOURCES = ("gold", "noisy", "nl2lf")


@dataclass(frozen=True)
class Example:
    """One (NL intent, code snippet) pair."""

    id: int
    intent: str
    snippet: str
    source: str
    weight: float = 1.0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if not self.intent.strip() or not self.snippet.strip():
            raise ValueError(f"example {self.id}: empty intent or snippet")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"example {self.id}: weight {self.weight} outside [0, 1]")
        if self.source in ("gold", "nl2lf") and self.weight != 1.0:
            raise ValueError(f"example {self.id}: {self.source} examples must have weight 1.0")


@dataclass
class DatasetSplit:
    train: list[int]
    dev: list[int]
    test: list[int] = field(default_factory=list)


@dataclass
class FoldPlan:
    folds: list[tuple[list[int], list[int]]]
    fold_count: int
    train_fraction: float
    seed: int


@dataclass
class LoadSummary:
    source: str
    path: str
    loaded: int = 0
    skipped: int = 0
    filtered: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "loaded": self.loaded,
                "skipped": self.skipped,
                "filtered": self.filtered,
                "source": self.source,
                "path": self.path,
            }
        )


def _clean_pair(intent, snippet) -> tuple[str, str] | None:
    if not isinstance(intent, str) or not isinstance(snippet, str):
        return None
    intent, snippet = intent.strip(), snippet.strip()
    if not intent or not snippet:
        return None
    return intent, snippet


def load_gold(path: str | Path) -> list[Example]:
    """Load a gold JSON-array file. `rewritten_intent` wins over `intent`
    when present and non-null."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read file: {e}") from e
    try:
        records = json.loads(raw)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: unparsable JSON at byte offset {e.pos}: {e.msg}") from e
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a JSON array of records")

    examples = []
    for idx, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise DataError(f"{path}: record {idx} is not an object")
        if "snippet" not in rec:
            raise DataError(f"{path}: record {idx} missing 'snippet'")
        intent = rec.get("rewritten_intent")
        if intent is None:
            intent = rec.get("intent")
        cleaned = _clean_pair(intent, rec["snippet"])
        if cleaned is None:
            raise DataError(f"{path}: record {idx} has empty or non-string intent/snippet")
        examples.append(Example(id=idx, intent=cleaned[0], snippet=cleaned[1], source="gold"))
    return examples


def load_noisy(
    path: str | Path,
    min_weight: float = 0.0,
    summary: LoadSummary | None = None,
) -> Iterator[Example]:
    """Stream a noisy JSON-lines file, yielding examples with weight >= min_weight.

    Malformed lines are skipped and counted in `summary`; memory use is
    independent of file size. Example ids are the zero-based line numbers of
    the underlying file, so they are stable under any min_weight filter.
    """
    path = Path(path)
    if summary is None:
        summary = LoadSummary(source="noisy", path=str(path))
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: cannot read file: {e}") from e
    with fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                prob = float(rec["prob"])
                cleaned = _clean_pair(rec.get("intent"), rec.get("snippet"))
                if cleaned is None or not 0.0 <= prob <= 1.0:
                    raise ValueError("invalid record")
            except (ValueError, TypeError, KeyError):
                summary.skipped += 1
                continue
            if prob < min_weight:
                summary.filtered += 1
                continue
            summary.loaded += 1
            yield Example(id=lineno, intent=cleaned[0], snippet=cleaned[1], source="noisy", weight=prob)


def load_nl2lf(path: str | Path) -> list[Example]:
    """Load an NL-to-labeling-function JSON-lines file.

    Several records may share a snippet (one per description); each record
    becomes its own example. Unlike the noisy loader, malformed lines are
    errors.
    """
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: cannot read file: {e}") from e
    examples = []
    with fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: unparsable JSON at byte offset {e.pos}: {e.msg}") from e
            if not isinstance(rec, dict) or "snippet" not in rec:
                raise DataError(f"{path}: record {lineno} missing 'snippet'")
            cleaned = _clean_pair(rec.get("intent"), rec["snippet"])
            if cleaned is None:
                raise DataError(f"{path}: record {lineno} has empty or non-string intent/snippet")
            examples.append(Example(id=lineno, intent=cleaned[0], snippet=cleaned[1], source="nl2lf"))
    return examples


def carve_dev(train: list[Example], dev_size: int, seed: int) -> DatasetSplit:
    """Deterministically carve a development set out of a training list.

    The dev set is the tail of a seeded shuffle; the remaining train ids keep
    their input order (they get reshuffled every epoch anyway). Dev examples
    are removed from training so model selection never sees training data.
    """
    if dev_size < 0:
        raise ValueError(f"dev_size must be >= 0, got {dev_size}")
    if dev_size >= len(train):
        raise ValueError(f"dev_size {dev_size} must be smaller than the training set ({len(train)})")
    ids = [e.id for e in train]
    if dev_size == 0:
        return DatasetSplit(train=ids, dev=[])
    shuffled = fisher_yates(ids, derive_seed(seed, 0x0DEF))
    dev = shuffled[-dev_size:]
    dev_set = set(dev)
    return DatasetSplit(train=[i for i in ids if i not in dev_set], dev=dev)


def plan_folds(data: list[Example], fold_count: int, train_fraction: float, seed: int) -> FoldPlan:
    """Plan repeated random train/test splits ("folds").

    Fold i shuffles with seed + i and takes the first round(train_fraction * N)
    ids as train (round half up), the rest as test. Folds are independent
    resamples, not a partition of the data.
    """
    if fold_count < 1:
        raise ValueError(f"fold_count must be >= 1, got {fold_count}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = [e.id for e in data]
    n_train = int(train_fraction * len(ids) + 0.5)
    folds = []
    for i in range(fold_count):
        shuffled = fisher_yates(ids, seed + i)
        folds.append((shuffled[:n_train], shuffled[n_train:]))
    return FoldPlan(folds=folds, fold_count=fold_count, train_fraction=train_fraction, seed=seed)
