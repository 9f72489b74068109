"""Question-type priors: frequency tables of preferred answers per type.

A fitted table maps (question type, answer signature) to how often that
answer was highly relevant for that type; ``prior`` turns the counts into
a smoothed distribution over an instance's candidates, the observable
proxy for the latent preference prior that gets mixed into model scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .world import Dataset


class QTypeError(ValueError):
    pass


class EmptyDataset(QTypeError):
    pass


class UnknownType(QTypeError):
    pass


@dataclass
class QTypeTable:
    """Per-type preferred-answer counts with a min-count threshold.

    Answers must occur strictly more than ``min_count`` times for a type
    to carry preference mass; ``smoothing`` is added to every candidate
    weight so priors never zero out a candidate entirely.
    """

    n_types: int
    counts: dict[int, dict[int, int]] = field(default_factory=dict)
    min_count: int = 5
    smoothing: float = 1.0

    def effective_count(self, qtype: int, signature: int) -> int:
        c = self.counts.get(qtype, {}).get(signature, 0)
        return c if c > self.min_count else 0

    def to_json_dict(self) -> dict:
        return {
            "n_types": self.n_types,
            "min_count": self.min_count,
            "smoothing": self.smoothing,
            "counts": {str(t): {str(s): c for s, c in sorted(sigs.items())} for t, sigs in sorted(self.counts.items())},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "QTypeTable":
        return cls(
            n_types=int(d["n_types"]),
            min_count=int(d["min_count"]),
            smoothing=float(d["smoothing"]),
            counts={int(t): {int(s): int(c) for s, c in sigs.items()} for t, sigs in d["counts"].items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "QTypeTable":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def fit(
    dataset: Dataset,
    n_types: int | None = None,
    min_count: int = 5,
    smoothing: float = 1.0,
    rel_threshold: float = 0.5,
    indices: Sequence[int] | None = None,
) -> QTypeTable:
    """Count high-relevance answers per question type.

    An answer counts for an instance when its observed relevance is at
    least ``rel_threshold`` times the instance maximum.  Counting is
    order-independent, so permuting the dataset yields an identical table.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot fit a question-type table on an empty dataset")
    if n_types is None:
        n_types = dataset.spec.n_qtypes
    if indices is None:
        indices = range(len(dataset))
    table = QTypeTable(n_types=n_types, min_count=min_count, smoothing=smoothing)
    touched = False
    for idx in indices:
        inst = dataset.instances[idx]
        touched = True
        if not 0 <= inst.qtype < n_types:
            raise UnknownType(f"instance qtype {inst.qtype} out of range for {n_types} types")
        hi = inst.observed_relevance >= rel_threshold * inst.observed_relevance.max()
        per_type = table.counts.setdefault(inst.qtype, {})
        for c in np.nonzero(hi)[0]:
            sig = int(inst.cand_signatures[c])
            per_type[sig] = per_type.get(sig, 0) + 1
    if not touched:
        raise EmptyDataset("no instances selected")
    return table


def prior(t: QTypeTable, qtype: int, candidate_signatures: Sequence[int]) -> np.ndarray:
    """Smoothed, normalized preference weights for one candidate list."""
    if not 0 <= qtype < t.n_types:
        raise UnknownType(f"qtype {qtype} out of range for {t.n_types} types")
    weights = np.array(
        [t.effective_count(qtype, int(sig)) + t.smoothing for sig in candidate_signatures],
        dtype=float,
    )
    total = float(weights.sum())
    if total <= 0.0:
        raise QTypeError("prior has zero total mass; use positive smoothing")
    return weights / total


def extract_qtype(tokens: Sequence[int], n_types: int) -> int:
    """Stable type id from the first two tokens of any tokenized question."""
    if n_types < 1:
        raise QTypeError("n_types must be >= 1")
    first = int(tokens[0]) if len(tokens) > 0 else 0
    second = int(tokens[1]) if len(tokens) > 1 else 0
    return (first * 31 + second) % n_types
