"""Training objectives for candidate ranking, with analytic logit gradients.

Five losses share one interface: ``ce`` (plain softmax cross-entropy on a
single ground-truth index) plus four dense-relevance objectives —

* ``r0``: squared-error regression of the softmax onto normalized scores,
* ``r1``: weighted log-softmax (cross-entropy against a score distribution),
* ``r2``: per-candidate binary sigmoid loss with soft targets,
* ``r3``: grouped ranking loss where each positive candidate competes
  against the candidates of strictly lower relevance.

All values are computed in log-space with max-subtraction so that logits
with |p| <= 50 never overflow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit, log_softmax, logsumexp, softmax

logger = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "r0", "r1", "r2", "r3")

RAW = "raw_relevance"
NORMALIZED = "normalized"
CHARACTERISTIC = "characteristic"


class LossError(ValueError):
    pass


class LengthMismatch(LossError):
    pass


class NotNormalized(LossError):
    pass


class NoPositiveCandidates(LossError):
    pass


class IndexOutOfRange(LossError):
    pass


@dataclass(frozen=True)
class TargetScores:
    """Per-candidate target scores.

    ``relevance`` carries the underlying raw relevance ordering; it is
    required for the ``characteristic`` kind (the grouped ranking loss
    needs it to build the lower-relevance groups).
    """

    s: np.ndarray
    kind: str = RAW
    relevance: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        object.__setattr__(self, "s", s)
        if self.relevance is not None:
            object.__setattr__(self, "relevance", np.asarray(self.relevance, dtype=float))
        if self.kind == NORMALIZED and abs(float(s.sum()) - 1.0) > 1e-10:
            raise NotNormalized(f"normalized targets sum to {s.sum()}, not 1")
        if self.kind == CHARACTERISTIC:
            if not np.all((s == 0.0) | (s == 1.0)):
                raise LossError("characteristic targets must be 0/1-valued")
            if self.relevance is None:
                raise LossError("characteristic targets require the relevance field")

    @classmethod
    def raw(cls, relevance: np.ndarray) -> TargetScores:
        relevance = np.asarray(relevance, dtype=float)
        return cls(s=relevance, kind=RAW, relevance=relevance)

    @classmethod
    def normalized(cls, relevance: np.ndarray) -> TargetScores:
        relevance = np.asarray(relevance, dtype=float)
        total = float(relevance.sum())
        if total <= 0.0:
            raise NoPositiveCandidates("cannot normalize an all-zero relevance row")
        return cls(s=relevance / total, kind=NORMALIZED, relevance=relevance)

    @classmethod
    def characteristic(cls, relevance: np.ndarray) -> TargetScores:
        relevance = np.asarray(relevance, dtype=float)
        return cls(s=(relevance > 0).astype(float), kind=CHARACTERISTIC, relevance=relevance)


@dataclass(frozen=True)
class LossValue:
    value: float
    grad_logits: np.ndarray


def _check_lengths(logits: np.ndarray, s: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if logits.shape != s.shape:
        raise LengthMismatch(f"logits shape {logits.shape} != targets shape {s.shape}")
    return logits


def loss_r0(logits: np.ndarray, targets: TargetScores) -> LossValue:
    """Squared error between softmax(logits) and the normalized targets."""
    logits = _check_lengths(logits, targets.s)
    s = targets.s
    if targets.kind != NORMALIZED:
        total = float(s.sum())
        if total <= 0.0:
            raise NoPositiveCandidates("targets have no mass")
        s = s / total
    q = softmax(logits)
    diff = q - s
    value = float(np.sum(diff * diff))
    # d/dp of sum (q - s)^2 through the softmax Jacobian.
    inner = 2.0 * diff
    grad = q * (inner - float(np.dot(q, inner)))
    return LossValue(value=value, grad_logits=grad)


def loss_r1(logits: np.ndarray, targets: TargetScores) -> LossValue:
    """Weighted log-softmax: -sum_i s_i log softmax(logits)_i, s a distribution."""
    logits = _check_lengths(logits, targets.s)
    s = targets.s
    if abs(float(s.sum()) - 1.0) > 1e-8:
        raise NotNormalized(f"r1 targets must sum to 1, got {s.sum()}")
    value = float(-np.dot(s, log_softmax(logits)))
    grad = softmax(logits) - s
    return LossValue(value=value, grad_logits=grad)


def loss_r2(logits: np.ndarray, targets: TargetScores) -> LossValue:
    """Per-candidate binary sigmoid loss with soft targets in [0, 1]."""
    logits = _check_lengths(logits, targets.s)
    s = targets.s
    if np.any(s < 0) or np.any(s > 1):
        raise LossError("r2 targets must lie in [0, 1]")
    # -[s log sigma(p) + (1-s) log(1 - sigma(p))], computed stably.
    value = float(-np.sum(s * log_expit(logits) + (1.0 - s) * log_expit(-logits)))
    grad = 1.0 / (1.0 + np.exp(-logits)) - s
    return LossValue(value=value, grad_logits=grad)


def loss_r3(logits: np.ndarray, targets: TargetScores) -> LossValue:
    """Grouped ranking loss over positive candidates.

    Each candidate with positive relevance competes in a softmax against
    the group of candidates of strictly lower relevance; ties never
    compete against each other.
    """
    if targets.kind != CHARACTERISTIC or targets.relevance is None:
        raise LossError("r3 requires characteristic targets carrying relevance")
    logits = _check_lengths(logits, targets.s)
    rel = targets.relevance
    positives = np.nonzero(targets.s == 1.0)[0]
    if positives.size == 0:
        raise NoPositiveCandidates("r3 needs at least one positive-relevance candidate")
    value = 0.0
    grad = np.zeros_like(logits)
    for i in positives:
        group = rel < rel[i]
        group[i] = True  # competitor set is {i} plus strictly lower relevance
        idx = np.nonzero(group)[0]
        lse = logsumexp(logits[idx])
        value -= float(logits[i] - lse)
        q = np.exp(logits[idx] - lse)
        grad[idx] += q
        grad[i] -= 1.0
    return LossValue(value=value, grad_logits=grad)


def loss_ce(logits: np.ndarray, gt_index: int) -> LossValue:
    """Softmax cross-entropy against a single ground-truth candidate."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= gt_index < logits.size:
        raise IndexOutOfRange(f"gt_index {gt_index} out of range for {logits.size}")
    value = float(-log_softmax(logits)[gt_index])
    grad = softmax(logits)
    grad[gt_index] -= 1.0
    return LossValue(value=value, grad_logits=grad)


def evaluate(kind: str, logits: np.ndarray, targets) -> LossValue:
    """Dispatch on a loss-kind token (``ce`` expects an integer target)."""
    if kind == "ce":
        return loss_ce(logits, targets)
    if kind == "r0":
        return loss_r0(logits, targets)
    if kind == "r1":
        return loss_r1(logits, targets)
    if kind == "r2":
        return loss_r2(logits, targets)
    if kind == "r3":
        return loss_r3(logits, targets)
    raise LossError(f"unknown loss kind {kind!r}")


def targets_for(kind: str, relevance: np.ndarray) -> TargetScores:
    """Build the target representation each dense loss expects."""
    if kind == "r0":
        return TargetScores.normalized(relevance)
    if kind == "r1":
        return TargetScores.normalized(relevance)
    if kind == "r2":
        return TargetScores.raw(relevance)
    if kind == "r3":
        return TargetScores.characteristic(relevance)
    raise LossError(f"no dense-target construction for loss kind {kind!r}")
