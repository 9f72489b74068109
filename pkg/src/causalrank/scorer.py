"""Trainable linear answer scorers realizing the three causal wirings.

Variants differ only in how history reaches the answer logits:

* ``baseline``  — history is fused directly into the joint embedding
  (the shortcut wiring),
* ``p1``        — history only gates a refinement of the question, so it
  reaches the answer exclusively through the question channel; the gate
  reads the leading question-sized block of the history vector (its
  content part), which keeps the refinement a content operation,
* ``p1_dict``   — ``p1`` plus a learned preference dictionary: attention
  keyed by history picks an expected dictionary vector that is added to
  the joint embedding before scoring (the single-pass approximation that
  moves the expectation over the latent state inside the softmax),
* ``dict``      — the dictionary on top of the shortcut wiring (kept for
  ablations that retain the history fusion).

Scoring is a dot product between projected candidate embeddings and the
(joint embedding + expected dictionary vector); gradients of every loss
are computed analytically in closed form.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import expit, softmax

from . import losses
from .world import Dataset, DialogInstance

VARIANTS = ("baseline", "p1", "p1_dict", "dict")

ARRAY_FIELDS = ("w_q", "w_i", "w_h", "w_g", "w_e", "d_u", "w1", "w2")

_CKPT_MAGIC = "causalrank-scorer-v1"


class ScorerError(ValueError):
    pass


class DimensionMismatch(ScorerError):
    pass


class ZeroMass(ScorerError):
    pass


@dataclass
class ScorerParams:
    """All trainable maps of one scorer.

    ``w_q``/``w_i``/``w_h``/``w_e`` project question, image, history and
    candidate embeddings to the hidden space; ``w_g`` is the history gate
    on the question; ``d_u`` is the preference dictionary (rows are
    latent-state prototypes) with attention maps ``w1`` (history query)
    and ``w2`` (dictionary keys).
    """

    variant: str
    w_q: np.ndarray
    w_i: np.ndarray
    w_h: np.ndarray
    w_g: np.ndarray
    w_e: np.ndarray
    d_u: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ScorerError(f"unknown variant {self.variant!r}")
        for name in ARRAY_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ScorerError(f"parameter {name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def hidden_dim(self) -> int:
        return int(self.w_q.shape[0])

    @property
    def n_dict(self) -> int:
        return int(self.d_u.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_FIELDS}

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            variant=self.variant,
            seed=self.seed,
            **{name: getattr(self, name).copy() for name in ARRAY_FIELDS},
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(getattr(self, name)) for name in ARRAY_FIELDS}


@dataclass(frozen=True)
class ScoreVector:
    """Per-candidate logits; probabilities are their softmax."""

    logits: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def n(self) -> int:
        return int(self.logits.size)


@dataclass(frozen=True)
class FusedState:
    """Intermediate encoder state: joint embedding, expected dictionary
    vector, and the visual component."""

    m: np.ndarray
    u_bar: np.ndarray
    v: np.ndarray


def dims_from_instance(inst: DialogInstance) -> dict[str, int]:
    return {
        "q": int(inst.q_feat.size),
        "i": int(inst.i_feat.size),
        "h": int(inst.h_feat.size),
        "e": int(inst.cand_embs.shape[1]),
    }


def init_params(
    rng: np.random.Generator,
    dims: Mapping[str, int],
    variant: str = "p1",
    hidden_dim: int = 32,
    n_dict: int = 16,
    att_dim: int | None = None,
    dataset: Dataset | None = None,
    seed: int = 0,
) -> ScorerParams:
    """Random initialization; dictionary rows warm-start from the most
    frequent high-relevance answers when a dataset is supplied."""
    if att_dim is None:
        att_dim = max(4, hidden_dim // 4)

    def linear(rows: int, cols: int) -> np.ndarray:
        return rng.normal(size=(rows, cols)) / np.sqrt(cols)

    w_e = linear(hidden_dim, dims["e"])
    d_u = 0.1 * rng.normal(size=(n_dict, hidden_dim))
    gate_dim = min(dims["q"], dims["h"])
    params = ScorerParams(
        variant=variant,
        w_q=linear(hidden_dim, dims["q"]),
        w_i=linear(hidden_dim, dims["i"]),
        w_h=linear(hidden_dim, dims["h"]),
        w_g=np.zeros((dims["q"], gate_dim)),  # neutral gate at init
        w_e=w_e,
        d_u=d_u,
        w1=linear(att_dim, dims["h"]),
        w2=linear(att_dim, hidden_dim),
        seed=seed,
    )
    if dataset is not None and variant in ("p1_dict", "dict"):
        params.d_u = _warm_start_dictionary(params, dataset, n_dict, rng)
    return params


def _warm_start_dictionary(
    params: ScorerParams, dataset: Dataset, n_dict: int, rng: np.random.Generator
) -> np.ndarray:
    """Rows = projected embeddings of the globally most frequent
    high-relevance answers (ties by signature), random rows as fallback."""
    freq: dict[int, int] = {}
    emb_by_sig: dict[int, np.ndarray] = {}
    for idx in dataset.train_indices():
        inst = dataset.instances[idx]
        hi = inst.observed_relevance >= 0.5 * inst.observed_relevance.max()
        for c in np.nonzero(hi)[0]:
            sig = int(inst.cand_signatures[c])
            freq[sig] = freq.get(sig, 0) + 1
            emb_by_sig.setdefault(sig, inst.cand_embs[c])
    top = sorted(freq, key=lambda s: (-freq[s], s))[:n_dict]
    d_u = 0.1 * rng.normal(size=(n_dict, params.hidden_dim))
    for row, sig in enumerate(top):
        d_u[row] = params.w_e @ emb_by_sig[sig]
    return d_u


# -- forward -------------------------------------------------------------------


def _check_dims(params: ScorerParams, inst: DialogInstance) -> None:
    dims = dims_from_instance(inst)
    checks = (
        (params.w_q.shape[1], dims["q"], "question"),
        (params.w_i.shape[1], dims["i"], "image"),
        (params.w_h.shape[1], dims["h"], "history"),
        (params.w_e.shape[1], dims["e"], "candidate"),
    )
    for have, want, label in checks:
        if have != want:
            raise DimensionMismatch(f"{label} feature dim {want} != parameter dim {have}")


def dict_attention(params: ScorerParams, h: np.ndarray) -> np.ndarray:
    """Attention weights over dictionary rows for a history vector."""
    query = params.w1 @ h
    keys = params.w2 @ params.d_u.T
    return softmax(query @ keys)


def _gate_input(params: ScorerParams, h: np.ndarray) -> np.ndarray:
    # The refinement gate reads the leading content block of the history
    # vector, never its trailing summary statistics.
    return h[: params.w_g.shape[1]]


def fuse(params: ScorerParams, inst: DialogInstance) -> FusedState:
    _check_dims(params, inst)
    v = params.w_i @ inst.i_feat
    if params.variant in ("baseline", "dict"):
        m = params.w_q @ inst.q_feat + v + params.w_h @ inst.h_feat
    else:
        gate = expit(params.w_g @ _gate_input(params, inst.h_feat))
        m = params.w_q @ (inst.q_feat * gate) + v
    if params.variant in ("p1_dict", "dict"):
        alpha = dict_attention(params, inst.h_feat)
        u_bar = alpha @ params.d_u
    else:
        u_bar = np.zeros(params.hidden_dim)
    return FusedState(m=m, u_bar=u_bar, v=v)


def forward(params: ScorerParams, inst: DialogInstance) -> ScoreVector:
    """Candidate logits: projected embeddings dotted with (u_bar + m)."""
    state = fuse(params, inst)
    projected = inst.cand_embs @ params.w_e.T
    return ScoreVector(logits=projected @ (state.u_bar + state.m))


# -- analytic gradients ----------------------------------------------------------


def grad(
    params: ScorerParams,
    inst: DialogInstance,
    loss_kind: str,
    targets,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact gradient for every parameter array.

    ``targets`` is an integer ground-truth index for ``ce`` and a
    :class:`causalrank.losses.TargetScores` for the dense losses.
    """
    _check_dims(params, inst)
    q, i, h = inst.q_feat, inst.i_feat, inst.h_feat
    cands = inst.cand_embs

    use_gate = params.variant in ("p1", "p1_dict")
    use_dict = params.variant in ("p1_dict", "dict")

    if use_gate:
        h_gate = _gate_input(params, h)
        gate = expit(params.w_g @ h_gate)
        q_used = q * gate
        m = params.w_q @ q_used + params.w_i @ i
    else:
        q_used = q
        m = params.w_q @ q + params.w_i @ i + params.w_h @ h
    if use_dict:
        query = params.w1 @ h
        keys = params.w2 @ params.d_u.T
        att = query @ keys
        alpha = softmax(att)
        u_bar = alpha @ params.d_u
    else:
        u_bar = np.zeros(params.hidden_dim)

    projected = cands @ params.w_e.T
    s_vec = u_bar + m
    logits = projected @ s_vec

    loss = losses.evaluate(loss_kind, logits, targets)
    gl = loss.grad_logits

    grads = params.zeros_like()
    grads["w_e"] = np.outer(gl, s_vec).T @ cands
    ds = projected.T @ gl  # d loss / d (u_bar + m)

    grads["w_i"] = np.outer(ds, i)
    if use_gate:
        grads["w_q"] = np.outer(ds, q_used)
        dq_used = params.w_q.T @ ds
        dz = dq_used * q * gate * (1.0 - gate)
        grads["w_g"] = np.outer(dz, h_gate)
    else:
        grads["w_q"] = np.outer(ds, q)
        grads["w_h"] = np.outer(ds, h)
    if use_dict:
        dalpha = params.d_u @ ds
        datt = alpha * (dalpha - float(alpha @ dalpha))
        grads["w1"] = np.outer(keys @ datt, h)
        dkeys = np.outer(query, datt)
        grads["w2"] = dkeys @ params.d_u
        grads["d_u"] = np.outer(alpha, ds) + dkeys.T @ params.w2
    return loss.value, grads


# -- prior mixing -----------------------------------------------------------------


def mix_with_prior(scores: ScoreVector, prior: np.ndarray) -> ScoreVector:
    """Multiply probabilities by a prior distribution and renormalize."""
    prior = np.asarray(prior, dtype=float)
    if prior.shape != scores.logits.shape:
        raise DimensionMismatch("prior length must match candidate count")
    if np.any(prior < 0):
        raise ScorerError("prior weights must be nonnegative")
    if abs(float(prior.sum()) - 1.0) > 1e-8:
        raise ScorerError("prior must sum to 1")
    mixed = scores.probabilities * prior
    total = float(mixed.sum())
    if total <= 0.0:
        raise ZeroMass("prior annihilates every candidate")
    with np.errstate(divide="ignore"):
        return ScoreVector(logits=np.log(mixed / total))


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(params: ScorerParams, path: str | Path) -> None:
    """Flat binary checkpoint: one JSON header line, then float64 data."""
    header = {
        "format": _CKPT_MAGIC,
        "variant": params.variant,
        "seed": params.seed,
        "shapes": {name: list(getattr(params, name).shape) for name in ARRAY_FIELDS},
    }
    blob = b"".join(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes() for name in ARRAY_FIELDS)
    text = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(blob)


def load_checkpoint(path: str | Path) -> ScorerParams:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("format") != _CKPT_MAGIC:
            raise ScorerError(f"not a scorer checkpoint: {path}")
        arrays = {}
        for name in ARRAY_FIELDS:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            arrays[name] = data.copy()
    return ScorerParams(variant=header["variant"], seed=int(header["seed"]), **arrays)
