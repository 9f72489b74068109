"""Synthetic confounded dialog-ranking worlds with exact interventional truth.

Each instance mirrors one ranking round: history features, a question, an
image, and a candidate answer list drawn from a shared answer pool.  The
generative story follows the de-confounded graph: history -> latent user
state -> question type and question content, while answer quality
(``causal_relevance``) depends on the question and image only.  Observed
annotations are distorted by the latent user preference and, optionally,
by planted history-driven biases (answer-length proximity and token
matching with history answers) so that shortcut learning is measurable.

All randomness flows from the single seed in ``WorldSpec``; datasets are
bit-reproducible from (spec, n).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import softmax

# World constants (not part of the sweep surface).
VOCAB = 64
N_HIST = 5
MAX_LEN = 12
SHORTCUT_TOKEN = 0
SHORTCUT_SIGNATURE = 0

_POOL_FACTOR = 5
_MIN_POOL = 50
_REL_FLOOR = 0.05
_REL_TEMP_FRAC = 0.35
_REL_TEMP_MIN = 0.05
_U_SCALE = 1.2
_QT_U_SCALE = 2.0
_QT_H_SCALE = 0.5
_Q_TYPE_W = 1.0
_Q_HIST_W = 0.5
_Q_USER_W = 0.5
_Q_NOISE_W = 0.3
_PREF_TEMP = 0.15
_LEN_SIGMA = 1.5
_TOK_SHARE_W = 1.0
_TOK_SHARE_CAP = 4
_SHORTCUT_BOOST = 2.5
_SHORTCUT_INJECT_P = 0.5


class WorldError(ValueError):
    pass


class InvalidSpec(WorldError):
    pass


class LengthMismatch(WorldError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    """Knobs of a synthetic world.

    ``bias_strength`` controls how strongly the latent user state distorts
    observed annotations; ``length_bias_strength`` is the per-instance
    probability that the distortion is history-driven instead (answer
    length proximity plus history token matching), which plants the
    direct history->answer shortcut.
    """

    n_users: int = 4
    n_qtypes: int = 8
    n_candidates: int = 100
    feat_dim: int = 16
    bias_strength: float = 0.5
    length_bias_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_qtypes", "n_candidates", "feat_dim"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if self.n_candidates < 2:
            raise InvalidSpec("n_candidates must be >= 2")
        if self.feat_dim < 4:
            raise InvalidSpec("feat_dim must be >= 4")
        for name in ("bias_strength", "length_bias_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class Candidate:
    embedding: np.ndarray
    tokens: tuple[int, ...]
    length: int
    signature: int


@dataclass(frozen=True)
class DialogInstance:
    """One synthetic ranking round.

    ``u_true`` is the latent annotator state (hidden from estimators);
    ``causal_relevance`` is the intervention-level answer quality,
    ``observed_relevance`` the confounded annotation analogue.
    """

    h_feat: np.ndarray
    q_feat: np.ndarray
    i_feat: np.ndarray
    qtype: int
    u_true: int
    cand_embs: np.ndarray
    cand_tokens: tuple[tuple[int, ...], ...]
    cand_lengths: np.ndarray
    cand_signatures: np.ndarray
    causal_relevance: np.ndarray
    observed_relevance: np.ndarray
    gt_index: int
    hist_answer_lengths: np.ndarray
    hist_tokens: tuple[tuple[int, ...], ...]

    @property
    def n_candidates(self) -> int:
        return int(self.cand_embs.shape[0])

    @property
    def candidates(self) -> list[Candidate]:
        return [
            Candidate(
                embedding=self.cand_embs[c],
                tokens=self.cand_tokens[c],
                length=int(self.cand_lengths[c]),
                signature=int(self.cand_signatures[c]),
            )
            for c in range(self.n_candidates)
        ]

    @property
    def mean_hist_length(self) -> float:
        return float(np.mean(self.hist_answer_lengths))

    @property
    def hist_token_set(self) -> frozenset[int]:
        return frozenset(t for toks in self.hist_tokens for t in toks)


@dataclass
class Dataset:
    instances: list[DialogInstance]
    spec: WorldSpec
    split: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def train_indices(self) -> list[int]:
        return [i for i, tag in enumerate(self.split) if tag == "train"]

    def val_indices(self) -> list[int]:
        return [i for i, tag in enumerate(self.split) if tag == "val"]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(
            instances=[self.instances[i] for i in idx],
            spec=self.spec,
            split=[self.split[i] for i in idx],
        )


class World:
    """Derived generator parameters, all functions of the spec seed."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        d = spec.feat_dim
        rng = np.random.default_rng([spec.seed, 0xC0FFEE])

        self.token_table = rng.normal(size=(VOCAB, d)) / np.sqrt(d)
        # Token 0 is reserved for the planted shortcut answer.
        tok_ranks = np.arange(1, VOCAB)
        self.token_probs = (1.0 / tok_ranks) / np.sum(1.0 / tok_ranks)

        self.pool_size = max(_MIN_POOL, _POOL_FACTOR * spec.n_candidates)
        tokens: list[tuple[int, ...]] = [(SHORTCUT_TOKEN,)]
        for _ in range(1, self.pool_size):
            length = int(rng.integers(1, MAX_LEN + 1))
            toks = rng.choice(np.arange(1, VOCAB), size=length, p=self.token_probs)
            tokens.append(tuple(int(t) for t in toks))
        self.pool_tokens = tuple(tokens)
        self.pool_lengths = np.array([len(t) for t in tokens], dtype=np.int64)
        contents = np.stack([self.token_table[list(t)].mean(axis=0) for t in tokens])
        norms = np.linalg.norm(contents, axis=1, keepdims=True)
        self.pool_contents = contents / np.maximum(norms, 1e-12)

        self.u_weight = rng.normal(size=(spec.n_users, d))
        self.pref_vectors = rng.normal(size=(spec.n_users, d))
        self.pref_vectors /= np.linalg.norm(self.pref_vectors, axis=1, keepdims=True)
        self.qt_affinity = rng.normal(size=(spec.n_users, spec.n_qtypes))
        self.qt_h_weight = rng.normal(size=(spec.n_qtypes, d))
        self.type_dirs = rng.normal(size=(spec.n_qtypes, d))
        self.type_dirs /= np.linalg.norm(self.type_dirs, axis=1, keepdims=True)
        self.u_dirs = rng.normal(size=(spec.n_users, d))
        self.u_dirs /= np.linalg.norm(self.u_dirs, axis=1, keepdims=True)
        self.h_map = rng.normal(size=(d, d)) / np.sqrt(d)
        self.a_q = rng.normal(size=(d, d)) / np.sqrt(d)
        self.a_i = rng.normal(size=(d, d)) / np.sqrt(d)

    # -- pieces shared by generation and the exact oracle ---------------------

    def user_prior(self, h_content: np.ndarray) -> np.ndarray:
        """P(u | h): the latent-state prior given the history content."""
        return softmax(_U_SCALE * (self.u_weight @ h_content))

    def qtype_dist(self, h_content: np.ndarray, u: int) -> np.ndarray:
        logits = _QT_U_SCALE * self.qt_affinity[u] + _QT_H_SCALE * (self.qt_h_weight @ h_content)
        return softmax(logits)

    def causal_scores(self, q_feat: np.ndarray, i_feat: np.ndarray, contents: np.ndarray) -> np.ndarray:
        """Answer quality from (question, image) alone, scaled to (0, 1]."""
        t = self.a_q @ q_feat + self.a_i @ i_feat
        t = t / max(float(np.linalg.norm(t)), 1e-12)
        aff = contents @ t
        temp = max(_REL_TEMP_MIN, _REL_TEMP_FRAC * float(np.std(aff)))
        rel = np.exp((aff - aff.max()) / temp)
        rel[rel < _REL_FLOOR] = 0.0
        return rel

    def user_pref_dist(self, u: int, contents: np.ndarray) -> np.ndarray:
        return softmax(contents @ self.pref_vectors[u] / _PREF_TEMP)

    def hist_pref_weights(
        self,
        cand_lengths: np.ndarray,
        cand_tokens: Sequence[tuple[int, ...]],
        cand_signatures: np.ndarray,
        mean_hist_len: float,
        hist_token_set: frozenset[int],
    ) -> np.ndarray:
        """History-driven annotator preference: an additive mixture of
        length proximity, token matching, and the shortcut-answer boost."""
        w_len = np.exp(-((cand_lengths - mean_hist_len) ** 2) / (2.0 * _LEN_SIGMA**2))
        shared = np.array(
            [min(sum(1 for t in toks if t in hist_token_set), _TOK_SHARE_CAP) for toks in cand_tokens],
            dtype=float,
        )
        w_tok = 1.0 + _TOK_SHARE_W * shared
        w = 0.5 * w_len / w_len.sum() + 0.5 * w_tok / w_tok.sum()
        if SHORTCUT_TOKEN in hist_token_set:
            w = w + (_SHORTCUT_BOOST / w.size) * (cand_signatures == SHORTCUT_SIGNATURE)
        return w / w.sum()

    @staticmethod
    def _scale_to_unit_max(dist: np.ndarray) -> np.ndarray:
        return dist / max(float(dist.max()), 1e-300)

    def observed_mix(self, causal: np.ndarray, pref_dist: np.ndarray) -> np.ndarray:
        b = self.spec.bias_strength
        mixed = (1.0 - b) * causal + b * self._scale_to_unit_max(pref_dist)
        return np.clip(mixed, 0.0, 1.0)

    def selection_dist(self, causal: np.ndarray, pref_dist: np.ndarray) -> np.ndarray:
        """Annotator answer-choice distribution for one preference channel."""
        w = self.observed_mix(causal, pref_dist)
        return w / w.sum()

    # -- instance synthesis ----------------------------------------------------

    def make_instance(self, rng: np.random.Generator) -> DialogInstance:
        spec = self.spec
        d = spec.feat_dim

        ctx = rng.normal(size=d) / np.sqrt(d)
        hist_ids = rng.integers(0, self.pool_size, size=N_HIST)
        inject = rng.random() < _SHORTCUT_INJECT_P
        slot = int(rng.integers(N_HIST))
        if inject:
            hist_ids[slot] = SHORTCUT_SIGNATURE
        hist_tokens = tuple(self.pool_tokens[i] for i in hist_ids)
        hist_lengths = self.pool_lengths[hist_ids]
        hist_content = self.pool_contents[hist_ids].mean(axis=0)
        h_content = (ctx + hist_content) / np.sqrt(2.0)
        mean_hist_len = float(hist_lengths.mean())
        hist_token_set = frozenset(t for toks in hist_tokens for t in toks)
        h_feat = np.concatenate(
            [
                h_content,
                [mean_hist_len / MAX_LEN, 1.0 if SHORTCUT_TOKEN in hist_token_set else 0.0, 1.0],
            ]
        )

        u = int(rng.choice(spec.n_users, p=self.user_prior(h_content)))
        qtype = int(rng.choice(spec.n_qtypes, p=self.qtype_dist(h_content, u)))
        q_feat = (
            _Q_TYPE_W * self.type_dirs[qtype]
            + _Q_HIST_W * (self.h_map @ h_content)
            + _Q_USER_W * self.u_dirs[u]
            + _Q_NOISE_W * rng.normal(size=d) / np.sqrt(d)
        )
        i_feat = rng.normal(size=d) / np.sqrt(d)

        others = 1 + rng.choice(self.pool_size - 1, size=spec.n_candidates - 1, replace=False)
        ids = np.concatenate([[SHORTCUT_SIGNATURE], others])
        ids = ids[rng.permutation(spec.n_candidates)]
        contents = self.pool_contents[ids]
        lengths = self.pool_lengths[ids]
        cand_tokens = tuple(self.pool_tokens[i] for i in ids)
        scaled_len = lengths / MAX_LEN
        cand_embs = np.concatenate([contents, scaled_len[:, None], (scaled_len**2)[:, None]], axis=1)

        causal = self.causal_scores(q_feat, i_feat, contents)
        hist_flag = rng.random() < spec.length_bias_strength
        if hist_flag:
            pref = self.hist_pref_weights(lengths, cand_tokens, ids, mean_hist_len, hist_token_set)
        else:
            pref = self.user_pref_dist(u, contents)
        observed = self.observed_mix(causal, pref)
        gt_index = int(np.argmax(observed))

        return DialogInstance(
            h_feat=h_feat,
            q_feat=q_feat,
            i_feat=i_feat,
            qtype=qtype,
            u_true=u,
            cand_embs=cand_embs,
            cand_tokens=cand_tokens,
            cand_lengths=lengths,
            cand_signatures=ids.astype(np.int64),
            causal_relevance=causal,
            observed_relevance=observed,
            gt_index=gt_index,
            hist_answer_lengths=hist_lengths,
            hist_tokens=hist_tokens,
        )


_WORLD_CACHE: dict[WorldSpec, World] = {}


def world_for(spec: WorldSpec) -> World:
    if spec not in _WORLD_CACHE:
        _WORLD_CACHE[spec] = World(spec)
    return _WORLD_CACHE[spec]


def generate(spec: WorldSpec, n: int, val_fraction: float = 0.2) -> Dataset:
    """Deterministically synthesize ``n`` instances (last fraction tagged val)."""
    if n < 1:
        raise InvalidSpec("n must be >= 1")
    if not 0.0 <= val_fraction < 1.0:
        raise InvalidSpec("val_fraction must lie in [0, 1)")
    w = world_for(spec)
    rng = np.random.default_rng([spec.seed, 0xD1A106])
    instances = [w.make_instance(rng) for _ in range(n)]
    n_train = n - int(round(val_fraction * n))
    split = ["train"] * n_train + ["val"] * (n - n_train)
    return Dataset(instances=instances, spec=spec, split=split)


def oracle_interventional(d: Dataset, inst: DialogInstance) -> np.ndarray:
    """Exact adjusted answer distribution for one instance.

    Sums the annotator-choice distribution over the latent-state prior
    given history (marginalizing the planted history-bias channel), i.e.
    the quantity a backdoor-adjusted estimator is trying to approximate.
    """
    w = world_for(d.spec)
    spec = d.spec
    h_content = inst.h_feat[: spec.feat_dim]
    contents = inst.cand_embs[:, : spec.feat_dim]
    p_u = w.user_prior(h_content)
    acc = np.zeros(inst.n_candidates)
    for u, weight in enumerate(p_u):
        acc += weight * w.selection_dist(inst.causal_relevance, w.user_pref_dist(u, contents))
    lb = spec.length_bias_strength
    if lb > 0.0:
        hist = w.hist_pref_weights(
            inst.cand_lengths,
            inst.cand_tokens,
            inst.cand_signatures,
            inst.mean_hist_length,
            inst.hist_token_set,
        )
        acc = (1.0 - lb) * acc + lb * w.selection_dist(inst.causal_relevance, hist)
    return acc / acc.sum()


# -- bias probes ---------------------------------------------------------------


@dataclass(frozen=True)
class LengthBiasStat:
    """Correlation between mean history answer length and top-1 answer length."""

    correlation: float
    curve: tuple[tuple[float, float, int], ...]
    n: int


def _safe_corr(x: np.ndarray, y: np.ndarray) -> float:
    if x.std() == 0.0 or y.std() == 0.0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def bias_probe_length(ranked: Sequence[np.ndarray], d: Dataset) -> LengthBiasStat:
    """Measure the planted answer-length shortcut in a set of rankings."""
    if len(ranked) != len(d.instances):
        raise LengthMismatch(f"{len(ranked)} rankings for {len(d.instances)} instances")
    hist_means = np.array([inst.mean_hist_length for inst in d.instances])
    top_lengths = np.array(
        [float(inst.cand_lengths[order[0]]) for order, inst in zip(ranked, d.instances)]
    )
    curve = []
    for b in range(1, MAX_LEN + 1):
        mask = (hist_means >= b - 0.5) & (hist_means < b + 0.5)
        if mask.any():
            curve.append((float(b), float(top_lengths[mask].mean()), int(mask.sum())))
    return LengthBiasStat(
        correlation=_safe_corr(hist_means, top_lengths),
        curve=tuple(curve),
        n=len(ranked),
    )


def bias_probe_wordmatch(ranked: Sequence[np.ndarray], d: Dataset, top_k: int = 10) -> int:
    """Count token occurrences shared with history over each top-k ranking."""
    if len(ranked) != len(d.instances):
        raise LengthMismatch(f"{len(ranked)} rankings for {len(d.instances)} instances")
    total = 0
    for order, inst in zip(ranked, d.instances):
        hist = inst.hist_token_set
        for c in np.asarray(order)[:top_k]:
            total += sum(1 for t in inst.cand_tokens[int(c)] if t in hist)
    return total


def expected_random_wordmatch(d: Dataset, top_k: int = 10) -> float:
    """Analytic expected word-match count under uniformly random rankings."""
    total = 0.0
    for inst in d.instances:
        hist = inst.hist_token_set
        overlap = sum(sum(1 for t in toks if t in hist) for toks in inst.cand_tokens)
        total += overlap * min(top_k, inst.n_candidates) / inst.n_candidates
    return total


def shortcut_probe_indices(d: Dataset) -> list[int]:
    """Instances where the shortcut answer is present in history but causally irrelevant."""
    out = []
    for i, inst in enumerate(d.instances):
        pos = np.nonzero(inst.cand_signatures == SHORTCUT_SIGNATURE)[0]
        if pos.size == 0:
            continue
        if SHORTCUT_TOKEN in inst.hist_token_set and inst.causal_relevance[pos[0]] == 0.0:
            out.append(i)
    return out


def shortcut_mask(inst: DialogInstance) -> np.ndarray:
    return np.asarray(inst.cand_signatures == SHORTCUT_SIGNATURE)


# -- line-delimited serialization ------------------------------------------------


def save_dataset(d: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        header = {"kind": "header", "spec": asdict(d.spec), "n": len(d), "split": d.split}
        fh.write(json.dumps(header) + "\n")
        for inst in d.instances:
            rec = {
                "kind": "instance",
                "h_feat": inst.h_feat.tolist(),
                "q_feat": inst.q_feat.tolist(),
                "i_feat": inst.i_feat.tolist(),
                "qtype": inst.qtype,
                "u_true": inst.u_true,
                "cand_embs": inst.cand_embs.tolist(),
                "cand_tokens": [list(t) for t in inst.cand_tokens],
                "cand_signatures": inst.cand_signatures.tolist(),
                "causal_relevance": inst.causal_relevance.tolist(),
                "observed_relevance": inst.observed_relevance.tolist(),
                "gt_index": inst.gt_index,
                "hist_answer_lengths": inst.hist_answer_lengths.tolist(),
                "hist_tokens": [list(t) for t in inst.hist_tokens],
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "header":
            raise WorldError("dataset file must start with a header line")
        spec = WorldSpec(**header["spec"])
        instances = []
        for line in fh:
            rec = json.loads(line)
            tokens = tuple(tuple(int(t) for t in toks) for toks in rec["cand_tokens"])
            instances.append(
                DialogInstance(
                    h_feat=np.array(rec["h_feat"]),
                    q_feat=np.array(rec["q_feat"]),
                    i_feat=np.array(rec["i_feat"]),
                    qtype=int(rec["qtype"]),
                    u_true=int(rec["u_true"]),
                    cand_embs=np.array(rec["cand_embs"]),
                    cand_tokens=tokens,
                    cand_lengths=np.array([len(t) for t in tokens], dtype=np.int64),
                    cand_signatures=np.array(rec["cand_signatures"], dtype=np.int64),
                    causal_relevance=np.array(rec["causal_relevance"]),
                    observed_relevance=np.array(rec["observed_relevance"]),
                    gt_index=int(rec["gt_index"]),
                    hist_answer_lengths=np.array(rec["hist_answer_lengths"], dtype=np.int64),
                    hist_tokens=tuple(tuple(int(t) for t in toks) for toks in rec["hist_tokens"]),
                )
            )
    return Dataset(instances=instances, spec=spec, split=list(header["split"]))
