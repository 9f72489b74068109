"""Experiment driver: two-stage training, evaluation, probes, CSV reports.

A run config pins a synthetic world, a scorer wiring, a likelihood
pre-training stage and an optional dense fine-tuning stage.  Every number
a run emits is a pure function of (config, seed): datasets derive from a
mixed world seed, parameter init and shuffling from the run seed, and all
report files are written with deterministic formatting so repeated runs
are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from . import losses, metrics, qtype, scorer
from .world import (
    Dataset,
    WorldSpec,
    bias_probe_length,
    bias_probe_wordmatch,
    generate,
    oracle_interventional,
    shortcut_mask,
    shortcut_probe_indices,
)

logger = logging.getLogger(__name__)

VERSION = "0.1.0"


class HarnessError(ValueError):
    pass


class ConfigError(HarnessError):
    pass


class DivergenceDetected(HarnessError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """One experiment cell: world x scorer wiring x losses x schedule."""

    world: WorldSpec
    variant: str = "p1"
    loss_pretrain: str = "ce"
    loss_finetune: str | None = None
    epochs: int = 8
    lr: float = 0.05
    lr_decay_epochs: tuple[int, ...] = (5, 7)
    lr_decay_rate: float = 0.4
    seeds: tuple[int, ...] = (0,)
    qt_mixing: bool = False
    out_dir: str | None = None
    # desk-scale knobs
    n_instances: int = 2500
    val_fraction: float = 0.2
    hidden_dim: int = 16
    n_dict: int = 8
    momentum: float = 0.9
    optimizer: str = "sgd"
    finetune_epochs: int = 5
    finetune_lr: float | None = None
    finetune_fraction: float = 0.2
    finetune_targets: str = "observed"
    qt_as_targets: bool = False

    def __post_init__(self):
        if self.variant not in scorer.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.loss_pretrain not in losses.LOSS_KINDS:
            raise ConfigError(f"unknown pretrain loss {self.loss_pretrain!r}")
        if self.loss_finetune is not None and self.loss_finetune not in losses.LOSS_KINDS:
            raise ConfigError(f"unknown finetune loss {self.loss_finetune!r}")
        if self.epochs < 1 or self.finetune_epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if not 0.0 < self.lr_decay_rate <= 1.0:
            raise ConfigError("lr_decay_rate must lie in (0, 1]")
        if len(self.seeds) == 0:
            raise ConfigError("seeds must be nonempty")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.finetune_fraction <= 1.0:
            raise ConfigError("finetune_fraction must lie in (0, 1]")
        if self.finetune_targets not in ("observed", "causal"):
            raise ConfigError("finetune_targets must be 'observed' or 'causal'")
        if self.n_instances < 2:
            raise ConfigError("n_instances must be >= 2")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["world"] = asdict(self.world)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["world"] = WorldSpec(**d["world"])
        for key in ("lr_decay_epochs", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def reference_schedule(world: WorldSpec, **overrides) -> RunConfig:
    """The full-scale training schedule kept as a preset: learning rate
    4e-3 decayed by 0.4 at epochs 5, 7 and 9, 15 epochs total."""
    base = dict(
        world=world,
        epochs=15,
        lr=4e-3,
        lr_decay_epochs=(5, 7, 9),
        lr_decay_rate=0.4,
    )
    base.update(overrides)
    return RunConfig(**base)


def mix_seed(a: int, b: int) -> int:
    return int(np.random.SeedSequence([int(a), int(b)]).generate_state(1)[0])


def make_dataset(cfg: RunConfig, seed: int) -> Dataset:
    """Per-run-seed dataset: a fresh world derived from the config world seed."""
    spec = replace(cfg.world, seed=mix_seed(cfg.world.seed, seed))
    return generate(spec, cfg.n_instances, cfg.val_fraction)


# -- optimizers -----------------------------------------------------------------


class _Sgd:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params: scorer.ScorerParams, momentum: float):
        self.momentum = momentum
        self.velocity = params.zeros_like()

    def step(self, params: scorer.ScorerParams, grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            getattr(params, name)[...] += v


class _Adam:
    """Adaptive-moment update: first/second moment EMAs (0.9 / 0.999) with
    bias correction, step = lr * m_hat / (sqrt(v_hat) + 1e-8)."""

    def __init__(self, params: scorer.ScorerParams, momentum: float):
        self.b1, self.b2, self.eps = momentum, 0.999, 1e-8
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: scorer.ScorerParams, grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            getattr(params, name)[...] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(cfg: RunConfig, params: scorer.ScorerParams):
    return _Adam(params, cfg.momentum) if cfg.optimizer == "adam" else _Sgd(params, cfg.momentum)


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    params: scorer.ScorerParams
    curves: list[dict] = field(default_factory=list)


def _stage_targets(cfg: RunConfig, kind: str, inst, stage: str, qt_table: qtype.QTypeTable | None):
    if kind == "ce":
        return inst.gt_index
    if stage == "finetune" and cfg.qt_as_targets:
        if qt_table is None:
            raise ConfigError("qt_as_targets requires a fitted table")
        flags = np.array(
            [1.0 if qt_table.effective_count(inst.qtype, int(s)) > 0 else 0.0 for s in inst.cand_signatures]
        )
        if flags.sum() == 0.0:
            flags = np.ones_like(flags)  # uninformative type: flat preference
        return losses.targets_for(kind, flags)
    rel = inst.causal_relevance if (stage == "finetune" and cfg.finetune_targets == "causal") else inst.observed_relevance
    return losses.targets_for(kind, rel)


def _run_stage(
    cfg: RunConfig,
    params: scorer.ScorerParams,
    data: Dataset,
    indices: Sequence[int],
    kind: str,
    epochs: int,
    lr0: float,
    decay_epochs: tuple[int, ...],
    shuffle_rng: np.random.Generator,
    stage: str,
    curves: list[dict],
    seed: int,
    qt_table: qtype.QTypeTable | None = None,
) -> None:
    opt = _make_optimizer(cfg, params)
    lr = lr0
    val_idx = data.val_indices()
    for epoch in range(1, epochs + 1):
        if epoch in decay_epochs:
            lr *= cfg.lr_decay_rate
        order = shuffle_rng.permutation(np.asarray(indices, dtype=np.int64))
        total = 0.0
        for idx in order:
            inst = data.instances[int(idx)]
            targets = _stage_targets(cfg, kind, inst, stage, qt_table)
            value, grads = scorer.grad(params, inst, kind, targets)
            if not math.isfinite(value):
                raise DivergenceDetected(f"{stage} loss became non-finite at epoch {epoch}")
            opt.step(params, grads, lr)
            total += value
        val_ndcg = float("nan")
        if val_idx:
            val_metrics, _ = evaluate_model(params, data, val_idx)
            val_ndcg = val_metrics["ndcg"]
        curves.append(
            {
                "seed": seed,
                "stage": stage,
                "epoch": epoch,
                "lr": lr,
                "train_loss": total / max(1, len(order)),
                "val_ndcg": val_ndcg,
            }
        )


def train_single(cfg: RunConfig, data: Dataset, seed: int) -> TrainResult:
    """Deterministic two-stage training of one scorer on one dataset."""
    if not data.train_indices():
        raise ConfigError("dataset has no train split")
    dims = scorer.dims_from_instance(data.instances[0])
    init_rng = np.random.default_rng([seed, 0xA11CE])
    warm = data if cfg.variant in ("p1_dict", "dict") else None
    params = scorer.init_params(
        init_rng,
        dims,
        variant=cfg.variant,
        hidden_dim=cfg.hidden_dim,
        n_dict=cfg.n_dict,
        dataset=warm,
        seed=seed,
    )
    shuffle_rng = np.random.default_rng([seed, 0x5C0FF])
    curves: list[dict] = []
    train_idx = data.train_indices()

    qt_table = None
    if cfg.qt_as_targets:
        qt_table = qtype.fit(data, indices=train_idx)

    _run_stage(
        cfg, params, data, train_idx, cfg.loss_pretrain, cfg.epochs, cfg.lr,
        cfg.lr_decay_epochs, shuffle_rng, "pretrain", curves, seed, qt_table,
    )
    if cfg.loss_finetune is not None:
        ft_rng = np.random.default_rng([seed, 0xF17E])
        k = max(1, int(round(cfg.finetune_fraction * len(train_idx))))
        subset = sorted(int(i) for i in ft_rng.choice(train_idx, size=k, replace=False))
        lr_ft = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.lr / 10.0
        _run_stage(
            cfg, params, data, subset, cfg.loss_finetune, cfg.finetune_epochs, lr_ft,
            (), shuffle_rng, "finetune", curves, seed, qt_table,
        )
    return TrainResult(params=params, curves=curves)


def train(cfg: RunConfig, data: Dataset) -> dict[int, TrainResult]:
    """Train one scorer per config seed on the provided dataset."""
    return {seed: train_single(cfg, data, seed) for seed in cfg.seeds}


# -- evaluation --------------------------------------------------------------------


def evaluate_model(
    params: scorer.ScorerParams,
    data: Dataset,
    indices: Sequence[int],
    qt_table: qtype.QTypeTable | None = None,
) -> tuple[dict[str, float], list[np.ndarray]]:
    """Mean metrics over ``indices``; NDCG targets are the causal scores."""
    ndcgs, ndcgs_obs, mrrs = [], [], []
    rankings: list[np.ndarray] = []
    for idx in indices:
        inst = data.instances[int(idx)]
        sv = scorer.forward(params, inst)
        if qt_table is not None:
            weights = qtype.prior(qt_table, inst.qtype, inst.cand_signatures)
            sv = scorer.mix_with_prior(sv, weights)
        ranking = metrics.rank_by(sv.logits, inst.causal_relevance)
        rankings.append(ranking.order)
        ndcgs.append(metrics.ndcg(ranking))
        ndcgs_obs.append(metrics.ndcg(metrics.RankingResult(ranking.order, inst.observed_relevance)))
        mrrs.append(metrics.mrr(ranking, inst.gt_index))
    out = {
        "ndcg": float(np.mean(ndcgs)),
        "ndcg_observed": float(np.mean(ndcgs_obs)),
        "mrr": float(np.mean(mrrs)),
    }
    return out, rankings


def oracle_rankings(data: Dataset, indices: Sequence[int]) -> list[np.ndarray]:
    """Rankings by the exact adjusted answer distribution."""
    out = []
    for idx in indices:
        inst = data.instances[int(idx)]
        dist = oracle_interventional(data, inst)
        out.append(metrics.rank_by(dist, inst.causal_relevance).order)
    return out


def oracle_ndcg(data: Dataset, indices: Sequence[int]) -> float:
    vals = []
    for idx, order in zip(indices, oracle_rankings(data, indices)):
        inst = data.instances[int(idx)]
        vals.append(metrics.ndcg(metrics.RankingResult(order, inst.causal_relevance)))
    return float(np.mean(vals))


# -- runs and reports -----------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    version: str = VERSION
    rows: list[dict] = field(default_factory=list)
    aggregates: dict[str, tuple[float, float]] = field(default_factory=dict)
    curves: list[dict] = field(default_factory=list)
    error: str | None = None

    def metric_by_seed(self, metric: str) -> list[float]:
        return [row[metric] for row in self.rows]


def run(cfg: RunConfig) -> RunReport:
    """Execute one config over its seeds: per-seed world, train, evaluate."""
    report = RunReport(config=cfg.to_json_dict())
    for seed in cfg.seeds:
        data = make_dataset(cfg, seed)
        result = train_single(cfg, data, seed)
        qt_table = qtype.fit(data, indices=data.train_indices()) if cfg.qt_mixing else None
        val_metrics, _ = evaluate_model(result.params, data, data.val_indices(), qt_table)
        row = {"seed": seed, **val_metrics}
        report.rows.append(row)
        report.curves.extend(result.curves)
    metric_names = [k for k in report.rows[0] if k != "seed"]
    for name in metric_names:
        vals = np.array([row[name] for row in report.rows], dtype=float)
        report.aggregates[name] = (float(vals.mean()), float(vals.std()))
    if cfg.out_dir is not None:
        write_report(report, Path(cfg.out_dir))
    return report


def run_matrix(cfgs: Sequence[RunConfig]) -> list[RunReport]:
    """Run each config, isolating failures so siblings still report."""
    if len(cfgs) == 0:
        raise ConfigError("run_matrix needs at least one config")
    reports = []
    for i, cfg in enumerate(cfgs):
        try:
            reports.append(run(cfg))
        except Exception as exc:  # noqa: BLE001 - fault isolation is the contract
            logger.exception("run %d failed", i)
            reports.append(RunReport(config=cfg.to_json_dict(), error=f"{type(exc).__name__}: {exc}"))
    return reports


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_report(report: RunReport, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for row in report.rows:
        for name, value in row.items():
            if name == "seed":
                continue
            rows.append((row["seed"], name, value))
    for name, (mean, std) in report.aggregates.items():
        rows.append(("mean", name, mean))
        rows.append(("std", name, std))
    _write_csv(out_dir / "report.csv", ("seed", "metric", "value"), rows)
    _write_csv(
        out_dir / "curves.csv",
        ("seed", "stage", "epoch", "lr", "train_loss", "val_ndcg"),
        [(c["seed"], c["stage"], c["epoch"], c["lr"], c["train_loss"], c["val_ndcg"]) for c in report.curves],
    )
    (out_dir / "config.json").write_text(
        json.dumps({"version": report.version, "config": report.config, "error": report.error}, indent=2, sort_keys=True)
        + "\n"
    )


# -- bias reporting ----------------------------------------------------------------------


@dataclass
class BiasReport:
    rows: list[dict] = field(default_factory=list)
    diffs: list[dict] = field(default_factory=list)

    def metric_by_seed(self, label: str, metric: str) -> list[float]:
        return [r["value"] for r in self.rows if r["label"] == label and r["metric"] == metric]


def report_bias(cfg_by_label: Mapping[str, RunConfig], out_dir: str | Path | None = None) -> BiasReport:
    """Train each labeled config on shared per-seed worlds and compare the
    shortcut probes (length correlation, word matching, shortcut rank)."""
    labels = list(cfg_by_label)
    if len(labels) < 1:
        raise ConfigError("report_bias needs at least one config")
    first = cfg_by_label[labels[0]]
    for cfg in cfg_by_label.values():
        if cfg.world != first.world or cfg.seeds != first.seeds or cfg.n_instances != first.n_instances:
            raise ConfigError("bias comparison requires identical worlds and seeds")

    report = BiasReport()
    for seed in first.seeds:
        data = make_dataset(first, seed)
        val_idx = data.val_indices()
        val_data = data.subset(val_idx)
        probe_local = shortcut_probe_indices(val_data)
        per_label: dict[str, dict[str, float]] = {}
        for label in labels:
            result = train_single(cfg_by_label[label], data, seed)
            _, rankings = evaluate_model(result.params, data, val_idx)
            stat = bias_probe_length(rankings, val_data)
            wm = bias_probe_wordmatch(rankings, val_data)
            ranks = []
            for li in probe_local:
                inst = val_data.instances[li]
                ranking = metrics.RankingResult(rankings[li], inst.causal_relevance)
                ranks.append(metrics.mean_rank_of(ranking, shortcut_mask(inst)))
            values = {
                "length_correlation": stat.correlation,
                "wordmatch": float(wm),
                "shortcut_mean_rank": float(np.mean(ranks)) if ranks else float("nan"),
            }
            per_label[label] = values
            for metric_name, value in values.items():
                report.rows.append({"label": label, "seed": seed, "metric": metric_name, "value": value})
        if len(labels) >= 2:
            a, b = labels[0], labels[1]
            for metric_name in per_label[a]:
                report.diffs.append(
                    {
                        "label": f"diff:{a}-{b}",
                        "seed": seed,
                        "metric": metric_name,
                        "value": per_label[a][metric_name] - per_label[b][metric_name],
                    }
                )
    if out_dir is not None:
        _write_csv(
            Path(out_dir) / "bias.csv",
            ("label", "seed", "metric", "value"),
            [(r["label"], r["seed"], r["metric"], r["value"]) for r in report.rows + report.diffs],
        )
    return report


def paired_sign_test(greater: Sequence[float], lesser: Sequence[float]) -> float:
    """One-sided sign-test p-value that ``greater`` beats ``lesser`` pairwise."""
    if len(greater) != len(lesser):
        raise HarnessError("paired sign test needs equal-length sequences")
    wins = sum(1 for g, l in zip(greater, lesser) if g > l)
    informative = sum(1 for g, l in zip(greater, lesser) if g != l)
    if informative == 0:
        return 1.0
    return float(binomtest(wins, informative, alternative="greater").pvalue)
