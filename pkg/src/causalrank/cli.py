"""Command-line interface for the causal answer-ranking toolkit."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import graphs, harness, metrics, qtype, scm, scorer, world


@click.group()
def main():
    """Causal inference toolkit for confounded answer ranking."""


# -- graph ------------------------------------------------------------------


@main.group()
def graph():
    """Build, cut and inspect causal graphs."""


_GRAPH_BUILDERS = {
    "baseline": graphs.build_baseline_graph,
    "p1": lambda: graphs.apply_p1(graphs.build_baseline_graph()),
    "p2": lambda: graphs.apply_p2(graphs.build_baseline_graph()),
    "proposed": graphs.build_proposed_graph,
}


@graph.command("build")
@click.argument("kind", type=click.Choice(sorted(_GRAPH_BUILDERS)))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write edge list here.")
def graph_build(kind: str, out: str | None):
    """Emit one of the stock dialog-ranking graphs as an edge list."""
    g = _GRAPH_BUILDERS[kind]()
    text = g.to_text()
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


@graph.command("paths")
@click.option("--graph", "graph_file", required=True, type=click.Path(exists=True))
@click.option("--x", "x", required=True)
@click.option("--y", "y", required=True)
def graph_paths(graph_file: str, x: str, y: str):
    """List every backdoor path from X to Y."""
    g = graphs.CausalGraph.from_text(Path(graph_file).read_text())
    for path in graphs.backdoor_paths(g, x, y):
        click.echo(graphs.format_path(path))


@graph.command("dsep")
@click.option("--graph", "graph_file", required=True, type=click.Path(exists=True))
@click.option("--x", required=True)
@click.option("--y", required=True)
@click.option("--given", default="", help="Comma-separated conditioning set.")
def graph_dsep(graph_file: str, x: str, y: str, given: str):
    """Report d-separation and the backdoor criterion for (X, Y, Z)."""
    g = graphs.CausalGraph.from_text(Path(graph_file).read_text())
    z = [n for n in (s.strip() for s in given.split(",")) if n]
    sep = graphs.d_separated(g, x, y, z)
    ok = graphs.satisfies_backdoor(g, x, y, z)
    click.echo(f"d_separated: {sep}")
    click.echo(f"satisfies_backdoor: {ok}")


# -- scm --------------------------------------------------------------------


@main.group(name="scm")
def scm_group():
    """Query exact discrete structural causal models."""


@scm_group.command("query")
@click.option("--model", "model_file", required=True, type=click.Path(exists=True))
@click.argument("expression")
def scm_query(model_file: str, expression: str):
    """Evaluate a query like 'P(A | do Q=1, H=0, I=2)'."""
    m = scm.DiscreteScm.load(model_file)
    q = scm.parse_query(expression)
    dist = scm.evaluate_query(m, q)
    for value, p in enumerate(dist):
        click.echo(f"{q.target}={value}: {p!r}")


# -- gen --------------------------------------------------------------------


@main.command("gen")
@click.option("--users", default=4, show_default=True)
@click.option("--qtypes", default=8, show_default=True)
@click.option("--candidates", default=100, show_default=True)
@click.option("--dim", default=16, show_default=True)
@click.option("--bias", default=0.5, show_default=True)
@click.option("--length-bias", default=0.0, show_default=True)
@click.option("--n", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--val-fraction", default=0.2, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def gen(users, qtypes, candidates, dim, bias, length_bias, n, seed, val_fraction, out):
    """Generate a synthetic confounded ranking dataset (JSON lines)."""
    spec = world.WorldSpec(
        n_users=users,
        n_qtypes=qtypes,
        n_candidates=candidates,
        feat_dim=dim,
        bias_strength=bias,
        length_bias_strength=length_bias,
        seed=seed,
    )
    data = world.generate(spec, n, val_fraction)
    world.save_dataset(data, out)
    click.echo(f"wrote {len(data)} instances to {out}")


# -- score / eval --------------------------------------------------------------


@main.command("score")
@click.option("--data", "data_file", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--qtype-table", default=None, type=click.Path(exists=True), help="Mix this prior at inference.")
def score(data_file: str, ckpt: str, out: str, qtype_table: str | None):
    """Rank every instance of a dataset with a scorer checkpoint."""
    data = world.load_dataset(data_file)
    params = scorer.load_checkpoint(ckpt)
    table = qtype.QTypeTable.load(qtype_table) if qtype_table else None
    with open(out, "w") as fh:
        for i, inst in enumerate(data.instances):
            sv = scorer.forward(params, inst)
            if table is not None:
                sv = scorer.mix_with_prior(sv, qtype.prior(table, inst.qtype, inst.cand_signatures))
            order = metrics.rank_by(sv.logits, inst.causal_relevance).order
            fh.write(json.dumps({"index": i, "order": order.tolist()}) + "\n")
    click.echo(f"wrote rankings for {len(data)} instances to {out}")


@main.command("eval")
@click.option("--ranking", "ranking_file", required=True, type=click.Path(exists=True))
@click.option("--data", "data_file", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def eval_cmd(ranking_file: str, data_file: str, out: str):
    """Score a ranking file against a dataset; per-instance and mean metrics."""
    data = world.load_dataset(data_file)
    orders: dict[int, np.ndarray] = {}
    with open(ranking_file) as fh:
        for line in fh:
            rec = json.loads(line)
            orders[int(rec["index"])] = np.asarray(rec["order"], dtype=np.int64)
    rows = []
    ndcgs, mrrs = [], []
    for i, inst in enumerate(data.instances):
        if i not in orders:
            continue
        ranking = metrics.RankingResult(orders[i], inst.causal_relevance)
        nd = metrics.ndcg(ranking)
        rr = metrics.mrr(ranking, inst.gt_index)
        ndcgs.append(nd)
        mrrs.append(rr)
        rows.append((i, repr(nd), repr(rr)))
    with open(out, "w") as fh:
        fh.write("instance,ndcg,mrr\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
        fh.write(f"mean,{np.mean(ndcgs)!r},{np.mean(mrrs)!r}\n")
    click.echo(f"evaluated {len(rows)} instances -> {out}")


# -- qtype -----------------------------------------------------------------------


@main.group(name="qtype")
def qtype_group():
    """Fit and apply question-type preference priors."""


@qtype_group.command("fit")
@click.option("--data", "data_file", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--min-count", default=5, show_default=True)
@click.option("--smoothing", default=1.0, show_default=True)
@click.option("--threshold", default=0.5, show_default=True, help="High-relevance cutoff (fraction of max).")
@click.option("--split", default="train", show_default=True, type=click.Choice(["train", "val", "all"]))
def qtype_fit(data_file: str, out: str, min_count: int, smoothing: float, threshold: float, split: str):
    """Count preferred answers per question type and save the table."""
    data = world.load_dataset(data_file)
    if split == "all":
        indices = None
    else:
        indices = data.train_indices() if split == "train" else data.val_indices()
    table = qtype.fit(data, min_count=min_count, smoothing=smoothing, rel_threshold=threshold, indices=indices)
    table.save(out)
    click.echo(f"fitted table over {table.n_types} types -> {out}")


@qtype_group.command("apply")
@click.option("--table", "table_file", required=True, type=click.Path(exists=True))
@click.option("--data", "data_file", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def qtype_apply(table_file: str, data_file: str, out: str):
    """Write per-instance candidate prior weights (JSON lines)."""
    table = qtype.QTypeTable.load(table_file)
    data = world.load_dataset(data_file)
    with open(out, "w") as fh:
        for i, inst in enumerate(data.instances):
            weights = qtype.prior(table, inst.qtype, inst.cand_signatures)
            fh.write(json.dumps({"index": i, "prior": weights.tolist()}) + "\n")
    click.echo(f"wrote priors for {len(data)} instances -> {out}")


# -- train / probe / matrix -------------------------------------------------------


def _load_config(path: str) -> harness.RunConfig:
    return harness.RunConfig.from_json_dict(json.loads(Path(path).read_text()))


@main.command("train")
@click.option("--config", "config_file", required=True, type=click.Path(exists=True))
@click.option("--out-dir", default=None, type=click.Path(file_okay=False), help="Override config out_dir.")
@click.option("--save-ckpt", is_flag=True, help="Also save per-seed checkpoints.")
def train_cmd(config_file: str, out_dir: str | None, save_ckpt: bool):
    """Run one training config (JSON) and write its reports."""
    cfg = _load_config(config_file)
    if out_dir is not None:
        cfg = harness.RunConfig.from_json_dict({**cfg.to_json_dict(), "out_dir": out_dir})
    report = harness.run(cfg)
    if save_ckpt and cfg.out_dir:
        for seed in cfg.seeds:
            data = harness.make_dataset(cfg, seed)
            result = harness.train_single(cfg, data, seed)
            scorer.save_checkpoint(result.params, Path(cfg.out_dir) / f"params_seed{seed}.ckpt")
    for name, (mean, std) in report.aggregates.items():
        click.echo(f"{name}: {mean:.4f} +/- {std:.4f}")


@main.command("probe")
@click.option("--configs", "configs_file", required=True, type=click.Path(exists=True),
              help="JSON object mapping labels to run configs.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def probe_cmd(configs_file: str, out_dir: str):
    """Train labeled configs on shared worlds and write bias.csv."""
    raw = json.loads(Path(configs_file).read_text())
    cfg_by_label = {label: harness.RunConfig.from_json_dict(d) for label, d in raw.items()}
    report = harness.report_bias(cfg_by_label, out_dir)
    for row in report.diffs:
        click.echo(f"{row['label']} seed={row['seed']} {row['metric']}: {row['value']:+.4f}")


@main.command("matrix")
@click.option("--configs", "configs_file", required=True, type=click.Path(exists=True),
              help="JSON list of run configs.")
def matrix_cmd(configs_file: str):
    """Run a list of configs, isolating per-run failures."""
    raw = json.loads(Path(configs_file).read_text())
    cfgs = [harness.RunConfig.from_json_dict(d) for d in raw]
    reports = harness.run_matrix(cfgs)
    failures = 0
    for i, rep in enumerate(reports):
        if rep.error:
            failures += 1
            click.echo(f"run {i}: FAILED ({rep.error})")
        else:
            mean, std = rep.aggregates["ndcg"]
            click.echo(f"run {i}: ndcg {mean:.4f} +/- {std:.4f}")
    if failures:
        sys.exit(1)


if __name__ == "__main__":
    main()
