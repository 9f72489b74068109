"""Exact finite-domain structural causal models over a CausalGraph.

Every query is answered by exact enumeration (a vectorized joint table),
so the module serves as the bit-reproducible ground-truth oracle for
observational conditionals, do-interventions via graph surgery, and the
backdoor adjustment sum.  Monte-Carlo ancestral sampling is provided only
as a cross-check.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .graphs import CausalGraph, GraphError, NodeId, UnknownNode

logger = logging.getLogger(__name__)

_ROW_SUM_TOL = 1e-12

Assignment = Mapping[NodeId, int]


class ScmError(ValueError):
    pass


class IncompleteAssignment(ScmError):
    pass


class ZeroProbabilityEvidence(ScmError):
    pass


@dataclass(frozen=True)
class DiscreteScm:
    """Finite-domain SCM: a DAG plus one CPT per node.

    ``cpts[n]`` has shape ``(*cards(sorted parents of n), cards(n))``;
    parent axes are ordered by node name so table layout is canonical.
    ``observed`` marks the nodes visible to estimators (data-level
    observability; the graph itself is agnostic).
    """

    graph: CausalGraph
    cardinalities: dict[NodeId, int]
    cpts: dict[NodeId, np.ndarray]
    observed: frozenset[NodeId] = field(default_factory=frozenset)

    def __post_init__(self):
        for n in self.graph.nodes:
            if n not in self.cardinalities:
                raise ScmError(f"missing cardinality for {n!r}")
            if self.cardinalities[n] < 1:
                raise ScmError(f"cardinality of {n!r} must be >= 1")
            if n not in self.cpts:
                raise ScmError(f"missing CPT for {n!r}")
        for n in self.observed:
            self.graph.require_node(n)
        validated: dict[NodeId, np.ndarray] = {}
        for n in sorted(self.graph.nodes):
            cpt = np.asarray(self.cpts[n], dtype=float)
            expected = tuple(self.cardinalities[p] for p in self.parent_order(n))
            expected += (self.cardinalities[n],)
            if cpt.shape != expected:
                raise ScmError(f"CPT for {n!r} has shape {cpt.shape}, expected {expected}")
            if np.any(cpt < 0):
                raise ScmError(f"CPT for {n!r} has negative entries")
            sums = cpt.sum(axis=-1)
            if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
                raise ScmError(f"CPT rows for {n!r} must sum to 1")
            validated[n] = cpt
        object.__setattr__(self, "cpts", validated)

    def parent_order(self, n: NodeId) -> list[NodeId]:
        """Canonical (name-sorted) parent order used for CPT axes."""
        return sorted(self.graph.parents(n))

    def card(self, n: NodeId) -> int:
        if n not in self.cardinalities:
            raise UnknownNode(f"unknown node {n!r}")
        return self.cardinalities[n]

    def node_order(self) -> list[NodeId]:
        """Canonical node order for joint tables (sorted by name)."""
        return sorted(self.graph.nodes)

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "graph": {
                "nodes": sorted(self.graph.nodes),
                "edges": sorted(list(e) for e in self.graph.edges),
            },
            "cardinalities": {n: self.cardinalities[n] for n in self.node_order()},
            "cpts": {n: self.cpts[n].tolist() for n in self.node_order()},
            "observed": sorted(self.observed),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> DiscreteScm:
        graph = CausalGraph(d["graph"]["nodes"], [tuple(e) for e in d["graph"]["edges"]])
        cpts = {n: np.asarray(v, dtype=float) for n, v in d["cpts"].items()}
        return cls(
            graph=graph,
            cardinalities={n: int(v) for n, v in d["cardinalities"].items()},
            cpts=cpts,
            observed=frozenset(d.get("observed", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DiscreteScm:
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _check_assignment(m: DiscreteScm, a: Assignment) -> None:
    for n, v in a.items():
        if n not in m.graph.nodes:
            raise UnknownNode(f"unknown node {n!r}")
        if not 0 <= int(v) < m.card(n):
            raise ScmError(f"value {v} out of range for {n!r} (card {m.card(n)})")


def joint_prob(m: DiscreteScm, a: Assignment) -> float:
    """Chain-rule probability of a full assignment."""
    _check_assignment(m, a)
    missing = m.graph.nodes - set(a)
    if missing:
        raise IncompleteAssignment(f"assignment misses nodes {sorted(missing)}")
    p = 1.0
    for n in m.node_order():
        idx = tuple(int(a[par]) for par in m.parent_order(n)) + (int(a[n]),)
        p *= float(m.cpts[n][idx])
    return p


def joint_table(m: DiscreteScm) -> tuple[np.ndarray, list[NodeId]]:
    """The full joint as an ndarray with one axis per node (sorted order)."""
    order = m.node_order()
    pos = {n: i for i, n in enumerate(order)}
    full_shape = [m.card(n) for n in order]
    table = np.ones(full_shape)
    for n in order:
        parents = m.parent_order(n)
        axes = sorted(pos[p] for p in parents) + [pos[n]]
        # CPT axes are (sorted parents..., self); self may interleave by name.
        want = sorted(axes)
        cpt = np.moveaxis(m.cpts[n], -1, want.index(pos[n]))
        shape = [1] * len(order)
        for ax, size in zip(want, cpt.shape):
            shape[ax] = size
        table = table * cpt.reshape(shape)
    return table, order


def conditional(m: DiscreteScm, target: NodeId, evidence: Assignment) -> np.ndarray:
    """Exact P(target | evidence) as a vector over target values."""
    m.graph.require_node(target)
    _check_assignment(m, evidence)
    if target in evidence:
        raise ScmError(f"target {target!r} appears in evidence")
    table, order = joint_table(m)
    idx: list[object] = [slice(None)] * len(order)
    for n, v in evidence.items():
        idx[order.index(n)] = int(v)
    sub = table[tuple(idx)]
    keep_axis = [n for n in order if n not in evidence].index(target)
    reduce_axes = tuple(i for i in range(sub.ndim) if i != keep_axis)
    dist = sub.sum(axis=reduce_axes) if reduce_axes else sub
    total = float(dist.sum())
    if total <= 0.0:
        raise ZeroProbabilityEvidence(f"evidence {dict(evidence)!r} has probability 0")
    return dist / total


def marginal(m: DiscreteScm, target: NodeId) -> np.ndarray:
    return conditional(m, target, {})


def intervene(m: DiscreteScm, dos: Assignment) -> DiscreteScm:
    """Graph surgery: cut incoming edges of intervened nodes, pin their values."""
    if not dos:
        raise ScmError("dos must be nonempty")
    _check_assignment(m, dos)
    new_graph = m.graph.without_incoming(dos)
    new_cpts = dict(m.cpts)
    for n, v in dos.items():
        point = np.zeros(m.card(n))
        point[int(v)] = 1.0
        new_cpts[n] = point
    return DiscreteScm(
        graph=new_graph,
        cardinalities=dict(m.cardinalities),
        cpts=new_cpts,
        observed=m.observed,
    )


def interventional_prob(
    m: DiscreteScm, target: NodeId, dos: Assignment, evidence: Assignment
) -> np.ndarray:
    """P(target | do(dos), evidence): conditional in the mutilated model."""
    if target in dos or target in evidence or set(dos) & set(evidence):
        raise ScmError("target, dos and evidence must be disjoint")
    return conditional(intervene(m, dos), target, evidence)


def backdoor_adjust(
    m: DiscreteScm,
    target: NodeId,
    x: Assignment,
    context: Assignment,
    adjust_over: NodeId,
) -> np.ndarray:
    """Adjustment sum over a single latent node.

    Computes ``sum_u P(target | x, context, u) * P(u | context)`` with
    exact conditionals.  On the proposed dialog graph with x={Q} and
    context={H,I} this reduces to the standard sum over the user state
    with prior P(u|H), since U is independent of I given H.

    Terms whose conditioning event has probability zero while the prior
    weight is positive fall back to a uniform conditional (with a logged
    diagnostic) so the estimator stays total under arbitrary CPTs.
    """
    m.graph.require_node(target)
    m.graph.require_node(adjust_over)
    evidence = dict(x)
    for k, v in context.items():
        if k in evidence:
            raise ScmError(f"node {k!r} assigned in both x and context")
        evidence[k] = v
    if target in evidence or target == adjust_over or adjust_over in evidence:
        raise ScmError("target, x/context and adjust_over must be disjoint")
    prior = conditional(m, adjust_over, context)
    k = m.card(target)
    acc = np.zeros(k)
    for u, w in enumerate(prior):
        if w <= 0.0:
            continue
        try:
            term = conditional(m, target, {**evidence, adjust_over: u})
        except ZeroProbabilityEvidence:
            logger.warning(
                "backdoor_adjust: P(%s, %s=%d) = 0 with positive prior; using uniform term",
                dict(evidence),
                adjust_over,
                u,
            )
            term = np.full(k, 1.0 / k)
        acc += float(w) * term
    total = float(acc.sum())
    if total <= 0.0:
        raise ZeroProbabilityEvidence("adjustment produced zero total mass")
    return acc / total


def sample(m: DiscreteScm, rng: np.random.Generator, n: int) -> dict[NodeId, np.ndarray]:
    """Ancestral sampling; vectorized over ``n`` draws (cross-check only)."""
    out: dict[NodeId, np.ndarray] = {}
    for node in m.graph.topological_order():
        parents = m.parent_order(node)
        cpt = m.cpts[node]
        if parents:
            flat = cpt.reshape(-1, m.card(node))
            strides = np.ones(len(parents), dtype=np.int64)
            for i in range(len(parents) - 2, -1, -1):
                strides[i] = strides[i + 1] * m.card(parents[i + 1])
            rows = np.zeros(n, dtype=np.int64)
            for p, s in zip(parents, strides):
                rows += out[p] * s
            probs = flat[rows]
        else:
            probs = np.broadcast_to(cpt, (n, m.card(node)))
        cum = np.cumsum(probs, axis=1)
        u = rng.random(n)
        out[node] = (u[:, None] > cum[:, :-1]).sum(axis=1).astype(np.int64)
    return out


def conditional_mutual_information(
    m: DiscreteScm, x: NodeId, y: NodeId, z: Iterable[NodeId] = ()
) -> float:
    """Exact conditional mutual information I(x; y | z) in nats."""
    znodes = sorted(set(z))
    for n in (x, y, *znodes):
        m.graph.require_node(n)
    table, order = joint_table(m)
    keep = [order.index(n) for n in (x, y, *znodes)]
    drop = tuple(i for i in range(len(order)) if i not in keep)
    pxyz = table.sum(axis=drop) if drop else table
    pxyz = np.moveaxis(pxyz, [sorted(keep).index(k) for k in keep], range(len(keep)))
    pxyz = pxyz.reshape(pxyz.shape[0], pxyz.shape[1], -1)
    pz = pxyz.sum(axis=(0, 1))
    pxz = pxyz.sum(axis=1)
    pyz = pxyz.sum(axis=0)
    mask = pxyz > 1e-300
    ratio = np.ones_like(pxyz)
    denom = pxz[:, None, :] * pyz[None, :, :]
    np.divide(pxyz * pz[None, None, :], denom, out=ratio, where=mask & (denom > 0))
    return float(np.sum(pxyz[mask] * np.log(ratio[mask])))


def random_cpts(
    graph: CausalGraph,
    cardinalities: Mapping[NodeId, int],
    rng: np.random.Generator,
    min_prob: float = 0.0,
    observed: Iterable[NodeId] = (),
) -> DiscreteScm:
    """Random strictly-positive CPTs (floor ``min_prob`` before renormalizing)."""
    cpts: dict[NodeId, np.ndarray] = {}
    for n in sorted(graph.nodes):
        shape = tuple(cardinalities[p] for p in sorted(graph.parents(n)))
        shape += (cardinalities[n],)
        raw = rng.random(shape) + min_prob
        cpts[n] = raw / raw.sum(axis=-1, keepdims=True)
    return DiscreteScm(
        graph=graph,
        cardinalities=dict(cardinalities),
        cpts=cpts,
        observed=frozenset(observed),
    )


# -- query expression parsing (CLI) ------------------------------------------

_QUERY_RE = re.compile(r"^\s*P\(\s*([A-Za-z0-9_]+)\s*(?:\|(.*))?\)\s*$")


@dataclass(frozen=True)
class Query:
    target: NodeId
    dos: dict[NodeId, int]
    evidence: dict[NodeId, int]


def parse_query(text: str) -> Query:
    """Parse expressions like ``P(A | do Q=1, H=0, I=2)``."""
    match = _QUERY_RE.match(text)
    if not match:
        raise ScmError(f"unparseable query {text!r}")
    target = match.group(1)
    dos: dict[NodeId, int] = {}
    evidence: dict[NodeId, int] = {}
    rest = match.group(2) or ""
    for term in filter(None, (t.strip() for t in rest.split(","))):
        is_do = False
        if term.startswith("do "):
            is_do = True
            term = term[3:].strip()
        elif term.startswith("do("):
            is_do = True
            term = term[3:].rstrip(")").strip()
        if "=" not in term:
            raise ScmError(f"unparseable query term {term!r}")
        name, value = (p.strip() for p in term.split("=", 1))
        (dos if is_do else evidence)[name] = int(value)
    return Query(target=target, dos=dos, evidence=evidence)


def evaluate_query(m: DiscreteScm, q: Query) -> np.ndarray:
    if q.dos:
        return interventional_prob(m, q.target, q.dos, q.evidence)
    return conditional(m, q.target, q.evidence)
