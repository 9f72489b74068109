"""Directed acyclic causal graphs: surgery operators and backdoor analysis.

Graphs are immutable value objects over string node ids.  The node names
used by the dialog-ranking builders (H: history, I: image, Q: question,
V: visual knowledge, A: answer, U: user preference) are conventions of
the builder functions, not of the graph type; everything here works on
arbitrary DAGs.

The two surgery operators encode the de-biasing recipe for confounded
answer ranking: ``apply_p1`` deletes the direct history->answer edge,
``apply_p2`` inserts the latent user-preference confounder with its
three edges.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable


NodeId = str

HISTORY: NodeId = "H"
IMAGE: NodeId = "I"
QUESTION: NodeId = "Q"
VISUAL: NodeId = "V"
ANSWER: NodeId = "A"
PREFERENCE: NodeId = "U"


class GraphError(ValueError):
    """Base class for graph construction and query errors."""


class UnknownNode(GraphError):
    pass


class MissingEdge(GraphError):
    pass


class DuplicateNode(GraphError):
    pass


class CycleIntroduced(GraphError):
    pass


@dataclass(frozen=True)
class PathStep:
    """One node on a path plus the direction of the edge to the next node.

    ``forward`` is True when the underlying edge points from this node to
    the next one, False when it points back into this node, and None on
    the final step of a path.
    """

    node: NodeId
    forward: bool | None


Path = tuple[PathStep, ...]


def format_path(path: Path) -> str:
    """Render a path like ``Q <- U -> A`` for reports and CLI output."""
    parts: list[str] = []
    for step in path:
        parts.append(step.node)
        if step.forward is True:
            parts.append("->")
        elif step.forward is False:
            parts.append("<-")
    return " ".join(parts)


class CausalGraph:
    """An immutable DAG over named nodes.

    Acyclicity and edge-endpoint membership are validated on construction;
    all "mutations" return new graphs.
    """

    __slots__ = ("_nodes", "_edges", "_parents", "_children")

    def __init__(self, nodes: Iterable[NodeId], edges: Iterable[tuple[NodeId, NodeId]]):
        node_set = frozenset(nodes)
        edge_set = frozenset((str(a), str(b)) for a, b in edges)
        for n in node_set:
            if not n:
                raise GraphError("node names must be nonempty")
        for a, b in edge_set:
            if a == b:
                raise GraphError(f"self-loop on {a!r}")
            if a not in node_set or b not in node_set:
                raise UnknownNode(f"edge {a!r} -> {b!r} references unknown node")
        object.__setattr__(self, "_nodes", node_set)
        object.__setattr__(self, "_edges", edge_set)
        parents: dict[NodeId, frozenset[NodeId]] = {}
        children: dict[NodeId, frozenset[NodeId]] = {}
        for n in node_set:
            parents[n] = frozenset(a for a, b in edge_set if b == n)
            children[n] = frozenset(b for a, b in edge_set if a == n)
        object.__setattr__(self, "_parents", parents)
        object.__setattr__(self, "_children", children)
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        # Kahn's algorithm; leftover nodes mean a directed cycle.
        indeg = {n: len(self._parents[n]) for n in self._nodes}
        queue = deque(sorted(n for n, d in indeg.items() if d == 0))
        seen = 0
        while queue:
            n = queue.popleft()
            seen += 1
            for c in sorted(self._children[n]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if seen != len(self._nodes):
            raise CycleIntroduced("graph contains a directed cycle")

    def __setattr__(self, name, value):  # pragma: no cover - guard only
        raise AttributeError("CausalGraph is immutable")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CausalGraph):
            return NotImplemented
        return self._nodes == other._nodes and self._edges == other._edges

    def __hash__(self) -> int:
        return hash((self._nodes, self._edges))

    def __repr__(self) -> str:
        return f"CausalGraph(nodes={sorted(self._nodes)}, edges={sorted(self._edges)})"

    @property
    def nodes(self) -> frozenset[NodeId]:
        return self._nodes

    @property
    def edges(self) -> frozenset[tuple[NodeId, NodeId]]:
        return self._edges

    def has_node(self, n: NodeId) -> bool:
        return n in self._nodes

    def has_edge(self, a: NodeId, b: NodeId) -> bool:
        return (a, b) in self._edges

    def require_node(self, n: NodeId) -> None:
        if n not in self._nodes:
            raise UnknownNode(f"unknown node {n!r}")

    def parents(self, n: NodeId) -> frozenset[NodeId]:
        self.require_node(n)
        return self._parents[n]

    def children(self, n: NodeId) -> frozenset[NodeId]:
        self.require_node(n)
        return self._children[n]

    def ancestors(self, n: NodeId) -> frozenset[NodeId]:
        """All strict ancestors of ``n``."""
        self.require_node(n)
        out: set[NodeId] = set()
        stack = list(self._parents[n])
        while stack:
            p = stack.pop()
            if p not in out:
                out.add(p)
                stack.extend(self._parents[p])
        return frozenset(out)

    def descendants(self, n: NodeId) -> frozenset[NodeId]:
        """All strict descendants of ``n``."""
        self.require_node(n)
        out: set[NodeId] = set()
        stack = list(self._children[n])
        while stack:
            c = stack.pop()
            if c not in out:
                out.add(c)
                stack.extend(self._children[c])
        return frozenset(out)

    def topological_order(self) -> list[NodeId]:
        """Deterministic topological order (ties broken by name)."""
        indeg = {n: len(self._parents[n]) for n in self._nodes}
        queue = sorted(n for n, d in indeg.items() if d == 0)
        out: list[NodeId] = []
        while queue:
            n = queue.pop(0)
            out.append(n)
            ready = []
            for c in self._children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            queue = sorted(queue + ready)
        return out

    def without_edge(self, a: NodeId, b: NodeId) -> CausalGraph:
        if (a, b) not in self._edges:
            raise MissingEdge(f"edge {a!r} -> {b!r} not present")
        return CausalGraph(self._nodes, self._edges - {(a, b)})

    def with_node(self, n: NodeId, edges: Iterable[tuple[NodeId, NodeId]] = ()) -> CausalGraph:
        if n in self._nodes:
            raise DuplicateNode(f"node {n!r} already present")
        return CausalGraph(self._nodes | {n}, self._edges | frozenset(edges))

    def without_incoming(self, targets: Iterable[NodeId]) -> CausalGraph:
        """Drop every edge pointing into any of ``targets`` (do-surgery)."""
        tset = set(targets)
        for t in tset:
            self.require_node(t)
        return CausalGraph(self._nodes, {(a, b) for a, b in self._edges if b not in tset})

    # -- plain-text edge-list serialization ---------------------------------

    def to_text(self) -> str:
        """Serialize as one ``A -> B`` line per edge, ``# node X`` for isolated nodes."""
        lines = [f"{a} -> {b}" for a, b in sorted(self._edges)]
        connected = {n for e in self._edges for n in e}
        lines += [f"# node {n}" for n in sorted(self._nodes - connected)]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> CausalGraph:
        nodes: set[NodeId] = set()
        edges: set[tuple[NodeId, NodeId]] = set()
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("# node "):
                nodes.add(line[len("# node "):].strip())
                continue
            if line.startswith("#"):
                continue
            if "->" not in line:
                raise GraphError(f"unparseable graph line: {raw!r}")
            a, b = (part.strip() for part in line.split("->", 1))
            if not a or not b:
                raise GraphError(f"unparseable graph line: {raw!r}")
            nodes.update((a, b))
            edges.add((a, b))
        return cls(nodes, edges)


# -- builders and surgery ----------------------------------------------------


def build_baseline_graph() -> CausalGraph:
    """The stock encoder-decoder dialog-ranking graph.

    Encoder edges I->V, Q->V, H->Q feed the visual-knowledge node; the
    decoder reads V->A, Q->A and the direct history shortcut H->A.
    """
    nodes = {HISTORY, IMAGE, QUESTION, VISUAL, ANSWER}
    edges = {
        (IMAGE, VISUAL),
        (QUESTION, VISUAL),
        (HISTORY, QUESTION),
        (VISUAL, ANSWER),
        (QUESTION, ANSWER),
        (HISTORY, ANSWER),
    }
    return CausalGraph(nodes, edges)


def apply_p1(g: CausalGraph) -> CausalGraph:
    """Delete the direct history->answer edge (the shortcut removal step)."""
    return g.without_edge(HISTORY, ANSWER)


def apply_p2(g: CausalGraph) -> CausalGraph:
    """Insert the latent user-preference node U with edges H->U, U->Q, U->A."""
    for required in (HISTORY, QUESTION, ANSWER):
        g.require_node(required)
    return g.with_node(
        PREFERENCE,
        [(HISTORY, PREFERENCE), (PREFERENCE, QUESTION), (PREFERENCE, ANSWER)],
    )


def build_proposed_graph() -> CausalGraph:
    """Baseline graph with both surgery steps applied."""
    return apply_p2(apply_p1(build_baseline_graph()))


# -- path and separation analysis --------------------------------------------


def _skeleton_steps(g: CausalGraph, n: NodeId) -> list[tuple[NodeId, bool]]:
    """Neighbors of ``n`` with direction flags (True = edge n->neighbor)."""
    out = [(c, True) for c in g.children(n)]
    out += [(p, False) for p in g.parents(n)]
    return sorted(out)


def all_simple_paths(g: CausalGraph, x: NodeId, y: NodeId) -> list[Path]:
    """Every simple path between ``x`` and ``y`` in the skeleton, direction-tagged.

    Deterministically ordered (lexicographic by node sequence).
    """
    g.require_node(x)
    g.require_node(y)
    results: list[Path] = []

    def dfs(node: NodeId, steps: list[PathStep], visited: set[NodeId]) -> None:
        if node == y:
            results.append(tuple(steps + [PathStep(y, None)]))
            return
        for nxt, fwd in _skeleton_steps(g, node):
            if nxt in visited:
                continue
            visited.add(nxt)
            dfs(nxt, steps + [PathStep(node, fwd)], visited)
            visited.remove(nxt)

    dfs(x, [], {x})
    results.sort(key=lambda p: tuple(s.node for s in p))
    return results


def backdoor_paths(g: CausalGraph, x: NodeId, y: NodeId) -> list[Path]:
    """All simple paths from ``x`` to ``y`` whose first edge points into ``x``."""
    if x == y:
        raise GraphError("x and y must differ")
    return [p for p in all_simple_paths(g, x, y) if p[0].forward is False]


def path_blocked(g: CausalGraph, path: Path, z: Iterable[NodeId]) -> bool:
    """Whether ``z`` blocks ``path`` under chain/fork/collider rules.

    A collider on the path is open iff it or one of its descendants is in
    ``z``; any other node blocks when it is in ``z``.  Endpoint nodes are
    never tested.
    """
    zset = frozenset(z)
    for i in range(1, len(path) - 1):
        node = path[i].node
        into_from_left = path[i - 1].forward is True
        into_from_right = path[i].forward is False
        if into_from_left and into_from_right:  # collider
            if not ({node} | set(g.descendants(node))) & zset:
                return True
        else:
            if node in zset:
                return True
    return False


def d_separated(g: CausalGraph, x: NodeId, y: NodeId, z: Iterable[NodeId]) -> bool:
    """Whether ``x`` and ``y`` are d-separated by ``z``.

    Linear-time reachability over (node, direction) states; a node is
    reachable "downward" when entered along an edge and "upward" when
    entered against one.
    """
    g.require_node(x)
    g.require_node(y)
    zset = frozenset(z)
    for n in zset:
        g.require_node(n)
    if x in zset or y in zset:
        raise GraphError("x and y must not be members of z")
    if x == y:
        raise GraphError("x and y must differ")

    # Ancestors of z (including z) open colliders.
    anc_z: set[NodeId] = set(zset)
    stack = list(zset)
    while stack:
        n = stack.pop()
        for p in g.parents(n):
            if p not in anc_z:
                anc_z.add(p)
                stack.append(p)

    UP, DOWN = 0, 1  # UP: entered from a child (or start), DOWN: from a parent
    visited: set[tuple[NodeId, int]] = set()
    frontier: deque[tuple[NodeId, int]] = deque([(x, UP)])
    while frontier:
        node, direction = frontier.popleft()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node == y:
            return False
        if direction == UP:
            if node not in zset:
                for p in g.parents(node):
                    frontier.append((p, UP))
                for c in g.children(node):
                    frontier.append((c, DOWN))
        else:
            if node not in zset:
                for c in g.children(node):
                    frontier.append((c, DOWN))
            if node in anc_z:
                for p in g.parents(node):
                    frontier.append((p, UP))
    return True


def satisfies_backdoor(g: CausalGraph, x: NodeId, y: NodeId, z: Iterable[NodeId]) -> bool:
    """Backdoor criterion: z has no descendants of x and blocks every backdoor path."""
    g.require_node(x)
    g.require_node(y)
    zset = frozenset(z)
    for n in zset:
        g.require_node(n)
    if x in zset or y in zset:
        raise GraphError("x and y must not be members of z")
    if zset & set(g.descendants(x)):
        return False
    return all(path_blocked(g, p, zset) for p in backdoor_paths(g, x, y))
