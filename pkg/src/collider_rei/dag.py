"""Causal DAGs: construction, mutilation, d-separation and do-calculus rule checks.

Nodes are case-sensitive strings. Every iteration over nodes follows the
declaration order, which makes witness paths and printed output reproducible.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .errors import CycleError, DuplicateEdgeError, OverlapError, UnknownNodeError

NodeLike = Union[str, Iterable[str]]


class Dag:
    """Immutable directed acyclic graph over named variables."""

    __slots__ = ("_nodes", "_edges", "_index", "_parents", "_children", "_topo")

    def __init__(self, nodes, edges):
        nodes = tuple(nodes)
        if len(set(nodes)) != len(nodes):
            dup = sorted({n for n in nodes if nodes.count(n) > 1})
            raise ValueError(f"duplicate node names: {dup}")
        for n in nodes:
            if not isinstance(n, str) or not n:
                raise ValueError(f"node names must be nonempty strings, got {n!r}")
        index = {n: i for i, n in enumerate(nodes)}
        seen = set()
        parents = {n: [] for n in nodes}
        children = {n: [] for n in nodes}
        for edge in edges:
            a, b = tuple(edge)
            for end in (a, b):
                if end not in index:
                    raise UnknownNodeError(f"edge ({a!r}, {b!r}) references undeclared node {end!r}")
            if (a, b) in seen:
                raise DuplicateEdgeError(f"duplicate edge ({a!r}, {b!r})")
            if a == b:
                raise CycleError([a, a])
            seen.add((a, b))
            parents[b].append(a)
            children[a].append(b)
        key = index.__getitem__
        self._nodes = nodes
        self._edges = frozenset(seen)
        self._index = index
        self._parents = {n: tuple(sorted(ps, key=key)) for n, ps in parents.items()}
        self._children = {n: tuple(sorted(cs, key=key)) for n, cs in children.items()}
        self._topo = self._toposort()

    def _toposort(self):
        indeg = {n: len(self._parents[n]) for n in self._nodes}
        ready = [n for n in self._nodes if indeg[n] == 0]
        order = []
        while ready:
            # smallest declared index first keeps the order deterministic
            ready.sort(key=self._index.__getitem__, reverse=True)
            n = ready.pop()
            order.append(n)
            for c in self._children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self._nodes):
            raise CycleError(self._find_cycle({n for n in self._nodes if indeg[n] > 0}))
        return tuple(order)

    def _find_cycle(self, candidates):
        start = min(candidates, key=self._index.__getitem__)
        path, pos = [], {}
        node = start
        # every node left over by Kahn's algorithm has a parent in the leftover set
        while node not in pos:
            pos[node] = len(path)
            path.append(node)
            node = next(p for p in self._parents[node] if p in candidates)
        cycle = path[pos[node]:][::-1]
        return cycle + [cycle[0]]

    @property
    def nodes(self) -> tuple:
        return self._nodes

    @property
    def edges(self) -> frozenset:
        return self._edges

    @property
    def topological_order(self) -> tuple:
        return self._topo

    def sorted_edges(self) -> list:
        key = self._index.__getitem__
        return sorted(self._edges, key=lambda e: (key(e[0]), key(e[1])))

    def index(self, node: str) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise UnknownNodeError(f"unknown node {node!r}") from None

    def parents_of(self, node: str) -> tuple:
        self.index(node)
        return self._parents[node]

    def children_of(self, node: str) -> tuple:
        self.index(node)
        return self._children[node]

    def neighbors_of(self, node: str) -> tuple:
        return tuple(sorted(self._parents[node] + self._children[node], key=self._index.__getitem__))

    def order(self, nodes: Iterable[str]) -> list:
        """Return ``nodes`` sorted by declaration order."""
        return sorted(nodes, key=self.index)

    def __contains__(self, node) -> bool:
        return node in self._index

    def __eq__(self, other):
        if not isinstance(other, Dag):
            return NotImplemented
        return self._nodes == other._nodes and self._edges == other._edges

    def __hash__(self):
        return hash((self._nodes, self._edges))

    def __repr__(self):
        edges = ", ".join(f"{a}->{b}" for a, b in self.sorted_edges())
        return f"Dag(nodes={list(self._nodes)}, edges=[{edges}])"


def build_dag(nodes, edges=()) -> Dag:
    """Validate and build a DAG.

    >>> g = build_dag(["y1", "y2", "x"], [("y1", "x"), ("y2", "x")])
    >>> g.topological_order
    ('y1', 'y2', 'x')
    """
    return Dag(nodes, edges)


def node_set(g: Dag, nodes: Optional[NodeLike]) -> frozenset:
    """Coerce ``nodes`` (a name, an iterable of names or None) into a validated frozenset."""
    if nodes is None:
        return frozenset()
    if isinstance(nodes, str):
        nodes = (nodes,)
    out = frozenset(nodes)
    for n in out:
        g.index(n)
    return out


def parents(g: Dag, node: str) -> frozenset:
    return frozenset(g.parents_of(node))


def children(g: Dag, node: str) -> frozenset:
    return frozenset(g.children_of(node))


def descendants(g: Dag, node: str) -> frozenset:
    """Nodes reachable from ``node`` along directed edges, excluding ``node``."""
    g.index(node)
    seen = set()
    stack = list(g.children_of(node))
    while stack:
        n = stack.pop()
        if n not in seen:
            seen.add(n)
            stack.extend(g.children_of(n))
    return frozenset(seen)


def ancestors(g: Dag, node: str) -> frozenset:
    """Nodes with a directed path into ``node``, excluding ``node``."""
    g.index(node)
    seen = set()
    stack = list(g.parents_of(node))
    while stack:
        n = stack.pop()
        if n not in seen:
            seen.add(n)
            stack.extend(g.parents_of(n))
    return frozenset(seen)


def ancestors_of_set(g: Dag, nodes: Iterable[str]) -> frozenset:
    """``nodes`` together with all of their ancestors."""
    out = set()
    for n in nodes:
        out.add(n)
        out |= ancestors(g, n)
    return frozenset(out)


def mutilate(g: Dag, remove_incoming=(), remove_outgoing=()) -> Dag:
    """Delete arrows into ``remove_incoming`` and out of ``remove_outgoing``.

    ``mutilate(g, {"x"})`` is the graph usually written with a bar over X and
    ``mutilate(g, (), {"z"})`` the one with a bar under Z.
    """
    inc = node_set(g, remove_incoming)
    out = node_set(g, remove_outgoing)
    kept = [(a, b) for a, b in g.sorted_edges() if b not in inc and a not in out]
    return Dag(g.nodes, kept)


@dataclass(frozen=True)
class DSepVerdict:
    separated: bool
    witness_path: Optional[tuple] = None

    def __post_init__(self):
        if self.separated != (self.witness_path is None):
            raise ValueError("witness_path must be given exactly when not separated")

    def __bool__(self):
        return self.separated


def _check_query(g, x, y, z, require_nonempty=True):
    x, y, z = node_set(g, x), node_set(g, y), node_set(g, z)
    if require_nonempty and (not x or not y):
        raise ValueError("x and y must be nonempty")
    for a, b, name in ((x, y, "x/y"), (x, z, "x/z"), (y, z, "y/z")):
        common = a & b
        if common:
            raise OverlapError(f"{name} overlap on {g.order(common)}")
    return x, y, z


# Bayes-ball states: (node, UP) means the trail arrived from a child,
# (node, DOWN) means it arrived from a parent.
UP, DOWN = 0, 1


def _moves(g, node, direction, z, anz):
    """Successor states of a Bayes-ball state, in declaration order of the target node."""
    out = []
    if direction == UP:
        if node not in z:
            out.extend((p, UP) for p in g.parents_of(node))
            out.extend((c, DOWN) for c in g.children_of(node))
    else:
        if node not in z:
            out.extend((c, DOWN) for c in g.children_of(node))
        if node in anz:
            out.extend((p, UP) for p in g.parents_of(node))
    out.sort(key=lambda s: g.index(s[0]))
    return out


def _states_reaching(g, y, z, anz):
    """All Bayes-ball states from which some node of ``y`` can be reached."""
    reverse = {}
    for n in g.nodes:
        for d in (UP, DOWN):
            for nxt in _moves(g, n, d, z, anz):
                reverse.setdefault(nxt, []).append((n, d))
    good = {(n, d) for n in y for d in (UP, DOWN)}
    queue = deque(good)
    while queue:
        s = queue.popleft()
        for prev in reverse.get(s, ()):
            if prev not in good:
                good.add(prev)
                queue.append(prev)
    return good


def reachable(g: Dag, x, z) -> frozenset:
    """Nodes d-connected to some node of ``x`` given ``z`` (Bayes-ball reachability)."""
    x, z = node_set(g, x), node_set(g, z)
    anz = ancestors_of_set(g, z)
    seen = set()
    queue = deque((n, UP) for n in g.order(x))
    while queue:
        s = queue.popleft()
        if s in seen:
            continue
        seen.add(s)
        queue.extend(_moves(g, s[0], s[1], z, anz))
    return frozenset(n for n, _ in seen if n not in z) - x


def d_separated(g: Dag, x, y, z=()) -> DSepVerdict:
    """Decide whether ``z`` blocks every path between ``x`` and ``y``.

    The verdict comes from Bayes-ball reachability. When the sets are
    connected, the witness is the lexicographically first (by declaration
    order) unblocked simple path, found by a depth-first search that is
    pruned to states from which ``y`` is still reachable.
    """
    x, y, z = _check_query(g, x, y, z)
    if not (reachable(g, x, z) & y):
        return DSepVerdict(True)
    anz = ancestors_of_set(g, z)
    good = _states_reaching(g, y, z, anz)

    def search(path, on_path, state):
        for nxt in _moves(g, state[0], state[1], z, anz):
            w = nxt[0]
            if w in on_path or nxt not in good:
                continue
            path.append(w)
            if w in y:
                return True
            on_path.add(w)
            if search(path, on_path, nxt):
                return True
            on_path.discard(w)
            path.pop()
        return False

    for start in g.order(x):
        path = [start]
        if search(path, {start}, (start, UP)):
            return DSepVerdict(False, tuple(path))
    raise AssertionError("reachability and path search disagree")  # pragma: no cover


def path_is_blocked(g: Dag, path, z, _opens=None) -> bool:
    """Blocking test for one explicit path, straight from the definition.

    ``_opens`` may carry the precomputed set of nodes that are in ``z`` or
    have a descendant in ``z``; it only saves recomputation.
    """
    if _opens is None:
        z = node_set(g, z)
    for i in range(1, len(path) - 1):
        a, m, b = path[i - 1], path[i], path[i + 1]
        collider = (a, m) in g.edges and (b, m) in g.edges
        if collider:
            opened = m in _opens if _opens is not None else (m in z or bool(descendants(g, m) & z))
            if not opened:
                return True
        elif m in z:
            return True
    return False


def all_simple_paths(g: Dag, source: str, targets) -> list:
    """Every simple path in the skeleton from ``source`` to any node of ``targets``."""
    targets = node_set(g, targets)
    nbrs = {v: g.neighbors_of(v) for v in g.nodes}
    out = []

    def walk(path, on_path):
        last = path[-1]
        for w in nbrs[last]:
            if w in on_path:
                continue
            path.append(w)
            if w in targets:
                out.append(tuple(path))
            on_path.add(w)
            walk(path, on_path)
            on_path.discard(w)
            path.pop()

    walk([source], {source})
    return out


def d_separated_by_enumeration(g: Dag, x, y, z=()) -> DSepVerdict:
    """Exhaustive reference: enumerate every simple path and test each one.

    Exponential in the graph size; intended for graphs of a dozen nodes.
    """
    x, y, z = _check_query(g, x, y, z)
    key = lambda p: [g.index(n) for n in p]
    opens = frozenset(m for m in g.nodes if m in z or descendants(g, m) & z)
    open_paths = [p for s in x for p in all_simple_paths(g, s, y) if not path_is_blocked(g, p, z, opens)]
    if not open_paths:
        return DSepVerdict(True)
    return DSepVerdict(False, min(open_paths, key=key))


def format_path(g: Dag, path) -> str:
    """Render a path with arrows matching the edge directions, e.g. ``y1 → x ← y2``."""
    parts = [path[0]]
    for a, b in zip(path, path[1:]):
        parts.append("→" if (a, b) in g.edges else "←")
        parts.append(b)
    return " ".join(parts)


class Rule(enum.Enum):
    RULE1 = 1
    RULE2 = 2
    RULE3 = 3

    @classmethod
    def coerce(cls, value) -> "Rule":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            text = value.strip().lower().replace("rule", "").strip(" _")
            return cls(int(text))
        return cls(int(value))


@dataclass(frozen=True)
class RuleCheck:
    rule: Rule
    applicable: bool
    mutilated_graph_summary: dict = field(default_factory=dict)
    verdict: Optional[DSepVerdict] = None


def check_rule(g: Dag, rule, x=(), y=(), z=(), w=(), strict_rule3: bool = False) -> RuleCheck:
    """Test the graphical condition of one do-calculus rule.

    Rule 1: (Y ⊥ Z | X, W) after removing arrows into X.
    Rule 2: (Y ⊥ Z | X, W) after removing arrows into X and out of Z.
    Rule 3: (Y ⊥ Z | X, W) after removing arrows into X and Z. With
    ``strict_rule3`` only the members of Z that are not ancestors of W in the
    X-mutilated graph lose their incoming arrows.
    """
    rule = Rule.coerce(rule)
    x, y, z = _check_query(g, x, y, z, require_nonempty=False)
    w = node_set(g, w)
    for other, name in ((x, "x"), (y, "y"), (z, "z")):
        if w & other:
            raise OverlapError(f"w/{name} overlap on {g.order(w & other)}")
    if rule is Rule.RULE1:
        inc, out = x, frozenset()
    elif rule is Rule.RULE2:
        inc, out = x, z
    else:
        zs = z
        if strict_rule3:
            gx = mutilate(g, x)
            zs = z - ancestors_of_set(gx, w)
        inc, out = x | zs, frozenset()
    h = mutilate(g, inc, out)
    removed_in = sum(1 for a, b in g.edges if b in inc)
    removed_out = sum(1 for a, b in g.edges if a in out and b not in inc)
    summary = {"removed_incoming": removed_in, "removed_outgoing": removed_out,
               "edges_before": len(g.edges), "edges_after": len(h.edges)}
    if not y or not z:
        return RuleCheck(rule, True, summary, None)
    verdict = d_separated(h, y, z, x | w)
    return RuleCheck(rule, verdict.separated, summary, verdict)


def collider_dag(n_factors: int = 2, noise: bool = True, effect: str = "x") -> Dag:
    """The collider of factors ``y1..yn`` (and optional nuisance ``u_x``) into ``effect``."""
    roots = [f"y{i + 1}" for i in range(n_factors)] + (["u_x"] if noise else [])
    return Dag(roots + [effect], [(r, effect) for r in roots])


def random_dag(rng, n_nodes: int, edge_prob: float = 0.4, prefix: str = "v") -> Dag:
    """Random DAG whose edges respect a random permutation of ``v0..v{n-1}``."""
    import numpy as np

    rng = np.random.default_rng(rng)
    nodes = [f"{prefix}{i}" for i in range(n_nodes)]
    perm = rng.permutation(n_nodes)
    edges = [(nodes[perm[i]], nodes[perm[j]]) for i in range(n_nodes) for j in range(i + 1, n_nodes)
             if rng.random() < edge_prob]
    return Dag(nodes, edges)


def dag_to_dict(g: Dag) -> dict:
    return {"nodes": list(g.nodes), "edges": [list(e) for e in sorted(g.edges)]}


def dag_from_dict(obj: dict) -> Dag:
    if not isinstance(obj, dict) or "nodes" not in obj:
        raise ValueError("DAG object needs a 'nodes' list")
    unknown = set(obj) - {"nodes", "edges"}
    if unknown:
        raise ValueError(f"unknown DAG keys: {sorted(unknown)}")
    return Dag(obj["nodes"], [tuple(e) for e in obj.get("edges", [])])


def dumps_dag(g: Dag) -> str:
    return json.dumps(dag_to_dict(g), sort_keys=True, indent=2) + "\n"


def save_dag(g: Dag, path) -> None:
    Path(path).write_text(dumps_dag(g), encoding="utf-8")


def load_dag(path) -> Dag:
    return dag_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
