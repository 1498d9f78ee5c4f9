"""Exact discrete probability engine.

Joint tables are dense numpy arrays with one axis per variable, so the
mixed-radix cell index follows the variable order of the table. Everything
here is exact enumeration in double precision; it is the ground truth that
the identification formulas are checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import dag as dg
from .errors import (
    BadStateError,
    ModelShapeError,
    NotAColliderError,
    OverlapError,
    StateSpaceTooLarge,
    UnknownNodeError,
    ZeroProbabilityEvidence,
)

MAX_CELLS = 10**7
TOL = 1e-12


@dataclass(frozen=True)
class VarSpec:
    name: str
    cardinality: int

    def __post_init__(self):
        if int(self.cardinality) < 1:
            raise ValueError(f"cardinality of {self.name!r} must be >= 1")


@dataclass(frozen=True, eq=False)
class Cpt:
    """p(child | parents); ``table`` has one axis per parent followed by the child axis."""

    child: str
    parents: tuple
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        object.__setattr__(self, "parents", tuple(self.parents))
        object.__setattr__(self, "table", table)
        if table.ndim != len(self.parents) + 1:
            raise ModelShapeError(f"CPT of {self.child!r}: table rank {table.ndim} does not match "
                                  f"{len(self.parents)} parents")
        if np.any(table < 0) or np.any(table > 1):
            raise ValueError(f"CPT of {self.child!r} has entries outside [0, 1]")
        if np.any(np.abs(table.sum(axis=-1) - 1.0) > TOL):
            raise ValueError(f"CPT rows of {self.child!r} do not sum to 1")

    def rows(self) -> np.ndarray:
        """Rows in lexicographic order of the parent states."""
        return self.table.reshape(-1, self.table.shape[-1])


class DiscreteModel:
    """A DAG with one CPT per node.

    ``latent`` names nodes whose values are not available to adjustment
    formulas (they still take part in the generative process).
    """

    def __init__(self, dag: dg.Dag, vars, cpts, latent=()):
        self.dag = dag
        self.vars = tuple(vars)
        names = [v.name for v in self.vars]
        if sorted(names) != sorted(dag.nodes) or len(set(names)) != len(names):
            raise ModelShapeError("variables must match the DAG nodes one to one")
        self.card = {v.name: int(v.cardinality) for v in self.vars}
        cpts = dict(cpts) if isinstance(cpts, Mapping) else {c.child: c for c in cpts}
        if set(cpts) != set(names):
            raise ModelShapeError("need exactly one CPT per node")
        for name, cpt in cpts.items():
            if set(cpt.parents) != set(dag.parents_of(name)) or len(cpt.parents) != len(dag.parents_of(name)):
                raise ModelShapeError(f"CPT parents of {name!r} {list(cpt.parents)} differ from "
                                      f"DAG parents {list(dag.parents_of(name))}")
            want = tuple(self.card[p] for p in cpt.parents) + (self.card[name],)
            if cpt.table.shape != want:
                raise ModelShapeError(f"CPT of {name!r} has shape {cpt.table.shape}, expected {want}")
        self.cpts = cpts
        self.latent = dg.node_set(dag, latent)

    @property
    def names(self) -> tuple:
        return tuple(v.name for v in self.vars)

    def n_cells(self) -> int:
        return int(np.prod([v.cardinality for v in self.vars], dtype=object))


@dataclass(frozen=True, eq=False)
class JointTable:
    vars: tuple
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(self.vars))
        probs = np.asarray(self.probs, dtype=float)
        shape = tuple(v.cardinality for v in self.vars)
        if probs.shape != shape:
            raise ModelShapeError(f"probs shape {probs.shape} does not match variables {shape}")
        object.__setattr__(self, "probs", probs)

    @property
    def names(self) -> tuple:
        return tuple(v.name for v in self.vars)

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownNodeError(f"{name!r} is not a variable of this table") from None

    def total(self) -> float:
        return float(self.probs.sum())

    def prob(self, assignment: Mapping[str, int]) -> float:
        """Probability of a (possibly partial) assignment."""
        t = marginalize(self, list(assignment))
        return float(t.probs[tuple(int(assignment[n]) for n in t.names)])

    def vector(self, name: str) -> np.ndarray:
        """Marginal distribution of a single variable."""
        return marginalize(self, [name]).probs.copy()


def _check_cells(vars):
    cells = int(np.prod([v.cardinality for v in vars], dtype=object))
    if cells > MAX_CELLS:
        raise StateSpaceTooLarge(f"state space of {cells} cells exceeds {MAX_CELLS}")


def _broadcast_factor(model: DiscreteModel, cpt: Cpt) -> np.ndarray:
    """CPT reshaped so it broadcasts against the full joint array."""
    axes = list(cpt.parents) + [cpt.child]
    pos = [model.names.index(a) for a in axes]
    order = np.argsort(pos)
    table = np.transpose(cpt.table, order)
    shape = [1] * len(model.vars)
    for a in axes:
        i = model.names.index(a)
        shape[i] = model.card[a]
    return table.reshape(shape)


def joint_from_model(model: DiscreteModel) -> JointTable:
    """Markov factorization: product of every CPT over the full state space."""
    return intervene_truncated(model, {})


def _check_assignment(model_or_table_names, cards, assignment):
    for name, state in assignment.items():
        if name not in cards:
            raise UnknownNodeError(f"unknown variable {name!r}")
        if not (0 <= int(state) < cards[name]) or int(state) != state:
            raise BadStateError(f"state {state!r} invalid for {name!r} with {cards[name]} states")


def intervene_truncated(model: DiscreteModel, do: Mapping[str, int]) -> JointTable:
    """Truncated factorization for ``do(assignment)``.

    The CPTs of intervened nodes are replaced by point masses at the forced
    states; all other factors are kept. The result is a joint over every
    variable with the intervened ones clamped.
    """
    do = dict(do)
    _check_assignment(model.names, model.card, do)
    _check_cells(model.vars)
    probs = np.ones(tuple(model.card[n] for n in model.names))
    for name in model.names:
        if name in do:
            mask = np.zeros(model.card[name])
            mask[int(do[name])] = 1.0
            shape = [1] * len(model.names)
            shape[model.names.index(name)] = model.card[name]
            probs = probs * mask.reshape(shape)
        else:
            probs = probs * _broadcast_factor(model, model.cpts[name])
    return JointTable(model.vars, probs)


def marginalize(t: JointTable, keep) -> JointTable:
    """Sum out every variable not in ``keep``; the kept variables retain table order."""
    keep = {keep} if isinstance(keep, str) else set(keep)
    for k in keep:
        t.axis(k)
    drop = tuple(i for i, n in enumerate(t.names) if n not in keep)
    vars = tuple(v for v in t.vars if v.name in keep)
    return JointTable(vars, t.probs.sum(axis=drop) if drop else t.probs.copy())


def condition(t: JointTable, evidence: Mapping[str, int]) -> JointTable:
    """Renormalized slice of ``t`` at ``evidence``, over the remaining variables."""
    evidence = dict(evidence)
    cards = {v.name: v.cardinality for v in t.vars}
    _check_assignment(t.names, cards, evidence)
    index = tuple(int(evidence[n]) if n in evidence else slice(None) for n in t.names)
    sliced = t.probs[index]
    mass = float(sliced.sum())
    if not mass > 0.0:
        raise ZeroProbabilityEvidence(f"evidence {evidence} has probability zero")
    vars = tuple(v for v in t.vars if v.name not in evidence)
    return JointTable(vars, sliced / mass)


def _ordered(t: JointTable, names) -> np.ndarray:
    """Marginal of ``t`` over ``names`` with axes in exactly that order."""
    m = marginalize(t, names)
    perm = [m.names.index(n) for n in names]
    return np.transpose(m.probs, perm) if perm else m.probs


def conditional_mutual_information(t: JointTable, x, y, z=()) -> float:
    """I(X; Y | Z) in nats, computed exactly from the table."""
    x, y, z = [[s] if isinstance(s, str) else list(s) for s in (x, y, z)]
    sx, sy, sz = set(x), set(y), set(z)
    if (sx & sy) or (sx & sz) or (sy & sz):
        raise OverlapError("x, y and z must be disjoint")
    if not x or not y:
        return 0.0
    nx, ny = len(x), len(y)
    p = _ordered(t, x + y + z)
    x_axes = tuple(range(nx))
    y_axes = tuple(range(nx, nx + ny))
    p_xz = p.sum(axis=y_axes, keepdims=True)
    p_yz = p.sum(axis=x_axes, keepdims=True)
    p_z = p.sum(axis=x_axes + y_axes, keepdims=True)
    pos = p > 0
    num = p * p_z
    den = p_xz * p_yz
    terms = np.where(pos, p * (np.log(np.where(pos, num, 1.0)) - np.log(np.where(pos, den, 1.0))), 0.0)
    return max(float(terms.sum()), 0.0)


# ---------------------------------------------------------------------------
# identification on collider models


def collider_conditions(model: DiscreteModel, cause: str, effect: str) -> list:
    """Names and details of the graphical conditions the collider adjustment needs that fail."""
    g = model.dag
    g.index(cause)
    g.index(effect)
    if cause == effect:
        raise ValueError("cause and effect must differ")
    failures = []
    bad = []
    for n in g.nodes:
        if n == effect:
            if g.children_of(n):
                bad.append(f"{n!r} has children {list(g.children_of(n))}")
            continue
        if g.parents_of(n) or g.children_of(n) != (effect,):
            bad.append(f"{n!r} is not a root whose only child is {effect!r}")
    if bad:
        failures.append(("pure collider", "; ".join(bad)))
    adjust = [n for n in g.nodes if n not in (cause, effect) and n not in model.latent]
    rc = dg.check_rule(g, dg.Rule.RULE2, x=(), y={effect}, z={cause}, w=adjust)
    if not rc.applicable:
        failures.append(("Rule 2", "open path " + dg.format_path(g, rc.verdict.witness_path)
                         + f" after removing arrows out of {cause!r}"))
    desc = dg.descendants(g, cause) & set(adjust)
    if desc:
        failures.append(("non-descendant", f"adjustment set contains descendants {g.order(desc)} of {cause!r}"))
    if cause in model.latent or effect in model.latent:
        failures.append(("observed", "cause and effect must be observed"))
    return failures


def adjust_collider(model: DiscreteModel, cause: str, effect: str) -> np.ndarray:
    """p(effect | do(cause)) by the collider adjustment.

    Sums p(effect | cause, w) p(w) over the joint of every other observed
    variable ``w``, using only observational tables. Returns an array indexed
    ``[cause_state, effect_state]``.
    """
    failures = collider_conditions(model, cause, effect)
    if failures:
        msg = "; ".join(f"{name} condition fails: {detail}" for name, detail in failures)
        raise NotAColliderError(msg, [name for name, _ in failures])
    joint = joint_from_model(model)
    rest = [n for n in model.names if n not in (cause, effect) and n not in model.latent]
    p = _ordered(joint, rest + [cause, effect])  # (*w, cause, effect)
    p_wc = p.sum(axis=-1, keepdims=True)
    p_w = p_wc.sum(axis=-2, keepdims=True)
    if np.any((p_w > 0) & (p_wc <= 0)):
        raise ZeroProbabilityEvidence(f"p({cause}, w) = 0 for some w with p(w) > 0; positivity fails")
    cond = np.divide(p, p_wc, out=np.zeros_like(p), where=p_wc > 0)
    out = (cond * p_w).sum(axis=tuple(range(len(rest))))
    return out


def truncated_effect(model: DiscreteModel, cause: str, effect: str) -> np.ndarray:
    """Ground truth p(effect | do(cause)) for every cause state, by truncated factorization."""
    rows = []
    for c in range(model.card[cause]):
        t = intervene_truncated(model, {cause: c})
        rows.append(marginalize(t, [effect]).probs)
    return np.array(rows)


def _posterior_shape(model: DiscreteModel, cause: str, latent: str, effect: str):
    g = model.dag
    for n in (cause, latent, effect):
        if n not in g:
            raise UnknownNodeError(f"unknown node {n!r}")
    factors = list(g.parents_of(latent))
    if cause not in factors:
        raise ModelShapeError(f"{cause!r} must be a parent of {latent!r}")
    noise = [p for p in g.parents_of(effect) if p != latent]
    if latent not in g.parents_of(effect):
        raise ModelShapeError(f"{latent!r} must be a parent of {effect!r}")
    for n in g.nodes:
        if n in (latent, effect):
            continue
        if g.parents_of(n):
            raise ModelShapeError(f"{n!r} must be a root")
        kids = g.children_of(n)
        if kids not in ((latent,), (effect,)):
            raise ModelShapeError(f"root {n!r} must feed exactly one of {latent!r} or {effect!r}")
    if g.children_of(latent) != (effect,) or g.children_of(effect):
        raise ModelShapeError(f"expected {latent!r} -> {effect!r} with {effect!r} a sink")
    return factors, noise


def interventional_posterior(model: DiscreteModel, cause: str, cause_state: int, x_state: int,
                             latent: str = "z", effect: str = "x") -> np.ndarray:
    """p(latent | effect = x_state, do(cause = cause_state)) from observational tables.

    Evaluates p(x | z) E_{p(y_-c)}[p(z | y)] / p(x | y_c), where the
    expectation runs over the factors other than ``cause`` and the
    normalizer is the observational p(x | y_c), which equals p(x | do(y_c))
    in this model class.
    """
    factors, _ = _posterior_shape(model, cause, latent, effect)
    _check_assignment(model.names, model.card, {cause: cause_state, effect: x_state})
    joint = joint_from_model(model)
    p_xz = _ordered(joint, [effect, latent])
    p_z = p_xz.sum(axis=0)
    lik = np.divide(p_xz[x_state], p_z, out=np.zeros_like(p_z), where=p_z > 0)  # p(x|z)

    others = [f for f in factors if f != cause]
    p_yz = _ordered(joint, [cause] + others + [latent])
    p_y = p_yz.sum(axis=-1, keepdims=True)
    p_z_given_y = np.divide(p_yz, p_y, out=np.zeros_like(p_yz), where=p_y > 0)[cause_state]
    p_others = _ordered(joint, others) if others else np.array(1.0)
    mix = (p_z_given_y * p_others[..., None]).sum(axis=tuple(range(len(others))))

    p_xc = _ordered(joint, [cause, effect])
    p_c = p_xc.sum(axis=1)
    if p_c[cause_state] <= 0 or p_xc[cause_state, x_state] <= 0:
        raise ZeroProbabilityEvidence(f"p({effect}={x_state}, {cause}={cause_state}) = 0")
    norm = p_xc[cause_state, x_state] / p_c[cause_state]
    return lik * mix / norm


def interventional_posterior_truth(model: DiscreteModel, cause: str, cause_state: int, x_state: int,
                                   latent: str = "z", effect: str = "x") -> np.ndarray:
    """Ground truth for :func:`interventional_posterior`: truncate, condition, marginalize."""
    t = intervene_truncated(model, {cause: cause_state})
    t = condition(t, {effect: x_state})
    return marginalize(t, [latent]).probs


# ---------------------------------------------------------------------------
# model construction helpers


def dirichlet_rows(rng: np.random.Generator, n_rows: int, k: int) -> np.ndarray:
    """Rows drawn from a flat Dirichlet, renormalized so each sums to 1 exactly enough."""
    rows = rng.dirichlet(np.ones(k), size=n_rows)
    return rows / rows.sum(axis=1, keepdims=True)


def random_model(g: dg.Dag, cards: Mapping[str, int], rng, latent=()) -> DiscreteModel:
    """Model on ``g`` with every CPT row drawn from a flat Dirichlet."""
    rng = np.random.default_rng(rng)
    vars = [VarSpec(n, int(cards[n])) for n in g.nodes]
    cpts = {}
    for n in g.nodes:
        ps = g.parents_of(n)
        shape = tuple(int(cards[p]) for p in ps)
        rows = dirichlet_rows(rng, int(np.prod(shape, dtype=int)), int(cards[n]))
        cpts[n] = Cpt(n, ps, rows.reshape(shape + (int(cards[n]),)))
    return DiscreteModel(g, vars, cpts, latent)


def random_collider_model(rng, max_roots: int = 5, max_states: int = 4, effect: str = "x") -> DiscreteModel:
    """Random pure collider: 2..max_roots roots each pointing into ``effect``."""
    rng = np.random.default_rng(rng)
    n = int(rng.integers(2, max_roots + 1))
    roots = [f"y{i + 1}" for i in range(n - 1)] + ["u_x"]
    g = dg.Dag(roots + [effect], [(r, effect) for r in roots])
    cards = {r: int(rng.integers(2, max_states + 1)) for r in roots + [effect]}
    return random_model(g, cards, rng)


def latent_collider_dag(n_factors: int = 2, noise: bool = True) -> dg.Dag:
    """Factors ``y1..yn`` into a latent ``z`` that drives ``x``, with optional ``u_x -> x``."""
    ys = [f"y{i + 1}" for i in range(n_factors)]
    nodes = ys + (["u_x"] if noise else []) + ["z", "x"]
    edges = [(y, "z") for y in ys] + [("z", "x")] + ([("u_x", "x")] if noise else [])
    return dg.Dag(nodes, edges)


def random_latent_model(rng, n_factors: Optional[int] = None, max_states: int = 3,
                        noise: Optional[bool] = None) -> DiscreteModel:
    rng = np.random.default_rng(rng)
    if n_factors is None:
        n_factors = int(rng.integers(1, 4))
    if noise is None:
        noise = bool(rng.integers(0, 2))
    g = latent_collider_dag(n_factors, noise)
    cards = {n: int(rng.integers(2, max_states + 1)) for n in g.nodes}
    return random_model(g, cards, rng)


def deterministic_cpt(child: str, parents, parent_cards, child_card: int, fn) -> Cpt:
    """CPT putting all mass on ``fn(*parent_states)``."""
    shape = tuple(parent_cards) + (child_card,)
    table = np.zeros(shape)
    for idx in np.ndindex(*parent_cards):
        table[idx + (int(fn(*idx)),)] = 1.0
    return Cpt(child, parents, table)


def or_gate_model() -> DiscreteModel:
    """Two fair coins ``y1``, ``y2`` and ``x = y1 OR y2``."""
    g = dg.Dag(["y1", "y2", "x"], [("y1", "x"), ("y2", "x")])
    vars = [VarSpec("y1", 2), VarSpec("y2", 2), VarSpec("x", 2)]
    coin = np.array([0.5, 0.5])
    cpts = [Cpt("y1", (), coin), Cpt("y2", (), coin),
            deterministic_cpt("x", ("y1", "y2"), (2, 2), 2, lambda a, b: a | b)]
    return DiscreteModel(g, vars, cpts)


# ---------------------------------------------------------------------------
# file format


def model_to_dict(model: DiscreteModel) -> dict:
    out = {
        "dag": dg.dag_to_dict(model.dag),
        "vars": [{"name": v.name, "cardinality": v.cardinality} for v in model.vars],
        "cpts": {n: {"parents": list(c.parents), "rows": c.rows().tolist()} for n, c in model.cpts.items()},
    }
    if model.latent:
        out["latent"] = model.dag.order(model.latent)
    return out


def model_from_dict(obj: dict) -> DiscreteModel:
    unknown = set(obj) - {"dag", "vars", "cpts", "latent"}
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    g = dg.dag_from_dict(obj["dag"])
    vars = [VarSpec(v["name"], int(v["cardinality"])) for v in obj["vars"]]
    card = {v.name: v.cardinality for v in vars}
    cpts = {}
    for child, spec in obj["cpts"].items():
        if child not in card:
            raise UnknownNodeError(f"CPT for undeclared variable {child!r}")
        ps = tuple(spec.get("parents", []))
        for p in ps:
            if p not in card:
                raise UnknownNodeError(f"CPT of {child!r} names undeclared parent {p!r}")
        shape = tuple(card[p] for p in ps) + (card[child],)
        rows = np.asarray(spec["rows"], dtype=float)
        if rows.size != int(np.prod(shape)):
            raise ModelShapeError(f"CPT of {child!r} has {rows.size} entries, expected {int(np.prod(shape))}")
        cpts[child] = Cpt(child, ps, rows.reshape(shape))
    return DiscreteModel(g, vars, cpts, obj.get("latent", ()))


def save_model(model: DiscreteModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_model(path) -> DiscreteModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
