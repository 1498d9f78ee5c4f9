"""Synthetic collider data: factors ``y`` and nuisance ``u`` both feed an observation ``x``.

Factors live on [0, 1]. Correlation between factors is introduced by
rejection sampling: a uniform proposal is kept with probability equal to
the product of Gaussian kernels ``exp(-(y_i - y_j)^2 / (2 sigma^2))`` over
the configured pairs, so smaller ``sigma`` means stronger correlation.
The observation is ``x = tanh(A y) + u`` with a fixed column-orthonormal
mixing matrix ``A`` and Gaussian nuisance ``u``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dag as dg
from .errors import BadSpec, ShapeMismatch
from .oracle import Cpt, DiscreteModel, VarSpec

SPEC_KEYS = ("n_factors", "levels", "corr_pairs", "one_to_all", "noise_std", "obs_dim", "mixing_seed")
SETTINGS = ("uncorr", "pairs:1", "pairs:2", "1-to-all")


@dataclass(frozen=True)
class GenSpec:
    n_factors: int = 3
    levels: Optional[int] = None  # None means continuous uniform factors
    corr_pairs: tuple = ()
    one_to_all: Optional[tuple] = None
    noise_std: float = 0.05
    obs_dim: int = 16
    mixing_seed: int = 0

    def __post_init__(self):
        n = self.n_factors
        if not isinstance(n, int) or n < 1:
            raise BadSpec(f"n_factors must be a positive integer, got {n!r}")
        if self.obs_dim < 1 or self.obs_dim < n:
            raise BadSpec(f"obs_dim must be >= n_factors ({n}), got {self.obs_dim}")
        if self.levels is not None and self.levels < 2:
            raise BadSpec(f"levels must be >= 2 or null, got {self.levels}")
        if not self.noise_std >= 0:
            raise BadSpec(f"noise_std must be nonnegative, got {self.noise_std}")
        pairs = tuple(tuple(p) for p in self.corr_pairs)
        object.__setattr__(self, "corr_pairs", pairs)
        for p in pairs:
            if len(p) != 3:
                raise BadSpec(f"correlated pair must be (i, j, sigma), got {p!r}")
            i, j, s = p
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise BadSpec(f"pair indices must be distinct and in [0, {n}), got ({i}, {j})")
            if not s > 0:
                raise BadSpec(f"sigma must be positive, got {s}")
        if self.one_to_all is not None:
            o = tuple(self.one_to_all)
            object.__setattr__(self, "one_to_all", o)
            if len(o) != 2 or not (0 <= o[0] < n) or not o[1] > 0:
                raise BadSpec(f"one_to_all must be (index in [0, {n}), sigma > 0), got {o!r}")

    def kernel_terms(self) -> list:
        """All (i, j, sigma) kernel factors, the 1-to-all entry expanded."""
        terms = list(self.corr_pairs)
        if self.one_to_all is not None:
            i, s = self.one_to_all
            terms += [(i, j, s) for j in range(self.n_factors) if j != i]
        return terms

    def to_dict(self) -> dict:
        return {"n_factors": self.n_factors, "levels": self.levels,
                "corr_pairs": [list(p) for p in self.corr_pairs],
                "one_to_all": list(self.one_to_all) if self.one_to_all else None,
                "noise_std": self.noise_std, "obs_dim": self.obs_dim, "mixing_seed": self.mixing_seed}

    @classmethod
    def from_dict(cls, obj: dict) -> "GenSpec":
        if not isinstance(obj, dict):
            raise BadSpec("spec must be a JSON object")
        unknown = set(obj) - set(SPEC_KEYS)
        if unknown:
            raise BadSpec(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise BadSpec(str(exc)) from None


def setting_spec(base: GenSpec, setting: str, pair_sigma: float = 0.1, all_sigma: float = 0.2) -> GenSpec:
    """Apply one of the named correlation settings to ``base``.

    ``pairs:2`` correlates (0, 1) and (1, 2) when only three factors exist,
    otherwise the disjoint pairs (0, 1) and (2, 3).
    """
    n = base.n_factors
    if setting == "uncorr":
        pairs, one = (), None
    elif setting == "pairs:1":
        if n < 2:
            raise BadSpec("pairs:1 needs at least two factors")
        pairs, one = ((0, 1, pair_sigma),), None
    elif setting == "pairs:2":
        if n < 3:
            raise BadSpec("pairs:2 needs at least three factors")
        second = (2, 3) if n >= 4 else (1, 2)
        pairs, one = ((0, 1, pair_sigma), second + (pair_sigma,)), None
    elif setting == "1-to-all":
        if n < 2:
            raise BadSpec("1-to-all needs at least two factors")
        pairs, one = (), (0, all_sigma)
    else:
        raise BadSpec(f"unknown correlation setting {setting!r}; expected one of {SETTINGS}")
    d = base.to_dict()
    d.update(corr_pairs=pairs, one_to_all=one)
    return GenSpec.from_dict(d)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    u: Optional[np.ndarray]
    spec: GenSpec
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.y.shape[0] != n or (self.u is not None and self.u.shape[0] != n):
            raise ShapeMismatch("x, y and u must have the same number of rows")
        if self.y.size and (self.y.min() < 0 or self.y.max() > 1):
            raise BadSpec("factor values must lie in [0, 1]")

    def __len__(self):
        return self.x.shape[0]


def _acceptance(spec: GenSpec, y: np.ndarray) -> np.ndarray:
    w = np.ones(y.shape[0])
    for i, j, s in spec.kernel_terms():
        w *= np.exp(-((y[:, i] - y[:, j]) ** 2) / (2.0 * s * s))
    return w


def _propose(spec: GenSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    if spec.levels is None:
        return rng.random((size, spec.n_factors))
    return rng.integers(0, spec.levels, size=(size, spec.n_factors)) / (spec.levels - 1)


def sample_factors(spec: GenSpec, n: int, seed) -> np.ndarray:
    """Draw ``n`` factor rows in [0, 1] by rejection against the correlation kernels."""
    if n < 1:
        raise BadSpec(f"number of samples must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if not spec.kernel_terms():
        return _propose(spec, rng, n)
    out, have = [], 0
    while have < n:
        cand = _propose(spec, rng, max(2 * (n - have), 1024))
        keep = cand[rng.random(cand.shape[0]) < _acceptance(spec, cand)]
        out.append(keep)
        have += keep.shape[0]
    return np.concatenate(out)[:n]


def mixing_matrix(spec: GenSpec) -> np.ndarray:
    """M x n matrix with orthonormal columns drawn from ``mixing_seed``."""
    g = np.random.default_rng(spec.mixing_seed).normal(size=(spec.obs_dim, spec.n_factors))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def render(spec: GenSpec, y: np.ndarray, seed) -> tuple:
    """Return ``(x, u)`` with ``x = tanh(A y) + u`` and ``u ~ N(0, noise_std^2 I)``."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != spec.n_factors:
        raise ShapeMismatch(f"y must be (N, {spec.n_factors}), got {y.shape}")
    a = mixing_matrix(spec)
    u = np.random.default_rng(seed).normal(0.0, 1.0, size=(y.shape[0], spec.obs_dim)) * spec.noise_std
    return np.tanh(y @ a.T) + u, u


def make_dataset(spec: GenSpec, n: int, seed: int) -> Dataset:
    factor_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    y = sample_factors(spec, n, factor_seed)
    x, u = render(spec, y, noise_seed)
    return Dataset(x, y, u, spec, seed)


def factor_correlations(y: np.ndarray) -> np.ndarray:
    return np.corrcoef(y, rowvar=False).reshape(y.shape[1], y.shape[1])


def linear_cka(a: np.ndarray, b: np.ndarray) -> float:
    """Linear centered kernel alignment between two row-aligned matrices."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    num = np.linalg.norm(b.T @ a) ** 2
    return float(num / (np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)))


# ---------------------------------------------------------------------------
# exact discrete version


def _components(n: int, terms) -> list:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j, _ in terms:
        parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def _normal_cdf(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(v, dtype=float) / math.sqrt(2.0)))


def _projected_x_cpt(spec: GenSpec, n_bins: int) -> np.ndarray:
    """p(x bin | factor grid) for the observation projected onto the mean mixing column.

    The nuisance projects to ``N(0, noise_std^2)`` and is integrated exactly.
    """
    levels = spec.levels
    grid = np.array(list(np.ndindex(*([levels] * spec.n_factors)))) / (levels - 1)
    a = mixing_matrix(spec)
    w = a.sum(axis=1)
    w /= np.linalg.norm(w)
    s = np.tanh(grid @ a.T) @ w
    pad = 3.0 * spec.noise_std if spec.noise_std > 0 else 1e-9
    lo, hi = s.min() - pad, s.max() + pad
    inner = np.linspace(lo, hi, n_bins + 1)[1:-1]
    if spec.noise_std > 0:
        cdf = _normal_cdf((inner[None, :] - s[:, None]) / spec.noise_std)
        cdf = np.concatenate([np.zeros((len(s), 1)), cdf, np.ones((len(s), 1))], axis=1)
        table = np.diff(cdf, axis=1)
    else:
        table = np.zeros((len(s), n_bins))
        table[np.arange(len(s)), np.searchsorted(inner, s)] = 1.0
    table = np.clip(table, 0.0, None)
    table /= table.sum(axis=1, keepdims=True)
    return table.reshape((levels,) * spec.n_factors + (n_bins,))


def discretize_to_model(spec: GenSpec, n_bins: int = 16,
                        render_fn: Optional[Callable] = None, x_states: Optional[int] = None) -> DiscreteModel:
    """Exact discrete model of a spec with a few factor levels.

    Independent factors become uniform roots of the collider. Each group of
    factors tied by correlation kernels gets a shared exogenous parent ``e<k>``
    whose states enumerate the group's joint configurations, with the factors
    as deterministic children, so the group joint is the normalized kernel
    product over the level grid.

    By default ``x`` is the quantized projection of the rendered observation
    (``n_bins`` states, noise integrated). ``render_fn(*factor_states)`` with
    ``x_states`` instead gives a deterministic custom observation.
    """
    if spec.levels is None:
        raise BadSpec("discretization needs discrete factors (levels must be set)")
    if spec.levels > 4:
        raise BadSpec(f"discretization supports at most 4 levels per factor, got {spec.levels}")
    if not 2 <= n_bins <= 64:
        raise BadSpec(f"n_bins must be in [2, 64], got {n_bins}")
    n, lv = spec.n_factors, spec.levels
    names = [f"y{i + 1}" for i in range(n)]
    terms = spec.kernel_terms()
    groups = [g for g in _components(n, terms) if len(g) > 1]
    nodes, edges, vars, cpts = [], [], [], []
    grouped = {}
    for k, grp in enumerate(groups):
        e = f"e{k + 1}"
        configs = np.array(list(np.ndindex(*([lv] * len(grp)))))
        vals = configs / (lv - 1)
        w = np.ones(len(configs))
        for i, j, s in terms:
            if i in grp:
                w *= np.exp(-((vals[:, grp.index(i)] - vals[:, grp.index(j)]) ** 2) / (2 * s * s))
        nodes.append(e)
        vars.append(VarSpec(e, len(configs)))
        cpts.append(Cpt(e, (), w / w.sum()))
        for pos, i in enumerate(grp):
            grouped[i] = (e, configs[:, pos])
    uniform = np.full(lv, 1.0 / lv)
    for i, name in enumerate(names):
        nodes.append(name)
        vars.append(VarSpec(name, lv))
        if i in grouped:
            e, col = grouped[i]
            table = np.zeros((len(col), lv))
            table[np.arange(len(col)), col] = 1.0
            edges.append((e, name))
            cpts.append(Cpt(name, (e,), table))
        else:
            cpts.append(Cpt(name, (), uniform))
    if render_fn is None:
        table = _projected_x_cpt(spec, n_bins)
        k = n_bins
    else:
        if x_states is None:
            raise BadSpec("x_states is required with a custom render function")
        k = int(x_states)
        table = np.zeros((lv,) * n + (k,))
        for idx in np.ndindex(*([lv] * n)):
            table[idx + (int(render_fn(*idx)),)] = 1.0
    nodes.append("x")
    vars.append(VarSpec("x", k))
    edges += [(y, "x") for y in names]
    cpts.append(Cpt("x", tuple(names), table))
    return DiscreteModel(dg.Dag(nodes, edges), vars, cpts)


# ---------------------------------------------------------------------------
# files: little-endian float64 matrices plus a JSON sidecar


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mats = {"x": ds.x, "y": ds.y}
    if ds.u is not None:
        mats["u"] = ds.u
    files, checksums, shapes = {}, {}, {}
    for key, m in mats.items():
        p = out / f"{key}.f64"
        p.write_bytes(np.ascontiguousarray(m, dtype="<f8").tobytes())
        files[key] = p.name
        checksums[key] = _sha256(p)
        shapes[key] = list(m.shape)
    meta = {"format": "rei-dataset-v1", "dtype": "<f8", "spec": ds.spec.to_dict(), "seed": ds.seed,
            "N": len(ds), "M": ds.spec.obs_dim, "n": ds.spec.n_factors, "files": files,
            "shapes": shapes, "sha256": checksums,
            "factor_correlation": np.round(factor_correlations(ds.y), 6).tolist() if len(ds) > 1 else None}
    meta.update(ds.extra)
    (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out


def load_dataset(path) -> Dataset:
    base = Path(path)
    meta = json.loads((base / "dataset.json").read_text(encoding="utf-8"))
    mats = {}
    for key, name in meta["files"].items():
        p = base / name
        if _sha256(p) != meta["sha256"][key]:
            raise ValueError(f"checksum mismatch for {p}")
        mats[key] = np.frombuffer(p.read_bytes(), dtype="<f8").reshape(meta["shapes"][key]).astype(float)
    return Dataset(mats["x"], mats["y"], mats.get("u"), GenSpec.from_dict(meta["spec"]), meta.get("seed"))


def export_csv(ds: Dataset, path) -> None:
    m, n = ds.x.shape[1], ds.y.shape[1]
    header = [f"y{i + 1}" for i in range(n)] + [f"x{i + 1}" for i in range(m)]
    blocks = [ds.y, ds.x]
    if ds.u is not None:
        header += [f"u{i + 1}" for i in range(m)]
        blocks.append(ds.u)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.hstack(blocks):
            w.writerow([repr(float(v)) for v in row])
