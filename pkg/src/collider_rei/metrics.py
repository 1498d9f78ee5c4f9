"""DCI scores of a learned representation against ground-truth factors."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.linear_model import Lasso, LinearRegression

from .errors import AllRowsInactive, DegenerateData

DEFAULT_ALPHA = 0.01
METHODS = ("lasso",)


def _standardize(a: np.ndarray):
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    return (a - mu) / np.where(const, 1.0, sd), const


def importance(latents, factors, method: str = "lasso", alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Importance matrix R (latent dims x factors).

    ``R[i, k]`` is the absolute coefficient of standardized latent ``i`` in an
    L1-regularized regression of standardized factor ``k`` on all latents.
    Constant latent columns get zero importance; a constant factor is an error.
    """
    z = np.asarray(latents, dtype=float)
    y = np.asarray(factors, dtype=float)
    if z.ndim != 2 or y.ndim != 2 or z.shape[0] != y.shape[0]:
        raise DegenerateData(f"latents and factors must be row-aligned matrices, got {z.shape} and {y.shape}")
    if method not in METHODS:
        raise ValueError(f"unknown importance method {method!r}")
    zs, zconst = _standardize(z)
    ys, yconst = _standardize(y)
    if yconst.any():
        raise DegenerateData(f"constant factor column(s) {np.flatnonzero(yconst).tolist()}")
    zs[:, zconst] = 0.0
    r = np.zeros((z.shape[1], y.shape[1]))
    for k in range(y.shape[1]):
        fit = Lasso(alpha=alpha, fit_intercept=False, max_iter=10000, tol=1e-6).fit(zs, ys[:, k])
        r[:, k] = np.abs(fit.coef_)
    r[zconst] = 0.0
    return r


def _entropy_rows(p: np.ndarray, base: int) -> np.ndarray:
    if base < 2:
        return np.zeros(p.shape[0])
    logs = np.log(p, where=p > 0, out=np.zeros_like(p))
    return -(p * logs).sum(axis=1) / np.log(base)


@dataclass
class DciReport:
    P: np.ndarray
    D_per_dim: np.ndarray  # NaN on inactive rows
    D_aggregate: float  # in [0, 1]
    active: np.ndarray
    weights: np.ndarray
    completeness: Optional[np.ndarray] = None
    C_aggregate: Optional[float] = None
    informativeness: Optional[np.ndarray] = None
    method: str = "lasso"
    extra: dict = field(default_factory=dict)

    @property
    def D_score(self) -> float:
        """Aggregate disentanglement on a 0-100 scale."""
        return 100.0 * self.D_aggregate


def dci_disentanglement(r) -> DciReport:
    """Per-dim ``D_i = 1 - H_K(P_i)`` and the importance-weighted aggregate over active rows."""
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or (r < 0).any():
        raise ValueError("importance matrix must be a nonnegative 2-D array")
    k = r.shape[1]
    row_sum = r.sum(axis=1)
    active = row_sum > 0
    if not active.any():
        raise AllRowsInactive("every latent dimension has zero importance")
    p = np.zeros_like(r)
    p[active] = r[active] / row_sum[active, None]
    d = np.full(r.shape[0], np.nan)
    d[active] = np.clip(1.0 - _entropy_rows(p[active], k), 0.0, 1.0)
    rho = np.where(active, row_sum, 0.0) / row_sum[active].sum()
    agg = float(np.sum(rho[active] * d[active]))
    return DciReport(p, d, agg, active, rho)


def completeness(r) -> tuple:
    """Per-factor ``1 - H_d`` of the column-normalized importances and their weighted mean."""
    r = np.asarray(r, dtype=float)
    col = r.sum(axis=0)
    ok = col > 0
    if not ok.any():
        raise AllRowsInactive("every factor has zero importance")
    pt = np.zeros_like(r.T)
    pt[ok] = r.T[ok] / col[ok, None]
    c = np.full(r.shape[1], np.nan)
    c[ok] = np.clip(1.0 - _entropy_rows(pt[ok], r.shape[0]), 0.0, 1.0)
    w = col / col.sum()
    return c, float(np.sum(w[ok] * c[ok]))


def informativeness(latents, factors, split_seed: int = 0) -> np.ndarray:
    """Held-out R^2 of a linear regression per factor on an 80/20 split."""
    z = np.asarray(latents, dtype=float)
    y = np.asarray(factors, dtype=float)
    n = z.shape[0]
    if n < 50:
        raise DegenerateData(f"informativeness needs at least 50 rows, got {n}")
    perm = np.random.default_rng(split_seed).permutation(n)
    cut = int(round(0.8 * n))
    tr, te = perm[:cut], perm[cut:]
    out = np.zeros(y.shape[1])
    for k in range(y.shape[1]):
        target = y[te, k]
        ss_tot = np.sum((target - target.mean()) ** 2)
        if ss_tot <= 0:
            raise DegenerateData(f"factor {k} is constant on the held-out split")
        pred = LinearRegression().fit(z[tr], y[tr, k]).predict(z[te])
        out[k] = 1.0 - np.sum((target - pred) ** 2) / ss_tot
    return out


def evaluate(latents, factors, split_seed: int = 0, alpha: float = DEFAULT_ALPHA) -> DciReport:
    """Full DCI report: disentanglement, completeness and informativeness."""
    r = importance(latents, factors, alpha=alpha)
    rep = dci_disentanglement(r)
    rep.completeness, rep.C_aggregate = completeness(r)
    rep.informativeness = informativeness(latents, factors, split_seed)
    rep.extra["R"] = r
    return rep


def write_report(rep: DciReport, csv_path, json_path, seeds=None) -> None:
    """Per-dim CSV and a JSON summary ``{D, C, I, seeds, method}``."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        k = rep.P.shape[1]
        w.writerow(["dim", "active", "weight", "D"] + [f"P_{j + 1}" for j in range(k)])
        for i in range(rep.P.shape[0]):
            w.writerow([i, int(rep.active[i]), repr(float(rep.weights[i])), repr(float(rep.D_per_dim[i]))]
                       + [repr(float(v)) for v in rep.P[i]])
    summary = {
        "D": rep.D_score,
        "C": None if rep.C_aggregate is None else 100.0 * rep.C_aggregate,
        "I": None if rep.informativeness is None else float(np.mean(rep.informativeness)),
        "I_per_factor": None if rep.informativeness is None else rep.informativeness.tolist(),
        "inactive_dims": np.flatnonzero(~rep.active).tolist(),
        "seeds": seeds,
        "method": rep.method,
    }
    Path(json_path).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
