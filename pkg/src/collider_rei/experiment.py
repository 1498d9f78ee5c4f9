"""Benchmark cells: generate data, train one mode, score the representation.

A suite is a JSON object::

    {"base_spec": {...GenSpec fields...},
     "settings": ["uncorr", "pairs:1"],
     "modes": ["vae", "rei"],
     "n_train": 10000, "n_eval": 5000,
     "config": {...ReiConfig fields...},
     "pair_sigma": 0.1, "all_sigma": 0.2}

Each (setting, mode, seed) cell is independent and seeded; the table
reduces cells to ``mean [sd]`` per mode and setting.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics, synth, vae
from .errors import BadSpec

SUITE_KEYS = ("base_spec", "settings", "modes", "n_train", "n_eval", "config", "pair_sigma", "all_sigma")


@dataclass
class Suite:
    base_spec: synth.GenSpec
    settings: list
    modes: list
    n_train: int = 10000
    n_eval: int = 5000
    config: vae.ReiConfig = field(default_factory=vae.ReiConfig)
    pair_sigma: float = 0.1
    all_sigma: float = 0.2

    @classmethod
    def from_dict(cls, obj: dict) -> "Suite":
        if not isinstance(obj, dict):
            raise BadSpec("suite must be a JSON object")
        unknown = set(obj) - set(SUITE_KEYS)
        if unknown:
            raise BadSpec(f"unknown suite keys: {sorted(unknown)}")
        settings, modes = list(obj.get("settings", [])), list(obj.get("modes", []))
        if not settings or not modes:
            raise BadSpec("suite needs at least one setting and one mode")
        for s in settings:
            if s not in synth.SETTINGS:
                raise BadSpec(f"unknown setting {s!r}")
        for m in modes:
            if m not in vae.MODES:
                raise BadSpec(f"unknown mode {m!r}")
        try:
            cfg = vae.ReiConfig.from_dict(obj.get("config", {}))
        except (TypeError, ValueError) as exc:
            raise BadSpec(f"bad config: {exc}") from None
        return cls(synth.GenSpec.from_dict(obj.get("base_spec", {})), settings, modes,
                   int(obj.get("n_train", 10000)), int(obj.get("n_eval", 5000)), cfg,
                   float(obj.get("pair_sigma", 0.1)), float(obj.get("all_sigma", 0.2)))

    def spec_for(self, setting: str) -> synth.GenSpec:
        return synth.setting_spec(self.base_spec, setting, self.pair_sigma, self.all_sigma)


@dataclass
class CellResult:
    setting: str
    mode: str
    seed: int
    D: float
    seconds: float
    status: str = "ok"


def run_cell(suite: Suite, setting: str, mode: str, seed: int, out_dir=None) -> CellResult:
    """Train ``mode`` on ``setting`` with ``seed`` and return DCI-Disentanglement (0-100)."""
    t0 = time.perf_counter()
    spec = suite.spec_for(setting)
    train = synth.make_dataset(spec, suite.n_train, seed)
    test = synth.make_dataset(spec, suite.n_eval, 10**6 + seed)
    model = vae.ReiModel.create(mode, spec.obs_dim, spec.n_factors, suite.config, seed)
    vae.train(model, train.x, train.y, seed, u=train.u, out_dir=out_dir)
    z = vae.embed(model, test.x, test.y, seed=seed)
    rep = metrics.dci_disentanglement(metrics.importance(z, test.y))
    return CellResult(setting, mode, seed, rep.D_score, time.perf_counter() - t0)


def run_suite(suite: Suite, seeds, out_dir=None, log=None) -> list:
    """Run every cell; failures are recorded with status ``error: ...`` and the run continues."""
    results = []
    for setting in suite.settings:
        for seed in seeds:
            for mode in suite.modes:
                cell_dir = None if out_dir is None else Path(out_dir) / "cells" / f"{setting.replace(':', '')}_{mode}_s{seed}"
                try:
                    res = run_cell(suite, setting, mode, seed, cell_dir)
                except Exception as exc:  # a failed cell must not stop the bench
                    res = CellResult(setting, mode, seed, float("nan"), 0.0, f"error: {type(exc).__name__}: {exc}")
                results.append(res)
                if log is not None:
                    log(res)
    return results


def summarize(results, settings, modes) -> dict:
    """{(mode, setting): (mean, sd, median, n_ok)} over successful cells (sd with ddof=1)."""
    out = {}
    for m in modes:
        for s in settings:
            vals = np.array([r.D for r in results if r.mode == m and r.setting == s and r.status == "ok"])
            if vals.size == 0:
                out[(m, s)] = (float("nan"), float("nan"), float("nan"), 0)
            else:
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                out[(m, s)] = (float(vals.mean()), sd, float(np.median(vals)), int(vals.size))
    return out


def fmt_cell(mean: float, sd: float) -> str:
    if np.isnan(mean):
        return "n/a"
    return f"{mean:.1f} [{sd:.1f}]"


def write_outputs(results, settings, modes, out_dir, plot: bool = False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "raw.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "mode", "seed", "D", "seconds", "status"])
        for r in results:
            w.writerow([r.setting, r.mode, r.seed, repr(float(r.D)), f"{r.seconds:.3f}", r.status])
    summ = summarize(results, settings, modes)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + settings)
        for m in modes:
            w.writerow([m] + [fmt_cell(*summ[(m, s)][:2]) for s in settings])
    with open(out / "medians.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + settings)
        for m in modes:
            w.writerow([m] + [repr(summ[(m, s)][2]) for s in settings])
    if plot:
        (out / "bench.svg").write_text(bar_chart_svg(summ, settings, modes), encoding="utf-8")
    return summ


def bar_chart_svg(summ, settings, modes) -> str:
    """Grouped bars of mean D per setting with one-sd whiskers."""
    colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"]
    bw, gap, h, top, left = 28, 24, 220, 20, 40
    group_w = bw * len(modes) + gap
    width = left + group_w * len(settings) + 120
    y = lambda v: top + h - h * max(0.0, min(v, 100.0)) / 100.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h + top + 40}" font-family="sans-serif" font-size="11">',
             f'<line x1="{left}" y1="{top + h}" x2="{width - 110}" y2="{top + h}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + h}" stroke="black"/>']
    for tick in range(0, 101, 25):
        parts.append(f'<text x="{left - 6}" y="{y(tick) + 4}" text-anchor="end">{tick}</text>')
    for si, s in enumerate(settings):
        x0 = left + gap / 2 + si * group_w
        for mi, m in enumerate(modes):
            mean, sd, _, n = summ[(m, s)]
            if n == 0:
                continue
            x = x0 + mi * bw
            parts.append(f'<rect x="{x}" y="{y(mean):.1f}" width="{bw - 4}" height="{top + h - y(mean):.1f}" fill="{colors[mi % 4]}"/>')
            cx = x + (bw - 4) / 2
            parts.append(f'<line x1="{cx}" y1="{y(mean + sd):.1f}" x2="{cx}" y2="{y(mean - sd):.1f}" stroke="black"/>')
        parts.append(f'<text x="{x0 + bw * len(modes) / 2}" y="{top + h + 16}" text-anchor="middle">{s}</text>')
    for mi, m in enumerate(modes):
        ly = top + 14 * mi
        parts.append(f'<rect x="{width - 100}" y="{ly}" width="10" height="10" fill="{colors[mi % 4]}"/>')
        parts.append(f'<text x="{width - 85}" y="{ly + 9}">{m}</text>')
    parts.append(f'<text x="{left}" y="{top - 6}">DCI-Disentanglement (0-100)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def load_suite(path) -> Suite:
    return Suite.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
