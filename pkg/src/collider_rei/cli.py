"""Command-line interface.

Exit codes: 0 success or affirmative verdict, 1 negative verdict, 2 error.
Commands with ``--out`` append one run manifest to ``<out>/runs.jsonl``;
``dsep`` and ``identify`` do so only when ``--manifest-dir`` is given.
The ``REI_SEED`` environment variable overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import dag as dg
from . import experiment, metrics, oracle, synth, vae
from .errors import NotAColliderError, ReiError

EXACT_TOL = 1e-9


class CliError(Exception):
    """Reported on stderr with exit code 2."""


def _names(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})") from None


def _seed(args) -> int:
    env = os.environ.get("REI_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CliError(f"REI_SEED must be an integer, got {env!r}") from None
    return int(args.seed)


def content_hash(path) -> str:
    """sha256 over a file, or over the sorted (name, bytes) of a directory's files."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_file():
        h.update(p.read_bytes())
    elif p.is_dir():
        for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "runs.jsonl"):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    else:
        return ""
    return h.hexdigest()


def write_manifest(out_dir, command: str, args, seeds, inputs, outputs, started: float, status: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    record = {
        "command": command,
        "version": __version__,
        "config": snapshot,
        "seeds": seeds,
        "inputs": {str(p): content_hash(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "exit_code": status,
        "wall_clock_s": round(time.time() - started, 3),
        "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    with open(out / "runs.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands; each returns (exit_code, manifest_info or None)


def cmd_dsep(args):
    g = dg.load_dag(args.dag) if Path(args.dag).is_file() else None
    if g is None:
        raise CliError(f"no such file: {args.dag}")
    verdict = dg.d_separated(g, _names(args.x), _names(args.y), _names(args.z))
    if verdict.separated:
        print("separated")
        code = 0
    else:
        print("not separated")
        print("witness: " + dg.format_path(g, verdict.witness_path))
        code = 1
    return code, {"inputs": [args.dag], "outputs": [], "seeds": []}


def cmd_rule(args):
    if not Path(args.dag).is_file():
        raise CliError(f"no such file: {args.dag}")
    g = dg.load_dag(args.dag)
    res = dg.check_rule(g, args.rule, x=_names(args.x), y=_names(args.y), z=_names(args.z),
                        w=_names(args.w), strict_rule3=args.strict)
    summ = res.mutilated_graph_summary
    print(f"{res.rule.name.lower()}: {'applicable' if res.applicable else 'not applicable'}")
    print(f"mutilated graph: {summ['edges_before']} -> {summ['edges_after']} edges "
          f"({summ['removed_incoming']} incoming, {summ['removed_outgoing']} outgoing removed)")
    if res.verdict is not None and res.verdict.witness_path:
        print("witness: " + dg.format_path(g, res.verdict.witness_path))
    return (0 if res.applicable else 1), {"inputs": [args.dag], "outputs": [], "seeds": []}


def cmd_identify(args):
    model = oracle.load_model(_existing(args.model))
    try:
        adj = oracle.adjust_collider(model, args.cause, args.effect)
    except NotAColliderError as exc:
        raise CliError(str(exc)) from None
    truth = oracle.truncated_effect(model, args.cause, args.effect)
    dev = float(np.max(np.abs(adj - truth)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([args.cause, args.effect, "adjustment", "truncated", "abs_diff"])
    for i in range(adj.shape[0]):
        for j in range(adj.shape[1]):
            w.writerow([i, j, repr(float(adj[i, j])), repr(float(truth[i, j])), repr(float(abs(adj[i, j] - truth[i, j])))])
    sys.stdout.write(buf.getvalue())
    print(f"max_abs_deviation: {dev:.3e}")
    outputs = []
    if args.csv:
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
        outputs.append(args.csv)
    return (0 if dev <= EXACT_TOL else 1), {"inputs": [args.model], "outputs": outputs, "seeds": []}


def cmd_synth(args):
    seed = _seed(args)
    spec = synth.GenSpec.from_dict(_read_json(args.spec))
    if args.n < 1:
        raise CliError("--n must be >= 1")
    ds = synth.make_dataset(spec, args.n, seed)
    out = synth.save_dataset(ds, args.out)
    outputs = [out / "dataset.json"] + [out / f"{k}.f64" for k in ("x", "y", "u")]
    if args.csv:
        synth.export_csv(ds, out / "dataset.csv")
        outputs.append(out / "dataset.csv")
    if spec.n_factors > 1 and args.n > 1:
        c = synth.factor_correlations(ds.y)
        iu = np.triu_indices(spec.n_factors, 1)
        k = int(np.argmax(np.abs(c[iu])))
        print(f"max |corr| = {abs(c[iu][k]):.3f} between y{iu[0][k] + 1} and y{iu[1][k] + 1}")
    print(f"wrote {args.n} rows to {out}")
    return 0, {"inputs": [args.spec], "outputs": outputs, "seeds": [seed]}


def _load_config(path) -> vae.ReiConfig:
    if path is None:
        return vae.ReiConfig()
    try:
        return vae.ReiConfig.from_dict(_read_json(path))
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _load_data(path) -> synth.Dataset:
    if not (Path(path) / "dataset.json").is_file():
        raise CliError(f"no dataset in {path}")
    return synth.load_dataset(path)


def _existing(path) -> str:
    if not Path(path).exists():
        raise CliError(f"no such file: {path}")
    return path


def cmd_train(args):
    seed = _seed(args)
    ds = _load_data(args.data)
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.mode == "rei-noise" and ds.u is None:
        raise CliError("rei-noise mode needs a dataset with the exported nuisance u")
    model = vae.ReiModel.create(args.mode, ds.spec.obs_dim, ds.spec.n_factors, cfg, seed)
    log = (lambda r: print(f"epoch {r['epoch']}: total {r['total']:.4f} "
                           f"(reconstruction {r['reconstruction']:.4f}, regularizer {r['regularizer']:.4f})")) \
        if args.verbose else None
    vae.train(model, ds.x, ds.y, seed, u=ds.u, out_dir=args.out, log=log)
    out = Path(args.out)
    print(f"trained {args.mode} for {cfg.epochs} epochs; checkpoint in {out}")
    inputs = [args.data] + ([args.config] if args.config else [])
    return 0, {"inputs": inputs, "outputs": [out / "params.bin", out / "manifest.json", out / "loss_trace.csv"],
               "seeds": [seed]}


def cmd_eval(args):
    if not (Path(args.checkpoint) / "manifest.json").is_file():
        raise CliError(f"no checkpoint in {args.checkpoint}")
    model = vae.ReiModel.load(args.checkpoint)
    ds = _load_data(args.data)
    if ds.x.shape[1] != model.obs_dim or ds.y.shape[1] != model.n_factors:
        raise CliError(f"checkpoint expects x width {model.obs_dim} and {model.n_factors} factors, "
                       f"data has {ds.x.shape[1]} and {ds.y.shape[1]}")
    seed = _seed(args)
    z = vae.embed(model, ds.x, ds.y, num_samples=args.samples, seed=seed)
    rep = metrics.evaluate(z, ds.y, split_seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out.with_suffix(".json"), out.with_suffix(".csv")
    metrics.write_report(rep, csv_path, json_path, seeds={"model": model.seed, "eval": seed})
    print(f"D = {rep.D_score:.2f}  C = {100 * rep.C_aggregate:.2f}  I = {float(np.mean(rep.informativeness)):.3f}")
    return 0, {"inputs": [args.checkpoint, args.data], "outputs": [json_path, csv_path], "seeds": [model.seed, seed],
               "manifest_dir": out.parent}


def cmd_bench(args):
    suite = experiment.load_suite(_existing(args.suite))
    if args.seeds < 1:
        raise CliError("--seeds must be >= 1")
    base = _seed(args)
    seeds = list(range(base, base + args.seeds))

    def log(r):
        print(f"{r.setting:>9} {r.mode:>9} seed {r.seed}: D = {r.D:6.2f} ({r.seconds:.0f}s) {r.status if r.status != 'ok' else ''}".rstrip())

    results = experiment.run_suite(suite, seeds, out_dir=args.out if args.keep_models else None, log=log)
    summ = experiment.write_outputs(results, suite.settings, suite.modes, args.out, plot=args.plot)
    print("method," + ",".join(suite.settings))
    for m in suite.modes:
        print(m + "," + ",".join(experiment.fmt_cell(*summ[(m, s)][:2]) for s in suite.settings))
    out = Path(args.out)
    outputs = [out / f for f in ("raw.csv", "table.csv", "medians.csv")] + ([out / "bench.svg"] if args.plot else [])
    return 0, {"inputs": [args.suite], "outputs": outputs, "seeds": seeds}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rei", description="Collider identification and ReI-regularized VAEs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("dsep", help="test X _||_ Y | Z by d-separation")
    s.add_argument("--dag", required=True, help="DAG JSON file")
    s.add_argument("--x", required=True, help="comma-separated node names")
    s.add_argument("--y", required=True)
    s.add_argument("--z", default="")
    s.add_argument("--manifest-dir", default=None)
    s.set_defaults(func=cmd_dsep)

    s = sub.add_parser("rule", help="check a do-calculus rule on a DAG")
    s.add_argument("--dag", required=True)
    s.add_argument("--rule", required=True, type=int, choices=(1, 2, 3))
    s.add_argument("--x", default="")
    s.add_argument("--y", default="")
    s.add_argument("--z", default="")
    s.add_argument("--w", default="")
    s.add_argument("--strict", action="store_true", help="rule 3 with Z minus the ancestors of W")
    s.add_argument("--manifest-dir", default=None)
    s.set_defaults(func=cmd_rule)

    s = sub.add_parser("identify", help="collider adjustment vs. truncated factorization")
    s.add_argument("--model", required=True, help="discrete model JSON file")
    s.add_argument("--cause", required=True)
    s.add_argument("--effect", required=True)
    s.add_argument("--csv", default=None, help="also write the table here")
    s.add_argument("--manifest-dir", default=None)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("synth", help="generate a synthetic collider dataset")
    s.add_argument("--spec", required=True, help="GenSpec JSON file")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--csv", action="store_true", help="also export dataset.csv")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a vae / rei / rei-noise model")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=vae.MODES, default="rei")
    s.add_argument("--config", default=None, help="ReiConfig JSON file")
    s.add_argument("--epochs", type=int, default=None, help="override config epochs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--verbose", "-v", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="DCI report of a trained model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report path; .json and .csv are written")
    s.add_argument("--samples", type=int, default=None, help="posterior draws per row (default: config eval_samples)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="methods x correlation settings table")
    s.add_argument("--suite", required=True)
    s.add_argument("--seeds", type=int, default=5, help="number of seeds")
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true", help="write bench.svg")
    s.add_argument("--keep-models", action="store_true", help="save every cell's checkpoint")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        code, info = args.func(args)
    except (CliError, ReiError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    target = info.get("manifest_dir") or getattr(args, "out", None) or getattr(args, "manifest_dir", None)
    if target is not None:
        write_manifest(target, args.command, args, info["seeds"], info["inputs"], info["outputs"], started, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
