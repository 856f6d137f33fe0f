"""``rankshield`` command-line harness.

Every command writes into ``<out>/<run_id>/`` a ``record.json`` experiment
record, a ``rows.jsonl`` file with one line per sample, and command-specific
CSV/JSON artifacts. Exit codes: 0 success, 2 usage or config error,
3 divergence or numerical failure, 4 I/O error.
"""

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from rankshield import __version__, backend, metrics
from rankshield import model as model_io
from rankshield.attacks import AttackConfig, run_attack
from rankshield.data import (SynthSpec, load_csv, normalize, split, synth_gaussians,
                             write_csv, write_manifest)
from rankshield.errors import (IngestionError, NumericError, RankShieldError,
                               TrainingError, UsageError)
from rankshield.explain import (SIMPLE, SMOOTH, INTEGRATED, integrated_gradients,
                                simple_gradient, smoothgrad)
from rankshield.parallel import ordered_map
from rankshield.thickness import PerturbDistribution, topk_thickness
from rankshield.training import TrainConfig, train

log = logging.getLogger("rankshield")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
MIN_PROCESSED = 0.95


class IOFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# config, seeds, run directories

def read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def resolve_seed(args, section):
    """``--seed`` beats ``RANKSHIELD_SEED``, which beats the config value."""
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("RANKSHIELD_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"RANKSHIELD_SEED must be an integer, got {env!r}") from None
    return int(section.get("seed", 0))


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:8]


def run_dir(out, command, config):
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = f"{command}-{stamp}-{_digest(config)}"
    root = Path(out)
    path = root / base
    i = 1
    while path.exists():
        path = root / f"{base}-{i}"
        i += 1
    try:
        path.mkdir(parents=True)
    except OSError as exc:
        raise IOFailure(f"cannot create run directory {path}: {exc}") from exc
    return path


def write_record(path, command, config, rows, aggregates, model_path=None, extra=None):
    record = {
        "run_id": path.name,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "command": command,
        "config": config,
        "model_path": None if model_path is None else str(model_path),
        "aggregates": aggregates,
        "rows": rows,
        "version": __version__,
        "backend": backend.NAME,
    }
    if extra:
        record.update(extra)
    try:
        with open(path / "record.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=1, sort_keys=True)
        with open(path / "rows.jsonl", "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write record in {path}: {exc}") from exc
    return record


def _write_csv(path, header, rows):
    import csv
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# inputs

def load_model(path):
    if path is None:
        raise UsageError("--model is required")
    try:
        return model_io.load(path)
    except FileNotFoundError:
        raise IOFailure(f"model file not found: {path}") from None
    except OSError as exc:
        raise IOFailure(f"cannot read model {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid model file {path}: {exc}") from None


def load_data(path, section):
    """Dataset from ``--data`` (CSV) or a ``synthetic`` block in the config."""
    if path is not None:
        try:
            ds = load_csv(path, section.get("label_column", -1),
                          section.get("has_header", True))
        except IngestionError as exc:
            if isinstance(exc.__cause__, OSError):
                raise IOFailure(str(exc)) from exc
            raise
    elif "synthetic" in section:
        ds = synth_gaussians(SynthSpec(**section["synthetic"]))
    else:
        raise UsageError("no data: pass --data or a data.synthetic config block")
    kind = section.get("normalize", "none")
    if kind != "none":
        ds = normalize(ds, kind)
    limit = section.get("limit")
    if limit is not None:
        ds = ds.subset(np.arange(min(int(limit), len(ds))))
    return ds


# ---------------------------------------------------------------------------
# workers (top level so process pools can pickle them)

def _attack_worker(job):
    model, x, cfg = job
    try:
        r = run_attack(model, x, AttackConfig(**cfg))
    except RankShieldError as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    return r.to_dict()


def _thickness_worker(job):
    model, x, idx, p = job
    D = PerturbDistribution(p["kind"], epsilon=p["epsilon"], sigma2=p["sigma2"])
    est = topk_thickness(model, x, D, p["k"], p["M1"], p["M2"], p["variant"],
                         seed=[p["seed"], idx], order_by=p["order_by"])
    c = model_io.predict(model, x)
    hn = model_io.hessian_spectral_norm(model, x, c, seed=p["seed"]) if p["hessian"] else None
    return est.value, est.std_error, hn


def _explain(model, x, method, seed):
    if method == SIMPLE:
        return simple_gradient(model, x)
    if method == SMOOTH:
        return smoothgrad(model, x, seed=seed)
    if method == INTEGRATED:
        return integrated_gradients(model, x)
    raise UsageError(f"unknown explainer {method!r}")


def _evaluate_worker(job):
    model, x, names, explainer, seed, order_by = job
    row = {}
    if {"dffot", "comp", "suff"} & set(names):
        s = _explain(model, x, explainer, seed)
        if "dffot" in names:
            row["dffot"], row["dffot_flipped"] = metrics.dffot(model, x, s, order_by)
        if "comp" in names:
            row["comp"] = metrics.comp(model, x, s, order_by=order_by)
        if "suff" in names:
            row["suff"] = metrics.suff(model, x, s, order_by=order_by)
    return row


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = read_config(args.config)
    tcfg = dict(cfg.get("train", {}))
    tcfg["seed"] = resolve_seed(args, tcfg)
    config = TrainConfig.from_dict(tcfg)
    dsec = dict(cfg.get("data", {}))
    dsec.setdefault("normalize", "zscore")
    ds = load_data(args.data, dsec)
    fractions = dsec.get("split", [0.7, 0.15, 0.15])
    split_seed = int(dsec.get("split_seed", config.seed))
    parts = split(ds, fractions, seed=split_seed)
    trn = parts[0]
    net, hist = train(config, trn)
    net.meta["normalization"] = ds.normalization
    out = run_dir(args.out, "train", cfg)
    model_path = out / "model.json"
    try:
        model_io.save(net, model_path)
        for name, part in zip(("train", "val", "test"), parts):
            if len(part):
                write_csv(part, out / f"{name}.csv")
        write_manifest(out / "data_manifest.json", ds,
                       args.data or "synthetic", split_seed,
                       {"split": list(fractions)})
    except OSError as exc:
        raise IOFailure(f"cannot write training outputs: {exc}") from exc
    rows = [{"epoch": e, "loss": hist.loss[e], "accuracy": hist.accuracy[e],
             "auc": hist.auc[e], "regularizer": hist.regularizer[e],
             "mean_gap": hist.mean_gap[e]} for e in range(len(hist))]
    test = parts[-1] if len(parts[-1]) else trn
    agg = {"train_accuracy": hist.accuracy[-1], "train_auc": hist.auc[-1]}
    if len(np.unique(test.labels)) == 2:
        agg["test_auc"] = metrics.model_auc(net, test.features, test.labels)
    write_record(out, "train", {**cfg, "train": config.to_dict()}, rows, agg, model_path,
                 {"method": config.method})
    print(f"trained {config.method}: test AUC {agg.get('test_auc', float('nan')):.4f}")
    print(f"model written to {model_path}")
    return EXIT_OK


def cmd_attack(args):
    cfg = read_config(args.config)
    acfg = dict(cfg.get("attack", {}))
    acfg["seed"] = resolve_seed(args, acfg)
    config = AttackConfig(**acfg)
    model = load_model(args.model)
    ds = load_data(args.data, cfg.get("data", {}))
    jobs = [(model, x, config.to_dict()) for x in ds.features]
    results = ordered_map(_attack_worker, jobs, args.jobs)
    rows, traj = [], []
    for i, r in enumerate(results):
        if "error" in r:
            log.warning("sample %d failed: %s", i, r["error"])
            rows.append({"sample_id": i, "error": r["error"]})
            continue
        rows.append({"sample_id": i, "p_at_k": r["final_p_at_k"],
                     "first_flip_iter": r["first_flip_iter"],
                     "iters_run": r["iters_run"], "verdict": r["verdict"],
                     "prediction_preserved": r["prediction_preserved"],
                     "n_rejected": r["n_rejected"], "x_adv": r["x_adv"]})
        traj.extend((i, t, p) for t, p in enumerate(r["p_at_k_trajectory"]))
    ok = [r for r in rows if "error" not in r]
    if len(ok) < MIN_PROCESSED * len(rows):
        print(f"only {len(ok)}/{len(rows)} samples processed", file=sys.stderr)
        return EXIT_DIVERGED
    sentinel = config.max_iters + 1
    flips = [r["first_flip_iter"] if r["first_flip_iter"] is not None else sentinel
             for r in ok]
    for r, f in zip(ok, flips):
        r["iterations_to_flip"] = f
    agg = {"p_at_k": float(np.mean([r["p_at_k"] for r in ok])),
           "mean_first_flip": float(np.mean(flips)),
           "flip_rate": float(np.mean([r["first_flip_iter"] is not None for r in ok])),
           "n_samples": len(ok), "n_failed": len(rows) - len(ok)}
    out = run_dir(args.out, "attack", cfg)
    if cfg.get("write_trajectories", True):
        _write_csv(out / "trajectories.csv", ["sample_id", "iter", "p_at_k"], traj)
    meta = model.meta if hasattr(model, "meta") else {}
    write_record(out, "attack", {**cfg, "attack": config.to_dict()}, rows, agg, args.model,
                 {"method": meta.get("method", type(model).__name__), "k": config.k})
    print(f"{config.method}: mean P@{config.k} = {agg['p_at_k']:.4f}, "
          f"mean first flip = {agg['mean_first_flip']:.1f} "
          f"(flip rate {agg['flip_rate']:.2f}, {len(ok)} samples)")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = read_config(args.config)
    ecfg = dict(cfg.get("evaluate", {}))
    names = ecfg.get("metrics", ["auc", "accuracy", "dffot", "comp", "suff"])
    known = {"auc", "accuracy", "dffot", "comp", "suff"}
    if not names:
        raise UsageError("metric list is empty")
    bad = set(names) - known
    if bad:
        raise UsageError(f"unknown metric(s): {sorted(bad)}")
    seed = resolve_seed(args, ecfg)
    model = load_model(args.model)
    ds = load_data(args.data, cfg.get("data", {}))
    explainer = ecfg.get("explainer", SIMPLE)
    order_by = ecfg.get("order_by", "signed")
    report = metrics.MetricReport(metadata={"explainer": explainer, "order_by": order_by,
                                            "k_set": metrics.default_k_set(ds.n_features)})
    agg = {}
    if "auc" in names:
        agg["auc"] = metrics.model_auc(model, ds.features, ds.labels)
    if "accuracy" in names:
        agg["accuracy"] = float(np.mean(model.predict_batch(ds.features) == ds.labels))
    jobs = [(model, x, names, explainer, seed, order_by) for x in ds.features]
    rows = ordered_map(_evaluate_worker, jobs, args.jobs)
    for name in ("dffot", "comp", "suff"):
        if name in names:
            report.add(name, [r[name] for r in rows])
    agg.update(report.aggregates)
    out = run_dir(args.out, "evaluate", cfg)
    try:
        (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "metrics.json").write_text(json.dumps({**report.to_dict(), "aggregates": agg},
                                                     indent=1), encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write metrics: {exc}") from exc
    rows = [{"sample_id": i, **r} for i, r in enumerate(rows)]
    meta = model.meta if hasattr(model, "meta") else {}
    write_record(out, "evaluate", cfg, rows, agg, args.model,
                 {"method": meta.get("method", type(model).__name__)})
    for k, v in agg.items():
        print(f"{k}: {v:.4f}")
    return EXIT_OK


def cmd_thickness(args):
    cfg = read_config(args.config)
    tcfg = dict(cfg.get("thickness", {}))
    p = {"k": int(tcfg.get("k", 1)), "M1": int(tcfg.get("M1", 32)), "M2": int(tcfg.get("M2", 8)),
         "variant": tcfg.get("variant", "indicator"), "kind": tcfg.get("kind", "uniform_ball"),
         "epsilon": float(tcfg.get("epsilon", 0.1)), "sigma2": float(tcfg.get("sigma2", 0.0)),
         "order_by": tcfg.get("order_by", "signed"), "hessian": bool(tcfg.get("hessian_norm", True)),
         "seed": resolve_seed(args, tcfg)}
    PerturbDistribution(p["kind"], epsilon=p["epsilon"], sigma2=p["sigma2"])
    model = load_model(args.model)
    ds = load_data(args.data, cfg.get("data", {}))
    jobs = [(model, x, i, p) for i, x in enumerate(ds.features)]
    res = ordered_map(_thickness_worker, jobs, args.jobs)
    rows = [{"sample_id": i, "k": p["k"], "variant": p["variant"], "value": v,
             "std_error": se, "M1": p["M1"], "M2": p["M2"], "hessian_norm": hn}
            for i, (v, se, hn) in enumerate(res)]
    for r in rows:
        r["thickness"] = r["value"]
    agg = {"model_thickness": float(np.mean([r["value"] for r in rows]))}
    if p["hessian"]:
        agg["mean_hessian_norm"] = float(np.mean([r["hessian_norm"] for r in rows]))
    out = run_dir(args.out, "thickness", cfg)
    _write_csv(out / "thickness.csv",
               ["sample_id", "k", "variant", "value", "std_error", "M1", "M2"],
               [[r["sample_id"], r["k"], r["variant"], repr(r["value"]), repr(r["std_error"]),
                 r["M1"], r["M2"]] for r in rows])
    meta = model.meta if hasattr(model, "meta") else {}
    write_record(out, "thickness", {**cfg, "thickness": p}, rows, agg, args.model,
                 {"method": meta.get("method", type(model).__name__), "k": p["k"]})
    print(f"model thickness ({p['variant']}, k={p['k']}): {agg['model_thickness']:.4f}")
    return EXIT_OK


def _load_record(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise IOFailure(f"record not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"record {path} is not valid JSON: {exc}") from None


def _record_path(p):
    p = Path(p)
    return p / "record.json" if p.is_dir() else p


def cmd_report(args):
    if not args.records:
        raise UsageError("report needs at least one run record")
    records = [_load_record(_record_path(p)) for p in args.records]
    ks = {r["k"] for r in records if r.get("k") is not None}
    if len(ks) > 1:
        raise UsageError(f"records disagree on k: {sorted(ks)}")
    # (a) method x metric table, P@k in percent
    table = {}
    for r in records:
        row = table.setdefault(r.get("method", r["run_id"]), {})
        for name, v in r.get("aggregates", {}).items():
            if isinstance(v, (int, float)):
                row[name] = 100.0 * v if name == "p_at_k" else v
    cols = sorted({c for row in table.values() for c in row})
    out = run_dir(args.out, "report", {"records": [str(p) for p in args.records]})
    _write_csv(out / "table.csv", ["method"] + cols,
               [[m] + [repr(row[c]) if c in row else "" for c in cols]
                for m, row in table.items()])
    # (b) per-sample scatter joined on sample_id
    cols_wanted = ("thickness", "hessian_norm", "iterations_to_flip")
    joined = {}
    for r in records:
        for row in r.get("rows", []):
            if "sample_id" not in row:
                continue
            tgt = joined.setdefault(row["sample_id"], {})
            for c in cols_wanted:
                if row.get(c) is not None:
                    tgt[c] = row[c]
    full = [(i, d) for i, d in sorted(joined.items()) if all(c in d for c in cols_wanted)]
    corr = {}
    if full:
        _write_csv(out / "scatter.csv", ["sample_id", *cols_wanted],
                   [[i] + [repr(float(d[c])) for c in cols_wanted] for i, d in full])
        flips = [d["iterations_to_flip"] for _, d in full]
        for c in ("thickness", "hessian_norm"):
            xs = [d[c] for _, d in full]
            for kind in ("pearson", "spearman"):
                try:
                    corr[f"{c}_vs_flip_{kind}"] = metrics.correlation(xs, flips, kind)
                except UsageError as exc:
                    corr[f"{c}_vs_flip_{kind}"] = None
                    log.warning("%s correlation undefined: %s", c, exc)
        (out / "correlation.json").write_text(json.dumps(corr, indent=1, sort_keys=True),
                                              encoding="utf-8")
    write_record(out, "report", {"records": [str(p) for p in args.records]},
                 [{"method": m, **row} for m, row in table.items()], corr)
    for m, row in table.items():
        print(m + ": " + ", ".join(f"{c}={row[c]:.4g}" for c in cols if c in row))
    for name, v in corr.items():
        print(f"{name}: {v if v is None else round(v, 4)}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "evaluate": cmd_evaluate,
            "thickness": cmd_thickness, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="rankshield",
                                     description="Robust ranking explanations toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--model", metavar="PATH")
        p.add_argument("--data", metavar="PATH")
        p.add_argument("--out", metavar="DIR", default="runs")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("records", nargs="*", metavar="RECORD")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (RankShieldError, TypeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
