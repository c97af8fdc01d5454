"""``dgbm`` command-line interface.

Subcommands: ``simulate``, ``train``, ``predict``, ``evaluate`` and
``benchmark``. Exit codes are 0 on success, 2 for usage or config errors,
3 for data or model-file errors, 4 for numerical failures and 5 when a
benchmark finished with failed folds.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from dgbm import boosting
from dgbm.config import RunConfig, load_config, validation_problems
from dgbm.data import (
    ResponseTransform,
    TabularData,
    load_csv,
    load_features,
    make_folds,
    simulate_heteroskedastic,
    write_csv,
)
from dgbm.errors import (
    ConfigError,
    DataError,
    DGBMError,
    InvalidInputError,
    InvalidParameterError,
    ModelFormatError,
    NumericalError,
)
from dgbm.heads import BernsteinFlowHead
from dgbm.heads.flow import select_order
from dgbm.metrics import aggregate_report, coverage, crps_samples, quantile_loss

logger = logging.getLogger("dgbm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_PARTIAL = 5

REPORT_FORMAT = "dgbm-benchmark-report"
EVAL_FORMAT = "dgbm-eval-report"
REPORT_SCHEMA_VERSION = 1


class UsageError(DGBMError):
    pass


# -- shared pieces ------------------------------------------------------------

def resolve_data(cfg: RunConfig, override_path: str | None = None) -> TabularData:
    path = override_path or cfg.data
    if path:
        return load_csv(path, cfg.response)
    if cfg.simulate is not None:
        n = cfg.simulate.get("n", cfg.simulate.get("n_train"))
        return simulate_heteroskedastic(n, seed=cfg.simulate.get("seed", cfg.seed))
    raise ConfigError("config needs either 'data' (a CSV path) or 'simulate'")


def train_model(cfg: RunConfig, data: TabularData) -> tuple[boosting.DistributionalModel, dict]:
    """Fit one model on ``data`` under ``cfg``; returns the model and a training log."""
    transform = ResponseTransform.from_dict(cfg.transform)
    y = transform.forward(data.y)
    log: dict = {}
    order = cfg.order
    if cfg.head == BernsteinFlowHead.name and cfg.order_grid:
        order, scores = select_order(y, cfg.order_grid, seed=cfg.seed)
        log["order_scores"] = {str(m): s for m, s in scores.items()}
        log["selected_order"] = order
        logger.info("order grid %s: selected M=%d", cfg.order_grid, order)
    head = cfg.make_head(order)
    model = boosting.fit(data.X, y, head, cfg.tree_params(), cfg.fit_config())
    model.metadata = {
        "feature_names": list(data.feature_names),
        "response": data.response_name,
        "transform": transform.to_dict(),
    }
    log.update(model.history)
    log["n_rounds"] = model.n_rounds
    return model, log


def _transform_of(model) -> ResponseTransform:
    return ResponseTransform.from_dict(model.metadata.get("transform"))


def _features_for(model, data: TabularData) -> np.ndarray:
    names = model.metadata.get("feature_names")
    if not names:
        return data.X
    missing = [n for n in names if n not in data.feature_names]
    if missing:
        raise DataError(f"data lacks the model's feature columns {missing}")
    return data.X[:, [data.feature_names.index(n) for n in names]]


def extended_quantiles(head, levels, eta) -> np.ndarray:
    """Quantiles with unattainable levels mapped to the matching infinity.

    A level below the attainable CDF range has quantile ``-inf`` and one
    above it ``+inf``; this is what coverage and pinball scoring need.
    """
    q = head.quantile(np.asarray(levels, dtype=np.float64), eta, strict=False)
    bad = ~np.isfinite(q)
    if np.any(bad) and hasattr(head, "attainable_cdf"):
        lo, _ = head.attainable_cdf(eta)
        below = np.asarray(levels)[None, :] <= lo[:, None]
        q = np.where(bad & below, -np.inf, np.where(bad, np.inf, q))
    return q


def score_model(model, X, y, cfg: RunConfig, seed) -> tuple[dict, np.ndarray]:
    """Sample CRPS, NLL, pinball losses and band coverage on the original scale.

    Returns the metrics plus the ``(n_rows, n_levels)`` quantile matrix.
    """
    head = model.head
    transform = _transform_of(model)
    eta = model.predict_raw(X)
    samples = transform.inverse(head.sample(eta, cfg.n_samples, seed=seed))
    out = {"crps": float(np.mean(crps_samples(samples, y)))}
    nll_t = head.nll(transform.forward(y), eta)
    out["nll"] = float(np.mean(nll_t - transform.log_abs_jacobian(y)))
    levels = sorted({float(a) for a in cfg.quantiles} | {float(a) for b in cfg.bands for a in b})
    q = transform.inverse(extended_quantiles(head, levels, eta))
    for j, a in enumerate(levels):
        if a in cfg.quantiles:
            loss = quantile_loss(y, q[:, j], a)
            out[f"pinball_{_level(a)}"] = float(np.mean(loss)) if np.all(np.isfinite(loss)) else None
    for lo, hi in cfg.bands:
        out[f"coverage_{_level(lo)}_{_level(hi)}"] = coverage(
            q[:, levels.index(float(lo))], q[:, levels.index(float(hi))], y
        )
    return out, q[:, [levels.index(float(a)) for a in cfg.quantiles]]


def _write_json(path, doc) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _sidecar(path, suffix) -> str:
    root, _ = os.path.splitext(path)
    return root + suffix


def _level(a) -> str:
    """Column label for a quantile level; shortest round-trip form, so labels never collide."""
    return repr(float(a))


def _parse_levels(text: str) -> list[float]:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise UsageError("quantile level list is empty")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"cannot parse quantile levels {text!r}") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    for key in ("seed", "data", "response", "head", "order", "boosting_rounds", "n_jobs", "n_samples"):
        v = getattr(args, key, None)
        if v is not None:
            updates[key] = v
    if getattr(args, "quantiles", None) is not None:
        updates["quantiles"] = _parse_levels(args.quantiles)
    return cfg.updated(updates) if updates else cfg


# -- subcommands --------------------------------------------------------------

def cmd_simulate(n_train: int = 7000, n_test: int = 3000, seed: int = 0, out_dir: str = ".") -> list[str]:
    """Write ``train.csv`` and ``test.csv`` from the heteroskedastic design."""
    if n_train < 1 or n_test < 1:
        raise UsageError(f"n_train and n_test must be >= 1, got {n_train} and {n_test}")
    os.makedirs(out_dir, exist_ok=True)
    # one draw of n_train + n_test rows keeps train and test from sharing a stream
    full = simulate_heteroskedastic(n_train + n_test, seed=seed)
    paths = []
    for name, idx in (("train", np.arange(n_train)), ("test", np.arange(n_train, n_train + n_test))):
        path = os.path.join(out_dir, f"{name}.csv")
        write_csv(path, full.subset(idx))
        paths.append(path)
    return paths


def cmd_train(cfg: RunConfig, out_model_path: str, data_path: str | None = None) -> dict:
    cfg.validate()
    data = resolve_data(cfg, data_path)
    model, log = train_model(cfg, data)
    boosting.save_model(model, out_model_path)
    _write_json(_sidecar(out_model_path, ".log.json"), log)
    return log


def cmd_predict(model_path: str, data_path: str, quantile_levels, out_path: str) -> int:
    """Write raw parameters plus back-transformed quantiles; returns the number of error rows."""
    levels = [float(a) for a in quantile_levels]
    if not levels:
        raise UsageError("quantile level list is empty")
    probs = validation_problems(RunConfig(quantiles=levels, bands=[]))
    if probs:
        raise UsageError("; ".join(probs))
    model = boosting.load_model(model_path)
    names = model.metadata.get("feature_names")
    X = load_features(data_path, names) if names else load_csv(data_path, model.metadata.get("response", "y")).X
    eta = model.predict_raw(X)
    head = model.head
    q = _transform_of(model).inverse(head.quantile(np.asarray(levels), eta, strict=False))
    lo_cdf, hi_cdf = head.attainable_cdf(eta) if hasattr(head, "attainable_cdf") else (None, None)
    n_err = 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(head.param_names) + [f"q_{_level(a)}" for a in levels] + ["error"])
        for i in range(eta.shape[0]):
            bad = [a for a, v in zip(levels, q[i]) if not np.isfinite(v)]
            err = ""
            if bad:
                n_err += 1
                err = (
                    f"levels {','.join(_level(a) for a in bad)} outside attainable CDF range "
                    f"({lo_cdf[i]:.6g}, {hi_cdf[i]:.6g})"
                )
            w.writerow(
                [repr(float(v)) for v in eta[i]]
                + ["" if not np.isfinite(v) else repr(float(v)) for v in q[i]]
                + [err]
            )
    return n_err


def cmd_evaluate(model_path: str, data_path: str, cfg: RunConfig, out_path: str) -> dict:
    cfg.validate()
    model = boosting.load_model(model_path)
    data = load_csv(data_path, model.metadata.get("response", cfg.response))
    X = _features_for(model, data)
    metrics, q = score_model(model, X, data.y, cfg, seed=cfg.seed)
    report = {
        "format": EVAL_FORMAT,
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_rows": int(data.n_rows),
        "n_samples": cfg.n_samples,
        "quantiles": list(cfg.quantiles),
        "bands": [list(b) for b in cfg.bands],
        "metrics": metrics,
    }
    _write_json(out_path, report)
    with open(_sidecar(out_path, ".plot.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(model.metadata.get("feature_names", [])) + ["y"]
                   + [f"q_{_level(a)}" for a in cfg.quantiles])
        for xi, yi, qi in zip(X, data.y, q):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))] + [repr(float(v)) for v in qi])
    return report


@dataclass(frozen=True)
class _Job:
    dataset: str
    model: str
    fold: int
    cfg: RunConfig


def _benchmark_jobs(base: RunConfig):
    """Resolve (dataset, model) configs and report every invalid one at once."""
    if not base.datasets:
        raise ConfigError("benchmark config needs a non-empty 'datasets' list")
    models = base.models or [{"name": base.head, "head": base.head}]
    problems, resolved = [], []
    model_names = []
    for m in models:
        if not isinstance(m, dict) or "name" not in m:
            problems.append(f"model entries need a 'name': {m!r}")
            continue
        model_names.append(m["name"])
    dataset_names = []
    for d in base.datasets:
        if not isinstance(d, dict) or "name" not in d:
            problems.append(f"dataset entries need a 'name': {d!r}")
            continue
        dataset_names.append(d["name"])
        for m in models:
            if not isinstance(m, dict) or "name" not in m:
                continue
            where = f"{d['name']}/{m['name']}"
            try:
                cfg = base.updated({"datasets": [], "models": []})
                cfg = cfg.updated({k: v for k, v in m.items() if k != "name"})
                ds = {k: v for k, v in d.items() if k in ("path", "simulate", "response", "transform")}
                if "path" in ds:
                    ds["data"] = ds.pop("path")
                cfg = cfg.updated(ds)
                if cfg.head == BernsteinFlowHead.name and "order" in d:
                    cfg = cfg.updated({"order": d["order"], "order_grid": None})
                cfg = cfg.updated((d.get("overrides") or {}).get(m["name"], {}))
            except ConfigError as exc:
                problems += [f"{where}: {p}" for p in exc.problems]
                continue
            problems += [f"{where}: {p}" for p in validation_problems(cfg)]
            resolved.append((d["name"], m["name"], cfg))
    if len(set(model_names)) != len(model_names) or len(set(dataset_names)) != len(dataset_names):
        problems.append("dataset and model names must be unique")
    if problems:
        raise ConfigError(problems)
    return dataset_names, model_names, resolved


def _run_fold(job: _Job, data: TabularData, fold_idx) -> dict:
    train_idx, test_idx = fold_idx
    cfg = job.cfg.updated({"n_jobs": 1})
    model, _ = train_model(cfg, data.subset(train_idx))
    test = data.subset(test_idx)
    metrics, _ = score_model(model, test.X, test.y, cfg, seed=[cfg.seed, job.fold])
    if cfg.head == BernsteinFlowHead.name:
        metrics["order"] = model.head.order
    return metrics


def cmd_benchmark(cfg: RunConfig, out_path: str) -> tuple[dict, int]:
    """Run the fold protocol for every dataset and model; returns (report, exit code)."""
    cfg.validate()
    datasets, models, resolved = _benchmark_jobs(cfg)
    loaded, plans = {}, {}
    for dname, _, dcfg in resolved:
        if dname not in loaded:
            loaded[dname] = resolve_data(dcfg)
            plans[dname] = make_folds(loaded[dname].n_rows, dcfg.n_data_folds, seed=cfg.seed)
    jobs = [
        _Job(dname, mname, k, dcfg)
        for dname, mname, dcfg in resolved
        for k in range(plans[dname].n_folds)
    ]

    def run(job):
        try:
            return _run_fold(job, loaded[job.dataset], plans[job.dataset].folds[job.fold]), None
        except (NumericalError, InvalidInputError, InvalidParameterError, FloatingPointError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    folds: dict = {d: {m: [] for m in models} for d in datasets}
    failures = []
    for job, (metrics, err) in zip(jobs, results):
        if err is None:
            folds[job.dataset][job.model].append(dict(metrics, fold=job.fold))
        else:
            failures.append({"dataset": job.dataset, "model": job.model, "fold": job.fold, "error": err})
            logger.error("%s/%s fold %d failed: %s", job.dataset, job.model, job.fold, err)
    scored = {d: {m: [{k: v for k, v in r.items() if k != "fold"} for r in rows]
                  for m, rows in per.items()} for d, per in folds.items()}
    report = aggregate_report(scored, models=models, datasets=datasets, rank_metric="crps")
    doc = {
        "format": REPORT_FORMAT,
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": cfg.seed,
        "configs": {f"{d}/{m}": _config_doc(c) for d, m, c in resolved},
        **report.to_dict(),
        "folds": folds,
        "failures": failures,
    }
    _write_json(out_path, doc)
    with open(_sidecar(out_path, ".txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    return doc, (EXIT_PARTIAL if failures else EXIT_OK)


def _config_doc(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["lambda"] = d.pop("lambda_")
    for k in ("datasets", "models", "n_jobs"):
        d.pop(k)
    return d


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgbm", description="Distributional gradient boosting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write simulated train/test CSVs")
    s.add_argument("--n-train", type=int, default=7000)
    s.add_argument("--n-test", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".", help="output directory")

    t = sub.add_parser("train", help="fit a model and write a model file")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--response")
    t.add_argument("--head", choices=["gaussian", "bernstein_flow"])
    t.add_argument("--order", type=int)
    t.add_argument("--boosting-rounds", dest="boosting_rounds", type=int)
    t.add_argument("--n-jobs", dest="n_jobs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="model file path")

    r = sub.add_parser("predict", help="per-row raw parameters and quantiles")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--config")
    r.add_argument("--quantiles", help="comma-separated levels, e.g. 0.05,0.95")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="score a model on labelled data")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--quantiles")
    e.add_argument("--n-samples", dest="n_samples", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)

    b = sub.add_parser("benchmark", help="run the fold protocol over datasets and models")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--n-jobs", dest="n_jobs", type=int)
    b.add_argument("--out", required=True)
    return p


def _dispatch(args) -> int:
    if args.command == "simulate":
        for path in cmd_simulate(args.n_train, args.n_test, args.seed, args.out):
            print(path)
        return EXIT_OK
    if args.command == "predict":
        levels = _parse_levels(args.quantiles) if args.quantiles is not None else _config(args).quantiles
        n_err = cmd_predict(args.model, args.data, levels, args.out)
        if n_err:
            logger.warning("%d rows had unattainable quantile levels (see the error column)", n_err)
        print(args.out)
        return EXIT_OK
    cfg = _config(args)
    if args.command == "train":
        log = cmd_train(cfg, args.out)
        if "selected_order" in log:
            print(f"selected order M={log['selected_order']}")
        print(f"train NLL {log['train_nll'][0]:.6f} -> {log['train_nll'][-1]:.6f} over {log['n_rounds']} rounds")
        print(args.out)
        return EXIT_OK
    if args.command == "evaluate":
        report = cmd_evaluate(args.model, args.data, cfg, args.out)
        print(json.dumps(report["metrics"], sort_keys=True))
        return EXIT_OK
    doc, code = cmd_benchmark(cfg, args.out)
    with open(_sidecar(args.out, ".txt"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    if doc["failures"]:
        print(f"{len(doc['failures'])} fold(s) failed; see 'failures' in {args.out}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (UsageError, ConfigError, InvalidParameterError) as exc:
        print(f"dgbm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFormatError, InvalidInputError, OSError) as exc:
        print(f"dgbm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"dgbm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
