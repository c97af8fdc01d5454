"""Scoring rules for probabilistic forecasts and benchmark report aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dgbm.errors import InvalidInputError

DEFAULT_N_SAMPLES = 1000


def crps_samples(samples, y) -> np.ndarray | float:
    """Sample-based CRPS estimate.

    Uses ``mean|x_i - y| - 1/(2 n^2) sum_ij |x_i - x_j|`` with the double sum
    evaluated in O(n log n) from the order statistics:
    ``sum_ij |x_i - x_j| = 2 sum_i (2i - n - 1) x_(i)``.

    Args:
        samples: Draws, shape ``(n,)`` or ``(n_rows, n)``.
        y: Observation(s), scalar or ``(n_rows,)``.

    Returns:
        Scalar for 1-D ``samples``, else one score per row.
    """
    x = np.asarray(samples, dtype=np.float64)
    one_d = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[1]
    if n < 2:
        raise InvalidInputError("CRPS needs at least two samples per forecast")
    y = np.asarray(y, dtype=np.float64)
    y = np.broadcast_to(y.reshape(-1, 1) if y.ndim else y, (x.shape[0], 1))
    xs = np.sort(x, axis=1)
    weights = 2.0 * np.arange(1, n + 1) - n - 1.0
    spread = (xs @ weights) / (n * n)
    out = np.mean(np.abs(xs - y), axis=1) - spread
    return float(out[0]) if one_d else out


def quantile_loss(y, q, alpha) -> np.ndarray:
    """``QL_alpha = 2 (1{y <= q} - alpha) (q - y)``, elementwise."""
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 2.0 * ((y <= q).astype(np.float64) - alpha) * (q - y)


def _trapezoid_weights(alpha: np.ndarray) -> np.ndarray:
    # trapezoid over the grid, constant extension out to 0 and 1
    w = np.empty_like(alpha)
    if alpha.size == 1:
        w[0] = 1.0
        return w
    gaps = np.diff(alpha)
    w[0] = alpha[0] + gaps[0] / 2.0
    w[-1] = (1.0 - alpha[-1]) + gaps[-1] / 2.0
    w[1:-1] = (gaps[:-1] + gaps[1:]) / 2.0
    return w


def crps_quantile_integration(quantile_fn, y, alpha_grid) -> float:
    """CRPS as the quantile loss integrated over levels in (0, 1).

    The integral is a trapezoid rule on ``alpha_grid``; the pieces below the
    first and above the last level use the nearest grid value.
    """
    alpha = np.asarray(alpha_grid, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0:
        raise InvalidInputError("alpha grid must be a non-empty 1-D sequence")
    if np.any((alpha <= 0) | (alpha >= 1)) or np.any(np.diff(alpha) <= 0):
        raise InvalidInputError("alpha grid must be strictly increasing inside (0, 1)")
    q = np.array([quantile_fn(a) for a in alpha], dtype=np.float64)
    return float(np.sum(_trapezoid_weights(alpha) * quantile_loss(y, q, alpha)))


def coverage(lower, upper, y) -> float:
    """Share of observations inside ``[lower, upper]`` (inclusive)."""
    lower, upper, y = (np.asarray(a, dtype=np.float64) for a in (lower, upper, y))
    if not lower.shape == upper.shape == y.shape:
        raise InvalidInputError("lower, upper and y must have equal lengths")
    if y.size == 0:
        raise InvalidInputError("coverage of an empty set is undefined")
    return float(np.mean((y >= lower) & (y <= upper)))


def percentile_summary(values) -> dict:
    """Median and quartiles with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64)
    q25, q50, q75 = np.percentile(v, [25, 50, 75], method="linear")
    return {"median": float(q50), "q25": float(q25), "q75": float(q75)}


def format_number(v: float) -> str:
    """Four decimals with trailing zeros dropped (``1.7300 -> 1.73``)."""
    return np.format_float_positional(round(float(v), 4), trim="-")


def format_cell(summary: dict) -> str:
    return (
        f"{format_number(summary['median'])} "
        f"[{format_number(summary['q25'])}, {format_number(summary['q75'])}]"
    )


@dataclass
class EvalReport:
    """Per-fold scores and their median / interquartile summaries.

    Attributes:
        datasets: Row order of the report.
        models: Column order of the report (also the tie-break order for ranks).
        folds: ``folds[dataset][model]`` is a list of ``{metric: value}``.
        summary: ``summary[dataset][model][metric]`` holds median, q25, q75;
            missing cells are absent.
        ranks: ``ranks[dataset][model]`` based on the median of ``rank_metric``.
        average_rank: Mean rank per model over the datasets where it was ranked.
    """

    datasets: list[str]
    models: list[str]
    rank_metric: str
    folds: dict
    summary: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict)
    average_rank: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        cells = {
            d: {
                m: format_cell(self.summary[d][m][self.rank_metric])
                for m in self.models
                if m in self.summary.get(d, {})
            }
            for d in self.datasets
        }
        return {
            "datasets": self.datasets,
            "models": self.models,
            "rank_metric": self.rank_metric,
            "folds": self.folds,
            "summary": self.summary,
            "cells": cells,
            "ranks": self.ranks,
            "average_rank": self.average_rank,
        }

    def to_text(self) -> str:
        """Aligned plain-text score and rank tables."""
        width = max([len(m) for m in self.models] + [24])
        dw = max([len(d) for d in self.datasets] + [12])
        head = " " * dw + "".join(m.rjust(width + 2) for m in self.models)
        lines = [f"{self.rank_metric} (median [q25, q75])", head]
        for d in self.datasets:
            cells = []
            for m in self.models:
                s = self.summary.get(d, {}).get(m)
                cells.append((format_cell(s[self.rank_metric]) if s else "missing").rjust(width + 2))
            lines.append(d.ljust(dw) + "".join(cells))
        lines += ["", "rank", head]
        for d in self.datasets:
            row = [str(self.ranks.get(d, {}).get(m, "-")).rjust(width + 2) for m in self.models]
            lines.append(d.ljust(dw) + "".join(row))
        avg = [
            (f"{self.average_rank[m]:.1f}" if m in self.average_rank else "-").rjust(width + 2)
            for m in self.models
        ]
        lines.append("Average Rank".ljust(dw) + "".join(avg))
        return "\n".join(lines) + "\n"


def rank_by_median(medians: dict, models: list[str]) -> dict:
    """Ranks 1..n by ascending median; ties keep the order of ``models``."""
    present = [m for m in models if m in medians]
    ordered = sorted(present, key=lambda m: (medians[m], models.index(m)))
    return {m: i + 1 for i, m in enumerate(ordered)}


def average_ranks(ranks: dict, models: list[str]) -> dict:
    out = {}
    for m in models:
        vals = [r[m] for r in ranks.values() if m in r]
        if vals:
            out[m] = float(np.mean(vals))
    return out


def aggregate_report(folds: dict, models: list[str] | None = None,
                     datasets: list[str] | None = None, rank_metric: str = "crps") -> EvalReport:
    """Summarise per-fold scores.

    Args:
        folds: ``folds[dataset][model]`` is a list of per-fold metric dicts.
            Folds whose value for a metric is missing or non-finite are
            ignored for that metric; a cell without any usable fold is
            reported as missing and left out of that dataset's ranking.
        models, datasets: Output order; default to first-seen order.
        rank_metric: Metric whose median drives the ranks.
    """
    datasets = list(datasets or folds.keys())
    if models is None:
        models = []
        for d in datasets:
            for m in folds.get(d, {}):
                if m not in models:
                    models.append(m)
    report = EvalReport(datasets=datasets, models=list(models), rank_metric=rank_metric, folds=folds)
    for d in datasets:
        medians = {}
        for m in models:
            rows = folds.get(d, {}).get(m) or []
            metrics = sorted({k for r in rows for k in r})
            cell = {}
            for k in metrics:
                vals = [r[k] for r in rows if r.get(k) is not None and np.isfinite(r[k])]
                if vals:
                    cell[k] = percentile_summary(vals)
            if rank_metric in cell:
                report.summary.setdefault(d, {})[m] = cell
                medians[m] = cell[rank_metric]["median"]
        if medians:
            report.ranks[d] = rank_by_median(medians, report.models)
    report.average_rank = average_ranks(report.ranks, report.models)
    return report
