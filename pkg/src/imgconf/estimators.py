"""Difference-in-means, Horvitz-Thompson and Hajek IPW estimators, and balance checks.

The estimators keep the dtype of their inputs, so object arrays of
``fractions.Fraction`` give exact rational answers.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np

EstimatorId = Literal["diff_means", "ipw_ht", "ipw_hajek"]
PropensitySource = Literal["oracle", "learned", "supplied", "none"]


@dataclass(frozen=True)
class EstimateResult:
    tau_hat: float
    estimator: EstimatorId
    source: PropensitySource
    n_units: int
    ess_treated: float
    ess_control: float


def _arrays(t, y, pihat=None):
    t = np.asarray(t)
    y = np.asarray(y)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("T and Y must be 1-d arrays of equal length")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("treatments must be 0/1")
    if pihat is None:
        return t, y
    p = np.asarray(pihat)
    if p.shape == ():
        p = np.full(t.shape, p.item(), dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError("propensities must have one entry per unit")
    if not np.all((p > 0) & (p < 1)):
        raise ValueError("propensities must lie strictly inside (0, 1); clip upstream")
    return t, y, p


def effective_sample_size(weights) -> float:
    w = np.asarray(weights)
    if w.size == 0:
        return 0.0
    return float(w.sum() ** 2 / (w * w).sum())


def _group_counts(t):
    n1 = int((t == 1).sum())
    n0 = t.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both treatment groups must be nonempty")
    return n1, n0


def diff_in_means(t, y) -> EstimateResult:
    t, y = _arrays(t, y)
    n1, n0 = _group_counts(t)
    tau = y[t == 1].sum() / n1 - y[t == 0].sum() / n0
    return EstimateResult(tau, "diff_means", "none", t.size, float(n1), float(n0))


def ipw_weights(t, pihat):
    """1/pi for treated units, 1/(1-pi) for controls."""
    return np.where(t == 1, 1 / pihat, 1 / (1 - pihat))


def ipw_ht(t, y, pihat, source: PropensitySource = "supplied") -> EstimateResult:
    t, y, p = _arrays(t, y, pihat)
    _group_counts(t)
    terms = t * y / p - (1 - t) * y / (1 - p)
    tau = terms.sum() / t.size
    w = ipw_weights(t, p)
    return EstimateResult(
        tau, "ipw_ht", source, t.size, effective_sample_size(w[t == 1]), effective_sample_size(w[t == 0])
    )


def ipw_hajek(t, y, pihat, source: PropensitySource = "supplied") -> EstimateResult:
    t, y, p = _arrays(t, y, pihat)
    _group_counts(t)
    w = ipw_weights(t, p)
    w1, w0 = w[t == 1], w[t == 0]
    tau = (w1 * y[t == 1]).sum() / w1.sum() - (w0 * y[t == 0]).sum() / w0.sum()
    return EstimateResult(tau, "ipw_hajek", source, t.size, effective_sample_size(w1), effective_sample_size(w0))


ESTIMATORS = {"diff_means": diff_in_means, "ipw_ht": ipw_ht, "ipw_hajek": ipw_hajek}
ALIASES = {"diff": "diff_means", "ht": "ipw_ht", "hajek": "ipw_hajek"}


def run_estimator(name: str, t, y, pihat=None, source: PropensitySource = "supplied") -> EstimateResult:
    name = ALIASES.get(name, name)
    if name == "diff_means":
        return diff_in_means(t, y)
    if name not in ESTIMATORS:
        raise ValueError(f"unknown estimator {name!r}")
    if pihat is None:
        raise ValueError(f"{name} needs propensities")
    return ESTIMATORS[name](t, y, pihat, source)


@dataclass(frozen=True)
class Balance:
    raw: np.ndarray
    weighted: np.ndarray


def balance_diagnostics(t, pihat, x) -> Balance:
    """Raw and Hajek-weighted treated-minus-control covariate mean differences.

    ``x`` is n x p (or a length-n vector for a single covariate).
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("need at least one covariate")
    if x.ndim == 1:
        x = x[:, None]
    t, _, p = _arrays(t, np.zeros(len(t), dtype=x.dtype), pihat)
    if x.shape[0] != t.size:
        raise ValueError("covariates must have one row per unit")
    n1, n0 = _group_counts(t)
    x1, x0 = x[t == 1], x[t == 0]
    raw = x1.sum(axis=0) / n1 - x0.sum(axis=0) / n0
    w = ipw_weights(t, p)
    w1, w0 = w[t == 1], w[t == 0]
    weighted = (w1[:, None] * x1).sum(axis=0) / w1.sum() - (w0[:, None] * x0).sum(axis=0) / w0.sum()
    return Balance(raw, weighted)


RESULT_COLUMNS = ["estimator", "source", "tau_hat", "n", "ess_treated", "ess_control", "seed", "config_id"]


def append_results_csv(path: str | Path, results, seed: int, config_id: str) -> None:
    """Append EstimateResult rows, writing the header if the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(RESULT_COLUMNS)
        for r in results:
            d = asdict(r)
            writer.writerow(
                [d["estimator"], d["source"], repr(float(d["tau_hat"])), d["n_units"],
                 repr(d["ess_treated"]), repr(d["ess_control"]), seed, config_id]
            )
