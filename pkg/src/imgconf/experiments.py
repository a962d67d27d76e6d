"""Monte Carlo harness: bias / RMSE of each estimator relative to difference-in-means,
swept over the true kernel width or the confounder noise scale.

Replication ``r`` always draws its images, confounder noise, treatment/outcome noise
and training seed from streams keyed on ``(root seed, r)``. Grid points therefore
share image corpora (paired comparisons), and results do not depend on how the
replications are scheduled.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import dgp
from .dgp import DgpConfig
from .estimators import diff_in_means, ipw_hajek, ipw_ht
from .model import TrainConfig, init_model, predict_propensities, train

log = logging.getLogger(__name__)

BASELINE = "diff_means"
ESTIMATOR_KEYS = ("diff_means", "ipw_ht_oracle", "ipw_hajek_oracle", "ipw_ht_learned", "ipw_hajek_learned")
SweepAxis = Literal["true_width", "noise_sigma", "none"]


@dataclass(frozen=True)
class ModelConfig:
    n_filters: int = 4
    depth: int = 1
    pool: int = 1  # 0 pools the whole map after the last layer

    def pools(self, height: int, width: int) -> list[int]:
        last = max(height, width) if self.pool == 0 else self.pool
        return [1] * (self.depth - 1) + [last]


@dataclass(frozen=True)
class ExperimentSpec:
    dgp: DgpConfig = DgpConfig()
    estimating_kernel_width: int = 8
    replications: int = 200
    estimators: tuple[str, ...] = ESTIMATOR_KEYS
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    eta: float = 0.01
    cross_fit_folds: int = 1
    sweep: SweepAxis = "none"
    grid: tuple[float, ...] = ()
    name: str = "experiment"

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.cross_fit_folds < 1 or self.cross_fit_folds > self.dgp.n_scenes:
            raise ValueError("cross_fit_folds must lie between 1 and n_scenes")
        if self.estimating_kernel_width < 1:
            raise ValueError("estimating_kernel_width must be >= 1")
        unknown = set(self.estimators) - set(ESTIMATOR_KEYS)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        if self.sweep not in ("true_width", "noise_sigma", "none"):
            raise ValueError(f"unknown sweep axis {self.sweep!r}")
        if self.sweep != "none" and not self.grid:
            raise ValueError("a sweep needs a nonempty grid")
        if self.dgp.level == "pixel" and self.model.pool != 1:
            raise ValueError("pixel-level propensity models cannot pool")

    @property
    def needs_training(self) -> bool:
        return any(k.endswith("_learned") for k in self.estimators)

    def at(self, value: float) -> "ExperimentSpec":
        """The single-point spec for one grid value."""
        if self.sweep == "true_width":
            cfg = self.dgp.replace(true_kernel_width=int(value))
        elif self.sweep == "noise_sigma":
            cfg = self.dgp.replace(sigma_u=math.sqrt(value))
        else:
            cfg = self.dgp
        return dataclasses.replace(self, dgp=cfg, sweep="none", grid=())


def fit_learned_propensities(sample: dgp.ConfoundedSample, spec: ExperimentSpec, index: int):
    """Train fresh models on the sample and return (propensities, list of TrainResult).

    With ``cross_fit_folds`` > 1 the scenes are split into folds and each fold's
    propensities come from a model trained on the remaining folds.
    """
    cfg = spec.dgp
    readout = "pixel" if cfg.level == "pixel" else "scene"
    train_rng = dgp.replication_rng(cfg.seed, index, dgp.STREAM_TRAIN)
    targets = sample.treatment_grid()
    n = sample.images.shape[0]
    folds = spec.cross_fit_folds
    assignment = train_rng.permutation(n) % folds if folds > 1 else np.zeros(n, dtype=int)
    per_scene = np.empty(targets.shape)
    results = []
    for k in range(folds):
        model = init_model(
            spec.estimating_kernel_width,
            spec.model.n_filters,
            cfg.image_channels,
            spec.model.depth,
            spec.model.pools(cfg.image_height, cfg.image_width),
            rng=train_rng,
        )
        tcfg = dataclasses.replace(spec.train, seed=int(train_rng.integers(2**63)))
        fit_on = assignment != k if folds > 1 else np.ones(n, dtype=bool)
        predict_on = assignment == k
        result = train(model, sample.images[fit_on], targets[fit_on], tcfg, readout=readout)
        results.append(result)
        p = predict_propensities(result.model, sample.images[predict_on], readout, spec.eta)
        per_scene[predict_on] = p.reshape(per_scene[predict_on].shape)
    return per_scene.ravel(), results


def run_replication(spec: ExperimentSpec, index: int) -> dict[str, float]:
    """tau-hat per requested estimator for replication ``index``."""
    sample = dgp.simulate(spec.dgp, index)
    t, y = sample.treatment, sample.outcome
    out: dict[str, float] = {}
    learned = None
    if spec.needs_training:
        learned, _ = fit_learned_propensities(sample, spec, index)
    for key in spec.estimators:
        if key == "diff_means":
            out[key] = float(diff_in_means(t, y).tau_hat)
            continue
        est = ipw_ht if key.startswith("ipw_ht") else ipw_hajek
        if key.endswith("_oracle"):
            out[key] = float(est(t, y, sample.true_propensity, "oracle").tau_hat)
        else:
            out[key] = float(est(t, y, learned, "learned").tau_hat)
    return out


def _safe_replication(args) -> tuple[int, dict[str, float] | None, str | None]:
    spec, index = args
    try:
        return index, run_replication(spec, index), None
    except Exception as exc:  # recorded per replication, never dropped silently
        return index, None, f"{type(exc).__name__}: {exc}"


@dataclass
class EstimatorMetrics:
    estimator: str
    bias: float
    rmse: float
    rel_bias: float
    rel_rmse: float
    se_bias: float
    se_rmse: float
    se_rel_bias: float
    se_rel_rmse: float
    r_effective: int
    relative_missing: bool = False


@dataclass
class MetricsReport:
    """Metrics for one configuration, with the per-replication estimates kept."""

    tau: float
    estimates: dict[str, np.ndarray]
    failures: list[tuple[int, str]] = field(default_factory=list)
    grid_value: float | None = None

    @property
    def metrics(self) -> dict[str, EstimatorMetrics]:
        return {k: compute_metrics(k, v, self.estimates.get(BASELINE), self.tau) for k, v in self.estimates.items()}

    def __getitem__(self, key: str) -> EstimatorMetrics:
        return self.metrics[key]


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """mean(num)/mean(den) with its delta-method standard error (paired samples)."""
    r = num.size
    m_den = den.mean()
    q = num.mean() / m_den
    if r < 2:
        return q, math.nan
    return q, float(np.std(num - q * den, ddof=1) / math.sqrt(r) / abs(m_den))


def compute_metrics(key: str, tau_hat: np.ndarray, baseline: np.ndarray | None, tau: float) -> EstimatorMetrics:
    e = np.asarray(tau_hat, dtype=np.float64) - tau
    r = e.size
    if r == 0:
        nan = math.nan
        return EstimatorMetrics(key, nan, nan, nan, nan, nan, nan, nan, nan, 0, True)
    bias = abs(float(e.mean()))
    mse = float(np.mean(e**2))
    rmse = math.sqrt(mse)
    se_bias = float(np.std(e, ddof=1) / math.sqrt(r)) if r > 1 else math.nan
    se_mse = float(np.std(e**2, ddof=1) / math.sqrt(r)) if r > 1 else math.nan
    se_rmse = se_mse / (2 * rmse) if rmse > 0 else math.nan
    rel_bias = rel_rmse = se_rel_bias = se_rel_rmse = math.nan
    missing = True
    if baseline is not None:
        e0 = np.asarray(baseline, dtype=np.float64) - tau
        m0, mse0 = float(e0.mean()), float(np.mean(e0**2))
        if m0 != 0 and mse0 != 0:
            missing = False
            q, se_q = _ratio(e, e0)
            rel_bias, se_rel_bias = abs(float(q)), se_q
            q2, se_q2 = _ratio(e**2, e0**2)
            rel_rmse = math.sqrt(float(q2))
            se_rel_rmse = se_q2 / (2 * rel_rmse) if rel_rmse > 0 else math.nan
    return EstimatorMetrics(
        key, bias, rmse, rel_bias, rel_rmse, se_bias, se_rmse, se_rel_bias, se_rel_rmse, r, missing
    )


def monte_carlo(spec: ExperimentSpec, threads: int = 1, grid_value: float | None = None) -> MetricsReport:
    """Run all replications of a single-point spec and collect estimates."""
    if spec.sweep != "none":
        raise ValueError("monte_carlo takes a single-point spec; use a sweep function")
    jobs = [(spec, i) for i in range(spec.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_safe_replication, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        results = [_safe_replication(j) for j in jobs]
    # ordered reduction over replication index
    results.sort(key=lambda r: r[0])
    failures = [(i, msg) for i, est, msg in results if est is None]
    good = [est for _, est, _ in results if est is not None]
    if failures and len(failures) > 0.01 * spec.replications:
        log.warning("%d of %d replications failed; metrics use successes only", len(failures), spec.replications)
    estimates = {k: np.array([g[k] for g in good]) for k in spec.estimators}
    return MetricsReport(spec.dgp.tau, estimates, failures, grid_value)


@dataclass
class SweepReport:
    axis: SweepAxis
    points: list[MetricsReport]

    @property
    def grid(self) -> list[float]:
        return [p.grid_value for p in self.points]

    def series(self, estimator: str, metric: str = "rel_bias") -> np.ndarray:
        return np.array([getattr(p[estimator], metric) for p in self.points])


def sweep(spec: ExperimentSpec, threads: int = 1) -> SweepReport:
    if spec.sweep == "none":
        return SweepReport("none", [monte_carlo(spec, threads)])
    return SweepReport(spec.sweep, [monte_carlo(spec.at(v), threads, v) for v in spec.grid])


def _rel_bias_influence(point: MetricsReport, estimator: str) -> tuple[float, np.ndarray]:
    e = point.estimates[estimator] - point.tau
    e0 = point.estimates[BASELINE] - point.tau
    q = e.mean() / e0.mean()
    return abs(float(q)), np.sign(q) * (e - q * e0) / e0.mean()


def paired_rel_bias_difference(report: SweepReport, estimator: str, lo: int, hi: int) -> tuple[float, float]:
    """rel_bias at grid point ``hi`` minus rel_bias at ``lo``, with a paired delta-method SE.

    Grid points reuse replication indices, so the two ratios are correlated and
    the difference is far more precise than the separate SEs suggest.
    """
    a, b = report.points[lo], report.points[hi]
    if a.failures or b.failures or a.estimates[estimator].size != b.estimates[estimator].size:
        raise ValueError("paired comparison needs the same successful replications at both points")
    q_lo, inf_lo = _rel_bias_influence(a, estimator)
    q_hi, inf_hi = _rel_bias_influence(b, estimator)
    d = inf_hi - inf_lo
    se = float(np.std(d, ddof=1) / math.sqrt(d.size)) if d.size > 1 else math.nan
    return q_hi - q_lo, se


def kernel_width_sweep(spec: ExperimentSpec, grid: Sequence[int] = (2, 4, 8, 16), threads: int = 1) -> SweepReport:
    return sweep(dataclasses.replace(spec, sweep="true_width", grid=tuple(grid)), threads)


def noise_sweep(spec: ExperimentSpec, grid: Sequence[float] = (1, 3, 5, 7), threads: int = 1) -> SweepReport:
    """Sweep over the confounder noise variance sigma_u^2."""
    return sweep(dataclasses.replace(spec, sweep="noise_sigma", grid=tuple(grid)), threads)


METRIC_COLUMNS = [
    "axis", "grid_value", "estimator", "bias", "rmse", "rel_bias", "rel_rmse",
    "se_bias", "se_rmse", "se_rel_bias", "se_rel_rmse", "R_effective", "n_failed", "relative_missing",
]


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def write_metrics_csv(report: SweepReport, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for point in report.points:
            for key, m in point.metrics.items():
                w.writerow([_fmt(v) for v in (
                    report.axis, point.grid_value if point.grid_value is not None else "", key,
                    m.bias, m.rmse, m.rel_bias, m.rel_rmse, m.se_bias, m.se_rmse,
                    m.se_rel_bias, m.se_rel_rmse, m.r_effective, len(point.failures), m.relative_missing,
                )])


def write_plot_csv(report: SweepReport, path: str | Path) -> None:
    """Long format: one row per (grid value, estimator, metric)."""
    x_name = {"true_width": "true_kernel_width", "noise_sigma": "sigma_u_squared", "none": "point"}[report.axis]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([x_name, "estimator", "propensity", "metric", "value", "se"])
        for point in report.points:
            for key, m in point.metrics.items():
                source = key.rsplit("_", 1)[1] if key != BASELINE else "none"
                for metric, value, se in (
                    ("bias", m.bias, m.se_bias),
                    ("rmse", m.rmse, m.se_rmse),
                    ("rel_bias", m.rel_bias, m.se_rel_bias),
                    ("rel_rmse", m.rel_rmse, m.se_rel_rmse),
                ):
                    w.writerow([_fmt(v) for v in (point.grid_value if point.grid_value is not None else 0,
                                                   key, source, metric, value, se)])
