"""Metric-based anomaly scoring.

Two stages: a distribution-shift score per service (1-Wasserstein distance
between the normal and abnormal windows of each metric, averaged over
metrics after joint min-max normalization), and a causality weighting that
boosts services whose metrics Granger-cause a downstream neighbor's
metrics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .model import ServiceId, ServiceTopology, TelemetryBundle

logger = logging.getLogger(__name__)


class EmptySeries(ValueError):
    """A distance was requested over an empty sample set."""


class DegenerateSeries(ValueError):
    """A causality test was requested on a constant or too-short series."""


class SingularFit(ValueError):
    """The lag design matrix is rank-deficient (collinear lags)."""


@dataclass(frozen=True)
class GrangerConfig:
    """Causality test settings.

    ``lag_order`` is the number of history lags in both autoregressions,
    ``beta`` is the per-significant-link boost applied to the raw metric
    score of the upstream service.
    """

    lag_order: int = 2
    significance_level: float = 0.05
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.lag_order < 1:
            raise ValueError(f"lag_order must be >= 1, got {self.lag_order}")
        if not 0.0 < self.significance_level < 1.0:
            raise ValueError(f"significance_level must be in (0, 1), got {self.significance_level}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class CausalLink:
    """A directed Granger-causality test result between two services."""

    source: ServiceId
    target: ServiceId
    f_statistic: float
    p_value: float
    significant: bool

    def to_dict(self) -> dict[str, object]:
        return {
            "source": self.source,
            "target": self.target,
            "f_statistic": self.f_statistic,
            "p_value": self.p_value,
            "significant": self.significant,
        }


@dataclass(frozen=True)
class MetricScore:
    """Raw distribution-shift score and its causality-weighted variant."""

    service: ServiceId
    raw: float
    causal: float


@dataclass(frozen=True)
class MetricAnalysis:
    """Everything the metric pipeline produces for one incident."""

    scores: Mapping[ServiceId, MetricScore]
    links: tuple[CausalLink, ...]
    per_metric_distance: Mapping[ServiceId, Mapping[str, float]]
    warnings: tuple[str, ...] = ()

    def raw_scores(self) -> dict[ServiceId, float]:
        return {s: sc.raw for s, sc in self.scores.items()}

    def causal_scores(self) -> dict[ServiceId, float]:
        return {s: sc.causal for s, sc in self.scores.items()}


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """Exact 1-Wasserstein distance between two empirical distributions.

    Computed as the integral of |CDF_a - CDF_b| over the merged sorted
    breakpoints of both samples. Symmetric, non-negative, and zero exactly
    when the two multisets are equal.
    """
    xs = np.asarray(a, dtype=float)
    ys = np.asarray(b, dtype=float)
    if xs.size == 0 or ys.size == 0:
        raise EmptySeries("wasserstein_1d requires two non-empty samples")
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ValueError("wasserstein_1d requires finite values")
    xs.sort()
    ys.sort()
    grid = np.concatenate([xs, ys])
    grid.sort()
    # CDF of each sample evaluated just after every breakpoint.
    cdf_a = np.searchsorted(xs, grid, side="right") / xs.size
    cdf_b = np.searchsorted(ys, grid, side="right") / ys.size
    gaps = np.diff(grid)
    return float(np.sum(np.abs(cdf_a[:-1] - cdf_b[:-1]) * gaps))


def _minmax_joint(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return np.zeros_like(a), np.zeros_like(b)
    return (a - lo) / (hi - lo), (b - lo) / (hi - lo)


def metric_anomaly_scores(
    bundle: TelemetryBundle,
) -> tuple[dict[ServiceId, float], dict[ServiceId, dict[str, float]], list[str]]:
    """Per-service distribution-shift scores.

    For every metric name a service reports in both windows, the two
    windows are jointly min-max normalized to [0, 1] and the 1-Wasserstein
    distance between them is taken; the service score is the mean over its
    metrics. Services with data in only one window score 0 with a warning.

    Returns (scores, per-metric distances, warnings).
    """
    normal: dict[ServiceId, dict[str, np.ndarray]] = {}
    abnormal: dict[ServiceId, dict[str, np.ndarray]] = {}
    for window, store in ((bundle.normal, normal), (bundle.abnormal, abnormal)):
        for series in window.metrics:
            if series.points:
                store.setdefault(series.service, {})[series.metric_name] = np.array(
                    series.values(), dtype=float
                )
    warnings: list[str] = []
    scores: dict[ServiceId, float] = {}
    detail: dict[ServiceId, dict[str, float]] = {}
    for service in sorted(set(normal) | set(abnormal)):
        norm_metrics = normal.get(service, {})
        abn_metrics = abnormal.get(service, {})
        common = sorted(set(norm_metrics) & set(abn_metrics))
        if not common:
            warnings.append(f"service {service}: metrics present in only one window, scored 0")
            logger.warning("service %s has metrics in only one window; scoring 0", service)
            scores[service] = 0.0
            detail[service] = {}
            continue
        per_metric: dict[str, float] = {}
        for name in common:
            a, b = _minmax_joint(norm_metrics[name], abn_metrics[name])
            per_metric[name] = wasserstein_1d(a, b)
        detail[service] = per_metric
        scores[service] = float(sum(per_metric.values()) / len(per_metric))
    return scores, detail, warnings


def _lag_matrix(series: np.ndarray, p: int) -> np.ndarray:
    """Columns [x_{t-1}, ..., x_{t-p}] for t = p..n-1."""
    n = series.size
    return np.column_stack([series[p - k - 1 : n - k - 1] for k in range(p)])


def granger_test(
    cause: Sequence[float],
    effect: Sequence[float],
    cfg: GrangerConfig | None = None,
    source: ServiceId = "cause",
    target: ServiceId = "effect",
) -> CausalLink:
    """F-test for whether ``cause`` Granger-causes ``effect``.

    Fits a restricted autoregression of the effect on ``lag_order`` of its
    own lags (plus intercept) and an unrestricted model adding the same
    number of cause lags, both by least squares. With m = n - p usable
    rows, F = ((RSS_r - RSS_u)/p) / (RSS_u/(m - 2p - 1)) is referred to the
    F(p, m - 2p - 1) distribution.

    Raises ``DegenerateSeries`` for constant or too-short input and
    ``SingularFit`` when the stacked lag columns are collinear.
    """
    cfg = cfg or GrangerConfig()
    x = np.asarray(cause, dtype=float)
    y = np.asarray(effect, dtype=float)
    if x.size != y.size:
        raise ValueError(f"series lengths differ: {x.size} vs {y.size}")
    p = cfg.lag_order
    n = y.size
    if n <= 5 * p:
        raise DegenerateSeries(f"need more than {5 * p} samples for lag order {p}, got {n}")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise DegenerateSeries("constant series cannot be tested for causality")

    rows = n - p
    response = y[p:]
    intercept = np.ones(rows)
    own_lags = _lag_matrix(y, p)
    cause_lags = _lag_matrix(x, p)
    design_r = np.column_stack([intercept, own_lags])
    design_u = np.column_stack([intercept, own_lags, cause_lags])

    coef_r, _, rank_r, _ = np.linalg.lstsq(design_r, response, rcond=None)
    coef_u, _, rank_u, _ = np.linalg.lstsq(design_u, response, rcond=None)
    if rank_u < design_u.shape[1] or rank_r < design_r.shape[1]:
        raise SingularFit("collinear lag columns in causality regression")
    rss_r = float(np.sum((response - design_r @ coef_r) ** 2))
    rss_u = float(np.sum((response - design_u @ coef_u) ** 2))

    df2 = rows - 2 * p - 1
    scale = float(np.sum(response**2)) or 1.0
    if rss_u <= 1e-12 * scale:
        # Essentially perfect unrestricted fit: infinitely strong evidence.
        f_stat = math.inf
        p_value = 0.0
    else:
        f_stat = max(rss_r - rss_u, 0.0) / p / (rss_u / df2)
        p_value = float(_scipy_stats.f.sf(f_stat, p, df2))
    return CausalLink(
        source=source,
        target=target,
        f_statistic=float(f_stat),
        p_value=p_value,
        significant=p_value < cfg.significance_level,
    )


def causal_weighted_scores(
    raw: Mapping[ServiceId, float],
    links: Sequence[CausalLink],
    topo: ServiceTopology,
    cfg: GrangerConfig | None = None,
) -> dict[ServiceId, float]:
    """Boost each raw score by significant causal links onto children.

    score(i) = raw(i) * (1 + sum over children j of beta when the link
    i -> j is significant). Links to non-children are ignored.
    """
    cfg = cfg or GrangerConfig()
    significant = {(l.source, l.target) for l in links if l.significant}
    out: dict[ServiceId, float] = {}
    for service, value in raw.items():
        boost = 0.0
        if service in topo:
            boost = sum(cfg.beta for child in topo.children(service) if (service, child) in significant)
        out[service] = value * (1.0 + boost)
    return out


def _granger_series(
    bundle: TelemetryBundle,
) -> dict[ServiceId, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Per service and metric: (timestamps, values) concatenated over windows."""
    merged: dict[ServiceId, dict[str, tuple[list[int], list[float]]]] = {}
    for window in (bundle.normal, bundle.abnormal):
        for series in window.metrics:
            ts, vals = merged.setdefault(series.service, {}).setdefault(
                series.metric_name, ([], [])
            )
            ts.extend(series.timestamps())
            vals.extend(series.values())
    return {
        svc: {
            name: (np.array(ts, dtype=np.int64), np.array(vals, dtype=float))
            for name, (ts, vals) in metrics.items()
        }
        for svc, metrics in merged.items()
    }


def _align_forward_fill(
    a: tuple[np.ndarray, np.ndarray], b: tuple[np.ndarray, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Sample both series on the union grid of their timestamps, forward-filling."""
    grid = np.union1d(a[0], b[0])

    def fill(ts: np.ndarray, vals: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(ts, grid, side="right") - 1
        idx = np.clip(idx, 0, len(vals) - 1)
        return vals[idx]

    return fill(*a), fill(*b)


def compute_causal_links(
    bundle: TelemetryBundle,
    topo: ServiceTopology,
    cfg: GrangerConfig | None = None,
) -> tuple[list[CausalLink], list[str]]:
    """Granger-test every topology edge in both directions.

    Testing is restricted to adjacent service pairs; for pairs reporting
    several common metric names the most significant result per direction
    is kept. Degenerate or singular fits are skipped with a warning.
    """
    cfg = cfg or GrangerConfig()
    per_service = _granger_series(bundle)
    links: list[CausalLink] = []
    warnings: list[str] = []
    for caller, callee in topo.edges:
        for source, target in ((caller, callee), (callee, caller)):
            src_metrics = per_service.get(source, {})
            tgt_metrics = per_service.get(target, {})
            best: CausalLink | None = None
            for name in sorted(set(src_metrics) & set(tgt_metrics)):
                x, y = _align_forward_fill(src_metrics[name], tgt_metrics[name])
                try:
                    link = granger_test(x, y, cfg, source=source, target=target)
                except (DegenerateSeries, SingularFit) as exc:
                    warnings.append(f"granger {source}->{target} on {name}: {exc}")
                    continue
                if best is None or link.p_value < best.p_value:
                    best = link
            if best is not None:
                links.append(best)
    return links, warnings


def analyze_metrics(
    bundle: TelemetryBundle,
    topo: ServiceTopology,
    cfg: GrangerConfig | None = None,
) -> MetricAnalysis:
    """Full metric pipeline: shift scores, causal links, weighted scores."""
    cfg = cfg or GrangerConfig()
    raw, detail, warnings = metric_anomaly_scores(bundle)
    links, granger_warnings = compute_causal_links(bundle, topo, cfg)
    causal = causal_weighted_scores(raw, links, topo, cfg)
    scores = {
        svc: MetricScore(service=svc, raw=raw[svc], causal=causal[svc]) for svc in sorted(raw)
    }
    return MetricAnalysis(
        scores=scores,
        links=tuple(links),
        per_metric_distance=detail,
        warnings=tuple(warnings + granger_warnings),
    )
