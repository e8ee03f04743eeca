"""Kaplan-Meier, time-dependent concordance, IPCW Brier score and binomial log-likelihood.

A *predictor* throughout is a callable ``predictor(t, X) -> S(t | X[i])``
evaluated at a single time over the rows of ``X``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import UndefinedMetricError, UsageError

Predictor = Callable[[float, np.ndarray], np.ndarray]
BLL_CLAMP = 1e-15


@dataclass(frozen=True)
class KaplanMeierCurve:
    """Right-continuous product-limit step function (1 before the first event)."""

    event_times: np.ndarray
    survival_values: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.event_times, t, side="right")
        return self._lookup(idx)

    def left(self, t):
        """Left limit ``S(t-)``."""
        idx = np.searchsorted(self.event_times, t, side="left")
        return self._lookup(idx)

    def _lookup(self, idx):
        vals = np.concatenate([[1.0], self.survival_values])[idx]
        return float(vals) if np.ndim(vals) == 0 else vals


def kaplan_meier(times, event_indicators) -> KaplanMeierCurve:
    times = np.asarray(times, dtype=np.float64).ravel()
    events = np.asarray(event_indicators).ravel()
    if times.size == 0:
        raise UsageError("kaplan_meier needs at least one observation")
    if events.shape != times.shape:
        raise UsageError("times and indicators differ in length")
    if not np.all(np.isin(events, (0, 1))):
        raise UsageError("indicators must be 0 or 1")
    uniq, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events.astype(np.float64), minlength=uniq.size)
    counts = np.bincount(inverse, minlength=uniq.size)
    at_risk = times.size - np.concatenate([[0], np.cumsum(counts)[:-1]])
    has_event = deaths > 0
    factors = (at_risk[has_event] - deaths[has_event]) / at_risk[has_event]
    return KaplanMeierCurve(uniq[has_event], np.cumprod(factors))


# -- concordance -------------------------------------------------------------

def concordance_td(predictor: Predictor, test_set: Dataset, ties: str = "strict") -> float:
    """Time-dependent concordance over ordered pairs with ``z_i < z_j, d_i = 1``.

    A pair is concordant when ``S(z_i | x_i) < S(z_i | x_j)``. With
    ``ties="strict"`` tied predictions earn nothing; ``ties="half"`` gives
    them 0.5 credit.
    """
    if ties not in ("strict", "half"):
        raise UsageError(f"unknown tie rule {ties!r}")
    X, z, d = test_set.covariates, test_set.durations, test_set.events
    num = 0.0
    den = 0
    for i in np.flatnonzero(d == 1):
        later = z > z[i]
        n_later = int(later.sum())
        if n_later == 0:
            continue
        surv = np.asarray(predictor(z[i], X))
        own, others = surv[i], surv[later]
        num += np.sum(own < others)
        if ties == "half":
            num += 0.5 * np.sum(own == others)
        den += n_later
    if den == 0:
        raise UndefinedMetricError("no comparable pairs (need z_i < z_j with d_i = 1)")
    return float(num / den)


# -- IPCW scores -------------------------------------------------------------

def _ipcw_parts(t, predictor, test_set, g_hat):
    if len(test_set) == 0:
        raise UsageError("empty test set")
    z, d = test_set.durations, test_set.events
    surv = np.asarray(predictor(t, test_set.covariates), dtype=np.float64)
    dead = (z <= t) & (d == 1)
    alive = z > t
    g_event = np.asarray(g_hat.left(z), dtype=np.float64)
    g_t = float(g_hat(t))
    return surv, dead, alive, g_event, g_t


def _ipcw_score(dead_terms, alive_terms, dead, alive, g_event, g_t, m, return_skipped):
    use_dead = dead & (g_event > 0)
    skipped = int(np.sum(dead & ~(g_event > 0)))
    total = np.sum(dead_terms[use_dead] / g_event[use_dead])
    if g_t > 0:
        total += np.sum(alive_terms[alive]) / g_t
    else:
        skipped += int(alive.sum())
    score = float(total / m)
    return (score, skipped) if return_skipped else score


def brier_score_at(t: float, predictor: Predictor, test_set: Dataset, g_hat: KaplanMeierCurve,
                   return_skipped: bool = False):
    """IPCW Brier score at ``t``.

    Event terms are weighted by ``1 / G(z_i-)`` and at-risk terms by
    ``1 / G(t)``; terms whose weight would be ``1/0`` are skipped and counted.
    """
    surv, dead, alive, g_event, g_t = _ipcw_parts(t, predictor, test_set, g_hat)
    return _ipcw_score(surv ** 2, (1.0 - surv) ** 2, dead, alive, g_event, g_t,
                       len(test_set), return_skipped)


def bll_at(t: float, predictor: Predictor, test_set: Dataset, g_hat: KaplanMeierCurve,
           return_skipped: bool = False):
    """IPCW binomial log-likelihood at ``t`` (S clamped to [1e-15, 1 - 1e-15])."""
    surv, dead, alive, g_event, g_t = _ipcw_parts(t, predictor, test_set, g_hat)
    surv = np.clip(surv, BLL_CLAMP, 1.0 - BLL_CLAMP)
    return _ipcw_score(np.log(1.0 - surv), np.log(surv), dead, alive, g_event, g_t,
                       len(test_set), return_skipped)


def time_grid(z_max: float, grid_size: int = 100) -> np.ndarray:
    return z_max * np.arange(1, grid_size + 1) / grid_size


def integrate_grid(score_fn: Callable[[float], float], z_max: float, grid_size: int = 100) -> float:
    """Mean of ``score_fn`` over ``grid_size`` equally spaced times in ``(0, z_max]``.

    This is the integral over ``[0, z_max]`` divided by ``z_max``.
    """
    if z_max <= 0:
        raise UsageError("z_max must be positive")
    if grid_size < 1:
        raise UsageError("grid_size must be >= 1")
    return float(np.mean([score_fn(t) for t in time_grid(z_max, grid_size)]))


@dataclass
class MetricsReport:
    c_td: float | None
    ibs: float
    ibll: float
    test_nll: float | None
    grid_size: int = 100
    z_max: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        diag = out.pop("diagnostics")
        out.update({f"diag_{k}": v for k, v in diag.items()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_predictions(predictor: Predictor, test_set: Dataset, grid_size: int = 100,
                         ties: str = "strict", test_nll: float | None = None) -> MetricsReport:
    """c_td, IBS and IBLL with the censoring curve fitted on ``test_set`` itself."""
    g_hat = kaplan_meier(test_set.durations, 1 - test_set.events)
    z_max = float(test_set.durations.max())
    skipped = {"bs": 0, "bll": 0}

    def bs(t):
        s, k = brier_score_at(t, predictor, test_set, g_hat, return_skipped=True)
        skipped["bs"] += k
        return s

    def bll(t):
        s, k = bll_at(t, predictor, test_set, g_hat, return_skipped=True)
        skipped["bll"] += k
        return s

    ibs = integrate_grid(bs, z_max, grid_size)
    ibll = integrate_grid(bll, z_max, grid_size)
    diagnostics = {"skipped_bs_terms": skipped["bs"], "skipped_bll_terms": skipped["bll"]}
    try:
        c_td = concordance_td(predictor, test_set, ties)
    except UndefinedMetricError:
        c_td = None
        diagnostics["c_td_undefined"] = True
    return MetricsReport(c_td, ibs, ibll, test_nll, grid_size, z_max, diagnostics)
