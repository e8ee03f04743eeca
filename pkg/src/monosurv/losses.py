"""Censored-data negative log-likelihoods on top of the network heads.

Every loss is a per-record function of ``h`` and its time tangent, so the
local derivatives ``dloss/dh`` and ``dloss/dh_dot`` are written out in closed
form here and handed to the tape as its terminal record. All probabilities
are floored at ``PROB_FLOOR`` inside logarithms; a floored term contributes a
constant and no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .diffcore import Dual, reverse_gradients, softplus, stable_sigmoid
from .errors import InputError, TrainingError, UsageError
from .network import MonotoneNetParams, forward

PROB_FLOOR = 1e-30
LOG_FLOOR = float(np.log(PROB_FLOOR))

OBSERVED, RIGHT, LEFT, INTERVAL = 0, 1, 2, 3
KIND_NAMES = {"observed": OBSERVED, "right": RIGHT, "left": LEFT, "interval": INTERVAL}


@dataclass
class CensoredBatch:
    """Standardised covariates with scaled times.

    For right-censored data only ``durations``/``events`` are needed. The
    general form tags each record with ``kinds``; interval records keep their
    lower bound in ``durations`` and upper bound in ``upper``.
    """

    covariates: np.ndarray
    durations: np.ndarray
    events: np.ndarray
    kinds: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=np.float64))
        self.durations = np.asarray(self.durations, dtype=np.float64).ravel()
        self.events = np.asarray(self.events, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.durations)) and np.all(self.durations >= 0)):
            raise InputError("durations must be finite and non-negative")
        if self.kinds is not None:
            self.kinds = np.asarray(self.kinds, dtype=np.int64).ravel()
            interval = self.kinds == INTERVAL
            if np.any(interval):
                if self.upper is None:
                    raise InputError("interval records need upper bounds")
                self.upper = np.asarray(self.upper, dtype=np.float64).ravel()
                lo, hi = self.durations[interval], self.upper[interval]
                bad = np.flatnonzero(~(lo < hi))
                if bad.size:
                    idx = int(np.flatnonzero(interval)[bad[0]])
                    raise InputError(f"interval record {idx} has lower bound >= upper bound")

    def __len__(self):
        return len(self.durations)

    @classmethod
    def from_dataset(cls, data: Dataset) -> "CensoredBatch":
        return cls(data.covariates, data.durations, data.events)

    def subset(self, index) -> "CensoredBatch":
        kinds = None if self.kinds is None else self.kinds[index]
        upper = None if self.upper is None else self.upper[index]
        return CensoredBatch(self.covariates[index], self.durations[index], self.events[index], kinds, upper)


# -- output-level formulas ---------------------------------------------------

def _floor_log(p):
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(np.asarray(p, dtype=np.float64)), LOG_FLOOR)


def nll_from_survival(survival, density, events) -> np.ndarray:
    """Per-record ``-[d log f + (1 - d) log S]``."""
    d = np.asarray(events, dtype=np.float64)
    return -(d * _floor_log(density) + (1.0 - d) * _floor_log(survival))


def nll_from_hazard(hazard_rate, cumulative_hazard, events) -> np.ndarray:
    """Per-record ``-[d log lambda - Lambda]``."""
    d = np.asarray(events, dtype=np.float64)
    log_surv = np.maximum(-np.asarray(cumulative_hazard, dtype=np.float64), LOG_FLOOR)
    return -(d * _floor_log(hazard_rate) + log_surv)


# -- log terms with local derivatives ---------------------------------------

def _floored(val, dh, dhd):
    low = ~(val > LOG_FLOOR)  # also catches nan/-inf
    return np.where(low, LOG_FLOOR, val), np.where(low, 0.0, dh), np.where(low, 0.0, dhd)


def _log_hdot(hd):
    pos = hd > 0
    with np.errstate(divide="ignore"):
        val = np.where(pos, np.log(np.where(pos, hd, 1.0)), -np.inf)
        inv = np.where(pos, 1.0 / np.where(pos, hd, 1.0), 0.0)
    return val, inv


def log_survival(h: Dual, head: str):
    hv = h.value
    zero = np.zeros_like(hv)
    # both heads: d/dh log S = -sigmoid(h)
    return _floored(-softplus(hv), -stable_sigmoid(hv), zero)


def log_cdf(h: Dual, head: str):
    hv = h.value
    zero = np.zeros_like(hv)
    if head == "survival":
        return _floored(-softplus(-hv), stable_sigmoid(-hv), zero)
    cum = softplus(hv)
    with np.errstate(divide="ignore", over="ignore"):
        val = np.log(-np.expm1(-cum))
        dh = stable_sigmoid(hv) / np.expm1(cum)
    return _floored(val, dh, zero)


def log_density(h: Dual, head: str):
    hv = h.value
    lhd, inv = _log_hdot(h.tangent)
    if head == "survival":
        val = -softplus(-hv) - softplus(hv) + lhd
    else:
        val = -softplus(-hv) + lhd - softplus(hv)
    return _floored(val, 1.0 - 2.0 * stable_sigmoid(hv), inv)


def log_hazard(h: Dual, head: str):
    hv = h.value
    lhd, inv = _log_hdot(h.tangent)
    return _floored(-softplus(-hv) + lhd, stable_sigmoid(-hv), inv)


def _survival_and_slope(h: Dual, head: str):
    """S and dS/dh for either head."""
    hv = h.value
    if head == "survival":
        s = stable_sigmoid(-hv)
        return s, -s * stable_sigmoid(hv)
    s = np.exp(-softplus(hv))
    return s, -s * stable_sigmoid(hv)


def log_interval(h1: Dual, h2: Dual, head: str):
    s1, g1 = _survival_and_slope(h1, head)
    s2, g2 = _survival_and_slope(h2, head)
    gap = s1 - s2
    ok = gap > PROB_FLOOR
    safe = np.where(ok, gap, 1.0)
    val = np.where(ok, np.log(safe), LOG_FLOOR)
    return val, np.where(ok, g1 / safe, 0.0), np.where(ok, -g2 / safe, 0.0)


# -- network-level losses ----------------------------------------------------

def _check_finite(per_record, *duals):
    # flooring would hide nan network outputs, so test them directly
    ok = np.isfinite(per_record)
    for h in duals:
        ok &= np.isfinite(h.value) & np.isfinite(h.tangent)
    bad = np.flatnonzero(~ok)
    if bad.size:
        raise TrainingError("non-finite loss", record_index=int(bad[0]))


def right_censored_terms(h: Dual, events, head: str):
    """Per-record loss and its derivatives w.r.t. ``h`` and ``h_dot``."""
    d = np.asarray(events, dtype=np.float64)
    ls, ls_h, ls_d = log_survival(h, head)
    if head == "survival":
        lf, lf_h, lf_d = log_density(h, head)
        loss = -(d * lf + (1.0 - d) * ls)
        return loss, -(d * lf_h + (1.0 - d) * ls_h), -(d * lf_d + (1.0 - d) * ls_d)
    lh, lh_h, lh_d = log_hazard(h, head)
    return -(d * lh + ls), -(d * lh_h + ls_h), -(d * lh_d + ls_d)


def nll_right_censored(params: MonotoneNetParams, batch: CensoredBatch, train_mode: bool = False,
                       dropout_seed: int = 0, with_grad: bool = True):
    """Mean NLL over the batch and its gradient over raw parameters.

    The survival head uses the density/survival form of the likelihood and
    the hazard head the hazard/cumulative-hazard form.
    """
    n = len(batch)
    if n == 0:
        raise UsageError("empty batch")
    h, tape = forward(params, batch.durations, batch.covariates, train_mode, dropout_seed)
    per, gh, ghd = right_censored_terms(h, batch.events, params.config.head)
    _check_finite(per, h)
    loss = float(np.mean(per))
    if not with_grad:
        return loss, None
    tape.scalar_loss(loss, [(tape.output, gh / n, ghd / n)])
    return loss, reverse_gradients(tape)


def nll_general_censoring(params: MonotoneNetParams, batch: CensoredBatch, with_grad: bool = True):
    """Mean NLL for a mix of observed, right-, left- and interval-censored records."""
    n = len(batch)
    if n == 0:
        raise UsageError("empty batch")
    if batch.kinds is None:
        raise UsageError("general censoring needs a kind tag per record")
    head = params.config.head
    kinds = batch.kinds
    h, tape = forward(params, batch.durations, batch.covariates)
    per = np.zeros(n)
    gh = np.zeros(n)
    ghd = np.zeros(n)
    for kind, fn in ((OBSERVED, log_density), (RIGHT, log_survival), (LEFT, log_cdf)):
        sel = kinds == kind
        if np.any(sel):
            v, a, b = fn(h, head)
            per[sel], gh[sel], ghd[sel] = -v[sel], -a[sel], -b[sel]
    interval = np.flatnonzero(kinds == INTERVAL)
    tape2 = None
    if interval.size:
        h2, tape2 = forward(params, batch.upper[interval], batch.covariates[interval])
        h1 = Dual(h.value[interval], h.tangent[interval])
        v, g1, g2 = log_interval(h1, h2, head)
        per[interval], gh[interval] = -v, -g1
        g2h = -g2
        per[interval] = np.where(np.isfinite(h2.value) & np.isfinite(h2.tangent), per[interval], np.nan)
    _check_finite(per, h)
    loss = float(np.mean(per))
    if not with_grad:
        return loss, None
    tape.scalar_loss(loss, [(tape.output, gh / n, ghd / n)])
    grad = reverse_gradients(tape)
    if tape2 is not None:
        tape2.scalar_loss(loss, [(tape2.output, g2h / n, np.zeros_like(g2h))])
        grad = grad + reverse_gradients(tape2)
    return loss, grad
