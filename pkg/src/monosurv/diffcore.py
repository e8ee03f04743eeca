"""Value + time-tangent propagation with a reverse pass over both streams.

Every quantity in the network is carried as a :class:`Dual`: its value and its
derivative with respect to the (scaled) time input. Because the likelihood
consumes that derivative (the density is ``d/dt`` of the CDF), parameter
gradients need the mixed second-order terms ``d^2 h / dt dtheta``. Rather than
a generic higher-order autodiff, the :class:`Tape` records the explicitly
unrolled (value, tangent) computation and :func:`reverse_gradients`
backpropagates through it, carrying one adjoint for the value stream and one
for the tangent stream of every slot.

All arrays are float64. Ops are batch-vectorised: a slot's value may be a
scalar, a vector ``(width,)`` or a batch ``(n, width)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, GradientCheckError, UsageError


@dataclass(frozen=True)
class Dual:
    """A value together with its derivative with respect to time."""

    value: np.ndarray
    tangent: np.ndarray

    @classmethod
    def constant(cls, value) -> "Dual":
        value = np.asarray(value, dtype=np.float64)
        return cls(value, np.zeros_like(value))

    @classmethod
    def variable(cls, value, seed: float = 1.0) -> "Dual":
        value = np.asarray(value, dtype=np.float64)
        return cls(value, np.full_like(value, seed))

    def __add__(self, other: "Dual") -> "Dual":
        return Dual(self.value + other.value, self.tangent + other.tangent)


# -- activations -------------------------------------------------------------
# Each entry maps pre-activation x to (y, g'(x), g''(x)).

def stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _tanh(x):
    y = np.tanh(x)
    d1 = 1.0 - y * y
    return y, d1, -2.0 * y * d1


def _sigmoid(x):
    y = stable_sigmoid(x)
    d1 = y * (1.0 - y)
    return y, d1, d1 * (1.0 - 2.0 * y)


def _softplus(x):
    s = stable_sigmoid(x)
    return softplus(x), s, s * (1.0 - s)


ACTIVATIONS = {"tanh": _tanh, "sigmoid": _sigmoid, "softplus": _softplus}


def dual_affine(weights, bias, inputs: Dual) -> Dual:
    """``W v + b`` on the value stream, ``W v'`` on the tangent stream."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or np.shape(inputs.value)[-1:] != weights.shape[1:]:
        raise ConfigurationError(
            f"weight shape {weights.shape} does not match input shape {np.shape(inputs.value)}"
        )
    value = inputs.value @ weights.T
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != weights.shape[:1]:
            raise ConfigurationError(f"bias shape {bias.shape} does not match weights {weights.shape}")
        value = value + bias
    return Dual(value, inputs.tangent @ weights.T)


def dual_activation(kind: str, x: Dual) -> Dual:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    y, d1, _ = fn(x.value)
    return Dual(y, d1 * x.tangent)


# -- tape --------------------------------------------------------------------

@dataclass
class _Param:
    raw: np.ndarray
    square: bool

    @property
    def effective(self):
        return self.raw * self.raw if self.square else self.raw


@dataclass
class _Op:
    kind: str
    out: int
    args: tuple
    cache: tuple = ()


class Tape:
    """Ordered record of primitive ops over value/tangent slots.

    Parameters are registered with :meth:`parameter`; a ``square=True``
    parameter enters every op as ``raw**2`` and its gradient is mapped back to
    the raw value. A tape is finalised by exactly one terminal
    :meth:`scalar_loss` record, after which :func:`reverse_gradients` may run.
    """

    def __init__(self):
        self.params: list[_Param] = []
        self.slots: list[Dual] = []
        self.ops: list[_Op] = []
        self.loss: float | None = None
        self.output: int | None = None
        self._loss_parts: list[tuple[int, np.ndarray, np.ndarray]] | None = None

    @property
    def finalized(self) -> bool:
        return self._loss_parts is not None

    def _push(self, dual: Dual) -> int:
        if self.finalized:
            raise UsageError("tape is finalized; no further ops may be recorded")
        self.slots.append(dual)
        return len(self.slots) - 1

    def parameter(self, raw: np.ndarray, square: bool = False) -> int:
        self.params.append(_Param(np.asarray(raw, dtype=np.float64), square))
        return len(self.params) - 1

    def leaf(self, dual: Dual) -> int:
        out = self._push(dual)
        self.ops.append(_Op("leaf", out, ()))
        return out

    def __getitem__(self, slot: int) -> Dual:
        return self.slots[slot]

    def affine(self, w: int, b: int | None, x: int) -> int:
        W = self.params[w].effective
        bias = None if b is None else self.params[b].effective
        out = self._push(dual_affine(W, bias, self.slots[x]))
        self.ops.append(_Op("affine", out, (w, b, x)))
        return out

    def add(self, a: int, b: int) -> int:
        out = self._push(self.slots[a] + self.slots[b])
        self.ops.append(_Op("add", out, (a, b)))
        return out

    def activation(self, kind: str, x: int) -> int:
        if kind not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {kind!r}")
        src = self.slots[x]
        y, d1, d2 = ACTIVATIONS[kind](src.value)
        out = self._push(Dual(y, d1 * src.tangent))
        self.ops.append(_Op("activation", out, (kind, x), (d1, d2)))
        return out

    def scale(self, mask: np.ndarray, x: int) -> int:
        """Elementwise multiply by a constant (dropout masks)."""
        src = self.slots[x]
        out = self._push(Dual(src.value * mask, src.tangent * mask))
        self.ops.append(_Op("scale", out, (mask, x)))
        return out

    def finite_difference(self, lo: int, hi: int, eps: float) -> int:
        """Value of ``lo`` with tangent replaced by ``(hi - lo) / eps``."""
        a, b = self.slots[lo], self.slots[hi]
        out = self._push(Dual(a.value, (b.value - a.value) / eps))
        self.ops.append(_Op("fd", out, (lo, hi, eps)))
        return out

    def scalar_loss(self, value: float, parts: Sequence[tuple[int, np.ndarray, np.ndarray]]) -> None:
        """Finalise with a scalar loss and its local derivatives.

        ``parts`` holds ``(slot, dloss/dvalue, dloss/dtangent)`` for every slot
        the loss reads.
        """
        if self.finalized:
            raise UsageError("tape already finalized")
        self.loss = float(value)
        self._loss_parts = [(s, _fit(gv, self.slots[s].value), _fit(gd, self.slots[s].value))
                            for s, gv, gd in parts]

    def sum_loss(self, slot: int, stream: str = "value") -> None:
        """Finalise with ``sum(value)`` or ``sum(tangent)`` of one slot."""
        d = self.slots[slot]
        one = np.ones_like(d.value)
        zero = np.zeros_like(d.value)
        if stream == "value":
            self.scalar_loss(np.sum(d.value), [(slot, one, zero)])
        elif stream == "tangent":
            self.scalar_loss(np.sum(d.tangent), [(slot, zero, one)])
        else:
            raise UsageError(f"unknown stream {stream!r}")

    def replay(self) -> list[Dual]:
        """Recompute every slot from the leaves and current parameters."""
        slots: list[Dual] = []
        for op in self.ops:
            if op.kind == "leaf":
                slots.append(self.slots[op.out])
            elif op.kind == "affine":
                w, b, x = op.args
                bias = None if b is None else self.params[b].effective
                slots.append(dual_affine(self.params[w].effective, bias, slots[x]))
            elif op.kind == "add":
                slots.append(slots[op.args[0]] + slots[op.args[1]])
            elif op.kind == "activation":
                slots.append(dual_activation(op.args[0], slots[op.args[1]]))
            elif op.kind == "scale":
                mask, x = op.args
                slots.append(Dual(slots[x].value * mask, slots[x].tangent * mask))
            elif op.kind == "fd":
                lo, hi, eps = op.args
                slots.append(Dual(slots[lo].value, (slots[hi].value - slots[lo].value) / eps))
        return slots

    def n_parameters(self) -> int:
        return sum(p.raw.size for p in self.params)


def _fit(g, like):
    g = np.asarray(g, dtype=np.float64)
    shape = np.shape(like)
    if g.size == int(np.prod(shape)) and g.shape != shape:
        return g.reshape(shape)
    return np.broadcast_to(g, shape)


def _as2d(a, width):
    return np.reshape(a, (-1, width))


def parameter_gradients(tape: Tape, loss_adjoint: float = 1.0) -> list[np.ndarray]:
    """Per-parameter gradient arrays (raw parametrisation), registration order."""
    if not tape.finalized:
        raise UsageError("tape not finalized: record a loss before reverse_gradients")
    n = len(tape.slots)
    adj_v: list = [None] * n
    adj_d: list = [None] * n

    def acc(buf, i, g):
        buf[i] = g if buf[i] is None else buf[i] + g

    for s, gv, gd in tape._loss_parts:
        acc(adj_v, s, loss_adjoint * gv)
        acc(adj_d, s, loss_adjoint * gd)

    grads = [np.zeros_like(p.raw) for p in tape.params]
    eff_grads = [np.zeros(p.raw.shape) for p in tape.params]

    for op in reversed(tape.ops):
        gv, gd = adj_v[op.out], adj_d[op.out]
        if gv is None and gd is None:
            continue
        src_shape = np.shape(tape.slots[op.out].value)
        if gv is None:
            gv = np.zeros(src_shape)
        if gd is None:
            gd = np.zeros(src_shape)

        if op.kind == "affine":
            w, b, x = op.args
            W = tape.params[w].effective
            xin = tape.slots[x]
            n_out, n_in = W.shape
            gv2, gd2 = _as2d(gv, n_out), _as2d(gd, n_out)
            eff_grads[w] += gv2.T @ _as2d(xin.value, n_in) + gd2.T @ _as2d(xin.tangent, n_in)
            if b is not None:
                eff_grads[b] += gv2.sum(axis=0)
            acc(adj_v, x, gv @ W)
            acc(adj_d, x, gd @ W)
        elif op.kind == "add":
            a, b = op.args
            acc(adj_v, a, gv)
            acc(adj_d, a, gd)
            acc(adj_v, b, gv)
            acc(adj_d, b, gd)
        elif op.kind == "activation":
            _, x = op.args
            d1, d2 = op.cache
            # tangent_out = g'(x) * x_dot, so x's value also feels g''(x) * x_dot * gd
            acc(adj_v, x, gv * d1 + gd * d2 * tape.slots[x].tangent)
            acc(adj_d, x, gd * d1)
        elif op.kind == "scale":
            mask, x = op.args
            acc(adj_v, x, gv * mask)
            acc(adj_d, x, gd * mask)
        elif op.kind == "fd":
            lo, hi, eps = op.args
            acc(adj_v, lo, gv - gd / eps)
            acc(adj_v, hi, gd / eps)

    for i, p in enumerate(tape.params):
        grads[i] = 2.0 * p.raw * eff_grads[i] if p.square else eff_grads[i]
    return grads


def reverse_gradients(tape: Tape, loss_adjoint: float = 1.0) -> np.ndarray:
    """Gradient of the tape's loss over all raw parameters, flattened row-major."""
    grads = parameter_gradients(tape, loss_adjoint)
    if not grads:
        return np.zeros(0)
    return np.concatenate([g.ravel() for g in grads])


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(theta)`` returns ``(loss, grad)``. The relative error per
    coordinate is ``|a - c| / (|a| + |c| + 1e-12)``. An empty parameter
    vector checks vacuously and returns 0.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    theta = np.array(params, dtype=np.float64).ravel()
    if theta.size == 0:
        return 0.0
    _, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        lu, _ = loss_fn(up)
        ld, _ = loss_fn(down)
        if not (np.isfinite(lu) and np.isfinite(ld)):
            raise GradientCheckError("non-finite loss at perturbed point", i)
        central = (lu - ld) / (2.0 * step)
        err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
