"""Partially monotonic survival network.

``h(t, x) = mixed(t, cov(x))``: a tanh covariate subnetwork produces ``u``,
and a tanh mixed subnetwork with a linear scalar output consumes ``(t, u)``.
Every weight downstream of ``t`` (the t column of the first mixed layer and
all weights of later mixed layers, output included) is stored raw and used
squared, so ``dh/dt >= 0`` for every parameter value.

Two heads turn ``h`` into a distribution: ``survival`` (S = 1 - sigmoid(h))
and ``hazard`` (cumulative hazard = softplus(h), S = exp(-cumulative hazard)).
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import PreprocessStats
from .diffcore import Dual, Tape, softplus, stable_sigmoid
from .errors import ConfigurationError, InputError

log = logging.getLogger(__name__)

HEADS = ("survival", "hazard")
DENSITY_MODES = ("exact", "finite_difference")
FORMAT_NAME = "monosurv-model"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    covariate_dim: int
    cov_widths: tuple[int, ...] = (16,)
    mixed_widths: tuple[int, ...] = (16, 16)
    head: str = "survival"
    dropout_rate: float = 0.0
    dropout_mixed: bool = True
    density: str = "exact"
    fd_eps: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "cov_widths", tuple(int(w) for w in self.cov_widths))
        object.__setattr__(self, "mixed_widths", tuple(int(w) for w in self.mixed_widths))
        if self.covariate_dim < 1:
            raise ConfigurationError("covariate_dim must be >= 1")
        if not self.mixed_widths:
            raise ConfigurationError("the mixed subnetwork needs at least one hidden layer")
        if any(w < 1 for w in self.cov_widths + self.mixed_widths):
            raise ConfigurationError("all layer widths must be >= 1")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.density not in DENSITY_MODES:
            raise ConfigurationError(f"density must be one of {DENSITY_MODES}")
        if self.fd_eps <= 0:
            raise ConfigurationError("fd_eps must be positive")

    @property
    def cov_layers(self) -> int:
        return len(self.cov_widths)

    @property
    def mixed_layers(self) -> int:
        return len(self.mixed_widths)

    @property
    def universal(self) -> bool:
        # monotone universal approximation needs >= 2 hidden mixed layers
        return self.mixed_layers >= 2

    @property
    def u_dim(self) -> int:
        return self.cov_widths[-1] if self.cov_widths else self.covariate_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cov_widths"] = list(self.cov_widths)
        d["mixed_widths"] = list(self.mixed_widths)
        return d


@dataclass
class MonotoneNetParams:
    """Raw parameter arrays of both subnetworks plus preprocessing statistics.

    ``mixed_t_raw``, and every array in ``mixed_inner_raw``, enter the network
    squared. ``mixed_inner_raw[-1]`` is the ``(1, width)`` output layer.
    ``mixed_biases`` has one entry per hidden mixed layer plus the output bias.
    """

    config: NetworkConfig
    cov_weights: list[np.ndarray]
    cov_biases: list[np.ndarray]
    mixed_t_raw: np.ndarray
    mixed_u_weights: np.ndarray
    mixed_inner_raw: list[np.ndarray]
    mixed_biases: list[np.ndarray]
    preprocessing: PreprocessStats | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray, bool]]:
        """``(name, array, constrained)`` in the canonical flattening order."""
        out = []
        for i, (w, b) in enumerate(zip(self.cov_weights, self.cov_biases)):
            out.append((f"cov_weights.{i}", w, False))
            out.append((f"cov_biases.{i}", b, False))
        out.append(("mixed_t_raw", self.mixed_t_raw, True))
        out.append(("mixed_u_weights", self.mixed_u_weights, False))
        for i, w in enumerate(self.mixed_inner_raw):
            out.append((f"mixed_inner_raw.{i}", w, True))
        for i, b in enumerate(self.mixed_biases):
            out.append((f"mixed_biases.{i}", b, False))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a, _ in self.named_arrays()])

    def constrained_mask(self) -> np.ndarray:
        return np.concatenate([np.full(a.size, c) for _, a, c in self.named_arrays()])

    def weight_mask(self) -> np.ndarray:
        """True for unconstrained weight matrices (the weight-decay set)."""
        return np.concatenate([np.full(a.size, (not c) and "biases" not in name)
                               for name, a, c in self.named_arrays()])

    @property
    def n_parameters(self) -> int:
        return sum(a.size for _, a, _ in self.named_arrays())

    def with_flat(self, theta) -> "MonotoneNetParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_parameters:
            raise InputError(f"expected {self.n_parameters} parameters, got {theta.size}")
        arrays, pos = [], 0
        for _, a, _ in self.named_arrays():
            arrays.append(theta[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self._from_arrays(arrays)

    def _from_arrays(self, arrays) -> "MonotoneNetParams":
        it = iter(arrays)
        cw, cb = [], []
        for _ in self.cov_weights:
            cw.append(next(it))
            cb.append(next(it))
        t_raw = next(it)
        u_w = next(it)
        inner = [next(it) for _ in self.mixed_inner_raw]
        biases = [next(it) for _ in self.mixed_biases]
        return MonotoneNetParams(self.config, cw, cb, t_raw, u_w, inner, biases, self.preprocessing)

    def copy(self) -> "MonotoneNetParams":
        return self.with_flat(self.flat())

    def effective_constrained(self) -> list[np.ndarray]:
        return [self.mixed_t_raw ** 2] + [w ** 2 for w in self.mixed_inner_raw]

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "arrays": [{"name": name, "shape": list(a.shape), "data": [float(v) for v in a.ravel()]}
                       for name, a, _ in self.named_arrays()],
            "preprocessing": None if self.preprocessing is None else self.preprocessing.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MonotoneNetParams":
        if doc.get("format") != FORMAT_NAME:
            raise InputError("not a model document")
        if doc.get("version") != FORMAT_VERSION:
            raise InputError(f"unsupported model version {doc.get('version')!r}")
        config = NetworkConfig(**doc["config"])
        template = zero_params(config)
        names = [n for n, _, _ in template.named_arrays()]
        by_name = {a["name"]: a for a in doc["arrays"]}
        if sorted(by_name) != sorted(names):
            raise InputError("model arrays do not match its configuration")
        arrays = []
        for name, ref, _ in template.named_arrays():
            entry = by_name[name]
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if arr.shape != ref.shape:
                raise InputError(f"array {name} has shape {arr.shape}, expected {ref.shape}")
            arrays.append(arr)
        params = template._from_arrays(arrays)
        if doc.get("preprocessing") is not None:
            params.preprocessing = PreprocessStats.from_dict(doc["preprocessing"])
        return params


def save_model(params: MonotoneNetParams, path) -> None:
    # json emits the shortest repr that round-trips each double exactly
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(params.to_dict(), fh)
    os.replace(tmp, path)


def load_model(path) -> MonotoneNetParams:
    try:
        with open(path) as fh:
            return MonotoneNetParams.from_dict(json.load(fh))
    except FileNotFoundError:
        raise InputError(f"model file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed model file {path}: {exc}") from None


# -- construction ------------------------------------------------------------

def _layer_shapes(config: NetworkConfig):
    cov, fan = [], config.covariate_dim
    for w in config.cov_widths:
        cov.append((w, fan))
        fan = w
    widths = config.mixed_widths
    inner = [(widths[i], widths[i - 1]) for i in range(1, len(widths))] + [(1, widths[-1])]
    return cov, inner


def zero_params(config: NetworkConfig) -> MonotoneNetParams:
    cov, inner = _layer_shapes(config)
    n1 = config.mixed_widths[0]
    return MonotoneNetParams(
        config,
        [np.zeros(s) for s in cov],
        [np.zeros(s[0]) for s in cov],
        np.zeros(n1),
        np.zeros((n1, config.u_dim)),
        [np.zeros(s) for s in inner],
        [np.zeros(w) for w in config.mixed_widths] + [np.zeros(1)],
    )


def init_params(config: NetworkConfig, seed: int) -> MonotoneNetParams:
    """Seeded initialisation.

    Unconstrained weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)). Constrained
    raw values have magnitude U[0.3, 1.0] * fan_in**-0.25 and a random sign,
    which keeps them clear of raw = 0 where the squared weight has zero
    gradient. Biases start at zero.
    """
    if not config.universal:
        log.warning("mixed subnetwork has %d hidden layer(s); fewer than 2 is not a universal "
                    "approximator for monotone functions", config.mixed_layers)
    rng = np.random.default_rng(seed)
    p = zero_params(config)

    def unconstrained(shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def constrained(shape, fan_in):
        mag = rng.uniform(0.3, 1.0, size=shape) * fan_in ** -0.25
        return mag * rng.choice([-1.0, 1.0], size=shape)

    p.cov_weights = [unconstrained(w.shape, w.shape[1]) for w in p.cov_weights]
    fan1 = 1 + config.u_dim
    p.mixed_t_raw = constrained(p.mixed_t_raw.shape, fan1)
    p.mixed_u_weights = unconstrained(p.mixed_u_weights.shape, fan1)
    p.mixed_inner_raw = [constrained(w.shape, w.shape[1]) for w in p.mixed_inner_raw]
    return p


# -- forward -----------------------------------------------------------------

def _as_batch(t, x, p_dim):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p_dim:
        raise InputError(f"covariates must have length {p_dim}, got shape {np.shape(x)}")
    if t.ndim != 1:
        raise InputError("t must be a scalar or a 1-d array")
    n = max(len(t), len(x))
    if len(t) not in (1, n) or len(x) not in (1, n):
        raise InputError(f"cannot broadcast {len(t)} times against {len(x)} covariate rows")
    t = np.broadcast_to(t, (n,))
    x = np.broadcast_to(x, (n, p_dim))
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x))):
        raise InputError("non-finite time or covariate input")
    return t, x


def _dropout_masks(config: NetworkConfig, n: int, seed: int):
    rate = config.dropout_rate
    rng = np.random.default_rng(seed)
    keep = 1.0 - rate
    cov = [(rng.random((n, w)) >= rate) / keep for w in config.cov_widths]
    mixed = [(rng.random((n, w)) >= rate) / keep if config.dropout_mixed else None
             for w in config.mixed_widths]
    return cov, mixed


def _register(tape: Tape, params: MonotoneNetParams) -> dict:
    # mixed_t_raw is stored (n1,); the affine op wants an (n1, 1) column
    return {name: tape.parameter(a.reshape(-1, 1) if name == "mixed_t_raw" else a, square=c)
            for name, a, c in params.named_arrays()}


def _pass(tape: Tape, params: MonotoneNetParams, pid: dict, t, x, tangent_seed, masks) -> int:
    cfg = params.config
    u = tape.leaf(Dual.constant(x))
    for i in range(cfg.cov_layers):
        u = tape.activation("tanh", tape.affine(pid[f"cov_weights.{i}"], pid[f"cov_biases.{i}"], u))
        if masks is not None:
            u = tape.scale(masks[0][i], u)
    ts = tape.leaf(Dual.variable(t[:, None], tangent_seed))
    pre = tape.add(tape.affine(pid["mixed_t_raw"], pid["mixed_biases.0"], ts),
                   tape.affine(pid["mixed_u_weights"], None, u))
    v = tape.activation("tanh", pre)
    if masks is not None and masks[1][0] is not None:
        v = tape.scale(masks[1][0], v)
    for i in range(1, cfg.mixed_layers):
        v = tape.activation("tanh", tape.affine(pid[f"mixed_inner_raw.{i - 1}"], pid[f"mixed_biases.{i}"], v))
        if masks is not None and masks[1][i] is not None:
            v = tape.scale(masks[1][i], v)
    last = cfg.mixed_layers
    return tape.affine(pid[f"mixed_inner_raw.{last - 1}"], pid[f"mixed_biases.{last}"], v)


def forward(params: MonotoneNetParams, t, x, train_mode: bool = False, dropout_seed: int = 0,
            tangent_seed: float = 1.0, density: str | None = None) -> tuple[Dual, Tape]:
    """Evaluate ``h`` and ``dh/dt`` on scaled time and standardised covariates.

    ``t`` and ``x`` broadcast against each other along the batch axis. Returns
    ``h`` as a :class:`Dual` of shape ``(n,)`` and the recording tape; the
    output slot is ``tape.output``. With ``density="finite_difference"`` the
    tangent is ``(h(t + eps) - h(t)) / eps`` from a second pass instead.
    """
    cfg = params.config
    t, x = _as_batch(t, x, cfg.covariate_dim)
    density = density or cfg.density
    tape = Tape()
    pid = _register(tape, params)
    masks = None
    if train_mode and cfg.dropout_rate > 0:
        masks = _dropout_masks(cfg, len(t), dropout_seed)
    out = _pass(tape, params, pid, t, x, tangent_seed, masks)
    if density == "finite_difference":
        hi = _pass(tape, params, pid, t + cfg.fd_eps, x, tangent_seed, masks)
        out = tape.finite_difference(out, hi, cfg.fd_eps)
    tape.output = out
    h = tape[out]
    return Dual(h.value.reshape(-1), h.tangent.reshape(-1)), tape


@dataclass
class HeadOutput:
    survival: np.ndarray
    density: np.ndarray
    cumulative_hazard: np.ndarray | None = None
    hazard_rate: np.ndarray | None = None


def head_transform(h: Dual, head: str) -> HeadOutput:
    """Map ``h`` (with its time tangent) to survival, density and hazards."""
    hv = np.asarray(h.value, dtype=np.float64)
    hd = np.asarray(h.tangent, dtype=np.float64)
    if head == "survival":
        s = stable_sigmoid(hv)
        return HeadOutput(survival=stable_sigmoid(-hv), density=s * (1.0 - s) * hd)
    if head == "hazard":
        cum = softplus(hv)
        surv = np.exp(-cum)
        rate = stable_sigmoid(hv) * hd
        return HeadOutput(survival=surv, density=rate * surv, cumulative_hazard=cum, hazard_rate=rate)
    raise ConfigurationError(f"unknown head {head!r}")


def _scaled_inputs(params: MonotoneNetParams, x_raw, t_raw):
    stats = params.preprocessing
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.shape[-1:] != (params.config.covariate_dim,):
        raise InputError(f"expected {params.config.covariate_dim} covariates, got shape {x_raw.shape}")
    if stats is None:
        return np.asarray(t_raw, dtype=np.float64), x_raw
    return stats.transform_times(t_raw), stats.transform_covariates(x_raw)


def predict_output(params: MonotoneNetParams, x_raw, t_raw) -> HeadOutput:
    """Head outputs in original units (density and hazard rate per original time unit)."""
    t, x = _scaled_inputs(params, x_raw, t_raw)
    h, _ = forward(params, t, x)
    out = head_transform(h, params.config.head)
    scale = params.preprocessing.time_scale if params.preprocessing is not None else 1.0
    out.density = out.density / scale
    if out.hazard_rate is not None:
        out.hazard_rate = out.hazard_rate / scale
    return out


def predict_survival(params: MonotoneNetParams, x_raw, t_raw):
    """S(t | x) by one forward pass; scalar in, scalar out, else arrays broadcast."""
    surv = predict_output(params, x_raw, t_raw).survival
    if np.ndim(x_raw) <= 1 and np.ndim(t_raw) == 0:
        return float(surv[0])
    return surv


def predict_curve(params: MonotoneNetParams, x_raw, t_grid) -> np.ndarray:
    t_grid = np.asarray(t_grid, dtype=np.float64).ravel()
    if np.any(np.diff(t_grid) < 0):
        raise InputError("time grid must be ascending")
    if np.ndim(x_raw) != 1:
        raise InputError("predict_curve takes a single covariate vector")
    return predict_output(params, x_raw, t_grid).survival


def survival_predictor(params: MonotoneNetParams):
    """Callable ``(t, X) -> S(t | X[i])`` over rows of ``X`` in original units."""
    def predictor(t, X):
        return predict_output(params, X, t).survival
    return predictor
