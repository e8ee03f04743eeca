"""Mini-batch likelihood training, random hyperparameter search and evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import Dataset, apply_preprocess, fit_preprocess
from .errors import ConfigurationError, TrainingError, UsageError
from .losses import CensoredBatch, nll_right_censored
from .metrics import MetricsReport, evaluate_predictions
from .network import MonotoneNetParams, NetworkConfig, init_params, survival_predictor

log = logging.getLogger(__name__)

WEIGHT_DECAYS = [0.4, 0.2, 0.1, 0.05, 0.02, 0.01, 0.0]
LEARNING_RATES = [1e-2, 1e-3, 1e-4]

# Search spaces. A dict value {"low": a, "high": b} is a continuous range.
SMALL_GRID = {
    "mixed_layers": [1, 2],
    "cov_layers": [1, 2],
    "nodes": [8, 16, 32],
    "cov_nodes": [8, 16, 32],
    "dropout": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    "weight_decay": WEIGHT_DECAYS,
    "batch_size": [5, 10, 25, 50, 100, 250],
    "learning_rate": LEARNING_RATES,
    "head": ["survival", "hazard"],
}
LARGE_GRID = {
    "mixed_layers": [1, 2, 4],
    "cov_layers": [4, 6, 8],
    "nodes": [8, 16, 32, 64],
    "cov_nodes": [128, 256, 512],
    "dropout": {"low": 0.0, "high": 0.7},
    "weight_decay": WEIGHT_DECAYS,
    "batch_size": [1000, 2500, 5000],
    "learning_rate": LEARNING_RATES,
    "head": ["survival", "hazard"],
}
GRIDS = {"small": SMALL_GRID, "large": LARGE_GRID}


@dataclass(frozen=True)
class HyperParams:
    mixed_layers: int = 2
    cov_layers: int = 1
    nodes: int = 16
    cov_nodes: int = 16
    dropout: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 100
    learning_rate: float = 1e-3
    head: str = "survival"

    def network_config(self, covariate_dim: int, **overrides) -> NetworkConfig:
        return NetworkConfig(
            covariate_dim=covariate_dim,
            cov_widths=(self.cov_nodes,) * self.cov_layers,
            mixed_widths=(self.nodes,) * self.mixed_layers,
            head=self.head,
            dropout_rate=self.dropout,
            **overrides,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**doc)


def in_grid(hp: HyperParams, grid: dict) -> bool:
    for name, space in grid.items():
        v = getattr(hp, name)
        if isinstance(space, dict):
            if not space["low"] <= v <= space["high"]:
                return False
        elif v not in space:
            return False
    return True


def sample_hyperparams(grid: dict, rng: np.random.Generator) -> HyperParams:
    values = {}
    for name in sorted(grid):
        space = grid[name]
        if name not in HyperParams.__dataclass_fields__:
            raise ConfigurationError(f"unknown hyperparameter in grid: {name!r}")
        if isinstance(space, dict):
            values[name] = float(rng.uniform(space["low"], space["high"]))
        else:
            v = space[int(rng.integers(len(space)))]
            values[name] = v.item() if hasattr(v, "item") else v
    return HyperParams(**values)


def load_grid(name: str) -> dict:
    """A grid by name (``small``/``large``) or from a JSON document."""
    if name in GRIDS:
        return GRIDS[name]
    with open(name) as fh:
        return json.load(fh)


# -- optimisation ------------------------------------------------------------

class Adam:
    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainReport:
    train_nll: list[float]
    val_nll: list[float]
    best_epoch: int
    best_val_nll: float
    stopping_reason: str
    seed: int
    learning_rate: float
    lr_halved: bool = False
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _seeds(seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def mean_nll(params: MonotoneNetParams, data: CensoredBatch) -> float:
    return nll_right_censored(params, data, with_grad=False)[0]


def train_model(config: NetworkConfig | None, hyperparams: HyperParams, train: Dataset,
                validation: Dataset, seed: int, max_epochs: int = 200, patience: int = 10,
                decay_constrained: bool = False) -> tuple[MonotoneNetParams, TrainReport]:
    """Fit by Adam on the mean right-censored NLL with early stopping.

    Both datasets are given in original units; preprocessing statistics are
    fitted on ``train``, applied to both, and stored in the returned
    parameters. Weight decay (coupled L2, ``grad += wd * w``) touches the
    unconstrained weight matrices only unless ``decay_constrained``. Returns
    the parameters of the epoch with the lowest validation NLL; epoch 0 is
    the initialisation.
    """
    started = time.perf_counter()
    if len(train) == 0 or len(validation) == 0:
        raise UsageError("train and validation sets must be non-empty")
    if config is None:
        config = hyperparams.network_config(train.n_covariates)
    if config.covariate_dim != train.n_covariates:
        raise ConfigurationError("config covariate_dim does not match the data")
    init_seed, shuffle_seed, dropout_seed = _seeds(seed, 3)
    stats = fit_preprocess(train)
    tr = CensoredBatch.from_dataset(apply_preprocess(stats, train))
    va = CensoredBatch.from_dataset(apply_preprocess(stats, validation))
    params = init_params(config, init_seed)
    params.preprocessing = stats

    decay = params.weight_mask()
    if decay_constrained:
        decay = decay | params.constrained_mask()
    decay = hyperparams.weight_decay * decay.astype(np.float64)

    lr = hyperparams.learning_rate
    shuffler = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    batch_size = max(1, min(int(hyperparams.batch_size), len(tr)))

    theta = params.flat()
    adam = Adam(theta.size, lr)
    train_hist = [mean_nll(params, tr)]
    val_hist = [mean_nll(params, va)]
    best_theta, best_val, best_epoch = theta.copy(), val_hist[0], 0
    halved = False
    reason = "max_epochs"
    waited = 0
    epoch = 0
    while epoch < max_epochs:
        epoch_start = theta.copy()
        order = shuffler.permutation(len(tr))
        try:
            for start in range(0, len(tr), batch_size):
                batch = tr.subset(order[start:start + batch_size])
                _, grad = nll_right_censored(params.with_flat(theta), batch, train_mode=True,
                                             dropout_seed=int(dropout_rng.integers(2 ** 63)))
                grad = grad + decay * theta
                theta = adam.step(theta, grad)
                if not np.all(np.isfinite(theta)):
                    raise TrainingError("non-finite parameters after update")
            current = params.with_flat(theta)
            tr_loss, va_loss = mean_nll(current, tr), mean_nll(current, va)
            if not (math.isfinite(tr_loss) and math.isfinite(va_loss)):
                raise TrainingError("non-finite epoch loss")
        except TrainingError as exc:
            if halved:
                raise TrainingError(
                    f"training diverged after learning-rate halving: {exc}",
                    diagnostics={"epoch": epoch + 1, "learning_rate": lr, "train_nll": train_hist,
                                 "val_nll": val_hist},
                ) from exc
            log.warning("non-finite loss in epoch %d; halving learning rate to %g", epoch + 1, lr / 2)
            halved = True
            lr /= 2
            theta = epoch_start
            adam = Adam(theta.size, lr)
            continue
        epoch += 1
        train_hist.append(tr_loss)
        val_hist.append(va_loss)
        log.debug("epoch %d train %.6f val %.6f", epoch, tr_loss, va_loss)
        if va_loss < best_val:
            best_theta, best_val, best_epoch = theta.copy(), va_loss, epoch
            waited = 0
        else:
            waited += 1
            if waited >= patience:
                reason = "patience"
                break

    report = TrainReport(train_hist, val_hist, best_epoch, best_val, reason, seed,
                         hyperparams.learning_rate, halved, time.perf_counter() - started)
    return params.with_flat(best_theta), report


# -- search ------------------------------------------------------------------

@dataclass
class TrialResult:
    index: int
    hyperparams: HyperParams
    seed: int
    val_nll: float | None = None
    n_parameters: int | None = None
    error: str | None = None
    report: TrainReport | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "hyperparams": self.hyperparams.to_dict(),
            "seed": self.seed,
            "val_nll": self.val_nll,
            "n_parameters": self.n_parameters,
            "error": self.error,
            "report": None if self.report is None else self.report.to_dict(),
        }


@dataclass
class SearchResult:
    best: HyperParams
    best_index: int
    best_params: MonotoneNetParams
    trials: list[TrialResult] = field(default_factory=list)


def _run_trial(args):
    index, hp, seed, train, validation, max_epochs, patience = args
    try:
        params, report = train_model(None, hp, train, validation, seed, max_epochs, patience)
    except TrainingError as exc:
        return TrialResult(index, hp, seed, error=str(exc)), None
    return TrialResult(index, hp, seed, report.best_val_nll, params.n_parameters, report=report), params


def hyper_search(grid: dict, budget: int, train: Dataset, validation: Dataset, seed: int,
                 workers: int = 1, max_epochs: int = 200, patience: int = 10) -> SearchResult:
    """Seeded random search: ``budget`` distinct grid points, selected by validation NLL.

    Ties go to the smaller network, then the earlier trial.
    """
    if budget < 1:
        raise UsageError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    configs: list[HyperParams] = []
    attempts = 0
    while len(configs) < budget and attempts < 100 * budget:
        attempts += 1
        hp = sample_hyperparams(grid, rng)
        if hp not in configs:
            configs.append(hp)
    trial_seeds = _seeds(seed + 1, len(configs))
    jobs = [(i, hp, s, train, validation, max_epochs, patience)
            for i, (hp, s) in enumerate(zip(configs, trial_seeds))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_trial, jobs))
    else:
        outcomes = [_run_trial(j) for j in jobs]
    trials = [t for t, _ in outcomes]
    ok = [(t, p) for t, p in outcomes if t.error is None]
    if not ok:
        detail = "; ".join(f"trial {t.index}: {t.error}" for t in trials)
        raise TrainingError(f"all {len(trials)} trials failed: {detail}",
                            diagnostics={"trials": [t.to_dict() for t in trials]})
    best_trial, best_params = min(ok, key=lambda tp: (tp[0].val_nll, tp[0].n_parameters, tp[0].index))
    return SearchResult(best_trial.hyperparams, best_trial.index, best_params, trials)


# -- evaluation --------------------------------------------------------------

def heldout_nll(params: MonotoneNetParams, test: Dataset) -> float:
    """Mean right-censored NLL with the density in original time units."""
    stats = params.preprocessing
    batch = CensoredBatch.from_dataset(apply_preprocess(stats, test) if stats is not None else test)
    nll = mean_nll(params, batch)
    scale = stats.time_scale if stats is not None else 1.0
    return nll + float(np.mean(test.events)) * math.log(scale)




def evaluate_model(params: MonotoneNetParams, test: Dataset, grid_size: int = 100,
                   ties: str = "strict") -> MetricsReport:
    """Metrics on a test set in original units (the model standardises internally)."""
    return evaluate_predictions(survival_predictor(params), test, grid_size, ties,
                                test_nll=heldout_nll(params, test))
