"""Survival regression with neural networks that are monotone in time.

The network is trained on the exact right-censored likelihood and returns
S(t | x) from a single forward pass.
"""

__version__ = "0.1.0"

from .data import Dataset, SurvivalRecord, simulate_toy, load_csv, save_csv  # noqa: E402
from .network import (  # noqa: E402
    MonotoneNetParams,
    NetworkConfig,
    init_params,
    load_model,
    predict_curve,
    predict_survival,
    save_model,
)
from .training import HyperParams, evaluate_model, hyper_search, train_model  # noqa: E402
