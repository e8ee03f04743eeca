import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monosurv import training
from monosurv.data import Dataset, PreprocessStats, apply_preprocess, simulate_toy
from monosurv.errors import ConfigurationError, TrainingError, UsageError
from monosurv.losses import CensoredBatch
from monosurv.metrics import brier_score_at, integrate_grid, kaplan_meier
from monosurv.network import NetworkConfig, forward, predict_output, survival_predictor, zero_params
from monosurv.training import (
    LARGE_GRID, SMALL_GRID, Adam, HyperParams, TrialResult, evaluate_model, heldout_nll,
    hyper_search, in_grid, load_grid, mean_nll, sample_hyperparams, train_model,
)

SMALL_HP = HyperParams(mixed_layers=2, cov_layers=1, nodes=8, cov_nodes=8, batch_size=50)


@pytest.fixture(scope="module")
def weibull():
    return simulate_toy("weibull", 1000, 0), simulate_toy("weibull", 300, 1)


def _strip(report):
    d = report.to_dict()
    d.pop("wall_time")
    return d


# -- optimizer ---------------------------------------------------------------

def test_adam_first_step_moves_by_learning_rate():
    opt = Adam(3, lr=0.1)
    theta = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(theta, [-0.1, 0.1, 0.0], atol=1e-8)


# -- train_model -------------------------------------------------------------

def test_first_epoch_decreases_train_nll(weibull):
    train, val = weibull
    _, report = train_model(None, HyperParams(), train, val, seed=0, max_epochs=1)
    assert report.train_nll[1] < report.train_nll[0]


def test_training_is_deterministic(weibull):
    train, val = weibull
    p1, r1 = train_model(None, replace(SMALL_HP, dropout=0.2), train, val, seed=4, max_epochs=5)
    p2, r2 = train_model(None, replace(SMALL_HP, dropout=0.2), train, val, seed=4, max_epochs=5)
    assert _strip(r1) == _strip(r2)
    assert np.array_equal(p1.flat(), p2.flat())
    _, r3 = train_model(None, replace(SMALL_HP, dropout=0.2), train, val, seed=5, max_epochs=5)
    assert _strip(r3) != _strip(r1)


def test_early_stopping_returns_best_epoch(weibull):
    train, val = weibull
    hp = replace(SMALL_HP, learning_rate=1e-2, batch_size=25)
    params, report = train_model(None, hp, train, val, seed=1, max_epochs=200, patience=2)
    assert report.stopping_reason == "patience"
    assert report.best_val_nll == min(report.val_nll)
    assert report.val_nll[report.best_epoch] == report.best_val_nll
    assert len(report.val_nll) == report.best_epoch + 3
    batch = CensoredBatch.from_dataset(apply_preprocess(params.preprocessing, val))
    assert abs(mean_nll(params, batch) - report.best_val_nll) <= 1e-12


def test_model_carries_training_statistics(weibull):
    train, val = weibull
    params, _ = train_model(None, SMALL_HP, train, val, seed=0, max_epochs=1)
    assert params.preprocessing.time_scale == train.durations.max()
    assert params.preprocessing.means[0] == train.covariates[:, 0].mean()


def test_weight_decay_leaves_constrained_weights_alone(weibull):
    train, val = weibull
    hp = replace(SMALL_HP, weight_decay=0.4)
    params, _ = train_model(None, hp, train, val, seed=2, max_epochs=3)
    decay = params.weight_mask()
    assert not np.any(decay & params.constrained_mask())
    for w in params.effective_constrained():
        assert np.all(w >= 0)
    rng = np.random.default_rng(0)
    h, _ = forward(params, rng.uniform(0, 2, 1000), rng.normal(size=(1000, 1)))
    assert np.all(h.tangent >= 0)


def test_learning_rate_halving_recovers(weibull, monkeypatch):
    train, val = weibull
    real = training.nll_right_censored
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise TrainingError("non-finite loss", record_index=0)
        return real(*args, **kw)

    monkeypatch.setattr(training, "nll_right_censored", flaky)
    _, report = train_model(None, SMALL_HP, train, val, seed=0, max_epochs=2)
    assert report.lr_halved
    assert len(report.train_nll) == 3


def test_persistent_divergence_fails_with_diagnostics(weibull, monkeypatch):
    train, val = weibull
    real = training.nll_right_censored

    def broken(params, batch, train_mode=False, **kw):
        if train_mode:
            raise TrainingError("non-finite loss", record_index=7)
        return real(params, batch, train_mode=train_mode, **kw)

    monkeypatch.setattr(training, "nll_right_censored", broken)
    with pytest.raises(TrainingError) as info:
        train_model(None, SMALL_HP, train, val, seed=0, max_epochs=2)
    assert info.value.diagnostics["learning_rate"] == SMALL_HP.learning_rate / 2
    assert info.value.exit_code == 4


def test_train_model_validation(weibull):
    train, val = weibull
    with pytest.raises(UsageError):
        train_model(None, SMALL_HP, train.subset([]), val, seed=0)
    with pytest.raises(ConfigurationError):
        train_model(NetworkConfig(3), SMALL_HP, train, val, seed=0)


# -- hyperparameters ---------------------------------------------------------

@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["small", "large"]))
def test_sampled_configurations_lie_in_grid(seed, name):
    grid = {"small": SMALL_GRID, "large": LARGE_GRID}[name]
    hp = sample_hyperparams(grid, np.random.default_rng(seed))
    assert in_grid(hp, grid)


def test_in_grid_rejects_outside_values():
    assert not in_grid(HyperParams(nodes=7), SMALL_GRID)
    assert not in_grid(replace(HyperParams(cov_layers=4, cov_nodes=128, batch_size=1000), dropout=0.8),
                       LARGE_GRID)


def test_hyperparams_from_dict_and_grid_file(tmp_path):
    assert HyperParams.from_dict({"nodes": 32}).nodes == 32
    with pytest.raises(ConfigurationError):
        HyperParams.from_dict({"momentum": 0.9})
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"nodes": [4], "head": ["hazard"]}))
    grid = load_grid(str(path))
    hp = sample_hyperparams(grid, np.random.default_rng(0))
    assert hp.nodes == 4 and hp.head == "hazard"
    assert load_grid("small") is SMALL_GRID


# -- search ------------------------------------------------------------------

TINY_GRID = {"nodes": [4, 8], "cov_nodes": [4], "batch_size": [100], "learning_rate": [1e-2],
             "head": ["survival", "hazard"]}


def test_budget_one_returns_that_configuration(weibull):
    train, val = weibull
    result = hyper_search(TINY_GRID, 1, train, val, seed=3, max_epochs=2)
    assert len(result.trials) == 1 and result.best_index == 0
    assert result.best == result.trials[0].hyperparams


def test_search_selects_minimum_and_is_deterministic(weibull):
    train, val = weibull
    a = hyper_search(TINY_GRID, 4, train, val, seed=5, max_epochs=2)
    b = hyper_search(TINY_GRID, 4, train, val, seed=5, max_epochs=2, workers=2)
    assert len({t.hyperparams for t in a.trials}) == 4
    assert all(in_grid(t.hyperparams, TINY_GRID) for t in a.trials)
    best = a.trials[a.best_index]
    assert all(best.val_nll <= t.val_nll for t in a.trials)
    assert [t.val_nll for t in a.trials] == [t.val_nll for t in b.trials]
    assert np.array_equal(a.best_params.flat(), b.best_params.flat())


def test_search_tie_break(monkeypatch, weibull):
    train, val = weibull
    outcomes = {0: (1.0, 50), 1: (0.5, 90), 2: (0.5, 40), 3: (0.5, 40)}

    def fake(args):
        index, hp, seed = args[:3]
        v, n = outcomes[index]
        return TrialResult(index, hp, seed, v, n), zero_params(NetworkConfig(1))

    monkeypatch.setattr(training, "_run_trial", fake)
    assert hyper_search(TINY_GRID, 4, train, val, seed=0).best_index == 2


def test_all_trials_failing(monkeypatch, weibull):
    train, val = weibull
    monkeypatch.setattr(training, "_run_trial",
                        lambda a: (TrialResult(a[0], a[1], a[2], error="diverged"), None))
    with pytest.raises(TrainingError) as info:
        hyper_search(TINY_GRID, 2, train, val, seed=0)
    assert "trial 0: diverged" in str(info.value)
    assert len(info.value.diagnostics["trials"]) == 2


def test_search_budget_validation(weibull):
    with pytest.raises(UsageError):
        hyper_search(TINY_GRID, 0, *weibull, seed=0)


# -- evaluation --------------------------------------------------------------

def _separating_model():
    """h = tanh(t - 2 u) with u = tanh(x): S is strictly increasing in x at every t."""
    p = zero_params(NetworkConfig(1, cov_widths=(1,), mixed_widths=(1,)))
    p.cov_weights = [np.array([[1.0]])]
    p.mixed_t_raw = np.array([1.0])
    p.mixed_u_weights = np.array([[-2.0]])
    p.mixed_inner_raw = [np.array([[2.0]])]
    p.preprocessing = PreprocessStats(np.zeros(1), np.ones(1), 1.0)
    return p


def _separated_groups(seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(0.0, 0.3, 50), rng.uniform(0.7, 1.0, 50)])
    z = np.where(x < 0.5, 1.0, 3.0) + x  # disjoint time supports, ordered by x
    return Dataset(x, z, np.ones(100, dtype=int))


def test_perfect_separation_gives_unit_concordance():
    report = evaluate_model(_separating_model(), _separated_groups())
    assert report.c_td == 1.0


def _two_point_groups(seed):
    # tied times inside a group leave only the cross-group pairs comparable
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(0.0, 0.3, 50), rng.uniform(0.7, 1.0, 50)])
    return Dataset(x, np.where(x < 0.5, 1.0, 3.0), np.ones(100, dtype=int))


def test_trained_model_on_separated_groups():
    train, val = _two_point_groups(1), _two_point_groups(2)
    hp = HyperParams(nodes=16, cov_nodes=16, batch_size=25, learning_rate=1e-2)
    params, _ = train_model(None, hp, train, val, seed=0, max_epochs=20)
    assert evaluate_model(params, _two_point_groups(3)).c_td == 1.0


def test_constant_predictor_has_zero_concordance():
    p = _separating_model()
    p.mixed_u_weights = np.zeros((1, 1))
    assert evaluate_model(p, _separated_groups()).c_td == 0.0


def test_ibs_is_grid_mean_of_brier_scores(weibull):
    train, val = weibull
    params, _ = train_model(None, SMALL_HP, train, val, seed=0, max_epochs=2)
    test = simulate_toy("weibull", 200, 7)
    report = evaluate_model(params, test, grid_size=100)
    g = kaplan_meier(test.durations, 1 - test.events)
    pred = survival_predictor(params)
    composed = integrate_grid(lambda t: brier_score_at(t, pred, test, g), float(test.durations.max()), 100)
    assert abs(report.ibs - composed) <= 1e-15


def test_heldout_nll_is_in_original_time_units(weibull):
    train, val = weibull
    params, _ = train_model(None, SMALL_HP, train, val, seed=0, max_epochs=2)
    test = simulate_toy("weibull", 200, 8)
    out = predict_output(params, test.covariates, test.durations)
    d = test.events
    direct = -np.mean(d * np.log(out.density) + (1 - d) * np.log(out.survival))
    assert heldout_nll(params, test) == pytest.approx(direct, rel=1e-12)
    assert evaluate_model(params, test).test_nll == heldout_nll(params, test)
    assert math.isfinite(direct)
