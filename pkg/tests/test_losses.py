import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monosurv.diffcore import Dual, finite_diff_check
from monosurv.errors import InputError, TrainingError, UsageError
from monosurv.losses import (
    INTERVAL, LEFT, OBSERVED, RIGHT, CensoredBatch, nll_from_hazard, nll_from_survival,
    nll_general_censoring, nll_right_censored, right_censored_terms,
)
from monosurv.network import NetworkConfig, predict_output, zero_params

from conftest import random_net

seeds = st.integers(0, 2 ** 31 - 1)
heads = st.sampled_from(["survival", "hazard"])


def _unit_net(head="survival", slope=0.4, bias=0.0):
    """h(t, x) = tanh(slope * t) + bias, so h(0) = bias and dh/dt(0) = slope."""
    p = zero_params(NetworkConfig(1, cov_widths=(), mixed_widths=(1,), head=head))
    p.mixed_t_raw = np.array([math.sqrt(slope)])
    p.mixed_inner_raw = [np.array([[1.0]])]
    p.mixed_biases = [np.zeros(1), np.array([bias])]
    return p


def _batch(rng, n, p, kinds=None):
    z = rng.uniform(0.05, 1.5, n)
    upper = z + rng.uniform(0.05, 1.0, n) if kinds is not None else None
    return CensoredBatch(rng.normal(size=(n, p)), z, rng.integers(0, 2, n), kinds, upper)


def _loss_fn(params, batch, general=False):
    def fn(theta):
        q = params.with_flat(theta)
        return nll_general_censoring(q, batch) if general else nll_right_censored(q, batch)
    return fn


# -- examples ----------------------------------------------------------------

def test_single_event_density_point_one():
    h = Dual(np.array([0.0]), np.array([0.4]))
    loss, _, _ = right_censored_terms(h, [1], "survival")
    assert loss[0] == pytest.approx(2.302585092994046, rel=1e-14)
    batch = CensoredBatch(np.zeros((1, 1)), [0.0], [1])
    value, _ = nll_right_censored(_unit_net(), batch)
    assert value == pytest.approx(-math.log(0.1), rel=1e-14)


@pytest.mark.parametrize("head", ["survival", "hazard"])
def test_censored_record_with_unit_survival(head):
    batch = CensoredBatch(np.zeros((1, 1)), [0.0], [0])
    value, _ = nll_right_censored(_unit_net(head, bias=-800.0), batch)
    assert value == 0.0


def test_left_censored_contribution():
    batch = CensoredBatch(np.zeros((1, 1)), [0.0], [0], kinds=[LEFT])
    params = _unit_net(bias=math.log(3.0))
    assert predict_output(params, np.zeros(1), 0.0).survival[0] == pytest.approx(0.25, rel=1e-15)
    value, _ = nll_general_censoring(params, batch)
    assert value == pytest.approx(0.2876820724517809, rel=1e-12)


def test_output_level_formulas():
    assert nll_from_survival([0.5], [0.1], [1])[0] == pytest.approx(-math.log(0.1))
    assert nll_from_survival([0.5], [0.1], [0])[0] == pytest.approx(-math.log(0.5))
    assert nll_from_hazard([2.0], [0.3], [1])[0] == pytest.approx(-math.log(2.0) + 0.3)
    # flooring keeps zero-probability terms finite
    assert nll_from_survival([0.0], [0.0], [1])[0] == pytest.approx(-math.log(1e-30))


def test_errors():
    params = random_net(0, p=1)
    with pytest.raises(UsageError):
        nll_right_censored(params, CensoredBatch(np.zeros((0, 1)), [], []))
    with pytest.raises(InputError):
        CensoredBatch(np.zeros((1, 1)), [0.5], [0], kinds=[INTERVAL], upper=[0.5])
    with pytest.raises(InputError):
        CensoredBatch(np.zeros((1, 1)), [-0.5], [0])
    with pytest.raises(UsageError):
        nll_general_censoring(params, CensoredBatch(np.zeros((1, 1)), [0.5], [0]))


def test_non_finite_loss_raises_training_error():
    params = _unit_net()
    params.mixed_biases[-1] = np.array([np.nan])
    with pytest.raises(TrainingError) as info:
        nll_right_censored(params, CensoredBatch(np.zeros((3, 1)), [0.1, 0.2, 0.3], [1, 0, 1]))
    assert info.value.record_index == 0


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("head", ["survival", "hazard"])
@pytest.mark.parametrize("seed", range(4))
def test_right_censored_gradient_matches_finite_difference(head, seed):
    rng = np.random.default_rng(seed)
    params = random_net(seed, head=head, p=2, cov=(4,), mixed=(5, 3))
    batch = _batch(rng, 8, 2)
    assert finite_diff_check(_loss_fn(params, batch), params.flat(), 1e-5) < 1e-4


@pytest.mark.parametrize("head", ["survival", "hazard"])
def test_general_censoring_gradient_matches_finite_difference(head):
    rng = np.random.default_rng(3)
    params = random_net(3, head=head, p=2, cov=(3,), mixed=(4, 3))
    kinds = np.array([OBSERVED, RIGHT, LEFT, INTERVAL] * 2)
    batch = _batch(rng, 8, 2, kinds)
    assert finite_diff_check(_loss_fn(params, batch, general=True), params.flat(), 1e-5) < 1e-4


@pytest.mark.parametrize("head", ["survival", "hazard"])
def test_gradient_of_mean_is_mean_of_record_gradients(head):
    rng = np.random.default_rng(5)
    params = random_net(5, head=head, p=2)
    batch = _batch(rng, 12, 2)
    _, grad = nll_right_censored(params, batch)
    per = [nll_right_censored(params, batch.subset([i]))[1] for i in range(len(batch))]
    np.testing.assert_allclose(grad, np.mean(per, axis=0), rtol=1e-10, atol=1e-14)


# -- properties --------------------------------------------------------------

@given(st.lists(st.tuples(st.floats(1e-6, 1.0), st.floats(1e-6, 50.0), st.integers(0, 1)),
                min_size=1, max_size=50))
def test_hazard_and_survival_forms_agree(rows):
    s, f, d = (np.array(c, dtype=float) for c in zip(*rows))
    via_hazard = nll_from_hazard(f / s, -np.log(s), d)
    via_survival = nll_from_survival(s, f, d)
    np.testing.assert_allclose(via_hazard, via_survival, rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds, heads)
def test_permutation_and_duplication_invariance(seed, head):
    rng = np.random.default_rng(seed)
    params = random_net(seed, head=head)
    batch = _batch(rng, 9, params.config.covariate_dim)
    base, grad = nll_right_censored(params, batch)
    perm = rng.permutation(len(batch))
    shuffled, grad_p = nll_right_censored(params, batch.subset(perm))
    assert shuffled == pytest.approx(base, rel=1e-14, abs=1e-15)
    np.testing.assert_allclose(grad_p, grad, rtol=1e-12, atol=1e-15)
    doubled, _ = nll_right_censored(params, batch.subset(np.concatenate([np.arange(9), np.arange(9)])))
    assert abs(doubled - base) <= 1e-15 * max(1.0, abs(base))


@settings(max_examples=25, deadline=None)
@given(seeds, heads)
def test_right_only_general_equals_right_censored(seed, head):
    rng = np.random.default_rng(seed)
    params = random_net(seed, head=head)
    p = params.config.covariate_dim
    x, z = rng.normal(size=(10, p)), rng.uniform(0, 2, 10)
    general = nll_general_censoring(params, CensoredBatch(x, z, np.zeros(10), np.full(10, RIGHT)))
    right = nll_right_censored(params, CensoredBatch(x, z, np.zeros(10)))
    assert general[0] == right[0]
    assert np.array_equal(general[1], right[1])


@settings(max_examples=25, deadline=None)
@given(seeds, heads)
def test_observed_and_right_general_equals_right_censored(seed, head):
    rng = np.random.default_rng(seed)
    params = random_net(seed, head=head)
    p = params.config.covariate_dim
    x, z, d = rng.normal(size=(10, p)), rng.uniform(0, 2, 10), rng.integers(0, 2, 10)
    kinds = np.where(d == 1, OBSERVED, RIGHT)
    general, _ = nll_general_censoring(params, CensoredBatch(x, z, d, kinds))
    if head == "survival":
        right, _ = nll_right_censored(params, CensoredBatch(x, z, d))
        assert general == pytest.approx(right, rel=1e-12)
    else:
        # the hazard form of an event term is -log(lambda) + Lambda = -log f
        out = predict_output(params, x, z)
        expected = np.mean(np.where(d == 1, -np.log(out.density), -np.log(out.survival)))
        assert general == pytest.approx(expected, rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(seeds, heads)
def test_interval_log_argument_non_negative(seed, head):
    rng = np.random.default_rng(seed)
    params = random_net(seed, head=head, scale=2.0)
    p = params.config.covariate_dim
    x = rng.normal(size=(50, p))
    z1 = rng.uniform(0, 2, 50)
    z2 = z1 + rng.uniform(1e-6, 2, 50)
    gap = predict_output(params, x, z1).survival - predict_output(params, x, z2).survival
    assert np.all(gap >= 0)
    batch = CensoredBatch(x, z1, np.zeros(50), np.full(50, INTERVAL), z2)
    value, _ = nll_general_censoring(params, batch, with_grad=False)
    assert np.isfinite(value) and value >= 0
