import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaprune import ops
from adaprune.autodiff import Parameter, Tensor, backward
from adaprune.cost import (
    BudgetConfig,
    CostEstimator,
    LayerCostSpec,
    compute_lambda,
    cost_term,
    dynamic_layer_flops,
    estimate_current_cost,
    layer_flops,
    multi_task_loss,
    sample_flops,
    total_flops,
)
from adaprune.errors import ConfigError, DimensionError, InvariantError, UsageError


def brute_macs(h, w, c_in, c_out, k, b_in=None, b_out=None):
    """Count multiply-adds by walking every output element, plus one per bias."""
    b_in = np.ones(c_in, bool) if b_in is None else np.asarray(b_in, bool)
    b_out = np.ones(c_out, bool) if b_out is None else np.asarray(b_out, bool)
    count = 0
    for o in range(c_out):
        if not b_out[o]:
            continue
        for _y, _x in itertools.product(range(h), range(w)):
            for i in range(c_in):
                if b_in[i]:
                    count += k * k
            count += 1
    return count


def test_layer_flops_examples():
    assert layer_flops(LayerCostSpec(0, 32, 32, 3, 16, 3)) == 458_752
    assert layer_flops(LayerCostSpec(0, 1, 1, 1, 1, 1)) == 2


@pytest.mark.parametrize("case", range(60))
def test_layer_flops_matches_brute_force(case):
    rng = np.random.default_rng(case)
    h, w = rng.integers(1, 6, 2)
    c_in, c_out = rng.integers(1, 7, 2)
    k = int(rng.choice([1, 3, 5]))
    spec = LayerCostSpec(0, int(h), int(w), int(c_in), int(c_out), k)
    assert layer_flops(spec) == brute_macs(h, w, c_in, c_out, k)
    b_in = rng.random(c_in) < 0.5
    b_out = rng.random(c_out) < 0.5
    assert dynamic_layer_flops(spec, b_in, b_out) == brute_macs(h, w, c_in, c_out, k, b_in, b_out)


def test_dynamic_flops_examples():
    spec = LayerCostSpec(0, 2, 2, 4, 8, 3)
    assert dynamic_layer_flops(spec, [1, 1, 0, 0], [1, 0] * 4) == 304
    assert dynamic_layer_flops(spec, np.ones(4), np.ones(8)) == layer_flops(spec)
    assert dynamic_layer_flops(spec, np.ones(4), np.zeros(8)) == 0


def test_dynamic_flops_batched():
    spec = LayerCostSpec(0, 2, 2, 4, 8, 3)
    b_in = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], bool)
    b_out = np.array([[1, 0] * 4, [1] * 8], bool)
    np.testing.assert_array_equal(dynamic_layer_flops(spec, b_in, b_out), [304, layer_flops(spec)])


def test_dynamic_flops_length_mismatch():
    with pytest.raises(DimensionError):
        dynamic_layer_flops(LayerCostSpec(0, 2, 2, 4, 8, 3), np.ones(3), np.ones(8))


def test_spec_rejects_nonpositive_sizes():
    with pytest.raises(ConfigError):
        LayerCostSpec(0, 0, 2, 4, 8, 3)


@settings(max_examples=50, deadline=None)
@given(c_out=st.integers(1, 12), seed=st.integers(0, 9999))
def test_adding_output_channel_never_decreases_flops(c_out, seed):
    rng = np.random.default_rng(seed)
    spec = LayerCostSpec(0, 3, 3, 5, c_out, 3)
    b_in = rng.random(5) < 0.5
    b_out = rng.random(c_out) < 0.5
    before = dynamic_layer_flops(spec, b_in, b_out)
    b_out[rng.integers(c_out)] = True
    assert dynamic_layer_flops(spec, b_in, b_out) >= before


# --------------------------------------------------------- per-sample totals


def two_layer_specs():
    return [LayerCostSpec(0, 4, 4, 3, 4, 3), LayerCostSpec(1, 2, 2, 4, 6, 3, input_from=(0,))]


def test_sample_flops_matches_recount():
    rng = np.random.default_rng(5)
    specs = two_layer_specs()
    d = {0: rng.random((5, 4)) < 0.5, 1: rng.random((5, 6)) < 0.5}
    got = sample_flops(specs, d)
    for n in range(5):
        want = brute_macs(4, 4, 3, 4, 3, None, d[0][n]) + brute_macs(2, 2, 4, 6, 3, d[0][n], d[1][n])
        assert got[n] == want


def test_sample_flops_unions_multiple_inputs():
    specs = [
        LayerCostSpec(0, 2, 2, 1, 3, 1),
        LayerCostSpec(1, 2, 2, 1, 3, 1),
        LayerCostSpec(2, 2, 2, 3, 2, 1, input_from=(0, 1)),
    ]
    d = {0: np.array([[1, 0, 0]], bool), 1: np.array([[0, 0, 1]], bool), 2: np.array([[1, 1]], bool)}
    assert sample_flops(specs, d)[0] == 4 * 2 * 1 + 4 * 2 * 1 + 4 * (2 + 1) * 2


def test_ungated_layers_count_dense():
    specs = [LayerCostSpec(0, 2, 2, 2, 2, 1), LayerCostSpec(9, 2, 2, 2, 2, 1, gated=False)]
    d = {0: np.zeros((1, 2), bool)}
    assert sample_flops(specs, d)[0] == layer_flops(specs[1])


def test_sample_flops_errors():
    specs = two_layer_specs()
    with pytest.raises(DimensionError):
        sample_flops(specs, {0: np.ones((1, 4), bool)})
    with pytest.raises(UsageError):
        sample_flops(specs, {0: np.ones((0, 4), bool), 1: np.ones((0, 6), bool)})
    with pytest.raises(UsageError):
        sample_flops([LayerCostSpec(0, 1, 1, 1, 1, 1, gated=False)], {})


# ----------------------------------------------------------------- estimator


def test_estimator_window_mean():
    est = CostEstimator(p0=1000, window=2)
    est.push(100)
    assert est.push(200) == 150
    assert est.push(400) == 300


def test_estimator_starts_dense():
    assert CostEstimator(p0=77).p_t == 77


def test_all_ones_gives_p0():
    specs = two_layer_specs()
    p0 = total_flops(specs)
    est = CostEstimator(p0=p0, window=1)
    d = {0: np.ones((3, 4), bool), 1: np.ones((3, 6), bool)}
    assert estimate_current_cost(est, specs, d) == p0


def test_estimator_empty_batch():
    with pytest.raises(UsageError):
        CostEstimator(p0=1).update([])


def test_estimator_invariant():
    with pytest.raises(InvariantError):
        CostEstimator(p0=10).push(11)


@pytest.mark.parametrize("window", [1, 3, 20])
def test_estimate_equals_logged_recount(window):
    rng = np.random.default_rng(window)
    specs = two_layer_specs()
    est = CostEstimator(p0=total_flops(specs), window=window)
    means = []
    for _ in range(25):
        n = int(rng.integers(1, 6))
        d = {0: rng.random((n, 4)) < 0.6, 1: rng.random((n, 6)) < 0.4}
        per = [
            brute_macs(4, 4, 3, 4, 3, None, d[0][i]) + brute_macs(2, 2, 4, 6, 3, d[0][i], d[1][i]) for i in range(n)
        ]
        means.append(sum(per) / n)
        p_t = estimate_current_cost(est, specs, d)
        assert p_t == pytest.approx(np.mean(means[-window:]), rel=1e-15)


def test_estimator_state_round_trip():
    est = CostEstimator(p0=500, window=3)
    for v in (10, 20, 30, 40):
        est.push(v)
    other = CostEstimator(p0=500, window=3)
    other.load_state_arrays(est.state_arrays())
    assert other.p_t == est.p_t and list(other.history) == list(est.history)
    assert other.push(50) == est.push(50)


# -------------------------------------------------------------------- lambda


@pytest.mark.parametrize(
    "p_t,p,p0,lam0,expected",
    [(100, 50, 100, 0.01, 0.005), (30, 50, 100, 0.01, -0.002), (50, 50, 100, 0.01, 0.0)],
)
def test_lambda_examples(p_t, p, p0, lam0, expected):
    assert compute_lambda(BudgetConfig(p=p, p0=p0, lambda0=lam0), p_t) == pytest.approx(expected, abs=1e-15)


def test_lambda_sign_and_range_over_grid():
    for p in np.linspace(1, 100, 12):
        cfg = BudgetConfig(p=p, p0=100, lambda0=0.3)
        for p_t in np.linspace(0, 100, 41):
            lam = compute_lambda(cfg, p_t)
            assert abs(lam) <= cfg.lambda0
            if p_t > p:
                assert lam > 0
            elif p_t < p:
                assert lam < 0


def test_lambda_rejects_out_of_range_estimate():
    cfg = BudgetConfig(p=50, p0=100)
    with pytest.raises(InvariantError):
        compute_lambda(cfg, 101)
    with pytest.raises(InvariantError):
        compute_lambda(cfg, -1)


def test_budget_config_errors():
    with pytest.raises(ConfigError, match="budget out of range"):
        BudgetConfig(p=150, p0=100)
    with pytest.raises(ConfigError, match="budget out of range"):
        BudgetConfig.from_fraction(1.5, 100)
    with pytest.raises(ConfigError):
        BudgetConfig(p=50, p0=100, lambda0=0)
    assert BudgetConfig.from_fraction(0.25, 400).p == 100


# ---------------------------------------------------------------------- loss


def test_multi_task_loss_example():
    s = Tensor(np.array([[2.0, -1.0, 0.5, 1.5, 0.0]]))  # l1 = 5
    loss = multi_task_loss(Tensor(np.array(1.0)), [s], 0.01, 10)
    assert float(loss.data) == pytest.approx(1.005, abs=1e-15)


def test_zero_lambda_is_exact():
    cls = Tensor(np.array(0.731))
    s = Tensor(np.array([[3.0, -2.0]]))
    assert float(multi_task_loss(cls, [s], 0.0, 2).data) == 0.731


def test_negative_lambda_lowers_loss():
    s = Tensor(np.array([[0.5, 0.2, 1.0]]))
    assert float(multi_task_loss(Tensor(np.array(2.0)), [s], -0.1, 3).data) < 2.0


def test_loss_rejects_bad_filter_count():
    with pytest.raises(ConfigError):
        multi_task_loss(Tensor(np.array(1.0)), [Tensor(np.ones((1, 2)))], 0.1, 0)


def test_cost_term_averages_batch_and_layers():
    a = Tensor(np.array([[1.0, -1.0], [2.0, 0.0]]))
    b = Tensor(np.array([[3.0], [-1.0]]))
    assert float(cost_term([a, b], 3).data) == pytest.approx((2 + 2 + 3 + 1) / (3 * 2))


def test_cost_gradient_is_sign_over_nc():
    lam, n_c = 0.4, 5
    s = Parameter(np.array([[0.7, -1.2, 0.3, -0.1, 2.0]]))
    cls = ops.sum(ops.mul(s, 0.0))
    backward(multi_task_loss(cls, [s], lam, n_c))
    np.testing.assert_allclose(s.grad, lam * np.sign(s.data) / n_c, rtol=1e-15)


def test_return_term_reports_unweighted_cost():
    s = Tensor(np.array([[1.0, -3.0]]))
    _, term = multi_task_loss(Tensor(np.array(0.0)), [s], 0.5, 4, return_term=True)
    assert term == 1.0
