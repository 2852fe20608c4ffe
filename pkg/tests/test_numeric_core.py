import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mno.autograd import (
    NumericError,
    Tensor,
    concat,
    gather_rows,
    gelu,
    l2_norm,
    layer_norm,
    linear,
    softmax,
    softmax_weighted_sum,
    stack,
)
from mno.nn import MlpSpec, ParamSet, backward, init_mlp, init_msa, mlp_forward, msa_forward
from mno.optim import OneCycle, OptimizerState, adamw_step, onecycle_lr

from conftest import check_grads


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetric_pair():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])


@pytest.mark.parametrize("c", [-700.0, -3.5, 0.0, 12.0, 1e4])
def test_softmax_constant_input(c):
    np.testing.assert_allclose(softmax(Tensor([c, c, c]), axis=0).data, [1 / 3] * 3, rtol=1e-15)


def test_softmax_against_high_precision_oracle():
    mpmath.mp.dps = 50
    exps = [mpmath.e**v for v in (1, 2, 3)]
    oracle = [float(e / sum(exps)) for e in exps]
    got = softmax(Tensor([1.0, 2.0, 3.0]), axis=0).data
    np.testing.assert_allclose(got, oracle, rtol=1e-14)
    np.testing.assert_allclose(got, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)


def test_softmax_errors():
    with pytest.raises(ValueError):
        softmax(Tensor(np.zeros((2, 3))), axis=2)
    with pytest.raises(NumericError):
        softmax(Tensor([0.0, np.nan]), axis=0)
    with pytest.raises(NumericError):
        softmax(Tensor([0.0, np.inf]), axis=0)


_logits = hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=7),
                     elements=st.floats(-50, 50, width=32))


@settings(max_examples=200, deadline=None)
@given(_logits, st.data())
def test_softmax_slices_sum_to_one(x, data):
    axis = data.draw(st.integers(0, x.ndim - 1))
    out = softmax(Tensor(x), axis=axis).data
    assert out.dtype == np.float32
    assert (out > 0).all()
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(_logits, st.floats(-50, 50, width=32))
def test_softmax_shift_invariance(x, c):
    a = softmax(Tensor(x), axis=-1).data
    b = softmax(Tensor(x + np.float32(c)), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


# -- primitive gradients ------------------------------------------------------


def test_grad_elementwise_and_reductions(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    check_grads(lambda x, y: x * y + x - y, [a, b])
    check_grads(lambda x, y: x / (y * y + 1.0), [a, b])
    check_grads(lambda x: x.sum(axis=0), [a])
    check_grads(lambda x: x.mean(axis=1, keepdims=True), [a])
    check_grads(lambda x: 2.0 - x, [a])
    check_grads(lambda x: -x, [a])


def test_grad_shape_ops(rng):
    a = rng.normal(size=(2, 3, 4))
    check_grads(lambda x: x.reshape(6, 4), [a])
    check_grads(lambda x: x.transpose(2, 0, 1), [a])
    check_grads(lambda x: x[:, 1:, ::2], [a])
    check_grads(lambda x: x[np.array([1, 1, 0])], [a])
    check_grads(lambda x, y: concat([x, y], axis=1), [a, rng.normal(size=(2, 2, 4))])
    check_grads(lambda x, y: stack([x, y], axis=0), [a, rng.normal(size=(2, 3, 4))])


def test_grad_matmul_linear(rng):
    check_grads(lambda x, y: x @ y, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])
    check_grads(lambda x, y: x @ y, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))])
    check_grads(lambda x, w, b: linear(x, w, b),
                [rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2,))])


def test_grad_nonlinear_primitives(rng):
    x = rng.normal(size=(4, 5))
    check_grads(gelu, [x])
    check_grads(lambda t: softmax(t, axis=0), [x])
    check_grads(lambda t: softmax(t, axis=1), [x])
    check_grads(lambda t, g, b: layer_norm(t, g, b),
                [x, rng.normal(size=(5,)), rng.normal(size=(5,))])
    check_grads(l2_norm, [x])


def test_grad_gather_and_weighted_sum(rng):
    idx = np.array([[0, 2], [1, 0], [2, 1]])
    check_grads(lambda t: gather_rows(t, idx), [rng.normal(size=(3, 4))])
    check_grads(lambda lg, v: softmax_weighted_sum(lg, v, axis=1),
                [rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))])


def test_gelu_matches_tanh_formula(rng):
    x = rng.normal(size=50) * 3
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(gelu(Tensor(x)).data, ref, rtol=1e-14)


def test_division_by_zero_is_numeric_error():
    with pytest.raises(NumericError):
        Tensor([1.0]) / Tensor([0.0])


# -- backward ----------------------------------------------------------------


def test_backward_linear_and_quadratic():
    ps = ParamSet({"w": np.zeros(3)}, dtype="float64")
    g = backward(ps["w"].sum(), ps)
    np.testing.assert_array_equal(g["w"], [1, 1, 1])
    ps = ParamSet({"w": np.array([1.0, -2.0, 3.0]), "unused": np.ones((2, 2))}, dtype="float64")
    g = backward((ps["w"] * ps["w"]).sum(), ps)
    np.testing.assert_array_equal(g["w"], [2, -4, 6])
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    ps = ParamSet({"w": np.ones(3)})
    with pytest.raises(ValueError):
        backward(ps["w"] * 2.0, ps)


def test_paramset_names_unique_and_scoped():
    ps = ParamSet(dtype="float64")
    ps.add("block.0.local.w_k", np.ones(2))
    with pytest.raises(ValueError):
        ps.add("block.0.local.w_k", np.ones(2))
    sub = ps.scope("block.0")
    assert sub["local.w_k"] is ps["block.0.local.w_k"]


# -- mlp ------------------------------------------------------------------------


def _params(d):
    return ParamSet({k: np.asarray(v, dtype=np.float64) for k, v in d.items()}, dtype="float64")


def test_mlp_identity():
    ps = _params({"0.w": np.eye(3), "0.b": np.zeros(3)})
    out = mlp_forward(MlpSpec((3, 3)), ps, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [1, 2, 3])


def test_mlp_cancellation():
    ps = _params({"0.w": [[1.0], [1.0]], "0.b": [0.0]})
    out = mlp_forward(MlpSpec((2, 1)), ps, np.array([0.5, -0.5]))
    np.testing.assert_array_equal(out.data, [0.0])


def _gelu_scalar(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))


def test_mlp_seeded_against_straight_line_oracle():
    ps = ParamSet(dtype="float64")
    init_mlp(ps, "m", MlpSpec((1, 2, 1)), np.random.default_rng(0))
    w0, b0 = ps["m.0.w"].data, ps["m.0.b"].data
    w1, b1 = ps["m.1.w"].data, ps["m.1.b"].data
    hidden = [_gelu_scalar(1.0 * w0[0, j] + b0[j]) for j in range(2)]
    expected = hidden[0] * w1[0, 0] + hidden[1] * w1[1, 0] + b1[0]
    got = mlp_forward(MlpSpec((1, 2, 1)), ps.scope("m"), np.array([1.0])).data
    assert got.shape == (1,)
    assert abs(got[0] - expected) < 1e-14


def test_mlp_shape_errors_and_leading_dims(rng):
    ps = ParamSet(dtype="float64")
    init_mlp(ps, "m", MlpSpec((3, 4, 2)), rng)
    out = mlp_forward(MlpSpec((3, 4, 2)), ps.scope("m"), rng.normal(size=(5, 6, 3)))
    assert out.shape == (5, 6, 2)
    with pytest.raises(ValueError):
        mlp_forward(MlpSpec((3, 4, 2)), ps.scope("m"), rng.normal(size=(5, 4)))
    with pytest.raises(ValueError):
        MlpSpec((3,))


def test_mlp_init_bounds():
    ps = ParamSet(dtype="float64")
    init_mlp(ps, "m", MlpSpec((16, 64, 4)), np.random.default_rng(0))
    assert np.abs(ps["m.0.w"].data).max() <= 0.25
    assert np.abs(ps["m.1.w"].data).max() <= 0.125


# -- multi-head self-attention -----------------------------------------------


def _msa_params(d, seed=0):
    ps = ParamSet(dtype="float64")
    init_msa(ps, "msa", d, np.random.default_rng(seed))
    return ps.scope("msa")


def test_msa_single_token_weight_is_one(rng):
    _, w = msa_forward(_msa_params(4), rng.normal(size=(1, 4)), heads=2, return_weights=True)
    np.testing.assert_array_equal(w, np.ones((2, 1, 1)))


def test_msa_identical_tokens_uniform_weights(rng):
    tok = np.tile(rng.normal(size=(1, 4)), (5, 1))
    _, w = msa_forward(_msa_params(4), tok, heads=2, return_weights=True)
    np.testing.assert_allclose(w, np.full((2, 5, 5), 0.2), atol=1e-15)


def test_msa_against_explicit_attention():
    ps = _msa_params(2)
    x = np.random.default_rng(1).normal(size=(2, 2))

    def aff(name, v):
        return v @ ps[f"{name}.w"].data + ps[f"{name}.b"].data

    q, k, v = aff("q", x), aff("k", x), aff("v", x)
    scores = np.array([[q[i] @ k[j] / math.sqrt(2) for j in range(2)] for i in range(2)])
    w = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    expected = aff("o", w @ v)
    got = msa_forward(ps, x, heads=1).data
    np.testing.assert_allclose(got, expected, rtol=1e-13, atol=1e-15)


def test_msa_heads_must_divide_width(rng):
    with pytest.raises(ValueError):
        msa_forward(_msa_params(6), rng.normal(size=(3, 6)), heads=4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_msa_permutation_equivariant(m, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(m, 8)).astype(np.float32)
    perm = r.permutation(m)
    ps = _msa_params(8, seed)
    a = msa_forward(ps, x, heads=4).data
    b = msa_forward(ps, x[perm], heads=4).data
    np.testing.assert_allclose(b, a[perm], atol=1e-5)


def test_msa_rows_sum_to_one(rng):
    _, w = msa_forward(_msa_params(8), rng.normal(size=(3, 6, 8)), heads=4, return_weights=True)
    assert w.shape == (3, 4, 6, 6)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_msa_gradients(rng):
    ps = _msa_params(4)
    check_grads(lambda t: msa_forward(ps, t, heads=2), [rng.normal(size=(3, 4))])


# -- optimizer and schedule --------------------------------------------------------


def test_adamw_zero_gradient_is_identity():
    ps = ParamSet({"w": np.array([1.0, -2.0])}, dtype="float64")
    st_ = OptimizerState(weight_decay=0.0)
    adamw_step(st_, ps, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(ps["w"].data, [1.0, -2.0])
    assert st_.step == 1


def test_adamw_one_step_oracle():
    ps = ParamSet({"w": np.array([1.0])}, dtype="float64")
    st_ = OptimizerState(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    adamw_step(st_, ps, {"w": np.array([1.0])}, lr=0.1)
    # m_hat = v_hat = 1 after bias correction
    assert abs(ps["w"].data[0] - (1.0 - 0.1 * 1.0 / (1.0 + 1e-8))) < 1e-15


def test_adamw_pure_decay():
    ps = ParamSet({"w": np.array([1.0])}, dtype="float64")
    adamw_step(OptimizerState(weight_decay=0.01), ps, {"w": np.array([0.0])}, lr=0.1)
    assert abs(ps["w"].data[0] - 0.999) < 1e-15


def test_adamw_missing_gradient_and_step_count():
    ps = ParamSet({"a": np.ones(1), "b": np.ones(1)}, dtype="float64")
    st_ = OptimizerState()
    with pytest.raises(ValueError):
        adamw_step(st_, ps, {"a": np.ones(1)})
    for i in range(3):
        adamw_step(st_, ps, {"a": np.ones(1), "b": np.ones(1)})
        assert st_.step == i + 1
        assert st_.m["a"].shape == ps["a"].shape


def test_onecycle_peak_start_and_midpoint():
    assert onecycle_lr(0, 100, 1e-3) == pytest.approx(1e-3 / 25, rel=1e-15)
    assert onecycle_lr(30, 100, 1e-3) == pytest.approx(1e-3, rel=1e-15)
    # anneal runs from step 30 to 100, so step 65 is halfway: cos(pi/2) = 0
    lo, hi = 1e-3 / 1e4, 1e-3
    expected = lo + (hi - lo) * 0.5 * (1 + math.cos(math.pi * 35 / 70))
    assert onecycle_lr(65, 100, 1e-3) == pytest.approx(expected, rel=1e-12)
    assert onecycle_lr(65, 100, 1e-3) == pytest.approx((hi + lo) / 2, rel=1e-12)


def test_onecycle_errors():
    for bad in (-1, 100):
        with pytest.raises(ValueError):
            onecycle_lr(bad, 100, 1e-3)
    with pytest.raises(ValueError):
        onecycle_lr(0, 100, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 400), st.floats(0.05, 0.95))
def test_onecycle_piecewise_monotone(total, pct):
    sched = OneCycle(total, 1e-3, pct)
    lrs = np.array([sched(s) for s in range(total)])
    peak = int(math.floor(pct * total + 0.5))
    assert np.all(np.diff(lrs[: peak + 1]) >= -1e-18)
    assert np.all(np.diff(lrs[peak:]) <= 1e-18)
    assert lrs.max() <= 1e-3 * (1 + 1e-12)
    assert lrs.min() >= 1e-3 / 1e4 * (1 - 1e-12)
