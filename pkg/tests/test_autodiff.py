import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robtok import autodiff as ad
from robtok.autodiff import Tensor

N_POINTS = 20


def _weights(shape, seed):
    return np.random.default_rng([seed, 99]).normal(size=shape)


def _reduce(out: Tensor, seed: int) -> Tensor:
    # a random linear functional turns any output into a scalar without symmetry
    return ad.sum_(ad.mul(out, _weights(out.shape, seed)))


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# (name, point sampler, unary function of the differentiated input)
PRIMITIVES = {
    "add": (lambda r: r.normal(size=(3, 4)), lambda x, r: ad.add(x, Tensor(r.normal(size=(4,))))),
    "add_broadcast_grad": (lambda r: r.normal(size=(4,)), lambda x, r: ad.add(Tensor(r.normal(size=(3, 4))), x)),
    "sub": (lambda r: r.normal(size=(3, 4)), lambda x, r: ad.sub(Tensor(r.normal(size=(3, 4))), x)),
    "mul": (lambda r: r.normal(size=(2, 5)), lambda x, r: ad.mul(x, Tensor(r.normal(size=(2, 5))))),
    "mul_self": (lambda r: r.normal(size=(6,)), lambda x, r: ad.mul(x, x)),
    "mul_scalar": (lambda r: r.normal(size=(5,)), lambda x, r: ad.mul_scalar(x, -2.5)),
    "div_num": (lambda r: r.normal(size=(4,)), lambda x, r: ad.div(x, Tensor(_pos(r, (4,))))),
    "div_den": (lambda r: _pos(r, (4,)), lambda x, r: ad.div(Tensor(r.normal(size=(4,))), x)),
    "gelu": (lambda r: r.normal(scale=2.0, size=(3, 5)), lambda x, r: ad.gelu(x)),
    "exp": (lambda r: r.normal(size=(7,)), lambda x, r: ad.exp(x)),
    "sqrt": (lambda r: _pos(r, (6,)), lambda x, r: ad.sqrt(x)),
    "clamp": (lambda r: r.uniform(-2, 2, size=(20,)), lambda x, r: ad.clamp(x, -0.7, 0.9)),
    "sum_axis": (lambda r: r.normal(size=(3, 4)), lambda x, r: ad.sum_(x, axis=1)),
    "mean": (lambda r: r.normal(size=(3, 4)), lambda x, r: ad.mean(x, axis=0)),
    "l2_norm": (lambda r: r.normal(size=(3, 4)), lambda x, r: ad.l2_norm(x, axis=-1)),
    "matmul_left": (lambda r: r.normal(size=(3, 4)), lambda x, r: ad.matmul(x, Tensor(r.normal(size=(4, 2))))),
    "matmul_right": (lambda r: r.normal(size=(4, 2)), lambda x, r: ad.matmul(Tensor(r.normal(size=(2, 3, 4))), x)),
    "matmul_batched": (lambda r: r.normal(size=(2, 3, 4)), lambda x, r: ad.matmul(x, Tensor(r.normal(size=(2, 4, 3))))),
    "reshape": (lambda r: r.normal(size=(2, 6)), lambda x, r: ad.reshape(x, (3, 4))),
    "transpose": (lambda r: r.normal(size=(2, 3, 4)), lambda x, r: ad.transpose(x, (2, 0, 1))),
    "expand": (lambda r: r.normal(size=(1, 4)), lambda x, r: ad.expand(x, (3, 4))),
    "concat": (lambda r: r.normal(size=(2, 3)), lambda x, r: ad.concat([Tensor(r.normal(size=(2, 2))), x, x], axis=1)),
    "slice": (lambda r: r.normal(size=(5, 3)), lambda x, r: ad.slice_(x, 0, 1, 4)),
    "getitem": (lambda r: r.normal(size=(4, 3)), lambda x, r: x[1:3, ::2]),
    "softmax": (lambda r: r.normal(size=(3, 5)), lambda x, r: ad.softmax(x, axis=-1)),
    "log_softmax": (lambda r: r.normal(size=(3, 5)), lambda x, r: ad.log_softmax(x, axis=-1)),
    "layer_norm_x": (
        lambda r: r.normal(size=(3, 6)),
        lambda x, r: ad.layer_norm(x, Tensor(r.normal(size=6)), Tensor(r.normal(size=6)), 1e-6),
    ),
    "layer_norm_gamma": (
        lambda r: r.normal(size=(6,)),
        lambda x, r: ad.layer_norm(Tensor(r.normal(size=(3, 6))), x, Tensor(np.zeros(6)), 1e-6),
    ),
    "layer_norm_beta": (
        lambda r: r.normal(size=(6,)),
        lambda x, r: ad.layer_norm(Tensor(r.normal(size=(3, 6))), Tensor(np.ones(6)), x, 1e-6),
    ),
    "cosine_u": (lambda r: r.normal(size=(5,)), lambda x, r: ad.cosine_similarity(x, Tensor(r.normal(size=(5,))))),
    "cosine_v": (lambda r: r.normal(size=(4, 5)), lambda x, r: ad.row_cosine(Tensor(r.normal(size=(4, 5))), x)),
    "mse_mean": (lambda r: r.normal(size=(3, 3)), lambda x, r: ad.mse(x, Tensor(r.normal(size=(3, 3))))),
    "mse_sum": (lambda r: r.normal(size=(3, 3)), lambda x, r: ad.mse(x, Tensor(r.normal(size=(3, 3))), "sum")),
    "cross_entropy": (lambda r: r.normal(size=(4, 3)), lambda x, r: ad.cross_entropy(x, np.array([0, 2, 1, 2]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    sample, fn = PRIMITIVES[name]
    worst = 0.0
    for seed in range(N_POINTS):
        point = sample(np.random.default_rng([seed, 1]))
        err = ad.grad_check(lambda x: _reduce(fn(x, np.random.default_rng([seed, 2])), seed), point)
        worst = max(worst, err)
    assert worst < 1e-4, f"{name}: max relative error {worst:.2e}"


def test_clamp_passes_gradient_only_inside():
    x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]), requires_grad=True)
    ad.backward(ad.sum_(ad.clamp(x, -1.0, 1.0)))
    np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 0])


def test_matmul_examples():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(ad.tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(ad.matmul(a, ad.tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(ad.matmul(ad.tensor(np.zeros((2, 2))), a).data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((4, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(ad.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(ad.softmax(ad.tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], rtol=0, atol=1e-15)
    base = ad.softmax(ad.tensor([0.0, 0.4, 0.8])).data
    np.testing.assert_allclose(ad.softmax(ad.tensor([100.0, 100.4, 100.8])).data, base, atol=1e-12)


def test_softmax_extreme_logits_are_finite():
    out = ad.softmax(ad.tensor([1000.0, -1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0)


def test_layer_norm_examples():
    one, zero = ad.tensor(np.ones(2)), ad.tensor(np.zeros(2))
    np.testing.assert_allclose(ad.layer_norm(ad.tensor([1.0, 3.0]), one, zero, 1e-12).data, [-1.0, 1.0], atol=1e-9)
    const = ad.layer_norm(ad.tensor(np.full(5, 3.7)), ad.tensor(np.ones(5)), ad.tensor(np.zeros(5)), 1e-6)
    np.testing.assert_allclose(const.data, 0.0, atol=1e-9)
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(4, 64))
    y = ad.layer_norm(ad.tensor(x), ad.tensor(np.ones(64)), ad.tensor(np.zeros(64)), 1e-6).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-6)


def test_gelu_fixed_point_and_odd_part():
    assert ad.gelu(ad.tensor([0.0])).data[0] == 0.0
    # gelu(x) - gelu(-x) = x for the tanh form
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(ad.gelu(ad.tensor(x)).data - ad.gelu(ad.tensor(-x)).data, x, atol=1e-15)


def test_concat_sequence_axis_and_slice_inverse():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 10, 4)), rng.normal(size=(2, 21, 4))
    c = ad.concat([ad.tensor(a), ad.tensor(b)], axis=1)
    assert c.shape == (2, 31, 4)
    np.testing.assert_array_equal(ad.slice_(c, 1, 10, 31).data, b)
    np.testing.assert_array_equal(ad.slice_(c, 1, 0, 10).data, a)


def test_concat_rejects_mismatched_extents():
    with pytest.raises(ad.DimensionError):
        ad.concat([ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((3, 3)))], axis=1)


def test_cosine_examples():
    v = ad.tensor([0.3, -1.2, 2.0])
    assert ad.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)
    assert ad.cosine_similarity(ad.tensor([1.0, 0.0]), ad.tensor([0.0, 1.0])).item() == 0.0
    assert ad.cosine_similarity(ad.tensor([1.0, 0.0]), ad.tensor([1.0, 1.0])).item() == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_zero_input_is_degenerate():
    with pytest.raises(ad.DegenerateInputError):
        ad.cosine_similarity(ad.tensor([0.0, 0.0]), ad.tensor([1.0, 1.0]))
    # the internal guarded form stays finite
    out = ad.row_cosine(ad.tensor([[0.0, 0.0]]), ad.tensor([[1.0, 1.0]]))
    assert np.isfinite(out.data).all()


def test_mse_examples():
    x = ad.tensor([1.0, 2.0])
    assert ad.mse(x, x).item() == 0.0
    assert ad.mse(ad.tensor(0.0), ad.tensor(1.0)).item() == 1.0
    assert ad.mse(ad.tensor([0.0, 0.0]), ad.tensor([3.0, 4.0]), "sum").item() == 25.0
    with pytest.raises(ad.DimensionError):
        ad.mse(ad.tensor([1.0]), ad.tensor([1.0, 2.0]))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ad.ContractError):
        ad.cross_entropy(ad.tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    y = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.sum_(ad.tensor([1.0, 2.0])))
    assert y.grad is None or not np.any(y.grad)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ContractError):
        ad.backward(ad.mul_scalar(x, 2.0))


def test_no_grad_leaf_never_accumulates():
    a = Tensor(np.ones(3))
    b = Tensor(np.full(3, 2.0), requires_grad=True)
    ad.backward(ad.sum_(ad.mul(a, b)))
    assert a.grad is None
    np.testing.assert_array_equal(b.grad, np.ones(3))


def test_shared_subexpression_is_visited_once():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(ad.sum_(ad.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.mul_scalar(y, 1.0)
    ad.backward(ad.sum_(y))
    assert x.grad[0] == 1.0


def test_grad_check_linear_is_exact():
    w = np.random.default_rng(0).normal(size=7)
    err = ad.grad_check(lambda x: ad.sum_(ad.mul(x, w)), np.random.default_rng(1).normal(size=7))
    assert err < 1e-8


def test_counter_counts_backward_calls():
    before = ad.grad_count()
    x = Tensor(np.ones(2), requires_grad=True)
    for _ in range(3):
        ad.backward(ad.sum_(x))
    assert ad.grad_count() - before == 3


def test_counter_is_atomic_across_threads():
    before = ad.grad_count()

    def work():
        for _ in range(200):
            x = Tensor(np.ones(2), requires_grad=True)
            ad.backward(ad.sum_(x))

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ad.grad_count() - before == 800


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)))
        out = ad.sum_(ad.gelu(ad.layer_norm(ad.matmul(x, w), ad.tensor(np.ones(4)), ad.tensor(np.zeros(4)))))
        ad.backward(out)
        return out.item(), x.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert a == b
    np.testing.assert_array_equal(ga, gb)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(ad.tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 8), elements=finite),
    arrays(np.float64, st.integers(1, 8), elements=finite),
)
def test_concat_then_complementary_slices_reconstruct(a, b):
    c = ad.concat([ad.tensor(a), ad.tensor(b)], axis=0)
    np.testing.assert_array_equal(ad.slice_(c, 0, 0, len(a)).data, a)
    np.testing.assert_array_equal(ad.slice_(c, 0, len(a), len(a) + len(b)).data, b)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))))
def test_cosine_stays_in_range(uv):
    u, v = uv
    if not np.any(u) or not np.any(v):
        return
    c = ad.cosine_similarity(ad.tensor(u), ad.tensor(v)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
def test_grad_shape_matches_data(x):
    t = Tensor(x, requires_grad=True)
    ad.backward(ad.sum_(ad.mul(ad.gelu(t), t)))
    assert t.grad.shape == t.data.shape
