import math

import numpy as np
import pytest

from errors import ContractError, DimensionError, NonFiniteError, ValidationError
from gradcheck import max_rel_error, numeric_grad
from tensor_core import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    concat,
    conv2d,
    default_dtype,
    detach,
    global_avg_pool,
    index_put,
    linear,
    max_pool2d,
    mul,
    no_grad,
    relu,
    softmax,
    softmax_cross_entropy,
    stack,
)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return mul(out, Tensor(weights, dtype=out.dtype)).sum()


def _check_layer(build, arrays, rng, tol, h, floor=1e-2):
    """build(*tensors) -> output tensor; compares every input's gradient to central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = np.asarray(rng.standard_normal(out.shape))
    backward(_weighted_sum(out, weights))

    for t in tensors:
        def loss_fn():
            with no_grad():
                return float(np.sum(build(*tensors).data.astype(np.float64) * weights))

        num = numeric_grad(loss_fn, t.data, h=h)
        assert max_rel_error(t.grad, num, floor=floor) < tol


# -----------------------------
# conv2d
# -----------------------------
def test_conv2d_all_ones_sums_to_nine():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 4)))
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_output_size(stride, padding):
    x = Tensor(np.zeros((1, 2, 7, 6)))
    w = Tensor(np.zeros((3, 2, 3, 3)))
    out = conv2d(x, w, stride=stride, padding=padding)
    assert out.shape == (1, 3, (7 + 2 * padding - 3) // stride + 1, (6 + 2 * padding - 3) // stride + 1)


def test_conv2d_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="C=2 vs weight axis C=3"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError, match="kh=5"):
        conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_gradient_float32(rng):
    arrays = [
        rng.standard_normal((2, 3, 8, 8)).astype(np.float32),
        rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        rng.standard_normal(4).astype(np.float32),
    ]
    _check_layer(lambda x, w, b: conv2d(x, w, b, stride=1, padding=1), arrays, rng, tol=1e-3, h=1e-2, floor=1.0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0)])
def test_conv2d_gradient_float64(f64, rng, stride, padding):
    arrays = [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
    _check_layer(lambda x, w, b: conv2d(x, w, b, stride=stride, padding=padding), arrays, rng, tol=1e-6, h=1e-6)


# -----------------------------
# other layers
# -----------------------------
def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_global_avg_pool_constant_map():
    out = global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5)))
    np.testing.assert_allclose(out.data, np.full((2, 3), 2.5))


def test_softmax_sums_to_one(rng):
    probs = softmax(Tensor(rng.standard_normal((5, 7)) * 10)).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_max_pool_ties_go_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(max_pool2d(x, 2).sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


PUT_INDEX = (np.array([0, 1]), np.array([2, 0]))


def _away_from_zero(rng, shape):
    n = rng.standard_normal(shape)
    return np.sign(n) * (0.1 + np.abs(n))


def _spread(rng, shape):
    # distinct values 0.1 apart, so a ±h step never changes a pooling window's winner
    return rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 - 5.0


LAYER_CASES = [
    ("relu", lambda x: relu(x), [(3, 4)], _away_from_zero),
    ("max_pool", lambda x: max_pool2d(x, 2), [(2, 3, 6, 4)], _spread),
    ("global_avg_pool", lambda x: global_avg_pool(x), [(2, 3, 4, 5)], None),
    ("linear", lambda x, w, b: linear(x, w, b), [(4, 5), (3, 5), (3,)], None),
    ("softmax", lambda x: softmax(x), [(3, 6)], None),
    ("cross_entropy", lambda x: softmax_cross_entropy(x, np.array([0, 5, 2])), [(3, 6)], None),
    ("stack", lambda a, b: stack([a, b], axis=1), [(2, 3), (2, 3)], None),
    ("concat", lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)], None),
    ("concat_rows", lambda a, b, c: concat([a, b, c]), [(1, 4), (3, 4), (2, 4)], None),
    ("index_put", lambda base, vals: index_put(base, PUT_INDEX, vals), [(2, 3, 4), (2, 4)], None),
]


def _layer_inputs(rng, shapes, make):
    return [make(rng, s) if make is not None else rng.standard_normal(s) for s in shapes]


@pytest.mark.parametrize("name,build,shapes,make", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
def test_layer_gradients_float64(f64, rng, name, build, shapes, make):
    _check_layer(build, _layer_inputs(rng, shapes, make), rng, tol=1e-6, h=1e-6)


@pytest.mark.parametrize("name,build,shapes,make", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
def test_layer_gradients_float32(rng, name, build, shapes, make):
    arrays = [a.astype(np.float32) for a in _layer_inputs(rng, shapes, make)]
    _check_layer(build, arrays, rng, tol=1e-3, h=1e-2, floor=1.0)


def test_concat_checks_shapes():
    with pytest.raises(DimensionError, match="tensor 1"):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)
    with pytest.raises(DimensionError):
        concat([])
    out = concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((1, 3)))], axis=-2)
    np.testing.assert_array_equal(out.data, [[0, 0, 0], [0, 0, 0], [1, 1, 1]])


def test_index_put_routes_gradient(f64, rng):
    base = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    values = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    index = (np.array([0, 1]), np.array([2, 0]))
    out = index_put(base, index, values)
    backward(out.sum())
    expected = np.ones((2, 3, 4))
    expected[0, 2] = 0
    expected[1, 0] = 0
    np.testing.assert_array_equal(base.grad, expected)
    np.testing.assert_array_equal(values.grad, np.ones((2, 4)))


# -----------------------------
# loss
# -----------------------------
def test_cross_entropy_saturated_correct_class():
    loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_gradient(f64, rng):
    logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    labels = np.array([0, 5, 2, 2])
    backward(softmax_cross_entropy(logits, labels))

    def loss_fn():
        with no_grad():
            return softmax_cross_entropy(logits, labels).item()

    assert max_rel_error(logits.grad, numeric_grad(loss_fn, logits.data)) < 1e-6
    onehot = np.eye(6)[labels]
    np.testing.assert_allclose(logits.grad, (softmax(Tensor(logits.data)).data - onehot) / 4, atol=1e-12)


@pytest.mark.parametrize("labels", [np.array([0, 3]), np.array([-1, 0]), np.array([0.0, 1.0])])
def test_cross_entropy_bad_labels(labels):
    with pytest.raises(ValidationError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), labels)


# -----------------------------
# backward
# -----------------------------
def test_backward_sum_gives_ones():
    theta = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(theta.sum())
    np.testing.assert_array_equal(theta.grad, np.ones((2, 3)))


def test_backward_through_detached_copy_leaves_no_grad():
    theta = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(3), requires_grad=True)
    backward((detach(theta) * other).sum())
    assert theta.grad is None
    np.testing.assert_array_equal(other.grad, np.ones(3))


def test_detach_keeps_values_bit_identical(rng):
    t = Tensor(rng.standard_normal(5), requires_grad=True)
    d = detach(t)
    assert d.data.tobytes() == t.data.tobytes()
    assert not d.requires_grad


def test_two_consumers_sum_branch_gradients(f64, rng):
    theta = Tensor(rng.standard_normal((3, 3)), requires_grad=True)

    def build():
        return (relu(theta) * theta).sum() + (theta * 3.0).sum()

    backward(build())

    def loss_fn():
        with no_grad():
            return build().item()

    assert max_rel_error(theta.grad, numeric_grad(loss_fn, theta.data)) < 1e-6


def test_mixed_detached_and_live_inputs(f64, rng):
    a = Tensor(rng.standard_normal(4), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    backward((a * detach(b) + a * b).sum())
    # reduced graph: d/da = 2b, d/db = a (only the live branch)
    np.testing.assert_allclose(a.grad, 2 * b.data)
    np.testing.assert_allclose(b.grad, a.data)


def test_backward_is_linear(f64, rng):
    theta = Tensor(rng.standard_normal(5), requires_grad=True)
    backward((theta * theta).sum())
    g1 = theta.grad.copy()
    theta.grad = None
    backward(relu(theta).sum())
    g2 = theta.grad.copy()
    theta.grad = None
    backward((theta * theta).sum() * 2.0 + relu(theta).sum() * -3.0)
    np.testing.assert_allclose(theta.grad, 2.0 * g1 - 3.0 * g2, atol=1e-6)


def test_backward_non_scalar_is_contract_error():
    with pytest.raises(ContractError, match="scalar"):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_backward_twice_on_released_graph():
    theta = Tensor(np.ones(2), requires_grad=True)
    loss = (theta * 2.0).sum()
    backward(loss)
    with pytest.raises(ContractError, match="released"):
        backward(loss)


def test_forward_and_gradients_are_deterministic(rng):
    x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    grads = []
    for _ in range(2):
        wt = Tensor(w, requires_grad=True)
        out = conv2d(Tensor(x), wt, padding=1)
        backward(out.sum())
        grads.append((out.data.tobytes(), wt.grad.tobytes()))
    assert grads[0] == grads[1]


def test_default_dtype_context():
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# -----------------------------
# Adam
# -----------------------------
def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, state, lr=1e-3)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_sign_of_gradient(f64):
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    adam_step(p, {"w": np.array([0.5, -2.0, 1e-3])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_decreases_quadratic(f64):
    theta = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState()
    previous = theta.data[0]
    for _ in range(5):
        adam_step({"theta": theta}, {"theta": 2 * theta.data.copy()}, state, lr=0.1)
        assert theta.data[0] < previous
        previous = theta.data[0]
    assert state.t == 5


def test_adam_zero_lr_is_bit_identical(rng):
    w = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
    before = w.data.tobytes()
    adam_step({"w": w}, {"w": rng.standard_normal((3, 3)).astype(np.float32)}, AdamState(), lr=0.0)
    assert w.data.tobytes() == before


def test_adam_non_finite_gradient_names_parameter():
    params = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    state = AdamState()
    with pytest.raises(NonFiniteError) as exc:
        adam_step(params, {"a": np.zeros(2), "b": np.array([np.nan, 0.0])}, state, lr=1e-3)
    assert exc.value.name == "b"
    assert state.t == 0
    np.testing.assert_array_equal(params["a"].data, np.ones(2))


def test_adam_negative_lr():
    with pytest.raises(ValidationError):
        adam_step({}, {}, AdamState(), lr=-1.0)
