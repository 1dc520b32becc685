import math

import numpy as np
import pytest

from tabtextqa import tensor as T
from tabtextqa.gradcheck import check_primitives
from tabtextqa.tensor import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


def test_matmul_shape_error_names_dims():
    with pytest.raises(T.ShapeError, match="4"):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 2)))


def test_softmax_symmetric_and_normalized():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    x = np.random.default_rng(1).normal(size=(50, 7)) * 30
    p = T.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all()
    assert np.abs(p.sum(-1) - 1).max() < 1e-9


def test_softmax_empty_axis_errors():
    with pytest.raises(T.ShapeError):
        T.softmax(Tensor(np.zeros((2, 0))))


def test_softmax_mask():
    p = T.softmax(Tensor([1.0, 5.0, 2.0]), mask=np.array([True, False, True])).data
    assert p[1] == 0.0
    assert abs(p.sum() - 1) < 1e-12
    assert np.array_equal(T.softmax(Tensor([1.0, 2.0]), mask=np.array([False, False])).data, [0.0, 0.0])


def test_layer_norm_constant_vector_is_zero():
    assert np.allclose(T.layer_norm(Tensor(np.full(6, 3.7))).data, 0.0)


def test_tanh_gradients():
    x = leaf(np.zeros(3))
    g = T.backward(T.tanh(x).sum(), {"x": x})["x"]
    assert np.allclose(g, 1.0)

    x = leaf([0.5])
    analytic = T.backward(T.tanh(x).sum(), {"x": x})["x"][0]
    h = 1e-5
    numeric = (math.tanh(0.5 + h) - math.tanh(0.5 - h)) / (2 * h)
    assert abs(numeric - 0.78645) < 1e-5
    assert abs(analytic - numeric) < 1e-9


def test_unused_parameter_gets_zero_grad():
    x, unused = leaf([1.0, 2.0]), leaf([[3.0]])
    grads = T.backward((x * x).sum(), {"x": x, "unused": unused})
    assert np.array_equal(grads["unused"], np.zeros((1, 1)))
    assert np.allclose(grads["x"], [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(T.ShapeError):
        T.backward(x * 2.0, {"x": x})


def test_gradient_accumulates_over_shared_nodes():
    x = leaf([3.0])
    y = x * x
    g = T.backward((y + y * x).sum(), {"x": x})["x"]
    assert np.allclose(g, 2 * 3.0 + 3 * 9.0)


def test_grad_check_quadratic_and_constant():
    x = leaf(np.random.default_rng(2).normal(size=5))
    assert T.grad_check(lambda: (x * x).sum(), {"x": x}) < 1e-8
    assert T.grad_check(lambda: Tensor(4.0) + 0.0 * x.sum().detach(), {"x": x}) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_non_finite_coordinate():
    x = leaf([1e-6, 1.0])
    with pytest.raises(T.NumericError, match=r"x\[0\]"):
        T.grad_check(lambda: T.log(x).sum(), {"x": x}, eps=1e-5)


def test_every_primitive_matches_finite_differences():
    errors = check_primitives(seed=3, max_coords=100)
    bad = {k: v for k, v in errors.items() if v >= 1e-4}
    assert not bad, bad


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))

    def run():
        return T.softmax(T.layer_norm(Tensor(a)) @ Tensor(b)).data.tobytes()

    assert run() == run()


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert y._parents == () and not y.requires_grad


def test_adam_zero_gradient_keeps_params():
    p = {"w": leaf([1.0, -2.0])}
    state = T.AdamState(lr=0.1)
    T.adam_step(p, {"w": np.array([1.0, 1.0])}, state)
    before = p["w"].data.copy()
    m_before = state.m["w"].copy()
    T.adam_step(p, {"w": np.zeros(2)}, state)
    assert state.step == 2
    assert np.all(np.abs(state.m["w"]) < np.abs(m_before))
    # the remaining momentum still moves the parameter; a fresh state would not
    fresh = {"w": leaf([1.0, -2.0])}
    T.adam_step(fresh, {"w": np.zeros(2)}, T.AdamState(lr=0.1))
    assert np.array_equal(fresh["w"].data, [1.0, -2.0])
    assert not np.array_equal(before, p["w"].data)


def test_adam_constant_gradient_step_approaches_lr():
    p = {"w": leaf([0.0])}
    state = T.AdamState(lr=1e-3)
    prev = 0.0
    for _ in range(2000):
        prev = p["w"].data[0]
        T.adam_step(p, {"w": np.array([0.37])}, state)
    assert abs(abs(p["w"].data[0] - prev) - 1e-3) < 1e-7
    assert state.step == 2000


def test_adam_rejects_non_finite():
    p = {"w": leaf([0.0])}
    with pytest.raises(T.NumericError, match="w"):
        T.adam_step(p, {"w": np.array([np.nan])}, T.AdamState(lr=1e-3))


def test_checkpoint_round_trip_and_bytes(tmp_path):
    rng = np.random.default_rng(5)
    params = {"b.w": rng.normal(size=(2, 3)), "a": rng.normal(size=4)}
    T.save_checkpoint(tmp_path / "one.ckpt", params, {"seed": 8, "config_hash": "abc"})
    T.save_checkpoint(tmp_path / "two.ckpt", dict(reversed(list(params.items()))), {"config_hash": "abc", "seed": 8})
    assert (tmp_path / "one.ckpt").read_bytes() == (tmp_path / "two.ckpt").read_bytes()
    arrays, meta = T.load_checkpoint(tmp_path / "one.ckpt")
    assert meta == {"format_version": 1, "seed": 8, "config_hash": "abc"}
    for k, v in params.items():
        assert np.array_equal(arrays[k], v)
