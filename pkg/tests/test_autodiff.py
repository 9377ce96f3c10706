import numpy as np
import pytest

from prgcn import autodiff as ad
from prgcn.autodiff import ParamStore, Tape, Tensor
from prgcn.gradcheck import check_gradients


def test_matmul_by_hand():
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_relu_and_max_reduce():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    out = ad.forward_op("max_reduce_axis", [np.array([[1.0, 5.0], [7.0, 2.0]])], axis=1)
    np.testing.assert_array_equal(out.data, [5, 7])


def test_square_grad():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = ad.square(x)
    tape.backward(y)
    assert x.grad == pytest.approx(6.0)


def test_mean_relu_grad():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mean(ad.relu(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [0.0, 0.5])


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(2.0, requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            y = ad.square(x)
        tape.backward(y)
    assert x.grad == pytest.approx(8.0)


def test_no_tape_records_nothing_without_grad():
    with Tape() as tape:
        ad.add(Tensor([1.0]), Tensor([2.0]))
    assert len(tape) == 0


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.square(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_shape_and_domain_errors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ad.DomainError):
        ad.log(np.array([1.0, 0.0]))


def test_unknown_kind():
    with pytest.raises(KeyError):
        ad.forward_op("conv3d", [np.ones(3)])


def test_every_required_kind_dispatches():
    assert set(ad.PRIMITIVES) == {"matmul", "add_broadcast", "relu", "concat_axis", "max_reduce_axis",
                                  "mean_reduce", "square", "log", "sqnorm"}


def test_max_reduce_tie_sends_grad_to_first():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.max_reduce(x, axis=1))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    store = ParamStore()
    names = ad.init_mlp(store, "m", [4, 6, 5, 2], rng)
    x = Tensor(rng.normal(size=(7, 4)))
    err = check_gradients(lambda: ad.mean(ad.square(ad.mlp(store, names, x, final_relu=False))),
                          list(store.params.values()))
    assert err < 1e-4


def test_quat_to_rotmat_properties():
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    R = ad.quat_to_rotmat(q).data
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    np.testing.assert_array_equal(ad.quat_to_rotmat(-q).data, R)
    np.testing.assert_array_equal(ad.quat_to_rotmat([1.0, 0, 0, 0]).data, np.eye(3))


def test_nn_sqdist_value():
    a = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    b = np.array([[1.0, 0, 0], [3.0, 0, 0], [0.0, 0.5, 0]])
    np.testing.assert_allclose(ad.nn_sqdist(a, b).data, [0.25, 1.0])


# ADAM


def _scalar_store(w=0.0):
    store = ParamStore()
    store.add("w", np.array(w))
    return store


def test_adam_first_step_closed_form():
    store = _scalar_store()
    store["w"].grad = np.array(1.0)
    ad.adam_step(store, lr=0.1)
    assert store["w"].data == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_grad_leaves_parameter():
    store = _scalar_store(0.7)
    store["w"].grad = np.array(0.0)
    ad.adam_step(store, lr=0.1)
    assert store["w"].data == 0.7


def test_adam_two_steps_decrease():
    store = _scalar_store()
    values = []
    for _ in range(2):
        store["w"].grad = np.array(1.0)
        ad.adam_step(store, lr=0.1)
        values.append(float(store["w"].data))
    assert 0 > values[0] > values[1]


def test_adam_missing_grad_errors():
    store = _scalar_store()
    with pytest.raises(ValueError, match="no gradient"):
        ad.adam_step(store, lr=0.1)


def test_init_is_seeded_and_bounded():
    a, b = ParamStore(), ParamStore()
    ad.init_linear(a, "l", 16, 4, np.random.default_rng(5))
    ad.init_linear(b, "l", 16, 4, np.random.default_rng(5))
    np.testing.assert_array_equal(a["l.weight"].data, b["l.weight"].data)
    assert np.abs(a["l.weight"].data).max() <= 0.25


def test_copy_from_checks_shapes_and_names():
    store = ParamStore()
    store.add("w", np.zeros((2, 2)))
    with pytest.raises(KeyError):
        store.copy_from({})
    with pytest.raises(ad.ShapeError):
        store.copy_from({"w": np.zeros(3)})
