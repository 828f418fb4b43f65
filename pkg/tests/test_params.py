import numpy as np
import pytest

from modnet.params import ParameterStore, glorot_bound, named_seed


def test_same_seed_and_name_is_bit_identical():
    a = ParameterStore(seed=3).weight("find.red.conv.weight", (8, 4))
    b = ParameterStore(seed=3).weight("find.red.conv.weight", (8, 4))
    assert np.array_equal(a.data, b.data)


def test_creation_order_is_irrelevant():
    first = ParameterStore(seed=5)
    w1 = first.weight("alpha.x.fc.weight", (3, 3))
    v1 = first.weight("beta.y.fc.weight", (3, 3))
    second = ParameterStore(seed=5)
    v2 = second.weight("beta.y.fc.weight", (3, 3))
    w2 = second.weight("alpha.x.fc.weight", (3, 3))
    assert np.array_equal(w1.data, w2.data)
    assert np.array_equal(v1.data, v2.data)


def test_different_names_differ():
    store = ParameterStore(seed=0)
    a = store.weight("find.red.conv.weight", (16,))
    b = store.weight("find.blue.conv.weight", (16,))
    assert not np.array_equal(a.data, b.data)


def test_biases_start_at_zero():
    store = ParameterStore(seed=0)
    assert np.array_equal(store.bias("find.red.conv.bias", (7,)).data,
                          np.zeros(7, dtype=np.float32))


def test_lookup_returns_same_tensor_identity():
    store = ParameterStore(seed=0)
    first = store.weight("transform.above.fc1.weight", (4, 2))
    again = store.weight("transform.above.fc1.weight", (4, 2))
    assert first is again
    assert store.get("transform.above.fc1.weight") is first


def test_shape_conflict_rejected():
    store = ParameterStore(seed=0)
    store.weight("measure.is.fc.weight", (4, 2))
    with pytest.raises(ValueError, match="dims"):
        store.weight("measure.is.fc.weight", (5, 2))


def test_init_bounds_and_mean():
    store = ParameterStore(seed=11)
    w = store.weight("describe.color.fc.weight", (100, 100)).data
    bound = glorot_bound((100, 100))
    assert (np.abs(w) <= bound).all()
    assert abs(w.mean()) < 0.01


def test_named_seed_is_stable():
    assert named_seed(1, "a.b.c") == named_seed(1, "a.b.c")
    assert named_seed(1, "a.b.c") != named_seed(2, "a.b.c")
    assert named_seed(1, "a.b.c") != named_seed(1, "a.b.d")


def test_opt_state_matches_dims():
    store = ParameterStore(seed=0)
    store.weight("combine.and.conv.weight", (1, 1, 2, 1))
    eg2, edx2 = store.opt_state("combine.and.conv.weight")
    assert eg2.shape == (1, 1, 2, 1) and edx2.shape == (1, 1, 2, 1)
    with pytest.raises(ValueError):
        store.set_opt_state("combine.and.conv.weight", np.zeros(3), np.zeros(3))


def test_zero_grads():
    store = ParameterStore(seed=0)
    w = store.weight("find.red.conv.weight", (4,))
    w.grad += 1.0
    store.zero_grads()
    assert np.array_equal(w.grad, np.zeros(4, dtype=np.float32))
