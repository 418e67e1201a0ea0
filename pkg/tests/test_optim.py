import numpy as np
import pytest

from dialtune import tensor as T
from dialtune.optim import (
    AdamState,
    ParamStore,
    adam_step,
    gaussian_init,
    load_checkpoint,
    save_checkpoint,
)
from dialtune.tensor import Tensor, backward


def make_store(values):
    store = ParamStore()
    for name, val in values.items():
        store.add(name, Tensor(np.array(val, dtype=float), requires_grad=True))
    return store


def test_duplicate_name_rejected():
    store = make_store({"w": [1.0]})
    with pytest.raises(ValueError, match="already registered"):
        store.add("w", Tensor([2.0]))


def test_iteration_order_is_insertion_order():
    store = make_store({"b": [1.0], "a": [2.0], "c": [3.0]})
    assert store.names() == ["b", "a", "c"]


def test_adam_zero_grad_is_identity():
    store = make_store({"w": [[1.0, -2.0]]})
    state = AdamState(weight_decay=0.0)
    before = store["w"].data.copy()
    adam_step(store, state, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, before)
    assert state.step == 1


def test_adam_single_step_hand_case():
    # theta = 0, g = 1, lr = 0.1, defaults: mhat = vhat = 1 -> theta ~= -0.1
    store = make_store({"w": [0.0]})
    store["w"].grad[...] = 1.0
    state = AdamState()
    adam_step(store, state, lr=0.1)
    assert store["w"].data[0] == pytest.approx(-0.1, abs=1e-8)
    # grads are consumed
    np.testing.assert_array_equal(store["w"].grad, [0.0])


def test_adam_symmetry_identical_params():
    store = make_store({"a": [0.3, -0.7], "b": [0.3, -0.7]})
    state = AdamState(weight_decay=0.01)
    rng = T.make_rng(3)
    for _ in range(20):
        g = rng.normal(size=2)
        store["a"].grad[...] = g
        store["b"].grad[...] = g
        adam_step(store, state, lr=0.05)
    np.testing.assert_array_equal(store["a"].data, store["b"].data)


def test_adam_missing_grad_errors():
    store = ParamStore()
    p = Tensor([1.0], requires_grad=True)
    store.add("w", p)
    p.grad = None
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(store, AdamState(), lr=0.1)


def test_adam_nonpositive_lr_errors():
    store = make_store({"w": [1.0]})
    with pytest.raises(ValueError, match="positive"):
        adam_step(store, AdamState(), lr=0.0)


def test_seeded_trajectory_bit_identical():
    # identical seeds -> bit-identical parameters over 100 steps
    def run():
        rng = T.make_rng(99)
        store = ParamStore()
        store.add("w", gaussian_init(rng, (4, 3)))
        state = AdamState(weight_decay=0.01)
        x = rng.normal(size=(2, 4))
        for _ in range(100):
            loss = T.mean_all(T.square(T.matmul(Tensor(x), store["w"])))
            backward(loss)
            adam_step(store, state, lr=0.01)
        return store["w"].data.copy()

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_checkpoint_round_trip(tmp_path):
    rng = T.make_rng(7)
    store = ParamStore()
    store.add("emb/table", gaussian_init(rng, (5, 3)))
    store.add("head/bias", Tensor(np.zeros(3), requires_grad=True))
    cfg = {"n_layers": 2, "d_model": 3}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, cfg, seed=7)

    loaded, loaded_cfg, loaded_seed = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert loaded_seed == 7
    assert loaded.names() == store.names()
    for name, p in store.items():
        np.testing.assert_array_equal(loaded[name].data, p.data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError, match="not a dialtune-checkpoint"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    store = make_store({"w": [[1.0, 2.0], [3.0, 4.0]]})
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, {}, seed=0)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_copy_is_deep_and_layout_preserving():
    store = make_store({"w": [1.0, 2.0], "b": [0.5]})
    dup = store.copy()
    dup["w"].data[0] = 42.0
    assert store["w"].data[0] == 1.0
    assert dup.names() == store.names()
