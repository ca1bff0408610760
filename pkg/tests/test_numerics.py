import json
import math

import numpy as np
import pytest
from scipy.special import softmax as scipy_softmax

import numerics as nm
from config import NonFiniteGradientError, NumericsError, ShapeError


def make_store(dtype=np.float64, **arrays):
    store = nm.ParameterStore(dtype)
    for name, value in arrays.items():
        store.add(name, value)
    return store


def check_gradients(build, store, names=None, rtol=1e-6, atol=1e-8):
    """Compare backward against central differences for a loss built by ``build(tape)``."""
    def loss_fn(s):
        return float(build(nm.Tape(s)).value)

    tape = nm.Tape(store)
    grads = nm.backward(tape, build(tape))
    for name in names or list(store):
        expected = nm.numerical_gradient(loss_fn, store, name)
        np.testing.assert_allclose(grads[name], expected, rtol=rtol, atol=atol, err_msg=name)


def weighted_sum(tape, node, weights):
    """Scalar projection: sum(node * weights) for a fixed random weight array."""
    return nm.reduce_sum(nm.mul(node, tape.constant(weights)))


def test_softmax_matches_scipy(rng):
    x = rng.normal(size=(4, 7)) * 30
    tape = nm.Tape(dtype=np.float64, enabled=False)
    out = nm.softmax(tape.constant(x)).value
    np.testing.assert_allclose(out, scipy_softmax(x, axis=-1), rtol=1e-12)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0)
    logs = nm.log_softmax(tape.constant(x)).value
    np.testing.assert_allclose(np.exp(logs), out, rtol=1e-10)


def test_matmul_identity_and_loop_oracle(rng):
    tape = nm.Tape(dtype=np.float64)
    a = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(nm.matmul(tape.constant(a), np.eye(5)).value, a)
    b = rng.normal(size=(5, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nm.matmul(tape.constant(a), tape.constant(b)).value, expected, rtol=1e-12)


def test_shape_errors_name_the_operation():
    tape = nm.Tape(dtype=np.float64)
    with pytest.raises(ShapeError) as info:
        nm.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
    assert "matmul" in str(info.value)
    assert "(2, 3)" in str(info.value)
    with pytest.raises(ShapeError):
        nm.add(tape.constant(np.ones(3)), tape.constant(np.ones(4)))
    with pytest.raises(ShapeError):
        nm.take(tape.constant(np.ones((3, 2))), [0, 3])


def test_backward_of_sum_is_ones():
    store = make_store(W=np.arange(6.0).reshape(2, 3))
    tape = nm.Tape(store)
    grads = nm.backward(tape, nm.reduce_sum(tape.param("W")))
    np.testing.assert_array_equal(grads["W"], np.ones((2, 3)))


def test_backward_of_square():
    store = make_store(x=np.array([3.0]))
    tape = nm.Tape(store)
    x = tape.param("x")
    grads = nm.backward(tape, nm.reduce_sum(nm.mul(x, x)))
    assert grads["x"][0] == pytest.approx(6.0)


def test_unreached_parameters_get_zero_gradients():
    store = make_store(used=np.ones(2), unused=np.ones((3, 3)))
    tape = nm.Tape(store)
    grads = nm.backward(tape, nm.reduce_sum(tape.param("used")))
    np.testing.assert_array_equal(grads["unused"], np.zeros((3, 3)))


def test_backward_errors():
    store = make_store(x=np.ones(2))
    tape = nm.Tape(store)
    with pytest.raises(NumericsError):
        nm.backward(tape, nm.relu(tape.param("x")))
    loss = nm.reduce_sum(tape.param("x"))
    nm.backward(tape, loss)
    with pytest.raises(NumericsError):
        nm.backward(tape, loss)


def test_pick_rejects_out_of_range_targets():
    tape = nm.Tape(dtype=np.float64)
    with pytest.raises(NumericsError):
        nm.pick(tape.constant(np.zeros((2, 4))), [1, 4])


@pytest.mark.parametrize(
    "op",
    ["matmul", "batched_matmul", "add_bias", "mul", "sub", "scalar_mul", "relu", "sum_axis", "mean",
     "sqrt", "log", "softmax", "log_softmax", "concat", "take", "pick", "tile_rows", "reshape",
     "transpose", "segment_sum", "layer_norm"],
)
def test_gradients_match_finite_differences(op):
    rng = np.random.default_rng(sum(map(ord, op)))
    direction = rng.normal(size=64)

    def project(tape, node):
        return weighted_sum(tape, node, direction[: node.value.size].reshape(node.value.shape))

    if op == "matmul":
        store = make_store(a=rng.normal(size=(3, 4)), b=rng.normal(size=(4, 2)))
        build = lambda t: project(t, nm.matmul(t.param("a"), t.param("b")))
    elif op == "batched_matmul":
        store = make_store(a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(2, 4, 3)))
        build = lambda t: project(t, nm.matmul(t.param("a"), t.param("b")))
    elif op == "add_bias":
        store = make_store(x=rng.normal(size=(2, 3, 4)), b=rng.normal(size=4))
        build = lambda t: project(t, nm.add_bias(t.param("x"), t.param("b")))
    elif op == "mul":
        store = make_store(a=rng.normal(size=(3, 3)), b=rng.normal(size=(3, 3)))
        build = lambda t: project(t, nm.mul(t.param("a"), t.param("b")))
    elif op == "sub":
        store = make_store(a=rng.normal(size=5), b=rng.normal(size=5))
        build = lambda t: project(t, nm.scale(nm.sub(t.param("a"), t.param("b")), 1.7))
    elif op == "scalar_mul":
        store = make_store(s=rng.normal(size=1), x=rng.normal(size=(3, 2)))
        build = lambda t: project(t, nm.scalar_mul(t.param("s"), t.param("x")))
    elif op == "relu":
        x = rng.normal(size=(4, 4))
        x[np.abs(x) < 1e-3] = 0.5
        store = make_store(x=x)
        build = lambda t: project(t, nm.relu(t.param("x")))
    elif op == "sum_axis":
        store = make_store(x=rng.normal(size=(3, 4, 2)))
        build = lambda t: project(t, nm.reduce_sum(t.param("x"), axis=1))
    elif op == "mean":
        store = make_store(x=rng.normal(size=(5, 3)))
        build = lambda t: project(t, nm.mean(t.param("x"), axis=0))
    elif op == "sqrt":
        store = make_store(x=rng.uniform(0.5, 2.0, size=6))
        build = lambda t: project(t, nm.sqrt(t.param("x")))
    elif op == "log":
        store = make_store(x=rng.uniform(0.5, 2.0, size=6))
        build = lambda t: project(t, nm.log(t.param("x")))
    elif op == "softmax":
        store = make_store(x=rng.normal(size=(3, 5)))
        build = lambda t: project(t, nm.softmax(t.param("x")))
    elif op == "log_softmax":
        store = make_store(x=rng.normal(size=(3, 5)))
        build = lambda t: project(t, nm.log_softmax(t.param("x")))
    elif op == "concat":
        store = make_store(a=rng.normal(size=(2, 3)), b=rng.normal(size=(2, 1)))
        build = lambda t: project(t, nm.concat([t.param("a"), t.param("b")], axis=-1))
    elif op == "take":
        store = make_store(table=rng.normal(size=(4, 3)))
        build = lambda t: project(t, nm.take(t.param("table"), [0, 2, 2, 3, 0]))
    elif op == "pick":
        store = make_store(x=rng.normal(size=(3, 4)))
        build = lambda t: project(t, nm.pick(t.param("x"), [3, 0, 3]))
    elif op == "tile_rows":
        store = make_store(x=rng.normal(size=(1, 4)))
        build = lambda t: project(t, nm.tile_rows(t.param("x"), 3))
    elif op == "reshape":
        store = make_store(x=rng.normal(size=(2, 6)))
        build = lambda t: project(t, nm.reshape(t.param("x"), (3, 2, 2)))
    elif op == "transpose":
        store = make_store(x=rng.normal(size=(2, 3, 4)))
        build = lambda t: project(t, nm.transpose(t.param("x"), (2, 0, 1)))
    elif op == "segment_sum":
        store = make_store(x=rng.normal(size=(5, 2)))
        build = lambda t: project(t, nm.segment_sum(t.param("x"), [0, 2, 0, 1, 2], 3))
    else:
        store = make_store(x=rng.normal(size=(3, 5)), gamma=rng.normal(size=5), beta=rng.normal(size=5))
        build = lambda t: project(t, nm.layer_norm(t.param("x"), t.param("gamma"), t.param("beta")))
    check_gradients(build, store, rtol=1e-5, atol=1e-7)


def test_adam_zero_gradient_keeps_values():
    store = make_store(w=np.array([1.0, -2.0]))
    nm.adam_step(store, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(store["w"], [1.0, -2.0])
    assert store.steps["w"] == 1


def test_adam_first_step_size():
    store = make_store(w=np.array([0.5]))
    nm.adam_step(store, {"w": np.array([1.0])}, lr=0.01)
    assert store["w"][0] == pytest.approx(0.5 - 0.01 / (1.0 + 1e-8), abs=1e-15)


def test_adam_rejects_non_finite_gradients_without_changes():
    store = make_store(a=np.ones(2), b=np.ones(3))
    before = store.snapshot()
    with pytest.raises(NonFiniteGradientError) as info:
        nm.adam_step(store, {"a": np.ones(2), "b": np.array([0.0, np.nan, 1.0])}, lr=0.1)
    assert "b" in str(info.value)
    for name in store:
        np.testing.assert_array_equal(store[name], before[name])
        assert store.steps[name] == 0
        np.testing.assert_array_equal(store.m[name], 0.0)


def test_adam_zero_learning_rate_is_bitwise_identity(rng):
    w = rng.normal(size=(4, 3)).astype(np.float32)
    store = make_store(np.float32, w=w)
    for _ in range(3):
        nm.adam_step(store, {"w": rng.normal(size=(4, 3)).astype(np.float32)}, lr=0.0)
    assert store["w"].tobytes() == w.tobytes()


def test_adam_trace_on_square_loss():
    lr, beta1, beta2, eps = 0.1, 0.9, 0.999, 1e-8
    store = make_store(x=np.array([2.0]))
    x, m, v = 2.0, 0.0, 0.0
    for t in range(1, 11):
        tape = nm.Tape(store)
        node = tape.param("x")
        grads = nm.backward(tape, nm.reduce_sum(nm.mul(node, node)))
        nm.adam_step(store, grads, lr, beta1, beta2, eps)
        g = 2.0 * x
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        x -= lr * (m / (1 - beta1 ** t)) / (math.sqrt(v / (1 - beta2 ** t)) + eps)
        assert store["x"][0] == pytest.approx(x, rel=1e-12)


def test_mlp_with_zero_weights_returns_last_bias(rng):
    store = nm.ParameterStore(np.float64)
    nm.init_mlp(store, rng, "head", [3, 4, 2])
    for name in store.names("head"):
        store[name][...] = 0.0
    store["head.1.b"][...] = [0.25, -1.0]
    tape = nm.Tape(store)
    out = nm.mlp_forward(nm.mlp_layers(tape, "head"), tape.constant(rng.normal(size=(5, 3))))
    np.testing.assert_array_equal(out.value, np.tile([0.25, -1.0], (5, 1)))


def test_mlp_identity_layers(rng):
    store = make_store(**{"id.0.W": np.eye(3), "id.0.b": np.zeros(3), "id.1.W": np.eye(3), "id.1.b": np.zeros(3)})
    x = rng.uniform(0.1, 1.0, size=(2, 3))
    tape = nm.Tape(store)
    np.testing.assert_allclose(nm.mlp_forward(nm.mlp_layers(tape, "id"), tape.constant(x)).value, x)


def test_mlp_matches_composed_numpy(rng):
    store = nm.ParameterStore(np.float64)
    nm.init_mlp(store, rng, "m", [4, 6, 5, 2])
    for name in store.names("m"):
        if name.endswith(".b"):
            store[name][...] = rng.normal(size=store[name].shape)
    x = rng.normal(size=(3, 4))
    h = np.maximum(x @ store["m.0.W"] + store["m.0.b"], 0.0)
    h = np.maximum(h @ store["m.1.W"] + store["m.1.b"], 0.0)
    expected = h @ store["m.2.W"] + store["m.2.b"]
    tape = nm.Tape(store)
    np.testing.assert_allclose(nm.mlp_forward(nm.mlp_layers(tape, "m"), tape.constant(x)).value, expected)


def test_mlp_shape_errors():
    store = nm.ParameterStore(np.float64)
    tape = nm.Tape(store)
    with pytest.raises(ShapeError):
        nm.mlp_forward([], tape.constant(np.ones((1, 2))))
    nm.init_mlp(store, np.random.default_rng(0), "m", [3, 2])
    with pytest.raises(ShapeError):
        nm.mlp_forward(nm.mlp_layers(nm.Tape(store), "m"), tape.constant(np.ones((1, 4))))


def test_glorot_bounds(rng):
    w = nm.glorot_uniform(rng, 30, 10)
    assert w.shape == (30, 10)
    assert np.abs(w).max() <= math.sqrt(6.0 / 40)
    e = nm.embedding_normal(rng, 500, 20)
    assert abs(e.std() - 0.02) < 0.002


def test_duplicate_parameter_names_are_rejected():
    store = make_store(w=np.ones(1))
    with pytest.raises(NumericsError):
        store.add("w", np.ones(1))


def test_checkpoint_round_trip(tmp_path, rng):
    store = nm.ParameterStore(np.float32)
    nm.init_mlp(store, rng, "head", [3, 4, 2])
    nm.adam_step(store, {name: rng.normal(size=store[name].shape).astype(np.float32) for name in store}, lr=1e-3)
    path = nm.save_checkpoint(store, tmp_path / "ck" / "model.json", {"kind": "test", "seed": 3})
    loaded, metadata = nm.load_checkpoint(path)
    assert metadata == {"kind": "test", "seed": 3}
    assert loaded.dtype == np.float32
    assert list(loaded) == list(store)
    for name in store:
        assert loaded[name].tobytes() == store[name].tobytes()
        np.testing.assert_array_equal(loaded.m[name], store.m[name])
        np.testing.assert_array_equal(loaded.v[name], store.v[name])
        assert loaded.steps[name] == 1


def test_checkpoint_blob_is_little_endian(tmp_path):
    store = make_store(np.float64, w=np.array([1.5, -2.25]))
    path = nm.save_checkpoint(store, tmp_path / "model.json", include_adam=False)
    manifest = json.loads(path.read_text())
    assert manifest["byte_order"] == "little"
    assert manifest["precision"] == "float64"
    assert [e["kind"] for e in manifest["entries"]] == ["param"]
    raw = (tmp_path / manifest["blob"]).read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw, dtype="<f8"), [1.5, -2.25])


def test_unknown_precision():
    with pytest.raises(NumericsError):
        nm.resolve_dtype("float16")


def test_numerical_gradient_on_selected_entries():
    store = make_store(w=np.array([[1.0, 2.0], [3.0, 4.0]]))

    def loss_fn(s):
        return float(np.sum(s["w"] ** 3))

    grad = nm.numerical_gradient(loss_fn, store, "w", indices=[1, 2])
    np.testing.assert_allclose(grad, [[0.0, 12.0], [27.0, 0.0]], rtol=1e-8)
    np.testing.assert_array_equal(store["w"], [[1.0, 2.0], [3.0, 4.0]])
