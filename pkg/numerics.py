"""Dense arrays with reverse-mode differentiation, layers, Adam and checkpoints.

Arrays are plain numpy arrays. A ``Tape`` records every primitive applied to
its ``Node`` objects; ``backward`` walks the record in reverse once and returns
one gradient per parameter of the attached ``ParameterStore``.
"""
import json
import math
from pathlib import Path

import numpy as np

from config import NonFiniteGradientError, NumericsError, ShapeError

PRECISIONS = {"float32": np.float32, "float64": np.float64}
CHECKPOINT_VERSION = 1


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise NumericsError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


def precision_name(dtype):
    return np.dtype(dtype).name


class ParameterStore:
    """Named trainable arrays plus per-parameter Adam moments and step counts."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values = {}
        self.m = {}
        self.v = {}
        self.steps = {}

    def add(self, name, array):
        if name in self.values:
            raise NumericsError(f"duplicate parameter name {name!r}")
        self.values[name] = np.ascontiguousarray(array, dtype=self.dtype)
        self.m[name] = np.zeros_like(self.values[name])
        self.v[name] = np.zeros_like(self.values[name])
        self.steps[name] = 0

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self, prefix=""):
        return [name for name in self.values if name.startswith(prefix)]

    def snapshot(self):
        return {name: value.copy() for name, value in self.values.items()}

    def restore(self, snapshot):
        for name, value in snapshot.items():
            self.values[name][...] = value

    def astype(self, dtype):
        other = ParameterStore(dtype)
        for name, value in self.values.items():
            other.add(name, value)
            other.m[name] = self.m[name].astype(other.dtype)
            other.v[name] = self.v[name].astype(other.dtype)
            other.steps[name] = self.steps[name]
        return other


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_normal(rng, rows, cols):
    return rng.normal(0.0, 0.02, size=(rows, cols))


def init_linear(store, rng, name, fan_in, fan_out):
    store.add(f"{name}.W", glorot_uniform(rng, fan_in, fan_out))
    store.add(f"{name}.b", np.zeros(fan_out))


def init_mlp(store, rng, name, layer_sizes):
    for k in range(len(layer_sizes) - 1):
        init_linear(store, rng, f"{name}.{k}", layer_sizes[k], layer_sizes[k + 1])


class Node:
    __slots__ = ("value", "tape")

    def __init__(self, value, tape):
        self.value = value
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of primitive applications, consumed by one backward pass."""

    def __init__(self, store=None, dtype=None, enabled=True):
        self.store = store
        self.dtype = np.dtype(dtype) if dtype is not None else (store.dtype if store is not None else np.dtype(np.float64))
        self.enabled = enabled
        self.records = []
        self.params = {}
        self.consumed = False

    def param(self, name):
        node = self.params.get(name)
        if node is None:
            node = Node(self.store[name], self)
            self.params[name] = node
        return node

    def params_under(self, prefix):
        return {name[len(prefix):]: self.param(name) for name in self.store.names(prefix)}

    def constant(self, value):
        return Node(np.asarray(value, dtype=self.dtype), self)

    def emit(self, value, inputs, vjp):
        out = Node(value, self)
        if self.enabled:
            if self.consumed:
                raise NumericsError("tape was already consumed by backward")
            self.records.append((out, inputs, vjp))
        return out


def _tape_of(*items):
    for item in items:
        if isinstance(item, Node):
            return item.tape
    raise NumericsError("operation needs at least one Node input")


def _value(item):
    return item.value if isinstance(item, Node) else np.asarray(item)


def backward(tape, loss):
    """Gradients of a scalar loss for every parameter in the tape's store.

    Parameters the loss does not reach get zero arrays.
    """
    if loss.value.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if tape.consumed:
        raise NumericsError("tape was already consumed by backward")
    grads = {id(loss): np.ones_like(loss.value)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for node, gi in zip(inputs, vjp(g)):
            if gi is None or not isinstance(node, Node):
                continue
            key = id(node)
            grads[key] = grads[key] + gi if key in grads else gi
    tape.consumed = True
    result = {}
    if tape.store is not None:
        for name, value in tape.store.values.items():
            node = tape.params.get(name)
            g = grads.get(id(node)) if node is not None else None
            result[name] = np.zeros_like(value) if g is None else np.asarray(g, dtype=value.dtype).reshape(value.shape)
    return result


def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]:
        raise ShapeError("matmul", av.shape, bv.shape)

    def vjp(g):
        return g @ _swap(bv), _swap(av) @ g

    return tape.emit(av @ bv, (a, b), vjp)


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError("add", av.shape, bv.shape)
    return tape.emit(av + bv, (a, b), lambda g: (g, g))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError("sub", av.shape, bv.shape)
    return tape.emit(av - bv, (a, b), lambda g: (g, -g))


def add_bias(x, b):
    """x[..., d] + b[d]; the only broadcasting primitive."""
    xv, bv = _value(x), _value(b)
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ShapeError("add_bias", xv.shape, bv.shape)

    def vjp(g):
        return g, g.reshape(-1, bv.shape[0]).sum(axis=0)

    return _tape_of(x, b).emit(xv + bv, (x, b), vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError("mul", av.shape, bv.shape)
    return tape.emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x, factor):
    return x.tape.emit(x.value * factor, (x,), lambda g: (g * factor,))


def scalar_mul(s, x):
    """s[0] * x for a one-element s (a learnable scalar)."""
    sv, xv = _value(s), _value(x)
    if sv.size != 1:
        raise ShapeError("scalar_mul", sv.shape, xv.shape)
    factor = sv.reshape(())

    def vjp(g):
        return np.sum(g * xv).reshape(sv.shape), g * factor

    return _tape_of(s, x).emit(xv * factor, (s, x), vjp)


def relu(x):
    mask = x.value > 0
    return x.tape.emit(x.value * mask, (x,), lambda g: (g * mask,))


def reduce_sum(x, axis=None):
    xv = x.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    out = np.sum(xv, axis=axis)
    return x.tape.emit(np.asarray(out, dtype=xv.dtype), (x,), vjp)


def mean(x, axis=None):
    count = x.value.size if axis is None else x.value.shape[axis]
    if count == 0:
        raise ShapeError("mean", x.value.shape)
    return scale(reduce_sum(x, axis), 1.0 / count)


def sqrt(x):
    out = np.sqrt(x.value)
    return x.tape.emit(out, (x,), lambda g: (g * 0.5 / out,))


def log(x):
    xv = x.value
    return x.tape.emit(np.log(xv), (x,), lambda g: (g / xv,))


def _stable_softmax(xv):
    shifted = xv - np.max(xv, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis."""
    s = _stable_softmax(x.value)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return x.tape.emit(s, (x,), vjp)


def log_softmax(x):
    xv = x.value
    shifted = xv - np.max(xv, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    s = np.exp(out)

    def vjp(g):
        return (g - s * np.sum(g, axis=-1, keepdims=True),)

    return x.tape.emit(out, (x,), vjp)


def concat(nodes, axis=-1):
    values = [_value(n) for n in nodes]
    ref = values[0]
    ax = axis % ref.ndim
    for v in values[1:]:
        if v.ndim != ref.ndim or v.shape[:ax] + v.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError("concat", *(w.shape for w in values))
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _tape_of(*nodes).emit(np.concatenate(values, axis=ax), tuple(nodes), vjp)


def take(table, indices):
    """Rows of table selected by an integer index array (embedding lookup / gather)."""
    tv = _value(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise ShapeError("take", tv.shape, idx.shape)

    def vjp(g):
        grad = np.zeros_like(tv)
        np.add.at(grad, idx, g)
        return (grad,)

    return table.tape.emit(tv[idx], (table,), vjp)


def pick(x, indices):
    """x[r, indices[r]] for every row r of a 2-D x."""
    xv = x.value
    idx = np.asarray(indices, dtype=np.int64)
    if xv.ndim != 2 or idx.shape != (xv.shape[0],):
        raise ShapeError("pick", xv.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[1]):
        raise NumericsError(f"pick: target index outside [0, {xv.shape[1]})")
    rows = np.arange(xv.shape[0])

    def vjp(g):
        grad = np.zeros_like(xv)
        grad[rows, idx] = g
        return (grad,)

    return x.tape.emit(xv[rows, idx], (x,), vjp)


def tile_rows(x, count):
    xv = x.value
    if xv.ndim != 2 or xv.shape[0] != 1:
        raise ShapeError("tile_rows", xv.shape)
    return x.tape.emit(np.repeat(xv, count, axis=0), (x,), lambda g: (g.sum(axis=0, keepdims=True),))


def reshape(x, shape):
    xv = x.value
    try:
        out = xv.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", xv.shape, shape) from None
    return x.tape.emit(out, (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return x.tape.emit(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),))


def segment_sum(x, segments, count):
    """Sum rows of x into ``count`` buckets given by the integer array ``segments``."""
    xv = x.value
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (xv.shape[0],):
        raise ShapeError("segment_sum", xv.shape, seg.shape)
    out = np.zeros((count,) + xv.shape[1:], dtype=xv.dtype)
    np.add.at(out, seg, xv)
    return x.tape.emit(out, (x,), lambda g: (g[seg],))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis, then scale by gamma and shift by beta."""
    xv, gv = x.value, gamma.value
    if gv.shape != (xv.shape[-1],) or beta.value.shape != gv.shape:
        raise ShapeError("layer_norm", xv.shape, gv.shape, beta.value.shape)
    mu = xv.mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv_sigma
    out = xhat * gv + beta.value

    def vjp(g):
        gxhat = g * gv
        gx = inv_sigma * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = g.reshape(-1, gv.shape[0])
        return gx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)

    return x.tape.emit(out, (x, gamma, beta), vjp)


def linear(x, weight, bias):
    return add_bias(matmul(x, weight), bias)


def mlp_forward(layers, x, activation=relu):
    """Affine layers with ``activation`` between them; the last layer stays linear.

    ``layers`` is a sequence of (W, b) node pairs.
    """
    if not layers:
        raise ShapeError("mlp_forward", _value(x).shape)
    h = x
    for k, (weight, bias) in enumerate(layers):
        if _value(h).shape[-1] != weight.value.shape[0]:
            raise ShapeError("mlp_forward", _value(h).shape, weight.value.shape)
        h = linear(h, weight, bias)
        if k < len(layers) - 1:
            h = activation(h)
    return h


def mlp_layers(tape, name):
    layers = []
    k = 0
    while f"{name}.{k}.W" in tape.store:
        layers.append((tape.param(f"{name}.{k}.W"), tape.param(f"{name}.{k}.b")))
        k += 1
    return layers


def adam_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place; nothing changes if any gradient is non-finite."""
    for name, g in grads.items():
        if name not in store:
            raise NumericsError(f"gradient for unknown parameter {name!r}")
        if g.shape != store[name].shape:
            raise ShapeError("adam_step", g.shape, store[name].shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name, g in grads.items():
        g = g.astype(store.dtype, copy=False)
        store.steps[name] += 1
        t = store.steps[name]
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * (g * g)
        if lr:
            m_hat = store.m[name] / (1.0 - beta1 ** t)
            v_hat = store.v[name] / (1.0 - beta2 ** t)
            store.values[name] -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(store.dtype)
    return store


def numerical_gradient(loss_fn, store, name, eps=1e-5, indices=None):
    """Central finite differences of ``loss_fn(store) -> float`` w.r.t. one parameter.

    ``indices`` restricts the perturbation to those flat positions; the others stay 0.
    """
    value = store.values[name]
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size) if indices is None else indices:
        saved = flat[k]
        flat[k] = saved + eps
        upper = loss_fn(store)
        flat[k] = saved - eps
        lower = loss_fn(store)
        flat[k] = saved
        out[k] = (upper - lower) / (2.0 * eps)
    return grad


def _blob_path(manifest_path):
    return Path(manifest_path).with_suffix(".bin")


def save_checkpoint(store, path, metadata=None, include_adam=True):
    """Write a JSON manifest at ``path`` and a little-endian blob next to it (``.bin``)."""
    path = Path(path)
    little = np.dtype(store.dtype).newbyteorder("<")
    entries = []
    chunks = []
    offset = 0

    def append(name, kind, array):
        nonlocal offset
        data = np.ascontiguousarray(array, dtype=little).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    for name, value in store.values.items():
        append(name, "param", value)
    if include_adam:
        for name in store.values:
            append(name, "adam_m", store.m[name])
            append(name, "adam_v", store.v[name])
    manifest = {
        "version": CHECKPOINT_VERSION,
        "precision": precision_name(store.dtype),
        "byte_order": "little",
        "blob": _blob_path(path).name,
        "entries": entries,
        "adam_steps": dict(store.steps) if include_adam else None,
        "metadata": metadata or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(_blob_path(path), "wb") as handle:
        for chunk in chunks:
            handle.write(chunk)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=1)
    return path


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; returns (store, metadata)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise NumericsError(f"unsupported checkpoint version {manifest.get('version')} in {path}")
    dtype = resolve_dtype(manifest["precision"])
    little = dtype.newbyteorder("<")
    blob = (path.parent / manifest.get("blob", _blob_path(path).name)).read_bytes()
    store = ParameterStore(dtype)
    moments = []
    for entry in manifest["entries"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=little).astype(dtype).reshape(entry["shape"])
        if entry["kind"] == "param":
            store.add(entry["name"], array)
        else:
            moments.append((entry, array))
    for entry, array in moments:
        target = store.m if entry["kind"] == "adam_m" else store.v
        target[entry["name"]] = array.copy()
    for name, steps in (manifest.get("adam_steps") or {}).items():
        store.steps[name] = int(steps)
    return store, manifest.get("metadata", {})
