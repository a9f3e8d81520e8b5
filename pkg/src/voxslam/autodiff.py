"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A Tape records a linear sequence of primitive operations; backward() replays
it in reverse accumulating vector-Jacobian products. The primitive set is
deliberately small (elementwise arithmetic, matmul, reductions, a handful of
nonlinearities, and index/shape plumbing); everything model-level is composed
from it. Kinked primitives (abs, relu) use the left derivative at the kink.
No higher-order gradients: backward() produces plain arrays, not new nodes.
"""

from __future__ import annotations

import numpy as np

_PRIMITIVES = frozenset([
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean",
    "exp", "log", "sqrt", "square", "abs", "tanh", "softsign", "relu",
    "concat", "slice", "gather", "scatter_add", "broadcast", "stop_gradient",
    "param", "const",
])


def _as_array(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Node:
    __slots__ = ("op", "inputs", "value", "attrs")

    def __init__(self, op, inputs, value, attrs):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs


class Tensor:
    """Handle to one node on a tape. Immutable by convention."""

    __slots__ = ("tape", "idx")
    # keep numpy from consuming us elementwise in array-op-Tensor expressions
    __array_priority__ = 100.0

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", (self, self._lift(other)))

    def __radd__(self, other):
        return self.tape.record("add", (self._lift(other), self))

    def __sub__(self, other):
        return self.tape.record("sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return self.tape.record("sub", (self._lift(other), self))

    def __mul__(self, other):
        return self.tape.record("mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self.tape.record("mul", (self._lift(other), self))

    def __truediv__(self, other):
        return self.tape.record("div", (self, self._lift(other)))

    def __rtruediv__(self, other):
        return self.tape.record("div", (self._lift(other), self))

    def __neg__(self):
        return self.tape.record("neg", (self,))

    def __matmul__(self, other):
        return self.tape.record("matmul", (self, self._lift(other)))

    def __getitem__(self, key):
        return self.tape.record("slice", (self,), {"key": key})

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", (self,), {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims=False):
        return self.tape.record("mean", (self,), {"axis": axis, "keepdims": keepdims})

    def exp(self):
        return self.tape.record("exp", (self,))

    def log(self):
        return self.tape.record("log", (self,))

    def sqrt(self):
        return self.tape.record("sqrt", (self,))

    def square(self):
        return self.tape.record("square", (self,))

    def abs(self):
        return self.tape.record("abs", (self,))

    def tanh(self):
        return self.tape.record("tanh", (self,))

    def softsign(self):
        return self.tape.record("softsign", (self,))

    def relu(self):
        return self.tape.record("relu", (self,))

    def stop_gradient(self):
        return self.tape.record("stop_gradient", (self,))

    def broadcast(self, shape):
        return self.tape.record("broadcast", (self,), {"shape": tuple(shape)})

    def reshape(self, shape):
        """Shape change expressed as an identity gather on the flat buffer."""
        idx = np.arange(self.size, dtype=np.int64).reshape(shape)
        return self.tape.record("gather", (self,), {"indices": idx})

    def __repr__(self):
        return f"Tensor(idx={self.idx}, shape={self.shape})"


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# forward evaluation per primitive


def _eval(op, vals, attrs):
    if op == "add":
        _broadcast_check(op, *vals)
        return vals[0] + vals[1]
    if op == "sub":
        _broadcast_check(op, *vals)
        return vals[0] - vals[1]
    if op == "mul":
        _broadcast_check(op, *vals)
        return vals[0] * vals[1]
    if op == "div":
        _broadcast_check(op, *vals)
        return vals[0] / vals[1]
    if op == "neg":
        return -vals[0]
    if op == "matmul":
        a, b = vals
        if a.ndim == 0 or b.ndim == 0:
            raise ValueError(f"matmul: shapes {a.shape} and {b.shape} must be at least 1-d")
        try:
            return a @ b
        except ValueError:
            raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    if op == "sum":
        return np.sum(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])
    if op == "mean":
        return np.mean(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "sqrt":
        return np.sqrt(vals[0])
    if op == "square":
        return np.square(vals[0])
    if op == "abs":
        return np.abs(vals[0])
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "softsign":
        return vals[0] / (1.0 + np.abs(vals[0]))
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "concat":
        return np.concatenate(vals, axis=attrs["axis"])
    if op == "slice":
        return vals[0][attrs["key"]]
    if op == "gather":
        return vals[0].reshape(-1)[attrs["indices"]]
    if op == "scatter_add":
        base, updates = vals
        out = base.copy()
        flat = out.reshape(-1)
        np.add.at(flat, attrs["indices"].reshape(-1), updates.reshape(-1))
        return out
    if op == "broadcast":
        return np.broadcast_to(vals[0], attrs["shape"]).copy()
    if op == "stop_gradient":
        return vals[0]
    raise ValueError(f"unknown primitive: {op}")


# ---------------------------------------------------------------------------
# vector-Jacobian products. Each returns [(input_position, grad_array), ...]


def _vjp(node, g, get_val):
    op = node.op
    if op == "add":
        a, b = get_val(node.inputs[0]), get_val(node.inputs[1])
        return ((0, _unbroadcast(g, a.shape)), (1, _unbroadcast(g, b.shape)))
    if op == "sub":
        a, b = get_val(node.inputs[0]), get_val(node.inputs[1])
        return ((0, _unbroadcast(g, a.shape)), (1, _unbroadcast(-g, b.shape)))
    if op == "mul":
        a, b = get_val(node.inputs[0]), get_val(node.inputs[1])
        return ((0, _unbroadcast(g * b, a.shape)), (1, _unbroadcast(g * a, b.shape)))
    if op == "div":
        a, b = get_val(node.inputs[0]), get_val(node.inputs[1])
        ga = _unbroadcast(g / b, a.shape)
        gb = _unbroadcast(-g * a / (b * b), b.shape)
        return ((0, ga), (1, gb))
    if op == "neg":
        return ((0, -g),)
    if op == "matmul":
        a, b = get_val(node.inputs[0]), get_val(node.inputs[1])
        if a.ndim == 1 and b.ndim == 1:
            return ((0, g * b), (1, g * a))
        if a.ndim == 1:  # (k,) @ (..., k, n)
            ga = g @ np.swapaxes(b, -1, -2)
            return ((0, _unbroadcast(ga, a.shape)), (1, _unbroadcast(np.expand_dims(a, -1) * np.expand_dims(g, -2), b.shape)))
        if b.ndim == 1:  # (..., m, k) @ (k,)
            ga = np.expand_dims(g, -1) * b
            return ((0, _unbroadcast(ga, a.shape)), (1, _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)))
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return ((0, _unbroadcast(ga, a.shape)), (1, _unbroadcast(gb, b.shape)))
    if op == "sum":
        x = get_val(node.inputs[0])
        return ((0, _spread(g, x.shape, node.attrs)),)
    if op == "mean":
        x = get_val(node.inputs[0])
        axis = node.attrs["axis"]
        if axis is None:
            count = x.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= x.shape[ax]
        return ((0, _spread(g, x.shape, node.attrs) / count),)
    if op == "exp":
        return ((0, g * node.value),)
    if op == "log":
        return ((0, g / get_val(node.inputs[0])),)
    if op == "sqrt":
        return ((0, g * (0.5 / node.value)),)
    if op == "square":
        return ((0, g * (2.0 * get_val(node.inputs[0]))),)
    if op == "abs":
        x = get_val(node.inputs[0])
        return ((0, g * np.where(x > 0.0, 1.0, -1.0)),)
    if op == "tanh":
        return ((0, g * (1.0 - node.value * node.value)),)
    if op == "softsign":
        x = get_val(node.inputs[0])
        d = 1.0 + np.abs(x)
        return ((0, g / (d * d)),)
    if op == "relu":
        x = get_val(node.inputs[0])
        return ((0, g * (x > 0.0)),)
    if op == "concat":
        axis = node.attrs["axis"]
        outs = []
        start = 0
        for pos, iid in enumerate(node.inputs):
            n = get_val(iid).shape[axis]
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + n)
            outs.append((pos, g[tuple(key)]))
            start += n
        return tuple(outs)
    if op == "slice":
        x = get_val(node.inputs[0])
        gx = np.zeros_like(x)
        gx[node.attrs["key"]] += g
        return ((0, gx),)
    if op == "gather":
        x = get_val(node.inputs[0])
        idx = node.attrs["indices"]
        gx = np.bincount(idx.reshape(-1), weights=g.reshape(-1), minlength=x.size)
        return ((0, gx.reshape(x.shape)),)
    if op == "scatter_add":
        u = get_val(node.inputs[1])
        gu = g.reshape(-1)[node.attrs["indices"].reshape(-1)].reshape(u.shape)
        return ((0, g), (1, gu))
    if op == "broadcast":
        x = get_val(node.inputs[0])
        return ((0, _unbroadcast(g, x.shape)),)
    if op == "stop_gradient":
        return ()
    raise ValueError(f"unknown primitive: {op}")


def _spread(g, shape, attrs):
    """Broadcast a reduced gradient back over the reduced axes."""
    axis = attrs["axis"]
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not attrs["keepdims"]:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


class Tape:
    """Append-only record of primitive operations.

    Leaves enter via param() (trainable, tracked by backward) or constant().
    The tape is single-use per optimisation step: build, backward, discard.
    Identical op sequences with identical leaf values produce bit-identical
    gradients; thread-safety is by confinement (one tape per thread).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[int] = []

    def _append(self, node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def param(self, value) -> Tensor:
        """Trainable leaf. The array is referenced, not copied."""
        t = self._append(Node("param", (), _as_array(value), None))
        self.params.append(t.idx)
        return t

    def constant(self, value) -> Tensor:
        return self._append(Node("const", (), _as_array(value), None))

    def record(self, op, inputs, attrs=None) -> Tensor:
        """Append one primitive. `inputs` are Tensors on this tape (or node ids)."""
        if op not in _PRIMITIVES:
            raise ValueError(f"unknown primitive: {op}")
        if op in ("param", "const"):
            raise ValueError(f"{op} leaves are created via param()/constant(), not record()")
        ids = tuple(i.idx if isinstance(i, Tensor) else int(i) for i in inputs)
        vals = tuple(self.nodes[i].value for i in ids)
        if attrs is not None and "indices" in attrs:
            attrs = dict(attrs)
            attrs["indices"] = np.asarray(attrs["indices"], dtype=np.int64)
        value = _eval(op, vals, attrs)
        return self._append(Node(op, ids, value, attrs))

    # sugar for multi-input / attr ops
    def concat(self, tensors, axis=0) -> Tensor:
        return self.record("concat", tuple(tensors), {"axis": axis})

    def gather(self, x, indices) -> Tensor:
        return self.record("gather", (x,), {"indices": indices})

    def scatter_add(self, base, indices, updates) -> Tensor:
        return self.record("scatter_add", (base, updates), {"indices": indices})

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every param leaf.

        Loss must be scalar-shaped. Params not reachable from the loss get
        zero gradients. Returns {param node id -> gradient array}.
        """
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        lnode = self.nodes[loss.idx]
        if lnode.value.size != 1:
            raise ValueError(f"backward: loss must be scalar-shaped, got shape {lnode.value.shape}")
        grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(lnode.value)}
        param_set = set(self.params)
        out: dict[int, np.ndarray] = {}
        get_val = lambda i: self.nodes[i].value
        for nid in range(loss.idx, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if not node.inputs:
                if nid in param_set:
                    out[nid] = g if g.shape == node.value.shape else np.broadcast_to(g, node.value.shape).copy()
                continue
            for pos, contrib in _vjp(node, g, get_val):
                iid = node.inputs[pos]
                acc = grads.get(iid)
                grads[iid] = contrib if acc is None else acc + contrib
        for pid in self.params:
            if pid not in out:
                out[pid] = np.zeros_like(self.nodes[pid].value)
        return out

    def grad(self, loss: Tensor, wrt) -> list[np.ndarray]:
        """Gradients for specific param tensors, in the given order."""
        table = self.backward(loss)
        return [table[t.idx] for t in wrt]


# ---------------------------------------------------------------------------
# composites (no new primitives)


def stack(tensors, axis=0) -> Tensor:
    """Join same-shape tensors along a new axis, via reshape + concat."""
    tape = tensors[0].tape
    shp = tensors[0].shape
    if axis < 0:
        axis = len(shp) + 1 + axis
    new = shp[:axis] + (1,) + shp[axis:]
    return tape.concat([t.reshape(new) for t in tensors], axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return 1.0 / ((-x).exp() + 1.0)


def softplus(x: Tensor) -> Tensor:
    # relu(x) + log1p(exp(-|x|)), stable on both tails
    return x.relu() + ((-x.abs()).exp() + 1.0).log()


def laplace_logpdf(x, mu, b) -> Tensor:
    """Elementwise log density of Laplace(mu, b); b is a tensor or constant."""
    return -(2.0 * b).log() - (x - mu).abs() / b


def gaussian_kl(mu_q, log_sigma_q, mu_p, log_sigma_p) -> Tensor:
    """Elementwise KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)), log-sigma parameterisation."""
    tape = mu_q.tape
    if not isinstance(mu_p, Tensor):
        mu_p = tape.constant(mu_p)
    if not isinstance(log_sigma_p, Tensor):
        log_sigma_p = tape.constant(log_sigma_p)
    var_ratio = (2.0 * (log_sigma_q - log_sigma_p)).exp()
    delta = mu_q - mu_p
    return log_sigma_p - log_sigma_q + 0.5 * (var_ratio + delta.square() / (2.0 * log_sigma_p).exp()) - 0.5


def finite_difference_check(f, leaves, step=1e-5, samples=None, rng=None):
    """Compare analytic gradients of scalar f(*leaves) against central differences.

    f must be deterministic and build its loss on the tape passed to it:
    it is called as f(tape, *leaf_tensors) and returns a scalar Tensor.
    `leaves` are plain float64 arrays. If `samples` is given, at most that
    many entries per leaf are probed (drawn with `rng`); otherwise all.
    Returns the maximum relative error |analytic - fd| / (|fd| + 1e-8)
    over the probed entries. Non-finite analytic or fd values raise.
    """
    leaves = [np.array(l, dtype=np.float64) for l in leaves]

    tape = Tape()
    ts = [tape.param(l) for l in leaves]
    loss = f(tape, *ts)
    table = tape.backward(loss)
    analytic = [table[t.idx] for t in ts]

    def value_at(arrays):
        t2 = Tape()
        ts2 = [t2.param(a) for a in arrays]
        return float(f(t2, *ts2).value)

    worst = 0.0
    for li, base in enumerate(leaves):
        n = base.size
        if samples is not None and samples < n:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(n, size=samples, replace=False)
        else:
            picks = np.arange(n)
        flat = base.reshape(-1)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + step
            up = value_at(leaves)
            flat[j] = orig - step
            dn = value_at(leaves)
            flat[j] = orig
            fd = (up - dn) / (2.0 * step)
            an = analytic[li].reshape(-1)[j]
            if not (np.isfinite(fd) and np.isfinite(an)):
                raise FloatingPointError(
                    f"finite_difference_check: non-finite derivative at leaf {li} entry {j}: fd={fd} analytic={an}")
            rel = abs(an - fd) / (abs(fd) + 1e-8)
            if rel > worst:
                worst = rel
    return worst
