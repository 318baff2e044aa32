"""Minimal reverse-mode differentiation on dense numpy arrays.

A forward pass builds values as ``Node`` objects while recording each
primitive on a ``Tape``; ``backward`` replays the recorded adjoints in
reverse order. Ops infer the tape from their inputs, so the same forward
code runs untracked (all plain constants) for evaluation.

Parameters live in a ``ParamStore`` keyed by unique names, with gradient and
Adam moment buffers of matching shape. 64-bit stores are used by the
gradient tests; training runs in 32-bit.

Single-threaded by design: a tape must not be shared across threads.
"""

import json
import zipfile
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DivergenceError
from . import kernels

CHECKPOINT_FORMAT = "causalmarket-checkpoint-v1"


class Node:
    """A value in the computation graph. Constants have ``tape is None``."""

    __slots__ = ("value", "tape", "param_name")

    def __init__(self, value: np.ndarray, tape: "Tape | None" = None, param_name: str | None = None):
        self.value = value
        self.tape = tape
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = self.param_name or ("tracked" if self.tape else "const")
        return f"Node({kind}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive operations from one forward pass."""

    def __init__(self):
        self._ops: list[tuple[Node, tuple[Node, ...], Callable]] = []
        self.param_leaves: list[Node] = []

    def record(self, out: Node, inputs: Sequence[Node], vjp: Callable) -> None:
        """Append one primitive. ``vjp(out_grad)`` must return one gradient
        array (or None) per input, in input order."""
        self._ops.append((out, tuple(inputs), vjp))

    def leaf(self, value: np.ndarray, name: str | None = None) -> Node:
        node = Node(value, tape=self, param_name=name)
        if name is not None:
            self.param_leaves.append(node)
        return node

    def __len__(self):
        return len(self._ops)


class GradientMap:
    """Gradients produced by one backward pass, keyed by node identity."""

    def __init__(self, table: dict, tape: Tape):
        self._table = table
        self._tape = tape

    def get(self, node: Node) -> np.ndarray:
        g = self._table.get(id(node))
        if g is None:
            return np.zeros_like(node.value)
        return g

    def by_param(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for leaf in self._tape.param_leaves:
            g = self.get(leaf)
            if leaf.param_name in out:
                out[leaf.param_name] = out[leaf.param_name] + g
            else:
                out[leaf.param_name] = g
        return out


def backward(tape: Tape, loss: Node) -> GradientMap:
    """Replay adjoints in reverse order; deterministic accumulation."""
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, vjp in reversed(tape._ops):
        out_grad = table.get(id(out))
        if out_grad is None:
            continue
        grads = vjp(out_grad)
        for node, g in zip(inputs, grads):
            if g is None or node.tape is None:
                continue
            prev = table.get(id(node))
            table[id(node)] = g if prev is None else prev + g
    return GradientMap(table, tape)


# ---------------------------------------------------------------------------
# node plumbing
# ---------------------------------------------------------------------------


def constant(value, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=dtype))


def _as_node(x, dtype) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=dtype))


def _tape_of(*nodes: Node) -> Optional[Tape]:
    for n in nodes:
        if n.tape is not None:
            return n.tape
    return None


def _make(value: np.ndarray, inputs: Sequence[Node], vjp: Callable) -> Node:
    tape = _tape_of(*inputs)
    out = Node(value, tape=tape)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def custom_op(value: np.ndarray, inputs: Sequence[Node], vjp: Callable) -> Node:
    """Record a caller-defined primitive (e.g. a fused kernel) on the tape."""
    return _make(value, inputs, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(grad.shape, shape)) if s == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def affine(x: Node, w: Node, b: Node | None = None) -> Node:
    """x @ w (+ b) over the last axis of x; leading axes are batch axes."""
    if x.value.shape[-1] != w.value.shape[0]:
        raise ConfigError(
            f"affine shape mismatch: input width {x.value.shape[-1]} vs weight rows {w.value.shape[0]}"
        )
    y = x.value @ w.value
    if b is not None:
        y = y + b.value

    def vjp(g):
        lead = x.value.reshape(-1, x.value.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        dx = (g2 @ w.value.T).reshape(x.value.shape)
        dw = lead.T @ g2
        if b is None:
            return dx, dw
        db = g2.sum(axis=0)
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y, inputs, vjp)


def grouped_affine(x: Node, w: Node, b: Node | None = None) -> Node:
    """Per-group affine: x (B, G, n_in), w (G, n_in, n_out), b (G, n_out)."""
    if x.value.ndim != 3 or x.value.shape[1:2] + x.value.shape[2:] != (w.value.shape[0], w.value.shape[1]):
        raise ConfigError(
            f"grouped_affine shape mismatch: x {x.value.shape} vs w {w.value.shape}"
        )
    y = np.einsum("bgi,gio->bgo", x.value, w.value, optimize=True)
    if b is not None:
        y = y + b.value

    def vjp(g):
        dx = np.einsum("bgo,gio->bgi", g, w.value, optimize=True)
        dw = np.einsum("bgi,bgo->gio", x.value, g, optimize=True)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y, inputs, vjp)


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Node) -> Node:
    y = _sigmoid_array(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Node) -> Node:
    return _make(np.log(x.value), (x,), lambda g: (g / x.value,))


def add(a: Node, b) -> Node:
    b = _as_node(b, a.value.dtype)
    y = a.value + b.value
    return _make(y, (a, b), lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a: Node, b) -> Node:
    b = _as_node(b, a.value.dtype)
    y = a.value - b.value
    return _make(y, (a, b), lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a: Node, b) -> Node:
    b = _as_node(b, a.value.dtype)
    y = a.value * b.value

    def vjp(g):
        return _unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)

    return _make(y, (a, b), vjp)


def scale_shift(x: Node, a: float = 1.0, b: float = 0.0) -> Node:
    """Elementwise a*x + b with python-scalar coefficients."""
    return _make(a * x.value + b, (x,), lambda g: (a * g,))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    y = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(y, tuple(nodes), vjp)


def reshape(x: Node, shape) -> Node:
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.value.shape),))


def narrow(x: Node, axis: int, start: int, length: int) -> Node:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(x.value)
        full[idx] = g
        return (full,)

    return _make(x.value[idx].copy(), (x,), vjp)


def reduce_sum(x: Node, axis=None) -> Node:
    y = np.asarray(x.value.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.value.shape).astype(x.value.dtype, copy=True),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g_exp = np.expand_dims(g, tuple(a % x.value.ndim for a in axes))
        return (np.broadcast_to(g_exp, x.value.shape).astype(x.value.dtype, copy=True),)

    return _make(y, (x,), vjp)


def reduce_mean(x: Node, axis=None) -> Node:
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.value.shape[a] for a in axes]))
    s = reduce_sum(x, axis=axis)
    return scale_shift(s, 1.0 / count)


def clip(x: Node, lo: float, hi: float) -> Node:
    y = np.clip(x.value, lo, hi)
    inside = ((x.value > lo) & (x.value < hi)).astype(x.value.dtype)
    return _make(y, (x,), lambda g: (g * inside,))


def stop_gradient(x: Node) -> Node:
    """Forward identity; contributes nothing to the backward pass."""
    return Node(x.value)


def straight_through_round(x: Node) -> Node:
    """Forward hard 0/1 at threshold 0.5; backward passes the gradient through."""
    y = (x.value >= 0.5).astype(x.value.dtype)
    return _make(y, (x,), lambda g: (g,))


_LOGIT_CLAMP = 30.0


def logistic_noise(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Difference of two standard Gumbels, i.e. standard logistic noise."""
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=shape)
    return (np.log(u) - np.log1p(-u)).astype(dtype)


def gumbel_softmax_binary(p: Node, tau: float, noise: np.ndarray) -> Node:
    """Two-way Gumbel-softmax relaxation of a Bernoulli(p) draw.

    With exist/non-exist logits (ln p, ln(1-p)) the relaxed exist weight
    collapses to sigmoid((logit(p) + logistic_noise) / tau). Logits are
    clamped to +/-30 so degenerate probabilities stay finite; the clamp zone
    has zero derivative.
    """
    if tau <= 0:
        raise ConfigError(f"gumbel temperature must be positive, got {tau}")
    pv = p.value
    with np.errstate(divide="ignore"):
        logit = np.log(pv) - np.log1p(-pv)
    clamped = np.clip(logit, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    y = _sigmoid_array((clamped + noise) / tau)

    def vjp(g):
        inside = (np.abs(logit) < _LOGIT_CLAMP).astype(pv.dtype)
        dlogit = g * y * (1.0 - y) / tau
        return (dlogit * inside / (pv * (1.0 - pv)),)

    return _make(y, (p,), vjp)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named dense parameters plus gradient and Adam moment buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=self.dtype)
        if arr.shape != self._values[name].shape:
            raise ConfigError(f"shape mismatch for {name!r}: {arr.shape} vs {self._values[name].shape}")
        self._values[name] = arr

    def node(self, tape: Tape, name: str) -> Node:
        return tape.leaf(self._values[name], name=name)

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate(self, grads: GradientMap) -> None:
        for name, g in grads.by_param().items():
            self._grads[name] += g

    def n_parameters(self) -> int:
        return sum(v.size for v in self._values.values())

    # --- optimizer -------------------------------------------------------

    def adam_step(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        """Standard Adam update with bias correction over every parameter."""
        beta1, beta2 = betas
        self.step += 1
        bias1 = 1.0 - beta1 ** self.step
        bias2 = 1.0 - beta2 ** self.step
        for name in self._values:
            g = self._grads[name]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            kernels.adam_update(
                self._values[name].ravel(), g.ravel(),
                self._m[name].ravel(), self._v[name].ravel(),
                lr, beta1, beta2, eps, bias1, bias2,
            )

    # --- checkpointing ---------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "dtype": self.dtype.name,
            "step": self.step,
            "names": self.names(),
        }
        if extra_meta:
            meta["extra"] = extra_meta
        arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for name, v in self._values.items():
            arrays[f"param:{name}"] = v
            arrays[f"adam_m:{name}"] = self._m[name]
            arrays[f"adam_v:{name}"] = self._v[name]
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        try:
            data = np.load(path)
        except (OSError, ValueError, zipfile.BadZipFile) as e:
            raise DataError(f"cannot read checkpoint {path}: {e}")
        if "__meta__" not in data:
            raise DataError(f"{path} is not a causalmarket checkpoint (missing meta)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(
                f"checkpoint format {meta.get('format')!r} unsupported (expected {CHECKPOINT_FORMAT!r})"
            )
        store = cls(dtype=np.dtype(meta["dtype"]))
        store.step = int(meta.get("step", 0))
        for name in meta["names"]:
            store.add(name, data[f"param:{name}"])
            if f"adam_m:{name}" in data:
                store._m[name] = data[f"adam_m:{name}"].astype(store.dtype)
                store._v[name] = data[f"adam_v:{name}"].astype(store.dtype)
        return store, meta.get("extra", {})


class ParamView:
    """Named parameter nodes for one forward pass.

    With a tape, each name resolves to a single tracked leaf (cached so
    repeated use accumulates gradients on one node). Without a tape the
    values come back as plain constants, which is the evaluation path.
    """

    def __init__(self, store: ParamStore, tape: Tape | None = None):
        self.store = store
        self.tape = tape
        self._cache: dict[str, Node] = {}

    def __call__(self, name: str) -> Node:
        node = self._cache.get(name)
        if node is None:
            if self.tape is None:
                node = Node(self.store.value(name))
            else:
                node = self.store.node(self.tape, name)
            self._cache[name] = node
        return node


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# finite differences (gradient oracle used by tests and the audit)
# ---------------------------------------------------------------------------


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one entry at a time."""
    x = x.astype(np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = f(x)
        flat[idx] = orig - h
        down = f(x)
        flat[idx] = orig
        gflat[idx] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
