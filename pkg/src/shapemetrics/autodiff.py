"""Reverse-mode automatic differentiation over dense float64 arrays.

Tape-free design: every operation returns a Node holding its value and
vector-Jacobian closures back to its parents; backward() walks the
graph once in reverse topological order. Exactly the primitives the
regressor and losses need — no higher-order derivatives, no GPU.

Every op validates shapes up front (mismatches raise with both shapes)
and checks its forward output for NaN/inf, naming the op.
"""

import json
import struct

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NonFiniteError

__all__ = [
    "Node", "ParamSet", "wrap", "add", "sub", "mul", "neg", "matmul",
    "reshape", "concat", "gather_rows", "pick", "max_reduce", "mean_reduce",
    "sum_reduce", "leaky_relu", "log", "exp", "square", "absolute",
    "softplus", "instance_norm", "dropout", "backward", "grad_check",
    "save_params", "load_params",
]


class Node:
    """Value + gradient accumulator + links to parents with VJP closures."""

    __slots__ = ("value", "grad", "parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(self.value).all():
            raise NonFiniteError(f"non-finite output of op '{op}'")
        self.grad = None
        self.parents = tuple(parents)  # (parent_node, vjp) pairs
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _check_broadcast(a: Node, b: Node, op: str):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise DataError(
            f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    _check_broadcast(a, b, "add")
    return Node(
        a.value + b.value,
        parents=[
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ],
        op="add",
    )


def sub(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    _check_broadcast(a, b, "sub")
    return Node(
        a.value - b.value,
        parents=[
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ],
        op="sub",
    )


def mul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    _check_broadcast(a, b, "mul")
    return Node(
        a.value * b.value,
        parents=[
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ],
        op="mul",
    )


def neg(a) -> Node:
    a = wrap(a)
    return Node(-a.value, parents=[(a, lambda g: -g)], op="neg")


def matmul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DataError(f"matmul: shape mismatch {a.value.shape} vs {b.value.shape}")
    return Node(
        a.value @ b.value,
        parents=[
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ],
        op="matmul",
    )


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Node:
    a = wrap(a)
    old = a.value.shape
    return Node(
        a.value.reshape(shape), parents=[(a, lambda g: g.reshape(old))], op="reshape"
    )


def concat(nodes, axis: int = -1) -> Node:
    nodes = [wrap(n) for n in nodes]
    if not nodes:
        raise DataError("concat: need at least one input")
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        parents=[(n, make_vjp(i)) for i, n in enumerate(nodes)],
        op="concat",
    )


def _scatter_add_rows(shape, idx_flat, grads_flat):
    """Deterministic rows scatter-add via sort + reduceat (no np.add.at)."""
    order = np.argsort(idx_flat, kind="stable")
    sorted_idx = idx_flat[order]
    sorted_g = grads_flat[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
    out = np.zeros(shape)
    out[sorted_idx[starts]] = np.add.reduceat(sorted_g, starts, axis=0)
    return out


def gather_rows(a, indices) -> Node:
    """Rows of a 2-D array by an integer index array of any shape."""
    a = wrap(a)
    if a.value.ndim != 2:
        raise DataError(f"gather_rows: expected 2-D input, got {a.value.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise DataError("gather_rows: index out of range")
    out_shape = idx.shape + (a.value.shape[1],)

    def vjp(g):
        return _scatter_add_rows(
            a.value.shape, idx.reshape(-1), g.reshape(-1, a.value.shape[1])
        )

    return Node(a.value[idx].reshape(out_shape), parents=[(a, vjp)], op="gather_rows")


def pick(a, index: int) -> Node:
    """One scalar from the flattened input."""
    a = wrap(a)
    flat = a.value.reshape(-1)
    if not 0 <= index < flat.size:
        raise DataError(f"pick: index {index} out of range for {a.value.shape}")

    def vjp(g):
        out = np.zeros_like(a.value).reshape(-1)
        out[index] = g
        return out.reshape(a.value.shape)

    return Node(flat[index], parents=[(a, vjp)], op="pick")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def max_reduce(a, axis: int) -> Node:
    """Max along one axis; gradient routes to the first argmax (ties)."""
    a = wrap(a)
    idx = a.value.argmax(axis=axis)  # first occurrence on ties

    def vjp(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(
            out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        return out

    return Node(a.value.max(axis=axis), parents=[(a, vjp)], op="max_reduce")


def mean_reduce(a, axis=None) -> Node:
    a = wrap(a)
    count = a.value.size if axis is None else a.value.shape[axis]

    def vjp(g):
        if axis is None:
            return np.full(a.value.shape, g / count)
        return np.broadcast_to(
            np.expand_dims(g, axis), a.value.shape
        ).copy() / count

    return Node(a.value.mean(axis=axis), parents=[(a, vjp)], op="mean_reduce")


def sum_reduce(a, axis=None) -> Node:
    a = wrap(a)

    def vjp(g):
        if axis is None:
            return np.full(a.value.shape, g)
        return np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy()

    return Node(a.value.sum(axis=axis), parents=[(a, vjp)], op="sum_reduce")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def leaky_relu(a, slope: float = 0.2) -> Node:
    a = wrap(a)
    # one shared slope array serves both the value and the gradient
    scale = np.where(a.value >= 0.0, 1.0, slope)
    return Node(
        a.value * scale,
        parents=[(a, lambda g: g * scale)],
        op="leaky_relu",
    )


def log(a) -> Node:
    a = wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return Node(value, parents=[(a, lambda g: g / a.value)], op="log")


def exp(a) -> Node:
    a = wrap(a)
    value = np.exp(a.value)
    return Node(value, parents=[(a, lambda g: g * value)], op="exp")


def square(a) -> Node:
    a = wrap(a)
    return Node(
        a.value**2, parents=[(a, lambda g: g * 2.0 * a.value)], op="square"
    )


def absolute(a) -> Node:
    a = wrap(a)
    return Node(
        np.abs(a.value), parents=[(a, lambda g: g * np.sign(a.value))], op="absolute"
    )


def softplus(a) -> Node:
    """log(1 + exp(x)), computed stably; gradient is the sigmoid."""
    a = wrap(a)
    return Node(
        np.logaddexp(0.0, a.value),
        parents=[(a, lambda g: g * expit(a.value))],
        op="softplus",
    )


def instance_norm(a, gamma, beta, eps: float = 1e-5) -> Node:
    """Per-channel normalization of an (N, C) feature map over the rows.

    One instance (batch size 1): each channel is standardized over the N
    points, then scaled/shifted by the affine parameters (C,).
    """
    a, gamma, beta = wrap(a), wrap(gamma), wrap(beta)
    v = a.value
    if v.ndim != 2:
        raise DataError(f"instance_norm: expected (N, C), got {v.shape}")
    c = v.shape[1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise DataError(
            f"instance_norm: affine shapes {gamma.value.shape}/{beta.value.shape} "
            f"do not match {c} channels"
        )
    n = v.shape[0]
    mu = v.mean(axis=0)
    centered = v - mu
    var = np.mean(centered * centered, axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    del centered

    def vjp_a(g):
        # standard instance/batch-norm backward, vectorized per channel,
        # written with in-place updates on the fresh dxhat buffer
        dxhat = g * gamma.value
        s1 = dxhat.sum(axis=0)
        s2 = (dxhat * xhat).sum(axis=0)
        dxhat -= s1 / n
        dxhat -= xhat * (s2 / n)
        dxhat *= inv_std
        return dxhat

    return Node(
        xhat * gamma.value + beta.value,
        parents=[
            (a, vjp_a),
            (gamma, lambda g: (g * xhat).sum(axis=0)),
            (beta, lambda g: g.sum(axis=0)),
        ],
        op="instance_norm",
    )


def dropout(a, p: float, seed: int, train: bool) -> Node:
    """Inverted dropout: keep with prob 1-p, scale kept by 1/(1-p)."""
    a = wrap(a)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return Node(a.value.copy(), parents=[(a, lambda g: g)], op="dropout")
    rng = np.random.default_rng(seed)
    mask = (rng.random(a.value.shape) >= p) / (1.0 - p)
    return Node(a.value * mask, parents=[(a, lambda g: g * mask)], op="dropout")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Node) -> list:
    """Post-order (parents before descendants), iterative to spare the stack."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into .grad over the whole graph."""
    if root.value.ndim != 0:
        raise DataError(f"backward expects a scalar root, got {root.value.shape}")
    root.grad = np.ones(())
    for node in reversed(_topo_order(root)):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamSet:
    """Named leaf Nodes with deterministic (sorted-name) iteration order."""

    def __init__(self, arrays: dict):
        self._nodes = {}
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"parameter '{name}' contains non-finite values")
            self._nodes[name] = Node(arr, op=f"param:{name}")

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def names(self) -> list:
        return list(self._nodes)

    def items(self):
        return self._nodes.items()

    def arrays(self) -> dict:
        return {k: v.value.copy() for k, v in self._nodes.items()}

    def grads(self) -> dict:
        return {
            k: (v.grad if v.grad is not None else np.zeros_like(v.value))
            for k, v in self._nodes.items()
        }

    def zero_grad(self) -> None:
        for v in self._nodes.values():
            v.grad = None

    def n_scalars(self) -> int:
        return sum(v.value.size for v in self._nodes.values())


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# layout, little-endian:
#   magic "PCKP", version u32, header_len u32,
#   header_len bytes of UTF-8 JSON: {"arrays": [{"name", "shape"}], "meta": {}}
#   then each array's float64 payload ('<f8', C order) in header order.

_CKPT_MAGIC = b"PCKP"
_CKPT_VERSION = 1


def save_params(params, path, meta: dict = None) -> None:
    arrays = params.arrays() if isinstance(params, ParamSet) else dict(params)
    names = sorted(arrays)
    header = {
        "version": _CKPT_VERSION,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_params(path) -> tuple:
    """Returns ({name: float64 array}, meta dict)."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise DataError(f"{path}: not a checkpoint file")
        magic, version, hlen = struct.unpack("<4sII", head)
        if magic != _CKPT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != _CKPT_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise DataError(f"{path}: truncated payload for '{spec['name']}'")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
    if trailing:
        raise DataError(f"{path}: trailing bytes after declared arrays")
    return arrays, header.get("meta", {})


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(
    f, params: ParamSet, eps: float = 1e-5, n_coords: int = 50, seed: int = 0
) -> float:
    """Max relative deviation between analytic and central-difference grads.

    f maps the ParamSet to a scalar Node and must be smooth at the
    current parameters (keep inputs clear of leaky_relu/max kinks).
    A random subset of at least n_coords coordinates is probed; the
    relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ConfigError(f"eps {eps} outside [1e-6, 1e-4]")
    params.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = {k: np.array(v) for k, v in params.grads().items()}
    params.zero_grad()

    coords = []
    for name in params.names():
        for flat_idx in range(params[name].value.size):
            coords.append((name, flat_idx))
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        chosen = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in chosen]

    max_rel = 0.0
    for name, flat_idx in coords:
        target = params[name].value.reshape(-1)
        orig = target[flat_idx]
        target[flat_idx] = orig + eps
        f_plus = float(f(params).value)
        target[flat_idx] = orig - eps
        f_minus = float(f(params).value)
        target[flat_idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[flat_idx])
        if not np.isfinite(numeric) or not np.isfinite(a):
            raise NonFiniteError(f"grad_check: non-finite gradient at {name}[{flat_idx}]")
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
