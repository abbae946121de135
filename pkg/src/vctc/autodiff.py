"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array plus a gradient slot and remembers the
operation that produced it as ``(parent, grad_fn)`` pairs.  ``backward``
topologically sorts the graph below a scalar loss and accumulates gradients
into every reachable tensor.  First-order only, dense only, float64 only —
deliberately small, but every op here has its gradient verified against
central finite differences in the test suite.

The module also hosts the parameter container (:class:`ParamStore`) and the
binary checkpoint format shared by models and the training harness (see
``save_checkpoint`` for the exact layout).
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .numerics import Rng

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_",
    "matmul",
    "transpose",
    "sum_",
    "mean_",
    "exp_",
    "log_",
    "tanh_",
    "sigmoid_",
    "clamp",
    "concat",
    "stack",
    "log_softmax",
    "reshape",
    "backward",
    "LinearLayer",
    "linear_forward",
    "GruCellParams",
    "BiGruLayer",
    "bigru_forward",
    "ParamStore",
    "save_checkpoint",
    "load_checkpoint",
    "save_param_store",
    "load_param_store",
]


class Tensor:
    """Dense float64 array with a gradient slot and a record of its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _grad_fns=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = _parents
        self._grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = _grad_fns
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing over broadcast axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g_dim, s_dim) in enumerate(zip(grad.shape, shape)):
        if s_dim == 1 and g_dim != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data + b.data,
        _parents=(a, b),
        _grad_fns=(
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data - b.data,
        _parents=(a, b),
        _grad_fns=(
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data * b.data,
        _parents=(a, b),
        _grad_fns=(
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data / b.data,
        _parents=(a, b),
        _grad_fns=(
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), _grad_fns=(lambda g: -g,))


def pow_(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return Tensor(
        a.data**p,
        _parents=(a,),
        _grad_fns=(lambda g: g * p * a.data ** (p - 1.0),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (vector cases follow numpy's ``@``)."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_a(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data)
        return g * b.data  # 1-D @ 1-D

    def grad_b(g):
        if a.ndim == 2 and b.ndim == 2:
            return a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return a.data.T @ g
        return g * a.data

    return Tensor(out, _parents=(a, b), _grad_fns=(grad_a, grad_b))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return Tensor(a.data.T, _parents=(a,), _grad_fns=(lambda g: g.T,))


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g_exp, a.data.shape).copy()

    return Tensor(out, _parents=(a,), _grad_fns=(grad_fn,))


def mean_(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return sum_(a, axis=axis) / float(n)


def exp_(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return Tensor(out_data, _parents=(a,), _grad_fns=(lambda g: g * out_data,))


def log_(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), _parents=(a,), _grad_fns=(lambda g: g / a.data,))


def tanh_(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return Tensor(out_data, _parents=(a,), _grad_fns=(lambda g: g * (1.0 - out_data * out_data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)
    return Tensor(out_data, _parents=(a,), _grad_fns=(lambda g: g * out_data * (1.0 - out_data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes through wherever the input is in range."""
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _grad_fns=(lambda g: g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(out, _parents=tensors, _grad_fns=tuple(make_grad(i) for i in range(len(tensors))))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("stack of an empty sequence")
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_grad(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor(out, _parents=tensors, _grad_fns=tuple(make_grad(i) for i in range(len(tensors))))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return full

    return Tensor(out, _parents=(a,), _grad_fns=(grad_fn,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stable ``x - log_sum_exp(x)`` along ``axis``."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse

    def grad_fn(g):
        return g - np.exp(out_data) * g.sum(axis=axis, keepdims=True)

    return Tensor(out_data, _parents=(a,), _grad_fns=(grad_fn,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor(a.data.reshape(shape), _parents=(a,), _grad_fns=(lambda g: g.reshape(a.data.shape),))


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the subgraph that requires grad."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` for every tensor below ``loss``.

    ``loss`` must be scalar-shaped.  Running backward twice from the same
    root without rebuilding the graph is an error (gradients would
    double-count).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran from this root; rebuild the graph or zero grads first")
    loss._backward_ran = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, grad_fn in zip(node._parents, node._grad_fns):
            if not parent.requires_grad:
                continue
            contribution = grad_fn(g)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += contribution


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _uniform_init(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, shape)


class LinearLayer:
    """Affine map ``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
            raise ValueError(f"inconsistent linear shapes: W {weight.shape}, b {bias.shape}")
        self.weight = weight
        self.bias = bias

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, rng: Rng, out_dim: int, in_dim: int) -> "LinearLayer":
        w = Tensor(_uniform_init(rng, (out_dim, in_dim), in_dim), requires_grad=True)
        b = Tensor(np.zeros(out_dim), requires_grad=True)
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """Apply the affine map to a single vector (in,) or a frame stack (T, in)."""
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"linear expected trailing dim {layer.in_dim}, got input shape {x.shape}")
    return add(matmul(x, transpose(layer.weight)), layer.bias)


class GruCellParams:
    """One direction of a GRU.

    Gate layout in ``w_x``/``bias`` is ``[reset; update; candidate]``.  The
    reset gate multiplies the previous hidden state *before* the candidate's
    hidden-to-hidden transform.
    """

    def __init__(self, w_x: Tensor, w_h_rz: Tensor, w_h_n: Tensor, bias: Tensor):
        hidden = w_h_n.shape[0]
        if w_x.shape[0] != 3 * hidden or w_h_rz.shape != (2 * hidden, hidden) or bias.shape != (3 * hidden,):
            raise ValueError("inconsistent GRU parameter shapes")
        self.w_x = w_x
        self.w_h_rz = w_h_rz
        self.w_h_n = w_h_n
        self.bias = bias
        self.hidden = hidden

    @classmethod
    def init(cls, rng: Rng, hidden: int, in_dim: int) -> "GruCellParams":
        return cls(
            w_x=Tensor(_uniform_init(rng, (3 * hidden, in_dim), in_dim), requires_grad=True),
            w_h_rz=Tensor(_uniform_init(rng, (2 * hidden, hidden), hidden), requires_grad=True),
            w_h_n=Tensor(_uniform_init(rng, (hidden, hidden), hidden), requires_grad=True),
            bias=Tensor(np.zeros(3 * hidden), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "w_h_rz": self.w_h_rz, "w_h_n": self.w_h_n, "bias": self.bias}


class BiGruLayer:
    """Forward and backward GRU passes concatenated per frame."""

    def __init__(self, fw: GruCellParams, bw: GruCellParams):
        if fw.hidden != bw.hidden:
            raise ValueError("direction hidden sizes differ")
        self.fw = fw
        self.bw = bw
        self.hidden = fw.hidden

    @classmethod
    def init(cls, rng: Rng, hidden: int, in_dim: int) -> "BiGruLayer":
        return cls(
            fw=GruCellParams.init(rng.derive("fw"), hidden, in_dim),
            bw=GruCellParams.init(rng.derive("bw"), hidden, in_dim),
        )

    def __call__(self, xs: Tensor) -> Tensor:
        return bigru_forward(self, xs)


def _gru_direction(params: GruCellParams, xs: Tensor, reverse: bool) -> list[Tensor]:
    T = xs.shape[0]
    hidden = params.hidden
    # x-projections for the whole sequence in one matmul: (T, 3H)
    x_gates = add(matmul(xs, transpose(params.w_x)), params.bias)
    h = Tensor(np.zeros(hidden))
    states: list[Tensor | None] = [None] * T
    steps: Iterable[int] = reversed(range(T)) if reverse else range(T)
    for t in steps:
        xg = x_gates[t]
        rz = sigmoid_(add(xg[: 2 * hidden], matmul(params.w_h_rz, h)))
        r = rz[:hidden]
        z = rz[hidden:]
        n = tanh_(add(xg[2 * hidden :], matmul(params.w_h_n, mul(r, h))))
        h = add(n, mul(z, sub(h, n)))  # (1 - z) * n + z * h
        states[t] = h
    return states  # type: ignore[return-value]


def bigru_forward(layer: BiGruLayer, xs: Tensor) -> Tensor:
    """Run both directions over ``xs`` (T, d_in); returns (T, 2 * hidden)."""
    if xs.ndim != 2:
        raise ValueError(f"bigru expects (T, d_in) input, got shape {xs.shape}")
    if xs.shape[0] == 0:
        raise ValueError("bigru on an empty sequence")
    fw_states = _gru_direction(layer.fw, xs, reverse=False)
    bw_states = _gru_direction(layer.bw, xs, reverse=True)
    return concat([stack(fw_states, axis=0), stack(bw_states, axis=0)], axis=1)


# ---------------------------------------------------------------------------
# parameter container and checkpoint format
# ---------------------------------------------------------------------------


class ParamStore:
    """Named, ordered collection of parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def add_linear(self, name: str, layer: LinearLayer) -> LinearLayer:
        self.add(f"{name}/weight", layer.weight)
        self.add(f"{name}/bias", layer.bias)
        return layer

    def add_bigru(self, name: str, layer: BiGruLayer) -> BiGruLayer:
        for direction, cell in (("fw", layer.fw), ("bw", layer.bw)):
            for part, tensor in cell.tensors().items():
                self.add(f"{name}/{direction}/{part}", tensor)
        return layer

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match exactly."""
        if set(arrays) != set(self._params):
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            tensor = self._params[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {tensor.data.shape}")
            tensor.data = np.asarray(arr, dtype=np.float64).copy()


_CKPT_MAGIC = b"VCTCCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], header: dict | None = None) -> None:
    """Write a flat name -> float64 array container.

    Layout (all integers little-endian):
      * 8-byte magic ``VCTCCKPT``
      * uint32 format version
      * uint64 header length, then that many bytes of UTF-8 JSON
      * uint64 entry count
      * per entry: uint32 name length, UTF-8 name, uint32 ndim,
        ndim * uint64 dims, then raw float64 little-endian data in C order.

    Round-trips are bit-exact: the bytes written for each array are exactly
    ``array.tobytes(order="C")`` of its float64 representation.
    """
    header_bytes = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype != np.float64:
                raise ValueError(f"checkpoint arrays must be float64, {name!r} is {arr.dtype}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`save_checkpoint`; returns (arrays, header)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        (n_entries,) = struct.unpack("<Q", _read_exact(fh, 8))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * 8)
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, header


def save_param_store(path, store: ParamStore, extra_header: dict | None = None) -> None:
    header = {"kind": "paramstore", "extra": extra_header or {}}
    save_checkpoint(path, store.arrays(), header)


def load_param_store(path, store: ParamStore) -> dict:
    """Load saved values into an already-built ``store``; returns the extra header."""
    arrays, header = load_checkpoint(path)
    if header.get("kind") != "paramstore":
        raise ValueError(f"checkpoint is not a parameter store: kind={header.get('kind')!r}")
    store.load_arrays(arrays)
    return header.get("extra", {})
