"""Dense tensors with reverse-mode differentiation.

Every differentiable op records its parents and a closure that maps the
output gradient to per-parent gradients. ``backward`` walks the graph in
reverse topological order. Arrays are numpy float64 by default.

Leading batch dimensions are supported by the ops the model needs
(matmul, softmax, concat, maxpool, the fused LSTM); elementwise ops follow
numpy broadcasting and reduce gradients back to operand shapes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class EmptySequenceError(ContractError):
    pass


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned different values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat view of the data in row-major order."""
        return self.data.ravel()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``params`` is given every parameter gets an allocated grad slot, so
    parameters the loss never touches end up with an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for t in params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=DTYPE)
            else:
                node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def elementwise(x, kind: str, other=None) -> Tensor:
    """Dispatch by name: relu, sigmoid, tanh, add, sub, mul."""
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    binary = {"add": add, "sub": sub, "mul": mul}
    if kind in unary:
        return unary[kind](as_tensor(x))
    if kind in binary:
        if other is None:
            raise ContractError(f"elementwise {kind!r} needs a second operand")
        return binary[kind](x, other)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def _scatter_add(idx: np.ndarray, g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum rows of ``g`` into a zero array of ``shape`` at positions ``idx``."""
    flat = idx.reshape(-1)
    width = int(np.prod(shape[1:], dtype=np.intp))
    g2 = g.reshape(flat.size, width)
    lin = (flat[:, None] * width + np.arange(width)[None, :]).reshape(-1)
    out = np.bincount(lin, weights=g2.reshape(-1), minlength=shape[0] * width)
    return out.reshape(shape)


def take(x: Tensor, idx, mask=None) -> Tensor:
    """Gather along axis 0: ``out[...] = x[idx[...]]``.

    Positions where ``mask`` is false become zero and receive no gradient.
    """
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        m = mask.reshape(mask.shape + (1,) * (out.ndim - mask.ndim))
        out = out * m

    def bw(g):
        if mask is not None:
            g = g * m
        return (_scatter_add(idx, g, x.shape),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and attention primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D and shared across the leading axes of ``a``; otherwise
    leading axes must match exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ between {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _node(out, (a, b), bw)
    if a.ndim == 2 and b.ndim > 2:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    ``mask`` (broadcastable to ``x``) marks valid entries; masked entries get
    probability 0. Each row must keep at least one valid entry.
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: empty row dimension in shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ContractError("concat of an empty list")
    ax = axis % xs[0].ndim
    ref = xs[0].shape[:ax] + xs[0].shape[ax + 1 :]
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or x.shape[:ax] + x.shape[ax + 1 :] != ref:
            raise DimensionError(
                f"concat: shape {x.shape} does not line up with {xs[0].shape} on axis {axis}"
            )
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return _node(np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def concat_feature(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate ``n x d_i`` blocks column-wise into ``n x sum(d_i)``."""
    if not xs:
        raise ContractError("concat_feature needs at least one input")
    rows = {x.shape[:-1] for x in xs}
    if len(rows) != 1:
        raise DimensionError(f"concat_feature: row counts differ: {[x.shape for x in xs]}")
    return concat(xs, axis=-1)


def maxpool_time(x: Tensor, mask=None) -> Tensor:
    """Max over the time axis (second to last): ``(..., n, d) -> (..., d)``.

    Gradient flows to the first maximal row. Rows with a false ``mask`` entry
    are ignored.
    """
    if x.ndim < 2 or x.shape[-2] == 0:
        raise EmptySequenceError(f"maxpool_time: empty sequence, shape {x.shape}")
    z = x.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any(axis=-1).all():
            raise EmptySequenceError("maxpool_time: a sequence has no valid rows")
        z = np.where(m[..., None], z, -np.inf)
    arg = z.argmax(axis=-2)
    out = np.take_along_axis(x.data, arg[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _node(out, (x,), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    k = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ContractError(f"cross_entropy: target outside 0..{k - 1}")
    lp = log_softmax(reshape(logits, (-1, k)))
    onehot = np.zeros(lp.shape)
    onehot[np.arange(len(targets)), targets] = -1.0 / len(targets)
    return sum(mul(lp, onehot))


# ---------------------------------------------------------------------------
# recurrence


def lstm(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor) -> Tensor:
    """Single-direction LSTM over ``x`` of shape ``(B, T, D)``.

    Gate layout in the ``4H`` axis is input, forget, cell, output. State starts
    at zero. Returns all hidden states ``(B, T, H)``. The backward pass is
    hand-written backpropagation through time.
    """
    if x.ndim != 3 or x.shape[1] == 0:
        raise ContractError(f"lstm: expected non-empty (B, T, D) input, got {x.shape}")
    B, T, D = x.shape
    H = w_rec.shape[0]
    if w_in.shape != (D, 4 * H) or w_rec.shape != (H, 4 * H) or bias.shape != (4 * H,):
        raise DimensionError(
            f"lstm: weights {w_in.shape}, {w_rec.shape}, {bias.shape} do not fit input {x.shape}"
        )
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(T * B, D)
    xz = (xt @ w_in.data + bias.data).reshape(T, B, 4 * H)
    Wh = w_rec.data
    gates = np.empty((T, B, 4 * H))
    cells = np.zeros((T + 1, B, H))
    hid = np.zeros((T + 1, B, H))
    tanh_c = np.empty((T, B, H))
    for t in range(T):
        z = xz[t] + hid[t] @ Wh
        s = gates[t]
        s[:] = _sigmoid(z)
        s[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        i, f, gg, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H : 3 * H], s[:, 3 * H :]
        cells[t + 1] = f * cells[t] + i * gg
        np.tanh(cells[t + 1], out=tanh_c[t])
        hid[t + 1] = o * tanh_c[t]
    out = hid[1:].transpose(1, 0, 2)

    def bw(g):
        g = np.ascontiguousarray(g.transpose(1, 0, 2))
        dz_all = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        WhT = Wh.T
        for t in range(T - 1, -1, -1):
            gs = gates[t]
            i, f, gg, o = gs[:, :H], gs[:, H : 2 * H], gs[:, 2 * H : 3 * H], gs[:, 3 * H :]
            tc_ = tanh_c[t]
            dh = g[t] + dh_next
            dc = dh * o * (1.0 - tc_ * tc_) + dc_next
            dz = dz_all[t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * cells[t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H :] = dh * tc_ * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ WhT
        dz2 = dz_all.reshape(T * B, 4 * H)
        dx = (dz2 @ w_in.data.T).reshape(T, B, D).transpose(1, 0, 2)
        dw_in = xt.T @ dz2
        dw_rec = hid[:-1].reshape(T * B, H).T @ dz2
        return dx, dw_in, dw_rec, dz2.sum(axis=0)

    return _node(out, (x, w_in, w_rec, bias), bw)


# ---------------------------------------------------------------------------
# parameters


def _name_seed(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class ParamStore:
    """Named trainable tensors, iterated in sorted-name order.

    Each parameter is initialised from its own generator keyed by
    ``(rng_seed, name)``, so adding or removing a parameter never shifts the
    initial values of the others.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: Sequence[int], bound: float, key: str | None = None) -> Tensor:
        """``key`` (default ``name``) selects the init stream; equal keys give equal values."""
        rng = _name_seed(self.rng_seed, key or name)
        return self.add(name, rng.uniform(-bound, bound, size=tuple(shape)))

    def normal(self, name: str, shape: Sequence[int], scale: float = 1.0, key: str | None = None) -> Tensor:
        rng = _name_seed(self.rng_seed, key or name)
        return self.add(name, rng.normal(0.0, scale, size=tuple(shape)))

    def zeros(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.add(name, np.zeros(tuple(shape)))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def values(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def num_parameters(self, prefix: str = "") -> int:
        return int(np.sum([t.data.size for n, t in self.items() if n.startswith(prefix)]))

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self._params[n].data = arr.copy()

    def save(self, path, meta: dict | None = None) -> None:
        """Write ordered ``(name, shape, values)`` triples to an ``.npz`` file."""
        arrays = {f"p{i:04d}": t.data for i, (_, t) in enumerate(self.items())}
        header = {"names": self.names(), "rng_seed": self.rng_seed, "meta": meta or {}}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            store = cls(rng_seed=header["rng_seed"])
            for i, name in enumerate(header["names"]):
                store.add(name, z[f"p{i:04d}"])
        return store, header["meta"]


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 100,
    seed: int = 0,
    names: Sequence[str] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    Up to ``samples`` coordinates are drawn per parameter. Relative error is
    ``|a - n| / max(floor, |a| + |n|)``; the floor keeps gradients smaller
    than the finite-difference round-off (about 1e-11 for O(1) losses) from
    being judged on noise alone.
    """
    if eps <= 0 or tol <= 0:
        raise ContractError("eps and tol must be positive")
    first = f(params).item()
    second = f(params).item()
    if first != second:
        raise DeterminismError(f"f returned {first!r} then {second!r} for identical params")
    params.zero_grads()
    backward(f(params), params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name in names if names is not None else params.names():
        t = params[name]
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1).copy()
        n = flat.size
        coords = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f(params).item()
            flat[c] = orig - eps
            down = f(params).item()
            flat[c] = orig
            num = (up - down) / (2 * eps)
            a = analytic[c]
            worst = max(worst, abs(a - num) / max(floor, abs(a) + abs(num)))
        report.max_rel_error[name] = worst
    return report
