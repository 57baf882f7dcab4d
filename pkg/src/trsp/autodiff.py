"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a record to the active :class:`Tape`.
:func:`backward` replays the tape in reverse from a scalar loss, accumulates
gradients into leaf tensors (``Parameter.grad``) and then clears the tape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "NonFiniteError",
    "Parameter",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "backward",
    "count_macs",
    "cross_entropy",
    "embedding",
    "gelu",
    "l1_sum",
    "layernorm",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "norm_penalty",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "take",
    "tensor_sum",
    "transpose",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar loss, replayed or stale tape."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent, zero-initialized gradient."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


class Tape:
    """Ordered op records; inputs of a record always precede it."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been replayed")
        out._tape = self
        self.records.append((out, inputs, backward_fn))


class _State:
    tape: Tape = Tape()
    recording: bool = True
    macs: int = 0


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextlib.contextmanager
def count_macs():
    """Yield a one-element list that receives the multiply-accumulates of matmuls in the block."""
    box = [0]
    start = _state.macs
    try:
        yield box
    finally:
        box[0] = _state.macs - start


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    needs = _state.recording and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _state.tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``, then clear the tape."""
    if loss.data.ndim != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones(())
            return
        raise TapeError("loss is not connected to any recorded op")
    if tape.consumed:
        raise TapeError("backward already ran on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi

    tape.records.clear()
    tape.consumed = True
    if _state.tape is tape:
        _state.tape = Tape()


def reset_tape() -> None:
    """Drop any partially recorded graph (e.g. after a forward aborted mid-way)."""
    _state.tape = Tape()


# --------------------------------------------------------------------------
# ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    if c == 1.0:
        # keep the identity bit-exact and off the tape
        return x
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    k = a.shape[-1]
    if b.ndim == 2:
        # fold batch dims into one GEMM
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
        _state.macs += a2.shape[0] * k * b.shape[1]

        def fn2(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(data, (a, b), fn2, "matmul")

    data = np.matmul(a.data, b.data)
    _state.macs += int(np.prod(data.shape)) * k

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(data, (a, b), fn, "matmul")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xs = x.data
    x2 = xs * xs
    t = np.tanh(_GELU_C * xs * (1.0 + 0.044715 * x2))
    data = 0.5 * xs * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xs * (1.0 - t * t) * du),)

    return _make(data, (x,), fn, "gelu")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool) marks allowed entries."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), fn, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if not eps > 0:
        raise ValueError(f"layernorm epsilon must be positive, got {eps}")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(f"layernorm: affine shape {gamma.shape} does not match features {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    data = xhat * gamma.data + beta.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), fn, "layernorm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(data, (table,), fn, "embedding")


def take(v: Tensor, index: int) -> Tensor:
    """Scalar element ``v[index]`` of a vector."""
    data = v.data[index].copy()

    def fn(g):
        gv = np.zeros_like(v.data)
        gv[index] = g
        return (gv,)

    return _make(data, (v,), fn, "take")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def tensor_sum(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def cross_entropy(logits: Tensor, targets: np.ndarray, shift: bool = True) -> Tensor:
    """Mean next-token NLL. With ``shift``, position t predicts ``targets[..., t+1]``."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    if shift:
        if logits.shape[:-1] != targets.shape:
            raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
        z = logits.data[..., :-1, :]
        tgt = targets[..., 1:]
    else:
        z, tgt = logits.data, targets
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    count = tgt.size
    data = np.asarray((lse - picked).sum() / count)

    def fn(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, tgt[..., None], np.take_along_axis(p, tgt[..., None], axis=-1) - 1.0, axis=-1)
        p *= g / count
        if not shift:
            return (p,)
        full = np.zeros_like(logits.data)
        full[..., :-1, :] = p
        return (full,)

    return _make(data, (logits,), fn, "cross_entropy")


def l1_sum(v: Tensor, indices: Sequence[int] | None = None) -> Tensor:
    """Sum of absolute values (optionally over ``indices`` only); subgradient sign(0) = 0."""
    idx = slice(None) if indices is None else np.asarray(list(indices), dtype=np.int64)
    sel = v.data[idx]
    data = np.asarray(np.abs(sel).sum())

    def fn(g):
        gv = np.zeros_like(v.data)
        gv[idx] = g * np.sign(sel)
        return (gv,)

    return _make(data, (v,), fn, "l1_sum")


def norm_penalty(d: Tensor, flag: str = "L2", per_vector: bool = False) -> Tensor:
    """L1 or L2 norm of ``d``.

    With ``per_vector`` the norm is taken along the last axis and averaged over the
    remaining axes. The L2 gradient is zero wherever the norm is zero.
    """
    flag = flag.upper()
    if flag not in ("L1", "L2"):
        raise ValueError(f"norm flag must be L1 or L2, got {flag!r}")
    x = d.data
    if flag == "L1":
        if per_vector:
            n = x.size // x.shape[-1]
            data = np.asarray(np.abs(x).sum() / n)
            return _make(data, (d,), lambda g: (g * np.sign(x) / n,), "norm_penalty")
        return _make(np.asarray(np.abs(x).sum()), (d,), lambda g: (g * np.sign(x),), "norm_penalty")

    if per_vector:
        norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        n = norms.size
        data = np.asarray(norms.sum() / n)
        safe = np.where(norms > 0, norms, 1.0)

        def fn(g):
            return (np.where(norms > 0, x / safe, 0.0) * (g / n),)

        return _make(data, (d,), fn, "norm_penalty")

    norm = float(np.sqrt((x * x).sum()))

    def fn(g):
        if norm == 0.0:
            return (np.zeros_like(x),)
        return (g * x / norm,)

    return _make(np.asarray(norm), (d,), fn, "norm_penalty")


# --------------------------------------------------------------------------
# optimization


class Adam:
    """Standard Adam (bias-corrected). ``step`` updates in place and zeroes grads."""

    def __init__(self, params: Iterable[Parameter], lr: float = 2e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad.fill(0.0)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            g.fill(0.0)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    params = list(params)
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= factor
    return total
