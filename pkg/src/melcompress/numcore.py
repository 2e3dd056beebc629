"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the encoder, probes and distillation need are provided.
Every op records its parents and a closure that pushes the upstream gradient
back to them; :func:`backward` walks the tape in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared; the message names the offending op."""


_GRAD_ENABLED = True
_MAC_LOG: list | None = None


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def count_macs():
    """Record ``(tag, macs)`` for every matmul executed inside the block.

    Yields the list the entries are appended to.
    """
    global _MAC_LOG
    prev = _MAC_LOG
    log: list[tuple[str, int]] = []
    _MAC_LOG = log
    try:
        yield log
    finally:
        _MAC_LOG = prev


def _record_macs(tag: str, macs: int) -> None:
    if _MAC_LOG is not None:
        _MAC_LOG.append((tag, int(macs)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)


class Parameter(Tensor):
    """Trainable tensor with an optional binary prune mask and Adam moments."""

    __slots__ = ("mask", "m", "v", "step")

    def __init__(self, data, mask=None):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, op="param")
        self.mask: np.ndarray | None = None
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        if mask is not None:
            self.set_mask(mask)

    def set_mask(self, mask) -> None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.data.shape:
            raise ContractError(f"mask shape {mask.shape} != value shape {self.data.shape}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ContractError("mask entries must be 0 or 1")
        self.mask = mask.copy()
        self.data *= self.mask
        if self.grad is not None:
            self.grad *= self.mask

    def zero_grad(self) -> None:
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(_check(data, op), op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b, tag: str = "matmul") -> Tensor:
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    # every output entry is one inner product of length k
    _record_macs(tag, out.size * a.shape[-1])

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None, tag: str = "linear") -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    out = x.data @ weight.data.T
    _record_macs(tag, out.size * weight.shape[1])
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            weight._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _make(out, parents, bw, "linear")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape

    def bw(g):
        x._accumulate(g.reshape(src))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def total(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), bw, "sum")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` indexed by integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        table._accumulate(acc)

    return _make(table.data[ids], (table,), bw, "embedding")


def mean_rows(x: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted pooling over axis -2: ``out[..., :] = sum_t w[..., t] x[..., t, :]``."""
    w = np.asarray(weights, dtype=np.float64)

    def bw(g):
        x._accumulate(w[..., :, None] * g[..., None, :])

    return _make(np.einsum("...t,...td->...d", w, x.data), (x,), bw, "pool")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        x._accumulate(g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du))

    return _make(out, (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        x._accumulate(g * pos)

    return _make(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def softmax(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x + bias`` (bias is a constant)."""
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    # an overflowed variance would otherwise normalise to a finite zero
    _check(var, "layer_norm")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            n = xd.shape[-1]
            x._accumulate(
                inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
            )

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """``sum_i w_i * (-log softmax(logits_i)[label_i])`` over leading axes.

    ``weights`` carries both the selection and the normalisation; pass
    ``mask / mask.sum()`` for a mean over selected rows.
    """
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum()

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
        logits._accumulate(g * w[..., None] * grad)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


def kl_divergence(target_logits, logits: Tensor, weights, temperature: float = 1.0) -> Tensor:
    """``sum_i w_i * tau^2 * KL(softmax(t_i/tau) || softmax(s_i/tau))``.

    The target side is treated as a constant.
    """
    t = target_logits.data if isinstance(target_logits, Tensor) else np.asarray(target_logits, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    tau = float(temperature)
    logp = _log_softmax(t / tau)
    logq = _log_softmax(logits.data / tau)
    p = np.exp(logp)
    per_row = (p * (logp - logq)).sum(axis=-1)
    loss = tau * tau * (w * per_row).sum()

    def bw(g):
        logits._accumulate(g * tau * w[..., None] * (np.exp(logq) - p))

    return _make(np.asarray(loss), (logits,), bw, "kl_divergence")


# ---------------------------------------------------------------------------
# differentiation and optimisation
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Gradients of masked Parameter entries are forced to zero. Intermediate
    tensors keep their ``.grad`` so callers can inspect activations'
    gradients.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any parameter")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo(loss)):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        for p in node._parents:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient flowing out of {node.op}")
    for node in _topo(loss):
        if isinstance(node, Parameter) and node.mask is not None and node.grad is not None:
            node.grad *= node.mask


@dataclass
class AdamHyper:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def adam_step(params: Iterable[Parameter], hyper: AdamHyper) -> None:
    """Bias-corrected Adam update in place; masked entries stay exactly 0."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError("adam_step called on a parameter without a gradient")
    for p in params:
        g = p.grad
        p.step += 1
        p.m = hyper.beta1 * p.m + (1.0 - hyper.beta1) * g
        p.v = hyper.beta2 * p.v + (1.0 - hyper.beta2) * g * g
        m_hat = p.m / (1.0 - hyper.beta1**p.step)
        v_hat = p.v / (1.0 - hyper.beta2**p.step)
        p.data -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
        if p.mask is not None:
            p.data *= p.mask
        _check(p.data, "adam_step")
