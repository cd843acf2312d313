"""A small reverse-mode differentiation tape over numpy arrays.

Every operation that has at least one differentiable input appends a
backward closure to the tape of its inputs. ``Tape.backward`` replays the
closures in reverse, accumulating ``.grad`` on every variable that
requires it, intermediates included (saliency reads those).

Only the operations the vision transformer needs are provided; several
are fused (layer norm, softmax, cross-entropy, affine maps) because the
composite versions are slower and numerically worse.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from ..errors import ModelError

_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad", "name")

    def __init__(self, value, tape: "Tape", requires_grad: bool = False, name: str = ""):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    def __init__(self):
        self._ops: List[Tuple[Var, Tuple[Var, ...], Backward]] = []
        self._consumed = False

    def var(self, value, name: str = "") -> Var:
        """A differentiable leaf."""
        return Var(np.asarray(value), self, True, name)

    def const(self, value) -> Var:
        return Var(np.asarray(value), self, False)

    def record(self, value, parents: Tuple[Var, ...], backward: Backward) -> Var:
        needs = any(p.requires_grad for p in parents)
        out = Var(value, self, needs)
        if needs:
            self._ops.append((out, parents, backward))
        return out

    def __len__(self):
        return len(self._ops)

    def backward(self, output: Var, seed: Optional[np.ndarray] = None) -> None:
        if self._consumed:
            raise ModelError("tape already used for a backward pass; record a new forward pass")
        if not output.requires_grad:
            raise ModelError("output does not depend on any differentiable variable")
        self._consumed = True
        output.grad = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=output.value.dtype)
        for out, parents, fn in reversed(self._ops):
            if out.grad is None:
                continue
            for p, g in zip(parents, fn(out.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g
        # Closures hold Vars which hold this tape; drop them so activations
        # are freed by refcounting instead of waiting for the cycle collector.
        self._ops = []


def _as_var(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ModelError("operation needs at least one Var")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(a, tape), _as_var(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value + b.value, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(a, tape), _as_var(b, tape)
    av, bv = a.value, b.value
    return tape.record(
        av * bv,
        (a, b),
        lambda g: (
            unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        ),
    )


def scale(a: Var, s: float) -> Var:
    return a.tape.record(a.value * s, (a,), lambda g: (g * s,))


def gelu(a: Var) -> Var:
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return a.tape.record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def dropout(a: Var, p: float, rng: Optional[np.random.Generator]) -> Var:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.value.shape) >= p).astype(a.value.dtype) / (1.0 - p)
    return a.tape.record(a.value * keep, (a,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# shape
# --------------------------------------------------------------------------


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inverse = tuple(np.argsort(axes))
    return a.tape.record(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Var, key) -> Var:
    shape, dtype = a.value.shape, a.value.dtype
    fancy = isinstance(key, np.ndarray) and key.dtype != bool or (
        isinstance(key, tuple) and any(isinstance(k, np.ndarray) and k.dtype != bool for k in key)
    )

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return a.tape.record(a.value[key], (a,), backward)


def prepend_token(x: Var, token: Var) -> Var:
    """(B, N, D) sequence with a shared (D,) token prepended -> (B, N + 1, D)."""
    b, _, d = x.value.shape
    out = np.concatenate([np.broadcast_to(token.value, (b, 1, d)), x.value], axis=1)
    return x.tape.record(out, (x, token), lambda g: (g[:, 1:], g[:, 0].sum(axis=0)))


def replace_rows(x: Var, mask: np.ndarray, token: Var) -> Var:
    """Replace positions where ``mask`` (B, N) is True by a shared (D,) token."""
    m = mask[..., None]
    out = np.where(m, token.value, x.value)
    return x.tape.record(out, (x, token), lambda g: (np.where(m, 0.0, g).astype(g.dtype), g[mask].sum(axis=0)))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(a, tape), _as_var(b, tape)
    av, bv = a.value, b.value
    return tape.record(
        av @ bv,
        (a, b),
        lambda g: (
            unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None,
            unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None,
        ),
    )


def linear(x: Var, w: Var, b: Optional[Var] = None) -> Var:
    """x (..., D) @ w (D, E) + b (E,), flattening the leading axes into one GEMM."""
    lead = x.value.shape[:-1]
    x2 = x.value.reshape(-1, x.value.shape[-1])
    out = x2 @ w.value
    if b is not None:
        out = out + b.value
    out = out.reshape(lead + (w.value.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.value.T).reshape(x.value.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return x.tape.record(out, parents, backward)


# --------------------------------------------------------------------------
# normalization and losses
# --------------------------------------------------------------------------


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-6) -> Var:
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value
    d = xv.shape[-1]

    def backward(g):
        gxhat = g * gamma.value
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return (gx, ggamma, gbeta)

    return x.tape.record(out, (x, gamma, beta), backward)


def softmax(x: Var) -> Var:
    """Softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return x.tape.record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    z = logits.value
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ModelError(f"cross_entropy expects (M, V) logits and (M,) targets, got {z.shape}, {targets.shape}")
    m = z.shape[0]
    logp = log_softmax_np(z)
    rows = np.arange(m)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / m),)

    return logits.tape.record(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def sum_all(x: Var) -> Var:
    shape = x.value.shape
    return x.tape.record(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
