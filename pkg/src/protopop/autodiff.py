"""Dense f64 matrices/vectors with reverse-mode automatic differentiation.

Deliberately small: the op set below is exactly what the prompt, projection
and attention parameters need. Each op builds a node in an implicit DAG
(closure-captured parents); ``Tensor.backward`` topologically sorts the
graph from the loss and accumulates analytic gradients, visiting each node
once. All math is float64 so finite-difference checks can be tight.

Any NaN or Inf produced by an op is a hard error, never propagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "neg",
    "mul",
    "add_bias",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "reshape",
    "sum_all",
    "mean_all",
    "log",
    "exp",
    "pow_const",
    "softmax",
    "cosine_sim",
    "cosine_rows",
    "cross_entropy",
    "AttentionParams",
    "attention_params",
    "multi_head_self_attention",
    "AdamW",
]


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Created either as a leaf (data, ``requires_grad``) or internally by an
    op, in which case ``_parents`` and ``_backward`` wire it into the graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.shape != ():
            raise ValueError("backward requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones(()))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")

    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T, (a,), backward, "transpose")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g if a.data.shape == g.shape else g.sum())
        if b.requires_grad:
            b._accumulate(g if b.data.shape == g.shape else g.sum())

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward, "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            a._accumulate(ga if a.data.shape == ga.shape else ga.sum())
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(gb if b.data.shape == gb.shape else gb.sum())

    return _make(a.data * b.data, (a, b), backward, "mul")


def add_bias(m, b) -> Tensor:
    """Row-broadcast add: matrix [L,d] plus vector [d]."""
    m, b = as_tensor(m), as_tensor(b)
    if m.data.ndim != 2 or b.data.shape != (m.data.shape[1],):
        raise ValueError(f"add_bias shape mismatch: {m.data.shape} + {b.data.shape}")

    def backward(g):
        if m.requires_grad:
            m._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(m.data + b.data[None, :], (m, b), backward, "add_bias")


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)

    def backward(g):
        lo = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[lo:lo + n])
            lo += n

    return _make(out_data, tuple(parts), backward, "concat_rows")


def concat_cols(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        lo = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[:, lo:lo + n])
            lo += n

    return _make(out_data, tuple(parts), backward, "concat_cols")


def slice_rows(a, lo, hi) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[lo:hi] = g
        a._accumulate(buf)

    return _make(a.data[lo:hi], (a,), backward, "slice_rows")


def slice_cols(a, lo, hi) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[:, lo:hi] = g
        a._accumulate(buf)

    return _make(a.data[:, lo:hi], (a,), backward, "slice_cols")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


# ---------------------------------------------------------------------------
# reductions and pointwise ops


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _make(a.data.sum(), (a,), backward, "sum_all")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    return _make(a.data.mean(), (a,), backward, "mean_all")


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(a.data ** p, (a,), backward, "pow_const")


def softmax(z, tau=1.0) -> Tensor:
    """Temperature softmax along the last axis, with max-subtraction.

    ``tau`` may be a positive float or a positive scalar Tensor (for
    learnable temperatures).
    """
    z = as_tensor(z)
    tau_t = tau if isinstance(tau, Tensor) else None
    tau_v = float(tau_t.data) if tau_t is not None else float(tau)
    if tau_v <= 0.0:
        raise ValueError("softmax temperature must be positive")
    scaled = z.data / tau_v
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    parents = (z,) if tau_t is None else (z, tau_t)

    def backward(g):
        inner = g - (g * p).sum(axis=-1, keepdims=True)
        if z.requires_grad:
            z._accumulate(p * inner / tau_v)
        if tau_t is not None and tau_t.requires_grad:
            # d p / d tau = -p * (z - sum(p z)) / tau^2, contracted with g
            zc = z.data - (p * z.data).sum(axis=-1, keepdims=True)
            tau_t._accumulate(-(g * p * zc).sum() / tau_v ** 2)

    return _make(p, parents, backward, "softmax")


def cosine_sim(u, v) -> Tensor:
    """cos(u, v) for 1-D vectors; errors on zero-norm input."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ValueError("cosine_sim expects two equal-length vectors")
    c = cosine_rows(reshape(u, (1, -1)), reshape(v, (1, -1)))
    return reshape(c, ())


def cosine_rows(a, b) -> Tensor:
    """Pairwise cosine matrix: rows of a [m,d] against rows of b [n,d]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ValueError(f"cosine_rows shape mismatch: {a.data.shape} vs {b.data.shape}")
    na = np.linalg.norm(a.data, axis=1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=1, keepdims=True)
    if np.any(na < 1e-150) or np.any(nb < 1e-150):
        raise ValueError("cosine_rows: zero-norm row")
    an = a.data / na
    bn = b.data / nb
    c = an @ bn.T

    def backward(g):
        if a.requires_grad:
            dan = g @ bn
            a._accumulate((dan - (dan * an).sum(axis=1, keepdims=True) * an) / na)
        if b.requires_grad:
            dbn = g.T @ an
            b._accumulate((dbn - (dbn * bn).sum(axis=1, keepdims=True) * bn) / nb)

    return _make(c, (a, b), backward, "cosine_rows")


def cross_entropy(logits, label: int, tau=1.0) -> Tensor:
    """-log softmax(logits / tau)[label] for a 1-D logit vector."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ValueError("cross_entropy expects a 1-D logit vector")
    k = logits.data.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    tau_t = tau if isinstance(tau, Tensor) else None
    tau_v = float(tau_t.data) if tau_t is not None else float(tau)
    if tau_v <= 0.0:
        raise ValueError("cross_entropy temperature must be positive")
    scaled = logits.data / tau_v
    m = scaled.max()
    lse = m + math.log(np.exp(scaled - m).sum())
    loss = lse - scaled[label]
    p = np.exp(scaled - lse)

    parents = (logits,) if tau_t is None else (logits, tau_t)

    def backward(g):
        onehot = np.zeros(k)
        onehot[label] = 1.0
        if logits.requires_grad:
            logits._accumulate(float(g) * (p - onehot) / tau_v)
        if tau_t is not None and tau_t.requires_grad:
            tau_t._accumulate(float(g) * -((p - onehot) * logits.data).sum() / tau_v ** 2)

    return _make(loss, parents, backward, "cross_entropy")


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams:
    """Affine Q/K/V maps plus output projection for one attention block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.bq, self.bk, self.bv, self.bo]


def attention_params(d: int, rng: np.random.Generator, std: float = 0.02) -> AttentionParams:
    def w():
        return Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)

    def b():
        return Tensor(np.zeros(d), requires_grad=True)

    return AttentionParams(wq=w(), wk=w(), wv=w(), wo=w(), bq=b(), bk=b(), bv=b(), bo=b())


def multi_head_self_attention(x, params: AttentionParams, heads: int) -> Tensor:
    """Residual multi-head scaled dot-product attention over token rows.

    Y = X + (concat_h softmax(Q_h K_h^T / sqrt(d_h)) V_h) W_o + b_o.
    No feed-forward sublayer and no normalization; the block is the bare
    interaction mechanism.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("attention expects a [tokens, dim] matrix")
    d = x.data.shape[1]
    if d % heads != 0:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = add_bias(matmul(x, params.wq), params.bq)
    k = add_bias(matmul(x, params.wk), params.bk)
    v = add_bias(matmul(x, params.wv), params.bv)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        attn = softmax(matmul(qh, transpose(kh)), tau=math.sqrt(dh))
        outs.append(matmul(attn, vh))
    mixed = add_bias(matmul(concat_cols(outs), params.wo), params.bo)
    return add(x, mixed)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta,
    with bias-corrected moments. Parameters whose grad is None are treated
    as having zero gradient (they still shrink under weight decay).
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError("gradient shape does not match parameter shape")
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            mhat = self._m[i] / (1 - b1 ** self.t)
            vhat = self._v[i] / (1 - b2 ** self.t)
            update = self.lr * mhat / (np.sqrt(vhat) + self.eps) + self.lr * self.weight_decay * p.data
            p.data = p.data - update
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError("non-finite parameter after AdamW step")

    def zero_grad(self) -> None:
        zero_grads(self.params)
