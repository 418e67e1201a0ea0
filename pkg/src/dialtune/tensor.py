"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every trained component in the package (the dialog LM, the reward encoder,
the PPO value head) runs on this substrate.  Design choices:

- float64 everywhere: desk-scale models make it affordable and it keeps the
  finite-difference gradient checks tight (rel. err < 1e-4 with h = 1e-5).
- Gradients accumulate additively into ``Tensor.grad``; zeroing is explicit
  (see ``optim.ParamStore.zero_grad``).
- The tape is a per-result closure graph; calling ``backward`` consumes it,
  so a second backward on the same loss raises.
- All randomness comes from a caller-owned ``numpy.random.Generator`` seeded
  with PCG64 (a named, documented generator); nothing in this module holds
  global RNG state.
"""

from __future__ import annotations

import math

import numpy as np

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC_COEF = 0.044715


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite during training."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator; the caller owns and threads it."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """Dense float64 array plus an optional gradient accumulator.

    ``requires_grad`` marks trainable leaves.  Tensors produced by ops carry
    the backward closure privately; only leaves keep their ``grad`` across
    steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Build an op result, recording the tape node only when a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False  # not a leaf; grad lives only during backward
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitive ops.  Each returns a new Tensor; the closure receives the upstream
# gradient and adds each parent's share into ``parent_grads`` (a dict filled
# by ``backward``).


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul: inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def bwd(g, acc):
        bt = np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else b.data[None, :]
        at = np.swapaxes(a.data, -1, -2) if a.data.ndim > 1 else a.data[:, None]
        acc(a, _reduce_to(np.matmul(g, bt), a.data.shape))
        acc(b, _reduce_to(np.matmul(at, g), b.data.shape))

    return _result(out_data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes not broadcastable: {a.data.shape} vs {b.data.shape}")

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.data.shape))
        acc(b, _reduce_to(g, b.data.shape))

    return _result(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: shapes not broadcastable: {a.data.shape} vs {b.data.shape}")

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.data.shape))
        acc(b, _reduce_to(-g, b.data.shape))

    return _result(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes not broadcastable: {a.data.shape} vs {b.data.shape}")

    def bwd(g, acc):
        acc(a, _reduce_to(g * b.data, a.data.shape))
        acc(b, _reduce_to(g * a.data, b.data.shape))

    return _result(out_data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def bwd(g, acc):
        acc(a, g * c)

    return _result(out_data, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g, acc):
        acc(a, g * out_data)

    return _result(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g, acc):
        acc(a, g / a.data)

    return _result(out_data, (a,), bwd)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def bwd(g, acc):
        acc(a, g * 2.0 * a.data)

    return _result(out_data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g, acc):
        acc(a, g * 0.5 / out_data)

    return _result(out_data, (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the smaller branch receives the gradient (ties -> a)."""
    out_data = np.minimum(a.data, b.data)

    def bwd(g, acc):
        take_a = a.data <= b.data
        acc(a, _reduce_to(g * take_a, a.data.shape))
        acc(b, _reduce_to(g * ~take_a, b.data.shape))

    return _result(out_data, (a, b), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    out_data = np.clip(a.data, lo, hi)

    def bwd(g, acc):
        inside = (a.data >= lo) & (a.data <= hi)
        acc(a, g * inside)

    return _result(out_data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g, acc):
        acc(a, g.reshape(a.data.shape))

    return _result(out_data, (a,), bwd)


def swap_last_axes(a: Tensor) -> Tensor:
    out_data = np.swapaxes(a.data, -1, -2)

    def bwd(g, acc):
        acc(a, np.swapaxes(g, -1, -2))

    return _result(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bwd(g, acc):
        acc(a, np.transpose(g, inverse))

    return _result(out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def bwd(g, acc):
        acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(out_data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def bwd(g, acc):
        acc(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _result(out_data, (a,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, acc):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        acc(x, out_data * (g - dot))

    return _result(out_data, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (the GPT-2 convention)."""
    x3 = x.data ** 3
    inner = SQRT_2_OVER_PI * (x.data + GELU_CUBIC_COEF * x3)
    t = np.tanh(inner)
    out_data = 0.5 * x.data * (1.0 + t)

    def bwd(g, acc):
        dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x.data * x.data)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
        acc(x, g * dx)

    return _result(out_data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias must have shape ({d},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gain.data * xhat + bias.data

    def bwd(g, acc):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        acc(x, inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        acc(gain, (g * xhat).sum(axis=lead))
        acc(bias, g.sum(axis=lead))

    return _result(out_data, (x, gain, bias), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (ids are a plain int array, never on tape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding_lookup: id out of range for table with "
            f"{table.data.shape[0]} rows (ids span {ids.min()}..{ids.max()})"
        )
    out_data = table.data[ids]

    def bwd(g, acc):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        acc(table, gt)

    return _result(out_data, (table,), bwd)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out_data = x.data / norm

    def bwd(g, acc):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        acc(x, (g - out_data * dot) / norm)

    return _result(out_data, (x,), bwd)


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 restricted to mask==1 positions (mask: [..., T])."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    counts = m.sum(axis=-2)
    if np.any(counts == 0):
        raise ValueError("masked_mean_pool: a row has no unmasked positions")
    out_data = (x.data * m).sum(axis=-2) / counts

    def bwd(g, acc):
        acc(x, (g[..., None, :] / counts[..., None, :]) * m)

    return _result(out_data, (x,), bwd)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Scalar mean of x over mask==1 entries."""
    m = np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total == 0:
        raise ValueError("masked_mean: empty mask")
    out_data = np.asarray((x.data * m).sum() / total)

    def bwd(g, acc):
        acc(x, g * m / total)

    return _result(out_data, (x,), bwd)


def log_probs(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position log softmax gathered at ``targets`` (last-axis classes).

    logits: [..., V]; targets: integer array matching the leading shape.
    """
    v = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ValueError(
            f"log_probs: target shape {targets.shape} does not match "
            f"logit positions {logits.data.shape[:-1]}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"log_probs: target id out of range for vocab {v}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp_all = shifted - logz
    out_data = np.take_along_axis(logp_all, targets[..., None], axis=-1)[..., 0]

    def bwd(g, acc):
        p = np.exp(logp_all)
        grad = -p * g[..., None]
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) + g[..., None],
            axis=-1,
        )
        acc(logits, grad)

    return _result(out_data, (logits,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``mask`` selects the positions that carry loss (1 = scored); ``None``
    scores everything.  Raises on an all-masked input.
    """
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.sum() == 0:
        raise ValueError("cross_entropy: empty loss support (all positions masked)")
    lp = log_probs(logits, targets)
    return neg(masked_mean(lp, mask))


_FORWARD_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "embedding_lookup": embedding_lookup,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named transformer building-block ops."""
    if kind not in _FORWARD_KINDS:
        raise ValueError(f"forward_op: unknown kind {kind!r} (have {sorted(_FORWARD_KINDS)})")
    return _FORWARD_KINDS[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass.


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients are ADDED into every ``requires_grad`` leaf reachable from
    ``loss``.  The tape is consumed: a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._backward is None and not loss._parents:
        if loss.requires_grad:
            loss.grad += np.ones_like(loss.data)
            return
        raise RuntimeError("backward: no tape recorded for this tensor (already consumed?)")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def acc_into(t: Tensor, g: np.ndarray):
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if not np.all(np.isfinite(g)):
                raise NumericalError("backward: non-finite gradient encountered")
            node.grad += g
        if node._backward is not None:
            node._backward(g, acc_into)
            node._backward = None
            node._parents = ()


def grad_check(fn, points, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``fn`` maps the tensors in ``points`` (a Tensor or list of Tensors) to a
    scalar Tensor.  Returns max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if isinstance(points, Tensor):
        points = [points]
    leaves = []
    for p in points:
        leaf = Tensor(p.data.copy(), requires_grad=True)
        leaves.append(leaf)

    loss = fn(*leaves)
    backward(loss)

    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        gflat = leaf.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*leaves).item()
            flat[i] = orig - h
            down = fn(*leaves).item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            if not math.isfinite(fd):
                raise NumericalError(f"grad_check: non-finite finite-difference estimate at index {i}")
            err = abs(gflat[i] - fd) / max(1e-8, abs(gflat[i]) + abs(fd))
            worst = max(worst, err)
    return worst
