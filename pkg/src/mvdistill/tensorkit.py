"""Dense tensors with reverse-mode automatic differentiation on a tape.

Everything is double precision: central finite differences are the master
oracle for every gradient in the test suite, and float32 rounding would
swamp the comparison. The op set is deliberately small, exactly what the
multi-view model and its losses need: matmul, valid-padding strided
convolution, tempered softmax, KL divergence, relu, layer norm, affine
maps, concatenation, reductions, and a composed self-attention.

Usage pattern::

    tape = Tape()
    with tape:
        loss = some_scalar_function(params)
    tape.backward(loss)      # populates .grad on every reachable tensor

Ops executed outside any active tape run forward-only and produce tensors
with ``requires_grad=False``; that is the evaluation path.

A tape is single use. Backward on a consumed tape raises, which catches
the classic stale-graph bug early.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

EPS = 1e-8  # stability floor shared by kl_div and cross_entropy clamping


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    Tensors are immutable after creation except for the ``grad`` buffer
    (and deliberate in-place parameter updates between tapes, e.g. SGD
    steps and finite-difference probes).
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A gradient-free view of the same values."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.tape is None:
            raise RuntimeError(
                "tensor is not attached to a tape; run the computation "
                "inside `with Tape():` to record gradients"
            )
        self.tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Minimal operator sugar; the named functions below are the real API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class _Node:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs: tuple[Tensor, ...], out: Tensor, bwd: Callable):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, which is automatically a
    topological order, so the backward sweep is a single reverse pass
    that visits each node exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape context exited out of order"

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: _Node) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss``, accumulating into ``.grad`` buffers."""
        if self._consumed:
            raise RuntimeError(
                "tape already consumed by a previous backward pass; "
                "record a fresh tape to differentiate again"
            )
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g_out = node.out.grad
            if g_out is None:
                continue
            grads = node.bwd(g_out)
            for tensor, g in zip(node.inputs, grads):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    tensor.grad = tensor.grad + g


_TAPE_STACK: list[Tape] = []


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    out = Tensor(data)
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        tape = _TAPE_STACK[-1]
        out.requires_grad = True
        out.tape = tape
        tape.record(_Node(inputs, out, bwd))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    mask = a.data > floor
    return _record(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ValueError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of an empty sequence")
    if axis not in (0, 1):
        raise ValueError(f"concat supports axis 0 or 1, got {axis}")
    if any(p.ndim != 2 for p in parts):
        raise ValueError("concat expects matrices")
    other = 1 - axis
    width = parts[0].shape[other]
    if any(p.shape[other] != width for p in parts):
        raise ValueError(
            f"concat shape mismatch along axis {other}: "
            f"{[p.shape for p in parts]}"
        )
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    parts = tuple(parts)

    def bwd(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(parts)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"slice_rows expects a matrix, got shape {a.shape}")
    if not (0 <= start < stop <= a.shape[0]):
        raise ValueError(f"row slice [{start}:{stop}] out of range for {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        return (full,)

    return _record(a.data[start:stop, :].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"slice_cols expects a matrix, got shape {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"column slice [{start}:{stop}] out of range for {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _record(a.data[:, start:stop].copy(), (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def bwd(g):
        return (np.full(a.shape, float(g) / n),)

    return _record(np.asarray(a.data.mean()), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(a.shape, float(g)),)

    return _record(np.asarray(a.data.sum()), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} x {b.shape}")

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for a vector or a stack of rows."""
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be a matrix, got {weight.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")

    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    if x.ndim == 1:
        def bwd(g):
            gx = g @ weight.data.T
            gw = np.outer(x.data, g)
            gb = g if bias is not None else None
            return (gx, gw, gb)
    else:
        def bwd(g):
            gx = g @ weight.data.T
            gw = x.data.T @ g
            gb = g.sum(axis=0) if bias is not None else None
            return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


def conv2d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Valid-padding 2-D convolution of a C x H x W image.

    Output spatial size is floor((H - kh) / stride) + 1 per axis; no
    implicit padding is ever applied.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects CxHxW and CoxCxKhxKw, got {x.shape} and {kernel.shape}")
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {kernel.shape} larger than input {x.shape}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]          # C x Ho x Wo x kh x kw
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(co, c * kh * kw)
    out = (cols @ kmat.T).T.reshape(co, ho, wo)

    def bwd(g):
        gmat = g.reshape(co, ho * wo).T               # (Ho*Wo) x Co
        gk = (gmat.T @ cols).reshape(co, c, kh, kw)
        patch = (gmat @ kmat).reshape(ho, wo, c, kh, kw)
        gx = np.zeros_like(x.data)
        for i in range(ho):
            ri = i * stride
            for j in range(wo):
                rj = j * stride
                gx[:, ri:ri + kh, rj:rj + kw] += patch[i, j]
        return (gx, gk)

    return _record(out, (x, kernel), bwd)


def bias_add_channels(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to a C x H x W map."""
    if x.ndim != 3 or bias.shape != (x.shape[0],):
        raise ValueError(f"channel bias shape {bias.shape} does not fit input {x.shape}")

    def bwd(g):
        return (g, g.sum(axis=(1, 2)))

    return _record(x.data + bias.data[:, None, None], (x, bias), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of a vector or row stack, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm parameter shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gg = (g * xhat).sum(axis=tuple(range(x.ndim - 1)))
        gb = g.sum(axis=tuple(range(x.ndim - 1)))
        gy = g * gain.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return (gx, gg, gb)

    return _record(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# probability ops
# ---------------------------------------------------------------------------


def softmax_tempered(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax of ``logits / tau`` along the last axis, max-shifted for stability."""
    tau = float(tau)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax_tempered requires finite logits")
    z = (logits.data - logits.data.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot) / tau,)

    return _record(s, (logits,), bwd)


def _check_distribution(name: str, v: np.ndarray) -> None:
    if v.ndim != 1:
        raise ValueError(f"{name} must be a probability vector, got shape {v.shape}")
    if np.any(v < -1e-12):
        raise ValueError(f"{name} has negative entries")
    total = v.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"{name} is not normalized: sum={total!r}")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) with q floored at EPS and renormalized.

    The 0 * log(0 / .) terms contribute zero. Flooring alone can push the
    value slightly negative when q carries exact zeros, so the floored q
    is renormalized, which restores the Gibbs bound KL >= 0.
    """
    if p.shape != q.shape:
        raise ValueError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    _check_distribution("p", p.data)
    _check_distribution("q", q.data)
    qf = np.maximum(q.data, EPS)
    total = qf.sum()
    qn = qf / total
    mask_p = p.data > 0
    mask_q = q.data > EPS
    log_ratio = np.where(mask_p, np.log(np.where(mask_p, p.data, 1.0)) - np.log(qn), 0.0)
    value = float((p.data * log_ratio).sum())
    p_sum = p.data.sum()

    def bwd(g):
        g = float(g)
        gp = g * np.where(mask_p, log_ratio + 1.0, 0.0)
        gq = g * mask_q * (p_sum / total - p.data / qf)
        return (gp, gq)

    return _record(np.asarray(value), (p, q), bwd)


def cross_entropy(p: Tensor, label: int) -> Tensor:
    """Negative log probability of the true class, clamped at EPS."""
    if p.ndim != 1:
        raise ValueError(f"cross_entropy expects a probability vector, got {p.shape}")
    label = int(label)
    if not (0 <= label < p.shape[0]):
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    clamped = max(float(p.data[label]), EPS)
    value = -math.log(clamped)

    def bwd(g):
        gp = np.zeros_like(p.data)
        if p.data[label] > EPS:
            gp[label] = -float(g) / p.data[label]
        return (gp,)

    return _record(np.asarray(value), (p,), bwd)


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    if p.ndim != 1:
        raise ValueError(f"entropy expects a probability vector, got {p.shape}")
    if np.any(p.data < -1e-12):
        raise ValueError("entropy requires nonnegative entries")
    mask = p.data > 0
    logs = np.where(mask, np.log(np.where(mask, p.data, 1.0)), 0.0)
    value = -float((p.data * logs).sum())

    def bwd(g):
        return (-float(g) * np.where(mask, logs + 1.0, 0.0),)

    return _record(np.asarray(value), (p,), bwd)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def self_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor,
    num_heads: int,
) -> Tensor:
    """Scaled dot-product self-attention over rows of ``x`` (L x d).

    Composed from the primitive ops above, so gradients come from the tape
    rather than from a hand-derived fused backward.
    """
    if x.ndim != 2:
        raise ValueError(f"self_attention expects L x d tokens, got {x.shape}")
    d = x.shape[1]
    for name, t in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if t.shape != (d, d):
            raise ValueError(f"{name} shape {t.shape} != ({d}, {d})")
    if num_heads < 1 or d % num_heads != 0:
        raise ValueError(f"model dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    q = matmul(x, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    heads = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
        attn = softmax_tempered(scores, 1.0)
        heads.append(matmul(attn, vh))
    merged = heads[0] if num_heads == 1 else concat(heads, axis=1)
    return linear(merged, wo, bo)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic scalar-valued function of ``x``. The
    error at each coordinate is |analytic - numeric| / max(1, |analytic|);
    the maximum over coordinates is returned.
    """
    step = float(step)
    if not (1e-7 <= step <= 1e-3):
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    x.requires_grad = True
    x.grad = None
    tape = Tape()
    with tape:
        y = f(x)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x).item()
        flat[i] = orig - step
        lo = f(x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(a))
    return float(np.max(np.abs(a - numeric) / denom))
