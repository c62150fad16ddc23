"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every differentiable operation applied to tensors that are
being watched (leaves) or derived from watched tensors.  ``Tape.backward``
walks the recorded nodes in reverse and accumulates vector-Jacobian products
into per-node gradient buffers.  ``detach`` produces a value-identical tensor
with no tape node, which is the stop-gradient primitive the loss layer relies
on.  All arithmetic is float64; broadcasting is restricted to scalar-with-array
so every gradient rule stays explicit and checkable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Array = np.ndarray


class TensorError(ValueError):
    """Raised for shape mismatches, domain errors and tape misuse."""


# ---------------------------------------------------------------------------
# Tape and Tensor
# ---------------------------------------------------------------------------

_ACTIVE_TAPE: "Tape | None" = None


@dataclass
class _Node:
    op: str
    inputs: tuple  # tuple of node ids (int) or None for constant operands
    vjp: Callable[[Array], tuple]  # grad_out -> per-input grads (None allowed)


class Tape:
    """Append-only record of one forward pass; single-use for backward."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._consumed = False
        self._grads: dict[int, Array] | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TensorError("another tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _record(self, op: str, inputs: tuple, vjp) -> int:
        node_id = len(self._nodes)
        self._nodes.append(_Node(op, inputs, vjp))
        return node_id

    def watch(self, values) -> "Tensor":
        """Register a leaf tensor whose gradient will be tracked."""
        t = Tensor(values)
        t.node_id = self._record("leaf", (), None)
        return t

    def backward(self, loss: "Tensor") -> dict[int, "Tensor"]:
        """Reverse accumulation from a scalar loss.

        Returns a map from node id to gradient tensor.  Nodes unreachable from
        the loss (including everything downstream of a ``detach``) are absent.
        A second call without a fresh tape is rejected.
        """
        if self._consumed:
            raise TensorError("tape already consumed; build a fresh tape per forward pass")
        if loss.values.size != 1:
            raise TensorError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True
        if loss.node_id is None:
            # loss built purely from constants/detached values: every gradient is zero
            self._grads = {}
            return {}

        buffers: dict[int, Array] = {loss.node_id: np.ones_like(loss.values)}
        stored: set[int] = {id(buffers[loss.node_id])}
        for node_id in range(loss.node_id, -1, -1):
            grad_out = buffers.get(node_id)
            if grad_out is None:
                continue
            node = self._nodes[node_id]
            if node.vjp is None:  # leaf
                continue
            for input_id, grad_in in zip(node.inputs, node.vjp(grad_out)):
                if input_id is None or grad_in is None:
                    continue
                acc = buffers.get(input_id)
                if acc is None:
                    # vjps may hand back grad_out itself or a view; copy before
                    # the buffer becomes an in-place accumulation target
                    if grad_in.base is not None or id(grad_in) in stored:
                        grad_in = grad_in.copy()
                    buffers[input_id] = grad_in
                    stored.add(id(grad_in))
                else:
                    acc += grad_in
        self._grads = buffers
        return {nid: Tensor(g) for nid, g in buffers.items()}

    def grad(self, t: "Tensor") -> Array:
        """Gradient for a tensor after backward; zeros if no path reached it."""
        if self._grads is None:
            raise TensorError("backward has not been run on this tape")
        if t.node_id is None:
            return np.zeros_like(t.values)
        g = self._grads.get(t.node_id)
        return np.zeros_like(t.values) if g is None else g

    def __len__(self) -> int:
        return len(self._nodes)


class Tensor:
    """Shape-carrying float64 array, optionally attached to the active tape."""

    __slots__ = ("values", "node_id")

    def __init__(self, values, node_id: int | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __neg__(self):
        return neg(self)


def constant(values) -> Tensor:
    """Tensor with no tape node; never receives gradient."""
    return Tensor(values)


def leaf(values) -> Tensor:
    """Watched tensor on the active tape (constant when no tape is active)."""
    if _ACTIVE_TAPE is None:
        return Tensor(values)
    return _ACTIVE_TAPE.watch(values)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, values: Array, parents: Sequence[Tensor], vjp) -> Tensor:
    """Attach a result to the active tape when any parent is on it."""
    out = Tensor(values)
    if _ACTIVE_TAPE is None:
        return out
    ids = tuple(p.node_id for p in parents)
    if all(i is None for i in ids):
        return out
    out.node_id = _ACTIVE_TAPE._record(op, ids, vjp)
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic (equal shapes, or scalar-with-array)
# ---------------------------------------------------------------------------


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.values.size == 1 or b.values.size == 1:
        return
    raise TensorError(f"{op}: shapes {a.shape} and {b.shape} are not scalar-broadcastable")


def _reduce_to(grad: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to a scalar operand's shape."""
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    return _result(
        "add",
        a.values + b.values,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)
    return _result(
        "sub",
        a.values - b.values,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)
    av, bv = a.values, b.values
    return _result(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("div", a, b)
    av, bv = a.values, b.values
    if np.any(bv == 0.0):
        raise TensorError("div: division by exact zero")
    inv = 1.0 / bv
    return _result(
        "div",
        av * inv,
        (a, b),
        lambda g: (_reduce_to(g * inv, a.shape), _reduce_to(-g * av * inv * inv, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result("neg", -a.values, (a,), lambda g: (-g,))


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    av = a.values
    return _result(
        "pow_scalar",
        av**p,
        (a,),
        lambda g: (g * p * av ** (p - 1.0),),
    )


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0.0
    return _result("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid_values(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_values(np.atleast_1d(a.values)).reshape(a.shape)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _softplus_values(x: Array) -> Array:
    # overflow-safe branch: for x > 20, softplus(x) == x to double precision
    return np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    out = _softplus_values(av)
    sig = _sigmoid_values(np.atleast_1d(av)).reshape(a.shape)
    return _result("softplus", out, (a,), lambda g: (g * sig,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    bad = av <= 0.0
    if np.any(bad):
        idx = tuple(int(i[0]) for i in np.nonzero(bad)) if av.ndim else ()
        raise TensorError(f"log: non-positive value {av[bad].flat[0]!r} at index {idx}")
    return _result("log", np.log(av), (a,), lambda g: (g / av,))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus, "exp": exp, "log": log}


def activation(kind: str, a) -> Tensor:
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise TensorError(f"unknown activation kind {kind!r}") from None


# ---------------------------------------------------------------------------
# Clamp and detach
# ---------------------------------------------------------------------------


def clamp(a, lo: float, hi: float) -> Tensor:
    """Limit values to [lo, hi]; gradient is 1 strictly inside, 0 elsewhere."""
    a = _as_tensor(a)
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise TensorError(f"clamp: lo ({lo}) > hi ({hi})")
    av = a.values
    interior = (av > lo) & (av < hi)
    return _result("clamp", np.clip(av, lo, hi), (a,), lambda g: (g * interior,))


def detach(a) -> Tensor:
    """Value-identical tensor with no tape node; absorbs all gradient."""
    a = _as_tensor(a)
    return Tensor(a.values.copy())


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def take_row(a, index: int) -> Tensor:
    """Select a[index] along the leading axis; gradient scatters back."""
    a = _as_tensor(a)
    index = int(index)
    if a.values.ndim < 1 or not (0 <= index < a.shape[0]):
        raise TensorError(f"take_row: index {index} invalid for shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return (full,)

    return _result("take_row", a.values[index].copy(), (a,), vjp)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    shape0 = ts[0].shape
    for t in ts:
        if t.shape != shape0:
            raise TensorError(f"stack_rows: shapes {shape0} and {t.shape} differ")
    values = np.stack([t.values for t in ts], axis=0)
    return _result("stack_rows", values, tuple(ts), lambda g: tuple(g[i] for i in range(len(ts))))


def take_channel(a, index: int) -> Tensor:
    """Select ``a[..., index, :, :]`` along the channel axis (-3), dropping it."""
    a = _as_tensor(a)
    index = int(index)
    if a.values.ndim < 3 or not (0 <= index < a.values.shape[-3]):
        raise TensorError(f"take_channel: index {index} invalid for shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.values)
        full[..., index, :, :] = g
        return (full,)

    return _result("take_channel", np.ascontiguousarray(a.values[..., index, :, :]), (a,), vjp)


def stack_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack [..., H, W] tensors along a new channel axis at position -3."""
    ts = [_as_tensor(t) for t in tensors]
    shape0 = ts[0].shape
    for t in ts:
        if t.shape != shape0:
            raise TensorError(f"stack_channels: shapes {shape0} and {t.shape} differ")
    values = np.stack([t.values for t in ts], axis=-3)
    return _result(
        "stack_channels",
        values,
        tuple(ts),
        lambda g: tuple(np.ascontiguousarray(np.take(g, i, axis=-3)) for i in range(len(ts))),
    )


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [..., C_i, H, W] tensors along the channel axis (-3)."""
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.values.shape[-3] for t in ts]
    values = np.concatenate([t.values for t in ts], axis=-3)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for i in range(len(ts)):
            idx[-3] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(grads)

    return _result("concat_channels", values, tuple(ts), vjp)


# ---------------------------------------------------------------------------
# Convolution (stride 1, same padding, k in {1, 3})
# ---------------------------------------------------------------------------


def _shift_blocks(x: Array, k: int, pad: int) -> Array:
    """[N,C,H,W] -> offset-major [N, k*k*C, H*W] blocks (zero same-padding).

    Block ``di*k+dj`` holds the padded input shifted by that kernel offset, so
    a single batched GEMM against the flattened kernel computes the whole
    cross-correlation without an expensive window gather.
    """
    n, c, h, w = x.shape
    if k == 1:
        return np.ascontiguousarray(x).reshape(n, c, h * w)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    blocks = np.empty((n, k * k * c, h * w))
    b5 = blocks.reshape(n, k * k, c, h, w)
    for di in range(k):
        for dj in range(k):
            b5[:, di * k + dj] = xp[:, :, di : di + h, dj : dj + w]
    return blocks


def _flatten_kernel(w: Array) -> Array:
    """[Co,Ci,k,k] -> [Co, k*k*Ci] matching the offset-major block layout."""
    co, ci, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(co, k * k * ci)


def _conv_raw(x: Array, w: Array) -> Array:
    """Cross-correlation of [N,C,H,W] with [Co,C,k,k], same padding, no bias."""
    n, _, h, wd = x.shape
    co, _, k, _ = w.shape
    blocks = _shift_blocks(x, k, (k - 1) // 2)
    return np.matmul(_flatten_kernel(w), blocks).reshape(n, co, h, wd)


def conv2d(inp, weight, bias, padding: int) -> Tensor:
    """2-D cross-correlation with same padding.

    ``inp`` is [C,H,W] or batched [N,C,H,W]; ``weight`` is [Co,Ci,k,k] with
    k in {1,3} and ``padding == (k-1)//2``; ``bias`` is [Co].
    """
    inp, weight, bias = _as_tensor(inp), _as_tensor(weight), _as_tensor(bias)
    squeeze = inp.values.ndim == 3
    x = inp.values[None] if squeeze else inp.values
    if x.ndim != 4:
        raise TensorError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {inp.shape}")
    wv = weight.values
    if wv.ndim != 4:
        raise TensorError(f"conv2d: weight must be [Co,Ci,k,k], got {weight.shape}")
    co, ci, k, k2 = wv.shape
    if k != k2 or k not in (1, 3):
        raise TensorError(f"conv2d: kernel must be square with k in {{1,3}}, got {k}x{k2}")
    if padding != (k - 1) // 2:
        raise TensorError(f"conv2d: padding must be {(k - 1) // 2} for k={k}, got {padding}")
    if x.shape[1] != ci:
        raise TensorError(f"conv2d: input has {x.shape[1]} channels, weight expects {ci}")
    if bias.shape != (co,):
        raise TensorError(f"conv2d: bias shape {bias.shape} != ({co},)")

    n, _, h, w = x.shape
    blocks = _shift_blocks(x, k, padding)
    out = np.matmul(_flatten_kernel(wv), blocks)
    out += bias.values[:, None]
    out = out.reshape(n, co, h, w)
    if squeeze:
        out = out[0]

    def vjp(g):
        g3 = (g[None] if squeeze else g).reshape(n, co, h * w)
        d_b = g3.sum(axis=(0, 2))
        d_wflat = np.matmul(g3, blocks.transpose(0, 2, 1)).sum(axis=0)
        d_w = np.ascontiguousarray(
            d_wflat.reshape(co, k, k, ci).transpose(0, 3, 1, 2)
        )
        # input grad: correlate with the spatially flipped, channel-transposed kernel
        w_t = np.ascontiguousarray(wv.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        d_x = _conv_raw((g[None] if squeeze else g), w_t)
        return (d_x[0] if squeeze else d_x, d_w, d_b)

    return _result("conv2d", out, (inp, weight, bias), vjp)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size
    return _result(
        "mean",
        np.asarray(a.values.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy() if a.shape else g / n,),
    )


def masked_mean_sq(a, b, mask) -> Tensor:
    """sum(mask * (a - b)^2) / sum(mask); zero tensor when the mask is empty."""
    a, b = _as_tensor(a), _as_tensor(b)
    mv = mask.values if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if not (a.shape == b.shape == mv.shape):
        raise TensorError(f"masked_mean_sq: shapes {a.shape}, {b.shape}, {mv.shape} differ")
    denom = mv.sum()
    if denom == 0.0:
        logger.debug("masked_mean_sq: no labels in batch, returning zero loss")
        return Tensor(np.asarray(0.0))
    diff = a.values - b.values
    value = np.asarray((mv * diff * diff).sum() / denom)

    def vjp(g):
        base = g * 2.0 * mv * diff / denom
        return (base, -base)

    return _result("masked_mean_sq", value, (a, b), vjp)


def bce(p, r) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against targets ``r``."""
    p = _as_tensor(p)
    rv = r.values if isinstance(r, Tensor) else np.asarray(r, dtype=np.float64)
    if p.shape != rv.shape:
        raise TensorError(f"bce: shapes {p.shape} and {rv.shape} differ")
    pv = p.values
    if np.any(pv <= 0.0) or np.any(pv >= 1.0):
        raise TensorError("bce: probabilities must lie strictly inside (0,1); clamp first")
    n = pv.size
    value = np.asarray(-(rv * np.log(pv) + (1.0 - rv) * np.log1p(-pv)).mean())
    return _result("bce", value, (p,), lambda g: (g * (pv - rv) / (pv * (1.0 - pv)) / n,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "pow_scalar": pow_scalar}


def elementwise(kind: str, a, b) -> Tensor:
    try:
        return _ELEMENTWISE[kind](a, b)
    except KeyError:
        raise TensorError(f"unknown elementwise kind {kind!r}") from None


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class FdReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_err: float = 0.0
    worst: tuple[str, tuple] | None = None
    n_checked: int = 0
    skipped: list = field(default_factory=list)  # (name, index, reason)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def finite_difference_check(
    f: Callable[[dict], Tensor],
    params: dict[str, Array],
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_coords_per_block: int | None = None,
) -> FdReport:
    """Compare tape gradients of ``f`` with central finite differences.

    ``f`` maps a dict of named tensors to a scalar tensor and must be
    deterministic.  Coordinates straddling a clamp/relu kink are detected by
    disagreement of the two one-sided differences and excluded from the
    comparison (listed in the report).  ``max_coords_per_block`` caps how many
    coordinates per parameter block are probed (all when None).
    """
    if eps <= 0:
        raise TensorError("finite_difference_check: eps must be positive")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    with tape:
        pt = {k: tape.watch(v) for k, v in params.items()}
        loss = f(pt)
    if not np.isfinite(loss.values).all():
        raise TensorError("finite_difference_check: f returned a non-finite value")
    tape.backward(loss)
    grads = {k: tape.grad(t) for k, t in pt.items()}

    def eval_at(theta: dict[str, Array]) -> float:
        out = f({k: Tensor(v) for k, v in theta.items()})
        if not np.isfinite(out.values).all():
            raise TensorError("finite_difference_check: f returned a non-finite value")
        return float(out.values)

    f0 = eval_at(params)
    report = FdReport()
    for name, base in params.items():
        flat_indices = list(np.ndindex(base.shape)) if base.shape else [()]
        if max_coords_per_block is not None and len(flat_indices) > max_coords_per_block:
            if rng is None:
                rng = np.random.default_rng(0)
            chosen = rng.choice(len(flat_indices), size=max_coords_per_block, replace=False)
            flat_indices = [flat_indices[i] for i in sorted(chosen)]
        for idx in flat_indices:
            theta = dict(params)
            pert = base.copy()
            pert[idx] += eps
            theta[name] = pert
            f_plus = eval_at(theta)
            pert = base.copy()
            pert[idx] -= eps
            theta[name] = pert
            f_minus = eval_at(theta)

            d_fwd = (f_plus - f0) / eps
            d_bwd = (f0 - f_minus) / eps
            if abs(d_fwd - d_bwd) > 0.03 * max(abs(d_fwd), abs(d_bwd), 1e-8):
                report.skipped.append((name, idx, "kink"))
                continue
            fd = (f_plus - f_minus) / (2.0 * eps)
            g = grads[name][idx] if base.shape else float(grads[name])
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-6)
            report.n_checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (name, idx)
    return report
