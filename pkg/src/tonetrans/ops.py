"""Differentiable operations over ``tensor.Tensor``.

Primitive ops define explicit forward/backward pairs; composites (attention,
transposed convolution) are built from primitives and inherit gradients.
Integer data (labels, ids) is passed as plain numpy arrays, not tensors.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

NEG_INF = -1e9  # additive mask value; finite to keep softmax rows well-defined


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fwd(ad, bd):
        return ad + bd

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(fwd(a.data, b.data), (a, b), "add", fwd, bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fwd(ad, bd):
        return ad - bd

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(fwd(a.data, b.data), (a, b), "sub", fwd, bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fwd(ad, bd):
        return ad * bd

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(fwd(a.data, b.data), (a, b), "mul", fwd, bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), "neg", lambda ad: -ad, lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return make_node(a.data * c, (a,), "scale", lambda ad: ad * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)

    def fwd(ad):
        return np.maximum(ad, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return make_node(fwd(a.data), (a,), "relu", fwd, bwd)


def absolute(a) -> Tensor:
    """|a|; subgradient 0 at exactly 0."""
    a = as_tensor(a)

    def fwd(ad):
        return np.abs(ad)

    def bwd(g):
        return (g * np.sign(a.data),)

    return make_node(fwd(a.data), (a,), "abs", fwd, bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / np.maximum(out_data, 1e-30),)

    return make_node(out_data, (a,), "sqrt", lambda ad: np.sqrt(ad), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out_data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return make_node(out_data, (a,), "reshape", lambda ad: ad.reshape(shape), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def fwd(ad):
        return np.swapaxes(ad, ax1, ax2)

    def bwd(g):
        return (np.swapaxes(g, ax1, ax2),)

    return make_node(fwd(a.data), (a,), "swapaxes", fwd, bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def fwd(ad):
        return ad[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return make_node(a.data[idx], (a,), "slice_axis", fwd, bwd)


def pad_axis(a, axis: int, total: int) -> Tensor:
    """Zero-pad at the end of one axis up to ``total`` entries."""
    a = as_tensor(a)
    cur = a.shape[axis]
    if total < cur:
        raise ShapeError(f"pad_axis: target {total} smaller than current {cur}")
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, total - cur)

    def fwd(ad):
        return np.pad(ad, widths)

    idx = [slice(None)] * a.ndim
    idx[axis] = slice(0, cur)
    idx = tuple(idx)

    def bwd(g):
        return (g[idx],)

    return make_node(fwd(a.data), (a,), "pad_axis", fwd, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def fwd(ad, bd):
        return np.matmul(ad, bd)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(fwd(a.data, b.data), (a, b), "matmul", fwd, bwd)


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table by integer index array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range for table of {table.shape[0]} rows"
        )

    def fwd(td):
        return td[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_node(fwd(table.data), (table,), "embedding_lookup", fwd, bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def fwd(ad):
        return np.asarray(ad.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.shape),)

    return make_node(fwd(a.data), (a,), "sum_all", fwd, bwd)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.size)


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def fwd(ad):
        return ad.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_node(fwd(a.data), (a,), "sum_axis", fwd, bwd)


# ---------------------------------------------------------------------------
# gradient routing


def stop_gradient(a) -> Tensor:
    """Identity forward; blocks all gradient flow to ancestors."""
    a = as_tensor(a)
    out = make_node(a.data, (a,), "stop_gradient", lambda ad: ad, lambda g: (None,))
    out.requires_grad = False
    return out


def straight_through(latent, quantized) -> Tensor:
    """Forward the quantized value; route the gradient to the latent.

    Realizes the straight-through estimator: downstream consumers see the
    quantized array bit-exactly, while the backward pass copies the output
    gradient onto ``latent`` and sends nothing to ``quantized``.
    """
    latent, quantized = as_tensor(latent), as_tensor(quantized)
    if latent.shape != quantized.shape:
        raise ShapeError(
            f"straight_through: shapes differ, {latent.shape} vs {quantized.shape}"
        )

    def fwd(_ld, qd):
        return qd

    def bwd(g):
        return g, None

    return make_node(quantized.data, (latent, quantized), "straight_through", fwd, bwd)


# ---------------------------------------------------------------------------
# normalization


def l2_normalize(v, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm.

    Vectors with norm below ``eps`` pass through unchanged (degenerate path:
    near-zero latents must not blow up to huge values or NaN).
    """
    v = as_tensor(v)
    norms = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    out_data = v.data / safe

    def fwd(vd):
        n = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
        return vd / np.where(n < eps, 1.0, n)

    def bwd(g):
        y = out_data
        gn = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(degenerate, g, gn),)

    return make_node(out_data, (v,), "l2_normalize", fwd, bwd)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def fwd(xd):
        m = xd.mean(axis=-1, keepdims=True)
        c = xd - m
        v = (c * c).mean(axis=-1, keepdims=True)
        return c / np.sqrt(v + eps)

    def bwd(g):
        # d xhat: project out the mean and the xhat direction
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = make_node(xhat, (x,), "layer_norm", fwd, bwd)
    if gain is not None:
        gain = as_tensor(gain)
        if gain.shape != (d,):
            raise ShapeError(f"layer_norm: gain shape {gain.shape} != ({d},)")
        out = mul(out, gain)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d,):
            raise ShapeError(f"layer_norm: bias shape {bias.shape} != ({d},)")
        out = add(out, bias)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def fwd(ad):
        s = ad - ad.max(axis=axis, keepdims=True)
        es = np.exp(s)
        return es / es.sum(axis=axis, keepdims=True)

    def bwd(g):
        y = out_data
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(out_data, (a,), "softmax", fwd, bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over positions, computed via log-sum-exp.

    ``logits``: (..., V); ``labels``: integer array of the leading shape;
    ``mask``: optional 0/1 array of the leading shape selecting positions
    that contribute to the mean (e.g. to exclude padding).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    vocab = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= vocab):
        raise ShapeError(f"cross_entropy: label outside [0, {vocab})")
    if mask is None:
        mask_arr = np.ones(labels.shape, dtype=logits.dtype)
    else:
        mask_arr = np.asarray(mask, dtype=logits.dtype)
        if mask_arr.shape != labels.shape:
            raise ShapeError(
                f"cross_entropy: mask shape {mask_arr.shape} != labels shape {labels.shape}"
            )
    count = float(mask_arr.sum())
    if count <= 0:
        raise ShapeError("cross_entropy: mask selects no positions")
    onehot_idx = np.expand_dims(labels, -1)

    def fwd(ld):
        m = ld.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(ld - m).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(ld, onehot_idx, axis=-1)
        per_pos = (lse - picked)[..., 0]
        return np.asarray((per_pos * mask_arr).sum() / count)

    m0 = logits.data.max(axis=-1, keepdims=True)
    e0 = np.exp(logits.data - m0)
    probs = e0 / e0.sum(axis=-1, keepdims=True)

    def bwd(g):
        gl = probs.copy()
        np.subtract.at(gl.reshape(-1, vocab), (np.arange(labels.size), labels.reshape(-1)), 1.0)
        gl *= (mask_arr / count)[..., None]
        return (gl * g,)

    return make_node(fwd(logits.data), (logits,), "cross_entropy", fwd, bwd)


def mean_abs_error(pred, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean |pred - target| over all entries; ``mask`` (leading shape, 0/1)
    restricts the mean to unmasked rows."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mean_abs_error: shapes differ, {pred.shape} vs {target.shape}")
    diff = absolute(sub(pred, target))
    if mask is None:
        return mean_all(diff)
    mask_arr = np.asarray(mask, dtype=pred.dtype)
    count = float(mask_arr.sum()) * pred.shape[-1]
    if count <= 0:
        raise ShapeError("mean_abs_error: mask selects no rows")
    return scale(sum_all(mul(diff, mask_arr[..., None])), 1.0 / count)


# ---------------------------------------------------------------------------
# structured composites


def conv_transpose_1d(x, kernel, stride: int) -> Tensor:
    """Non-overlapping transposed convolution: upsample a sequence by ``stride``.

    ``x``: (..., M, C_in); ``kernel``: (stride, C_in, C_out). Output position
    m*stride + j is x[m] @ kernel[j], giving exactly M*stride output rows.
    Kernel width is pinned to the stride, so the op is equivalently a
    projection of each input row to stride*C_out values followed by an
    unstack.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ShapeError(f"conv_transpose_1d: stride must be >= 1, got {stride}")
    if kernel.ndim != 3 or kernel.shape[0] != stride:
        raise ShapeError(
            f"conv_transpose_1d: kernel shape {kernel.shape} must be ({stride}, C_in, C_out)"
        )
    if x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ShapeError(
            f"conv_transpose_1d: input {x.shape} incompatible with kernel {kernel.shape}"
        )
    m = x.shape[-2]
    c_out = kernel.shape[2]
    flat = reshape(swapaxes(kernel, 0, 1), (kernel.shape[1], stride * c_out))
    y = matmul(x, flat)  # (..., M, stride*C_out)
    return reshape(y, x.shape[:-2] + (m * stride, c_out))


def multi_head_attention(
    q_in,
    kv_in,
    wq, bq, wk, bk, wv, bv, wo, bo,
    num_heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with ``num_heads`` heads.

    ``q_in``: (..., Tq, D); ``kv_in``: (..., Tk, D); weights are (D, D) with
    (D,) biases. ``mask`` is an additive array broadcastable to
    (..., heads, Tq, Tk); use ``NEG_INF`` entries to forbid attention edges
    (causal masking, padding).
    """
    q_in, kv_in = as_tensor(q_in), as_tensor(kv_in)
    d = q_in.shape[-1]
    if d % num_heads != 0:
        raise ShapeError(f"multi_head_attention: width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    tq, tk = q_in.shape[-2], kv_in.shape[-2]
    lead = q_in.shape[:-2]

    def split_heads(t, length):
        t = reshape(t, lead + (length, num_heads, dh))
        return swapaxes(t, -3, -2)  # (..., H, T, dh)

    q = split_heads(add(matmul(q_in, wq), bq), tq)
    k = split_heads(add(matmul(kv_in, wk), bk), tk)
    v = split_heads(add(matmul(kv_in, wv), bv), tk)

    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = add(scores, np.asarray(mask, dtype=q_in.dtype))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # (..., H, Tq, dh)
    ctx = reshape(swapaxes(ctx, -3, -2), lead + (tq, d))
    return add(matmul(ctx, wo), bo)
