"""Mask-aware building blocks: operations that provably never read
defective input positions.

Masks are plain numpy arrays with values in {0, 1}; 1 marks a defective
position. Spatial masks are shared across channels. Every op here is a
composition of the differentiable primitives in :mod:`dfvq.tensor`, so
gradients come from the tape and are exactly zero with respect to
defective inputs.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    conv2d,
    conv2d_raw,
    div,
    masked_softmax,
    matmul,
    mul,
    nearest_upsample,
    reshape,
    sqrt,
    sub,
    tensor_sum,
    transpose,
)

__all__ = [
    "MaskError",
    "DegenerateMaskError",
    "validate_mask",
    "df_norm",
    "df_conv2d",
    "df_attention",
    "masked_attention",
    "mask_downsample",
    "build_mask_pyramid",
    "nearest_upsample",
]


class MaskError(ValueError):
    """Mask is non-binary or does not match the governed tensor."""


class DegenerateMaskError(MaskError):
    """Fewer than 2 valid elements in a normalization group."""


def validate_mask(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise MaskError(f"mask values must be exactly 0 or 1, got {vals[:8]}")
    return m


# ---------------------------------------------------------------------------
# Relative-estimation normalization


def _norm_groups(x: Tensor, m: np.ndarray, groups: int):
    """View x and the broadcast mask as (batch, group, elements)."""
    if x.ndim == 4:
        n, c, h, w = x.shape
        if m.shape != (n, h, w):
            raise MaskError(f"mask shape {m.shape} does not match NCHW input {x.shape}")
        if c % groups:
            raise ShapeError(f"channels {c} not divisible by {groups} groups")
        xg = reshape(x, (n, groups, (c // groups) * h * w))
        mg = np.broadcast_to(m[:, None], (n, c, h, w)).reshape(n, groups, (c // groups) * h * w)
        return xg, mg, x.shape
    if groups != 1:
        raise ShapeError("groups > 1 only applies to NCHW inputs")
    if m.shape != x.shape:
        raise MaskError(f"mask shape {m.shape} does not match input {x.shape}")
    xg = reshape(x, (1, 1, x.size))
    mg = m.reshape(1, 1, x.size)
    return xg, mg, x.shape


def df_norm(x, m: np.ndarray, eps: float = 1e-5, groups: int = 1) -> Tensor:
    """Normalization from statistics of the non-defective subset only.

    Defective entries are zero-filled, the mean is re-scaled by N/N_m, the
    variance is computed from the mean-filled tensor and re-scaled by
    (N-1)/(N_m-1), where N_m counts valid elements. Valid outputs equal the
    valid subset normalized by its own sample statistics; defective outputs
    are written as 0.
    """
    x = as_tensor(x)
    m = validate_mask(m)
    xg, mg, orig_shape = _norm_groups(x, m, groups)
    valid = 1.0 - mg
    n_elem = float(xg.shape[-1])
    n_valid = valid.sum(axis=-1, keepdims=True)
    if np.any(n_valid < 2):
        raise DegenerateMaskError(
            f"normalization group has fewer than 2 valid elements (min {int(n_valid.min())})"
        )

    x_zf = mul(xg, valid)
    mean_zf = mul(tensor_sum(x_zf, axis=-1, keepdims=True), 1.0 / n_elem)
    mu = mul(mean_zf, n_elem / n_valid)

    x_fill = add(x_zf, mul(mu, mg))  # defective entries set to mu
    mean_fill = mul(tensor_sum(x_fill, axis=-1, keepdims=True), 1.0 / n_elem)
    centered = sub(x_fill, mean_fill)
    sample_var = mul(tensor_sum(mul(centered, centered), axis=-1, keepdims=True), 1.0 / (n_elem - 1.0))
    var = mul(sample_var, (n_elem - 1.0) / (n_valid - 1.0))

    out = mul(div(sub(xg, mu), add(sqrt(var), eps)), valid)
    return reshape(out, orig_shape)


# ---------------------------------------------------------------------------
# Partial convolution


def df_conv2d(x, m: np.ndarray, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution over valid taps only, rescaled by K_total / K_valid.

    K_total counts in-bounds kernel taps at each output position, K_valid the
    in-bounds taps landing on non-defective pixels. Windows with zero valid
    taps output the bias alone. With an empty mask this is bitwise identical
    to :func:`dfvq.tensor.conv2d`.
    """
    x = as_tensor(x)
    m = validate_mask(m)
    if x.ndim != 4:
        raise ShapeError(f"df_conv2d expects NCHW input, got {x.shape}")
    n, _, h, w = x.shape
    if m.shape != (n, h, w):
        raise MaskError(f"mask shape {m.shape} does not match NCHW input {x.shape}")
    weight = as_tensor(weight)
    kh, kw = weight.shape[2], weight.shape[3]

    valid = (1.0 - m)[:, None]  # [N,1,H,W]
    ones_k = np.ones((1, 1, kh, kw))
    k_valid = conv2d_raw(valid, ones_k, stride, padding)
    k_total = conv2d_raw(np.ones((1, 1, h, w)), ones_k, stride, padding)
    with np.errstate(divide="ignore"):
        scale = np.where(k_valid > 0, k_total / np.maximum(k_valid, 1.0), 0.0)

    masked_in = mul(x, valid)
    raw = conv2d(masked_in, weight, None, stride, padding)
    out = mul(raw, scale)
    if bias is not None:
        b = as_tensor(bias)
        out = add(out, reshape(b, (1, b.shape[0], 1, 1)))
    return out


# ---------------------------------------------------------------------------
# Mask-aware attention


def masked_attention(q, k, v, key_allowed: np.ndarray) -> Tensor:
    """Scaled dot-product attention over allowed keys only.

    ``key_allowed`` broadcasts against the [..., Lq, Lk] logit array; rows
    with no allowed key produce zero vectors.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dk = q.shape[-1]
    logits = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), 1.0 / np.sqrt(dk))
    weights = masked_softmax(logits, key_allowed, axis=-1)
    return matmul(weights, v)


def df_attention(x, m: np.ndarray) -> Tensor:
    """Self-attention where defective positions are excluded as keys/values.

    ``x`` is [L, D] or [N, L, D]; ``m`` is the per-position mask of matching
    leading shape. Valid outputs depend only on valid positions; if every key
    is defective the output is the zero vector.
    """
    x = as_tensor(x)
    m = validate_mask(m)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        m = m.reshape(1, -1)
    if x.ndim != 3:
        raise ShapeError(f"df_attention expects [N, L, D] sequences, got {x.shape}")
    if m.shape != x.shape[:2]:
        raise MaskError(f"mask shape {m.shape} does not match sequence dims {x.shape[:2]}")

    allowed = (1.0 - m)[:, None, :]  # [N, 1, Lk], broadcast over queries
    out = masked_attention(x, x, x, allowed)
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# Mask evolution


def mask_downsample(m: np.ndarray, stride: int) -> np.ndarray:
    """Non-overlapping max pool with kernel == stride (any-defective rule)."""
    m = validate_mask(m)
    if stride < 1:
        raise MaskError(f"invalid stride {stride}")
    if m.ndim == 2:
        return mask_downsample(m[None], stride)[0]
    if m.ndim != 3:
        raise MaskError(f"mask must be [H, W] or [N, H, W], got shape {m.shape}")
    n, h, w = m.shape
    if h % stride or w % stride:
        raise MaskError(f"mask dims {h}x{w} not divisible by stride {stride}")
    return m.reshape(n, h // stride, stride, w // stride, stride).max(axis=(2, 4))


def build_mask_pyramid(m0: np.ndarray, strides) -> list[np.ndarray]:
    """Masks m_0 ... m_T, one max-pool step per downsampling stride."""
    levels = [validate_mask(m0)]
    for s in strides:
        levels.append(mask_downsample(levels[-1], s))
    return levels
