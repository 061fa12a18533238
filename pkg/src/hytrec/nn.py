"""Layers and attention kernels shared by every model variant.

Kernels accept any number of leading batch dimensions in front of the
``[L, d]`` sequence/feature axes. Forward and backward passes of the
attention kernels are written out by hand and registered as tape
primitives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, apply_op, as_tensor, recording, register_vjp

LN_EPS = 1e-5
NORMALIZER_FLOOR = 1e-6
# upper bound on score-matrix elements materialised at once
_ATTN_CHUNK_ELEMS = 1 << 24


@dataclass
class LinearLayer:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor  # [d_out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"inconsistent linear shapes {self.weight.shape} / {self.bias.shape}")

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 1:
            row = T.matmul(T.reshape(x, (1, x.shape[0])), self.weight)
            return T.add(T.reshape(row, (self.weight.shape[1],)), self.bias)
        return T.add(T.matmul(x, self.weight), self.bias)

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class AttentionOutput:
    values: Tensor
    weights: Tensor | None = None  # detached; softmax path only


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1] or q.ndim < 2:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")


# ---------------------------------------------------------------------------
# layer norm


def layer_norm(x, gain, shift) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ValueError(f"layer_norm: affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return apply_op("layer_norm", xhat * gain.data + shift.data, (x, gain, shift), (xhat, rstd, gain.data))


@register_vjp("layer_norm")
def _layer_norm_vjp(saved, g):
    xhat, rstd, gain = saved
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead)
    dshift = g.sum(axis=lead)
    gx = g * gain
    dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dshift


# ---------------------------------------------------------------------------
# softmax attention


def _allowed(lq: int, key_mask: np.ndarray | None, causal: bool, lead: tuple[int, ...]) -> np.ndarray:
    allowed = np.ones((lq, lq), dtype=bool)
    if causal:
        allowed = np.tril(allowed)
    allowed = np.broadcast_to(allowed, lead + (lq, lq))
    if key_mask is not None:
        allowed = allowed & np.broadcast_to(key_mask, lead + (lq,))[..., None, :]
    return allowed


def _softmax_rows(s: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    s = np.where(allowed, s, -np.inf)
    mx = s.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    p = np.exp(s - mx)
    den = p.sum(axis=-1, keepdims=True)
    # rows with nothing to attend to (padding queries) get all-zero weights
    return np.divide(p, den, out=np.zeros_like(p), where=den > 0)


def softmax_attention(q, k, v, causal: bool = True, key_mask=None, return_weights: bool = False) -> AttentionOutput:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    ``key_mask`` (bool, broadcastable to ``[..., L]``) excludes keys, e.g.
    padding. Query rows left with no admissible key produce zeros.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    lead, L, d = q.shape[:-2], q.shape[-2], q.shape[-1]
    scale = 1.0 / np.sqrt(d)
    km = None if key_mask is None else np.asarray(key_mask, dtype=bool)
    keep = return_weights or recording(q, k, v)

    qf = q.data.reshape(-1, L, d)
    kf = k.data.reshape(-1, L, d)
    vf = v.data.reshape(-1, L, v.shape[-1])
    n = qf.shape[0]
    kmf = None if km is None else np.broadcast_to(km, lead + (L,)).reshape(n, L)
    out = np.empty(vf.shape)
    weights = np.empty((n, L, L)) if keep else None
    step = max(1, _ATTN_CHUNK_ELEMS // max(L * L, 1))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        s = np.matmul(qf[lo:hi], np.swapaxes(kf[lo:hi], -1, -2)) * scale
        allowed = _allowed(L, None if kmf is None else kmf[lo:hi], causal, (hi - lo,))
        p = _softmax_rows(s, allowed)
        out[lo:hi] = np.matmul(p, vf[lo:hi])
        if keep:
            weights[lo:hi] = p
    out = out.reshape(lead + (L, v.shape[-1]))
    if keep:
        weights = weights.reshape(lead + (L, L))
    values = apply_op("softmax_attention", out, (q, k, v), (q.data, k.data, v.data, weights, scale))
    return AttentionOutput(values, Tensor(weights) if return_weights else None)


@register_vjp("softmax_attention")
def _softmax_attention_vjp(saved, g):
    q, k, v, p, scale = saved
    dv = np.matmul(np.swapaxes(p, -1, -2), g)
    dp = np.matmul(g, np.swapaxes(v, -1, -2))
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = np.matmul(ds, k)
    dk = np.matmul(np.swapaxes(ds, -1, -2), q)
    return dq, dk, dv


# ---------------------------------------------------------------------------
# baseline (kernelised) linear attention


def linear_attention_baseline(q, k, v, causal: bool = True, key_mask=None) -> Tensor:
    """Normalised linear attention with the ``elu(x) + 1`` feature map.

    Causal output at ``t`` is ``phi(q_t)^T S_t / max(phi(q_t)^T z_t, 1e-6)`` with
    running sums ``S_t = sum_{i<=t} phi(k_i) v_i^T`` and ``z_t = sum_{i<=t} phi(k_i)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    fq = T.elu_plus_one(q)
    fk = T.elu_plus_one(k)
    if key_mask is not None:
        m = np.broadcast_to(np.asarray(key_mask, dtype=np.float64), k.shape[:-1])[..., None]
        fk = T.mul(fk, m)
    return _normalized_linear_attention(fq, fk, v, causal)


def _normalized_linear_attention(fq: Tensor, fk: Tensor, v: Tensor, causal: bool) -> Tensor:
    a, b, c = fq.data, fk.data, v.data
    kv = b[..., :, :, None] * c[..., :, None, :]  # [..., L, dk, dv]
    if causal:
        S = np.cumsum(kv, axis=-3)
        z = np.cumsum(b, axis=-2)
    else:
        S = np.broadcast_to(kv.sum(axis=-3, keepdims=True), kv.shape)
        z = np.broadcast_to(b.sum(axis=-2, keepdims=True), b.shape)
    num = np.einsum("...lk,...lkv->...lv", a, S)
    den_raw = np.sum(a * z, axis=-1, keepdims=True)
    den = np.maximum(den_raw, NORMALIZER_FLOOR)
    out = num / den
    saved = (a, b, c, S, z, num, den, den_raw > NORMALIZER_FLOOR, causal)
    return apply_op("linear_attention", out, (fq, fk, v), saved)


def _rev_cumsum(x: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(x, axis=axis), axis=axis), axis=axis)


@register_vjp("linear_attention")
def _linear_attention_vjp(saved, g):
    a, b, c, S, z, num, den, live, causal = saved
    dnum = g / den
    dden = np.where(live, -np.sum(g * num, axis=-1, keepdims=True) / (den * den), 0.0)
    da = np.einsum("...lkv,...lv->...lk", S, dnum) + dden * z
    dS = a[..., :, :, None] * dnum[..., :, None, :]
    dz = dden * a
    if causal:
        dS = _rev_cumsum(dS, axis=-3)
        dz = _rev_cumsum(dz, axis=-2)
    else:
        dS = np.broadcast_to(dS.sum(axis=-3, keepdims=True), dS.shape)
        dz = np.broadcast_to(dz.sum(axis=-2, keepdims=True), dz.shape)
    db = np.einsum("...lkv,...lv->...lk", dS, c) + dz
    dc = np.einsum("...lkv,...lk->...lv", dS, b)
    return da, db, dc


# ---------------------------------------------------------------------------
# multi-head plumbing


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``[..., L, d] -> [..., H, L, d/H]``."""
    *lead, L, d = x.shape
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    x = T.reshape(x, (*lead, L, n_heads, d // n_heads))
    nl = len(lead)
    axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return T.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """``[..., H, L, dh] -> [..., L, H*dh]``."""
    *lead, H, L, dh = x.shape
    nl = len(lead)
    axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return T.reshape(T.transpose(x, axes), (*lead, L, H * dh))
