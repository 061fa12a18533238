"""Temporal-Aware Delta Network layer.

Pipeline per layer: temporal decay of each event relative to the prediction
time, a gate mixing a learned recency-scaled gate with a static
mean-similarity gate, gated fusion of the features with their deviation from
the running mean, and a gated delta-rule recurrence over a ``d x d`` state
per head::

    S_t = S_{t-1} (I - g_t b_t k_t k_t^T) + b_t v_t k_t^T,    o_t = S_t q_t

:func:`delta_rule_closed_form` evaluates the unrolled sum with explicit
decay-mask products and exists only to check :func:`delta_rule_scan`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LinearLayer, layer_norm, merge_heads, split_heads
from .tensor import Tensor, _unbroadcast, apply_op, as_tensor, recording, register_vjp


@dataclass
class TadnLayerParams:
    norm_gain: Tensor
    norm_shift: Tensor
    gate_proj: LinearLayer  # [2d -> d]
    gate_scalar_proj: LinearLayer  # [d -> 1]
    q_proj: LinearLayer
    k_proj: LinearLayer
    v_proj: LinearLayer
    beta_proj: LinearLayer  # [d -> 1]
    out_proj: LinearLayer
    n_heads: int = 1
    alpha: float = 0.5
    decay_period: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.decay_period > 0:
            raise ValueError(f"decay period must be positive, got {self.decay_period}")

    @property
    def d_model(self) -> int:
        return self.q_proj.weight.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {"norm.gain": self.norm_gain, "norm.shift": self.norm_shift}
        for name in ("gate_proj", "gate_scalar_proj", "q_proj", "k_proj", "v_proj", "beta_proj", "out_proj"):
            for k, t in getattr(self, name).tensors().items():
                out[f"{name}.{k}"] = t
        return out


@dataclass
class GateComponents:
    tau: Tensor  # [..., L]
    delta_h: Tensor  # [..., L, d]
    h_bar: Tensor  # [..., L, d]
    g_static: Tensor  # [..., L]
    g_vec: Tensor  # [..., L, d]
    g_scalar: Tensor  # [..., L]


def init_tadn_params(rng: np.random.Generator, d: int, n_heads: int = 1, alpha: float = 0.5,
                     decay_period: float = 1.0, scale: float | None = None) -> TadnLayerParams:
    s = 1.0 / np.sqrt(d) if scale is None else scale

    def lin(d_in, d_out):
        return LinearLayer(Tensor(rng.uniform(-s, s, (d_in, d_out)), requires_grad=True),
                           Tensor(rng.uniform(-s, s, d_out), requires_grad=True))

    return TadnLayerParams(
        norm_gain=Tensor(np.ones(d), requires_grad=True),
        norm_shift=Tensor(np.zeros(d), requires_grad=True),
        gate_proj=lin(2 * d, d),
        gate_scalar_proj=lin(d, 1),
        q_proj=lin(d, d),
        k_proj=lin(d, d),
        v_proj=lin(d, d),
        beta_proj=lin(d, 1),
        out_proj=lin(d, d),
        n_heads=n_heads,
        alpha=alpha,
        decay_period=decay_period,
    )


# ---------------------------------------------------------------------------
# decay, gates, fusion


def compute_temporal_decay(event_times, current_time, period: float, mask=None) -> Tensor:
    """``exp(-(current_time - event_time) / period)`` per event.

    ``current_time`` is a scalar or has the leading (batch) shape of
    ``event_times``. Masked-out positions are ignored by the elapsed-time
    check and receive a decay of 1.
    """
    if not period > 0:
        raise ValueError(f"decay period must be positive, got {period}")
    times = np.asarray(event_times.data if isinstance(event_times, Tensor) else event_times, dtype=np.float64)
    now = np.asarray(current_time, dtype=np.float64)[..., None]
    elapsed = now - times
    if mask is not None:
        elapsed = np.where(np.asarray(mask, dtype=bool), elapsed, 0.0)
    if (elapsed < 0).any():
        raise ValueError("event timestamp later than the prediction time")
    return Tensor(np.exp(-elapsed / period))


def compute_gates(h, tau, params: TadnLayerParams, mask=None) -> GateComponents:
    h = as_tensor(h)
    tau = as_tensor(tau)
    d = h.shape[-1]
    if tau.shape != h.shape[:-1]:
        raise ValueError(f"tau shape {tau.shape} does not match features {h.shape}")
    alpha = params.alpha
    h_bar = T.causal_mean(h, mask)
    delta = T.sub(h, h_bar)
    sim = T.mul(T.sum(T.mul(h, h_bar), axis=-1), 1.0 / np.sqrt(d))
    g_static = T.sigmoid(sim)
    learned_vec = T.mul(T.sigmoid(params.gate_proj(T.concat([h, delta], axis=-1))), tau.data[..., None])
    g_vec = T.add(T.mul(learned_vec, alpha), T.mul(T.reshape(g_static, g_static.shape + (1,)), 1.0 - alpha))
    learned_scalar = T.reshape(T.sigmoid(params.gate_scalar_proj(h)), h.shape[:-1])
    g_scalar = T.add(T.mul(T.mul(learned_scalar, tau.data), alpha), T.mul(g_static, 1.0 - alpha))
    return GateComponents(tau, delta, h_bar, g_static, g_vec, g_scalar)


def fuse_features(h, gates: GateComponents) -> Tensor:
    """Per-coordinate convex mix ``g * delta_h + (1 - g) * h``."""
    h = as_tensor(h)
    g = gates.g_vec
    if g.shape != h.shape or gates.delta_h.shape != h.shape:
        raise ValueError("fuse_features: gate / feature shape mismatch")
    return T.add(T.mul(g, gates.delta_h), T.mul(T.sub(1.0, g), h))


# ---------------------------------------------------------------------------
# delta-rule kernels


def _scan_forward(q, k, v, beta, gate, keep_states: bool):
    lead, L = q.shape[:-2], q.shape[-2]
    dk, dv = k.shape[-1], v.shape[-1]
    S = np.zeros(lead + (dv, dk))
    out = np.empty(lead + (L, dv))
    states = np.empty((L + 1,) + S.shape) if keep_states else None
    c = gate * beta
    for t in range(L):
        kt = k[..., t, :]
        if keep_states:
            states[t] = S
        Sk = np.matmul(S, kt[..., None])[..., 0]
        upd = beta[..., t, None] * v[..., t, :] - c[..., t, None] * Sk
        S = S + upd[..., :, None] * kt[..., None, :]
        out[..., t, :] = np.matmul(S, q[..., t, :, None])[..., 0]
    if keep_states:
        states[L] = S
    return out, states


def delta_rule_scan(q, k, v, beta, gate) -> Tensor:
    """Left-to-right gated delta rule; O(L d^2) per head.

    ``q, k, v``: ``[..., L, d]``; ``beta, gate``: broadcastable to ``[..., L]``.
    Keys are expected to be unit-norm; the kernel does not normalise them.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    beta, gate = as_tensor(beta), as_tensor(gate)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"delta_rule_scan shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    full = q.shape[:-1]
    b = np.broadcast_to(beta.data, full)
    g = np.broadcast_to(gate.data, full)
    keep = recording(q, k, v, beta, gate)
    out, states = _scan_forward(q.data, k.data, v.data, b, g, keep)
    saved = (q.data, k.data, v.data, b, g, states, beta.shape, gate.shape)
    return apply_op("delta_rule_scan", out, (q, k, v, beta, gate), saved)


@register_vjp("delta_rule_scan")
def _delta_rule_scan_vjp(saved, dout):
    # Reverse-time adjoint: G_t = dL/dS_t accumulates dO_t q_t^T and is carried
    # back through the erase factor, G_{t-1} <- G_t (I - c_t k_t k_t^T).
    q, k, v, beta, gate, states, beta_shape, gate_shape = saved
    L = q.shape[-2]
    c = gate * beta
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    dbeta = np.empty(beta.shape)
    dc = np.empty(beta.shape)
    G = np.zeros(states.shape[1:])
    for t in range(L - 1, -1, -1):
        kt, qt, vt = k[..., t, :], q[..., t, :], v[..., t, :]
        S_prev, S_t = states[t], states[t + 1]
        do = dout[..., t, :]
        dq[..., t, :] = np.matmul(np.swapaxes(S_t, -1, -2), do[..., None])[..., 0]
        G = G + do[..., :, None] * qt[..., None, :]
        Gk = np.matmul(G, kt[..., None])[..., 0]
        Spk = np.matmul(S_prev, kt[..., None])[..., 0]
        bt, ct = beta[..., t], c[..., t]
        dbeta[..., t] = np.sum(vt * Gk, axis=-1)
        dv[..., t, :] = bt[..., None] * Gk
        GTv = np.matmul(np.swapaxes(G, -1, -2), vt[..., None])[..., 0]
        SpTGk = np.matmul(np.swapaxes(S_prev, -1, -2), Gk[..., None])[..., 0]
        GTSpk = np.matmul(np.swapaxes(G, -1, -2), Spk[..., None])[..., 0]
        dk[..., t, :] = bt[..., None] * GTv - ct[..., None] * (SpTGk + GTSpk)
        dc[..., t] = -np.sum(Gk * Spk, axis=-1)
        G = G - ct[..., None, None] * Gk[..., :, None] * kt[..., None, :]
    dgate = dc * beta
    dbeta = dbeta + dc * gate
    return dq, dk, dv, _unbroadcast(dbeta, beta_shape), _unbroadcast(dgate, gate_shape)


def delta_rule_states(q, k, v, beta, gate) -> np.ndarray:
    """All states ``S_0 .. S_L`` (``[L+1, ..., d_v, d_k]``) for inspection."""
    q, k, v = (np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in (q, k, v))
    full = q.shape[:-1]
    b = np.broadcast_to(np.asarray(beta.data if isinstance(beta, Tensor) else beta, dtype=np.float64), full)
    g = np.broadcast_to(np.asarray(gate.data if isinstance(gate, Tensor) else gate, dtype=np.float64), full)
    return _scan_forward(q, k, v, b, g, True)[1]


def delta_rule_closed_form(q, k, v, beta, gate) -> np.ndarray:
    """Unrolled evaluation with explicit decay masks (verification only).

    ``o_t = sum_{i<=t} beta_i v_i k_i^T D(t, i) q_t`` where
    ``D(t, i) = A_{i+1} ... A_t`` and ``A_j = I - gate_j beta_j k_j k_j^T``.
    Each mask is built by explicit ``d x d`` products, O(L^2 d^3) per head.
    """
    q, k, v = (np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in (q, k, v))
    full = q.shape[:-1]
    b = np.broadcast_to(np.asarray(beta.data if isinstance(beta, Tensor) else beta, dtype=np.float64), full)
    g = np.broadcast_to(np.asarray(gate.data if isinstance(gate, Tensor) else gate, dtype=np.float64), full)
    lead, L, dk = q.shape[:-2], q.shape[-2], q.shape[-1]
    out = np.zeros(lead + (L, v.shape[-1]))
    eye = np.eye(dk)
    for idx in np.ndindex(*lead):
        qq, kk, vv, bb, gg = q[idx], k[idx], v[idx], b[idx], g[idx]
        for t in range(L):
            D = eye.copy()  # D(t, t): empty product
            acc = np.zeros(v.shape[-1])
            for i in range(t, -1, -1):
                write = bb[i] * np.outer(vv[i], kk[i])
                acc += write @ (D @ qq[t])
                erase = eye - gg[i] * bb[i] * np.outer(kk[i], kk[i])
                D = erase @ D  # D(t, i-1) = A_i D(t, i)
            out[idx + (t,)] = acc
    return out


# ---------------------------------------------------------------------------
# layer-level composition


def _scan_inputs(h_fused, gates: GateComponents, params: TadnLayerParams, mask=None):
    h_fused = as_tensor(h_fused)
    lead, L = h_fused.shape[:-2], h_fused.shape[-2]
    if gates.g_scalar.shape != h_fused.shape[:-1]:
        raise ValueError("tadn_scan: gate / feature shape mismatch")
    H = params.n_heads
    q = split_heads(params.q_proj(h_fused), H)
    k = T.l2_normalize(split_heads(params.k_proj(h_fused), H))
    v = split_heads(params.v_proj(h_fused), H)
    beta = T.reshape(T.sigmoid(params.beta_proj(h_fused)), lead + (L,))
    if mask is not None:
        beta = T.mul(beta, np.asarray(mask, dtype=np.float64))
    beta = T.reshape(beta, lead + (1, L))
    gate = T.reshape(gates.g_scalar, lead + (1, L))
    return q, k, v, beta, gate


def tadn_scan(h_fused, gates: GateComponents, params: TadnLayerParams, mask=None) -> Tensor:
    """Project fused features to q/k/v/beta, run the recurrence per head, merge and project."""
    q, k, v, beta, gate = _scan_inputs(h_fused, gates, params, mask)
    o = delta_rule_scan(q, k, v, beta, gate)
    return params.out_proj(merge_heads(o))


def tadn_closed_form(h_fused, gates: GateComponents, params: TadnLayerParams, mask=None) -> Tensor:
    """Same contract as :func:`tadn_scan`, evaluated through the unrolled sum."""
    q, k, v, beta, gate = _scan_inputs(h_fused, gates, params, mask)
    o = delta_rule_closed_form(q, k, v, beta, gate)
    return params.out_proj(merge_heads(Tensor(o)))


def tadn_layer_forward(h, event_times, current_time, params: TadnLayerParams, mask=None) -> Tensor:
    """Pre-norm residual TADN block: ``h + scan(fuse(norm(h), gates))``."""
    h = as_tensor(h)
    x = layer_norm(h, params.norm_gain, params.norm_shift)
    tau = compute_temporal_decay(event_times, current_time, params.decay_period, mask)
    if mask is not None:
        tau = Tensor(np.where(np.asarray(mask, dtype=bool), tau.data, 0.0))
    gates = compute_gates(x, tau, params, mask)
    fused = fuse_features(x, gates)
    return T.add(h, tadn_scan(fused, gates, params, mask))
