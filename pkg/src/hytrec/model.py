"""HyTRec network: dual-branch next-item predictor.

The context before the prediction point is split into a long history
(processed by a hybrid stack of TADN and softmax layers) and a window of
the last ``K`` events (processed by causal multi-head self-attention with
learned positions). A sigmoid gate mixes the two branch summaries and the
tied item embedding table scores every item.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .nn import (
    LinearLayer,
    layer_norm,
    linear_attention_baseline,
    merge_heads,
    softmax_attention,
    split_heads,
)
from .tadn import TadnLayerParams, tadn_layer_forward
from .tensor import Tensor


class LayerKind(str, enum.Enum):
    LINEAR = "L"
    SOFTMAX = "S"


@dataclass(frozen=True)
class LayerSchedule:
    kinds: tuple[LayerKind, ...]

    def __len__(self) -> int:
        return len(self.kinds)

    def __str__(self) -> str:
        return "".join(k.value for k in self.kinds)

    @property
    def softmax_positions(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k is LayerKind.SOFTMAX]


def build_layer_schedule(n_layers: int, ratio: int) -> LayerSchedule:
    """``ratio`` linear layers per softmax layer, counted from the top.

    Every ``(ratio + 1)``-th layer from the last one is softmax, so the final
    layer always is.
    """
    if n_layers < 1 or ratio < 1:
        raise ValueError(f"need n_layers >= 1 and ratio >= 1, got {n_layers}, {ratio}")
    kinds = tuple(
        LayerKind.SOFTMAX if (n_layers - 1 - i) % (ratio + 1) == 0 else LayerKind.LINEAR
        for i in range(n_layers)
    )
    return LayerSchedule(kinds)


LONG_SCHEDULES = ("hybrid", "all_softmax", "all_linear")
LINEAR_KINDS = ("tadn", "baseline")


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    d_model: int = 64
    n_layers_long: int = 4
    hybrid_ratio: int = 3
    n_heads: int = 4
    short_window: int = 16
    n_layers_short: int = 1
    alpha: float = 0.5
    decay_period: float = 86400.0 * 7
    max_seq_len: int = 512
    ffn_hidden: int | None = None  # default 2 * d_model
    long_schedule: str = "hybrid"
    linear_kind: str = "tadn"
    use_short_branch: bool = True

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.hybrid_ratio < 1:
            raise ValueError("hybrid_ratio must be >= 1")
        if self.short_window < 1:
            raise ValueError("short_window must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers_long < 1 or self.n_layers_short < 0:
            raise ValueError("layer counts out of range")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.decay_period > 0:
            raise ValueError("decay_period must be positive")
        if self.long_schedule not in LONG_SCHEDULES:
            raise ValueError(f"long_schedule must be one of {LONG_SCHEDULES}")
        if self.linear_kind not in LINEAR_KINDS:
            raise ValueError(f"linear_kind must be one of {LINEAR_KINDS}")

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 2 * self.d_model

    def schedule(self) -> LayerSchedule:
        n = self.n_layers_long
        if self.long_schedule == "all_softmax":
            return LayerSchedule((LayerKind.SOFTMAX,) * n)
        if self.long_schedule == "all_linear":
            return LayerSchedule((LayerKind.LINEAR,) * n)
        return build_layer_schedule(n, self.hybrid_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    """Left-padded context windows, one prediction per row."""

    items: np.ndarray  # [B, L] int
    times: np.ndarray  # [B, L] float
    mask: np.ndarray  # [B, L] bool
    query_time: np.ndarray  # [B]
    target: np.ndarray  # [B] int

    def __len__(self) -> int:
        return len(self.target)


@dataclass
class HyTRecModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def schedule(self) -> LayerSchedule:
        return self.config.schedule()

    @property
    def item_embedding(self) -> Tensor:
        return self.params["item_embedding"]

    @property
    def position_embedding_short(self) -> Tensor | None:
        return self.params.get("short.position_embedding")

    def linear(self, prefix: str) -> LinearLayer:
        return LinearLayer(self.params[prefix + ".weight"], self.params[prefix + ".bias"])

    def norm(self, prefix: str) -> tuple[Tensor, Tensor]:
        return self.params[prefix + ".gain"], self.params[prefix + ".shift"]

    def tadn_params(self, i: int) -> TadnLayerParams:
        p = f"long.{i}.tadn"
        c = self.config
        return TadnLayerParams(
            *self.norm(p + ".norm"),
            gate_proj=self.linear(p + ".gate_proj"),
            gate_scalar_proj=self.linear(p + ".gate_scalar_proj"),
            q_proj=self.linear(p + ".q_proj"),
            k_proj=self.linear(p + ".k_proj"),
            v_proj=self.linear(p + ".v_proj"),
            beta_proj=self.linear(p + ".beta_proj"),
            out_proj=self.linear(p + ".out_proj"),
            n_heads=c.n_heads,
            alpha=c.alpha,
            decay_period=c.decay_period,
        )

    @property
    def long_layers(self) -> list[dict[str, Tensor]]:
        return [{k: v for k, v in self.params.items() if k.startswith(f"long.{i}.")}
                for i in range(self.config.n_layers_long)]

    @property
    def short_layers(self) -> list[dict[str, Tensor]]:
        return [{k: v for k, v in self.params.items() if k.startswith(f"short.{i}.")}
                for i in range(self.config.n_layers_short if self.config.use_short_branch else 0)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self, prefix: str = "") -> int:
        return int(sum(t.size for k, t in self.params.items() if k.startswith(prefix)))

    def copy(self) -> "HyTRecModel":
        return HyTRecModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# initialisation


def _layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) triples in a fixed order; init in {uniform, ones, zeros}."""
    d, f = config.d_model, config.ffn_width
    out: list[tuple[str, tuple[int, ...], str]] = [("item_embedding", (config.vocab_size, d), "uniform")]

    def lin(name, d_in, d_out):
        out.append((name + ".weight", (d_in, d_out), "uniform"))
        out.append((name + ".bias", (d_out,), "uniform"))

    def norm(name):
        out.append((name + ".gain", (d,), "ones"))
        out.append((name + ".shift", (d,), "zeros"))

    def attention(p):
        norm(p + ".norm")
        for nm in ("q_proj", "k_proj", "v_proj", "out_proj"):
            lin(f"{p}.{nm}", d, d)

    def ffn(p):
        norm(p + ".norm")
        lin(p + ".fc1", d, f)
        lin(p + ".fc2", f, d)

    for i, kind in enumerate(config.schedule().kinds):
        if kind is LayerKind.SOFTMAX:
            attention(f"long.{i}.attn")
        elif config.linear_kind == "tadn":
            p = f"long.{i}.tadn"
            norm(p + ".norm")
            lin(p + ".gate_proj", 2 * d, d)
            lin(p + ".gate_scalar_proj", d, 1)
            for nm in ("q_proj", "k_proj", "v_proj"):
                lin(f"{p}.{nm}", d, d)
            lin(p + ".beta_proj", d, 1)
            lin(p + ".out_proj", d, d)
        else:
            attention(f"long.{i}.linattn")
        ffn(f"long.{i}.ffn")
    norm("long.final_norm")
    if config.use_short_branch:
        out.append(("short.position_embedding", (config.short_window, d), "uniform"))
        for i in range(config.n_layers_short):
            attention(f"short.{i}.attn")
            ffn(f"short.{i}.ffn")
        norm("short.final_norm")
        lin("branch_gate", 2 * d, d)
    return out


def init_model(config: ModelConfig, seed: int = 0, init_scale: float | None = None) -> HyTRecModel:
    """Uniform(-s, s) weights with ``s = 1/sqrt(d_model)`` unless given; unit/zero norms."""
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(config.d_model) if init_scale is None else init_scale
    params: dict[str, Tensor] = {}
    for name, shape, how in _layer_shapes(config):
        if how == "uniform":
            data = rng.uniform(-s, s, shape)
        elif how == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return HyTRecModel(config, params)


def count_parameters(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for _, shape, _ in _layer_shapes(config)))


# ---------------------------------------------------------------------------
# blocks


def _attention_block(model: HyTRecModel, prefix: str, x: Tensor, mask: np.ndarray, linear: bool = False) -> Tensor:
    H = model.config.n_heads
    h = layer_norm(x, *model.norm(prefix + ".norm"))
    q = split_heads(model.linear(prefix + ".q_proj")(h), H)
    k = split_heads(model.linear(prefix + ".k_proj")(h), H)
    v = split_heads(model.linear(prefix + ".v_proj")(h), H)
    key_mask = mask[..., None, :]  # broadcast over heads
    if linear:
        o = linear_attention_baseline(q, k, v, causal=True, key_mask=key_mask)
    else:
        o = softmax_attention(q, k, v, causal=True, key_mask=key_mask).values
    return T.add(x, model.linear(prefix + ".out_proj")(merge_heads(o)))


def _ffn_block(model: HyTRecModel, prefix: str, x: Tensor) -> Tensor:
    h = layer_norm(x, *model.norm(prefix + ".norm"))
    return T.add(x, model.linear(prefix + ".fc2")(T.silu(model.linear(prefix + ".fc1")(h))))


def _embed(model: HyTRecModel, items: np.ndarray, mask: np.ndarray) -> Tensor:
    items = np.asarray(items, dtype=np.int64)
    if items.size and ((items[mask] < 0).any() or (items[mask] >= model.config.vocab_size).any()):
        raise IndexError(f"item id outside vocabulary of size {model.config.vocab_size}")
    safe = np.where(mask, items, 0)
    return T.mul(T.take(model.item_embedding, safe), mask[..., None].astype(np.float64))


def _last_position(x: Tensor) -> Tensor:
    return T.getitem(x, (Ellipsis, -1, slice(None)))


def long_branch_states(model: HyTRecModel, items, times, current_time, mask=None) -> Tensor:
    """Per-position hidden states of the long stack (before the final norm)."""
    items = np.asarray(items, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    mask = np.ones(items.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x = _embed(model, items, mask)
    c = model.config
    for i, kind in enumerate(model.schedule.kinds):
        if kind is LayerKind.SOFTMAX:
            x = _attention_block(model, f"long.{i}.attn", x, mask)
        elif c.linear_kind == "tadn":
            x = tadn_layer_forward(x, times, current_time, model.tadn_params(i), mask)
        else:
            x = _attention_block(model, f"long.{i}.linattn", x, mask, linear=True)
        x = _ffn_block(model, f"long.{i}.ffn", x)
    return x


def long_branch_forward(model: HyTRecModel, items, times, current_time, mask=None) -> Tensor:
    """Summary of the long history at its last position; zeros for an empty history.

    Accepts ``[L]`` or batched ``[B, L]`` inputs (batched rows left-padded).
    """
    items = np.asarray(items, dtype=np.int64)
    d = model.config.d_model
    lead = items.shape[:-1]
    if items.shape[-1] == 0:
        return Tensor(np.zeros(lead + (d,)))
    mask = np.ones(items.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x = long_branch_states(model, items, times, current_time, mask)
    x = layer_norm(x, *model.norm("long.final_norm"))
    has_any = mask.any(axis=-1).astype(np.float64)[..., None]
    return T.mul(_last_position(x), has_any)


def short_branch_forward(model: HyTRecModel, items, mask=None) -> Tensor:
    """Causal MHSA over the recent window; positions are right-aligned so the
    most recent event always sits at position ``K - 1``."""
    c = model.config
    if not c.use_short_branch:
        raise ValueError("model has no short branch")
    items = np.asarray(items, dtype=np.int64)
    Lw = items.shape[-1]
    if Lw > c.short_window:
        raise ValueError(f"short window of length {Lw} exceeds K={c.short_window}")
    if Lw == 0:
        raise ValueError("short branch needs at least one event")
    mask = np.ones(items.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pos = T.getitem(model.position_embedding_short, slice(c.short_window - Lw, c.short_window))
    x = T.mul(T.add(_embed(model, items, mask), pos), mask[..., None].astype(np.float64))
    for i in range(c.n_layers_short):
        x = _attention_block(model, f"short.{i}.attn", x, mask)
        x = _ffn_block(model, f"short.{i}.ffn", x)
    x = layer_norm(x, *model.norm("short.final_norm"))
    return _last_position(x)


def branch_gate_values(model: HyTRecModel, long_repr, short_repr) -> Tensor:
    return T.sigmoid(model.linear("branch_gate")(T.concat([long_repr, short_repr], axis=-1)))


def fuse_branches(model: HyTRecModel, long_repr, short_repr, gate=None) -> Tensor:
    """``g * short + (1 - g) * long`` with ``g = sigmoid(W [long; short] + b)``."""
    long_repr, short_repr = T.as_tensor(long_repr), T.as_tensor(short_repr)
    if long_repr.shape != short_repr.shape or long_repr.shape[-1] != model.config.d_model:
        raise ValueError("fuse_branches: both inputs must be d_model vectors of equal shape")
    g = branch_gate_values(model, long_repr, short_repr) if gate is None else T.as_tensor(gate)
    return T.add(T.mul(g, short_repr), T.mul(T.sub(1.0, g), long_repr))


def predict_scores(model: HyTRecModel, fused) -> Tensor:
    """Logits over the catalogue against the tied item embeddings."""
    fused = T.as_tensor(fused)
    table_t = T.transpose(model.item_embedding, (1, 0))
    if fused.ndim == 1:
        return T.reshape(T.matmul(T.reshape(fused, (1, fused.shape[0])), table_t), (model.config.vocab_size,))
    return T.matmul(fused, table_t)


def predict_proba(model: HyTRecModel, fused) -> np.ndarray:
    logits = predict_scores(model, fused).data
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def split_context(model: HyTRecModel, batch: Batch):
    """Column split of a left-padded batch into (long, short) views."""
    K = model.config.short_window
    items, times, mask = batch.items, batch.times, batch.mask
    L = items.shape[-1]
    if L < K:
        pad = K - L
        items = np.pad(items, ((0, 0), (pad, 0)))
        times = np.pad(times, ((0, 0), (pad, 0)))
        mask = np.pad(mask, ((0, 0), (pad, 0)))
        L = K
    cut = L - K
    return (items[:, :cut], times[:, :cut], mask[:, :cut]), (items[:, cut:], times[:, cut:], mask[:, cut:])


def forward(model: HyTRecModel, batch: Batch) -> Tensor:
    """Next-item logits ``[B, vocab]`` for each row of ``batch``."""
    c = model.config
    if not c.use_short_branch:
        long_repr = long_branch_forward(model, batch.items, batch.times, batch.query_time, batch.mask)
        return predict_scores(model, long_repr)
    (li, lt, lm), (si, _, sm) = split_context(model, batch)
    long_repr = long_branch_forward(model, li, lt, batch.query_time, lm)
    short_repr = short_branch_forward(model, si, sm)
    return predict_scores(model, fuse_branches(model, long_repr, short_repr))
