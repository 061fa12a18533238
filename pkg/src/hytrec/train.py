"""Loss, gradients, Adam, the training loop and finite-difference checks."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSplit, DecomposedSequence, make_batches
from .model import Batch, HyTRecModel, ModelConfig, forward
from .tensor import GradientTape, Tensor, apply_op, register_vjp

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 128
    epochs: int = 10
    grad_clip_norm: float | None = 5.0
    shuffle_seed: int = 0
    init_seed: int = 0
    init_scale: float | None = None
    max_len: int | None = None
    valid_k: int = 10
    select_best: bool = False  # restore the best-validation epoch (of this call) at the end

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def next_item_loss(scores, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(scores)``."""
    scores = T.as_tensor(scores)
    s = scores.data.reshape(-1, scores.shape[-1])
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    V = s.shape[-1]
    if tgt.shape != (s.shape[0],):
        raise ValueError("one target per score row required")
    if (tgt < 0).any() or (tgt >= V).any():
        raise IndexError(f"target id outside [0, {V})")
    mx = s.max(axis=-1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(s - mx).sum(axis=-1))
    rows = np.arange(len(tgt))
    loss = np.mean(lse - s[rows, tgt])
    return apply_op("cross_entropy", np.asarray(loss), (scores,), (s, lse, tgt, scores.shape))


@register_vjp("cross_entropy")
def _cross_entropy_vjp(saved, g):
    s, lse, tgt, shape = saved
    p = np.exp(s - lse[:, None])
    p[np.arange(len(tgt)), tgt] -= 1.0
    return ((g / len(tgt)) * p.reshape(shape),)


def batch_loss(model: HyTRecModel, batch: Batch) -> Tensor:
    return next_item_loss(forward(model, batch), batch.target)


def loss_and_grads(model: HyTRecModel, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    with GradientTape() as tape:
        loss = batch_loss(model, batch)
    grads = T.backward(tape, loss, wrt=model.parameters())
    return float(loss.data), {k: grads[t] for k, t in model.params.items()}


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    with np.errstate(over="ignore"):
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not np.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """Bias-corrected Adam, in place on ``params``; clipping first when configured."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
    grads = dict(grads)
    clip_global_norm(grads, config.grad_clip_norm)
    state.step += 1
    b1, b2, lr, eps = config.adam_beta1, config.adam_beta2, config.learning_rate, config.adam_epsilon
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new = params[k].data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.isfinite(new).all():
            raise NumericError(f"Adam update made parameter {k} non-finite")
        params[k].data = new
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: HyTRecModel, state: AdamState | None = None, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v.data for k, v in model.params.items()}
    meta = {"config": model.config.to_dict(), **(extra or {})}
    if state is not None:
        meta["adam_step"] = state.step
        tensors.update({f"adam_m/{k}": v for k, v in state.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in state.v.items()})
    save_checkpoint(path, tensors, meta)


def load_model(path, expect_config: ModelConfig | None = None) -> tuple[HyTRecModel, AdamState, dict]:
    from .model import _layer_shapes

    tensors, meta = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise ValueError("checkpoint config does not match the requested model config")
    params = {}
    for name, shape, _ in _layer_shapes(config):
        arr = tensors.get(f"param/{name}")
        if arr is None or arr.shape != tuple(shape):
            raise ValueError(f"checkpoint parameter {name} missing or mis-shaped")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    state = AdamState(step=int(meta.get("adam_step", 0)))
    for k, v in tensors.items():
        if k.startswith("adam_m/"):
            state.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            state.v[k[7:]] = v
    return HyTRecModel(config, params), state, meta


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float = -np.inf

    @property
    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]


def train_loop(model: HyTRecModel, split: DatasetSplit, config: TrainConfig, out_dir=None,
               resume_from=None, on_epoch: Callable[[dict], None] | None = None) -> TrainReport:
    """Deterministic mini-batch training with per-epoch validation.

    Writes ``report.jsonl``, ``best.ckpt`` and ``last.ckpt`` under ``out_dir``
    when given. ``resume_from`` continues from a ``last.ckpt``, reproducing the
    uninterrupted trajectory.
    """
    from .eval import evaluate, hit_rate_at_k, ndcg_at_k

    if not split.train:
        raise ValueError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = AdamState()
    report = TrainReport()
    start_epoch = 0
    if resume_from is not None:
        loaded, state, meta = load_model(resume_from, model.config)
        for k, t in loaded.params.items():
            model.params[k].data = t.data
        start_epoch = int(meta["epoch"])
        report.best_epoch = meta.get("best_epoch")
        report.best_metric = float(meta.get("best_metric", -np.inf))
        report.records = list(meta.get("records", []))
    K = model.config.short_window
    best_params = None
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        seed = None if config.shuffle_seed is None else config.shuffle_seed * 100003 + epoch
        for batch in make_batches(split.train, config.batch_size, config.max_len, seed, min_width=K):
            loss, grads = loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch + 1}")
            adam_step(model.params, grads, state, config)
            total += loss * len(batch)
            count += len(batch)
        rec = {"epoch": epoch + 1, "train_loss": total / count}
        if split.valid:
            res = evaluate(model, split.valid, config.batch_size, config.max_len)
            rec["valid_hr_at_k"] = hit_rate_at_k(res, config.valid_k)
            rec["valid_ndcg_at_k"] = ndcg_at_k(res, config.valid_k)
        else:
            rec["valid_hr_at_k"] = rec["valid_ndcg_at_k"] = None
        rec["k"] = config.valid_k
        rec["wall_seconds"] = time.perf_counter() - t0
        report.records.append(rec)
        metric = rec["valid_hr_at_k"] if rec["valid_hr_at_k"] is not None else -rec["train_loss"]
        improved = metric > report.best_metric
        if improved:
            report.best_metric, report.best_epoch = metric, epoch + 1
            if config.select_best:
                best_params = {k: t.data.copy() for k, t in model.params.items()}
        log.info("epoch %d loss %.5f valid HR@%d %s", epoch + 1, rec["train_loss"], config.valid_k,
                 rec["valid_hr_at_k"])
        if out is not None:
            with open(out / "report.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
            meta = {"epoch": epoch + 1, "best_epoch": report.best_epoch, "best_metric": report.best_metric,
                    "records": report.records, "train_config": asdict(config)}
            if improved:
                save_model(out / "best.ckpt", model, None, meta)
            save_model(out / "last.ckpt", model, state, meta)
        if on_epoch is not None:
            on_epoch(rec)
    if best_params is not None:
        for k, t in model.params.items():
            t.data = best_params[k]
    if out is not None and not (out / "best.ckpt").exists():
        save_model(out / "best.ckpt", model, None, {"epoch": start_epoch})
        save_model(out / "last.ckpt", model, state, {"epoch": start_epoch, "records": report.records})
    return report


# ---------------------------------------------------------------------------
# finite differences


def parameter_groups(model: HyTRecModel) -> dict[str, list[str]]:
    """Group parameters by owning sub-layer (name minus the final component)."""
    groups: dict[str, list[str]] = {}
    for name in model.params:
        head, _, last = name.rpartition(".")
        groups.setdefault(head or last, []).append(name)
    return groups


@dataclass
class GradCheckResult:
    group: str
    rel_error: float
    n_elements: int
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` (0 when both vanish)."""
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / denom


def finite_difference_grads(loss_fn: Callable[[], float], tensors: Sequence[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every element of ``tensors``."""
    out = []
    for t in tensors:
        g = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn()
            flat[i] = orig - step
            fm = loss_fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def gradcheck_model(model: HyTRecModel, batch: Batch, tol: float = 1e-4, step: float = 1e-5) -> list[GradCheckResult]:
    _, grads = loss_and_grads(model, batch)

    def f() -> float:
        return float(batch_loss(model, batch).data)

    results = []
    for group, names in parameter_groups(model).items():
        ts = [model.params[n] for n in names]
        num = finite_difference_grads(f, ts, step)
        a = np.concatenate([grads[n].ravel() for n in names])
        n = np.concatenate([x.ravel() for x in num])
        err = relative_error(a, n)
        results.append(GradCheckResult(group, err, a.size, err <= tol))
    return results
