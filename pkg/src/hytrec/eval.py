"""Ranking metrics, ablation variants and the sequence-length throughput benchmark."""
from __future__ import annotations

import enum
import gc
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data import DecomposedSequence, make_batches
from .model import Batch, HyTRecModel, ModelConfig, count_parameters, forward, init_model


@dataclass(frozen=True)
class RankingResult:
    """One prediction. Ties in score are broken by item id (lower id ranks first)."""

    target: int
    rank: int
    n_above: int
    n_tied: int
    n_items: int
    target_score: float

    @property
    def auc(self) -> float:
        n_other = self.n_items - 1
        if n_other == 0:
            return 1.0
        below = n_other - self.n_above - self.n_tied
        return (below + 0.5 * self.n_tied) / n_other


def rank_scores(scores: np.ndarray, targets) -> list[RankingResult]:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    V = scores.shape[-1]
    out = []
    for s, t in zip(scores, targets):
        st = s[t]
        above = int(np.sum(s > st))
        tied = int(np.sum(s == st)) - 1
        tied_before = int(np.sum(s[:t] == st))
        out.append(RankingResult(int(t), above + tied_before + 1, above, tied, V, float(st)))
    return out


def _nonempty(results: Sequence[RankingResult]) -> None:
    if len(results) == 0:
        raise ValueError("no predictions to score")


def hit_rate_at_k(results: Sequence[RankingResult], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    _nonempty(results)
    return float(np.mean([r.rank <= k for r in results]))


def ndcg_at_k(results: Sequence[RankingResult], k: int) -> float:
    """Single relevant item per prediction, so the ideal DCG is 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _nonempty(results)
    return float(np.mean([1.0 / np.log2(r.rank + 1) if r.rank <= k else 0.0 for r in results]))


def auc(results: Sequence[RankingResult]) -> float:
    _nonempty(results)
    return float(np.mean([r.auc for r in results]))


def evaluate(model: HyTRecModel, examples: Sequence[DecomposedSequence], batch_size: int = 256,
             max_len: int | None = None) -> list[RankingResult]:
    out: list[RankingResult] = []
    for batch in make_batches(examples, batch_size, max_len, None, min_width=model.config.short_window):
        out.extend(rank_scores(forward(model, batch).data, batch.target))
    return out


def summarize(results: Sequence[RankingResult], ks: Iterable[int] = (10, 50, 500)) -> dict:
    row = {}
    for k in ks:
        row[f"hr@{k}"] = hit_rate_at_k(results, k)
        row[f"ndcg@{k}"] = ndcg_at_k(results, k)
    row["auc"] = auc(results)
    row["n"] = len(results)
    return row


# ---------------------------------------------------------------------------
# variants


class Variant(str, enum.Enum):
    FULL = "FULL"
    NO_TADN = "NO_TADN"
    NO_SHORT = "NO_SHORT"
    NEITHER = "NEITHER"
    PURE_SOFTMAX = "PURE_SOFTMAX"
    PURE_LINEAR = "PURE_LINEAR"


def build_variant(base: ModelConfig, variant) -> ModelConfig:
    """Ablation / benchmark configuration derived from ``base``."""
    try:
        v = Variant(variant.value if isinstance(variant, Variant) else str(variant).upper())
    except ValueError:
        raise ValueError(f"unknown variant {variant!r}") from None
    if v is Variant.FULL:
        return replace(base)
    if v is Variant.NO_TADN:
        return replace(base, linear_kind="baseline")
    if v is Variant.NO_SHORT:
        return replace(base, use_short_branch=False)
    if v is Variant.NEITHER:
        return replace(base, linear_kind="baseline", use_short_branch=False)
    if v is Variant.PURE_SOFTMAX:
        return replace(base, long_schedule="all_softmax")
    return replace(base, long_schedule="all_linear")


def match_parameter_budget(config: ModelConfig, target: int) -> ModelConfig:
    """Pick the feed-forward width whose total parameter count is closest to ``target``."""
    per_unit = count_parameters(replace(config, ffn_hidden=2)) - count_parameters(replace(config, ffn_hidden=1))
    base = count_parameters(replace(config, ffn_hidden=1)) - per_unit
    width = max(1, int(round((target - base) / per_unit)))
    return replace(config, ffn_hidden=width)


# ---------------------------------------------------------------------------
# throughput benchmark


@dataclass
class BenchRow:
    variant: str
    seq_len: int
    n_params: int
    wall_seconds: float | None
    tokens_per_second: float | None
    tokens_processed: int
    peak_memory_bytes: int | None
    repeats: int
    status: str = "ok"
    samples: list[float] = field(default_factory=list)


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def get(self, variant: str, seq_len: int) -> BenchRow:
        for r in self.rows:
            if r.variant == variant and r.seq_len == seq_len:
                return r
        raise KeyError((variant, seq_len))

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def wide_table(self, delimiter: str = "\t") -> str:
        """``seq_len`` rows by variant columns of tokens/second."""
        variants = list(dict.fromkeys(r.variant for r in self.rows))
        lengths = sorted({r.seq_len for r in self.rows})
        lines = [delimiter.join(["seq_len", *variants])]
        for L in lengths:
            cells = [str(L)]
            for v in variants:
                try:
                    tps = self.get(v, L).tokens_per_second
                except KeyError:
                    tps = None
                cells.append("" if tps is None else f"{tps:.1f}")
            lines.append(delimiter.join(cells))
        return "\n".join(lines) + "\n"


BUDGET_TOLERANCE = 0.05


def _bench_batch(seq_len: int, config: ModelConfig, rng: np.random.Generator) -> Batch:
    n = seq_len + (config.short_window if config.use_short_branch else 0)
    items = rng.integers(0, config.vocab_size, (1, n))
    times = np.cumsum(rng.integers(1, 4, (1, n)), axis=1).astype(np.float64)
    return Batch(items, times, np.ones((1, n), dtype=bool), times[:, -1] + 1.0, np.zeros(1, dtype=np.int64))


def benchmark_configs(base: ModelConfig, variants: Sequence) -> dict[str, ModelConfig]:
    """Variant configs with feed-forward widths matched to the first variant's size."""
    cfgs = {str(Variant(v).value if not isinstance(v, Variant) else v.value): build_variant(base, v) for v in variants}
    names = list(cfgs)
    target = count_parameters(cfgs[names[0]])
    out = {n: (c if n == names[0] else match_parameter_budget(c, target)) for n, c in cfgs.items()}
    for n, c in out.items():
        if abs(count_parameters(c) - target) > BUDGET_TOLERANCE * target:
            raise ValueError(f"cannot match {n} to {target} parameters within {BUDGET_TOLERANCE:.0%}")
    return out


def throughput_bench(variants: Sequence, lengths: Sequence[int], base: ModelConfig, repeats: int = 3,
                     seed: int = 0, measure_memory: bool = True) -> BenchReport:
    """Median forward wall time per (variant, length) after one warm-up pass."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    report = BenchReport()
    cfgs = benchmark_configs(base, variants)
    rng = np.random.default_rng(seed)
    ctx = threadpool_limits(1) if threadpool_limits is not None else _null()
    with ctx:
        for name, cfg in cfgs.items():
            model = init_model(cfg, seed)
            n_params = model.n_params()
            for L in lengths:
                batch = _bench_batch(L, cfg, rng)
                try:
                    forward(model, batch)
                    samples = []
                    for _ in range(repeats):
                        t0 = time.perf_counter()
                        forward(model, batch)
                        samples.append(time.perf_counter() - t0)
                    peak = None
                    if measure_memory:
                        gc.collect()
                        tracemalloc.start()
                        forward(model, batch)
                        peak = tracemalloc.get_traced_memory()[1]
                        tracemalloc.stop()
                    wall = statistics.median(samples)
                    report.rows.append(BenchRow(name, L, n_params, wall, L / wall, L, peak, repeats, "ok", samples))
                except MemoryError:
                    if tracemalloc.is_tracing():
                        tracemalloc.stop()
                    report.rows.append(BenchRow(name, L, n_params, None, None, L, None, repeats, "oom"))
    return report


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# ablation study


ABLATION_VARIANTS = ("FULL", "NO_TADN", "NO_SHORT", "NEITHER")


@dataclass
class AblationResult:
    metric: str
    scores: dict[str, list[float]]  # variant -> one value per seed
    seconds: float

    def mean(self, variant: str) -> float:
        return float(np.mean(self.scores[variant]))

    def std(self, variant: str) -> float:
        return float(np.std(self.scores[variant], ddof=1)) if len(self.scores[variant]) > 1 else 0.0


def run_ablation(base: ModelConfig, train_config, seeds: Sequence[int], n_users: int = 2000, seq_len: int = 100,
                 drift_strength: float = 0.8, train_targets: int = 8, k: int = 10,
                 variants: Sequence[str] = ABLATION_VARIANTS, log=None) -> AblationResult:
    """Train every variant on the synthetic drift data for each seed; report test HR@k.

    Data, initialisation and shuffling all follow the seed, so variants
    within a seed see identical examples in identical order.
    """
    from .data import generate_synthetic_drift, leave_one_out_split
    from .train import train_loop

    t0 = time.perf_counter()
    scores: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        seqs = generate_synthetic_drift(n_users, base.vocab_size, seq_len, drift_strength=drift_strength, seed=seed)
        split = leave_one_out_split(seqs, base.short_window, train_targets)
        tc = replace(train_config, init_seed=seed, shuffle_seed=seed)
        for v in variants:
            model = init_model(build_variant(base, v), seed, tc.init_scale)
            train_loop(model, split, tc)
            hr = hit_rate_at_k(evaluate(model, split.test, 256, tc.max_len), k)
            scores[v].append(hr)
            if log is not None:
                log(f"seed {seed} {v:<8s} HR@{k} {hr:.4f}")
    return AblationResult(f"hr@{k}", scores, time.perf_counter() - t0)
