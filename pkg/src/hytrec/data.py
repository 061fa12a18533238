"""Interaction logs, per-user sequences, leave-one-out splits and batching."""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import Batch

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed input or a dataset that cannot support the requested operation."""


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: int
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass
class UserSequence:
    user_id: str
    events: list[InteractionEvent]

    def __len__(self) -> int:
        return len(self.events)

    @property
    def items(self) -> list[int]:
        return [e.item_id for e in self.events]

    @property
    def times(self) -> list[int]:
        return [e.timestamp for e in self.events]


@dataclass
class DecomposedSequence:
    user_id: str
    long_part: list[InteractionEvent]
    short_part: list[InteractionEvent]
    target: int
    target_time: int

    @property
    def context(self) -> list[InteractionEvent]:
        return self.long_part + self.short_part


@dataclass
class DatasetSplit:
    train: list[DecomposedSequence] = field(default_factory=list)
    valid: list[DecomposedSequence] = field(default_factory=list)
    test: list[DecomposedSequence] = field(default_factory=list)


@dataclass
class LogFormat:
    delimiter: str = ","
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")
    header: bool = False

    def __post_init__(self):
        self.columns = tuple(self.columns)
        for c in ("user", "item", "timestamp"):
            if c not in self.columns:
                raise DataError(f"log format lacks a {c!r} column")


# ---------------------------------------------------------------------------
# parsing


def _parse_timestamp(raw: str, lineno: int) -> int:
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        val = float(raw)
    except ValueError:
        raise DataError(f"line {lineno}: unparseable timestamp {raw!r}") from None
    if not val.is_integer():
        raise DataError(f"line {lineno}: timestamp {raw!r} is not a whole number of seconds")
    return int(val)


def parse_interaction_log(path, fmt: LogFormat | None = None) -> tuple[list[InteractionEvent], dict[str, int]]:
    """Read a delimiter-separated log; item strings map to dense ids in sorted order.

    Any malformed line aborts the parse with its line number.
    """
    fmt = fmt or LogFormat()
    col = {name: i for i, name in enumerate(fmt.columns)}
    rows: list[tuple[str, str, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if fmt.header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(fmt.delimiter)
            if len(parts) != len(fmt.columns):
                raise DataError(f"line {lineno}: expected {len(fmt.columns)} fields, got {len(parts)}")
            user, item = parts[col["user"]].strip(), parts[col["item"]].strip()
            if not user or not item:
                raise DataError(f"line {lineno}: empty user or item field")
            ts = _parse_timestamp(parts[col["timestamp"]].strip(), lineno)
            if ts < 0:
                raise DataError(f"line {lineno}: negative timestamp")
            rows.append((user, item, ts))
    vocab = {s: i for i, s in enumerate(sorted({r[1] for r in rows}))}
    return [InteractionEvent(u, vocab[it], ts) for u, it, ts in rows], vocab


def write_vocab(vocab: dict[str, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{item}\t{idx}\n")


def read_vocab(path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            item, idx = line.rstrip("\n").rsplit("\t", 1)
            out[item] = int(idx)
    return out


def write_interaction_log(sequences: Sequence[UserSequence], path, fmt: LogFormat | None = None,
                          item_names: Sequence[str] | None = None) -> None:
    """Write events in log format (rating column, if any, written as 1)."""
    fmt = fmt or LogFormat()
    with open(path, "w", encoding="utf-8") as fh:
        if fmt.header:
            fh.write(fmt.delimiter.join(fmt.columns) + "\n")
        for seq in sequences:
            for e in seq.events:
                item = item_names[e.item_id] if item_names is not None else str(e.item_id)
                vals = {"user": seq.user_id, "item": item, "timestamp": str(e.timestamp)}
                fh.write(fmt.delimiter.join(vals.get(c, "1") for c in fmt.columns) + "\n")


def build_sequences(events: Sequence[InteractionEvent]) -> list[UserSequence]:
    """Group by user (sorted ids); order by timestamp, input order breaking ties."""
    by_user: dict[str, list[InteractionEvent]] = defaultdict(list)
    for e in events:
        by_user[e.user_id].append(e)
    return [UserSequence(u, sorted(evs, key=lambda e: e.timestamp)) for u, evs in sorted(by_user.items())]


# ---------------------------------------------------------------------------
# filtering


def filter_sequences(sequences: Sequence[UserSequence], min_user_events: int = 1,
                     min_item_count: int = 1) -> list[UserSequence]:
    """Iterative k-core filter: drop rare items and short users until nothing changes."""
    if min_user_events < 1 or min_item_count < 1:
        raise ValueError("filter thresholds must be >= 1")
    current = [UserSequence(s.user_id, list(s.events)) for s in sequences]
    while True:
        counts = Counter(e.item_id for s in current for e in s.events)
        nxt = []
        for s in current:
            kept = [e for e in s.events if counts[e.item_id] >= min_item_count]
            if len(kept) >= min_user_events:
                nxt.append(UserSequence(s.user_id, kept))
        changed = len(nxt) != len(current) or any(len(a) != len(b) for a, b in zip(nxt, current))
        current = nxt
        if not changed:
            break
    if not current:
        n_items = len({e.item_id for s in sequences for e in s.events})
        raise EmptyDatasetError(
            f"no users survive filtering (min_user_events={min_user_events}, "
            f"min_item_count={min_item_count}; input had {len(sequences)} users, {n_items} items)")
    return current


def reindex_items(sequences: Sequence[UserSequence]) -> tuple[list[UserSequence], dict[int, int]]:
    """Compact item ids to ``0..n-1`` preserving their relative order."""
    old = sorted({e.item_id for s in sequences for e in s.events})
    remap = {o: i for i, o in enumerate(old)}
    out = [UserSequence(s.user_id, [InteractionEvent(e.user_id, remap[e.item_id], e.timestamp) for e in s.events])
           for s in sequences]
    return out, remap


# ---------------------------------------------------------------------------
# decomposition and splits


def decompose(seq: UserSequence | Sequence[InteractionEvent], K: int) -> DecomposedSequence:
    """Hold out the last event as the target; split the rest into long / last-K."""
    events = list(seq.events if isinstance(seq, UserSequence) else seq)
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(events) < 2:
        raise DataError(f"sequence of length {len(events)} is too short to hold out a target")
    context, last = events[:-1], events[-1]
    cut = max(0, len(context) - K)
    user = seq.user_id if isinstance(seq, UserSequence) else last.user_id
    return DecomposedSequence(user, context[:cut], context[cut:], last.item_id, last.timestamp)


def leave_one_out_split(sequences: Sequence[UserSequence], K: int, train_targets: int = 1) -> DatasetSplit:
    """Last event -> test target, second-to-last -> valid target, earlier ones -> train.

    ``train_targets`` > 1 adds further training examples per user, each
    holding out one earlier event (every example keeps at least one context event).
    """
    split = DatasetSplit()
    for s in sequences:
        ev = s.events
        n = len(ev)
        if n >= 2:
            split.test.append(decompose(UserSequence(s.user_id, ev), K))
        if n >= 3:
            split.valid.append(decompose(UserSequence(s.user_id, ev[:-1]), K))
        for j in range(train_targets):
            end = n - 2 - j
            if end < 2:
                break
            split.train.append(decompose(UserSequence(s.user_id, ev[:end]), K))
    return split


# ---------------------------------------------------------------------------
# synthetic interest drift


def generate_synthetic_drift(n_users: int, n_items: int, seq_len: int, drift_point_fraction: float = 0.7,
                             drift_strength: float = 0.8, seed: int = 0, n_clusters: int | None = None,
                             cluster_favourites: int = 4) -> list[UserSequence]:
    """Users with a stable interest cluster whose late behaviour drifts to a second one.

    The catalogue is partitioned into ``n_clusters`` contiguous clusters.
    Each user draws a long-term cluster and a different drift cluster, plus
    a few favourite items in each that are sampled more often. Events before
    the drift point come from the long-term cluster; after it, each event
    (and the held-out last event) comes from the drift cluster with
    probability ``drift_strength``. Pre-drift gaps are 1..3 time steps,
    post-drift gaps 0..1, so recency separates the regimes.
    """
    if n_users < 1 or n_items < 2 or seq_len < 2:
        raise ValueError("need n_users >= 1, n_items >= 2, seq_len >= 2")
    if not 0.0 <= drift_strength <= 1.0:
        raise ValueError("drift_strength must lie in [0, 1]")
    if not 0.0 < drift_point_fraction < 1.0:
        raise ValueError("drift_point_fraction must lie in (0, 1)")
    n_clusters = n_clusters or max(2, n_items // 25)
    if n_clusters < 2 or n_clusters > n_items:
        raise ValueError("need 2 <= n_clusters <= n_items")
    bounds = np.linspace(0, n_items, n_clusters + 1).astype(int)
    clusters = [np.arange(bounds[c], bounds[c + 1]) for c in range(n_clusters)]
    rng = np.random.default_rng(seed)
    drift_at = int(round(drift_point_fraction * seq_len))
    out = []
    for u in range(n_users):
        home = int(rng.integers(n_clusters))
        away = int(rng.integers(n_clusters - 1))
        away += away >= home

        def weights(members):
            w = np.ones(len(members))
            fav = rng.choice(len(members), size=min(cluster_favourites, len(members)), replace=False)
            w[fav] += 4.0
            return w / w.sum()

        w_home, w_away = weights(clusters[home]), weights(clusters[away])
        t = int(rng.integers(0, 1000))
        events = []
        for i in range(seq_len):
            drifted = i >= drift_at
            if drifted and rng.random() < drift_strength:
                item = int(rng.choice(clusters[away], p=w_away))
            else:
                item = int(rng.choice(clusters[home], p=w_home))
            t += int(rng.integers(0, 2)) if drifted else int(rng.integers(1, 4))
            events.append(InteractionEvent(f"u{u:06d}", item, t))
        out.append(UserSequence(f"u{u:06d}", events))
    return out


# ---------------------------------------------------------------------------
# batching


def to_batch(examples: Sequence[DecomposedSequence], max_len: int | None = None, min_width: int = 0) -> Batch:
    """Left-pad contexts (truncated to the most recent ``max_len`` events)."""
    ctxs = []
    for ex in examples:
        ctx = ex.context
        if max_len is not None and len(ctx) > max_len:
            ctx = ctx[len(ctx) - max_len:]
        ctxs.append(ctx)
    B = len(ctxs)
    L = max([min_width] + [len(c) for c in ctxs])
    items = np.zeros((B, L), dtype=np.int64)
    times = np.zeros((B, L))
    mask = np.zeros((B, L), dtype=bool)
    query = np.zeros(B)
    target = np.zeros(B, dtype=np.int64)
    for b, (ex, ctx) in enumerate(zip(examples, ctxs)):
        n = len(ctx)
        if n:
            items[b, L - n:] = [e.item_id for e in ctx]
            times[b, L - n:] = [e.timestamp for e in ctx]
            mask[b, L - n:] = True
        # padded slots carry the query time so their decay is well defined
        times[b, :L - n] = ex.target_time
        query[b] = ex.target_time
        target[b] = ex.target
    return Batch(items, times, mask, query, target)


def make_batches(examples: Sequence[DecomposedSequence], batch_size: int, max_len: int | None = None,
                 shuffle_seed: int | None = None, min_width: int = 0) -> Iterator[Batch]:
    """Yield padded batches; a given ``shuffle_seed`` fixes the order."""
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for lo in range(0, len(order), batch_size):
        yield to_batch([examples[i] for i in order[lo:lo + batch_size]], max_len, min_width)


def load_split_dir(directory) -> tuple[DatasetSplit, dict]:
    """Load splits written by :func:`save_split_dir`."""
    import json

    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    split = DatasetSplit()
    for name in ("train", "valid", "test"):
        rows = []
        with open(directory / f"{name}.jsonl", encoding="utf-8") as fh:
            for line in fh:
                r = json.loads(line)
                ev = [InteractionEvent(r["user"], int(i), int(t)) for i, t in zip(r["items"], r["times"])]
                n_long = r["n_long"]
                rows.append(DecomposedSequence(r["user"], ev[:n_long], ev[n_long:], r["target"], r["target_time"]))
        setattr(split, name, rows)
    return split, meta


def save_split_dir(split: DatasetSplit, directory, meta: dict) -> None:
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        with open(directory / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for ex in getattr(split, name):
                ctx = ex.context
                fh.write(json.dumps({
                    "user": ex.user_id, "items": [e.item_id for e in ctx], "times": [e.timestamp for e in ctx],
                    "n_long": len(ex.long_part), "target": ex.target, "target_time": ex.target_time,
                }, separators=(",", ":")) + "\n")
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
