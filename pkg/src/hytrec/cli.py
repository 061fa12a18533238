"""Command-line entry point: ``hytrec {prepare,train,eval,sweep,gradcheck,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import Counter
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (
    DataError,
    LogFormat,
    build_sequences,
    filter_sequences,
    generate_synthetic_drift,
    leave_one_out_split,
    load_split_dir,
    parse_interaction_log,
    reindex_items,
    save_split_dir,
    write_interaction_log,
    write_vocab,
)
from .eval import Variant, build_variant, evaluate, summarize, throughput_bench
from .model import ModelConfig, init_model
from .train import NumericError, gradcheck_model, load_model, save_model, train_loop

log = logging.getLogger("hytrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _dataset_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data.dataset_dir) if cfg.data.dataset_dir else cfg.output_path() / "data"


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(cfg: RunConfig) -> dict:
    out = _dataset_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    fmt = LogFormat(d.delimiter, tuple(d.columns), d.header)
    if d.synthetic:
        sp = d.synthetic_params
        seqs = generate_synthetic_drift(sp.n_users, sp.n_items, sp.seq_len, sp.drift_point_fraction,
                                        sp.drift_strength, sp.seed)
        log_path = out / "interactions.csv"
        write_interaction_log(seqs, log_path, fmt, [f"item{i:05d}" for i in range(sp.n_items)])
        source = log_path
    else:
        if not d.input:
            raise ConfigError("data.input is required unless data.synthetic is true")
        source = Path(d.input)
        if not source.is_file():
            raise DataError(f"input log {source} does not exist")
    events, vocab = parse_interaction_log(source, fmt)
    seqs = filter_sequences(build_sequences(events), d.min_user_events, d.min_item_count)
    seqs, remap = reindex_items(seqs)
    names = {v: k for k, v in vocab.items()}
    write_vocab({names[old]: new for old, new in remap.items()}, out / "vocab.tsv")
    split = leave_one_out_split(seqs, cfg.model.short_window, d.train_targets)
    lengths = [len(s) for s in seqs]
    hist = Counter(int(2 ** np.floor(np.log2(n))) for n in lengths)
    meta = {
        "n_users": len(seqs),
        "n_items": len(remap),
        "n_events": int(sum(lengths)),
        "length_histogram_pow2": {str(k): hist[k] for k in sorted(hist)},
        "split_sizes": {k: len(getattr(split, k)) for k in ("train", "valid", "test")},
        "short_window": cfg.model.short_window,
    }
    save_split_dir(split, out, meta)
    return meta


# ---------------------------------------------------------------------------
# train / eval


def _model_config(cfg: RunConfig, meta: dict) -> ModelConfig:
    mc = replace(cfg.model, vocab_size=int(meta["n_items"]))
    if mc.short_window != meta.get("short_window", mc.short_window):
        raise ConfigError("model.short_window differs from the window used by prepare")
    return mc


def _load_dataset(cfg: RunConfig):
    ddir = _dataset_dir(cfg)
    if not (ddir / "meta.json").is_file():
        raise DataError(f"no prepared dataset at {ddir}; run `hytrec prepare` first")
    return load_split_dir(ddir)


def cmd_train(cfg: RunConfig, model_config: ModelConfig | None = None, out: Path | None = None):
    split, meta = _load_dataset(cfg)
    mc = model_config or _model_config(cfg, meta)
    out = out or cfg.output_path() / "train"
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.jsonl"
    if report_path.exists():
        report_path.unlink()
    model = init_model(mc, cfg.train.init_seed, cfg.train.init_scale)
    report = train_loop(model, split, cfg.train, out)
    return model, report


def _eval_checkpoint(cfg: RunConfig, checkpoint: Path, split, meta) -> dict:
    model, _, _ = load_model(checkpoint)
    if model.config.vocab_size != meta["n_items"]:
        raise ConfigError(f"checkpoint vocabulary {model.config.vocab_size} != dataset {meta['n_items']}")
    return _eval_model(cfg, model, split)


def _eval_model(cfg: RunConfig, model, split) -> dict:
    if not split.test:
        raise DataError("test split is empty")
    t0 = time.perf_counter()
    res = evaluate(model, split.test, cfg.eval.batch_size, cfg.train.max_len)
    elapsed = time.perf_counter() - t0
    row = summarize(res, cfg.eval.ks)
    row["latency_ms_per_prediction"] = 1000.0 * elapsed / len(res)
    return row


def cmd_eval(cfg: RunConfig, checkpoint=None) -> dict:
    split, meta = _load_dataset(cfg)
    ckpt = Path(checkpoint or cfg.eval.checkpoint or cfg.output_path() / "train" / "best.ckpt")
    if not ckpt.is_file():
        raise DataError(f"checkpoint {ckpt} not found")
    row = _eval_checkpoint(cfg, ckpt, split, meta)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "metrics.jsonl", [row])
    return row


# ---------------------------------------------------------------------------
# sweep


def _sweep_model_config(base: ModelConfig, axis: str, value) -> ModelConfig:
    if axis == "ratio":
        return replace(base, hybrid_ratio=int(value))
    if axis == "heads":
        return replace(base, n_heads=int(value))
    if axis == "variant":
        return build_variant(base, value)
    raise ConfigError(f"unknown sweep axis {axis!r}; expected ratio, heads or variant")


def cmd_sweep(cfg: RunConfig) -> list[dict]:
    split, meta = _load_dataset(cfg)
    base = _model_config(cfg, meta)
    axis = cfg.sweep.axis
    if axis not in ("ratio", "heads", "variant"):
        raise ConfigError(f"unknown sweep axis {axis!r}; expected ratio, heads or variant")
    out = cfg.output_path() / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in cfg.sweep.values:
        row = {"axis": axis, "value": value, "status": "ok"}
        try:
            mc = _sweep_model_config(base, axis, value)
            cell = out / f"{axis}={value}"
            model, report = cmd_train(cfg, mc, cell)
            best, _, _ = load_model(cell / "best.ckpt")
            row.update(_eval_model(cfg, best, split))
            row["n_params"] = best.n_params()
        except (ValueError, FloatingPointError, MemoryError) as exc:
            row.update(status="failed", error=str(exc))
            log.warning("sweep cell %s=%s failed: %s", axis, value, exc)
        rows.append(row)
    _add_efficiency(rows, cfg.eval.ks)
    _write_jsonl(out / "sweep.jsonl", rows)
    (out / "sweep.tsv").write_text(_table(rows, cfg.eval.ks), encoding="utf-8")
    return rows


def _add_efficiency(rows: list[dict], ks) -> None:
    """Delta metric / delta latency relative to the first successful row."""
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        return
    ref = ok[0]
    keys = [f"hr@{k}" for k in ks] + [f"ndcg@{k}" for k in ks] + ["auc"]
    for r in ok:
        dl = r["latency_ms_per_prediction"] - ref["latency_ms_per_prediction"]
        for key in keys:
            r[f"efficiency_{key}"] = None if r is ref or dl == 0 else (r[key] - ref[key]) / dl


def _table(rows: list[dict], ks) -> str:
    cols = ["value", "status"] + [f"hr@{k}" for k in ks] + [f"ndcg@{k}" for k in ks] + ["auc", "latency_ms_per_prediction"]
    lines = ["\t".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_config(cfg: RunConfig) -> ModelConfig:
    g = cfg.gradcheck
    return ModelConfig(vocab_size=g.vocab_size, d_model=g.d_model, n_layers_long=g.n_layers_long,
                       hybrid_ratio=g.hybrid_ratio, n_heads=g.n_heads, short_window=g.short_window,
                       alpha=cfg.model.alpha, decay_period=max(1.0, g.seq_len / 4))


def cmd_gradcheck(cfg: RunConfig):
    """Finite-difference check of every parameter group on a tiny model."""
    from .model import count_parameters
    from .data import to_batch, decompose

    g = cfg.gradcheck
    mc = gradcheck_config(cfg)
    n = count_parameters(mc)
    if n > g.max_params or g.seq_len > 32 or g.batch_size > 8:
        raise ConfigError(f"gradcheck config too large ({n} parameters, seq_len {g.seq_len}, "
                          f"batch {g.batch_size}); limits are {g.max_params} parameters, seq_len 32, batch 8")
    seqs = generate_synthetic_drift(g.batch_size, g.vocab_size, g.seq_len + 1, 0.6, 0.8, cfg.train.init_seed,
                                    n_clusters=2)
    batch = to_batch([decompose(s, mc.short_window) for s in seqs], min_width=mc.short_window)
    model = init_model(mc, cfg.train.init_seed)
    if g.corrupt_primitive:
        rule = T._VJP.get(g.corrupt_primitive)
        if rule is None:
            raise ConfigError(f"no primitive named {g.corrupt_primitive!r}")

        def corrupted(saved, grad, _rule=rule):
            return tuple(None if x is None else 1.5 * x for x in _rule(saved, grad))

        with T.override_vjp(g.corrupt_primitive, corrupted):
            results = gradcheck_model(model, batch, g.tol, g.step)
    else:
        results = gradcheck_model(model, batch, g.tol, g.step)
    rows = [asdict(r) for r in results]
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "gradcheck.jsonl", rows)
    return results


# ---------------------------------------------------------------------------
# bench


def cmd_bench(cfg: RunConfig):
    b = cfg.bench
    base = replace(cfg.model, vocab_size=b.vocab_size, d_model=b.d_model)
    for v in b.variants:
        build_variant(base, v)  # validate names before the long run
    report = throughput_bench(b.variants, b.lengths, base, b.repeats, cfg.train.init_seed)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "bench.jsonl", report.to_records())
    (out / "bench.tsv").write_text(report.wide_table(), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hytrec", description="Hybrid-attention sequential recommender pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output directory (relative paths resolve under $HYTREC_OUTPUT_ROOT)")
    common.add_argument("--seed", type=int, help="sets init, shuffle and synthetic-data seeds")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. model.d_model=32 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="parse/filter/split an interaction log or generate synthetic data")
    sub.add_parser("train", parents=[common], help="train on a prepared dataset")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint")
    sw = sub.add_parser("sweep", parents=[common], help="train/evaluate across ratio, heads or variant values")
    sw.add_argument("--axis", choices=["ratio", "heads", "variant"])
    sw.add_argument("--values", help="comma-separated values")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check on a tiny model")
    sub.add_parser("bench", parents=[common], help="forward throughput versus sequence length")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.override)
        if args.command == "sweep":
            if args.axis:
                overrides.append(f"sweep.axis={args.axis}")
            if args.values:
                overrides.append(f"sweep.values=[{args.values}]")
        cfg = load_config(args.config, overrides, args.out, args.seed)
        out = cfg.output_path()
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / f"config.{args.command}.yaml")
        if args.command == "prepare":
            meta = cmd_prepare(cfg)
            print(json.dumps(meta, indent=2, sort_keys=True))
        elif args.command == "train":
            _, report = cmd_train(cfg)
            for r in report.records:
                print(json.dumps(r))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg, args.checkpoint), sort_keys=True))
        elif args.command == "sweep":
            rows = cmd_sweep(cfg)
            print(_table(rows, cfg.eval.ks), end="")
        elif args.command == "gradcheck":
            results = cmd_gradcheck(cfg)
            for r in results:
                print(f"{'PASS' if r.passed else 'FAIL'}  {r.group:<40s} rel_err={r.rel_error:.2e} n={r.n_elements}")
            if not all(r.passed for r in results):
                return EXIT_NUMERIC
        elif args.command == "bench":
            print(cmd_bench(cfg).wide_table(), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, T.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
