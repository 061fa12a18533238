"""Forward wall time vs sequence length for all-linear, hybrid and all-softmax stacks.

Run: python demos/04_scaling.py
"""
from hytrec.eval import throughput_bench
from hytrec.model import ModelConfig

base = ModelConfig(vocab_size=1000, d_model=64, n_layers_long=4, hybrid_ratio=3, n_heads=4, short_window=16,
                   decay_period=1000.0)
report = throughput_bench(["PURE_LINEAR", "FULL", "PURE_SOFTMAX"], [256, 1024, 2048], base, repeats=2,
                          measure_memory=False)
print(report.wide_table())
for v in ("PURE_LINEAR", "FULL", "PURE_SOFTMAX"):
    growth = report.get(v, 2048).wall_seconds / report.get(v, 256).wall_seconds
    print(f"{v:<13s} time(2048)/time(256) = {growth:5.1f}   (8x longer input)")
