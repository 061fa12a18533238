"""Drive the full command-line pipeline: prepare, train, evaluate, benchmark.

Run: python demos/05_command_line.py [output-dir]
"""
import subprocess
import sys
import tempfile
from pathlib import Path

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="hytrec-demo-"))
overrides = [
    "data.synthetic=true", "data.synthetic_params.n_users=300", "data.synthetic_params.n_items=100",
    "data.synthetic_params.seq_len=40", "data.min_item_count=1", "data.train_targets=4",
    "model.vocab_size=100", "model.d_model=16", "model.n_heads=2", "model.short_window=8",
    "model.decay_period=20", "train.epochs=6", "train.learning_rate=0.005", "train.max_len=24", "eval.ks=[10,50]",
    "bench.lengths=[128,256]", "bench.repeats=1", "bench.d_model=16",
]
flags = [f for o in overrides for f in ("--override", o)]


def run(*cmd):
    print("$ hytrec", " ".join(cmd))
    subprocess.run([sys.executable, "-m", "hytrec", *cmd, "--out", str(out), "--seed", "0", *flags], check=True)


run("prepare")
run("train")
run("eval")
run("bench")
print("\nArtifacts:")
for p in sorted(out.rglob("*")):
    if p.is_file():
        print("  ", p.relative_to(out))
print("\nmetrics.jsonl:")
print((out / "metrics.jsonl").read_text())
