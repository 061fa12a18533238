"""Verify the hand-written derivatives of a tiny model against finite differences.

Run: python demos/03_gradient_check.py
"""
from hytrec.data import decompose, generate_synthetic_drift, to_batch
from hytrec.model import ModelConfig, init_model
from hytrec.train import gradcheck_model

cfg = ModelConfig(vocab_size=20, d_model=8, n_layers_long=4, hybrid_ratio=3, n_heads=2, short_window=3,
                  decay_period=3.0)
model = init_model(cfg, seed=0)
seqs = generate_synthetic_drift(2, 20, 13, seed=0, n_clusters=2)
batch = to_batch([decompose(s, 3) for s in seqs], min_width=3)
print(f"{model.n_params()} parameters, batch of {len(batch)} sequences of length {batch.items.shape[1]}")

for r in gradcheck_model(model, batch):
    print(f"  {'ok ' if r.passed else 'BAD'} {r.group:<32s} {r.n_elements:5d} elements  rel err {r.rel_error:.1e}")
