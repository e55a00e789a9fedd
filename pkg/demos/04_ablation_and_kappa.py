"""Which loss terms matter? The six-row ablation ladder and a kappa sweep.

Expect about a minute for the ladder on one CPU core.
"""
# %%
from ucdr.cli import DESK_CONFIG
from ucdr.core import build_split
from ucdr.experiments import ablate, kappa_sweep, summarize
from ucdr.synthgen import default_benchmark

ds, sem, _ = default_benchmark(seed=0)
split = build_split(ds, "UCDR", held_out_domain=4, rng_seed=0)

# %%
results = ablate(ds, split, sem, DESK_CONFIG, seeds=range(5), k=10)
for name, m, p, n in summarize(results):
    print(f"{name:18s} mAP@10 {m:.4f}  Prec@10 {p:.4f}  ({n} seeds)")

# %% Base + neighbourhood loss for kappa in 0..4 (validation picks, test reports)
for kappa, val, test in kappa_sweep(ds, split, sem, DESK_CONFIG, [0, 1, 2, 3, 4], k=10):
    print(f"kappa {kappa:.0f}: val mAP@10 {val:.4f}  test mAP@10 {test:.4f}")
