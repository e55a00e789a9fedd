"""Train the full model on the UCDR split and score both search-set settings."""
# %%
from ucdr.cli import DESK_CONFIG
from ucdr.core import build_split
from ucdr.retrieval import chance_map, evaluate
from ucdr.core import query_and_search_sets
from ucdr.synthgen import default_benchmark
from ucdr.trainer import train

ds, sem, _ = default_benchmark(seed=0)
split = build_split(ds, "UCDR", held_out_domain=4, rng_seed=0)
print(DESK_CONFIG.to_text())

# %%
model, logs, state = train(ds, split, sem, DESK_CONFIG)
for row in logs[:: max(1, len(logs) // 8)]:
    print(f"epoch {row.epoch:3d}  loss {row.loss:.4f}  (ce {row.ce_mix:.3f} mp {row.mp:.3f} sn {row.sn:.3f})"
          f"  lr {row.lr:.1e}  val mAP@10 {row.val_map:.3f}")
print(f"stopped after {len(logs)} epochs, best epoch {state.best_epoch}")

# %% Unseen-class search set, then unseen plus seen classes
for mode in ("unseen_only", "seen_plus_unseen"):
    s = split.with_mode(mode)
    report = evaluate(model, ds, s, k=10)
    _, search = query_and_search_sets(ds, s)
    chance = chance_map(report.query_classes, search.class_ids, 10, trials=50)
    print(f"{mode:17s} mAP@10 {report.map_at_k:.4f}  Prec@10 {report.prec_at_k:.4f}  chance {chance:.4f}")
