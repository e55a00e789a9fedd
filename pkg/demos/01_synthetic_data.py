"""A look at the synthetic benchmark before training anything.

Twenty classes in clusters of four, five domains, each domain a rotation
plus offset of the same class prototypes. Domain 0 plays the part of the
"real photo" search domain.
"""
# %%
import numpy as np

from ucdr.core import build_split, query_and_search_sets
from ucdr.synthgen import default_benchmark, semantic_clusters

ds, sem, spec = default_benchmark(seed=0)
print(spec)
print(f"{len(ds)} samples, input dim {ds.input_dim}, semantic dim {sem.dim}")

# %% Semantic neighbourhoods: cosine similarity inside vs across clusters
cos = sem.vectors @ sem.vectors.T
cluster = semantic_clusters(ds.num_classes)
same = (cluster[:, None] == cluster[None]) & ~np.eye(ds.num_classes, dtype=bool)
print(f"within-cluster cosine  min {cos[same].min():.3f}  mean {cos[same].mean():.3f}")
print(f"across-cluster cosine  max {cos[~same & ~np.eye(20, dtype=bool)].max():.3f}")


# %% How large is the domain gap on raw inputs?
def nn_accuracy(q, ql, g, gl, skip_self=False):
    d = np.linalg.norm(q[:, None] - g[None], axis=-1)
    if skip_self:
        np.fill_diagonal(d, np.inf)
    return np.mean(gl[d.argmin(axis=1)] == ql)


real = ds.domain_ids == 0
for dom in range(1, ds.num_domains):
    m = ds.domain_ids == dom
    within = nn_accuracy(ds.inputs[m], ds.class_ids[m], ds.inputs[m], ds.class_ids[m], True)
    cross = nn_accuracy(ds.inputs[m], ds.class_ids[m], ds.inputs[real], ds.class_ids[real])
    print(f"domain {dom}: 1-NN accuracy within domain {within:.3f}, against domain 0 {cross:.3f}")

# %% The UCDR split used throughout the demos: hold out domain 4
split = build_split(ds, "UCDR", held_out_domain=4, rng_seed=0)
queries, search = query_and_search_sets(ds, split)
print("seen", split.seen_classes)
print("val", split.val_classes, " unseen", split.unseen_classes)
print(f"{len(queries)} queries from domain 4, {len(search)} search items from domain 0")
