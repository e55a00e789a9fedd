"""The three training losses on hand-sized inputs, plus a gradient check."""
# %%
import math

import numpy as np

from ucdr import autodiff as ad
from ucdr import losses
from ucdr.cli import run_gradcheck
from ucdr.mixup import make_mixup_batch

anchors = np.array([[0.0, 0.0], [3.0, 0.0], [4.0, 0.0]])

# %% Neighbourhood weights decay with semantic distance from the anchor class
for kappa in (0.0, 1.0, 2.0):
    print(f"kappa {kappa}: weights {np.round(losses.weight_vector(anchors[0], anchors, kappa), 5)}")

# %% A feature sitting on its class semantics pays nothing; moving it costs
print("L_Sn at the anchor:", losses.semantic_neighborhood_loss(anchors[0], anchors[0], anchors, 2.0).item())
print("L_Sn one unit off:", losses.semantic_neighborhood_loss(np.array([1.0, 0.0]), anchors[0], anchors, 2.0).item())

# %% Mixture prediction is a soft cross-entropy; its floor is the label entropy
label = np.array([0.6, 0.0, 0.4])
print("uniform logits:", losses.mixture_prediction_loss(np.zeros(3), label).item(), "= log 3 =", math.log(3))
print("matching logits:", losses.mixture_prediction_loss(np.log(label + 1e-300), label).item())

# %% A real mixup batch: two domains, three classes
rng = np.random.default_rng(0)
sem = np.eye(3)
batch = make_mixup_batch(rng.normal(size=(6, 4)), [0, 1, 2, 0, 1, 2], [0, 0, 0, 1, 1, 1], sem, 2.0, 0.5, rng)
for s in batch:
    print(f"alpha {s.alpha:.2f} beta {s.beta} anchor {s.anchor_class} soft label {np.round(s.soft_label, 2)}")

# %% Analytic gradients against central differences on five random problems
for name, (seed, rep) in run_gradcheck(range(5)).items():
    print(f"{name:4s} worst relative error {rep.max_rel_error:.2e} (seed {seed})")
