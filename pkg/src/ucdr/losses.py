"""Semantic-neighbourhood, mixture-prediction and mixup-classification losses.

All losses take row batches (a single vector counts as a batch of one) and
return the batch mean as a differentiable scalar. ``anchors`` is always the
``(num_train_classes, m)`` matrix of training-class semantic vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def _rows(x):
    if isinstance(x, ad.Var):
        return x if x.value.ndim == 2 else ad.reshape(x, (1, -1))
    x = np.asarray(x, dtype=np.float64)
    return x if x.ndim == 2 else x[None, :]


def weight_vector(anchor_semantic, anchors, kappa) -> np.ndarray:
    """``exp(-kappa * D(a, a_j) / max_k D(a, a_k))`` for each training class ``j``.

    Works row-wise when ``anchor_semantic`` is a batch.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    anchors = np.asarray(anchors, dtype=np.float64)
    if len(anchors) < 2:
        raise ValueError("the weight vector needs at least two classes")
    a = _rows(anchor_semantic)
    d = np.sqrt(np.sum((a[:, None, :] - anchors[None, :, :]) ** 2, axis=-1))
    dmax = d.max(axis=1, keepdims=True)
    if np.any(dmax == 0):
        raise ValueError("all semantic vectors coincide with the anchor; distances cannot be normalised")
    w = np.exp(-kappa * d / dmax)
    return w[0] if np.ndim(anchor_semantic) == 1 else w


def semantic_neighborhood_loss(features, mixed_semantics, anchors, kappa) -> ad.Var:
    """Weighted squared mismatch between feature-to-anchor and semantic-to-anchor distances."""
    f = _rows(features)
    a_mix = _rows(mixed_semantics)
    anchors = np.asarray(anchors, dtype=np.float64)
    fdim = f.value.shape[1] if isinstance(f, ad.Var) else f.shape[1]
    if fdim != anchors.shape[1] or a_mix.shape[1] != anchors.shape[1]:
        raise ValueError("feature, mixed semantic and anchor dimensions must agree")
    d = ad.pairwise_distance(f, anchors)
    d_gt = np.sqrt(np.sum((a_mix[:, None, :] - anchors[None, :, :]) ** 2, axis=-1))
    w = weight_vector(a_mix, anchors, kappa)
    per_sample = ad.total(ad.mul(ad.square(ad.sub(d, d_gt)), w), axis=1)
    return ad.mean(per_sample)


def mixture_prediction_loss(logits, soft_labels) -> ad.Var:
    """Soft cross-entropy between mixing proportions and softmax of the logits."""
    z = _rows(logits)
    labels = _rows(soft_labels)
    return ad.mean(ad.total(ad.mul(ad.log_softmax(z), -labels), axis=1))


def semantic_logits(features, anchors) -> ad.Var:
    """Class probabilities: softmax over cosine similarity to each anchor."""
    f = _rows(features)
    probs = ad.softmax(ad.pairwise_cosine(f, np.asarray(anchors, dtype=np.float64)))
    if np.ndim(features.value if isinstance(features, ad.Var) else features) == 1:
        return ad.reshape(probs, (-1,))
    return probs


def cross_entropy(targets, probs) -> ad.Var:
    """``-sum_t y_t log p_t`` averaged over rows, with the log floored at 1e-12."""
    p = _rows(probs)
    y = _rows(targets)
    return ad.mean(ad.total(ad.mul(ad.log(p), -y), axis=1))


def mixup_targets(alpha, beta, c, p, r, num_classes) -> np.ndarray:
    """``alpha * onehot(c) + (1 - alpha) * (beta * onehot(p) + (1 - beta) * onehot(r))``."""
    alpha, beta = np.atleast_1d(alpha).astype(float), np.atleast_1d(beta).astype(float)
    c, p, r = (np.atleast_1d(v).astype(np.int64) for v in (c, p, r))
    for k in (c, p, r):
        if np.any((k < 0) | (k >= num_classes)):
            raise ValueError("class index out of range")
    eye = np.eye(num_classes)
    return alpha[:, None] * eye[c] + ((1 - alpha) * beta)[:, None] * eye[p] + ((1 - alpha) * (1 - beta))[:, None] * eye[r]


def mixup_classification_loss(probs, alpha, beta, c, p, r) -> ad.Var:
    """Convex combination of the component-class cross-entropies."""
    num_classes = (probs.value if isinstance(probs, ad.Var) else np.asarray(probs)).shape[-1]
    alpha = np.atleast_1d(alpha).astype(float)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    if not np.all(np.isin(np.atleast_1d(beta), (0, 1))):
        raise ValueError("beta must be 0 or 1")
    onehot = np.eye(num_classes)
    c, p, r = (np.atleast_1d(v).astype(np.int64) for v in (c, p, r))
    for k in (c, p, r):
        if np.any((k < 0) | (k >= num_classes)):
            raise ValueError("class index out of range")
    beta = np.atleast_1d(beta).astype(float)
    partner = beta[:, None] * onehot[p] + (1 - beta)[:, None] * onehot[r]
    ce_anchor = _per_row_ce(onehot[c], probs)
    ce_partner = _per_row_ce(partner, probs)
    return ad.mean(ad.add(ad.mul(ce_anchor, alpha), ad.mul(ce_partner, 1 - alpha)))


def _per_row_ce(targets, probs):
    return ad.total(ad.mul(ad.log(_rows(probs)), -targets), axis=1)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ce_mix: float
    mp: float
    sn: float


def combined_loss(batch, features, logits, anchors, kappa, gamma1, gamma2):
    """``L_ce_mix + gamma1 * L_mp + gamma2 * L_sn`` for one batch.

    Returns the differentiable total and a :class:`LossBreakdown`. Terms with
    a zero weight are not built, so they cost nothing.
    """
    probs = semantic_logits(features, anchors)
    ce = mixup_classification_loss(
        probs, batch.alpha, batch.beta, batch.labels, batch.intra_labels, batch.cross_labels
    )
    loss = ce
    mp_value = sn_value = 0.0
    if gamma1 > 0:
        mp = mixture_prediction_loss(logits, batch.soft_labels)
        mp_value = mp.item()
        loss = ad.add(loss, ad.mul(mp, gamma1))
    if gamma2 > 0:
        sn = semantic_neighborhood_loss(features, batch.mixed_semantics, anchors, kappa)
        sn_value = sn.item()
        loss = ad.add(loss, ad.mul(sn, gamma2))
    return loss, LossBreakdown(loss.item(), ce.item(), mp_value, sn_value)
