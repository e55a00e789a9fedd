"""Three-way class/domain mixup with matching soft labels and mixed semantics."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def sample_coefficients(lam: float, gamma_mix: float, rng: np.random.Generator, size=None):
    """Draw ``alpha ~ Beta(lam, lam)`` and ``beta ~ Bernoulli(gamma_mix)``.

    ``beta = 1`` selects the intra-domain partner, ``beta = 0`` the
    cross-domain one.
    """
    if not lam > 0:
        raise ValueError(f"Beta parameter must be positive, got {lam}")
    if not 0.0 <= gamma_mix <= 1.0:
        raise ValueError(f"Bernoulli probability must lie in [0, 1], got {gamma_mix}")
    alpha = rng.beta(lam, lam, size=size)
    beta = (rng.random(size=size) < gamma_mix).astype(np.int64)
    if size is None:
        return float(alpha), int(beta)
    return alpha, beta


def mix_inputs(x_anchor, x_intra, x_cross, alpha, beta):
    x_anchor, x_intra, x_cross = (np.asarray(v, dtype=np.float64) for v in (x_anchor, x_intra, x_cross))
    if not x_anchor.shape == x_intra.shape == x_cross.shape:
        raise ValueError("mixup components must share a shape")
    alpha = np.asarray(alpha, dtype=np.float64)[..., None] if x_anchor.ndim == 2 else alpha
    beta = np.asarray(beta, dtype=np.float64)[..., None] if x_anchor.ndim == 2 else beta
    return alpha * x_anchor + (1 - alpha) * (beta * x_intra + (1 - beta) * x_cross)


# the mixed semantic vector obeys the same convex combination as the inputs
mix_semantics = mix_inputs


def make_soft_label(c, p, r, alpha, beta, num_classes) -> np.ndarray:
    """Mixing proportions placed at the component class indices."""
    for k in (c, p, r):
        if not 0 <= k < num_classes:
            raise ValueError(f"class index {k} out of range for {num_classes} classes")
    label = np.zeros(num_classes)
    label[c] += alpha
    label[p if beta == 1 else r] += 1.0 - alpha
    return label


def soft_labels(c, p, r, alpha, beta, num_classes) -> np.ndarray:
    """Row-wise :func:`make_soft_label` for index arrays."""
    c, p, r = (np.asarray(v, dtype=np.int64) for v in (c, p, r))
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.int64)
    if np.any((c < 0) | (c >= num_classes)) or np.any((p < 0) | (p >= num_classes)):
        raise ValueError("class index out of range")
    partner = np.where(beta == 1, p, r)
    if np.any((partner < 0) | (partner >= num_classes)):
        raise ValueError("class index out of range")
    rows = np.arange(len(c))
    out = np.zeros((len(c), num_classes))
    np.add.at(out, (rows, c), alpha)
    np.add.at(out, (rows, partner), 1.0 - alpha)
    return out


@dataclass(frozen=True)
class MixupSample:
    mixed_input: np.ndarray
    alpha: float
    beta: int
    anchor_class: int
    anchor_domain: int
    intra_class: int
    cross_class: int
    cross_domain: int
    soft_label: np.ndarray
    mixed_semantics: np.ndarray


@dataclass(frozen=True, eq=False)
class MixupBatch:
    """Row-aligned arrays for one training batch.

    Class indices are positions in the training-class list (rows of the
    semantic matrix), not global class ids. ``intra``/``cross`` index into
    the source batch; ``cross`` is ``-1`` when no other-domain sample exists.
    """

    inputs: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    intra: np.ndarray
    cross: np.ndarray
    soft_labels: np.ndarray
    mixed_semantics: np.ndarray

    def __len__(self):
        return len(self.inputs)

    @property
    def intra_labels(self):
        return self.labels[self.intra]

    @property
    def cross_labels(self):
        # -1 partners resolve to the anchor; they only occur with beta = 1
        return np.where(self.cross >= 0, self.labels[self.cross], self.labels)

    def sample(self, i) -> MixupSample:
        k = self.cross[i]
        return MixupSample(
            mixed_input=self.inputs[i],
            alpha=float(self.alpha[i]),
            beta=int(self.beta[i]),
            anchor_class=int(self.labels[i]),
            anchor_domain=int(self.domains[i]),
            intra_class=int(self.labels[self.intra[i]]),
            cross_class=int(self.labels[k]) if k >= 0 else -1,
            cross_domain=int(self.domains[k]) if k >= 0 else -1,
            soft_label=self.soft_labels[i],
            mixed_semantics=self.mixed_semantics[i],
        )

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))


def choose_partners(domains, rng: np.random.Generator):
    """Pick an intra-domain and a cross-domain partner for every row.

    The intra partner excludes the anchor unless it is alone in its domain;
    the cross partner is ``-1`` when the batch has a single domain.
    """
    domains = np.asarray(domains)
    n = len(domains)
    u_intra = rng.random(n)
    u_cross = rng.random(n)
    intra = np.empty(n, dtype=np.int64)
    cross = np.empty(n, dtype=np.int64)
    groups = {d: np.flatnonzero(domains == d) for d in np.unique(domains)}
    others = {d: np.flatnonzero(domains != d) for d in groups}
    for i in range(n):
        same = groups[domains[i]]
        if len(same) > 1:
            same = same[same != i]
        intra[i] = same[int(u_intra[i] * len(same))]
        other = others[domains[i]]
        cross[i] = other[int(u_cross[i] * len(other))] if len(other) else -1
    return intra, cross


def make_mixup_batch(inputs, labels, domains, semantics, lam, gamma_mix, rng) -> MixupBatch:
    """Mix every anchor with a partner chosen by its own Bernoulli draw.

    ``semantics`` is the ``(num_train_classes, m)`` matrix whose rows
    ``labels`` index. Anchors that draw ``beta = 0`` without any
    other-domain sample in the batch fall back to ``beta = 1``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    if len(inputs) < 2:
        raise ValueError("mixup needs a batch of at least two samples")
    alpha, beta = sample_coefficients(lam, gamma_mix, rng, size=len(inputs))
    intra, cross = choose_partners(domains, rng)
    stranded = (beta == 0) & (cross < 0)
    if stranded.any():
        log.warning("no cross-domain partner for %d anchors; using intra-domain mixup", stranded.sum())
        beta = np.where(stranded, 1, beta)
    cross_safe = np.where(cross >= 0, cross, intra)
    x = mix_inputs(inputs, inputs[intra], inputs[cross_safe], alpha, beta)
    c, p, r = labels, labels[intra], labels[cross_safe]
    return MixupBatch(
        inputs=x,
        alpha=alpha,
        beta=beta,
        labels=labels,
        domains=domains,
        intra=intra,
        cross=cross,
        soft_labels=soft_labels(c, p, r, alpha, beta, len(semantics)),
        mixed_semantics=mix_semantics(semantics[c], semantics[p], semantics[r], alpha, beta),
    )


def pure_batch(inputs, labels, domains, semantics) -> MixupBatch:
    """Unmixed samples in batch form: alpha = 1, partners are the anchors themselves."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(inputs)
    self_idx = np.arange(n)
    return MixupBatch(
        inputs=inputs,
        alpha=np.ones(n),
        beta=np.ones(n, dtype=np.int64),
        labels=labels,
        domains=np.asarray(domains, dtype=np.int64),
        intra=self_idx,
        cross=self_idx,
        soft_labels=soft_labels(labels, labels, labels, np.ones(n), np.ones(n), len(semantics)),
        mixed_semantics=np.asarray(semantics, dtype=np.float64)[labels],
    )
