import itertools
import math

import numpy as np
import pytest

from ucdr import autodiff as ad
from ucdr import losses
from ucdr.mixup import make_mixup_batch
from ucdr.model import ModelDims, forward_vars, init


def _dist(u, v):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))


def scalar_sn(f, a_mix, anchors, kappa):
    """Loop-level oracle for one sample's neighbourhood term."""
    gt = [_dist(a_mix, a) for a in anchors]
    top = max(gt)
    return sum(math.exp(-kappa * g / top) * (_dist(f, a) - g) ** 2 for a, g in zip(anchors, gt))


def test_weight_vector_example():
    anchors = np.array([[0.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    w = losses.weight_vector(anchors[0], anchors, kappa=2.0)
    np.testing.assert_allclose(w, [1.0, math.exp(-1.5), math.exp(-2.0)], rtol=1e-14)
    assert w[1] == pytest.approx(0.22313, abs=1e-5)
    assert w[2] == pytest.approx(0.13534, abs=1e-5)


@pytest.mark.parametrize("kappa", [0.0, 0.5, 1.0, 2.0, 4.0])
def test_weight_vector_range_and_argmin(kappa):
    rng = np.random.default_rng(3)
    anchors = rng.normal(size=(7, 5))
    for c in range(7):
        w = losses.weight_vector(anchors[c], anchors, kappa)
        assert w[c] == 1.0
        assert np.all(w >= math.exp(-kappa) - 1e-15) and np.all(w <= 1.0)
        far = np.argmax(np.linalg.norm(anchors - anchors[c], axis=1))
        assert w[far] == pytest.approx(math.exp(-kappa), rel=1e-14)
        if kappa == 0:
            np.testing.assert_array_equal(w, 1.0)


def test_weight_vector_rejects_degenerate():
    with pytest.raises(ValueError):
        losses.weight_vector(np.ones(2), np.ones((3, 2)), 1.0)
    with pytest.raises(ValueError):
        losses.weight_vector(np.ones(2), np.ones((1, 2)), 1.0)


def test_sn_zero_when_feature_is_its_anchor():
    anchors = np.random.default_rng(0).normal(size=(5, 4))
    assert losses.semantic_neighborhood_loss(anchors[2], anchors[2], anchors, 2.0).item() == 0.0


@pytest.mark.parametrize("kappa,expected", [(0.0, 2.0), (1.0, 1.0 + math.exp(-1.0))])
def test_sn_two_class_examples(kappa, expected):
    anchors = np.array([[0.0, 0.0], [2.0, 0.0]])
    f = np.array([1.0, 0.0])
    assert scalar_sn(f, anchors[0], anchors, kappa) == pytest.approx(expected, abs=1e-15)
    value = losses.semantic_neighborhood_loss(f, anchors[0], anchors, kappa).item()
    assert value == pytest.approx(expected, abs=1e-12)
    if kappa == 1.0:
        assert value == pytest.approx(1.36788, abs=1e-5)


def test_sn_batch_mean_matches_loop_oracle():
    rng = np.random.default_rng(11)
    anchors = rng.normal(size=(6, 3))
    f = rng.normal(size=(5, 3))
    a_mix = rng.normal(size=(5, 3))
    expected = np.mean([scalar_sn(f[i], a_mix[i], anchors, 1.5) for i in range(5)])
    assert losses.semantic_neighborhood_loss(f, a_mix, anchors, 1.5).item() == pytest.approx(expected, rel=1e-12)


def test_mp_uniform_logits_is_log_classes():
    for label in ([1, 0, 0, 0], [0.25, 0.25, 0.5, 0], [0.6, 0, 0.4, 0]):
        value = losses.mixture_prediction_loss(np.zeros(4), np.array(label, float)).item()
        assert abs(value - math.log(4)) < 1e-9


def test_mp_equals_entropy_at_matching_softmax():
    label = np.array([0.6, 0.0, 0.4, 0.0])
    entropy = -(0.6 * math.log(0.6) + 0.4 * math.log(0.4))
    assert entropy == pytest.approx(0.67301, abs=1e-5)
    logits = np.log(np.where(label > 0, label, 1e-300))
    value = losses.mixture_prediction_loss(logits, label).item()
    assert abs(value - entropy) < 1e-9


def test_mp_is_at_least_entropy():
    rng = np.random.default_rng(5)
    for _ in range(200):
        label = rng.dirichlet(np.ones(6))
        logits = rng.normal(scale=3, size=6)
        h = -np.sum(label * np.log(label))
        assert losses.mixture_prediction_loss(logits, label).item() - h >= -1e-12


def test_mp_one_hot_is_standard_ce():
    logits = np.array([0.2, -1.0, 3.0])
    expected = -math.log(math.exp(-1.0) / sum(math.exp(z) for z in logits))
    value = losses.mixture_prediction_loss(logits, np.array([0.0, 1.0, 0.0])).item()
    assert value == pytest.approx(expected, rel=1e-14)


def test_semantic_logits_examples():
    anchors = np.eye(2)
    s = losses.semantic_logits(anchors[0], anchors).value
    np.testing.assert_allclose(s, [math.e / (math.e + 1), 1 / (math.e + 1)], rtol=1e-14)
    np.testing.assert_allclose(s, [0.73106, 0.26894], atol=1e-5)
    np.testing.assert_allclose(losses.semantic_logits(np.array([1.0, 1.0]), anchors).value, [0.5, 0.5])
    f = np.array([0.3, -2.0])
    np.testing.assert_allclose(
        losses.semantic_logits(7.5 * f, anchors).value, losses.semantic_logits(f, anchors).value, atol=1e-15
    )
    with pytest.raises(ValueError):
        losses.semantic_logits(np.zeros(2), anchors)


def test_mixup_ce_examples():
    s = np.array([0.2, 0.5, 0.3])
    ce7 = losses.cross_entropy(np.array([0.0, 1.0, 0.0]), s).item()
    assert losses.mixup_classification_loss(s, 1.0, 1, 1, 2, 0).item() == pytest.approx(ce7, abs=1e-15)
    assert ce7 == pytest.approx(-math.log(0.5))
    half = losses.mixup_classification_loss(np.array([0.5, 0.5]), 0.5, 1, 0, 1, 1).item()
    assert half == pytest.approx(0.69315, abs=1e-5)
    assert half == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        losses.mixup_classification_loss(s, 0.5, 1, 0, 3, 0)


def test_mixup_ce_equals_soft_target_ce():
    rng = np.random.default_rng(2)
    s = rng.dirichlet(np.ones(5), size=4)
    alpha = rng.uniform(size=4)
    beta = np.array([1, 0, 1, 0])
    c, p, r = rng.integers(0, 5, size=(3, 4))
    targets = losses.mixup_targets(alpha, beta, c, p, r, 5)
    a = losses.mixup_classification_loss(s, alpha, beta, c, p, r).item()
    b = losses.cross_entropy(targets, s).item()
    assert a == pytest.approx(b, rel=1e-13)


def _instance(seed, num_classes=6, input_dim=10, m=5, batch=8):
    rng = np.random.default_rng(seed)
    dims = ModelDims(input_dim, (12,), num_classes, m)
    model = init(dims, seed)
    anchors = rng.normal(size=(num_classes, m))
    x = rng.normal(size=(batch, input_dim))
    labels = rng.integers(0, num_classes, size=batch)
    domains = rng.integers(0, 3, size=batch)
    mb = make_mixup_batch(x, labels, domains, anchors, 2.0, 0.5, rng)
    return dims, model, anchors, mb


def _loss_values(dims, model, anchors, mb, kappa=1.5):
    tape = ad.Tape()
    p = {k: tape.const(v) for k, v in model.params.items()}
    _, logits, f = forward_vars(dims, p, tape.const(mb.inputs))
    _, parts = losses.combined_loss(mb, f, logits, anchors, kappa, 1.0, 1.0)
    return parts


def test_combined_loss_weights():
    dims, model, anchors, mb = _instance(0)
    tape = ad.Tape()
    p = {k: tape.const(v) for k, v in model.params.items()}
    _, logits, f = forward_vars(dims, p, tape.const(mb.inputs))
    total, parts = losses.combined_loss(mb, f, logits, anchors, 2.0, 0.0, 0.0)
    assert total.item() == parts.ce_mix
    total, parts = losses.combined_loss(mb, f, logits, anchors, 2.0, 1.0, 1.0)
    assert total.item() == pytest.approx(parts.ce_mix + parts.mp + parts.sn, rel=1e-15)
    total, parts = losses.combined_loss(mb, f, logits, anchors, 1.0, 0.5, 1.0)
    assert total.item() == pytest.approx(parts.ce_mix + 0.5 * parts.mp + parts.sn, rel=1e-15)
    assert min(parts.ce_mix, parts.mp, parts.sn) >= 0


def test_class_permutation_equivariance():
    dims, model, anchors, mb = _instance(4)
    before = _loss_values(dims, model, anchors, mb)
    perm = np.random.default_rng(9).permutation(dims.num_classes)
    inv = np.argsort(perm)  # new index of old class j is inv[j]
    params = dict(model.params.items())
    params["mp.W"] = params["mp.W"][perm]
    params["mp.b"] = params["mp.b"][perm]
    permuted_model = model.with_params(ad.ParamStore(params))
    permuted = type(mb)(
        inputs=mb.inputs, alpha=mb.alpha, beta=mb.beta, labels=inv[mb.labels], domains=mb.domains,
        intra=mb.intra, cross=mb.cross, soft_labels=mb.soft_labels[:, perm],
        mixed_semantics=mb.mixed_semantics,
    )
    after = _loss_values(dims, permuted_model, anchors[perm], permuted)
    for name in ("ce_mix", "mp", "sn", "total"):
        assert abs(getattr(after, name) - getattr(before, name)) < 1e-12


def test_domain_labels_do_not_enter_the_loss():
    dims, model, anchors, mb = _instance(6)
    before = _loss_values(dims, model, anchors, mb)
    relabeled = type(mb)(**{**mb.__dict__, "domains": (mb.domains + 7) % 11})
    assert _loss_values(dims, model, anchors, relabeled) == before


def _combined_check(seed, which="all"):
    rng = np.random.default_rng(100 + seed)
    num_classes = int(rng.integers(2, 9))
    m = int(rng.integers(2, 9))
    input_dim = int(rng.integers(2, 17))
    dims, model, anchors, mb = _instance(seed, num_classes, input_dim, m, batch=6)
    weights = {"all": (1.0, 1.0), "ce": (0.0, 0.0), "mp": (1.0, 0.0), "sn": (0.0, 1.0)}[which]

    def loss(tape, p):
        _, logits, f = forward_vars(dims, p, tape.const(mb.inputs))
        total, _ = losses.combined_loss(mb, f, logits, anchors, 1.5, *weights)
        return total

    return ad.grad_check(loss, model.params, h=1e-5)


@pytest.mark.parametrize("seed", range(20))
def test_combined_loss_gradient(seed):
    report = _combined_check(seed)
    assert report.max_rel_error < 1e-4, report.worst()


def test_every_parameter_receives_gradient():
    dims, model, anchors, mb = _instance(8, batch=16)

    def loss(tape, p):
        _, logits, f = forward_vars(dims, p, tape.const(mb.inputs))
        return losses.combined_loss(mb, f, logits, anchors, 2.0, 1.0, 1.0)[0]

    grad = ad.value_and_grad(loss, model.params).gradient
    assert np.all(grad != 0)


@pytest.mark.parametrize("alpha,beta", list(itertools.product([0.0, 0.3, 1.0], [0, 1])))
def test_losses_non_negative(alpha, beta):
    rng = np.random.default_rng(1)
    anchors = rng.normal(size=(4, 3))
    f = rng.normal(size=(1, 3))
    s = losses.semantic_logits(f, anchors)
    assert losses.mixup_classification_loss(s, alpha, beta, 0, 1, 2).item() >= 0
    label = losses.mixup_targets(alpha, beta, 0, 1, 2, 4)
    assert losses.mixture_prediction_loss(rng.normal(size=4), label[0]).item() >= 0
    a_mix = label @ anchors
    assert losses.semantic_neighborhood_loss(f, a_mix, anchors, 1.0).item() >= 0
