import numpy as np
import pytest

from ucdr import synthgen as sg
from ucdr.core import validate_dataset


def assert_same_dataset(a, b):
    for field in ("inputs", "class_ids", "domain_ids", "sample_ids"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert (a.num_classes, a.num_domains) == (b.num_classes, b.num_domains)


def test_semantics_unit_norm_and_deterministic():
    a = sg.generate_semantics(20, 16, seed=3)
    np.testing.assert_allclose(np.linalg.norm(a.vectors, axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(a.vectors, sg.generate_semantics(20, 16, seed=3).vectors)
    assert not np.array_equal(a.vectors, sg.generate_semantics(20, 16, seed=4).vectors)


@pytest.mark.parametrize("seed", range(10))
def test_eight_classes_form_two_separated_clusters(seed):
    sem = sg.generate_semantics(8, 8, seed)
    cos = sem.vectors @ sem.vectors.T
    cluster = sg.semantic_clusters(8)
    same = (cluster[:, None] == cluster[None, :]) & ~np.eye(8, dtype=bool)
    assert cos[same].min() > cos[cluster[:, None] != cluster[None, :]].max()


def test_semantic_dimension_too_small():
    with pytest.raises(ValueError):
        sg.generate_semantics(8, 3, 0)
    with pytest.raises(ValueError):
        sg.generate_semantics(1, 8, 0)


def test_default_benchmark_shape_and_validity():
    ds, sem, spec = sg.default_benchmark()
    assert len(ds) == 3000
    assert ds.input_dim == 32 and sem.dim == 16
    assert validate_dataset(ds, sem).ok


def test_generator_is_deterministic():
    a, _, _ = sg.default_benchmark(seed=5, samples_per_class_per_domain=3)
    b, _, _ = sg.default_benchmark(seed=5, samples_per_class_per_domain=3)
    assert_same_dataset(a, b)


def test_zero_shift_domains_share_a_distribution():
    ds, _, _ = sg.default_benchmark(domain_shift_strength=0.0, samples_per_class_per_domain=200)
    for c in (0, 7):
        means = [ds.inputs[(ds.class_ids == c) & (ds.domain_ids == d)].mean(axis=0) for d in range(5)]
        # every domain mean sits within sampling error of the same prototype
        spread = max(np.linalg.norm(m - means[0]) for m in means)
        assert spread < 6 * 0.05 * np.sqrt(32 / 200)


def test_zero_spread_cells_are_identical():
    ds, _, _ = sg.default_benchmark(class_spread=0.0, samples_per_class_per_domain=4)
    cell = ds.inputs[(ds.class_ids == 3) & (ds.domain_ids == 2)]
    assert np.all(cell == cell[0])


def test_prototype_classifier_is_perfect_without_shift():
    ds, sem, _ = sg.default_benchmark(domain_shift_strength=0.0)
    centroids = np.stack([ds.inputs[ds.class_ids == c].mean(axis=0) for c in range(20)])
    pred = np.argmin(np.linalg.norm(ds.inputs[:, None] - centroids[None], axis=-1), axis=1)
    assert np.mean(pred == ds.class_ids) == 1.0


def nn_accuracy(queries, q_labels, gallery, g_labels, exclude_self=False):
    d = np.linalg.norm(queries[:, None] - gallery[None], axis=-1)
    if exclude_self:
        np.fill_diagonal(d, np.inf)
    return float(np.mean(g_labels[np.argmin(d, axis=1)] == q_labels))


def test_default_domain_gap_is_at_least_twenty_points():
    ds, _, _ = sg.default_benchmark()
    within, cross = [], []
    for d in range(1, 5):
        q = ds.domain_ids == d
        within.append(nn_accuracy(ds.inputs[q], ds.class_ids[q], ds.inputs[q], ds.class_ids[q], True))
        g = ds.domain_ids == 0
        cross.append(nn_accuracy(ds.inputs[q], ds.class_ids[q], ds.inputs[g], ds.class_ids[g]))
    assert np.mean(within) - np.mean(cross) >= 0.20


def test_export_import_roundtrip(tmp_path):
    ds, sem, spec = sg.default_benchmark(samples_per_class_per_domain=2)
    sg.export(ds, sem, tmp_path, spec)
    back, back_sem = sg.import_dir(tmp_path)
    assert_same_dataset(ds, back)
    np.testing.assert_array_equal(sem.vectors, back_sem.vectors)
    assert back.class_names == ds.class_names and back.domain_names == ds.domain_names


def test_missing_semantics_is_flagged(tmp_path):
    ds, _, _ = sg.default_benchmark(samples_per_class_per_domain=1)
    sg.export(ds, None, tmp_path)
    back, sem = sg.import_dir(tmp_path)
    assert sem is None
    assert len(back) == len(ds)


def test_bad_row_names_its_line(tmp_path):
    ds, sem, _ = sg.default_benchmark(samples_per_class_per_domain=1)
    sg.export(ds, sem, tmp_path)
    path = tmp_path / "samples.csv"
    lines = path.read_text().splitlines()
    lines[4] = lines[4].rsplit(",", 1)[0]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(sg.FormatError, match="line 5"):
        sg.import_dir(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(sg.FormatError, match="manifest"):
        sg.import_dir(tmp_path)


def test_spec_validation():
    with pytest.raises(ValueError):
        sg.GeneratorSpec(input_dim=8, semantic_dim=16)
    with pytest.raises(ValueError):
        sg.GeneratorSpec(class_spread=-1.0)
