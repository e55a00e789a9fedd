"""Synthetic multi-domain datasets with clustered class semantics, plus disk I/O."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .core import Dataset, SemanticTable

CLUSTER_SIZE = 4
WITHIN_CLUSTER_JITTER = 0.55  # expected within-cluster cosine ~ 1 / (1 + jitter^2)


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int = 20
    num_domains: int = 5
    samples_per_class_per_domain: int = 30
    input_dim: int = 32
    semantic_dim: int = 16
    class_spread: float = 0.05
    domain_shift_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_classes, self.num_domains, self.samples_per_class_per_domain,
                  self.input_dim, self.semantic_dim)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if self.input_dim < self.semantic_dim:
            raise ValueError("input_dim must be >= semantic_dim")
        if self.class_spread < 0 or self.domain_shift_strength < 0:
            raise ValueError("spread and shift must be non-negative")


def _cluster_semantics(num_classes, m, rng):
    n_clusters = math.ceil(num_classes / CLUSTER_SIZE)
    cluster_of = np.arange(num_classes) // CLUSTER_SIZE
    if n_clusters < m:
        basis, _ = np.linalg.qr(rng.standard_normal((m, m)))
        centers = basis[:, :n_clusters].T
        complement = basis[:, n_clusters:]
        jitter = rng.standard_normal((num_classes, m - n_clusters)) @ complement.T
    else:
        centers = rng.standard_normal((n_clusters, m))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        jitter = rng.standard_normal((num_classes, m))
    jitter /= np.linalg.norm(jitter, axis=1, keepdims=True)
    vecs = centers[cluster_of] + WITHIN_CLUSTER_JITTER * jitter
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True), cluster_of


def _separated(vecs, cluster_of):
    cos = vecs @ vecs.T
    same = cluster_of[:, None] == cluster_of[None, :]
    np.fill_diagonal(same, False)
    cross = cluster_of[:, None] != cluster_of[None, :]
    if not same.any() or not cross.any():
        return True
    return cos[same].min() > cos[cross].max()


def generate_semantics(num_classes, m, seed, max_attempts=10) -> SemanticTable:
    """Unit vectors grouped into clusters of four neighbouring classes.

    Within a cluster every cosine exceeds every cross-cluster cosine; a draw
    that violates this is regenerated (up to ``max_attempts`` times).
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if m < 4:
        raise ValueError("semantic dimension must be >= 4 to realise the cluster structure")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        vecs, cluster_of = _cluster_semantics(num_classes, m, rng)
        if _separated(vecs, cluster_of):
            return SemanticTable(vecs, l2_normalized=True)
    raise RuntimeError(f"no well-separated semantic table after {max_attempts} attempts")


def semantic_clusters(num_classes) -> np.ndarray:
    return np.arange(num_classes) // CLUSTER_SIZE


def _domain_maps(spec, rng):
    n = spec.input_dim
    maps = []
    for _ in range(spec.num_domains):
        g = rng.standard_normal((n, n))
        skew = (g - g.T) / np.sqrt(2 * n)
        rotation = expm(spec.domain_shift_strength * skew)
        bias = rng.standard_normal(n)
        bias *= spec.domain_shift_strength * 0.5 / np.linalg.norm(bias)
        maps.append((rotation, bias))
    return maps


def generate_dataset(spec: GeneratorSpec, sem: SemanticTable) -> Dataset:
    """Samples = domain rotation/offset of a lifted class prototype + isotropic noise.

    The lift is a fixed isometry from semantic space into input space, so
    prototypes keep the semantic geometry. ``class_spread`` is the per-coordinate
    noise standard deviation.
    """
    if sem.dim != spec.semantic_dim or len(sem) < spec.num_classes:
        raise ValueError("semantic table does not match the generator spec")
    rng = np.random.default_rng(spec.seed)
    lift, _ = np.linalg.qr(rng.standard_normal((spec.input_dim, spec.semantic_dim)))
    prototypes = sem.matrix(range(spec.num_classes)) @ lift.T
    maps = _domain_maps(spec, rng)
    n = spec.samples_per_class_per_domain
    inputs, classes, domains = [], [], []
    for d, (rotation, bias) in enumerate(maps):
        for c in range(spec.num_classes):
            noise = spec.class_spread * rng.standard_normal((n, spec.input_dim))
            inputs.append((prototypes[c] @ rotation.T + bias) + noise)
            classes.append(np.full(n, c))
            domains.append(np.full(n, d))
    return Dataset(
        np.concatenate(inputs),
        np.concatenate(classes),
        np.concatenate(domains),
        spec.num_classes,
        spec.num_domains,
        class_names=[f"class{c}" for c in range(spec.num_classes)],
        domain_names=["real"] + [f"domain{d}" for d in range(1, spec.num_domains)],
    )


def default_benchmark(seed=0, **overrides):
    """The 20-class, 5-domain benchmark and its semantic table."""
    spec = GeneratorSpec(seed=seed, **overrides)
    sem = generate_semantics(spec.num_classes, spec.semantic_dim, spec.seed)
    return generate_dataset(spec, sem), sem, spec


# --- directory format --------------------------------------------------------


class FormatError(ValueError):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


def export(ds: Dataset, sem, directory, spec: GeneratorSpec = None):
    """Write ``manifest.json``, ``samples.csv`` and (if given) ``semantics.csv``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_classes": ds.num_classes,
        "num_domains": ds.num_domains,
        "input_dim": ds.input_dim,
        "class_names": ds.class_names or [str(c) for c in range(ds.num_classes)],
        "domain_names": ds.domain_names or [str(d) for d in range(ds.num_domains)],
    }
    if sem is not None:
        manifest["semantic_dim"] = sem.dim
        manifest["semantics_l2_normalized"] = bool(sem.l2_normalized)
    if spec is not None:
        manifest["generator"] = asdict(spec)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class_id", "domain_id"] + [f"x{i}" for i in range(ds.input_dim)])
        for sid, c, d, x in zip(ds.sample_ids, ds.class_ids, ds.domain_ids, ds.inputs):
            w.writerow([int(sid), int(c), int(d)] + [_fmt(v) for v in x])
    sem_path = out / "semantics.csv"
    if sem is not None:
        with open(sem_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id"] + [f"a{i}" for i in range(sem.dim)])
            for c, v in zip(sem.class_ids, sem.vectors):
                w.writerow([int(c)] + [_fmt(x) for x in v])
    elif sem_path.exists():
        sem_path.unlink()


def _read_rows(path, n_cols, int_cols):
    rows_i, rows_f = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != n_cols:
            raise FormatError(f"{path.name} line 1: expected {n_cols} header columns")
        for lineno, row in enumerate(reader, 2):
            if len(row) != n_cols:
                raise FormatError(f"{path.name} line {lineno}: expected {n_cols} columns, got {len(row)}")
            try:
                rows_i.append([int(v) for v in row[:int_cols]])
                rows_f.append([float(v) for v in row[int_cols:]])
            except ValueError:
                raise FormatError(f"{path.name} line {lineno}: unparsable value") from None
    return (np.array(rows_i, dtype=np.int64).reshape(-1, int_cols),
            np.array(rows_f, dtype=np.float64).reshape(-1, n_cols - int_cols))


def import_dir(directory):
    """Read a dataset directory; returns ``(Dataset, SemanticTable or None)``."""
    src = Path(directory)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{src}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json line {exc.lineno}: {exc.msg}") from None
    for key in ("num_classes", "num_domains", "input_dim"):
        if not isinstance(manifest.get(key), int):
            raise FormatError(f"manifest.json: missing or non-integer {key!r}")
    dim = manifest["input_dim"]
    ints, feats = _read_rows(src / "samples.csv", 3 + dim, 3)
    ds = Dataset(
        feats.reshape(-1, dim),
        ints[:, 1],
        ints[:, 2],
        manifest["num_classes"],
        manifest["num_domains"],
        sample_ids=ints[:, 0],
        class_names=manifest.get("class_names"),
        domain_names=manifest.get("domain_names"),
    )
    sem = None
    sem_path = src / "semantics.csv"
    if sem_path.exists():
        with open(sem_path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if not header:
            raise FormatError("semantics.csv line 1: empty header")
        ids, vecs = _read_rows(sem_path, len(header), 1)
        sem = SemanticTable(vecs, ids[:, 0], l2_normalized=manifest.get("semantics_l2_normalized", False))
    return ds, sem
