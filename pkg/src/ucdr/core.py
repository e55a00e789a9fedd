"""Data model, protocol splits and run configuration."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Iterator, Optional

import numpy as np

PROTOCOLS = ("UcCDR", "UdCDR", "UCDR")
SEARCH_MODES = ("unseen_only", "seen_plus_unseen")


@dataclass(frozen=True)
class Sample:
    input: np.ndarray
    class_id: int
    domain_id: int
    sample_id: int = -1


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented sample storage.

    ``inputs`` is ``(n, input_dim)``; ``class_ids``, ``domain_ids`` and
    ``sample_ids`` are length ``n`` integer arrays. Iterating yields
    :class:`Sample` objects.
    """

    inputs: np.ndarray
    class_ids: np.ndarray
    domain_ids: np.ndarray
    num_classes: int
    num_domains: int
    sample_ids: Optional[np.ndarray] = None
    class_names: Optional[list] = None
    domain_names: Optional[list] = None

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64, ndmin=2)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "class_ids", np.asarray(self.class_ids, dtype=np.int64))
        object.__setattr__(self, "domain_ids", np.asarray(self.domain_ids, dtype=np.int64))
        ids = self.sample_ids
        ids = np.arange(len(inputs), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        object.__setattr__(self, "sample_ids", ids)
        for arr in (inputs, self.class_ids, self.domain_ids, ids):
            arr.setflags(write=False)
        if not (len(self.class_ids) == len(self.domain_ids) == len(ids) == len(inputs)):
            raise ValueError("inputs, class_ids, domain_ids and sample_ids must have equal length")

    @classmethod
    def from_samples(cls, samples, num_classes, num_domains, input_dim=None):
        samples = list(samples)
        if input_dim is None:
            input_dim = len(samples[0].input) if samples else 0
        inputs = np.zeros((len(samples), input_dim))
        for i, s in enumerate(samples):
            if len(s.input) != input_dim:
                raise ValueError(f"sample {i}: input length {len(s.input)} != {input_dim}")
            inputs[i] = s.input
        ids = [s.sample_id if s.sample_id >= 0 else i for i, s in enumerate(samples)]
        return cls(
            inputs,
            [s.class_id for s in samples],
            [s.domain_id for s in samples],
            num_classes,
            num_domains,
            sample_ids=ids,
        )

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i) -> Sample:
        return Sample(self.inputs[i], int(self.class_ids[i]), int(self.domain_ids[i]), int(self.sample_ids[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def samples(self) -> list:
        return list(self)

    def select(self, mask) -> "Dataset":
        """Sub-dataset with the same class/domain bookkeeping."""
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Dataset(
            self.inputs[idx],
            self.class_ids[idx],
            self.domain_ids[idx],
            self.num_classes,
            self.num_domains,
            sample_ids=self.sample_ids[idx],
            class_names=self.class_names,
            domain_names=self.domain_names,
        )

    def mask(self, classes=None, domains=None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if classes is not None:
            m &= np.isin(self.class_ids, np.fromiter(classes, dtype=np.int64))
        if domains is not None:
            m &= np.isin(self.domain_ids, np.fromiter(domains, dtype=np.int64))
        return m


@dataclass(frozen=True, eq=False)
class SemanticTable:
    """Per-class semantic vectors stored as a ``(num_rows, m)`` matrix.

    ``class_ids[i]`` names the class of row ``i``.
    """

    vectors: np.ndarray
    class_ids: Optional[np.ndarray] = None
    l2_normalized: bool = False

    def __post_init__(self):
        vecs = np.array(self.vectors, dtype=np.float64, ndmin=2)
        ids = self.class_ids
        ids = np.arange(len(vecs), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(ids) != len(vecs):
            raise ValueError("class_ids and vectors must have equal length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate class id in semantic table")
        if not np.all(np.isfinite(vecs)):
            raise ValueError("semantic vectors must be finite")
        if self.l2_normalized:
            norms = np.linalg.norm(vecs, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("l2_normalized table has a vector with norm != 1")
        vecs.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "class_ids", ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, class_id):
        return int(class_id) in self._index

    @cached_property
    def _index(self) -> dict:
        return {int(c): i for i, c in enumerate(self.class_ids)}

    def __getitem__(self, class_id) -> np.ndarray:
        return self.vectors[self._index[int(class_id)]]

    def matrix(self, class_ids) -> np.ndarray:
        """Rows for ``class_ids`` in the given order."""
        index = self._index
        return self.vectors[[index[int(c)] for c in class_ids]]


@dataclass(frozen=True)
class SplitSpec:
    protocol: str
    seen_classes: tuple
    val_classes: tuple
    unseen_classes: tuple
    train_domains: tuple
    held_out_domain: Optional[int] = None
    search_set_mode: str = "unseen_only"
    search_domain: int = 0

    def __post_init__(self):
        for name in ("seen_classes", "val_classes", "unseen_classes", "train_domains"):
            object.__setattr__(self, name, tuple(sorted(int(v) for v in getattr(self, name))))
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.search_set_mode not in SEARCH_MODES:
            raise ValueError(f"unknown search set mode {self.search_set_mode!r}")
        seen, val, unseen = map(set, (self.seen_classes, self.val_classes, self.unseen_classes))
        if seen & val or seen & unseen or val & unseen:
            raise ValueError("seen, val and unseen class sets must be pairwise disjoint")
        if self.protocol == "UcCDR":
            if self.held_out_domain is not None:
                raise ValueError("UcCDR keeps every domain in training; no held-out domain")
        else:
            if self.held_out_domain is None:
                raise ValueError(f"{self.protocol} needs a held-out domain")
            if self.held_out_domain in self.train_domains:
                raise ValueError("held-out domain must not be a training domain")
        if self.protocol == "UdCDR" and unseen:
            raise ValueError("UdCDR has no unseen classes")
        if self.search_domain not in self.train_domains:
            raise ValueError("the search domain must be a training domain")

    def with_mode(self, mode: str) -> "SplitSpec":
        d = asdict(self)
        d["search_set_mode"] = mode
        return SplitSpec(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class RunConfig:
    """Training hyperparameters.

    Defaults follow the published recipe: SGD with Nesterov momentum 0.9,
    batch 60, lr 1e-3 decayed exponentially to 1e-6 over 20 epochs, at most
    100 epochs with early-stopping patience 15, gamma2 = 1. ``mix_lambda`` and
    ``gamma_mix`` parameterise the Beta and Bernoulli draws of the mixup.
    """

    kappa: float = 2.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    mix_lambda: float = 2.0
    gamma_mix: float = 0.5
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    decay_epochs: int = 20
    max_epochs: int = 100
    patience: int = 15
    batch_size: int = 60
    momentum: float = 0.9
    seed: int = 0
    latent_dim: Optional[int] = None
    widths: tuple = (64,)
    use_mixup: bool = True
    val_k: int = 200

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kappa < 0 or self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("kappa, gamma1 and gamma2 must be non-negative")
        if self.mix_lambda <= 0:
            raise ValueError("mix_lambda must be positive")
        if not 0.0 <= self.gamma_mix <= 1.0:
            raise ValueError("gamma_mix must lie in [0, 1]")
        if self.lr_start <= 0 or self.lr_end <= 0 or self.lr_end > self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        for name in ("decay_epochs", "max_epochs", "patience", "val_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (mixup needs a partner)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if any(w < 1 for w in self.widths):
            raise ValueError("encoder widths must be positive")

    def replace(self, **changes) -> "RunConfig":
        d = asdict(self)
        d.update(changes)
        return RunConfig(**d)

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            changes[key] = _parse_value(key, value, getattr(base, key), lineno)
        return base.replace(**changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(key, value, default, lineno):
    try:
        if key == "widths":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if key == "latent_dim":
            return None if value.lower() == "none" else int(value)
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(default, int):
            return int(value)
        return float(value)
    except ValueError:
        raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from None


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_dataset(ds: Dataset, sem: Optional[SemanticTable]) -> ValidationReport:
    report = ValidationReport()
    finite = np.all(np.isfinite(ds.inputs), axis=1)
    for i in np.flatnonzero(~finite):
        report.violations.append(f"sample {i}: non-finite input entry")
    for i in np.flatnonzero((ds.class_ids < 0) | (ds.class_ids >= ds.num_classes)):
        report.violations.append(f"sample {i}: class id {ds.class_ids[i]} out of range")
    for i in np.flatnonzero((ds.domain_ids < 0) | (ds.domain_ids >= ds.num_domains)):
        report.violations.append(f"sample {i}: domain id {ds.domain_ids[i]} out of range")
    if len(np.unique(ds.sample_ids)) != len(ds):
        report.violations.append("duplicate sample ids")
    if sem is None:
        report.violations.append("no semantic table")
    else:
        for c in np.unique(ds.class_ids):
            if c not in sem:
                report.violations.append(f"missing semantic vector for class {c}")
    return report


def class_partition_counts(n: int, fractions) -> tuple:
    """Floor the train and val shares; unseen takes the remainder."""
    f_train, f_val, f_unseen = fractions
    if min(fractions) < 0 or abs(f_train + f_val + f_unseen - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    # guard against 0.7*100 = 69.999...
    n_train = int(math.floor(f_train * n + 1e-9))
    n_val = int(math.floor(f_val * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def build_split(
    ds: Dataset,
    protocol: str,
    held_out_domain: Optional[int] = None,
    fractions=(0.6, 0.15, 0.25),
    rng_seed: int = 0,
    search_set_mode: str = "unseen_only",
    search_domain: int = 0,
) -> SplitSpec:
    """Partition classes and domains for one of the three protocols.

    UdCDR has no unseen classes: the unseen share is folded into training.
    """
    protocol = _canonical_protocol(protocol)
    if protocol == "UcCDR" and held_out_domain is not None:
        raise ValueError("UcCDR does not hold out a domain")
    if protocol != "UcCDR":
        if held_out_domain is None:
            raise ValueError(f"{protocol} requires a held-out domain")
        if not 0 <= held_out_domain < ds.num_domains:
            raise ValueError(f"held-out domain {held_out_domain} out of range")
        if held_out_domain == search_domain:
            raise ValueError("the search domain cannot be held out")
    if not 0 <= search_domain < ds.num_domains:
        raise ValueError(f"search domain {search_domain} out of range")

    n = ds.num_classes
    n_train, n_val, n_unseen = class_partition_counts(n, fractions)
    if protocol == "UdCDR":
        n_train, n_unseen = n_train + n_unseen, 0
    perm = np.random.default_rng(rng_seed).permutation(n)
    seen = perm[:n_train]
    val = perm[n_train:n_train + n_val]
    unseen = perm[n_train + n_val:]
    if n_train < 2:
        raise ValueError("need at least two training classes")
    domains = [d for d in range(ds.num_domains) if d != held_out_domain]
    return SplitSpec(
        protocol=protocol,
        seen_classes=seen,
        val_classes=val,
        unseen_classes=unseen,
        train_domains=domains,
        held_out_domain=held_out_domain,
        search_set_mode=search_set_mode,
        search_domain=search_domain,
    )


def _canonical_protocol(name: str) -> str:
    table = {p.lower(): p for p in PROTOCOLS}
    try:
        return table[name.lower()]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; expected one of {PROTOCOLS}") from None


def query_classes(split: SplitSpec) -> tuple:
    return split.seen_classes if split.protocol == "UdCDR" else split.unseen_classes


def query_domains(split: SplitSpec) -> tuple:
    if split.protocol == "UcCDR":
        return tuple(d for d in split.train_domains if d != split.search_domain)
    return (split.held_out_domain,)


def search_classes(split: SplitSpec) -> tuple:
    if split.protocol == "UdCDR":
        # no unseen classes exist; the gallery holds the seen classes in both modes
        return split.seen_classes
    if split.search_set_mode == "unseen_only":
        return split.unseen_classes
    return tuple(sorted(split.seen_classes + split.unseen_classes))


def query_and_search_sets(ds: Dataset, split: SplitSpec) -> tuple:
    """Return ``(queries, search)`` as sub-datasets."""
    queries = ds.select(ds.mask(query_classes(split), query_domains(split)))
    search = ds.select(ds.mask(search_classes(split), [split.search_domain]))
    if len(queries) == 0:
        raise ValueError("empty query set")
    if len(search) == 0:
        raise ValueError("empty search set")
    return queries, search


def training_set(ds: Dataset, split: SplitSpec) -> Dataset:
    return ds.select(ds.mask(split.seen_classes, split.train_domains))


def validation_sets(ds: Dataset, split: SplitSpec) -> tuple:
    """Val-class queries from non-search training domains against the search domain."""
    qdomains = [d for d in split.train_domains if d != split.search_domain]
    queries = ds.select(ds.mask(split.val_classes, qdomains))
    search = ds.select(ds.mask(split.val_classes, [split.search_domain]))
    return queries, search
