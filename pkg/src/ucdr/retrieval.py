"""Exact Euclidean ranking and mAP@k / Prec@k evaluation.

Average precision at k divides by ``min(R, k)`` where ``R`` is the number of
relevant items in the whole search set, so a perfect top-k scores 1 even
when more than k relevant items exist.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Dataset, SplitSpec, query_and_search_sets


@dataclass(frozen=True, eq=False)
class RankedList:
    query_id: int
    order: np.ndarray  # positions into the search set, best first
    ids: np.ndarray
    distances: np.ndarray


def _distances(queries, search):
    # explicit differences rather than the |a|^2 - 2ab + |b|^2 expansion: exact ties survive
    diff = queries[:, None, :] - search[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def rank(query_feature, search_features, search_ids=None, query_id=-1) -> RankedList:
    """Order the search set by distance to the query, ties broken by ascending id."""
    search_features = np.asarray(search_features, dtype=np.float64)
    if search_features.ndim != 2 or len(search_features) == 0:
        raise ValueError("search set is empty")
    q = np.asarray(query_feature, dtype=np.float64)
    if q.shape != (search_features.shape[1],):
        raise ValueError("query and search features differ in dimension")
    ids = np.arange(len(search_features)) if search_ids is None else np.asarray(search_ids)
    d = _distances(q[None, :], search_features)[0]
    order = np.lexsort((ids, d))
    return RankedList(query_id, order, ids[order], d[order])


def rank_all(query_features, search_features, search_ids):
    """Ranking order matrix ``(num_queries, search_size)``."""
    d = _distances(np.asarray(query_features, float), np.asarray(search_features, float))
    ids = np.broadcast_to(np.asarray(search_ids), d.shape)
    return np.lexsort((ids, d), axis=1)


def precision_at_k(relevance, k) -> float:
    """Fraction relevant among the first ``min(k, len)`` ranked items.

    ``relevance`` is a boolean sequence in rank order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = np.asarray(relevance, dtype=bool)
    n = min(k, len(rel))
    return float(rel[:n].sum() / n) if n else 0.0


def average_precision_at_k(relevance, k, num_relevant=None) -> float:
    """``sum_{i<=k} rel_i * Prec@i / min(R, k)``; 0 when ``R = 0``.

    ``R`` defaults to the relevant count of the full ranked ``relevance``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = np.asarray(relevance, dtype=bool)
    R = int(rel.sum()) if num_relevant is None else int(num_relevant)
    if R == 0:
        return 0.0
    top = rel[:k]
    hits = np.cumsum(top)
    prec = hits / np.arange(1, len(top) + 1)
    # accumulate in rank order so the result does not depend on numpy's summation tree
    return float(np.cumsum(prec * top)[-1] / min(R, k))


def metrics_from_order(order, query_labels, search_labels, k):
    """Per-query AP@k and Prec@k given a ranking order matrix."""
    rel = search_labels[order] == np.asarray(query_labels)[:, None]
    R = rel.sum(axis=1)
    top = rel[:, :k]
    hits = np.cumsum(top, axis=1)
    prec_i = hits / np.arange(1, top.shape[1] + 1)
    denom = np.minimum(R, k)
    ap = np.where(R > 0, np.cumsum(prec_i * top, axis=1)[:, -1] / np.maximum(denom, 1), 0.0)
    pk = top.sum(axis=1) / top.shape[1]
    return ap, pk, R


@dataclass
class EvalReport:
    protocol: str
    search_set_mode: str
    k: int
    query_ids: list
    query_classes: list
    ap: list
    prec: list
    map_at_k: float
    prec_at_k: float
    num_queries: int
    search_size: int
    queries_without_relevant: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, out_dir, suffix=""):
        """Write ``eval{suffix}.json`` and ``eval{suffix}.csv`` into ``out_dir``."""
        from pathlib import Path

        out = Path(out_dir)
        (out / f"eval{suffix}.json").write_text(self.to_json() + "\n")
        with open(out / f"eval{suffix}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_id", "class", f"ap_at_{self.k}"])
            for qid, c, ap in zip(self.query_ids, self.query_classes, self.ap):
                w.writerow([qid, c, repr(ap)])


def evaluate_features(qf, qc, qids, sf, sc, sids, k=None, protocol="", mode="") -> EvalReport:
    """Rank every query against the search set and aggregate AP@k / Prec@k.

    ``k`` defaults to ``min(200, search size)``. Relevance is class equality.
    """
    qc, sc = np.asarray(qc), np.asarray(sc)
    if len(qf) == 0 or len(sf) == 0:
        raise ValueError("empty query or search set")
    k = min(200, len(sf)) if k is None else int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    order = rank_all(qf, sf, sids)
    ap, pk, R = metrics_from_order(order, qc, sc, k)
    return EvalReport(
        protocol=protocol,
        search_set_mode=mode,
        k=k,
        query_ids=[int(i) for i in qids],
        query_classes=[int(c) for c in qc],
        ap=[float(a) for a in ap],
        prec=[float(p) for p in pk],
        map_at_k=float(np.mean(ap)),
        prec_at_k=float(np.mean(pk)),
        num_queries=len(qf),
        search_size=len(sf),
        queries_without_relevant=[int(i) for i in np.asarray(qids)[R == 0]],
    )


def evaluate(model, ds: Dataset, split: SplitSpec, k=None) -> EvalReport:
    """Embed the protocol's query and search sets and score the retrieval."""
    from .model import embed

    queries, search = query_and_search_sets(ds, split)
    return evaluate_features(
        embed(model, queries.inputs),
        queries.class_ids,
        queries.sample_ids,
        embed(model, search.inputs),
        search.class_ids,
        search.sample_ids,
        k=k,
        protocol=split.protocol,
        mode=split.search_set_mode,
    )


def chance_map(query_classes, search_classes, k, trials=200, seed=0) -> float:
    """Mean AP@k of uniformly random rankings, estimated by simulation."""
    rng = np.random.default_rng(seed)
    sc = np.asarray(search_classes)
    qc = np.asarray(query_classes)
    total = 0.0
    for _ in range(trials):
        order = np.argsort(rng.random((len(qc), len(sc))), axis=1)
        total += metrics_from_order(order, qc, sc, k)[0].mean()
    return total / trials
