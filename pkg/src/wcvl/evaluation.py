"""Feature fusion, retrieval metrics, class separability and evaluation reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ArchMismatch, DegenerateWithinScatter, DimMismatch, LabelAbsentFromGallery, SingleClass
from .model import Checkpoint, check_arch, checkpoint_bytes, forward
from .numerics import NORM_EPS, as_matrix, dot_product_similarity, l2_normalize, pairwise_euclidean

VARIANTS = ("na", "an", "nan")
METRICS = ("euclidean", "dot")
DEFAULT_RANKS = (1, 5, 10)


@dataclass
class EmbeddingSet:
    features: np.ndarray
    labels: np.ndarray
    source: str = "baseline"  # baseline | cross_view | fused
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = as_matrix(self.features)
        self.labels = np.asarray(self.labels)
        if len(self.features) != len(self.labels):
            raise DimMismatch("one label per feature row is required")
        if not np.isfinite(self.features).all():
            raise ValueError("embedding features must be finite")

    def __len__(self) -> int:
        return len(self.labels)


def fuse(x_g, x_cv, variant: str = "na") -> np.ndarray:
    """Combine global and cross-view features (vectors or row-aligned matrices).

    na:  mean of the two unit vectors
    an:  unit vector of the plain mean, pulled toward the larger-norm input
    nan: unit vector of the ``na`` result
    """
    x_g = np.asarray(x_g, dtype=np.float64)
    x_cv = np.asarray(x_cv, dtype=np.float64)
    if x_g.shape != x_cv.shape:
        raise DimMismatch(f"feature shapes differ: {x_g.shape} vs {x_cv.shape}")
    if variant == "na":
        return 0.5 * (l2_normalize(x_g) + l2_normalize(x_cv))
    if variant == "an":
        return l2_normalize(0.5 * (x_g + x_cv))
    if variant == "nan":
        return l2_normalize(0.5 * (l2_normalize(x_g) + l2_normalize(x_cv)))
    raise ValueError(f"unknown fusion variant {variant!r}")


def _scores(queries: np.ndarray, gallery: np.ndarray, metric: str) -> np.ndarray:
    """Scores where smaller ranks first."""
    if metric == "euclidean":
        return pairwise_euclidean(queries, gallery)
    if metric == "dot":
        return -dot_product_similarity(queries, gallery)
    raise ValueError(f"unknown metric {metric!r}")


def rank_gallery(query, gallery: EmbeddingSet, metric: str = "euclidean") -> np.ndarray:
    """Gallery indices best-first; ties keep gallery order."""
    q = as_matrix(query)
    if q.shape[1] != gallery.features.shape[1]:
        raise DimMismatch("query and gallery dimensions differ")
    return np.argsort(_scores(q, gallery.features, metric)[0], kind="stable")


def _match_lists(queries: EmbeddingSet, gallery: EmbeddingSet, metric: str):
    """Per query, a boolean relevance vector over the ranked gallery.

    A gallery item with the same sample id as the query is removed before
    ranking.
    """
    if queries.features.shape[1] != gallery.features.shape[1]:
        raise DimMismatch("query and gallery dimensions differ")
    scores = _scores(queries.features, gallery.features, metric)
    out = []
    for i in range(len(queries)):
        order = np.argsort(scores[i], kind="stable")
        if queries.sample_ids is not None and gallery.sample_ids is not None:
            order = order[gallery.sample_ids[order] != queries.sample_ids[i]]
        matches = gallery.labels[order] == queries.labels[i]
        if not matches.any():
            raise LabelAbsentFromGallery(f"query label {queries.labels[i]} has no gallery match")
        out.append(matches)
    return out


def cmc(queries: EmbeddingSet, gallery: EmbeddingSet, ranks=DEFAULT_RANKS, metric="euclidean") -> list[float]:
    first = np.array([int(np.argmax(m)) for m in _match_lists(queries, gallery, metric)])
    return [float(np.count_nonzero(first < r)) / len(first) for r in ranks]


def average_precision(matches: np.ndarray) -> float:
    hits = np.flatnonzero(matches)
    precisions = (np.arange(len(hits)) + 1.0) / (hits + 1.0)
    return math.fsum(precisions) / len(hits)


def mean_ap(queries: EmbeddingSet, gallery: EmbeddingSet, metric="euclidean") -> float:
    aps = [average_precision(m) for m in _match_lists(queries, gallery, metric)]
    return math.fsum(aps) / len(aps)


@dataclass
class ScatterStats:
    trace_sb: float
    trace_sw: float
    csc: float
    class_means: np.ndarray
    global_mean: np.ndarray
    class_probs: np.ndarray
    classes: np.ndarray = field(default=None)


def csc(e: EmbeddingSet) -> ScatterStats:
    """Class separability: trace of between-class over within-class scatter.

    Class probabilities are empirical frequencies; only traces are formed.
    """
    x = e.features
    classes, inverse, counts = np.unique(e.labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise SingleClass("class separability needs at least two classes")
    probs = counts / counts.sum()
    means = np.zeros((len(classes), x.shape[1]))
    np.add.at(means, inverse, x)
    means /= counts[:, None]
    mu0 = x.mean(axis=0)
    trace_sb = float(np.sum(probs * np.sum((means - mu0) ** 2, axis=1)))
    sq = np.sum((x - means[inverse]) ** 2, axis=1)
    within = np.zeros(len(classes))
    np.add.at(within, inverse, sq)
    trace_sw = float(np.sum(probs * within / counts))
    if trace_sw <= NORM_EPS:
        raise DegenerateWithinScatter(f"within-class scatter trace {trace_sw} is degenerate")
    return ScatterStats(trace_sb, trace_sw, trace_sb / trace_sw, means, mu0, probs, classes)


# -- end-to-end evaluation ---------------------------------------------------

@dataclass
class EvalReport:
    cmc: dict
    map: float
    scatter: ScatterStats
    variant: str
    metric: str
    source: str
    fingerprint: str

    def to_dict(self) -> dict:
        d = {f"cmc{r}": v for r, v in self.cmc.items()}
        d["map"] = self.map
        d["csc"] = {
            "trace_sb": self.scatter.trace_sb,
            "trace_sw": self.scatter.trace_sw,
            "value": self.scatter.csc,
        }
        d.update(variant=self.variant, metric=self.metric, source=self.source, fingerprint=self.fingerprint)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_header(self) -> list[str]:
        return [f"cmc{r}" for r in self.cmc] + [
            "map", "trace_sb", "trace_sw", "csc", "variant", "metric", "source", "fingerprint"
        ]

    def csv_row(self) -> list:
        return [repr(v) for v in self.cmc.values()] + [
            repr(self.map), repr(self.scatter.trace_sb), repr(self.scatter.trace_sw),
            repr(self.scatter.csc), self.variant, self.metric, self.source, self.fingerprint,
        ]

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            fh.write(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(self.csv_header())
                w.writerow(self.csv_row())


def embed(ckpt: Checkpoint, ds: Dataset, which: str = "baseline", variant: str = "na") -> EmbeddingSet:
    """Embed a dataset as baseline (x_g), cross_view (x_cv) or fused features."""
    need_cv = which in ("cross_view", "fused")
    c = forward(ckpt.params, ckpt.arch, ds.observations, main=which != "cross_view",
                logits=False, wcvl=need_cv)
    if which == "baseline":
        feats = c.x_g
    elif which == "cross_view":
        feats = c.x_cv
    elif which == "fused":
        feats = fuse(c.x_g, c.x_cv, variant)
    else:
        raise ValueError(f"unknown embedding source {which!r}")
    return EmbeddingSet(feats, ds.labels.copy(), which, ds.sample_ids.copy())


def _dataset_digest(ds: Dataset) -> bytes:
    h = hashlib.sha256()
    for arr in (ds.sample_ids, ds.labels, ds.angles, ds.observations):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


def fingerprint(main_ckpt, wcvl_ckpt, query_ds, gallery_ds, variant, metric, ranks) -> str:
    h = hashlib.sha256()
    h.update(hashlib.sha256(checkpoint_bytes(main_ckpt)).digest())
    if wcvl_ckpt is not None:
        h.update(hashlib.sha256(checkpoint_bytes(wcvl_ckpt)).digest())
    h.update(_dataset_digest(query_ds))
    h.update(_dataset_digest(gallery_ds))
    h.update(json.dumps([variant, metric, list(ranks)]).encode())
    return h.hexdigest()[:16]


def evaluate(main_ckpt: Checkpoint, wcvl_ckpt: Checkpoint | None, query_ds: Dataset,
             gallery_ds: Dataset, variant: str = "na", metric: str = "euclidean",
             ranks=DEFAULT_RANKS) -> EvalReport:
    """Rank the gallery for every query and summarize retrieval and separability.

    Without a cross-view checkpoint the baseline feature is evaluated. With one,
    both features come from that checkpoint (it carries the full encoder) and
    are fused with ``variant``. CSC is measured on query and gallery together.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    for ds in (query_ds, gallery_ds):
        if ds.obs_dim != main_ckpt.arch.obs_dim:
            raise ArchMismatch(f"dataset obs_dim {ds.obs_dim} != checkpoint obs_dim {main_ckpt.arch.obs_dim}")
    if wcvl_ckpt is None:
        source, used, tag = "baseline", main_ckpt, "none"
    else:
        check_arch(wcvl_ckpt.arch, main_ckpt.arch)
        source, used, tag = "fused", wcvl_ckpt, variant
    q = embed(used, query_ds, source, variant)
    g = embed(used, gallery_ds, source, variant)
    curve = cmc(q, g, ranks, metric)
    m_ap = mean_ap(q, g, metric)
    both = EmbeddingSet(np.vstack([q.features, g.features]), np.concatenate([q.labels, g.labels]), source)
    stats = csc(both)
    fp = fingerprint(main_ckpt, wcvl_ckpt, query_ds, gallery_ds, tag, metric, ranks)
    return EvalReport(dict(zip(ranks, curve)), m_ap, stats, tag, metric, source, fp)


def write_embeddings_csv(sets: list[EmbeddingSet], path) -> None:
    dim = sets[0].features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "identity", "source"] + [f"f_{k}" for k in range(dim)])
        for e in sets:
            ids = e.sample_ids if e.sample_ids is not None else np.arange(len(e))
            for s, y, f in zip(ids, e.labels, e.features):
                w.writerow([int(s), int(y), e.source] + [repr(float(v)) for v in f])
