"""Synthetic cross-view dataset, binary dataset files and P x K batch sampling.

Each identity has a latent appearance code; each observation adds a
viewpoint-dependent component that is several times larger than the identity
signal, so raw nearest neighbours tend to share a viewpoint rather than an
identity.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptRecord,
    FormatVersionMismatch,
    IdentityTooSmall,
    InvalidConfig,
    NotEnoughIdentities,
)
from .numerics import SeededRng, l2_normalize

DATASET_MAGIC = b"XVDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
SPLITS = ("train", "query", "gallery")

# Number of odd harmonics (1, 3, 5, ...) used to lift the viewpoint angle off
# the unit circle. The view component traces a closed curve spanning
# 2 * VIEW_HARMONICS dimensions with lift(θ + π) = -lift(θ).
VIEW_HARMONICS = 1
# Dimension of the latent identity codes e(id) before projection.
ID_LATENT_DIM = 16


@dataclass(frozen=True)
class GenConfig:
    num_identities: int = 50
    views_per_id: int = 8
    obs_dim: int = 64
    id_scale: float = 1.0
    view_scale: float = 4.0
    noise_scale: float = 0.1
    seed: int = 7

    def validate(self) -> None:
        if self.num_identities < 2:
            raise InvalidConfig("num_identities must be >= 2")
        if self.views_per_id < 2:
            raise InvalidConfig("views_per_id must be >= 2 (a hardest positive must exist)")
        if self.obs_dim < 2 * VIEW_HARMONICS:
            raise InvalidConfig(f"obs_dim must be >= {2 * VIEW_HARMONICS}")
        for name in ("id_scale", "view_scale", "noise_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidConfig(f"{name} must be finite and positive, got {value}")
        if not self.view_scale > self.id_scale:
            raise InvalidConfig(
                f"view_scale must exceed id_scale (got view_scale={self.view_scale}, "
                f"id_scale={self.id_scale})"
            )


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    identity_label: int
    viewpoint_angle: float
    observation: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Column-oriented record store; treat as immutable after construction."""

    sample_ids: np.ndarray
    labels: np.ndarray
    angles: np.ndarray
    observations: np.ndarray
    num_identities: int
    split: str = "train"

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.uint64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.observations = np.asarray(self.observations, dtype=np.float64).reshape(
            len(self.sample_ids), -1
        )
        n = len(self.sample_ids)
        if not (len(self.labels) == len(self.angles) == n):
            raise CorruptRecord("column lengths differ")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_identities):
            raise CorruptRecord("identity label outside [0, num_identities)")
        if len(np.unique(self.sample_ids)) != n:
            raise CorruptRecord("duplicate sample ids")
        if self.split not in SPLITS:
            raise InvalidConfig(f"unknown split tag {self.split!r}")

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def records(self) -> list[SampleRecord]:
        return [
            SampleRecord(int(s), int(y), float(a), o)
            for s, y, a, o in zip(self.sample_ids, self.labels, self.angles, self.observations)
        ]

    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.sample_ids[idx],
            self.labels[idx],
            self.angles[idx],
            self.observations[idx],
            self.num_identities,
            split or self.split,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_identities == other.num_identities
            and self.split == other.split
            and self.observations.shape == other.observations.shape
            and np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.labels, other.labels)
            and self.angles.tobytes() == other.angles.tobytes()
            and self.observations.tobytes() == other.observations.tobytes()
        )


@dataclass
class Batch:
    observations: np.ndarray
    labels: np.ndarray
    P: int
    K: int
    indices: np.ndarray = field(default=None)


def view_lift(angles: np.ndarray) -> np.ndarray:
    """Map angles to (cos kθ, sin kθ) for odd k, scaled to unit norm."""
    k = 2 * np.arange(VIEW_HARMONICS) + 1
    theta = np.asarray(angles, dtype=np.float64)[:, None] * k[None, :]
    return np.concatenate([np.cos(theta), np.sin(theta)], axis=1) / math.sqrt(VIEW_HARMONICS)


def generate_synthetic(cfg: GenConfig, seed: int | None = None, population: int = 0) -> Dataset:
    """Generate ``num_identities * views_per_id`` records.

    observation = id_scale * W_id e(id) + view_scale * W_view lift(θ) + noise_scale * n

    The projections W_id and W_view are drawn once from the seed, e(id) is a
    random unit vector per identity, and each identity's viewpoints are evenly
    spaced around the circle from a random phase with a small jitter.

    ``population`` selects a disjoint set of identities rendered through the
    same projections (population 0 is the training population); sample ids
    of population ``p`` start at ``p * num_identities * views_per_id``.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    rng = SeededRng(seed)
    D, M, V = cfg.obs_dim, cfg.num_identities, cfg.views_per_id
    L = 2 * VIEW_HARMONICS
    k = min(ID_LATENT_DIM, D)

    w_id = rng.spawn("w_id").normal(D * k).reshape(D, k) / math.sqrt(D)
    w_view = rng.spawn("w_view").normal(D * L).reshape(D, L) / math.sqrt(D)
    if population:
        rng = rng.spawn(f"population:{population}")
    codes = l2_normalize(rng.spawn("codes").normal(M * k).reshape(M, k))
    ang_rng = rng.spawn("angles")
    phase = ang_rng.uniform(M, 0.0, 2 * math.pi)
    jitter = ang_rng.uniform(M * V, -0.5, 0.5).reshape(M, V) * (math.pi / V)
    angles = np.mod(phase[:, None] + 2 * math.pi * np.arange(V)[None, :] / V + jitter, 2 * math.pi)
    angles = angles.reshape(-1)
    labels = np.repeat(np.arange(M), V)
    noise = rng.spawn("noise").normal(M * V * D).reshape(M * V, D)

    obs = (
        cfg.id_scale * (codes @ w_id.T)[labels]
        + cfg.view_scale * view_lift(angles) @ w_view.T
        + cfg.noise_scale * noise
    )
    first_id = population * M * V
    return Dataset(np.arange(first_id, first_id + M * V), labels, angles, obs, M, "train")


def split_identities(ds: Dataset, num_train: int) -> tuple[Dataset, Dataset]:
    """Identities ``< num_train`` go to training, the rest to the test pool."""
    if not 0 < num_train < ds.num_identities:
        raise InvalidConfig(f"train identity count must be in (0, {ds.num_identities})")
    mask = ds.labels < num_train
    train = ds.subset(np.flatnonzero(mask), "train")
    train.num_identities = num_train
    return train, ds.subset(np.flatnonzero(~mask), "gallery")


def pk_sample(ds: Dataset, P: int, K: int, rng: SeededRng) -> Batch:
    ids = ds.identities()
    if len(ids) < P:
        raise NotEnoughIdentities(f"need {P} identities, dataset has {len(ids)}")
    chosen = ids[rng.choice(len(ids), P)]
    picks = []
    for ident in chosen:
        members = np.flatnonzero(ds.labels == ident)
        sel = rng.choice(len(members), K, replace=len(members) < K)
        picks.append(members[sel])
    idx = np.concatenate(picks)
    return Batch(ds.observations[idx], ds.labels[idx], P, K, idx)


def split_query_gallery(ds: Dataset, fraction: float, rng: SeededRng) -> tuple[Dataset, Dataset]:
    q_idx, g_idx = [], []
    for ident in ds.identities():
        members = np.flatnonzero(ds.labels == ident)
        n = len(members)
        if n < 2:
            raise IdentityTooSmall(f"identity {ident} has {n} record(s); need >= 2")
        n_q = min(max(int(round(fraction * n)), 1), n - 1)
        perm = members[rng.permutation(n)]
        q_idx.extend(perm[:n_q])
        g_idx.extend(perm[n_q:])
    return ds.subset(np.sort(q_idx), "query"), ds.subset(np.sort(g_idx), "gallery")


def _record_dtype(obs_dim: int) -> np.dtype:
    return np.dtype(
        [("sample_id", "<u8"), ("label", "<u4"), ("angle", "<f8"), ("obs", "<f8", (obs_dim,))]
    )


def save_dataset(ds: Dataset, path) -> None:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.obs_dim))
    rec["sample_id"] = ds.sample_ids
    rec["label"] = ds.labels
    rec["angle"] = ds.angles
    rec["obs"] = ds.observations
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.num_identities, ds.obs_dim, len(ds))
    Path(path).write_bytes(header + rec.tobytes())


def load_dataset(path, split: str | None = None) -> Dataset:
    """Read a dataset file. The split tag is not stored on disk; it defaults to
    the file stem when that names a split, else ``train``."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptRecord(f"{path}: truncated header")
    magic, version, M, obs_dim, count = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise CorruptRecord(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatVersionMismatch(f"{path}: version {version}, expected {DATASET_VERSION}")
    dt = _record_dtype(obs_dim)
    body = blob[_HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise CorruptRecord(f"{path}: expected {count} records, payload is {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dt)
    if split is None:
        split = path.stem if path.stem in SPLITS else "train"
    return Dataset(
        rec["sample_id"].copy(),
        rec["label"].astype(np.int64),
        rec["angle"].copy(),
        rec["obs"].reshape(count, obs_dim).copy(),
        M,
        split,
    )


def export_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "identity", "viewpoint"] + [f"obs_{k}" for k in range(ds.obs_dim)])
        for s, y, a, o in zip(ds.sample_ids, ds.labels, ds.angles, ds.observations):
            w.writerow([int(s), int(y), repr(float(a))] + [repr(float(v)) for v in o])
