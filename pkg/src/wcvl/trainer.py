"""Two-stage training: main module first, then the cross-view head.

Every run is a deterministic function of its dataset, architecture and stage
seed. Parameter initialization draws from ``SeededRng(seed).spawn("init")``
and batch sampling from ``SeededRng(seed).spawn("batches")``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from .data import Dataset, pk_sample
from .errors import EpochOutOfRange, InvalidConfig, ShapeMismatch, StageMismatch
from .model import MAIN_GROUPS, WCVL_GROUPS, ArchConfig, Checkpoint, backward, forward, init_params, param_group
from .numerics import SeededRng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 3.5e-4
    milestones: tuple = (15, 25)
    decay: float = 0.1
    total_epochs: int = 40

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def validate(self) -> None:
        if not (self.base_lr > 0 and math.isfinite(self.base_lr)):
            raise InvalidConfig("base_lr must be positive")
        if self.total_epochs < 0:
            raise InvalidConfig("total_epochs must be >= 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise InvalidConfig("milestones must be strictly increasing")
        if ms and (ms[0] < 0 or ms[-1] >= self.total_epochs):
            raise InvalidConfig("milestones must lie in [0, total_epochs)")


PAPER_MAIN_SCHEDULE = ScheduleConfig(3.5e-4, (40, 70), 0.1, 120)
PAPER_WCVL_SCHEDULE = ScheduleConfig(3.5e-4, (20, 35), 0.1, 60)
DESK_MAIN_SCHEDULE = ScheduleConfig(3.5e-4, (15, 25), 0.1, 40)
DESK_WCVL_SCHEDULE = ScheduleConfig(3.5e-4, (7, 12), 0.1, 20)


@dataclass(frozen=True)
class StageConfig:
    stage: str = "main"  # main | wcvl
    mode: str | None = None  # pluggable | end_to_end, wcvl stage only
    schedule: ScheduleConfig = DESK_MAIN_SCHEDULE
    P: int = 16
    K: int = 4
    margin: float = 0.3
    mse_variant: str = "as_written"
    seed: int = 0
    mse_weight: float = 1.0

    def validate(self) -> None:
        if self.stage not in ("main", "wcvl"):
            raise InvalidConfig(f"unknown stage {self.stage!r}")
        if (self.mode is not None) != (self.stage == "wcvl"):
            raise InvalidConfig("mode is required for the wcvl stage and forbidden otherwise")
        if self.mode not in (None, "pluggable", "end_to_end"):
            raise InvalidConfig(f"unknown mode {self.mode!r}")
        if self.mse_variant not in ("as_written", "squared"):
            raise InvalidConfig(f"unknown mse_variant {self.mse_variant!r}")
        if self.P < 2 or self.K < 2:
            raise InvalidConfig("P and K must both be >= 2")
        if self.margin < 0:
            raise InvalidConfig("margin must be >= 0")
        self.schedule.validate()


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def append(self, epoch, lr, ce, tri, mse, seconds):
        self.entries.append(
            {"epoch": epoch, "lr": lr, "loss_ce": ce, "loss_tri": tri, "loss_mse": mse, "seconds": seconds}
        )

    def column(self, key: str) -> list:
        return [e[key] for e in self.entries]

    def to_csv(self, path, timing: bool = False) -> None:
        """Write one row per epoch. Wall time is only included when ``timing``
        is set, so that the default file is reproducible byte for byte."""
        keys = ["epoch", "lr", "loss_ce", "loss_tri", "loss_mse"] + (["seconds"] if timing else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for e in self.entries:
                w.writerow([e["epoch"]] + [repr(float(e[k])) for k in keys[1:]])


def lr_at(epoch: int, s: ScheduleConfig) -> float:
    if not 0 <= epoch < s.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {s.total_epochs})")
    return s.base_lr * s.decay ** sum(1 for m in s.milestones if m <= epoch)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, names=None):
    """One bias-corrected Adam update over ``names`` (default: all parameters).

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    names = list(params) if names is None else list(names)
    t = state.t + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name in names:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        m[name] = ADAM_BETA1 * m.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * v.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        new_params[name] = params[name] - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + ADAM_EPS)
    return new_params, AdamState(m, v, t)


def batches_per_epoch(ds: Dataset, cfg: StageConfig) -> int:
    return math.ceil(len(ds) / (cfg.P * cfg.K))


def _names_in(params, groups) -> list[str]:
    return [n for n in params if param_group(n) in groups]


def _run(params, arch, ds, cfg: StageConfig, step_fn, trainable):
    """Shared epoch loop; ``step_fn(params, batch) -> (grads, ce, tri, mse)``."""
    rng = SeededRng(cfg.seed).spawn("batches")
    state = AdamState()
    log = TrainLog()
    n_batches = batches_per_epoch(ds, cfg)
    for epoch in range(cfg.schedule.total_epochs):
        lr = lr_at(epoch, cfg.schedule)
        t0 = time.perf_counter()
        sums = np.zeros(3)
        for _ in range(n_batches):
            batch = pk_sample(ds, cfg.P, cfg.K, rng)
            grads, *parts = step_fn(params, batch)
            sums += parts
            params, state = adam_step(params, grads, state, lr, trainable)
        ce, tri, mse = sums / n_batches
        log.append(epoch, lr, ce, tri, mse, time.perf_counter() - t0)
    return params, log


def _main_step(arch, beta, margin):
    cfg = L.BetaConfig(beta, margin)

    def step(params, batch):
        c = forward(params, arch, batch.observations, main=True, logits=True, wcvl=False)
        l_ce, d_logits = L.cross_entropy(c.logits, batch.labels)
        l_tri, d_xg = L.beta_triplet(c.x_g, batch.labels, cfg)
        grads = backward(params, arch, c, d_xg=d_xg, d_logits=d_logits, frozen=WCVL_GROUPS)
        return grads, l_ce, l_tri, 0.0

    return step


def _check_train_split(ds: Dataset, arch: ArchConfig) -> None:
    if ds.obs_dim != arch.obs_dim:
        raise ShapeMismatch(f"dataset obs_dim {ds.obs_dim} != arch obs_dim {arch.obs_dim}")
    if ds.labels.max() >= arch.num_classes:
        raise InvalidConfig("training labels exceed the classifier size")
    if (np.bincount(ds.labels)[ds.identities()] < 2).any():
        raise InvalidConfig("every training identity needs at least two records")


def train_beta_single_module(ds: Dataset, arch: ArchConfig, beta: float, cfg: StageConfig,
                             init: Checkpoint | None = None):
    """Single-module training with cross-entropy plus the beta-reweighted triplet loss."""
    cfg.validate()
    if cfg.stage != "main":
        raise StageMismatch("single-module training runs the main stage")
    L.BetaConfig(beta, cfg.margin)
    _check_train_split(ds, arch)
    if init is None:
        params = init_params(arch, SeededRng(cfg.seed).spawn("init"))
        start_epoch = 0
    else:
        params = dict(init.params)
        start_epoch = init.epoch
    params, log = _run(params, arch, ds, cfg, _main_step(arch, beta, cfg.margin),
                       _names_in(params, MAIN_GROUPS))
    history = (list(init.loss_history) if init else []) + [
        e["loss_ce"] + e["loss_tri"] for e in log.entries
    ]
    extra = {"beta": beta} if beta != 1.0 else {}
    ck = Checkpoint(arch, params, "main", start_epoch + cfg.schedule.total_epochs, cfg.seed, history, extra)
    return ck, log


def train_main(ds: Dataset, arch: ArchConfig, cfg: StageConfig, init: Checkpoint | None = None):
    """Optimize L_ce + L_tri over trunk, main head and classifier.

    The cross-view parameters stay at their initial values. ``init`` resumes
    from an existing main-stage checkpoint instead of a fresh initialization.
    """
    return train_beta_single_module(ds, arch, 1.0, cfg, init)


def train_wcvl(main_ckpt: Checkpoint, ds: Dataset, cfg: StageConfig):
    """Train the cross-view head against hardest-positive targets from the main path."""
    cfg.validate()
    if cfg.stage != "wcvl":
        raise StageMismatch("train_wcvl needs a wcvl-stage config")
    if main_ckpt.stage != "main":
        raise StageMismatch(f"expected a main-stage checkpoint, got stage {main_ckpt.stage!r}")
    arch = main_ckpt.arch
    _check_train_split(ds, arch)
    params = dict(main_ckpt.params)
    tri_cfg = L.TripletConfig(cfg.margin)

    if cfg.mode == "pluggable":
        def step(p, batch):
            c = forward(p, arch, batch.observations, main=True, logits=False, wcvl=True)
            l_mse, d_xcv, _ = L.cross_view_mse(c.x_cv, c.x_g, batch.labels, cfg.mse_variant)
            grads = backward(p, arch, c, d_xcv=cfg.mse_weight * d_xcv, frozen=MAIN_GROUPS)
            return grads, 0.0, 0.0, l_mse

        trainable = _names_in(params, WCVL_GROUPS)
    else:
        def step(p, batch):
            c = forward(p, arch, batch.observations, main=True, logits=True, wcvl=True)
            l_ce, d_logits = L.cross_entropy(c.logits, batch.labels)
            l_tri, d_xg, _ = L.triplet_batch_hard(c.x_g, batch.labels, tri_cfg)
            l_mse, d_xcv, _ = L.cross_view_mse(c.x_cv, c.x_g, batch.labels, cfg.mse_variant)
            grads = backward(p, arch, c, d_xg=d_xg, d_logits=d_logits, d_xcv=cfg.mse_weight * d_xcv)
            return grads, l_ce, l_tri, l_mse

        trainable = list(params)

    params, log = _run(params, arch, ds, cfg, step, trainable)
    history = list(main_ckpt.loss_history) + [
        e["loss_ce"] + e["loss_tri"] + e["loss_mse"] for e in log.entries
    ]
    extra = dict(main_ckpt.extra, mode=cfg.mode, mse_variant=cfg.mse_variant)
    ck = Checkpoint(arch, params, "wcvl", cfg.schedule.total_epochs, cfg.seed, history, extra)
    return ck, log


def with_schedule(cfg: StageConfig, **kw) -> StageConfig:
    return replace(cfg, schedule=replace(cfg.schedule, **kw))
