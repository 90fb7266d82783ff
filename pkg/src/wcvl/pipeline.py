"""Run configuration and the end-to-end experiment pipeline.

A run is fully described by one JSON document. Stage seeds are never written
in the document; they are derived from the master ``seed`` with
``derive_seed(seed, tag)`` using the tags ``"split"``, ``"main"``, ``"wcvl"``
and ``"shared_depth:<k>"``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import Dataset, GenConfig, generate_synthetic, split_identities, split_query_gallery
from .errors import InvalidArch, InvalidConfig
from .evaluation import DEFAULT_RANKS, METRICS, VARIANTS, EvalReport, evaluate
from .model import ArchConfig, Checkpoint, with_shared_depth
from .numerics import SeededRng, derive_seed
from .trainer import (
    DESK_MAIN_SCHEDULE,
    DESK_WCVL_SCHEDULE,
    ScheduleConfig,
    StageConfig,
    train_beta_single_module,
    train_wcvl,
)

BETAS = (1.0, 1.5, 2.0, 6.0)
MODES = ("pluggable", "end_to_end")
ABLATIONS = ("beta", "fusion", "shared_depth", "mode")


@dataclass(frozen=True)
class DataConfig:
    gen: GenConfig = GenConfig()
    num_train_ids: int = 25
    query_fraction: float = 0.25

    def validate(self) -> None:
        self.gen.validate()
        if not 0 < self.num_train_ids < self.gen.num_identities:
            raise InvalidConfig("data.num_train_ids must leave at least one test identity")
        if not 0.0 <= self.query_fraction <= 1.0:
            raise InvalidConfig("data.query_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    variant: str = "na"
    metric: str = "euclidean"
    ranks: tuple = DEFAULT_RANKS

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"eval.variant must be one of {VARIANTS}")
        if self.metric not in METRICS:
            raise InvalidConfig(f"eval.metric must be one of {METRICS}")
        if not self.ranks or any(r < 1 for r in self.ranks) or list(self.ranks) != sorted(set(self.ranks)):
            raise InvalidConfig("eval.ranks must be strictly increasing positive integers")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/reference"
    data: DataConfig = DataConfig()
    arch: ArchConfig = ArchConfig()
    main: StageConfig = StageConfig(stage="main", schedule=DESK_MAIN_SCHEDULE)
    wcvl: StageConfig = StageConfig(stage="wcvl", mode="pluggable", schedule=DESK_WCVL_SCHEDULE)
    eval: EvalConfig = EvalConfig()

    def validate(self) -> None:
        if self.seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        self.data.validate()
        try:
            self.arch.validate()
        except InvalidArch as exc:
            raise InvalidConfig(f"arch: {exc}") from exc
        if self.arch.obs_dim != self.data.gen.obs_dim:
            raise InvalidConfig("arch.obs_dim must equal data.obs_dim")
        if self.arch.num_classes != self.data.num_train_ids:
            raise InvalidConfig("arch.num_classes must equal data.num_train_ids")
        self.main.validate()
        self.wcvl.validate()
        if self.main.P > self.data.num_train_ids or self.wcvl.P > self.data.num_train_ids:
            raise InvalidConfig("batch P exceeds the number of training identities")
        self.eval.validate()

    def stage(self, name: str, mode: str | None = None) -> StageConfig:
        """Stage config with its derived seed (and optionally another mode)."""
        if name == "main":
            return dataclasses.replace(self.main, seed=derive_seed(self.seed, "main"))
        return dataclasses.replace(self.wcvl, mode=mode or self.wcvl.mode,
                                   seed=derive_seed(self.seed, "wcvl"))

    def to_dict(self) -> dict:
        def sched(s):
            return {"base_lr": s.base_lr, "milestones": list(s.milestones), "decay": s.decay,
                    "total_epochs": s.total_epochs}

        main = {"schedule": sched(self.main.schedule), "P": self.main.P, "K": self.main.K,
                "margin": self.main.margin}
        wcvl = {"mode": self.wcvl.mode, "schedule": sched(self.wcvl.schedule), "P": self.wcvl.P,
                "K": self.wcvl.K, "margin": self.wcvl.margin, "mse_variant": self.wcvl.mse_variant}
        data = dict(dataclasses.asdict(self.data.gen), num_train_ids=self.data.num_train_ids,
                    query_fraction=self.data.query_fraction)
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": data,
            "arch": self.arch.to_dict(),
            "main": main,
            "wcvl": wcvl,
            "eval": {"variant": self.eval.variant, "metric": self.eval.metric, "ranks": list(self.eval.ranks)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# -- strict parsing ------------------------------------------------------------

def _section(doc, where: str, allowed: dict) -> dict:
    """Type-check a JSON object against ``allowed`` (key -> expected type)."""
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{where} must be an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {where}: {', '.join(unknown)}")
    out = {}
    for key, value in doc.items():
        kind = allowed[key]
        path = f"{where}.{key}" if where != "config" else key
        if kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif kind == "ints":
            ok = isinstance(value, list) and all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            )
            value = tuple(value) if ok else value
        elif kind is dict:
            ok = isinstance(value, dict)
        else:
            ok = isinstance(value, kind)
        if not ok:
            raise InvalidConfig(f"{path} has the wrong type")
        out[key] = value
    return out


_SCHED_KEYS = {"base_lr": float, "milestones": "ints", "decay": float, "total_epochs": int}


def _schedule(doc, where, default: ScheduleConfig) -> ScheduleConfig:
    return dataclasses.replace(default, **_section(doc, where, _SCHED_KEYS))


def _stage(doc, where, default: StageConfig, wcvl: bool) -> StageConfig:
    keys = {"schedule": dict, "P": int, "K": int, "margin": float}
    if wcvl:
        keys.update(mode=str, mse_variant=str)
    kw = _section(doc, where, keys)
    if "schedule" in kw:
        kw["schedule"] = _schedule(kw["schedule"], f"{where}.schedule", default.schedule)
    return dataclasses.replace(default, **kw)


def parse_run_config(doc) -> RunConfig:
    """Build and validate a :class:`RunConfig`; missing keys take defaults."""
    base = RunConfig()
    top = _section(doc, "config", {"seed": int, "output_dir": str, "data": dict, "arch": dict,
                                   "main": dict, "wcvl": dict, "eval": dict})
    kw = {k: top[k] for k in ("seed", "output_dir") if k in top}
    if "data" in top:
        gen_keys = {"num_identities": int, "views_per_id": int, "obs_dim": int, "id_scale": float,
                    "view_scale": float, "noise_scale": float, "seed": int}
        d = _section(top["data"], "data", dict(gen_keys, num_train_ids=int, query_fraction=float))
        gen = dataclasses.replace(base.data.gen, **{k: v for k, v in d.items() if k in gen_keys})
        rest = {k: v for k, v in d.items() if k not in gen_keys}
        kw["data"] = dataclasses.replace(base.data, gen=gen, **rest)
    if "arch" in top:
        a = _section(top["arch"], "arch", {
            "obs_dim": int, "trunk_layers": "ints", "shared_depth": int, "main_head_layers": "ints",
            "wcvl_head_layers": "ints", "num_classes": int, "activation": str,
        })
        kw["arch"] = dataclasses.replace(base.arch, **a)
    if "main" in top:
        kw["main"] = _stage(top["main"], "main", base.main, wcvl=False)
    if "wcvl" in top:
        kw["wcvl"] = _stage(top["wcvl"], "wcvl", base.wcvl, wcvl=True)
    if "eval" in top:
        kw["eval"] = dataclasses.replace(
            base.eval, **_section(top["eval"], "eval", {"variant": str, "metric": str, "ranks": "ints"})
        )
    cfg = dataclasses.replace(base, **kw)
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
    return parse_run_config(doc)


# -- pipeline stages -----------------------------------------------------------

def make_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Generate the dataset and split it into train / query / gallery."""
    full = generate_synthetic(cfg.data.gen)
    train, test = split_identities(full, cfg.data.num_train_ids)
    query, gallery = split_query_gallery(test, cfg.data.query_fraction,
                                         SeededRng(derive_seed(cfg.seed, "split")))
    return train, query, gallery


def run_main(cfg: RunConfig, train: Dataset, beta: float = 1.0):
    return train_beta_single_module(train, cfg.arch, beta, cfg.stage("main"))


def run_wcvl(cfg: RunConfig, main_ck: Checkpoint, train: Dataset, mode: str | None = None):
    return train_wcvl(main_ck, train, cfg.stage("wcvl", mode))


def report(cfg: RunConfig, main_ck, wcvl_ck, query, gallery, variant=None, metric=None) -> EvalReport:
    return evaluate(main_ck, wcvl_ck, query, gallery, variant or cfg.eval.variant,
                    metric or cfg.eval.metric, cfg.eval.ranks)


@dataclass
class AblationRow:
    cell: dict
    report: EvalReport
    extra: dict = field(default_factory=dict)


def ablate_beta(cfg, train, query, gallery, main_ck=None) -> list[AblationRow]:
    """Single-module training per beta, each evaluated on the baseline feature."""
    rows = []
    for beta in BETAS:
        ck = main_ck if beta == 1.0 and main_ck is not None else run_main(cfg, train, beta)[0]
        rows.append(AblationRow({"beta": beta}, report(cfg, ck, None, query, gallery)))
    return rows


def ablate_fusion(cfg, train, query, gallery, main_ck) -> list[AblationRow]:
    wcvl_ck, _ = run_wcvl(cfg, main_ck, train)
    rows = []
    for metric in METRICS:
        for variant in VARIANTS:
            r = report(cfg, main_ck, wcvl_ck, query, gallery, variant, metric)
            # variant and metric are already columns of the report row
            rows.append(AblationRow({}, r))
    return rows


def ablate_mode(cfg, train, query, gallery, main_ck) -> list[AblationRow]:
    rows = []
    for mode in MODES:
        wcvl_ck, _ = run_wcvl(cfg, main_ck, train, mode)
        rows.append(AblationRow({"mode": mode}, report(cfg, main_ck, wcvl_ck, query, gallery)))
    base = rows[0].report.map
    for row in rows:
        row.extra["map_delta"] = row.report.map - base
    return rows


def ablate_shared_depth(cfg, train, query, gallery, main_ck) -> list[AblationRow]:
    """Retrain only the cross-view stage for every shared trunk prefix."""
    rows = []
    for depth in range(1, len(cfg.arch.trunk_layers) + 1):
        if depth == main_ck.arch.shared_depth:
            ck = main_ck
        else:
            rng = SeededRng(derive_seed(cfg.seed, f"shared_depth:{depth}"))
            arch, params = with_shared_depth(main_ck.params, main_ck.arch, depth, rng)
            ck = dataclasses.replace(main_ck, arch=arch, params=params)
        wcvl_ck, _ = run_wcvl(cfg, ck, train)
        rows.append(AblationRow({"shared_depth": depth}, report(cfg, ck, wcvl_ck, query, gallery)))
    return rows


def run_ablation(which, cfg, train, query, gallery, main_ck=None) -> list[AblationRow]:
    if which not in ABLATIONS:
        raise InvalidConfig(f"unknown ablation {which!r}")
    if which == "beta":
        return ablate_beta(cfg, train, query, gallery, main_ck)
    if main_ck is None:
        main_ck, _ = run_main(cfg, train)
    fn = {"fusion": ablate_fusion, "mode": ablate_mode, "shared_depth": ablate_shared_depth}[which]
    return fn(cfg, train, query, gallery, main_ck)


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    cell_keys = list(rows[0].cell)
    extra_keys = list(rows[0].extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cell_keys + extra_keys + rows[0].report.csv_header())
        for row in rows:
            cells = [repr(v) if isinstance(v, float) else v for v in row.cell.values()]
            extras = [repr(float(row.extra[k])) for k in extra_keys]
            w.writerow(cells + extras + row.report.csv_row())
