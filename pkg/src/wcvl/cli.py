"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import SPLITS, load_dataset, save_dataset
from .errors import (
    ArchMismatch,
    CorruptRecord,
    FormatVersionMismatch,
    InvalidArch,
    InvalidConfig,
    ShapeMismatch,
    StageMismatch,
)
from .evaluation import METRICS, VARIANTS, embed, write_embeddings_csv
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    ABLATIONS,
    MODES,
    load_run_config,
    make_datasets,
    report,
    run_ablation,
    run_main,
    run_wcvl,
    write_ablation_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH = 0, 2, 3, 4


class UsageError(Exception):
    """A flag combination the command does not accept (exit 2)."""


class MissingArtifact(Exception):
    """A required checkpoint is absent (exit 4)."""


def _out_dir(args, cfg) -> Path:
    out = Path(args.out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(args, cfg) -> Path:
    return Path(args.data_dir) if args.data_dir else Path(cfg.output_dir) / "data"


def _load_splits(args, cfg):
    d = _data_dir(args, cfg)
    return tuple(load_dataset(d / f"{name}.xvds", name) for name in SPLITS)


def _load_ckpt(path, what: str, expected=None):
    if path is None or not Path(path).exists():
        raise MissingArtifact(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path, expected)


def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out_dir) if args.out_dir else _data_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(SPLITS, make_datasets(cfg)):
        save_dataset(ds, out / f"{name}.xvds")
        print(f"{name}: {len(ds)} records, {len(ds.identities())} identities -> {out / (name + '.xvds')}")
    (out / "manifest.json").write_text(cfg.to_json())
    return EXIT_OK


def _print_log(stage, log):
    for e in log.entries:
        print(f"[{stage}] epoch {e['epoch']:3d} lr {e['lr']:.2e} ce {e['loss_ce']:.4f} "
              f"tri {e['loss_tri']:.4f} mse {e['loss_mse']:.4f} ({e['seconds']:.2f}s)")


def cmd_train(args, cfg) -> int:
    if args.stage == "main" and args.mode is not None:
        raise UsageError("--mode is only accepted with --stage wcvl")
    train, _, _ = _load_splits(args, cfg)
    out = _out_dir(args, cfg)
    if args.stage == "main":
        ck, log = run_main(cfg, train)
        path = Path(args.out) if args.out else out / "main.ckpt"
        log_path = out / "main_log.csv"
    else:
        main_path = args.main_ckpt or out / "main.ckpt"
        main_ck = _load_ckpt(main_path, "main", cfg.arch)
        mode = args.mode or cfg.wcvl.mode
        ck, log = run_wcvl(cfg, main_ck, train, mode)
        path = Path(args.out) if args.out else out / f"wcvl_{mode}.ckpt"
        log_path = out / f"wcvl_{mode}_log.csv"
    _print_log(args.stage, log)
    save_checkpoint(ck, path)
    log.to_csv(log_path)
    print(f"checkpoint -> {path}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    _, query, gallery = _load_splits(args, cfg)
    out = _out_dir(args, cfg)
    main_ck = _load_ckpt(args.main_ckpt or out / "main.ckpt", "main", cfg.arch)
    wcvl_ck = _load_ckpt(args.wcvl_ckpt, "cross-view", cfg.arch) if args.wcvl_ckpt else None
    r = report(cfg, main_ck, wcvl_ck, query, gallery, args.variant, args.metric)
    stem = args.out or str(out / f"report_{r.source}_{r.variant}_{r.metric}")
    r.write(f"{stem}.json", f"{stem}.csv")
    cmc = " ".join(f"cmc{k} {v:.4f}" for k, v in r.cmc.items())
    print(f"{r.source} variant={r.variant} metric={r.metric}: {cmc} map {r.map:.4f} "
          f"csc {r.scatter.csc:.4f} (sb {r.scatter.trace_sb:.4f}, sw {r.scatter.trace_sw:.4f})")
    print(f"report -> {stem}.json")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    train, query, gallery = _load_splits(args, cfg)
    out = _out_dir(args, cfg)
    main_ck = _load_ckpt(args.main_ckpt, "main", cfg.arch) if args.main_ckpt else None
    rows = run_ablation(args.which, cfg, train, query, gallery, main_ck)
    path = Path(args.out) if args.out else out / f"ablate_{args.which}.csv"
    write_ablation_csv(rows, path)
    for row in rows:
        cell = " ".join(f"{k}={v}" for k, v in row.cell.items()) or f"{row.report.variant}/{row.report.metric}"
        extra = " ".join(f"{k} {v:+.4f}" for k, v in row.extra.items())
        print(f"{cell}: map {row.report.map:.4f} cmc1 {list(row.report.cmc.values())[0]:.4f} "
              f"csc {row.report.scatter.csc:.4f} {extra}".rstrip())
    print(f"{len(rows)} rows -> {path}")
    return EXIT_OK


def cmd_dump_embeddings(args, cfg) -> int:
    splits = dict(zip(SPLITS, _load_splits(args, cfg)))
    ck = _load_ckpt(args.ckpt, "model", cfg.arch)
    ds = splits[args.split]
    sources = ["baseline"] + (["cross_view", "fused"] if ck.stage == "wcvl" else [])
    sets = [embed(ck, ds, s, args.variant or cfg.eval.variant) for s in sources]
    out = Path(args.out) if args.out else _out_dir(args, cfg) / f"embeddings_{args.split}.csv"
    write_embeddings_csv(sets, out)
    print(f"{sum(len(s) for s in sets)} rows ({', '.join(sources)}) -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wcvl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--data-dir", help="directory holding train/query/gallery .xvds files")
        sp.add_argument("--out-dir", help="override the configured output directory")

    sp = sub.add_parser("gen-data", help="generate and split the synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the main module or the cross-view head")
    common(sp)
    sp.add_argument("--stage", choices=("main", "wcvl"), required=True)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--main-ckpt", help="main-stage checkpoint (stage wcvl)")
    sp.add_argument("--out", help="checkpoint path")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints on query/gallery")
    common(sp)
    sp.add_argument("--main-ckpt")
    sp.add_argument("--wcvl-ckpt", help="omit for a baseline-only report")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--metric", choices=METRICS)
    sp.add_argument("--out", help="report path stem (.json and .csv are appended)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run one of the ablation sweeps")
    sp.add_argument("which", choices=ABLATIONS)
    common(sp)
    sp.add_argument("--main-ckpt", help="reuse this main checkpoint instead of training one")
    sp.add_argument("--out", help="CSV path")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("dump-embeddings", help="write features of one split as CSV")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=SPLITS, default="query")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--out", help="CSV path")
    sp.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except (ArchMismatch, StageMismatch, ShapeMismatch, FormatVersionMismatch, MissingArtifact) as exc:
        return _fail(EXIT_MISMATCH, "artifact mismatch", exc)
    except (OSError, CorruptRecord) as exc:
        return _fail(EXIT_IO, "I/O error", exc)
    except (InvalidConfig, InvalidArch, UsageError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config error", exc)


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(f"wcvl: {kind}: {exc}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
