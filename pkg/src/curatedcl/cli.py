"""Command-line entry point: ``curatedcl {init,pretrain,probe,score,export,ablation}``.

Exit codes: 0 success, 2 configuration, 3 data or I/O, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .augment import CORRUPTION_MODES
from .config import TrainConfig, apply_overrides, dump_config, load_config, parse_config_text, parse_value
from .curation import mean_score
from .datasets import DATA_ROOT_ENV, load_named
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericalError
from .evaluation import export_embeddings, extract_embeddings, knn_probe, linear_probe
from .model import init_params, load_checkpoint, save_checkpoint
from .trainer import default_grid, prepare_config, pretrain, run_ablation, score_batches, write_ablation_csv

logger = logging.getLogger("curatedcl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST = "manifest.json"


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _parse_sets(pairs):
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    return out


def _config_from_args(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    return apply_overrides(cfg, _parse_sets(args.set)).validate()


def _write_manifest(out_dir: Path, command, config, dataset, data_root, outputs, started, extra=None):
    manifest = {
        "command": command,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": config.seed,
        "config": dump_config(config),
        "dataset": {"name": dataset.name, "count": len(dataset), "fingerprint": dataset.fingerprint()},
        "data_root": None if data_root is None else str(data_root),
        "outputs": sorted(str(p) for p in outputs),
        "started_at": started,
        "finished_at": _now(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _relative_outputs(out_dir: Path):
    return [p.relative_to(out_dir) for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST]


def _progress(epoch, loss):
    print(f"epoch {epoch:4d}  loss {loss:.6f}", file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_init(args):
    """Random-init checkpoint for the given config (baseline for probes)."""
    started = _now()
    cfg = _config_from_args(args)
    data = load_named(cfg.data, "train", args.data_root)
    cfg = prepare_config(cfg, data)
    params = init_params(cfg.encoder)
    params.metadata.update({"config": dump_config(cfg), "dataset": data.name, "epoch": 0})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "final.cur")
    _write_manifest(out, "init", cfg, data, args.data_root, _relative_outputs(out), started)
    print(out / "final.cur")
    return EXIT_OK


def cmd_pretrain(args):
    started = _now()
    data_root = args.data_root
    expected_fp = None
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = apply_overrides(parse_config_text(manifest["config"]), _parse_sets(args.set)).validate()
        data_root = data_root or manifest.get("data_root")
        expected_fp = manifest["dataset"]["fingerprint"]
    else:
        cfg = _config_from_args(args)
    data = load_named(cfg.data, "train", data_root)
    if expected_fp is not None and data.fingerprint() != expected_fp:
        raise FormatError(f"dataset fingerprint {data.fingerprint()[:12]}... differs from manifest {expected_fp[:12]}...")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain(data, cfg, out, progress=None if args.quiet else _progress)
    full_cfg = parse_config_text(result.params.metadata["config"])
    extra = {"threshold": None if result.threshold is None else result.threshold.tau_frd,
             "epoch_losses": result.epoch_losses}
    _write_manifest(out, "pretrain", full_cfg, data, data_root, _relative_outputs(out), started, extra)
    print(out / "final.cur")
    return EXIT_OK


def _load_for_eval(checkpoint, data_root):
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    params = load_checkpoint(path)
    cfg = parse_config_text(params.metadata["config"]) if "config" in params.metadata else TrainConfig()
    return path, params, cfg


def cmd_probe(args):
    path, params, cfg = _load_for_eval(args.checkpoint, args.data_root)
    train = load_named(cfg.data, "train", args.data_root)
    test = load_named(cfg.data, "test", args.data_root)
    tr = extract_embeddings(params, train, args.source, checkpoint_id=str(path))
    te = extract_embeddings(params, test, args.source, checkpoint_id=str(path))
    if args.probe == "knn":
        acc = knn_probe(tr, te, args.k or cfg.probe.k)
    else:
        acc = linear_probe(tr, te, cfg.probe.linear_epochs, cfg.probe.linear_lr, cfg.probe.seed)
    record = {
        "checkpoint": path.name,
        "probe": args.probe,
        "source": args.source,
        "k": (args.k or cfg.probe.k) if args.probe == "knn" else None,
        "top1": acc,
        "train_fingerprint": train.fingerprint(),
        "test_fingerprint": test.fingerprint(),
        "code_version": __version__,
        "finished_at": _now(),
    }
    out = path.with_name(f"{path.stem}.probe-{args.probe}-{args.source}.json")
    out.write_text(json.dumps(record, indent=2) + "\n")
    print(f"{acc:.4f}")
    return EXIT_OK


def cmd_score(args):
    _, params, cfg = _load_for_eval(args.checkpoint, args.data_root)
    if args.batches < 1:
        raise ConfigError(f"--batches must be positive, got {args.batches}", key="--batches")
    if args.batch_size:
        cfg = replace(cfg, batch_size=args.batch_size)
    data = load_named(cfg.data, "train", args.data_root)
    scores = score_batches(params, data, cfg, args.batches, args.corrupt, args.seed)
    print("batch\tfrd")
    for i, s in enumerate(scores):
        print(f"{i}\t{s!r}")
    print(f"mean\t{mean_score(scores)!r}")
    return EXIT_OK


def cmd_export(args):
    path, params, cfg = _load_for_eval(args.checkpoint, args.data_root)
    data = load_named(cfg.data, args.split, args.data_root)
    emb = extract_embeddings(params, data, args.source, checkpoint_id=str(path))
    out = export_embeddings(emb, args.out)
    print(out)
    return EXIT_OK


def cmd_ablation(args):
    started = _now()
    cfg = _config_from_args(args)
    data = load_named(cfg.data, "train", args.data_root)
    test = load_named(cfg.data, "test", args.data_root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds or [cfg.seed]:
        seeded = replace(cfg, seed=seed, encoder=replace(cfg.encoder, init_seed=seed))
        cell_dir = out / f"seed{seed}" if args.keep_runs else None
        rows += run_ablation(data, default_grid(), seeded, test, cell_dir, parallel=args.parallel)
    write_ablation_csv(rows, out / "ablation.csv")
    for r in rows:
        top1 = "-" if r["top1"] is None else f"{r['top1']:.4f}"
        print(f"seed {r['seed']}  FRD {r['frd']:3s}  {r['loss']:22s} {top1}  {r['status']}")
    failed = sum(r["status"] != "ok" for r in rows)
    _write_manifest(out, "ablation", cfg, data, args.data_root, _relative_outputs(out), started,
                    {"seeds": args.seeds or [cfg.seed], "failed_cells": failed})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="curatedcl", description="Contrastive pretraining with Fréchet-distance batch curation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--data-root", default=None, help=f"dataset directory (default ${DATA_ROOT_ENV})")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("init", help="write a random-init checkpoint")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("pretrain", help="contrastive pretraining")
    common(sp)
    sp.add_argument("--manifest", help="rerun the config and data recorded in a manifest.json")
    sp.add_argument("--out", required=True)
    sp.add_argument("-q", "--quiet", action="store_true", help="no per-epoch progress")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("probe", help="linear or k-NN probe of a checkpoint")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--probe", choices=("linear", "knn"), default="knn")
    sp.add_argument("--source", choices=("h", "z"), default="h")
    sp.add_argument("--k", type=int, default=None)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("score", help="per-batch FRD table")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--batches", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--corrupt", choices=CORRUPTION_MODES, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("export", help="write embeddings as EMB1")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--source", choices=("h", "z"), default="h")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("ablation", help="regularizer x curation grid")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=None)
    sp.add_argument("--parallel", action="store_true", help="run cells in worker processes")
    sp.add_argument("--keep-runs", action="store_true", help="keep per-cell metrics and checkpoints")
    sp.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as exc:
        key = getattr(exc, "key", None)
        print(f"config error{f' [{key}]' if key else ''}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
