"""Command-line entry point: ``grit {datagen,preprocess,train,eval,predict}``.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, load_config, with_overrides
from .data import (
    RecordError,
    compute_normalization,
    filter_records,
    make_splits,
    read_records,
    record_to_sequence,
    removal_reason,
    split_indices,
    synthesize_dataset,
    write_records,
)
from .evaluation import aggregate, score_sequences
from .geo import GraphBuildError, InsufficientLayersError, parse_topology
from .model import GritModel, ModelContractError, predict
from .training import NumericalError, train, write_history_csv

logger = logging.getLogger("grit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _topology(value: str) -> str:
    try:
        parse_topology(value)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None
    return value


def _positive(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _seed(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if not 0 <= n < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return n


def _resolve(args) -> RunConfig:
    variant = getattr(args, "weight_variant", None)
    return with_overrides(
        load_config(args.config),
        seed=getattr(args, "seed", None),
        records=getattr(args, "records", None),
        versions=getattr(args, "versions", None),
        epochs=getattr(args, "epochs", None),
        topology=getattr(args, "topology", None),
        weight_variant=variant.replace("-", "_") if variant else None,
    )


def _write_meta(out_dir: Path, started: float, command: str) -> None:
    # Wall-clock data lives in a sidecar so primary outputs stay byte-identical.
    meta = {"command": command, "started_unix": started, "elapsed_s": time.time() - started}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _resolve(args)
    records = synthesize_dataset(cfg.generator, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = write_records(out, records)
    print(f"wrote {count} records to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _resolve(args)
    required = cfg.split.required_layers
    records = read_records(args.input)
    reasons = {r.id: removal_reason(r, required) for r in records}
    kept = filter_records(records, required)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, kept)
    summary = {
        "input": len(records),
        "kept": len(kept),
        "removed": len(records) - len(kept),
        "required_layers": required,
        "reasons": {rid: why for rid, why in reasons.items() if why is not None},
    }
    Path(str(out) + ".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    print(f"kept {summary['kept']} of {summary['input']} records, removed {summary['removed']}")
    for rid, why in summary["reasons"].items():
        print(f"  removed {rid}: {why}")
    if not kept:
        print("warning: no records kept", file=sys.stderr)
    return EXIT_OK


def _load_dataset(path, cfg: RunConfig):
    records = read_records(path)
    if not records:
        raise RecordError(f"{path}: no records")
    counts = {r.column_count for r in records}
    if len(counts) != 1:
        raise RecordError(f"{path}: records have differing column counts {sorted(counts)}")
    short = [r.id for r in records if removal_reason(r, cfg.split.required_layers)]
    if short:
        raise RecordError(f"{path}: {len(short)} record(s) fail the layer filter "
                          f"(first: {short[0]}); run preprocess first")
    return records, counts.pop()


def _train_version(split, cfg: RunConfig, out_dir: Path) -> str:
    seed = int(np.random.SeedSequence([cfg.seed, split.version, 1]).generate_state(1)[0])
    model = GritModel.init(cfg.model, seed)
    try:
        result = train(model, split, cfg.train, seed=seed)
    except FloatingPointError as err:
        raise NumericalError(f"version {split.version}: {err}") from err
    vdir = out_dir / f"version_{split.version}"
    vdir.mkdir(parents=True, exist_ok=True)
    write_history_csv(vdir / "history.csv", result.history)
    meta = {"version": split.version, "split_seed": cfg.seed, "versions": cfg.split.versions,
            "permutation_seed": split.permutation_seed}
    ckpt.save_checkpoint(result.model, result.state, vdir / "checkpoint.grit", meta)
    last = result.history[-1]
    return (f"version {split.version}: best epoch {result.state.best_epoch}, "
            f"final val {last.val_loss:.6g}, lr {result.state.lr:g}")


def cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    records, columns = _load_dataset(args.data, cfg)
    if cfg.model.node_count != columns:
        logger.info("node_count set to %d from the dataset", columns)
        cfg = replace(cfg, model=replace(cfg.model, node_count=columns))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(cfg.to_json(), encoding="utf-8")

    splits = make_splits(records, cfg.seed, cfg.split.versions, cfg.model.m, cfg.model.n,
                         cfg.model.graph_config())
    threads = max(1, int(os.environ.get("GRIT_THREADS", "1") or 1))
    with ThreadPoolExecutor(max_workers=min(threads, len(splits))) as pool:
        for line in pool.map(lambda s: _train_version(s, cfg, out_dir), splits):
            print(line)
    _write_meta(out_dir, started, "train")
    return EXIT_OK


def cmd_eval(args) -> int:
    records = read_records(args.data)
    by_id = {r.id: r for r in records}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores, per_layer = [], []
    for path in args.checkpoints:
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        loaded = ckpt.load_checkpoint(path)
        model, meta = loaded.model, loaded.meta
        train_ids = list(model.normalization.source_ids)
        if args.subset == "all":
            chosen = records
        else:
            missing = [rid for rid in train_ids if rid not in by_id]
            if missing or "split_seed" not in meta:
                raise ModelContractError(
                    f"{path}: checkpoint was trained on a different dataset "
                    f"({len(missing)} training records absent from {args.data})")
            parts = split_indices(len(records), meta["split_seed"], meta["version"])
            if [records[i].id for i in parts[0]] != train_ids:
                raise ModelContractError(f"{path}: split of {args.data} does not match the checkpoint's "
                                         "training records")
            idx = {"train": parts[0], "validation": parts[1], "test": parts[2]}[args.subset]
            chosen = [records[i] for i in idx]
        c = model.config
        seqs = [record_to_sequence(r, c.m, c.n, c.graph_config()) for r in chosen]
        score = score_sequences(model, seqs)
        scores.append(score.rmse)
        per_layer.append(score.per_layer_rmse)
        print(f"{path}: rmse {score.rmse:.6f} on {len(seqs)} {args.subset} sequences")
    report = aggregate(scores, per_layer)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.table(), encoding="utf-8")
    (out_dir / "per_layer_rmse.csv").write_text(report.per_layer_csv(), encoding="utf-8")
    print(report.table(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint)
    model = loaded.model
    c = model.config
    records = read_records(args.records)
    if args.id is not None:
        matches = [r for r in records if r.id == args.id]
        if not matches:
            raise RecordError(f"no record with id {args.id!r}")
        record = matches[0]
    else:
        if not 0 <= args.index < len(records):
            raise RecordError(f"index {args.index} out of range for {len(records)} records")
        record = records[args.index]
    reason = removal_reason(record, c.m)
    if reason:
        raise InsufficientLayersError(f"{record.id}: {reason}; need {c.m} complete input layers")
    seq = record_to_sequence(record, c.m, 0, c.graph_config())
    preds = predict(model, seq)
    header = ["node", "latitude", "longitude"] + [f"layer_{k}" for k in range(c.n)]
    lines = [",".join(header)]
    for i in range(seq.node_count):
        row = [str(i), repr(float(record.latitude[i])), repr(float(record.longitude[i]))]
        row += [repr(float(v)) for v in preds[i]]
        lines.append(",".join(row))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {seq.node_count} x {c.n} predictions for {record.id} to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grit", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        if "seed" in flags:
            p.add_argument("--seed", type=_seed, metavar="U64")
        if "records" in flags:
            p.add_argument("--records", type=_positive, metavar="N")
        if "train" in flags:
            p.add_argument("--versions", type=_positive, metavar="N")
            p.add_argument("--epochs", type=_positive, metavar="N")
            p.add_argument("--topology", type=_topology, metavar="chain|knn:K")
            p.add_argument("--weight-variant", choices=("as-written", "standard"))

    p = sub.add_parser("datagen", help="write a synthetic JSONL dataset")
    common(p, "seed", "records")
    p.add_argument("--out", required=True, metavar="PATH", help="output .jsonl file")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("preprocess", help="apply the complete-layer filter")
    common(p)
    p.add_argument("input", metavar="IN")
    p.add_argument("--out", required=True, metavar="PATH", help="filtered .jsonl file")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model per dataset version")
    common(p, "seed", "train")
    p.add_argument("data", metavar="DATA")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE report across checkpoints")
    p.add_argument("data", metavar="DATA")
    p.add_argument("checkpoints", nargs="+", metavar="CKPT")
    p.add_argument("--subset", choices=("test", "validation", "train", "all"), default="test")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export per-node predictions for one record")
    p.add_argument("checkpoint", metavar="CKPT")
    p.add_argument("records", metavar="RECORDS")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--id")
    p.add_argument("--out", required=True, metavar="PATH", help="output CSV")
    p.set_defaults(func=cmd_predict)
    return parser


DATA_ERRORS = (RecordError, GraphBuildError, InsufficientLayersError, ModelContractError,
               ckpt.CheckpointError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as err:
        print(f"grit: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as err:
        print(f"grit: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
