"""``negrec`` command line: synth / prepare / train / eval / sweep / ablate.

Every command writes into ``--out`` together with a ``manifest.json`` holding
the resolved configuration, seeds, version stamp and SHA-256 digests of all
inputs and outputs. Failures exit non-zero with one line on stderr::

    error: category=<name> message=<text>
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import pickle
import subprocess
import sys
from importlib import metadata
from pathlib import Path
from typing import Sequence

from .config import apply_overrides, read_kv
from .data import (
    SECONDS_PER_DAY,
    DatasetDescriptor,
    IngestError,
    PairingStats,
    SplitError,
    build_sequences,
    ingest,
    make_paired_tests,
    split,
)
from .evaluation import evaluate, run_ablations, write_table
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synth import GroundTruth, SynthConfig, generate, oracle_accuracy
from .training import TrainConfig, TrainingDiverged, ablated_configs, sweep_k, sweep_p_hard, train

logger = logging.getLogger("negrec")

PREPARED = "prepared.pkl"
CHECKPOINT = "checkpoint.npz"


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = 2):
        super().__init__(message)
        self.category = category
        self.code = code


# ---------------------------------------------------------------------------
# manifest helpers


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_stamp() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "version": version_stamp(),
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {p.name: sha256(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def dump_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# config resolution


def _file_config(args) -> dict[str, str]:
    if not getattr(args, "config", None):
        return {}
    try:
        return read_kv(args.config)
    except (OSError, ValueError) as exc:
        raise CliError("config", str(exc)) from exc


def _flag_overrides(args) -> dict:
    flags = {
        "seed": getattr(args, "seed", None),
        "p_hard": getattr(args, "p_hard", None),
        "p_task": getattr(args, "p_task", None),
        "k_random": getattr(args, "k", None),
        "max_len": getattr(args, "max_len", None),
    }
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError("config", f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip().replace("-", "_")] = value.strip()
    return {k: v for k, v in flags.items() if v is not None}


def resolve_configs(args, catalog_size: int, station_count: int) -> tuple[ModelConfig, TrainConfig]:
    values = {**_file_config(args), **_flag_overrides(args)}
    known = {f.name for f in dataclasses.fields(ModelConfig)} | {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError("config", f"unknown settings: {', '.join(unknown)}")
    try:
        model_cfg = apply_overrides(ModelConfig(catalog_size, station_count), values)
        model_cfg = dataclasses.replace(model_cfg, catalog_size=catalog_size, station_count=station_count)
        train_cfg = apply_overrides(TrainConfig(), values)
        if getattr(args, "ablation", None):
            model_cfg, train_cfg = ablated_configs(args.ablation, model_cfg, train_cfg)
    except (ValueError, TypeError) as exc:
        raise CliError("config", str(exc)) from exc
    return model_cfg, train_cfg


def load_prepared(data: str | None) -> tuple[dict, Path]:
    if not data:
        raise CliError("input", "--data is required")
    path = Path(data)
    if path.is_dir():
        path = path / PREPARED
    if not path.exists():
        raise CliError("input", f"prepared data not found: {path} (run 'negrec prepare' first)")
    with open(path, "rb") as fh:
        return pickle.load(fh), path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    out = Path(args.out)
    values = {**_file_config(args), **_flag_overrides(args)}
    values.pop("max_len", None)
    try:
        cfg = apply_overrides(SynthConfig(), values, strict=True)
    except (KeyError, ValueError) as exc:
        raise CliError("config", str(exc)) from exc
    corpus = generate(cfg)
    paths = corpus.write(out)
    inputs = [Path(args.config)] if args.config else []
    write_manifest(out, "synth", dataclasses.asdict(cfg), {"seed": cfg.seed}, inputs, list(paths.values()))
    print(f"wrote {len(corpus.events)} events for {cfg.n_users} users to {paths['events']}")


def cmd_prepare(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events_path = Path(args.data)
    if events_path.is_dir():
        events_path = events_path / "events.csv"
    descriptor_path = Path(args.descriptor) if args.descriptor else events_path.with_name("descriptor.txt")
    try:
        descriptor = DatasetDescriptor.load(descriptor_path) if descriptor_path.exists() else DatasetDescriptor()
    except ValueError as exc:
        raise CliError("config", f"bad descriptor {descriptor_path}: {exc}") from exc
    if args.max_len:
        descriptor = dataclasses.replace(descriptor, max_len=args.max_len)
    try:
        result = ingest(events_path, descriptor)
        sequences = build_sequences(result.events, descriptor.max_len)
        data_split = split(sequences, int(args.test_days * SECONDS_PER_DAY), args.val_frac, args.seed)
    except IngestError as exc:
        raise CliError("input", str(exc)) from exc
    except SplitError as exc:
        raise CliError("data", str(exc)) from exc
    stats = PairingStats()
    make_paired_tests(data_split.test, stats=stats)
    prepared = {"catalog": result.catalog, "split": data_split, "descriptor": descriptor}
    prepared_path = out / PREPARED
    with open(prepared_path, "wb") as fh:
        pickle.dump(prepared, fh, protocol=4)
    summary = dump_json(out / "prepare_summary.json", {
        "events": len(result.events),
        "malformed_rows": result.malformed,
        "songs": result.catalog.n_songs,
        "stations": result.catalog.n_stations,
        "train_users": len(data_split.train),
        "validation_users": len(data_split.validation),
        "inference_only_users": len(data_split.inference_only),
        "test_users_with_pairs": stats.users,
        "test_pairs": stats.pairs,
        "test_users_without_pair": stats.skipped_users,
    })
    inputs = [events_path] + ([descriptor_path] if descriptor_path.exists() else [])
    config = {"descriptor": dataclasses.asdict(descriptor), "test_days": args.test_days, "val_frac": args.val_frac}
    write_manifest(out, "prepare", config, {"seed": args.seed}, inputs, [prepared_path, summary])
    print(f"prepared {len(data_split.train)} train / {len(data_split.validation)} validation users, {stats.pairs} test pairs")


def cmd_train(args) -> None:
    prepared, prepared_path = load_prepared(args.data)
    catalog, data_split = prepared["catalog"], prepared["split"]
    model_cfg, train_cfg = resolve_configs(args, catalog.n_songs, catalog.n_stations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, report = train(data_split, model_cfg, train_cfg)
    except TrainingDiverged as exc:
        raise CliError("training", str(exc), code=3) from exc
    ckpt = out / CHECKPOINT
    save_checkpoint(ckpt, model, catalog, extra={"train_config": dataclasses.asdict(train_cfg)})
    report_dict = report.to_dict()
    timing = report_dict.pop("epoch_seconds")
    report_path = dump_json(out / "train_report.json", report_dict)
    dump_json(out / "timing.json", {"epoch_seconds": timing})
    config = {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)}
    write_manifest(out, "train", config, {"seed": train_cfg.seed, "model_seed": model_cfg.seed},
                   [prepared_path] + ([Path(args.config)] if args.config else []), [ckpt, report_path])
    print(f"best validation accuracy {report.best_val_accuracy:.4f} at epoch {report.best_epoch}; "
          f"converged at epoch {report.epochs_to_converge}")


def cmd_eval(args) -> None:
    prepared, prepared_path = load_prepared(args.data)
    data_split, catalog = prepared["split"], prepared["catalog"]
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if ckpt is not None and ckpt.is_dir():
        ckpt = ckpt / CHECKPOINT
    if ckpt is None:
        # an untrained model: the random-scorer reference
        model_cfg, _ = resolve_configs(args, catalog.n_songs, catalog.n_stations)
        from .model import SequenceScorer
        model = SequenceScorer(model_cfg).eval()
    elif not ckpt.exists():
        raise CliError("input", f"checkpoint not found: {ckpt}")
    else:
        model, _, _ = load_checkpoint(ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = make_paired_tests(data_split.test)
    if not cases:
        raise CliError("data", "no paired test cases")
    one = make_paired_tests(data_split.test, one_per_user=True)
    report = evaluate(model, cases, data_split, pool_size=args.pool_size, seed=args.seed or 0, one_pair_cases=one)
    outputs = [out / "eval_report.json", out / "accuracy_by_bin.tsv", out / "feedback_similarity.tsv"]
    data = json.loads(report.to_json())
    if args.truth:
        truth = GroundTruth.load(args.truth)
        data["oracle_accuracy"] = oracle_accuracy(truth, cases, catalog)
    dump_json(outputs[0], data)
    write_table(outputs[1], report.bins)
    write_table(outputs[2], [
        {"feedback": label, **{other: v for other, v in zip(report.similarity_labels, row)}}
        for label, row in zip(report.similarity_labels, report.similarity)
    ])
    inputs = [prepared_path] + ([ckpt] if ckpt else []) + ([Path(args.truth)] if args.truth else [])
    write_manifest(out, "eval", {"pool_size": args.pool_size}, {"seed": args.seed or 0}, inputs, outputs)
    print(f"paired accuracy {report.paired_accuracy:.4f} over {report.n_users} users ({report.n_pairs} pairs); "
          f"mrr_up {report.mrr_up:.4f} mrr_down {report.mrr_down:.4f}")


def _parse_list(text: str, kind):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError("config", f"bad list {text!r}: {exc}") from exc


def cmd_sweep(args) -> None:
    prepared, prepared_path = load_prepared(args.data)
    catalog, data_split = prepared["catalog"], prepared["split"]
    p_hard_values = _parse_list(args.p_hard_values, float) if args.p_hard_values else None
    k_values = _parse_list(args.k_values, int) if args.k_values else None
    if bool(p_hard_values) == bool(k_values):
        raise CliError("config", "give exactly one of --p-hard or --k as a comma-separated list")
    model_cfg, train_cfg = resolve_configs(args, catalog.n_songs, catalog.n_stations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if p_hard_values:
            rows = sweep_p_hard(p_hard_values, data_split, model_cfg, train_cfg, checkpoint_dir=out,
                                pool_size=args.pool_size, catalog=catalog)
        else:
            rows = sweep_k(k_values, data_split, model_cfg, train_cfg, checkpoint_dir=out,
                           pool_size=args.pool_size, catalog=catalog)
    except TrainingDiverged as exc:
        raise CliError("training", str(exc), code=3) from exc
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    table = out / "sweep.tsv"
    write_table(table, rows)
    outputs = [table] + [out / r["checkpoint"] for r in rows]
    config = {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg),
              "p_hard": p_hard_values, "k": k_values}
    write_manifest(out, "sweep", config, {"seed": train_cfg.seed}, [prepared_path], outputs)
    print(table.read_text(encoding="utf-8"), end="")


def cmd_ablate(args) -> None:
    prepared, prepared_path = load_prepared(args.data)
    catalog, data_split = prepared["catalog"], prepared["split"]
    args.ablation = None
    model_cfg, train_cfg = resolve_configs(args, catalog.n_songs, catalog.n_stations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rows = run_ablations(data_split, model_cfg, train_cfg)
    except TrainingDiverged as exc:
        raise CliError("training", str(exc), code=3) from exc
    table = out / "ablation.tsv"
    write_table(table, rows)
    config = {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)}
    write_manifest(out, "ablate", config, {"seed": train_cfg.seed}, [prepared_path], [table])
    print(table.read_text(encoding="utf-8"), end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="negrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=True):
        p.add_argument("--config", help="flat key = value config file")
        if data:
            p.add_argument("--data", required=True, help="prepared run directory (or events file for prepare)")
        p.add_argument("--out", required=True, help="output run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    def knobs(p, *, lists=False):
        if lists:
            p.add_argument("--p-hard", dest="p_hard_values", help="comma-separated p_hard values")
            p.add_argument("--k", dest="k_values", help="comma-separated k values")
        else:
            p.add_argument("--p-hard", type=float)
            p.add_argument("--k", type=int, help="random negatives per slot (hardest is used)")
        p.add_argument("--p-task", type=float)
        p.add_argument("--max-len", type=int)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest an events file and split it")
    common(p)
    p.add_argument("--descriptor", help="dataset descriptor (default: descriptor.txt next to the data)")
    p.add_argument("--test-days", type=float, default=30.0)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_prepare, seed=0)

    p = sub.add_parser("train", help="train one model")
    common(p)
    knobs(p)
    p.add_argument("--ablation", choices=["full", "no_positional", "no_hard_negatives", "positive_only",
                                          "half_max_len", "baseline"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file or train run directory; omit for an untrained model")
    p.add_argument("--pool-size", type=int, default=1000)
    p.add_argument("--truth", help="ground-truth sidecar for the oracle accuracy")
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep p_hard or k")
    common(p)
    knobs(p, lists=True)
    p.add_argument("--pool-size", type=int, default=1000)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train the ablation variants")
    common(p)
    knobs(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: category={exc.category} message={str(exc).splitlines()[0]}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        print("error: category=interrupted message=interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled", exc_info=True)
        print(f"error: category=internal message={type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
