"""Command-line front end: prepare, importance, run and sweep.

Every command reads the same flags and optional ``--config`` INI file. Flags
override the file. Artifacts land under ``--out``::

    <out>/prepared/client_<i>.npz, validation.npz, test.npz, manifest.json
    <out>/importance.csv, importance.json
    <out>/results.csv, results.json
    <out>/checkpoints/<experiment>.bau1
    <out>/events/<stream>.jsonl
    <out>/run.log
"""

import argparse
import functools
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .attacks import AttackKind
from .checkpoint import save_params
from .config import ConfigPath, RunConfig, load_run_config, parse_synthetic, split_list
from .data import (
    Dataset,
    SplitBundle,
    gen_synthetic,
    load_csv,
    load_dataset,
    preprocess,
    save_dataset,
    split,
)
from .errors import LabelColumnError
from .event_log import EventLog
from .federation import run_experiment
from .importance import ImportanceReport, export_importance_csv, select_target_feature
from .metadata import Metadata
from .report import (
    ExperimentRecord,
    build_record,
    export_csv,
    merge_records,
    parse_csv,
    scenario_id,
)
from .seeding import derive_seed
from .stream import StreamName

logger = logging.getLogger(__name__)

PROG = "py-fedpoison"
PREPARED_DIR = "prepared"
MANIFEST_FILE = "manifest.json"
RESULTS_FILE = "results.csv"
RESULTS_STAMP_FILE = "results.json"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

SweepEntry = tuple[Optional[AttackKind], float]


def dataset_digest(ds: Dataset) -> str:
    """SHA-256 over a dataset's arrays and feature names."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(ds.X).tobytes())
    digest.update(np.ascontiguousarray(ds.y).tobytes())
    digest.update("\n".join(ds.feature_names).encode("utf-8"))
    return digest.hexdigest()


def manifest_hash(manifest: dict[str, Any]) -> str:
    """SHA-256 of the canonical (sorted-key) manifest JSON."""
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode("utf-8")).hexdigest()


def _prepared_dir(cfg: RunConfig) -> Path:
    return cfg.out / PREPARED_DIR


def _load_source(cfg: RunConfig) -> tuple[Dataset, object]:
    if cfg.dataset is not None:
        table = load_csv(cfg.dataset, cfg.label_column)
        return preprocess(table, cfg.preprocess), str(cfg.dataset)
    if cfg.synthetic is not None:
        return gen_synthetic(cfg.synthetic), cfg.synthetic.model_dump()
    msg = "prepare needs a data source: pass --dataset <csv> or --synthetic n=...,d=..."
    raise ValueError(msg)


def cmd_prepare(cfg: RunConfig) -> int:
    """Load or generate the dataset, split it and write the prepared artifacts."""
    ds, source = _load_source(cfg)
    bundle = split(ds, cfg.seed, cfg.federation.num_clients)

    target = _prepared_dir(cfg)
    target.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    parts = [(f"client_{i}.npz", shard) for i, shard in enumerate(bundle.client_shards, start=1)]
    parts += [("validation.npz", bundle.validation), ("test.npz", bundle.test)]
    for name, part in parts:
        save_dataset(part, target / name)
        files[name] = dataset_digest(part)

    train = bundle.train
    manifest = {
        "dataset_name": cfg.scenario_name,
        "source": source,
        "seed": cfg.seed,
        "num_clients": bundle.num_clients,
        "feature_names": list(ds.feature_names),
        "counts": {
            "total": bundle.total_rows,
            "train": train.n,
            "validation": bundle.validation.n,
            "test": bundle.test.n,
            "clients": [shard.n for shard in bundle.client_shards],
        },
        "label_counts": {Path(name).stem: list(part.label_counts()) for name, part in parts},
        "files": files,
    }
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    (target / MANIFEST_FILE).write_text(text, encoding="utf-8")
    digest = manifest_hash(manifest)
    logger.info("Prepared %d rows into %s", bundle.total_rows, target)
    print(f"manifest {digest}")
    print(f"train={train.n} validation={bundle.validation.n} test={bundle.test.n}")
    return 0


def load_prepared(out: Path) -> tuple[SplitBundle, dict[str, Any]]:
    """Read the split written by ``prepare`` under ``out``.

    Raises:
        FileNotFoundError: If ``prepare`` has not been run for ``out``
    """
    directory = Path(out) / PREPARED_DIR
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.is_file():
        msg = f"no prepared data in {directory}; run `{PROG} prepare --out {out}` first"
        raise FileNotFoundError(msg)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    shards = tuple(
        load_dataset(directory / f"client_{i}.npz") for i in range(1, manifest["num_clients"] + 1)
    )
    bundle = SplitBundle(
        client_shards=shards,
        validation=load_dataset(directory / "validation.npz"),
        test=load_dataset(directory / "test.npz"),
    )
    return bundle, manifest


def _dataset_name(cfg: RunConfig, manifest: dict[str, Any]) -> str:
    return cfg.dataset_name or str(manifest.get("dataset_name") or cfg.scenario_name)


def _importance(cfg: RunConfig, bundle: SplitBundle) -> tuple[int, ImportanceReport]:
    fed = cfg.experiment_federation()
    return select_target_feature(
        bundle.train,
        bundle.validation,
        fed.forest,
        fed.importance_repeats,
        derive_seed(fed.seed, "importance"),
    )


def cmd_importance(cfg: RunConfig) -> int:
    """Rank features by permutation importance and print the FP target."""
    bundle, _ = load_prepared(cfg.out)
    chosen, report = _importance(cfg, bundle)
    export_importance_csv(report, cfg.out / "importance.csv")
    summary = report.model_dump_json(indent=2) + "\n"
    (cfg.out / "importance.json").write_text(summary, encoding="utf-8")
    name, score = report.feature_names[chosen], report.scores[chosen]
    print(f"top feature {chosen} ({name}) score={score:.4f}")
    return 0


def run_entry(
    cfg: RunConfig,
    bundle: SplitBundle,
    dataset_name: str,
    kind: Optional[AttackKind],
    percent: float,
    save_checkpoint: bool = False,
) -> ExperimentRecord:
    """Run one (attack, percent) experiment and return its record.

    Events go to ``<out>/events``; with ``save_checkpoint`` the final server
    model is written to ``<out>/checkpoints``.

    Raises:
        ValueError: Any experiment failure, prefixed with the scenario id
    """
    attack = cfg.attack_spec(kind, percent) if kind is not None else None
    sid = scenario_id(dataset_name, attack)
    stream = StreamName.for_experiment(sid, percent if attack is not None else None)
    metadata = Metadata(correlation_id=str(stream), seed=cfg.seed, scenario=sid)

    with EventLog(cfg.out / "events", echo=True) as events:
        sink = functools.partial(events.append_to_stream, stream, metadata=metadata)
        try:
            outcome = run_experiment(bundle, attack, cfg.experiment_federation(), event_sink=sink)
        except ValueError as exc:
            msg = f"{sid} at {percent:g}%: {exc}"
            raise ValueError(msg) from exc

    if save_checkpoint:
        checkpoints = cfg.out / "checkpoints"
        checkpoints.mkdir(parents=True, exist_ok=True)
        save_params(outcome.final_params, checkpoints / f"{stream.stream_id}.bau1")
    return build_record(outcome, dataset_name, attack, cfg.seed, cfg.success)


def _describe(record: ExperimentRecord) -> str:
    losses = " ".join(f"{loss:.4f}" for loss in record.client_losses)
    text = (
        f"{record.scenario_id} P={record.poison_percent:g}% "
        f"losses=[{losses}] acc={record.server_accuracy:.4f}"
    )
    if record.asr is not None:
        text += f" asr={record.asr:.4f} success={str(record.success).lower()}"
    return text


def _existing_records(out: Path, prepared: str) -> list[ExperimentRecord]:
    """Records in ``<out>/results.csv`` if they were written for the ``prepared`` manifest.

    Results without a stamp, or stamped with another manifest hash, are
    dropped so they get rerun rather than merged.
    """
    results = out / RESULTS_FILE
    if not results.is_file():
        return []
    stamp_path = out / RESULTS_STAMP_FILE
    stamp = json.loads(stamp_path.read_text(encoding="utf-8")) if stamp_path.is_file() else {}
    if stamp.get("prepared_manifest") != prepared:
        logger.warning("%s was written for other prepared data; starting it afresh", results)
        return []
    return parse_csv(results)


def _export_results(
    records: Sequence[ExperimentRecord],
    out: Path,
    num_clients: int,
    prepared: str,
) -> None:
    export_csv(records, out / RESULTS_FILE, num_clients)
    stamp = json.dumps({"prepared_manifest": prepared}, sort_keys=True, indent=2) + "\n"
    (out / RESULTS_STAMP_FILE).write_text(stamp, encoding="utf-8")


def cmd_run(cfg: RunConfig) -> int:
    """Run one experiment and merge its record into results.csv."""
    bundle, manifest = load_prepared(cfg.out)
    if cfg.attack is not None and cfg.percent is None:
        msg = "run --attack needs --percent"
        raise ValueError(msg)
    percent = cfg.percent if cfg.attack is not None and cfg.percent is not None else 0.0
    name = _dataset_name(cfg, manifest)
    record = run_entry(cfg, bundle, name, cfg.attack, percent, save_checkpoint=True)

    prepared = manifest_hash(manifest)
    records = merge_records(_existing_records(cfg.out, prepared), [record])
    _export_results(records, cfg.out, bundle.num_clients, prepared)
    print(_describe(record))
    return 0


def sweep_entries(cfg: RunConfig) -> list[SweepEntry]:
    """Clean baseline first, then every (attack, percent) pair."""
    kinds = (cfg.attack,) if cfg.attack is not None else cfg.attacks
    return [(None, 0.0)] + [(kind, percent) for kind in kinds for percent in cfg.percentages]


def _entry_key(dataset_name: str, cfg: RunConfig, entry: SweepEntry) -> tuple[str, float]:
    kind, percent = entry
    attack = cfg.attack_spec(kind, percent) if kind is not None else None
    return scenario_id(dataset_name, attack), round(percent, 4)


def cmd_sweep(cfg: RunConfig) -> int:
    """Run the baseline and every (attack, percent); resume from results.csv.

    Entries already in results.csv for the same seed and the same prepared
    manifest are skipped. The CSV is rewritten, sorted, after every finished
    entry. Failed entries are logged and the sweep carries on; the exit
    status is 1 if any failed.
    """
    bundle, manifest = load_prepared(cfg.out)
    name = _dataset_name(cfg, manifest)
    results = cfg.out / RESULTS_FILE
    prepared = manifest_hash(manifest)
    records = _existing_records(cfg.out, prepared)
    done = {
        (record.scenario_id, round(record.poison_percent, 4))
        for record in records
        if record.seed == cfg.seed
    }

    entries = sweep_entries(cfg)
    pending = [entry for entry in entries if _entry_key(name, cfg, entry) not in done]
    logger.info("Sweep: %d entries, %d already done", len(entries), len(entries) - len(pending))

    if cfg.feature_index is None and any(kind is AttackKind.FP for kind, _ in pending):
        chosen, _ = _importance(cfg, bundle)
        cfg = cfg.model_copy(update={"feature_index": chosen})

    failures: list[str] = []

    def finished(record: ExperimentRecord) -> None:
        nonlocal records
        records = merge_records(records, [record])
        _export_results(records, cfg.out, bundle.num_clients, prepared)
        print(_describe(record))

    if cfg.workers > 1 and len(pending) > 1:
        level = logging.getLogger().level
        with ProcessPoolExecutor(
            max_workers=cfg.workers,
            initializer=configure_logging,
            initargs=(level, cfg.out),
        ) as pool:
            futures = {
                pool.submit(run_entry, cfg, bundle, name, kind, percent): (kind, percent)
                for kind, percent in pending
            }
            for future in as_completed(futures):
                try:
                    finished(future.result())
                except ValueError as exc:
                    logger.error("Sweep entry failed: %s", exc)
                    failures.append(str(exc))
    else:
        for kind, percent in pending:
            try:
                finished(run_entry(cfg, bundle, name, kind, percent))
            except ValueError as exc:
                logger.error("Sweep entry failed: %s", exc)
                failures.append(str(exc))

    if not results.is_file():
        _export_results(records, cfg.out, bundle.num_clients, prepared)
    logger.info(
        "Sweep finished: %d run, %d skipped, %d failed",
        len(pending) - len(failures),
        len(entries) - len(pending),
        len(failures),
    )
    for failure in failures:
        print(f"FAILED {failure}", file=sys.stderr)
    return 1 if failures else 0


COMMANDS = {
    "prepare": cmd_prepare,
    "importance": cmd_importance,
    "run": cmd_run,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the four subcommands sharing one set of flags."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file; flags override its values")
    common.add_argument("--dataset", type=Path, help="CSV with a header row")
    common.add_argument("--dataset-name", help="Name used in scenario ids (default: file stem)")
    common.add_argument("--synthetic", help="Synthetic spec, e.g. n=5000,d=8")
    common.add_argument("--label-column", type=int, help="Label column (default -1)")
    common.add_argument("--attack", type=str.lower, choices=["lf", "fp"], help="Attack kind")
    common.add_argument("--percent", type=float, help="Poison percentage for run")
    common.add_argument("--percentages", help="Comma separated sweep percentages")
    common.add_argument("--feature-index", type=int, help="Force the FP target column")
    common.add_argument("--target-client", type=int, help="Poisoned client index (default 0)")
    common.add_argument("--clients", type=int, help="Number of clients (default 2)")
    common.add_argument("--rounds", type=int, help="FedAvg rounds (default 20)")
    common.add_argument("--local-epochs", type=int, help="Local epochs per round (default 1)")
    common.add_argument("--batch-size", type=int, help="Mini-batch size (default 1000)")
    common.add_argument("--learning-rate", type=float, help="Fixed learning rate")
    common.add_argument("--hidden-sizes", help="Hidden widths, e.g. 2048,1024")
    common.add_argument("--seed", type=int, help="Master seed (default 0)")
    common.add_argument("--out", type=Path, help="Output directory (default runs)")
    common.add_argument("--workers", type=int, help="Parallel sweep entries (default 1)")
    common.add_argument("--fp-step3", choices=["on", "off"], help="FP class-mean fill (default on)")
    common.add_argument(
        "--log-level",
        default="INFO",
        type=str.upper,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )

    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Federated learning poisoning simulator (LF and FP attacks on a FedAvg MLP).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="Load or generate data and split it")
    sub.add_parser("importance", parents=[common], help="Permutation feature importance")
    sub.add_parser("run", parents=[common], help="One experiment")
    sub.add_parser("sweep", parents=[common], help="Baseline plus every attack and percentage")
    return parser


_FLAG_PATHS: dict[str, ConfigPath] = {
    "dataset": ("dataset",),
    "dataset_name": ("dataset_name",),
    "label_column": ("label_column",),
    "attack": ("attack",),
    "percent": ("percent",),
    "feature_index": ("feature_index",),
    "target_client": ("target_client",),
    "clients": ("federation", "num_clients"),
    "rounds": ("federation", "rounds"),
    "local_epochs": ("federation", "local_epochs"),
    "batch_size": ("federation", "train", "batch_size"),
    "learning_rate": ("federation", "train", "learning_rate"),
    "seed": ("seed",),
    "out": ("out",),
    "workers": ("workers",),
}


def flag_overrides(args: argparse.Namespace) -> dict[ConfigPath, object]:
    """Config locations set by the flags that were actually given."""
    overrides: dict[ConfigPath, object] = {
        path: getattr(args, flag)
        for flag, path in _FLAG_PATHS.items()
        if getattr(args, flag) is not None
    }
    if args.percentages is not None:
        overrides[("percentages",)] = split_list(args.percentages)
    if args.hidden_sizes is not None:
        overrides[("federation", "train", "hidden_sizes")] = split_list(args.hidden_sizes)
    if args.fp_step3 is not None:
        overrides[("step3_always",)] = args.fp_step3 == "on"
    if args.synthetic is not None:
        for key, value in parse_synthetic(args.synthetic).items():
            overrides[("synthetic", key)] = value
    return overrides


def configure_logging(level: Union[int, str], out: Path) -> None:
    """Log to stderr and ``<out>/run.log``.

    Also the initializer of sweep worker processes, which start without the
    parent's handlers.
    """
    out.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stderr),
            logging.FileHandler(out / "run.log", encoding="utf-8"),
        ],
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, flag_overrides(args))
    except (ValueError, OSError) as exc:
        parser.error(str(exc))

    configure_logging(args.log_level, cfg.out)
    try:
        return COMMANDS[args.command](cfg)
    except LabelColumnError as exc:
        parser.error(f"--label-column: {exc}")
    except (ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
