"""End-to-end tests of the command-line interface on tiny synthetic runs."""

import json
import logging
from collections.abc import Callable
from concurrent.futures import Future
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pytest

from py_fedpoison import cli as fedpoison_cli
from py_fedpoison.attacks import AttackKind
from py_fedpoison.cli import (
    build_parser,
    configure_logging,
    flag_overrides,
    load_prepared,
    main,
    manifest_hash,
    run_entry,
)
from py_fedpoison.config import load_run_config
from py_fedpoison.report import parse_csv

TINY = [
    "--synthetic",
    "n=200,d=4",
    "--hidden-sizes",
    "16,8",
    "--rounds",
    "2",
    "--batch-size",
    "32",
    "--learning-rate",
    "0.0099",
    "--seed",
    "3",
]


def cli(out: Path, command: str, *args: str) -> int:
    return main([command, "--out", str(out), *TINY, *args])


def write_flows(path: Path, rows: int = 60) -> Path:
    """CSV with two informative columns, one constant column and a label."""
    rng = np.random.default_rng(0)
    labels = np.arange(rows) % 2
    lines = ["a,b,flat,label"]
    for label in labels:
        a, b = rng.normal(3.0 * label, 1.0), rng.normal(0.0, 1.0)
        lines.append(f"{a:.5f},{b:.5f},7,{label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class InlinePool:
    """Stands in for a process pool: runs the initializer, then each call in-process."""

    def __init__(
        self,
        max_workers: int,
        initializer: Optional[Callable[..., None]] = None,
        initargs: tuple[Any, ...] = (),
    ) -> None:
        self.max_workers = max_workers
        self.initializer = initializer
        self.initargs = initargs
        if initializer is not None:
            initializer(*initargs)

    def __enter__(self) -> "InlinePool":
        return self

    def __exit__(self, *exc_info: object) -> None:
        return None

    def submit(self, fn: Callable[..., Any], *args: Any, **kwargs: Any) -> "Future[Any]":
        future: Future[Any] = Future()
        try:
            future.set_result(fn(*args, **kwargs))
        except Exception as exc:  # noqa: BLE001
            future.set_exception(exc)
        return future


class TestFlags:
    """Test flag parsing into config overrides."""

    def test_only_given_flags_override(self) -> None:
        """Absent flags leave the file and defaults alone."""
        args = build_parser().parse_args(["run", "--rounds", "4", "--fp-step3", "off"])
        overrides = flag_overrides(args)
        assert overrides == {("federation", "rounds"): 4, ("step3_always",): False}

    def test_list_flags(self) -> None:
        """Comma separated flags become lists."""
        args = build_parser().parse_args(
            ["sweep", "--percentages", "1, 5", "--hidden-sizes", "8,4", "--synthetic", "n=50"],
        )
        overrides = flag_overrides(args)
        assert overrides[("percentages",)] == ["1", "5"]
        assert overrides[("federation", "train", "hidden_sizes")] == ["8", "4"]
        assert overrides[("synthetic", "n")] == "50"

    def test_attack_choice(self) -> None:
        """Unknown attacks are a usage error."""
        with pytest.raises(SystemExit) as excinfo:
            build_parser().parse_args(["run", "--attack", "xx"])
        assert excinfo.value.code == 2


class TestPrepare:
    """Test the prepare command."""

    def test_counts_and_manifest(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """n=1000 splits into 800/100/100 and records it in the manifest."""
        out = tmp_path / "run"
        assert main(["prepare", "--synthetic", "n=1000,d=4", "--out", str(out)]) == 0
        assert "train=800 validation=100 test=100" in capsys.readouterr().out

        manifest = json.loads((out / "prepared" / "manifest.json").read_text())
        assert manifest["counts"]["total"] == 1000
        assert manifest["counts"]["clients"] == [400, 400]
        assert manifest["num_clients"] == 2
        assert set(manifest["files"]) == {
            "client_1.npz",
            "client_2.npz",
            "validation.npz",
            "test.npz",
        }

    def test_same_seed_same_manifest_hash(
        self,
        tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """Preparing twice with one seed prints one hash; another seed differs."""

        def hash_for(out: str, seed: str) -> str:
            main(["prepare", "--synthetic", "n=300", "--seed", seed, "--out", str(tmp_path / out)])
            first = capsys.readouterr().out.splitlines()[0]
            assert first.startswith("manifest ")
            return first

        assert hash_for("a", "1") == hash_for("b", "1")
        assert hash_for("c", "1") != hash_for("d", "2")

    def test_prepared_data_round_trips(self, tmp_path: Path) -> None:
        """load_prepared returns the shards that were written."""
        assert cli(tmp_path, "prepare") == 0
        bundle, manifest = load_prepared(tmp_path)
        assert [s.n for s in bundle.client_shards] == manifest["counts"]["clients"]
        assert bundle.validation.n == bundle.test.n == 20

    def test_csv_source(self, tmp_path: Path) -> None:
        """A CSV dataset is loaded, normalized and split."""
        flows = write_flows(tmp_path / "flows.csv")
        out = tmp_path / "run"
        assert main(["prepare", "--dataset", str(flows), "--out", str(out)]) == 0
        manifest = json.loads((out / "prepared" / "manifest.json").read_text())
        assert manifest["dataset_name"] == "FLOWS"
        assert manifest["feature_names"] == ["a", "b", "flat"]
        log = (out / "run.log").read_text()
        assert log.count(f"Loaded {flows}:") == 1

    def test_bad_label_column_is_usage_error(self, tmp_path: Path) -> None:
        """A label column outside the file exits with status 2."""
        flows = write_flows(tmp_path / "flows.csv")
        argv = ["prepare", "--dataset", str(flows), "--label-column", "9", "--out", str(tmp_path)]
        with pytest.raises(SystemExit) as excinfo:
            main(argv)
        assert excinfo.value.code == 2

    def test_no_source(self, tmp_path: Path) -> None:
        """prepare needs a dataset or a synthetic spec."""
        assert main(["prepare", "--out", str(tmp_path)]) == 1

    def test_bad_config_value_is_usage_error(self, tmp_path: Path) -> None:
        """Invalid flag values exit with status 2."""
        with pytest.raises(SystemExit) as excinfo:
            main(["prepare", "--rounds", "0", "--out", str(tmp_path)])
        assert excinfo.value.code == 2


class TestImportance:
    """Test the importance command."""

    def test_needs_prepared_data(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Without prepare the error names the prepare command."""
        assert cli(tmp_path, "importance") == 1
        assert "py-fedpoison prepare" in capsys.readouterr().err

    def test_prints_informative_feature(
        self,
        tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """The planted synthetic feature is reported and exported."""
        assert cli(tmp_path, "prepare") == 0
        capsys.readouterr()
        assert cli(tmp_path, "importance") == 0
        assert capsys.readouterr().out.startswith("top feature 0 (f0)")
        assert (tmp_path / "importance.csv").is_file()
        summary = json.loads((tmp_path / "importance.json").read_text())
        assert summary["feature_names"] == ["f0", "f1", "f2", "f3"]


class TestRun:
    """Test the run command."""

    def test_clean_run(self, tmp_path: Path) -> None:
        """A run without an attack writes a record without ASR, a checkpoint and events."""
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "run") == 0
        (record,) = parse_csv(tmp_path / "results.csv")
        assert record.scenario_id == "N_BAU1^{SYN}"
        assert record.asr is None
        assert record.success is None
        assert (tmp_path / "checkpoints" / "n_bau1_syn.bau1").is_file()
        events = (tmp_path / "events" / "Experiment-n_bau1_syn.jsonl").read_text().splitlines()
        assert [json.loads(line)["Type"] for line in events][-1] == "ExperimentCompleted"

    def test_lf_run_merges_into_results(self, tmp_path: Path) -> None:
        """A second run adds its row next to the first."""
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "run") == 0
        assert cli(tmp_path, "run", "--attack", "lf", "--percent", "10") == 0
        records = parse_csv(tmp_path / "results.csv")
        assert [r.key for r in records] == [("N_BAU1^{SYN-LF}", 10.0), ("N_BAU1^{SYN}", 0.0)]
        lf = records[0]
        assert lf.asr is not None
        assert lf.server_accuracy + lf.asr == pytest.approx(1.0, abs=2e-4)

    def test_lf_record_complement_is_exact(self, tmp_path: Path) -> None:
        """Before rounding, LF accuracy and ASR sum to 1."""
        assert cli(tmp_path, "prepare") == 0
        args = build_parser().parse_args(["run", "--out", str(tmp_path), *TINY])
        cfg = load_run_config(None, flag_overrides(args))
        bundle, _ = load_prepared(tmp_path)
        record = run_entry(cfg, bundle, "SYN", AttackKind.LF, 25.0)
        assert record.asr is not None
        assert record.server_accuracy + record.asr == pytest.approx(1.0, abs=1e-12)

    def test_rounds_echo_to_stdout(
        self,
        tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """Every round's summary line is printed as it is logged."""
        assert cli(tmp_path, "prepare") == 0
        capsys.readouterr()
        assert cli(tmp_path, "run") == 0
        out = capsys.readouterr().out
        assert "[Experiment-n_bau1_syn] RoundCompleted round=1 " in out
        assert "[Experiment-n_bau1_syn] RoundCompleted round=2 " in out
        assert out.rstrip().splitlines()[-1].startswith("N_BAU1^{SYN} P=0%")

    def test_attack_needs_percent(self, tmp_path: Path) -> None:
        """--attack without --percent fails."""
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "run", "--attack", "lf") == 1

    def test_fp_on_constant_column_fails_cleanly(
        self,
        tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """FP on a constant column exits nonzero with the reason."""
        flows = write_flows(tmp_path / "flows.csv")
        base = ["--dataset", str(flows), "--out", str(tmp_path / "run"), "--rounds", "1"]
        assert main(["prepare", *base]) == 0
        status = main(
            ["run", *base, "--attack", "fp", "--percent", "5", "--feature-index", "2"],
        )
        assert status == 1
        err = capsys.readouterr().err
        assert "N_BAU1^{FLOWS-FP} at 5%" in err
        assert "constant" in err


class TestSweep:
    """Test the sweep command."""

    def test_baseline_plus_each_percentage(self, tmp_path: Path) -> None:
        """One attack over two percentages gives three records."""
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "sweep", "--attack", "lf", "--percentages", "5,10") == 0
        keys = [r.key for r in parse_csv(tmp_path / "results.csv")]
        assert keys == [
            ("N_BAU1^{SYN-LF}", 5.0),
            ("N_BAU1^{SYN-LF}", 10.0),
            ("N_BAU1^{SYN}", 0.0),
        ]

    def test_resumed_sweep_matches_uninterrupted(self, tmp_path: Path) -> None:
        """Finishing a partial sweep gives the same CSV as one full pass."""
        partial, full = tmp_path / "partial", tmp_path / "full"
        for out in (partial, full):
            assert cli(out, "prepare") == 0
        assert cli(partial, "sweep", "--attack", "lf", "--percentages", "5") == 0
        assert cli(partial, "sweep", "--attack", "lf", "--percentages", "5,10") == 0
        assert cli(full, "sweep", "--attack", "lf", "--percentages", "5,10") == 0
        results = "results.csv"
        assert (partial / results).read_bytes() == (full / results).read_bytes()

    def test_resume_ignores_rows_of_another_seed(self, tmp_path: Path) -> None:
        """Preparing and sweeping again with a new seed replaces every earlier row."""
        grid = ["--attack", "lf", "--percentages", "5"]
        assert cli(tmp_path, "prepare", "--seed", "1") == 0
        assert cli(tmp_path, "sweep", *grid, "--seed", "1") == 0
        before = {r.key: r for r in parse_csv(tmp_path / "results.csv")}

        assert cli(tmp_path, "prepare", "--seed", "2") == 0
        assert cli(tmp_path, "sweep", *grid, "--seed", "2") == 0
        after = parse_csv(tmp_path / "results.csv")
        assert [r.key for r in after] == list(before)
        assert [r.seed for r in after] == [2, 2]
        assert all(r.client_losses != before[r.key].client_losses for r in after)

        _, manifest = load_prepared(tmp_path)
        stamp = json.loads((tmp_path / "results.json").read_text())
        assert stamp == {"prepared_manifest": manifest_hash(manifest)}

    def test_seed_change_alone_reruns(self, tmp_path: Path) -> None:
        """On the same prepared data a new seed does not reuse the old rows."""
        grid = ["--attack", "lf", "--percentages", "5"]
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "sweep", *grid) == 0
        assert cli(tmp_path, "sweep", *grid, "--seed", "4") == 0
        assert [r.seed for r in parse_csv(tmp_path / "results.csv")] == [4, 4]

    def test_results_of_other_prepared_data_are_dropped(self, tmp_path: Path) -> None:
        """Re-preparing with the same seed but other data starts the results afresh."""
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "run") == 0
        (stale,) = parse_csv(tmp_path / "results.csv")
        assert cli(tmp_path, "prepare", "--synthetic", "n=240,d=4") == 0
        assert cli(tmp_path, "sweep", "--attack", "lf", "--percentages", "10") == 0
        lf, clean = parse_csv(tmp_path / "results.csv")
        assert (lf.key, clean.key) == (("N_BAU1^{SYN-LF}", 10.0), ("N_BAU1^{SYN}", 0.0))
        assert clean.client_losses != stale.client_losses
        assert "starting it afresh" in (tmp_path / "run.log").read_text()

    def test_unstamped_results_are_rerun(self, tmp_path: Path) -> None:
        """A results.csv without its stamp is not trusted for resuming."""
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "sweep", "--attack", "lf", "--percentages", "5") == 0
        first = (tmp_path / "results.csv").read_bytes()
        (tmp_path / "results.json").unlink()
        assert cli(tmp_path, "sweep", "--attack", "lf", "--percentages", "5") == 0
        assert (tmp_path / "results.json").is_file()
        assert (tmp_path / "results.csv").read_bytes() == first

    def test_workers_get_logging_setup(
        self,
        tmp_path: Path,
        monkeypatch: pytest.MonkeyPatch,
    ) -> None:
        """Worker processes are initialized with the run's log level and log file."""
        pools: list[InlinePool] = []

        def make_pool(**kwargs: Any) -> InlinePool:
            pool = InlinePool(**kwargs)
            pools.append(pool)
            return pool

        monkeypatch.setattr(fedpoison_cli, "ProcessPoolExecutor", make_pool)
        assert cli(tmp_path, "prepare") == 0
        argv = ["--attack", "lf", "--percentages", "5", "--workers", "2", "--log-level", "debug"]
        assert cli(tmp_path, "sweep", *argv) == 0

        (pool,) = pools
        assert pool.max_workers == 2
        assert pool.initializer is configure_logging
        assert pool.initargs == (logging.DEBUG, tmp_path)
        assert len(parse_csv(tmp_path / "results.csv")) == 2
        assert "Appended RoundCompleted" in (tmp_path / "run.log").read_text()

    def test_zero_percent_matches_baseline(self, tmp_path: Path) -> None:
        """LF at 0% reproduces the clean metrics."""
        assert cli(tmp_path, "prepare") == 0
        assert cli(tmp_path, "sweep", "--attack", "lf", "--percentages", "0") == 0
        lf, clean = parse_csv(tmp_path / "results.csv")
        assert lf.client_losses == clean.client_losses
        assert lf.server_accuracy == clean.server_accuracy

    def test_failed_entries_are_reported(
        self,
        tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """A failing FP entry is logged while the rest of the sweep finishes."""
        flows = write_flows(tmp_path / "flows.csv")
        base = ["--dataset", str(flows), "--out", str(tmp_path / "run"), "--rounds", "1"]
        assert main(["prepare", *base]) == 0
        status = main(["sweep", *base, "--percentages", "5", "--feature-index", "2"])
        assert status == 1
        assert "FAILED N_BAU1^{FLOWS-FP} at 5%" in capsys.readouterr().err
        keys = [r.key for r in parse_csv(tmp_path / "run" / "results.csv")]
        assert keys == [("N_BAU1^{FLOWS-LF}", 5.0), ("N_BAU1^{FLOWS}", 0.0)]

    @pytest.mark.slow
    def test_default_grid_and_workers(self, tmp_path: Path) -> None:
        """Both attacks over the default percentages give 21 records, in parallel too."""
        serial, parallel = tmp_path / "serial", tmp_path / "parallel"
        for out in (serial, parallel):
            assert cli(out, "prepare") == 0
        assert cli(serial, "sweep") == 0
        assert cli(parallel, "sweep", "--workers", "2") == 0
        assert len(parse_csv(serial / "results.csv")) == 21
        assert (serial / "results.csv").read_bytes() == (parallel / "results.csv").read_bytes()
