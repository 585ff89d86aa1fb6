"""Artifact files and the command-line surface."""

import csv
import json

import pytest

from pqnet import cli, figures, report
from pqnet.report import MismatchedConfig, compare, read_run_dir, write_run_dir
from pqnet.runner import run


def doc(workers=1, **extra):
    base = {"topology": {"kind": "linear", "size": 2},
            "flows": {"kind": "end_to_end"},
            "seed": 3, "end_time_ms": 0.5, "workers": workers}
    base.update(extra)
    return base


@pytest.fixture(scope="module")
def serial_report():
    return run(doc())


@pytest.fixture(scope="module")
def parallel_report():
    return run(doc(workers=2))


class TestRunDir:
    def test_round_trip(self, serial_report, tmp_path):
        paths = write_run_dir(serial_report, tmp_path / "p1")
        loaded = read_run_dir(tmp_path / "p1")
        assert loaded["format_version"] == report.FORMAT_VERSION
        assert loaded["trace_digest"] == serial_report["trace_digest"]
        assert loaded["deliveries"] == serial_report["deliveries"]
        assert paths["report"].name == "report.json"

    def test_traces_stripped(self, tmp_path):
        traced = run(doc(), keep_trace=True)
        write_run_dir(traced, tmp_path)
        assert "traces" not in read_run_dir(tmp_path)

    def test_worker_table_columns(self, serial_report, tmp_path):
        paths = write_run_dir(serial_report, tmp_path)
        with paths["workers"].open() as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == report.WORKER_COLUMNS
        assert len(rows) == 2
        assert rows[1][0] == "0"

    def test_version_gate(self, serial_report, tmp_path):
        write_run_dir(serial_report, tmp_path)
        target = tmp_path / "report.json"
        body = json.loads(target.read_text())
        body["format_version"] = 99
        target.write_text(json.dumps(body))
        with pytest.raises(ValueError, match="format version"):
            read_run_dir(tmp_path)


class TestCompare:
    def test_baseline_entry(self, serial_report, parallel_report):
        summary = compare([parallel_report], serial_report)
        first, second = summary["entries"]
        assert first["workers"] == 1
        assert first["speedup"] == 1.0
        assert first["efficiency"] == 1.0
        assert second["workers"] == 2
        assert second["results_match"] is True
        assert summary["config_hash"] == serial_report["config_hash"]

    def test_baseline_listed_among_runs_appears_once(self, serial_report,
                                                     parallel_report):
        summary = compare([serial_report, parallel_report], serial_report)
        assert [entry["workers"] for entry in summary["entries"]] == [1, 2]

    def test_rejects_foreign_config(self, serial_report):
        other = run(doc(seed=4))
        with pytest.raises(MismatchedConfig, match="differs"):
            compare([other], serial_report)

    def test_rejects_parallel_baseline(self, parallel_report):
        with pytest.raises(MismatchedConfig, match="sequential"):
            compare([], parallel_report)

    def test_written_files(self, serial_report, parallel_report, tmp_path):
        summary = compare([parallel_report], serial_report)
        paths = report.write_comparison(summary, tmp_path)
        with paths["comparison"].open() as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == report.COMPARISON_COLUMNS
        assert len(rows) == 3
        reloaded = json.loads(paths["summary"].read_text())
        assert reloaded["entries"][1]["results_match"] is True


class TestFigures:
    def test_render_all(self, serial_report, parallel_report, tmp_path):
        summary = compare([parallel_report], serial_report)
        rendered = figures.render_all(summary, tmp_path)
        assert [p.name for p in rendered] == [figures.DECOMPOSITION_FILE,
                                              figures.SPEEDUP_FILE]
        for path in rendered:
            assert path.stat().st_size > 1000


class TestCli:
    def write_config(self, tmp_path, **extra):
        path = tmp_path / "net.json"
        path.write_text(json.dumps(doc(**extra)))
        return str(path)

    def test_run_writes_run_dir(self, tmp_path, capsys):
        config = self.write_config(tmp_path)
        out = tmp_path / "p1"
        assert cli.main(["run", config, "--out", str(out)]) == 0
        loaded = read_run_dir(out)
        assert loaded["workers"] == 1
        printed = capsys.readouterr().out
        assert "delivered pairs: flow 0:" in printed

    def test_run_overrides(self, tmp_path):
        config = self.write_config(tmp_path)
        out = tmp_path / "p2"
        code = cli.main(["run", config, "--workers", "2", "--seed", "9",
                         "--dup-factor", "2", "--no-batching", "--out", str(out)])
        assert code == 0
        loaded = read_run_dir(out)
        assert loaded["workers"] == 2
        assert loaded["config"]["seed"] == 9
        assert loaded["config"]["features"]["duplication_factor"] == 2
        assert loaded["config"]["features"]["batching"] is False
        assert loaded["exchange_dup_bytes"] == 2 * loaded["exchange_base_bytes"]

    def test_partition_prints_map(self, tmp_path, capsys):
        config = self.write_config(tmp_path, workers=2)
        assert cli.main(["partition", config]) == 0
        body = json.loads(capsys.readouterr().out)
        assert body["workers"] == 2
        assert body["map"] == {"r0": 0, "r1": 1}

    def test_report_compares_runs(self, tmp_path, capsys):
        config = self.write_config(tmp_path)
        assert cli.main(["run", config, "--out", str(tmp_path / "p1")]) == 0
        assert cli.main(["run", config, "--workers", "2",
                         "--out", str(tmp_path / "p2")]) == 0
        out = tmp_path / "cmp"
        code = cli.main(["report", str(tmp_path / "p2"),
                         "--baseline", str(tmp_path / "p1"),
                         "--out", str(out)])
        assert code == 0
        assert (out / "summary.json").exists()
        assert (out / "comparison.csv").exists()
        assert (out / figures.SPEEDUP_FILE).exists()
        printed = capsys.readouterr().out
        assert "results=ok" in printed

    def test_report_mismatch_exits_2(self, tmp_path, capsys):
        config = self.write_config(tmp_path)
        (tmp_path / "other").mkdir()
        other = self.write_config(tmp_path / "other", seed=4)
        assert cli.main(["run", config, "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["run", other, "--out", str(tmp_path / "b")]) == 0
        code = cli.main(["report", str(tmp_path / "b"),
                         "--baseline", str(tmp_path / "a")])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_config_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"topology": {"kind": "moebius"}}))
        assert cli.main(["run", str(path)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "absent.json")]) == 2
        assert "error:" in capsys.readouterr().err
