"""CLI surface: subcommands, exit codes, machine-parseable errors."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
import requests

from stagekit.cli import dispatch
from stagekit.metrics import parse_run_summary
from stagekit.simnode import FaultSpec, SimNodeConfig

from conftest import single_node_fleet


@pytest.fixture
def workspace(tmp_path):
    staging = tmp_path / "stage"
    cfg = tmp_path / "stage.conf"
    cfg.write_text(f"staging_dir = {staging}\n")
    return tmp_path, staging, cfg


def write_manifest(tmp_path, fleet, node="node-a", **kwargs) -> Path:
    p = tmp_path / f"{node}.manifest"
    p.write_text(fleet.publish_manifest(node, **kwargs))
    return p


class TestEstimate:
    def test_prints_totals(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {"a.nc": 700, "d/b.nc": 300})
        m = write_manifest(tmp_path, fleet)
        assert dispatch(["estimate", "-m", str(m), "-c", str(cfg)], env={}) == 0
        out = capsys.readouterr().out
        assert "files: 2" in out
        assert "total bytes: 1000" in out

    def test_probes_missing_sizes(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {"a.nc": 2048})
        text = fleet.publish_manifest("node-a")
        # strip the declared size so only a HEAD probe can find it
        stripped = "\n".join(line.rsplit(" ", 1)[0] if line.startswith("file") else line
                             for line in text.splitlines())
        m = tmp_path / "m.manifest"
        m.write_text(stripped + "\n")
        assert dispatch(["estimate", "-m", str(m), "-c", str(cfg)], env={}) == 0
        out = capsys.readouterr().out
        assert "total bytes: 2048" in out
        assert "unknown sizes: 0" in out

    def test_no_probe_flag_leaves_lower_bound(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {"a.nc": 2048})
        text = fleet.publish_manifest("node-a")
        stripped = "\n".join(line.rsplit(" ", 1)[0] if line.startswith("file") else line
                             for line in text.splitlines())
        m = tmp_path / "m.manifest"
        m.write_text(stripped + "\n")
        dispatch(["estimate", "-m", str(m), "-c", str(cfg), "--no-probe"], env={})
        out = capsys.readouterr().out
        assert "lower bound" in out


class TestRun:
    def test_run_then_resume(self, fleet_factory, workspace, capsys):
        tmp_path, staging, cfg = workspace
        catalog = {f"d/f{i}.nc": 4000 for i in range(3)}
        fleet = single_node_fleet(fleet_factory, catalog)
        m = write_manifest(tmp_path, fleet)

        assert dispatch(["run", "-m", str(m), "-c", str(cfg)], env={}) == 0
        out = capsys.readouterr().out
        assert "Done: 3" in out
        assert "Files:\t3" in out
        for p in catalog:
            assert (staging / p).exists()

        assert dispatch(["run", "-m", str(m), "-c", str(cfg)], env={}) == 0
        out2 = capsys.readouterr().out
        assert "bytes transferred: 0" in out2

    def test_run_summary_block_reparses(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {"x.nc": 1000})
        m = write_manifest(tmp_path, fleet)
        dispatch(["run", "-m", str(m), "-c", str(cfg)], env={})
        out = capsys.readouterr().out
        block = out[out.index("Task ID:") :]
        summary = parse_run_summary(block)
        assert summary.files == 1
        assert summary.dirs == 0
        assert summary.total_tasks == 2
        assert summary.bytes_transferred == 1000
        assert summary.faults == 0

    def test_quota_refused_exit_3_zero_transfer(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        cfg.write_text(cfg.read_text() + "quota_bytes = 100\n")
        fleet = single_node_fleet(fleet_factory, {"big.nc": 5000})
        m = write_manifest(tmp_path, fleet)
        assert dispatch(["run", "-m", str(m), "-c", str(cfg)], env={}) == 3
        err = capsys.readouterr().err
        assert "ERROR QuotaExceeded" in err
        assert "5000" in err
        assert fleet.node("node-a").get_counts == {}

    def test_quota_override_env_allows_run(self, fleet_factory, workspace):
        tmp_path, _, cfg = workspace
        cfg.write_text(cfg.read_text() + "quota_bytes = 100\n")
        fleet = single_node_fleet(fleet_factory, {"big.nc": 5000})
        m = write_manifest(tmp_path, fleet)
        env = {"STAGE_QUOTA_OVERRIDE": "true"}
        assert dispatch(["run", "-m", str(m), "-c", str(cfg)], env=env) == 0

    def test_unresolved_failures_exit_1(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        fleet = single_node_fleet(
            fleet_factory,
            {"bad.nc": 1000},
            faults=[FaultSpec(kind="wrong_published_checksum", match="bad.nc")],
        )
        m = write_manifest(tmp_path, fleet)
        assert dispatch(["run", "-m", str(m), "-c", str(cfg)], env={}) == 1
        out = capsys.readouterr().out
        assert "ALERT bad source" in out


class TestStatus:
    def test_counts_after_partial_run(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {"a.nc": 100, "b.nc": 100})
        m_all = write_manifest(tmp_path, fleet)
        m_one = tmp_path / "one.manifest"
        m_one.write_text(fleet.publish_manifest("node-a", paths=["a.nc"]))

        dispatch(["run", "-m", str(m_one), "-c", str(cfg)], env={})
        capsys.readouterr()
        assert dispatch(["status", "-m", str(m_all), "-c", str(cfg)], env={}) == 0
        out = capsys.readouterr().out
        assert "Done: 1" in out
        assert "Pending: 1" in out


class TestReport:
    def test_report_after_run(self, fleet_factory, workspace, capsys):
        tmp_path, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {"a.nc": 50_000})
        m = write_manifest(tmp_path, fleet)
        dispatch(["run", "-m", str(m), "-c", str(cfg)], env={})
        capsys.readouterr()
        assert dispatch(["report", "-c", str(cfg)], env={}) == 0
        out = capsys.readouterr().out
        assert fleet.node("node-a").netloc in out

        assert dispatch(["report", "-c", str(cfg), "--csv"], env={}) == 0
        csv_out = capsys.readouterr().out
        assert csv_out.startswith("node_id,")

    def test_report_without_samples_is_usage_error(self, workspace, capsys):
        _, _, cfg = workspace
        assert dispatch(["report", "-c", str(cfg)], env={}) == 2
        assert "ERROR UsageError" in capsys.readouterr().err


class TestProbe:
    def test_probe_matrix(self, fleet_factory, workspace, capsys):
        _, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {})
        node = fleet.node("node-a")
        rc = dispatch(
            ["probe", "--nodes", node.base_url, "--bytes", "100000", "-c", str(cfg)],
            env={},
        )
        assert rc == 0
        out = capsys.readouterr().out
        lines = out.strip().split("\n")
        assert lines[0] == "node_id,bytes,seconds,rate_bytes_per_sec,ewma_rate"
        assert lines[1].startswith(node.netloc)

    def test_unreachable_probe_isolated(self, fleet_factory, workspace, capsys):
        _, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {})
        node = fleet.node("node-a")
        rc = dispatch(
            [
                "probe",
                "--nodes",
                f"{node.base_url},http://127.0.0.1:1",
                "--bytes",
                "100000",
                "-c",
                str(cfg),
            ],
            env={},
        )
        assert rc == 0
        captured = capsys.readouterr()
        assert "ERROR ProbeFailed: 127.0.0.1:1" in captured.err

    def test_tiny_probe_usage_error(self, fleet_factory, workspace, capsys):
        _, _, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {})
        rc = dispatch(
            ["probe", "--nodes", fleet.node("node-a").base_url, "--bytes", "10",
             "-c", str(cfg)],
            env={},
        )
        assert rc == 2


class TestSimfleetCommand:
    def test_fleet_config_starts_nodes(self, tmp_path):
        # Exercise the same loading path the simfleet command uses, then
        # drive the started fleet over HTTP.
        from stagekit.simnode import load_fleet_config, start_fleet

        ini = tmp_path / "fleet.ini"
        ini.write_text("[n1]\ncatalog = a.nc:100\n[n2]\ncatalog = b.nc:50\n")
        fleet = start_fleet(load_fleet_config(ini))
        try:
            r = requests.head(fleet.node("n1").url_for("a.nc"))
            assert r.headers["Content-Length"] == "100"
        finally:
            fleet.stop()

    def test_simfleet_foreground_serves_until_interrupted(self, tmp_path):
        import signal
        import subprocess
        import sys
        import time

        ini = tmp_path / "fleet.ini"
        ini.write_text("[n1]\nlisten = 127.0.0.1:0\ncatalog = a.nc:77\n")
        proc = subprocess.Popen(
            [sys.executable, "-m", "stagekit", "simfleet", "-c", str(ini)],
            stdout=subprocess.PIPE,
            text=True,
        )
        try:
            line = proc.stdout.readline()
            assert "listening on" in line
            base = line.strip().rsplit(" ", 1)[-1]
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                try:
                    r = requests.head(f"{base}/a.nc", timeout=1)
                    break
                except requests.RequestException:
                    time.sleep(0.05)
            assert r.headers["Content-Length"] == "77"
        finally:
            proc.send_signal(signal.SIGINT)
            assert proc.wait(timeout=10) == 0

    @pytest.mark.skipif(not __import__("os").path.exists("/dev/full"),
                        reason="needs /dev/full")
    def test_storage_failure_exit_5(self, fleet_factory, workspace, capsys):
        import os

        tmp_path, staging, cfg = workspace
        fleet = single_node_fleet(fleet_factory, {"a.nc": 5000})
        m = write_manifest(tmp_path, fleet)
        staging.mkdir(parents=True, exist_ok=True)
        os.symlink("/dev/full", staging / "a.nc.part")
        assert dispatch(["run", "-m", str(m), "-c", str(cfg)], env={}) == 5
        out = capsys.readouterr().out
        assert "aborted: StorageFull" in out


class TestErrors:
    def test_missing_manifest_exit_2(self, workspace, capsys):
        _, _, cfg = workspace
        rc = dispatch(["estimate", "-m", "/nope/m.txt", "-c", str(cfg)], env={})
        assert rc == 2
        assert "ERROR UsageError" in capsys.readouterr().err

    def test_malformed_manifest_exit_2(self, tmp_path, workspace, capsys):
        _, _, cfg = workspace
        bad = tmp_path / "bad.manifest"
        bad.write_text("dataset d\nfile 'a' 'http://h/a' 'md5'\n")
        rc = dispatch(["estimate", "-m", str(bad), "-c", str(cfg)], env={})
        assert rc == 2
        assert "ERROR ManifestParseError" in capsys.readouterr().err

    def test_unknown_command_exit_2(self, capsys):
        assert dispatch(["frobnicate"], env={}) == 2

    def test_replica_conflict_exit_2(self, fleet_factory, tmp_path, workspace, capsys):
        _, _, cfg = workspace
        # Different seeds: same path, different served bytes and digests.
        fleet = fleet_factory(
            [
                SimNodeConfig(node_id="n1", catalog={"x.nc": 100}, content_seed=1),
                SimNodeConfig(node_id="n2", catalog={"x.nc": 100}, content_seed=2),
            ]
        )
        m1 = tmp_path / "m1"
        m2 = tmp_path / "m2"
        m1.write_text(fleet.publish_manifest("n1"))
        m2.write_text(fleet.publish_manifest("n2"))
        rc = dispatch(["run", "-m", str(m1), "-m", str(m2), "-c", str(cfg)], env={})
        assert rc == 2
        assert "ERROR ReplicaConflict" in capsys.readouterr().err
