"""Operator entry point.

Subcommands: estimate, run, status, report, probe, simfleet. Rerunning
``run`` is the resume path; the journal decides what is still pending.
There are no interactive prompts anywhere: every decision is a flag, a
config key, or a ``STAGE_*`` environment variable, so everything is safe
to drive from cron.

Exit codes: 0 success; 1 run completed with unresolved task failures;
2 usage or input error; 3 quota refused; 4 credential failure;
5 storage or journal failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Mapping

from . import __version__
from .clock import SYSTEM_CLOCK
from .config import Settings, load_settings
from .credential import CredentialManager, LocalTokenProvider
from .errors import (
    CredentialExpired,
    JournalCorrupt,
    ManifestParseError,
    NoAvailableReplica,
    QuotaExceeded,
    RefreshFailed,
    ReplicaConflict,
    StagingError,
    StorageFull,
    UsageError,
)
from .journal import StatusJournal
from .manifest import (
    Manifest,
    group_replicas,
    node_id_of,
    parse_manifest,
    probe_unknown_sizes,
    summarize_replica_sets,
)
from .metrics import (
    MetricsStore,
    parse_run_summary,  # noqa: F401  (public surface, used by tooling)
    probe as run_probe,
    render_node_report,
    render_run_summary,
)
from .scheduler import RunReport, Scheduler, build_plan
from .simnode import load_fleet_config, start_fleet
from .transport import HttpConnection

JOURNAL_NAME = "transfer.journal"
SAMPLES_NAME = "throughput_samples.csv"

EXIT_OK = 0
EXIT_UNRESOLVED = 1
EXIT_USAGE = 2
EXIT_QUOTA = 3
EXIT_CREDENTIAL = 4
EXIT_STORAGE = 5

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="stagekit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        return p

    p = add("estimate", "summarize dataset volume before transferring")
    p.add_argument("-m", "--manifest", action="append", required=True)
    p.add_argument("-c", "--config")
    p.add_argument("--no-probe", action="store_true",
                   help="do not probe nodes for missing sizes")

    p = add("run", "build a plan and execute it (rerun to resume)")
    p.add_argument("-m", "--manifest", action="append", required=True)
    p.add_argument("-c", "--config")

    p = add("status", "per-state counts from the journal")
    p.add_argument("-m", "--manifest", action="append", required=True)
    p.add_argument("-c", "--config")

    p = add("report", "per-node throughput report from recorded samples")
    p.add_argument("-c", "--config")
    p.add_argument("--samples", help="samples CSV (default: staging dir)")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of text")

    p = add("probe", "measure nodes with a fixed-size download")
    p.add_argument("--nodes", required=True, help="comma-separated base urls")
    p.add_argument("--bytes", type=int, required=True)
    p.add_argument("-c", "--config")

    p = add("simfleet", "run a simulated data-node fleet in the foreground")
    p.add_argument("-c", "--config", required=True)

    return parser


def _load_manifests(paths: list[str]) -> list[Manifest]:
    manifests = []
    for path in paths:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"manifest not found: {p}")
        manifests.append(parse_manifest(p.read_text()))
    return manifests


def _print_summary(summary) -> None:
    print(f"files: {summary.file_count}")
    print(f"directories: {summary.dir_count}")
    print(f"total bytes: {summary.total_bytes} ({summary.human_total()})")
    print(f"unknown sizes: {summary.unknown_size_count}")
    if summary.is_lower_bound:
        print("note: total is a lower bound; some sizes are unknown")


def _cmd_estimate(args, env: Mapping[str, str]) -> int:
    load_settings(args.config, env)  # validates config early
    sets = group_replicas(_load_manifests(args.manifest))
    if not args.no_probe:
        sets = probe_unknown_sizes(sets, HttpConnection())
    _print_summary(summarize_replica_sets(sets))
    return EXIT_OK


def _print_run_report(report: RunReport) -> None:
    print(f"run {report.run_id}: {report.waves} wave(s), "
          f"{report.elapsed_wall_s:.2f}s wall")
    for state in sorted(report.state_counts):
        print(f"  {state}: {report.state_counts[state]}")
    print(f"bytes transferred: {report.bytes_streamed}"
          f" (delivered: {report.bytes_delivered})")
    for w in report.warnings:
        print(f"warning: {w}")
    for path, url in report.bad_replicas:
        print(f"ALERT bad source for {path}: {url}")
    for path in report.relocation_needed:
        print(f"relocation needed: {path} (supply a new manifest)")
    for path, url in report.remapped:
        print(f"remapped: {path} -> {url}")
    if report.fault_events:
        print(f"faults: {report.faults}")
        for ev in report.fault_events:
            print(f"  fault: {ev}")
    if report.aborted:
        print(f"aborted: {report.aborted} (rerun to resume)")


def _cmd_run(args, env: Mapping[str, str]) -> int:
    settings = load_settings(args.config, env)
    manifests = _load_manifests(args.manifest)
    sets = group_replicas(manifests)

    # Advance volume estimate drives the quota preflight; unknown sizes are
    # probed so the refusal happens before any transfer starts.
    if any(rs.size_bytes is None for rs in sets):
        sets = probe_unknown_sizes(sets, HttpConnection())
    summary = summarize_replica_sets(sets)

    staging = settings.staging_dir
    staging.mkdir(parents=True, exist_ok=True)
    journal = StatusJournal(staging / JOURNAL_NAME)
    expected = {rs.relative_path: (rs.checksum_type, rs.checksum_hex) for rs in sets}
    done = journal.done_paths(expected)
    pending_sets = [rs for rs in sets if rs.relative_path not in done]

    store = MetricsStore(ewma_alpha=settings.scheduler.ewma_alpha)
    samples_path = staging / SAMPLES_NAME
    if samples_path.exists():
        store.load_csv(samples_path)

    plan = build_plan(pending_sets, settings.scheduler, summary)
    if done:
        plan.warnings.append(f"{len(done)} file(s) already staged; resuming")

    credman = CredentialManager(
        LocalTokenProvider(SYSTEM_CLOCK), settings.credential_policy
    )
    sched = Scheduler(
        settings.scheduler,
        credman,
        journal,
        store,
        retry=settings.retry,
        verify_mode=settings.verify_mode,
    )

    report = _run_interruptible(sched, plan, staging)
    store.save_csv(samples_path)
    journal.close()

    _print_run_report(report)
    print(render_run_summary(report.summary), end="")

    if report.aborted == "StorageFull":
        return EXIT_STORAGE
    if report.aborted == "RefreshFailed":
        return EXIT_CREDENTIAL
    return EXIT_UNRESOLVED if report.unresolved else EXIT_OK


def _run_interruptible(sched: Scheduler, plan, staging) -> RunReport:
    """Run the coordinator off the main thread so signals stop it cleanly."""
    box: dict[str, object] = {}

    def target() -> None:
        try:
            box["report"] = sched.run(plan, staging)
        except BaseException as exc:  # surfaced after join
            box["error"] = exc

    t = threading.Thread(target=target, name="stage-coordinator")
    t.start()
    try:
        while t.is_alive():
            t.join(0.2)
    except KeyboardInterrupt:
        print("ERROR Interrupted: finishing in-flight transfers", file=sys.stderr)
        sched.stop_requested.set()
        t.join()
    if "error" in box:
        raise box["error"]  # type: ignore[misc]
    return box["report"]  # type: ignore[return-value]


def _cmd_status(args, env: Mapping[str, str]) -> int:
    settings = load_settings(args.config, env)
    sets = group_replicas(_load_manifests(args.manifest))
    journal = StatusJournal(settings.staging_dir / JOURNAL_NAME)
    expected = {rs.relative_path: (rs.checksum_type, rs.checksum_hex) for rs in sets}
    done = journal.done_paths(expected)
    counts = journal.state_counts()
    print(f"Done: {len(done)}")
    print(f"PersistentChecksumMismatch: {counts.get('PersistentChecksumMismatch', 0)}")
    print(f"Pending: {len(sets) - len(done)}")
    journal.close()
    return EXIT_OK


def _cmd_report(args, env: Mapping[str, str]) -> int:
    settings = load_settings(args.config, env)
    samples = Path(args.samples) if args.samples else settings.staging_dir / SAMPLES_NAME
    if not samples.exists():
        raise UsageError(f"no samples recorded at {samples}")
    store = MetricsStore(ewma_alpha=settings.scheduler.ewma_alpha)
    store.load_csv(samples)
    text, csv_text = render_node_report(store.aggregates())
    print(csv_text if args.csv else text, end="")
    return EXIT_OK


def _cmd_probe(args, env: Mapping[str, str]) -> int:
    settings = load_settings(args.config, env)
    nodes = {}
    for base in args.nodes.split(","):
        base = base.strip()
        if base:
            nodes[node_id_of(base)] = base
    if not nodes:
        raise UsageError("no nodes given")

    store = MetricsStore(ewma_alpha=settings.scheduler.ewma_alpha)
    samples_path = settings.staging_dir / SAMPLES_NAME
    if samples_path.exists():
        store.load_csv(samples_path)

    cred = LocalTokenProvider(SYSTEM_CLOCK).issue(settings.credential_policy.lifetime_s)
    try:
        results, csv_text = run_probe(nodes, args.bytes, cred, store, HttpConnection())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(csv_text, end="")
    for node_id, rate in results.items():
        if rate is None:
            print(f"ERROR ProbeFailed: {node_id}", file=sys.stderr)
    settings.staging_dir.mkdir(parents=True, exist_ok=True)
    store.save_csv(samples_path)
    return EXIT_OK


def _cmd_simfleet(args, env: Mapping[str, str]) -> int:
    configs = load_fleet_config(args.config)
    if not configs:
        raise UsageError("fleet config defines no nodes")
    fleet = start_fleet(configs)
    try:
        for node_id, node in fleet.nodes.items():
            print(f"node {node_id} listening on {node.base_url}", flush=True)
        signal.pause()
    except KeyboardInterrupt:
        pass
    finally:
        fleet.stop()
    return EXIT_OK


_COMMANDS = {
    "estimate": _cmd_estimate,
    "run": _cmd_run,
    "status": _cmd_status,
    "report": _cmd_report,
    "probe": _cmd_probe,
    "simfleet": _cmd_simfleet,
}


def _err(exc: BaseException) -> None:
    print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)


def dispatch(argv: list[str], env: Mapping[str, str] | None = None) -> int:
    """Entry point with the documented exit-code mapping."""
    env = env if env is not None else os.environ
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args, env)
    except UsageError as exc:
        _err(exc)
        return EXIT_USAGE
    except (ManifestParseError, ReplicaConflict, NoAvailableReplica) as exc:
        _err(exc)
        return EXIT_USAGE
    except QuotaExceeded as exc:
        _err(exc)
        return EXIT_QUOTA
    except (RefreshFailed, CredentialExpired) as exc:
        _err(exc)
        return EXIT_CREDENTIAL
    except (StorageFull, JournalCorrupt) as exc:
        _err(exc)
        return EXIT_STORAGE
    except StagingError as exc:
        _err(exc)
        return EXIT_UNRESOLVED
    except OSError as exc:
        _err(exc)
        return EXIT_STORAGE


def _raise_interrupt(_signo, _frame) -> None:
    raise KeyboardInterrupt


def main() -> None:
    signal.signal(signal.SIGTERM, _raise_interrupt)
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
