"""Transfer planning and concurrent execution.

A plan assigns every file exactly one replica, chosen by measured
throughput (exponentially weighted moving average of per-transfer rates,
with a configurable prior for nodes never seen). The run loop dispatches
in waves under a global and a per-node concurrency cap, refreshing
credentials before each wave, and reacts to the failures a fleet can
throw at it: checksum-exhausted sources trigger a re-fetch from an
alternate replica, permanently-gone nodes trigger remapping, storage or
refresh failures abort the run resumably.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from queue import Queue
from typing import Callable

from . import engine
from .clock import SYSTEM_CLOCK, Clock
from .credential import CredentialManager
from .engine import FileTask, RetryPolicy, TransferState
from .errors import (
    CredentialExpired,
    NoAvailableReplica,
    NodeGone,
    QuotaExceeded,
    RefreshFailed,
    StagingError,
    StorageFull,
)
from .journal import StatusJournal, utc_stamp
from .manifest import DatasetSummary, FileEntry, ReplicaSet, directory_prefixes
from .metrics import MetricsStore, RunSummary, ThroughputSample
from .transport import HttpConnection

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SchedulerConfig:
    global_limit: int = 8
    per_node_limit: int = 4
    quota_bytes: int | None = None
    quota_override: bool = False
    ewma_alpha: float = 0.3
    unknown_rate_prior: float = 1e6

    def __post_init__(self) -> None:
        if not 1 <= self.per_node_limit <= self.global_limit:
            raise ValueError("need 1 <= per_node_limit <= global_limit")
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must be in (0, 1]")
        if self.unknown_rate_prior <= 0:
            raise ValueError("unknown_rate_prior must be positive")


@dataclass
class NodeProfile:
    node_id: str
    ewma_rate: float | None = None
    available: bool = True
    total_bytes: int = 0
    total_transfer_seconds: float = 0.0


@dataclass
class TransferPlan:
    run_id: str
    tasks: list[FileTask]
    replica_sets: dict[str, ReplicaSet]
    created_at: float
    warnings: list[str] = field(default_factory=list)

    def task_for(self, relative_path: str) -> FileTask:
        for t in self.tasks:
            if t.entry.relative_path == relative_path:
                return t
        raise KeyError(relative_path)


def select_replica(
    rs: ReplicaSet,
    profiles: dict[str, NodeProfile],
    *,
    unknown_rate_prior: float = 1e6,
    exclude_urls: frozenset[str] | set[str] = frozenset(),
) -> tuple[str, str]:
    """Pick the available location with the best effective rate.

    Unknown rates take the prior; ties break toward the lexicographically
    smallest node id, so planning is deterministic.
    """
    candidates: list[tuple[float, str, str]] = []
    for url, node_id in rs.locations:
        if url in exclude_urls:
            continue
        prof = profiles.get(node_id)
        if prof is not None and not prof.available:
            continue
        rate = prof.ewma_rate if prof and prof.ewma_rate else unknown_rate_prior
        candidates.append((-rate, node_id, url))
    if not candidates:
        raise NoAvailableReplica(rs.relative_path)
    candidates.sort()
    _, node_id, url = candidates[0]
    return url, node_id


def build_plan(
    replica_sets: list[ReplicaSet],
    config: SchedulerConfig,
    summary: DatasetSummary,
    profiles: dict[str, NodeProfile] | None = None,
    run_id: str | None = None,
    clock: Clock = SYSTEM_CLOCK,
) -> TransferPlan:
    """Quota preflight plus replica choice for every file.

    Raises QuotaExceeded before anything is transferred when the declared
    volume exceeds the quota and no override is set; a stoppage in the
    middle of a long run becomes a refusal up front instead.
    """
    warnings: list[str] = []
    if config.quota_bytes is not None and summary.total_bytes > config.quota_bytes:
        if not config.quota_override:
            raise QuotaExceeded(summary.total_bytes, config.quota_bytes)
        warnings.append(
            f"quota override active: planned {summary.total_bytes} bytes "
            f"exceeds quota {config.quota_bytes} bytes"
        )
    if summary.is_lower_bound:
        warnings.append(
            f"{summary.unknown_size_count} file size(s) unknown; "
            "volume total is a lower bound"
        )

    profiles = profiles or {}
    tasks: list[FileTask] = []
    for rs in replica_sets:
        url, _node = select_replica(
            rs, profiles, unknown_rate_prior=config.unknown_rate_prior
        )
        entry = FileEntry(
            relative_path=rs.relative_path,
            url=url,
            checksum_type=rs.checksum_type,
            checksum_hex=rs.checksum_hex,
            size_bytes=rs.size_bytes,
        )
        tasks.append(FileTask(entry=entry))

    return TransferPlan(
        run_id=run_id or f"run-{uuid.uuid4().hex[:12]}",
        tasks=tasks,
        replica_sets={rs.relative_path: rs for rs in replica_sets},
        created_at=clock.now(),
        warnings=warnings,
    )


def handle_node_gone(
    plan: TransferPlan,
    node_id: str,
    relocation: str | None = None,
    *,
    profiles: dict[str, NodeProfile] | None = None,
    unavailable: set[str] | None = None,
    unknown_rate_prior: float = 1e6,
    exclude_paths: frozenset[str] | set[str] = frozenset(),
) -> list[tuple[str, str, str]]:
    """Remap every non-terminal task assigned to a permanently-gone node.

    Preference order per task: an alternate replica on a live node, then
    the relocation url prefix, then nothing (the operator must supply a
    new manifest). Returns (action, path, detail) tuples where action is
    one of remapped / relocated / stranded. In-flight tasks are left
    alone; they fail against the node shortly and come back through the
    same resolution, as does the task that reported the node gone (its
    path arrives in ``exclude_paths``).
    """
    profiles = profiles if profiles is not None else {}
    unavailable = unavailable if unavailable is not None else set()
    unavailable.add(node_id)
    profiles.setdefault(node_id, NodeProfile(node_id=node_id)).available = False

    actions: list[tuple[str, str, str]] = []
    for task in plan.tasks:
        if task.terminal or task.entry.node_id != node_id:
            continue
        if task.state is TransferState.IN_FLIGHT:
            continue
        if task.entry.relative_path in exclude_paths:
            continue
        path = task.entry.relative_path
        rs = plan.replica_sets[path]
        try:
            url, _ = select_replica(
                rs,
                profiles,
                unknown_rate_prior=unknown_rate_prior,
                exclude_urls={task.entry.url},
            )
            task.reassign(url)
            actions.append(("remapped", path, url))
            continue
        except NoAvailableReplica:
            pass
        if relocation:
            url = relocation.rstrip("/") + "/" + path
            task.reassign(url)
            actions.append(("relocated", path, url))
        else:
            if task.state is TransferState.FAILED_TRANSPORT:
                task.transition(TransferState.RELOCATED)
            actions.append(("stranded", path, node_id))
    return actions


@dataclass
class RunReport:
    """What happened in one run, for operators and for the exit code."""

    run_id: str
    state_counts: dict[str, int]
    bytes_delivered: int
    bytes_streamed: int
    elapsed_wall_s: float
    waves: int
    faults: int
    fault_events: list[str]
    bad_replicas: list[tuple[str, str]]
    relocation_needed: list[str]
    remapped: list[tuple[str, str]]
    warnings: list[str]
    aborted: str | None
    summary: RunSummary

    @property
    def unresolved(self) -> int:
        """Tasks that did not finish Done this run."""
        return sum(n for state, n in self.state_counts.items() if state != "Done")


class Scheduler:
    """Coordinator owning plan state; workers only execute single files."""

    def __init__(
        self,
        config: SchedulerConfig,
        credentials: CredentialManager,
        journal: StatusJournal,
        store: MetricsStore,
        retry: RetryPolicy | None = None,
        clock: Clock = SYSTEM_CLOCK,
        verify_mode: str = engine.VERIFY_STREAMED,
        wave_hook: Callable[[int], None] | None = None,
        connection_factory: Callable[[], HttpConnection] = HttpConnection,
    ) -> None:
        self.config = config
        self.credentials = credentials
        self.journal = journal
        self.store = store
        self.retry = retry or RetryPolicy()
        self.clock = clock
        self.verify_mode = verify_mode
        self.wave_hook = wave_hook
        self.connection_factory = connection_factory
        self.stop_requested = threading.Event()
        self._tls = threading.local()

    def _connection(self) -> HttpConnection:
        conn = getattr(self._tls, "conn", None)
        if conn is None:
            conn = self.connection_factory()
            self._tls.conn = conn
        return conn

    def _worker(self, task: FileTask, cred, staging_dir: Path, results: Queue) -> None:
        try:
            out = engine.transfer_file(
                task,
                self._connection(),
                cred,
                staging_dir,
                self.retry,
                clock=self.clock,
                verify_mode=self.verify_mode,
            )
            results.put((out, None))
        except StagingError as exc:
            results.put((task, exc))

    def run(self, plan: TransferPlan, staging_dir: Path | str) -> RunReport:
        runner = _RunState(self, plan, Path(staging_dir))
        return runner.execute()


class _RunState:
    """Mutable state of one run; only the coordinator thread touches it."""

    def __init__(self, sched: Scheduler, plan: TransferPlan, staging: Path) -> None:
        self.s = sched
        self.plan = plan
        self.staging = staging
        self.queues: dict[str, deque[FileTask]] = {}
        self.results: Queue = Queue()
        self.inflight = 0
        self.node_inflight: dict[str, int] = {}
        self.unavailable: set[str] = set()
        self.profiles: dict[str, NodeProfile] = {}
        self.bad_urls: dict[str, set[str]] = {}
        self.gone_count: dict[str, int] = {}
        self.fault_events: list[str] = []
        self.bad_replicas: list[tuple[str, str]] = []
        self.relocation_needed: set[str] = set()
        self.remapped: list[tuple[str, str]] = []
        self.aborted: str | None = None
        self.waves = 0

    def fault(self, message: str) -> None:
        """Timestamped fault log line (clock time, so sim runs date from 1970)."""
        self.fault_events.append(f"{utc_stamp(self.s.clock.now())} {message}")

    # -- queue plumbing ------------------------------------------------------

    def enqueue(self, task: FileTask) -> None:
        if not task.terminal:
            self.queues.setdefault(task.entry.node_id, deque()).append(task)

    def has_dispatchable(self) -> bool:
        return any(
            any(not t.terminal for t in q)
            for node_id, q in self.queues.items()
            if node_id not in self.unavailable
        )

    def dispatch(self, pool: ThreadPoolExecutor, cred) -> None:
        cfg = self.s.config
        while self.inflight < cfg.global_limit:
            progressed = False
            for node_id in sorted(self.queues):
                if self.inflight >= cfg.global_limit:
                    break
                if node_id in self.unavailable:
                    continue
                if self.node_inflight.get(node_id, 0) >= cfg.per_node_limit:
                    continue
                q = self.queues[node_id]
                while q and q[0].terminal:
                    q.popleft()
                if not q:
                    continue
                task = q.popleft()
                self.inflight += 1
                self.node_inflight[node_id] = self.node_inflight.get(node_id, 0) + 1
                pool.submit(self.s._worker, task, cred, self.staging, self.results)
                progressed = True
            if not progressed:
                break

    def refresh_profiles(self) -> None:
        for node_id, rate in self.s.store.ewma_snapshot().items():
            prof = self.profiles.setdefault(node_id, NodeProfile(node_id=node_id))
            prof.ewma_rate = rate
        for node_id in self.unavailable:
            self.profiles.setdefault(
                node_id, NodeProfile(node_id=node_id)
            ).available = False

    # -- result handling -----------------------------------------------------

    def on_done(self, task: FileTask) -> None:
        self.s.journal.record(task, self.s.clock.now())
        self.s.store.record(
            ThroughputSample(
                node_id=task.entry.node_id,
                bytes=task.bytes_transferred,
                transfer_seconds=max(task.transfer_seconds, 1e-9),
                recorded_at=self.s.clock.now(),
            )
        )
        if task.checksum_attempts or task.transport_attempts:
            self.fault(
                f"recovered {task.entry.relative_path}: "
                f"{task.transport_attempts} transport and "
                f"{task.checksum_attempts} checksum failure(s)"
            )

    def on_checksum_exhausted(self, task: FileTask) -> None:
        """A source kept serving bytes that do not match the manifest."""
        path = task.entry.relative_path
        self.bad_urls.setdefault(path, set()).add(task.entry.url)
        self.bad_replicas.append((path, task.entry.url))
        self.fault(f"checksum exhausted for {path} at {task.entry.url}")
        rs = self.plan.replica_sets[path]
        try:
            url, _ = select_replica(
                rs,
                self.profiles,
                unknown_rate_prior=self.s.config.unknown_rate_prior,
                exclude_urls=self.bad_urls[path],
            )
        except NoAvailableReplica:
            self.s.journal.record(task, self.s.clock.now())
            log.error("ALERT persistent checksum mismatch: %s", path)
            return
        # Re-fetch from a checksum-consistent replica; the manifest checksum
        # is authoritative, so the flagged source is the one serving bad data.
        fresh = FileTask(
            entry=FileEntry(
                relative_path=path,
                url=url,
                checksum_type=rs.checksum_type,
                checksum_hex=rs.checksum_hex,
                size_bytes=rs.size_bytes,
            )
        )
        fresh.bytes_streamed = task.bytes_streamed
        idx = next(i for i, t in enumerate(self.plan.tasks) if t is task)
        self.plan.tasks[idx] = fresh
        self.remapped.append((path, url))
        self.enqueue(fresh)

    def resolve_gone(self, task: FileTask, relocation: str | None) -> None:
        """Re-home one task whose node vanished under it, or strand it."""
        path = task.entry.relative_path
        self.gone_count[path] = self.gone_count.get(path, 0) + 1
        rs = self.plan.replica_sets[path]
        if self.gone_count[path] > len(rs.locations) + 3:
            self.strand(task)
            return
        try:
            url, _ = select_replica(
                rs,
                self.profiles,
                unknown_rate_prior=self.s.config.unknown_rate_prior,
                exclude_urls={task.entry.url} | self.bad_urls.get(path, set()),
            )
        except NoAvailableReplica:
            if relocation:
                url = relocation.rstrip("/") + "/" + path
            else:
                self.strand(task)
                return
        task.reassign(url)
        self.remapped.append((path, url))
        self.enqueue(task)

    def strand(self, task: FileTask) -> None:
        if task.state is TransferState.FAILED_TRANSPORT:
            task.transition(TransferState.RELOCATED)
        self.relocation_needed.add(task.entry.relative_path)

    def on_node_gone(self, task: FileTask, exc: NodeGone) -> None:
        node_id = exc.node_id
        self.fault(f"node gone: {node_id} (reported by {task.entry.relative_path})")
        if node_id not in self.unavailable:
            self.unavailable.add(node_id)
            self.refresh_profiles()
            actions = handle_node_gone(
                self.plan,
                node_id,
                exc.relocation,
                profiles=self.profiles,
                unavailable=self.unavailable,
                unknown_rate_prior=self.s.config.unknown_rate_prior,
                exclude_paths={task.entry.relative_path},
            )
            # Queued tasks were reassigned in place; move them to the queue
            # of whatever node they now point at.
            stale = self.queues.pop(node_id, deque())
            for queued in stale:
                self.enqueue(queued)
            for action, path, detail in actions:
                if action in ("remapped", "relocated"):
                    self.remapped.append((path, detail))
                else:
                    self.relocation_needed.add(path)
        self.resolve_gone(task, exc.relocation)

    def handle_result(self, task: FileTask, exc: StagingError | None) -> None:
        path = task.entry.relative_path
        if exc is None:
            if task.state is TransferState.DONE:
                self.on_done(task)
            elif task.state is TransferState.PERSISTENT_CHECKSUM_MISMATCH:
                self.on_checksum_exhausted(task)
            else:
                self.fault(f"transport exhausted for {path}: {task.last_error}")
        elif isinstance(exc, StorageFull):
            self.fault(f"storage full while staging {path}")
            self.aborted = "StorageFull"
        elif isinstance(exc, CredentialExpired):
            self.fault(f"credential rejected for {path}")
            task.transport_attempts += 1
            if task.transport_attempts <= self.s.retry.max_transport_retries:
                self.enqueue(task)
        elif isinstance(exc, NodeGone):
            self.on_node_gone(task, exc)
        else:
            self.fault(f"failure for {path}: {exc}")

    # -- main loop -----------------------------------------------------------

    def execute(self) -> RunReport:
        self.staging.mkdir(parents=True, exist_ok=True)
        request_dt = datetime.now(timezone.utc)
        t_start = time.perf_counter()

        for task in self.plan.tasks:
            self.enqueue(task)

        pool = ThreadPoolExecutor(
            max_workers=self.s.config.global_limit, thread_name_prefix="stage-worker"
        )
        try:
            while True:
                can_dispatch = (
                    self.aborted is None
                    and not self.s.stop_requested.is_set()
                    and self.has_dispatchable()
                )
                if can_dispatch:
                    try:
                        cred = self.s.credentials.ensure_fresh()
                    except RefreshFailed as exc:
                        self.fault(f"credential refresh failed: {exc}")
                        self.aborted = "RefreshFailed"
                    else:
                        if self.s.wave_hook is not None:
                            self.s.wave_hook(self.waves)
                        self.waves += 1
                        self.dispatch(pool, cred)

                if self.inflight == 0:
                    if (
                        self.aborted
                        or self.s.stop_requested.is_set()
                        or not self.has_dispatchable()
                    ):
                        break
                    continue

                task, exc = self.results.get()
                self.inflight -= 1
                node_id = task.entry.node_id  # engine never reassigns a task
                self.node_inflight[node_id] = self.node_inflight.get(node_id, 0) - 1
                self.refresh_profiles()
                self.handle_result(task, exc)
        finally:
            pool.shutdown(wait=True)

        return self.report(request_dt, time.perf_counter() - t_start)

    def report(self, request_dt: datetime, elapsed: float) -> RunReport:
        state_counts: dict[str, int] = {}
        delivered = 0
        streamed = 0
        for task in self.plan.tasks:
            state_counts[task.state.value] = state_counts.get(task.state.value, 0) + 1
            if task.state is TransferState.DONE:
                delivered += task.bytes_transferred
            streamed += task.bytes_streamed

        paths = [t.entry.relative_path for t in self.plan.tasks]
        files = len(paths)
        dirs = len(directory_prefixes(paths))
        summary = RunSummary(
            task_id=self.plan.run_id,
            request_time=request_dt.replace(microsecond=0),
            completion_time=datetime.now(timezone.utc).replace(microsecond=0),
            total_tasks=files + dirs + 1,
            files=files,
            dirs=dirs,
            bytes_transferred=delivered,
            mbits_per_sec=delivered * 8 / 1e6 / max(elapsed, 1e-6),
            faults=len(self.fault_events),
        )
        return RunReport(
            run_id=self.plan.run_id,
            state_counts=state_counts,
            bytes_delivered=delivered,
            bytes_streamed=streamed,
            elapsed_wall_s=elapsed,
            waves=self.waves,
            faults=len(self.fault_events),
            fault_events=list(self.fault_events),
            bad_replicas=list(self.bad_replicas),
            relocation_needed=sorted(self.relocation_needed),
            remapped=list(self.remapped),
            warnings=list(self.plan.warnings),
            aborted=self.aborted,
            summary=summary,
        )
