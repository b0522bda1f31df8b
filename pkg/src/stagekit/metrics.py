"""Throughput samples, per-node aggregates, and report rendering.

Decimal units everywhere: KB = 10^3 B, MB = 10^6 B, TB = 10^12 B, and a
megabit is 10^6 bits. Transfer seconds exclude checksum verification time,
which is tracked separately, so rates reflect wire-plus-disk performance
only.
"""

from __future__ import annotations

import csv
import io
import logging
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path

from .clock import SYSTEM_CLOCK, Clock
from .credential import Credential
from .errors import InvalidInterval, UnknownNode, ZeroRate

log = logging.getLogger(__name__)

DEFAULT_EWMA_ALPHA = 0.3
PROBE_PATH_PREFIX = ".probe/"
MIN_PROBE_BYTES = 100_000  # below this, request latency dominates the measurement

RUN_SUMMARY_LABELS = (
    "Task ID",
    "Request Time",
    "Completion Time",
    "Total Tasks",
    "Files",
    "Directories",
    "Bytes Transferred",
    "MBits/sec",
    "Faults",
)

NODE_REPORT_CSV_COLUMNS = (
    "node_id",
    "total_bytes",
    "total_tb",
    "transfer_seconds",
    "transfer_days",
    "mean_rate_bytes_per_sec",
    "mean_rate_human",
    "time_to_1tb_seconds",
)

PROBE_CSV_COLUMNS = ("node_id", "bytes", "seconds", "rate_bytes_per_sec", "ewma_rate")


@dataclass(frozen=True)
class ThroughputSample:
    node_id: str
    bytes: int
    transfer_seconds: float
    recorded_at: float

    def __post_init__(self) -> None:
        if self.bytes < 0:
            raise ValueError("negative byte count")
        if self.transfer_seconds <= 0:
            raise ValueError("transfer_seconds must be positive")


@dataclass(frozen=True)
class NodeAggregate:
    node_id: str
    total_bytes: int
    total_transfer_seconds: float
    sample_count: int

    @property
    def mean_rate(self) -> float:
        return self.total_bytes / self.total_transfer_seconds


@dataclass(frozen=True)
class RunSummary:
    """End-of-run report card, second-resolution timestamps.

    total_tasks counts each file, each directory, and one top-level task
    for the run itself.
    """

    task_id: str
    request_time: datetime
    completion_time: datetime
    total_tasks: int
    files: int
    dirs: int
    bytes_transferred: int
    mbits_per_sec: float
    faults: int

    def __post_init__(self) -> None:
        if self.completion_time < self.request_time:
            raise ValueError("completion before request")


def mbits_per_sec(
    byte_count: float, request_time: datetime, completion_time: datetime
) -> float:
    """Decimal megabits per second over the request->completion interval."""
    elapsed = (completion_time - request_time).total_seconds()
    if elapsed <= 0:
        raise InvalidInterval(f"elapsed {elapsed}s")
    return byte_count * 8 / 1e6 / elapsed


def time_to_transfer(target_bytes: float, rate_bytes_per_sec: float) -> float:
    """Seconds to move ``target_bytes`` at a steady rate."""
    if rate_bytes_per_sec <= 0:
        raise ZeroRate(f"rate {rate_bytes_per_sec}")
    return target_bytes / rate_bytes_per_sec


def format_days(seconds: float) -> str:
    """Seconds as days, one decimal, round-half-even: 3097432 -> '35.8'."""
    return f"{seconds / 86400:.1f}"


def format_tb(byte_count: float) -> str:
    return f"{byte_count / 1e12:.3f} TB"


def human_rate(bytes_per_sec: float) -> str:
    for unit, scale in (("GB/s", 1e9), ("MB/s", 1e6), ("KB/s", 1e3)):
        if bytes_per_sec >= scale:
            return f"{bytes_per_sec / scale:.1f} {unit}"
    return f"{bytes_per_sec:.1f} B/s"


class MetricsStore:
    """Accumulates samples; safe under concurrent writers.

    Keeps exact per-node totals plus an exponentially weighted moving
    average of per-transfer rates that the scheduler uses to rank
    replicas.
    """

    def __init__(self, ewma_alpha: float = DEFAULT_EWMA_ALPHA) -> None:
        if not 0 < ewma_alpha <= 1:
            raise ValueError("ewma_alpha must be in (0, 1]")
        self.ewma_alpha = ewma_alpha
        self._samples: list[ThroughputSample] = []
        self._totals: dict[str, tuple[int, float, int]] = {}
        self._ewma: dict[str, float] = {}
        self._lock = threading.Lock()

    def record(self, sample: ThroughputSample) -> None:
        rate = sample.bytes / sample.transfer_seconds
        with self._lock:
            self._samples.append(sample)
            b, s, n = self._totals.get(sample.node_id, (0, 0.0, 0))
            self._totals[sample.node_id] = (
                b + sample.bytes,
                s + sample.transfer_seconds,
                n + 1,
            )
            prev = self._ewma.get(sample.node_id)
            if prev is None:
                self._ewma[sample.node_id] = rate
            else:
                self._ewma[sample.node_id] = (
                    self.ewma_alpha * rate + (1 - self.ewma_alpha) * prev
                )

    def aggregate(self, node_id: str) -> NodeAggregate:
        with self._lock:
            if node_id not in self._totals:
                raise UnknownNode(node_id)
            b, s, n = self._totals[node_id]
        return NodeAggregate(
            node_id=node_id, total_bytes=b, total_transfer_seconds=s, sample_count=n
        )

    def aggregates(self) -> list[NodeAggregate]:
        with self._lock:
            ids = list(self._totals)
        return [self.aggregate(i) for i in ids]

    def ewma_rate(self, node_id: str) -> float | None:
        with self._lock:
            return self._ewma.get(node_id)

    def ewma_snapshot(self) -> dict[str, float]:
        with self._lock:
            return dict(self._ewma)

    def samples(self) -> list[ThroughputSample]:
        with self._lock:
            return list(self._samples)

    # Sample persistence: one CSV row per sample, replayed on load so the
    # EWMA state is a pure function of sample history.

    def save_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("node_id", "bytes", "transfer_seconds", "recorded_at"))
            for s in self.samples():
                w.writerow((s.node_id, s.bytes, repr(s.transfer_seconds), repr(s.recorded_at)))

    def load_csv(self, path: Path | str) -> None:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None:
                return
            for row in reader:
                node, b, secs, at = row
                self.record(
                    ThroughputSample(
                        node_id=node,
                        bytes=int(b),
                        transfer_seconds=float(secs),
                        recorded_at=float(at),
                    )
                )


def render_node_report(aggregates: list[NodeAggregate]) -> tuple[str, str]:
    """Per-node throughput table as (text, csv).

    Rows sort by descending total bytes, ties broken by node id so output
    is stable. The time-to-1TB column projects how long moving a decimal
    terabyte would take at the node's mean rate.
    """
    rows = sorted(aggregates, key=lambda a: (-a.total_bytes, a.node_id))
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(NODE_REPORT_CSV_COLUMNS)

    text_lines = [
        f"{'node':<40} {'bytes':>16} {'size':>12} {'seconds':>12} "
        f"{'days':>7} {'rate':>12} {'1TB time (s)':>14}"
    ]
    for a in rows:
        rate = a.mean_rate
        t_1tb = time_to_transfer(1e12, rate)
        w.writerow(
            (
                a.node_id,
                a.total_bytes,
                f"{a.total_bytes / 1e12:.3f}",
                repr(a.total_transfer_seconds),
                format_days(a.total_transfer_seconds),
                repr(rate),
                human_rate(rate),
                repr(t_1tb),
            )
        )
        text_lines.append(
            f"{a.node_id:<40} {a.total_bytes:>16} {format_tb(a.total_bytes):>12} "
            f"{a.total_transfer_seconds:>12.1f} {format_days(a.total_transfer_seconds):>7} "
            f"{human_rate(rate):>12} {t_1tb:>14.1f}"
        )
    return "\n".join(text_lines) + "\n", out.getvalue()


def _format_bytes_field(n: int) -> str:
    # Decimal scientific notation when it shortens the number (trailing
    # zeros), plain digits otherwise; both reparse exactly.
    return str(Decimal(n).normalize())


def _format_time_field(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%d %H:%M:%SZ")


def render_run_summary(s: RunSummary) -> str:
    """Tab-separated label/value block; reparses losslessly."""
    values = (
        s.task_id,
        _format_time_field(s.request_time),
        _format_time_field(s.completion_time),
        str(s.total_tasks),
        str(s.files),
        str(s.dirs),
        _format_bytes_field(s.bytes_transferred),
        repr(s.mbits_per_sec),
        str(s.faults),
    )
    return "".join(
        f"{label}:\t{value}\n" for label, value in zip(RUN_SUMMARY_LABELS, values)
    )


def parse_run_summary(text: str) -> RunSummary:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        label, _, value = line.partition(":\t")
        fields[label] = value

    def dt(label: str) -> datetime:
        return datetime.strptime(fields[label], "%Y-%m-%d %H:%M:%SZ").replace(
            tzinfo=timezone.utc
        )

    return RunSummary(
        task_id=fields["Task ID"],
        request_time=dt("Request Time"),
        completion_time=dt("Completion Time"),
        total_tasks=int(fields["Total Tasks"]),
        files=int(fields["Files"]),
        dirs=int(fields["Directories"]),
        bytes_transferred=int(Decimal(fields["Bytes Transferred"])),
        mbits_per_sec=float(fields["MBits/sec"]),
        faults=int(fields["Faults"]),
    )


def probe(
    nodes: dict[str, str],
    probe_bytes: int,
    cred: Credential,
    store: MetricsStore,
    conn,
    clock: Clock = SYSTEM_CLOCK,
) -> tuple[dict[str, float | None], str]:
    """Measure each node by downloading a probe object of ``probe_bytes``.

    ``nodes`` maps node_id -> base url. Every node gets tried; a failure
    becomes a None entry and never aborts the rest of the matrix. Returns
    the node->rate map and the publishable CSV.
    """
    if probe_bytes < MIN_PROBE_BYTES:
        raise ValueError(f"probe_bytes must be >= {MIN_PROBE_BYTES}")

    results: dict[str, float | None] = {}
    rows: list[tuple] = []
    for node_id in sorted(nodes):
        url = f"{nodes[node_id].rstrip('/')}/{PROBE_PATH_PREFIX}{probe_bytes}"
        t0 = time.perf_counter()
        received = 0
        try:
            for chunk in conn.get_stream(url, cred):
                received += len(chunk)
        except Exception as exc:
            results[node_id] = None
            rows.append((node_id, "", "", "", ""))
            log.warning("throughput probe failed for %s: %s", node_id, exc)
            continue
        elapsed = max(time.perf_counter() - t0, 1e-9)
        rate = received / elapsed
        store.record(
            ThroughputSample(
                node_id=node_id,
                bytes=received,
                transfer_seconds=elapsed,
                recorded_at=clock.now(),
            )
        )
        results[node_id] = rate
        rows.append((node_id, received, repr(elapsed), repr(rate), repr(store.ewma_rate(node_id))))

    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(PROBE_CSV_COLUMNS)
    for row in rows:
        w.writerow(row)
    return results, out.getvalue()
