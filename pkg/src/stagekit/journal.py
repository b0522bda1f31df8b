"""Crash-safe append-only status journal.

One LF-terminated record per finished file::

    v1 <state> '<relative_path>' <checksum_type>:<hex> <bytes> <transfer_ms> <verify_ms> <iso8601_utc>

A record counts only once its newline hit the disk, so a crash mid-append
leaves a torn last line that the loader silently drops. A complete line
that fails to parse means real corruption and raises JournalCorrupt.
When the same path appears more than once (a re-run after a corruption
fix), the last complete record wins.
"""

from __future__ import annotations

import os
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .engine import FileTask, TransferState
from .errors import JournalCorrupt, StorageFull
from .manifest import Manifest, FileEntry, invalid_path_reason

RECORD_VERSION = "v1"

_RECORD_RE = re.compile(
    r"^v1 (\S+) '([^']*)' ([a-z0-9]+):([0-9a-f]+) (\d+) (\d+) (\d+) (\S+)$"
)

# Only states that end a file's story in a run are ever recorded.
_RECORDABLE = {TransferState.DONE, TransferState.PERSISTENT_CHECKSUM_MISMATCH}


@dataclass(frozen=True)
class JournalRecord:
    state: TransferState
    checksum_type: str
    checksum_hex: str
    bytes: int
    transfer_ms: int
    verify_ms: int
    completed_at: str


def format_record(task: FileTask, completed_at: str) -> str:
    e = task.entry
    return (
        f"{RECORD_VERSION} {task.state.value} '{e.relative_path}' "
        f"{e.checksum_type}:{e.checksum_hex} {task.bytes_transferred} "
        f"{round(task.transfer_seconds * 1000)} {round(task.verify_seconds * 1000)} "
        f"{completed_at}\n"
    )


def parse_record(line: str) -> tuple[str, JournalRecord]:
    m = _RECORD_RE.match(line)
    if not m:
        raise JournalCorrupt(f"unreadable record: {line!r}")
    state_token, path, ctype, chex, nbytes, t_ms, v_ms, ts = m.groups()
    try:
        state = TransferState(state_token)
    except ValueError as exc:
        raise JournalCorrupt(f"unknown state {state_token!r}") from exc
    if state not in _RECORDABLE:
        raise JournalCorrupt(f"non-terminal state {state_token!r} in journal")
    if invalid_path_reason(path):
        raise JournalCorrupt(f"bad path in record: {path!r}")
    return path, JournalRecord(
        state=state,
        checksum_type=ctype,
        checksum_hex=chex,
        bytes=int(nbytes),
        transfer_ms=int(t_ms),
        verify_ms=int(v_ms),
        completed_at=ts,
    )


def utc_stamp(epoch_seconds: float) -> str:
    return datetime.fromtimestamp(epoch_seconds, tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )


class StatusJournal:
    """Durable record of finished files, plus its in-memory index.

    Appends are serialized internally, so any number of workers may record
    through one journal. The index reflects only records whose append
    completed, never in-progress writes.
    """

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        self._index: dict[str, JournalRecord] = {}
        self._fh = None
        self._lock = threading.Lock()
        self._load()

    def _load(self) -> None:
        self._index.clear()
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        # Everything after the last newline is a torn append: tolerated.
        complete, _, _torn = data.rpartition(b"\n")
        if not complete:
            return
        for raw in complete.split(b"\n"):
            if not raw.strip():
                continue
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise JournalCorrupt(f"undecodable record: {raw!r}") from exc
            path, rec = parse_record(line)
            self._index[path] = rec

    def record(self, task: FileTask, now: float) -> None:
        """Append one complete record, flush it to disk, then index it."""
        if task.state not in _RECORDABLE:
            raise ValueError(f"state {task.state.value} is not recordable")
        line = format_record(task, utc_stamp(now))
        with self._lock:
            try:
                if self._fh is None:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    self._fh = open(self.path, "ab")
                self._fh.write(line.encode("utf-8"))
                self._fh.flush()
                os.fsync(self._fh.fileno())
            except OSError as exc:
                raise StorageFull(f"journal append failed: {exc}") from exc
            _, rec = parse_record(line.rstrip("\n"))
            self._index[task.entry.relative_path] = rec

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> StatusJournal:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def get(self, relative_path: str) -> JournalRecord | None:
        return self._index.get(relative_path)

    def state_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self._index.values():
            counts[rec.state.value] = counts.get(rec.state.value, 0) + 1
        return counts

    def done_paths(
        self, expected: dict[str, tuple[str, str]]
    ) -> set[str]:
        """Paths recorded Done whose checksum still matches ``expected``.

        ``expected`` maps relative_path -> (checksum_type, checksum_hex).
        A Done record whose checksum no longer matches does not count: the
        data was republished and must be fetched again.
        """
        done: set[str] = set()
        for path, rec in self._index.items():
            if rec.state is not TransferState.DONE:
                continue
            if expected.get(path) == (rec.checksum_type, rec.checksum_hex):
                done.add(path)
        return done

    def load_resume(self, m: Manifest) -> list[FileEntry]:
        """Entries still pending for ``m``: everything not verifiably Done."""
        expected = {
            e.relative_path: (e.checksum_type, e.checksum_hex) for e in m.entries
        }
        done = self.done_paths(expected)
        pending: list[FileEntry] = []
        seen: set[str] = set()
        for e in m.entries:
            if e.relative_path in done or e.relative_path in seen:
                continue
            seen.add(e.relative_path)
            pending.append(e)
        return pending
