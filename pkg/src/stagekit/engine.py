"""Per-file transfer state machine.

A file downloads into ``<staging>/<relative_path>.part`` with the digest
computed during the write, then renames atomically into place on a match.
No observable instant ever has a final file whose digest disagrees with
the manifest. Whole-file retry only, matching classic sequential download
scripts; there is no byte-range resume.
"""

from __future__ import annotations

import enum
import errno
import hashlib
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Protocol

from .clock import SYSTEM_CLOCK, Clock
from .credential import Credential
from .errors import (
    CredentialExpired,
    IllegalTransition,
    NodeGone,
    StorageFull,
    TransportError,
)
from .manifest import FileEntry

VERIFY_STREAMED = "streamed"
VERIFY_POSTHOC = "posthoc"


class TransferState(enum.Enum):
    PENDING = "Pending"
    IN_FLIGHT = "InFlight"
    VERIFYING = "Verifying"
    DONE = "Done"
    FAILED_TRANSPORT = "FailedTransport"
    FAILED_CHECKSUM = "FailedChecksum"
    PERSISTENT_CHECKSUM_MISMATCH = "PersistentChecksumMismatch"
    RELOCATED = "Relocated"


# Done is terminal; PersistentChecksumMismatch and Relocated are terminal
# for the run (a later run, or an operator-supplied manifest, reopens them).
LEGAL_TRANSITIONS: dict[TransferState, frozenset[TransferState]] = {
    TransferState.PENDING: frozenset({TransferState.IN_FLIGHT}),
    TransferState.IN_FLIGHT: frozenset(
        {
            TransferState.VERIFYING,
            TransferState.FAILED_TRANSPORT,
            TransferState.RELOCATED,
        }
    ),
    TransferState.VERIFYING: frozenset(
        {TransferState.DONE, TransferState.FAILED_CHECKSUM}
    ),
    TransferState.FAILED_CHECKSUM: frozenset(
        {TransferState.IN_FLIGHT, TransferState.PERSISTENT_CHECKSUM_MISMATCH}
    ),
    TransferState.FAILED_TRANSPORT: frozenset(
        {TransferState.IN_FLIGHT, TransferState.RELOCATED}
    ),
    TransferState.DONE: frozenset(),
    TransferState.PERSISTENT_CHECKSUM_MISMATCH: frozenset(),
    TransferState.RELOCATED: frozenset(),
}

TERMINAL_STATES = frozenset(
    s for s, targets in LEGAL_TRANSITIONS.items() if not targets
)


@dataclass(frozen=True)
class RetryPolicy:
    max_transport_retries: int = 3
    max_checksum_retries: int = 3
    backoff_base_ms: int = 1000
    backoff_cap_ms: int = 60000

    def __post_init__(self) -> None:
        if min(
            self.max_transport_retries,
            self.max_checksum_retries,
            self.backoff_base_ms,
            self.backoff_cap_ms,
        ) <= 0:
            raise ValueError("retry policy fields must be positive")

    def backoff_s(self, attempt: int) -> float:
        """Exponential backoff before transport retry ``attempt`` (1-based)."""
        ms = min(self.backoff_base_ms * 2 ** (attempt - 1), self.backoff_cap_ms)
        return ms / 1000.0


@dataclass
class FileTask:
    """One file's progress through a run.

    ``transfer_seconds`` covers the read/write loop of the final successful
    attempt only and never includes post-hoc verification time, which is
    kept in ``verify_seconds``. ``bytes_streamed`` counts every byte pulled
    off the wire including failed attempts; ``bytes_transferred`` is the
    delivered payload (the file size once Done).
    """

    entry: FileEntry
    state: TransferState = TransferState.PENDING
    transport_attempts: int = 0
    checksum_attempts: int = 0
    bytes_transferred: int = 0
    bytes_streamed: int = 0
    transfer_seconds: float = 0.0
    verify_seconds: float = 0.0
    last_error: str | None = None

    def transition(self, new_state: TransferState) -> None:
        if new_state not in LEGAL_TRANSITIONS[self.state]:
            raise IllegalTransition(
                f"{self.entry.relative_path}: {self.state.value} -> {new_state.value}"
            )
        self.state = new_state

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def reassign(self, url: str) -> None:
        """Point the task at a different replica of the same file."""
        self.entry = replace(self.entry, url=url)


class DataNodeConnection(Protocol):
    def get_stream(self, url: str, cred: Credential) -> Iterator[bytes]:
        ...


def _digest(checksum_type: str):
    return hashlib.new(checksum_type)


def verify(file_path: Path | str, checksum_type: str, checksum_hex: str) -> bool:
    """Streaming digest comparison, canonicalized to lowercase hex."""
    h = _digest(checksum_type)
    with open(file_path, "rb") as f:
        while True:
            block = f.read(1 << 20)
            if not block:
                break
            h.update(block)
    return h.hexdigest() == checksum_hex.lower()


def _raise_if_enospc(exc: OSError, context: str) -> None:
    if exc.errno == errno.ENOSPC:
        raise StorageFull(f"{context}: {exc}") from exc


def transfer_file(
    task: FileTask,
    conn: DataNodeConnection,
    cred: Credential,
    staging_dir: Path | str,
    policy: RetryPolicy,
    clock: Clock = SYSTEM_CLOCK,
    verify_mode: str = VERIFY_STREAMED,
) -> FileTask:
    """Drive one file to a terminal-for-this-source state.

    Retries transport failures with exponential backoff and checksum
    failures immediately, both capped by ``policy``. A wrong digest
    deletes the staged ``.part`` before any retry, so a corrupt download
    is never visible at the final path.

    Raises instead of returning for conditions the scheduler must handle:
    CredentialExpired and NodeGone (task is left in FailedTransport, a
    resumable state) and StorageFull (aborts the whole run). On a raise
    the ``.part`` file has already been cleaned up.
    """
    if task.state not in (
        TransferState.PENDING,
        TransferState.FAILED_TRANSPORT,
        TransferState.FAILED_CHECKSUM,
    ):
        raise IllegalTransition(
            f"cannot start transfer from state {task.state.value}"
        )

    staging = Path(staging_dir)
    final_path = staging / task.entry.relative_path
    part_path = final_path.with_name(final_path.name + ".part")

    while True:
        task.transition(TransferState.IN_FLIGHT)
        if cred.expires_at <= clock.now():
            task.transition(TransferState.FAILED_TRANSPORT)
            task.last_error = "credential expired before transfer start"
            raise CredentialExpired(task.last_error)

        try:
            received, elapsed, hexdigest = _stream_to_part(
                task, conn, cred, part_path, verify_mode
            )
        except TransportError as exc:
            _discard(part_path)
            task.transport_attempts += 1
            task.last_error = str(exc)
            task.transition(TransferState.FAILED_TRANSPORT)
            if task.transport_attempts > policy.max_transport_retries:
                return task
            clock.sleep(policy.backoff_s(task.transport_attempts))
            continue
        except CredentialExpired as exc:
            _discard(part_path)
            task.last_error = str(exc)
            task.transition(TransferState.FAILED_TRANSPORT)
            raise
        except NodeGone as exc:
            _discard(part_path)
            task.last_error = str(exc)
            task.transition(TransferState.FAILED_TRANSPORT)
            raise
        except StorageFull:
            _discard(part_path)
            task.transition(TransferState.FAILED_TRANSPORT)
            task.last_error = "local storage full"
            raise

        task.transfer_seconds = elapsed
        task.transition(TransferState.VERIFYING)

        if verify_mode == VERIFY_POSTHOC:
            t0 = time.perf_counter()
            ok = verify(part_path, task.entry.checksum_type, task.entry.checksum_hex)
            task.verify_seconds = time.perf_counter() - t0
        else:
            ok = hexdigest == task.entry.checksum_hex.lower()
            task.verify_seconds = 0.0

        if ok:
            _finalize(part_path, final_path)
            task.bytes_transferred = received
            task.transition(TransferState.DONE)
            return task

        _discard(part_path)
        task.checksum_attempts += 1
        task.last_error = "checksum mismatch"
        task.transition(TransferState.FAILED_CHECKSUM)
        if task.checksum_attempts > policy.max_checksum_retries:
            task.transition(TransferState.PERSISTENT_CHECKSUM_MISMATCH)
            return task


def _stream_to_part(
    task: FileTask,
    conn: DataNodeConnection,
    cred: Credential,
    part_path: Path,
    verify_mode: str,
) -> tuple[int, float, str]:
    """Write the body to the .part file; returns (bytes, seconds, hexdigest).

    The digest is computed inline during the write in streamed mode (one
    pass); the wall time of the loop is the transfer time either way.
    """
    try:
        part_path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _raise_if_enospc(exc, "mkdir")
        raise TransportError(f"cannot create staging dir: {exc}") from exc

    hasher = _digest(task.entry.checksum_type) if verify_mode == VERIFY_STREAMED else None
    received = 0
    t0 = time.perf_counter()
    try:
        with open(part_path, "wb") as out:
            for chunk in conn.get_stream(task.entry.url, cred):
                out.write(chunk)
                received += len(chunk)
                task.bytes_streamed += len(chunk)
                if hasher is not None:
                    hasher.update(chunk)
            out.flush()
            os.fsync(out.fileno())
    except OSError as exc:
        _raise_if_enospc(exc, str(part_path))
        raise TransportError(f"write failed: {exc}") from exc
    elapsed = time.perf_counter() - t0
    return received, elapsed, hasher.hexdigest() if hasher is not None else ""


def _finalize(part_path: Path, final_path: Path) -> None:
    try:
        os.replace(part_path, final_path)
    except OSError as exc:
        _raise_if_enospc(exc, str(final_path))
        raise TransportError(f"rename failed: {exc}") from exc


def _discard(part_path: Path) -> None:
    try:
        part_path.unlink(missing_ok=True)
    except OSError:
        pass
