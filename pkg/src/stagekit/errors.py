"""Exception hierarchy shared across the staging toolkit.

Every error the CLI maps to an exit code lives here; class names double as
the machine-parseable error class in ``ERROR <class>: <detail>`` lines.
"""

from __future__ import annotations


class StagingError(Exception):
    """Base class for all toolkit errors."""


class ManifestParseError(StagingError):
    """Manifest text rejected; carries the 1-based line number and a reason."""

    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class ReplicaConflict(StagingError):
    """Two manifests publish disagreeing checksums for the same path.

    ``claims`` holds every (url, checksum_type, checksum_hex) seen for the
    path, so an operator can tell which sources disagree.
    """

    def __init__(self, relative_path: str, claims: list[tuple[str, str, str]]) -> None:
        detail = ", ".join(f"{u}={t}:{h}" for u, t, h in claims)
        super().__init__(f"{relative_path}: {detail}")
        self.relative_path = relative_path
        self.claims = claims


class RefreshFailed(StagingError):
    """Credential provider unreachable or refused to issue."""


class CredentialExpired(StagingError):
    """A data node rejected the presented token, or it expired before use."""


class TransportError(StagingError):
    """Connection-level or protocol-level download failure (retryable)."""


class NodeGone(StagingError):
    """Node signalled permanent removal; may carry a relocation url prefix."""

    def __init__(self, node_id: str, relocation: str | None = None) -> None:
        hint = f" relocated to {relocation}" if relocation else ""
        super().__init__(f"node {node_id} permanently gone{hint}")
        self.node_id = node_id
        self.relocation = relocation


class StorageFull(StagingError):
    """Local write failed for lack of space; aborts the whole run."""


class JournalCorrupt(StagingError):
    """A complete journal record failed to parse (torn tails are tolerated)."""


class IllegalTransition(StagingError):
    """Attempted a transfer-state transition outside the legal table."""


class QuotaExceeded(StagingError):
    """Planned volume exceeds the configured quota; nothing is transferred."""

    def __init__(self, required_bytes: int, quota_bytes: int) -> None:
        super().__init__(f"required {required_bytes} bytes, quota {quota_bytes} bytes")
        self.required_bytes = required_bytes
        self.quota_bytes = quota_bytes


class NoAvailableReplica(StagingError):
    """Every location of a replica set sits on an unavailable node."""


class ProbeFailed(StagingError):
    """A size or throughput probe against one node failed."""


class InvalidInterval(StagingError):
    """Completion timestamp not after request timestamp."""


class ZeroRate(StagingError):
    """Transfer-time projection asked for with a non-positive rate."""


class UnknownNode(StagingError):
    """No samples recorded for the requested node."""


class UsageError(StagingError):
    """Bad command line or config; maps to exit code 2."""
