"""Time-limited access credentials with proactive refresh.

Tokens are opaque: data nodes validate only the token id and embedded
expiry, never any cryptography. Defaults model a 3-day token lifetime
refreshed a day ahead of expiry, so a long run never presents a stale
token to a node.
"""

from __future__ import annotations

import os
import threading
import uuid
from dataclasses import dataclass
from typing import Protocol

from .clock import SYSTEM_CLOCK, Clock
from .errors import RefreshFailed

DEFAULT_LIFETIME_S = 259_200  # three days
DEFAULT_REFRESH_MARGIN_S = 86_400  # refresh a day before expiry


@dataclass(frozen=True)
class Credential:
    id: str
    token: bytes
    issued_at: float
    expires_at: float

    def __post_init__(self) -> None:
        if self.expires_at <= self.issued_at:
            raise ValueError("credential expires before it is issued")


@dataclass(frozen=True)
class CredentialPolicy:
    lifetime_s: int = DEFAULT_LIFETIME_S
    refresh_margin_s: int = DEFAULT_REFRESH_MARGIN_S

    def __post_init__(self) -> None:
        if not 0 < self.refresh_margin_s < self.lifetime_s:
            raise ValueError("refresh margin must be positive and below lifetime")


class CredentialProvider(Protocol):
    def issue(self, lifetime_s: int) -> Credential:
        ...


def remaining(c: Credential, now: float) -> float:
    """Seconds of validity left; negative once expired."""
    return c.expires_at - now


def needs_refresh(c: Credential, now: float, policy: CredentialPolicy) -> bool:
    """True once remaining validity is at or below the refresh margin."""
    return remaining(c, now) <= policy.refresh_margin_s


def ensure_fresh(
    provider: CredentialProvider,
    c: Credential | None,
    now: float,
    policy: CredentialPolicy,
) -> Credential:
    """Return ``c`` if still comfortably valid, else a newly issued one.

    Raises RefreshFailed when the provider errors; callers must not start
    new transfers in that case.
    """
    if c is not None and not needs_refresh(c, now, policy):
        return c
    try:
        return provider.issue(policy.lifetime_s)
    except RefreshFailed:
        raise
    except Exception as exc:
        raise RefreshFailed(f"provider failed to issue credential: {exc}") from exc


class LocalTokenProvider:
    """Issues opaque tokens from the local clock.

    Sufficient for any fleet that validates id + expiry only, which is
    exactly what the simulated nodes do.
    """

    def __init__(self, clock: Clock = SYSTEM_CLOCK) -> None:
        self._clock = clock
        self.issue_count = 0

    def issue(self, lifetime_s: int) -> Credential:
        now = self._clock.now()
        self.issue_count += 1
        return Credential(
            id=uuid.uuid4().hex,
            token=os.urandom(16),
            issued_at=now,
            expires_at=now + lifetime_s,
        )


class CredentialManager:
    """Holds the current credential; refreshes are serialized.

    Readers always observe either the old or the new credential, never a
    torn state. With ``auto_refresh=False`` the manager issues exactly one
    credential and then lets it go stale; that exists purely as the
    negative control for expiry testing.
    """

    def __init__(
        self,
        provider: CredentialProvider,
        policy: CredentialPolicy | None = None,
        clock: Clock = SYSTEM_CLOCK,
        auto_refresh: bool = True,
    ) -> None:
        self._provider = provider
        self.policy = policy or CredentialPolicy()
        self._clock = clock
        self._auto_refresh = auto_refresh
        self._current: Credential | None = None
        self._lock = threading.Lock()

    def current(self) -> Credential | None:
        return self._current

    def ensure_fresh(self) -> Credential:
        with self._lock:
            if self._current is not None and not self._auto_refresh:
                return self._current
            self._current = ensure_fresh(
                self._provider, self._current, self._clock.now(), self.policy
            )
            return self._current
