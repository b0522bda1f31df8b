"""Flat ``key = value`` run configuration with environment overrides.

Recognized keys: global_limit, per_node_limit, quota_bytes, quota_override,
ewma_alpha, unknown_rate_prior, staging_dir, credential_lifetime_s,
refresh_margin_s, max_checksum_retries, max_transport_retries, verify_mode.
An environment variable ``STAGE_<UPPERCASE_KEY>`` overrides the file value.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .credential import CredentialPolicy
from .engine import VERIFY_POSTHOC, VERIFY_STREAMED, RetryPolicy
from .errors import UsageError
from .scheduler import SchedulerConfig

ENV_PREFIX = "STAGE_"

CONFIG_KEYS = frozenset(
    {
        "global_limit",
        "per_node_limit",
        "quota_bytes",
        "quota_override",
        "ewma_alpha",
        "unknown_rate_prior",
        "staging_dir",
        "credential_lifetime_s",
        "refresh_margin_s",
        "max_checksum_retries",
        "max_transport_retries",
        "verify_mode",
    }
)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; # comments and blank lines ignored."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{line_no}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def load_config(
    path: Path | str | None, env: Mapping[str, str] | None = None
) -> dict[str, str]:
    """Raw config: file values with ``STAGE_*`` environment overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        raw.update(parse_kv(p.read_text(), source=str(p)))
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key in CONFIG_KEYS:
        env_val = (env or {}).get(ENV_PREFIX + key.upper())
        if env_val is not None:
            raw[key] = env_val
    return raw


def _to_int(raw: dict[str, str], key: str, default: int) -> int:
    if key not in raw:
        return default
    try:
        return int(raw[key])
    except ValueError as exc:
        raise UsageError(f"config key {key}: expected integer, got {raw[key]!r}") from exc


def _to_float(raw: dict[str, str], key: str, default: float) -> float:
    if key not in raw:
        return default
    try:
        return float(raw[key])
    except ValueError as exc:
        raise UsageError(f"config key {key}: expected number, got {raw[key]!r}") from exc


def _to_bool(raw: dict[str, str], key: str, default: bool) -> bool:
    if key not in raw:
        return default
    v = raw[key].lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise UsageError(f"config key {key}: expected boolean, got {raw[key]!r}")


@dataclass(frozen=True)
class Settings:
    scheduler: SchedulerConfig
    retry: RetryPolicy
    credential_policy: CredentialPolicy
    staging_dir: Path
    verify_mode: str


def build_settings(raw: dict[str, str]) -> Settings:
    verify_mode = raw.get("verify_mode", VERIFY_STREAMED)
    if verify_mode not in (VERIFY_STREAMED, VERIFY_POSTHOC):
        raise UsageError(f"verify_mode must be streamed or posthoc, got {verify_mode!r}")
    try:
        scheduler = SchedulerConfig(
            global_limit=_to_int(raw, "global_limit", 8),
            per_node_limit=_to_int(raw, "per_node_limit", 4),
            quota_bytes=_to_int(raw, "quota_bytes", -1) if "quota_bytes" in raw else None,
            quota_override=_to_bool(raw, "quota_override", False),
            ewma_alpha=_to_float(raw, "ewma_alpha", 0.3),
            unknown_rate_prior=_to_float(raw, "unknown_rate_prior", 1e6),
        )
        retry = RetryPolicy(
            max_transport_retries=_to_int(raw, "max_transport_retries", 3),
            max_checksum_retries=_to_int(raw, "max_checksum_retries", 3),
        )
        credential_policy = CredentialPolicy(
            lifetime_s=_to_int(raw, "credential_lifetime_s", 259_200),
            refresh_margin_s=_to_int(raw, "refresh_margin_s", 86_400),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return Settings(
        scheduler=scheduler,
        retry=retry,
        credential_policy=credential_policy,
        staging_dir=Path(raw.get("staging_dir", "staging")),
        verify_mode=verify_mode,
    )


def load_settings(
    path: Path | str | None, env: Mapping[str, str] | None = None
) -> Settings:
    return build_settings(load_config(path, env))
