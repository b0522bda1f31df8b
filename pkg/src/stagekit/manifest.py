"""Manifest model: the canonical description of a downloadable dataset.

File format (one record per line, LF endings, single-quoted fields with no
embedded quotes, optional trailing unquoted decimal size)::

    # comment
    dataset <dataset_id>
    file '<relative_path>' '<url>' '<md5|sha256>' '<hex>'[ <size_bytes>]

Decimal units throughout the toolkit: 1 TB = 10^12 bytes.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Protocol
from urllib.parse import urlsplit

from .errors import ManifestParseError, ReplicaConflict

log = logging.getLogger(__name__)

CHECKSUM_HEX_LEN = {"md5": 32, "sha256": 64}

_HEX_RE = re.compile(r"^[0-9a-f]+$")
_DATASET_RE = re.compile(r"^dataset (\S+)$")
_FILE_RE = re.compile(
    r"^file '([^']*)' '([^']*)' '([^']*)' '([^']*)'(?: (\d+))?$"
)
_QUOTED_FIELD_RE = re.compile(r"'[^']*'")


def node_id_of(url: str) -> str:
    """Node identity of a url: its network location (host[:port])."""
    return urlsplit(url).netloc


def invalid_path_reason(path: str) -> str | None:
    """Why ``path`` is unusable as a staging-relative path, or None if fine."""
    if not path:
        return "empty path"
    if "'" in path:
        return "single quote in path"
    if path.startswith("/"):
        return "absolute path"
    if any(seg == ".." for seg in path.split("/")):
        return "path traversal segment"
    return None


@dataclass(frozen=True)
class FileEntry:
    """One downloadable file as published by one source."""

    relative_path: str
    url: str
    checksum_type: str
    checksum_hex: str
    size_bytes: int | None = None

    @property
    def node_id(self) -> str:
        return node_id_of(self.url)


@dataclass
class Manifest:
    dataset_id: str
    entries: list[FileEntry]
    source_node: str


@dataclass(frozen=True)
class ReplicaSet:
    """All known locations of one file, guaranteed checksum-consistent."""

    relative_path: str
    checksum_type: str
    checksum_hex: str
    locations: tuple[tuple[str, str], ...]  # (url, node_id)
    size_bytes: int | None = None


@dataclass(frozen=True)
class DatasetSummary:
    file_count: int
    dir_count: int
    total_bytes: int
    unknown_size_count: int

    @property
    def is_lower_bound(self) -> bool:
        """True when some sizes are unknown, so total_bytes undercounts."""
        return self.unknown_size_count > 0

    def human_total(self) -> str:
        return f"{self.total_bytes / 1e12:.3f} TB"


class SizeProber(Protocol):
    """Issues a size query (HEAD-equivalent) for a url.

    Must be safe for concurrent use. Returns content size in bytes or
    raises ProbeFailed.
    """

    def probe_size(self, url: str) -> int:
        ...


def parse_manifest(text: str) -> Manifest:
    """Parse manifest text; entries keep file-line order.

    Raises ManifestParseError with a 1-based line number on the first
    offending line.
    """
    dataset_id: str | None = None
    entries: list[FileEntry] = []
    seen: set[tuple[str, str]] = set()
    checksum_by_path: dict[str, tuple[str, str]] = {}

    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if line.startswith("dataset"):
            m = _DATASET_RE.match(line)
            if not m:
                raise ManifestParseError(line_no, "bad dataset header")
            if dataset_id is not None:
                raise ManifestParseError(line_no, "duplicate dataset header")
            dataset_id = m.group(1)
            continue
        if line.startswith("file"):
            if dataset_id is None:
                raise ManifestParseError(line_no, "file line before dataset header")
            entries.append(_parse_file_line(line, line_no, seen, checksum_by_path))
            continue
        raise ManifestParseError(line_no, "unknown directive")

    if dataset_id is None:
        raise ManifestParseError(1, "missing dataset header")
    source = entries[0].node_id if entries else ""
    return Manifest(dataset_id=dataset_id, entries=entries, source_node=source)


def _parse_file_line(
    line: str,
    line_no: int,
    seen: set[tuple[str, str]],
    checksum_by_path: dict[str, tuple[str, str]],
) -> FileEntry:
    m = _FILE_RE.match(line)
    if not m:
        n_fields = len(_QUOTED_FIELD_RE.findall(line))
        if n_fields != 4:
            raise ManifestParseError(line_no, "field count")
        raise ManifestParseError(line_no, "bad quoting")
    path, url, ctype, chex, size = m.groups()

    reason = invalid_path_reason(path)
    if reason:
        raise ManifestParseError(line_no, reason)
    if ctype not in CHECKSUM_HEX_LEN:
        raise ManifestParseError(line_no, f"unknown checksum type {ctype!r}")
    chex = chex.lower()
    if len(chex) != CHECKSUM_HEX_LEN[ctype]:
        raise ManifestParseError(line_no, "bad hex length")
    if not _HEX_RE.match(chex):
        raise ManifestParseError(line_no, "bad hex")
    if not urlsplit(url).netloc:
        raise ManifestParseError(line_no, "url without host")

    key = (path, url)
    if key in seen:
        raise ManifestParseError(line_no, "duplicate (path, url)")
    seen.add(key)

    claim = (ctype, chex)
    prior = checksum_by_path.setdefault(path, claim)
    if prior != claim:
        raise ManifestParseError(line_no, "checksum conflict on same path")

    return FileEntry(
        relative_path=path,
        url=url,
        checksum_type=ctype,
        checksum_hex=chex,
        size_bytes=int(size) if size is not None else None,
    )


def serialize_manifest(m: Manifest) -> str:
    lines = [f"dataset {m.dataset_id}"]
    for e in m.entries:
        rec = f"file '{e.relative_path}' '{e.url}' '{e.checksum_type}' '{e.checksum_hex}'"
        if e.size_bytes is not None:
            rec += f" {e.size_bytes}"
        lines.append(rec)
    return "\n".join(lines) + "\n"


def directory_prefixes(paths: Iterable[str]) -> set[str]:
    """Distinct non-root directory prefixes: a/b/c.nc -> {a, a/b}."""
    dirs: set[str] = set()
    for p in paths:
        parts = p.split("/")[:-1]
        for i in range(1, len(parts) + 1):
            dirs.add("/".join(parts[:i]))
    return dirs


def path_sizes(m: Manifest) -> dict[str, int | None]:
    """Size per distinct path: first declared size wins, None if undeclared."""
    sizes: dict[str, int | None] = {}
    for e in m.entries:
        if e.relative_path not in sizes:
            sizes[e.relative_path] = e.size_bytes
        elif sizes[e.relative_path] is None and e.size_bytes is not None:
            sizes[e.relative_path] = e.size_bytes
    return sizes


def summarize(m: Manifest) -> DatasetSummary:
    """Dataset composition: files, directory prefixes, declared byte total."""
    sizes = path_sizes(m)
    known = [s for s in sizes.values() if s is not None]
    return DatasetSummary(
        file_count=len(sizes),
        dir_count=len(directory_prefixes(sizes)),
        total_bytes=sum(known),
        unknown_size_count=len(sizes) - len(known),
    )


def estimate_size(m: Manifest, prober: SizeProber) -> DatasetSummary:
    """Advance volume estimate: fill unknown sizes by probing each source.

    Probe failures leave the entry unknown (summary stays a lower bound);
    sizes already declared are never probed.
    """
    sizes = path_sizes(m)
    urls_by_path: dict[str, list[str]] = {}
    for e in m.entries:
        urls_by_path.setdefault(e.relative_path, []).append(e.url)

    for path, size in sizes.items():
        if size is not None:
            continue
        for url in urls_by_path[path]:
            try:
                sizes[path] = prober.probe_size(url)
                break
            except Exception as exc:
                log.warning("size probe failed for %s via %s: %s", path, url, exc)

    known = [s for s in sizes.values() if s is not None]
    return DatasetSummary(
        file_count=len(sizes),
        dir_count=len(directory_prefixes(sizes)),
        total_bytes=sum(known),
        unknown_size_count=len(sizes) - len(known),
    )


def summarize_replica_sets(sets: list[ReplicaSet]) -> DatasetSummary:
    """Combined composition across manifests (paths already deduplicated)."""
    known = [rs.size_bytes for rs in sets if rs.size_bytes is not None]
    return DatasetSummary(
        file_count=len(sets),
        dir_count=len(directory_prefixes(rs.relative_path for rs in sets)),
        total_bytes=sum(known),
        unknown_size_count=len(sets) - len(known),
    )


def probe_unknown_sizes(sets: list[ReplicaSet], prober: SizeProber) -> list[ReplicaSet]:
    """Fill missing sizes by probing each location until one answers."""
    from dataclasses import replace

    out: list[ReplicaSet] = []
    for rs in sets:
        if rs.size_bytes is None:
            for url, _node in rs.locations:
                try:
                    rs = replace(rs, size_bytes=prober.probe_size(url))
                    break
                except Exception as exc:
                    log.warning("size probe failed for %s via %s: %s",
                                rs.relative_path, url, exc)
        out.append(rs)
    return out


def group_replicas(manifests: Iterable[Manifest]) -> list[ReplicaSet]:
    """Merge entries across manifests into one ReplicaSet per path.

    Raises ReplicaConflict when sources disagree on a path's checksum;
    conflicts are an operator problem and never silently resolved.
    """
    order: list[str] = []
    claims: dict[str, list[FileEntry]] = {}
    for m in manifests:
        for e in m.entries:
            if e.relative_path not in claims:
                order.append(e.relative_path)
                claims[e.relative_path] = []
            claims[e.relative_path].append(e)

    sets: list[ReplicaSet] = []
    for path in order:
        entries = claims[path]
        kinds = {(e.checksum_type, e.checksum_hex) for e in entries}
        if len(kinds) > 1:
            raise ReplicaConflict(
                path, [(e.url, e.checksum_type, e.checksum_hex) for e in entries]
            )
        size = next((e.size_bytes for e in entries if e.size_bytes is not None), None)
        sets.append(
            ReplicaSet(
                relative_path=path,
                checksum_type=entries[0].checksum_type,
                checksum_hex=entries[0].checksum_hex,
                locations=tuple((e.url, e.node_id) for e in entries),
                size_bytes=size,
            )
        )
    return sets
