"""Shared fixtures: sim fleets, run helpers, hypothesis strategies."""

from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import strategies as st

from stagekit.clock import SYSTEM_CLOCK
from stagekit.credential import CredentialManager, LocalTokenProvider
from stagekit.engine import RetryPolicy
from stagekit.journal import StatusJournal
from stagekit.manifest import (
    FileEntry,
    Manifest,
    group_replicas,
    parse_manifest,
    summarize_replica_sets,
)
from stagekit.metrics import MetricsStore
from stagekit.scheduler import Scheduler, SchedulerConfig, build_plan
from stagekit.simnode import SimFleet, SimNodeConfig


@pytest.fixture
def fleet_factory():
    """Start fleets that are always torn down, however the test exits."""
    fleets: list[SimFleet] = []

    def make(configs, clock=SYSTEM_CLOCK) -> SimFleet:
        fleet = SimFleet(configs, clock=clock).start()
        fleets.append(fleet)
        return fleet

    yield make
    for fleet in fleets:
        fleet.stop()


def single_node_fleet(
    make, catalog, node_id="node-a", clock=SYSTEM_CLOCK, **kwargs
) -> SimFleet:
    return make([SimNodeConfig(node_id=node_id, catalog=catalog, **kwargs)], clock=clock)


def stage_run(
    fleet: SimFleet,
    manifest_texts: list[str],
    staging: Path,
    config: SchedulerConfig | None = None,
    retry: RetryPolicy | None = None,
    clock=SYSTEM_CLOCK,
    credman: CredentialManager | None = None,
    wave_hook=None,
    profiles=None,
    store: MetricsStore | None = None,
    verify_mode: str = "streamed",
):
    """Parse, plan and run against a live fleet; returns (report, plan, journal, store)."""
    config = config or SchedulerConfig()
    manifests = [parse_manifest(t) for t in manifest_texts]
    sets = group_replicas(manifests)
    summary = summarize_replica_sets(sets)

    journal = StatusJournal(staging / "transfer.journal")
    expected = {rs.relative_path: (rs.checksum_type, rs.checksum_hex) for rs in sets}
    pending = [rs for rs in sets if rs.relative_path not in journal.done_paths(expected)]

    store = store if store is not None else MetricsStore(ewma_alpha=config.ewma_alpha)
    credman = credman or CredentialManager(LocalTokenProvider(clock), clock=clock)
    plan = build_plan(pending, config, summary, profiles=profiles, clock=clock)
    sched = Scheduler(
        config,
        credman,
        journal,
        store,
        retry=retry,
        clock=clock,
        verify_mode=verify_mode,
        wave_hook=wave_hook,
    )
    report = sched.run(plan, staging)
    journal.close()
    return report, plan, journal, store


# -- hypothesis strategies ----------------------------------------------------

_SEGMENT = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-.", min_size=1, max_size=8
).filter(lambda s: s not in ("..", "."))

relative_paths = st.builds(
    "/".join, st.lists(_SEGMENT, min_size=1, max_size=3)
)

_HOST = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789.-", min_size=1, max_size=12).filter(
    lambda h: not h.startswith(("-", ".")) and not h.endswith(("-", "."))
)


def _checksum(ctype: str):
    length = 32 if ctype == "md5" else 64
    return st.text(alphabet="0123456789abcdef", min_size=length, max_size=length)


@st.composite
def file_entries(draw, path=None):
    ctype = draw(st.sampled_from(("md5", "sha256")))
    p = path if path is not None else draw(relative_paths)
    host = draw(_HOST)
    return FileEntry(
        relative_path=p,
        url=f"http://{host}/{p}",
        checksum_type=ctype,
        checksum_hex=draw(_checksum(ctype)),
        size_bytes=draw(st.one_of(st.none(), st.integers(min_value=0, max_value=10**15))),
    )


@st.composite
def manifests(draw, max_entries: int = 8):
    paths = draw(
        st.lists(relative_paths, min_size=0, max_size=max_entries, unique=True)
    )
    entries = [draw(file_entries(path=p)) for p in paths]
    dataset_id = draw(
        st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-_.", min_size=1, max_size=16)
    )
    source = entries[0].node_id if entries else ""
    return Manifest(dataset_id=dataset_id, entries=entries, source_node=source)
