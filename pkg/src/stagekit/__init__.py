"""Bulk data staging toolkit.

Downloads large file sets described by manifests from remote data nodes:
checksum-verified, journal-backed (crash-safe resume), credential-aware,
and parallel across nodes with per-node throughput tracking. Ships a
simulated data-node fleet so every failure mode is testable locally.
"""

__version__ = "0.1.0"
