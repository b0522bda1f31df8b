"""HTTP binding of the data-node wire protocol, client side.

GET fetches content, HEAD reports size. Auth rides in the
``X-Stage-Token: <id>:<expiry>`` header; a 401 means the token was
rejected, a 410 with ``X-Relocated-To`` means the node is permanently
gone, 404 means unknown path.
"""

from __future__ import annotations

from typing import Iterator

import requests

from .credential import Credential
from .errors import CredentialExpired, NodeGone, ProbeFailed, TransportError
from .manifest import node_id_of

TOKEN_HEADER = "X-Stage-Token"
RELOCATION_HEADER = "X-Relocated-To"

DEFAULT_CHUNK_SIZE = 65536
# Generous read timeout: a deliberately slow node may pace chunks far apart.
DEFAULT_TIMEOUT = (10.0, 120.0)


def format_token(cred: Credential) -> str:
    return f"{cred.id}:{cred.expires_at}"


class HttpConnection:
    """One worker's view of the fleet; safe to use from a single thread."""

    def __init__(
        self,
        timeout: tuple[float, float] = DEFAULT_TIMEOUT,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
    ) -> None:
        self.timeout = timeout
        self.chunk_size = chunk_size
        self._session = requests.Session()

    def close(self) -> None:
        self._session.close()

    def probe_size(self, url: str) -> int:
        """HEAD the url; returns Content-Length. Raises ProbeFailed."""
        try:
            resp = self._session.head(url, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProbeFailed(f"HEAD {url}: {exc}") from exc
        if resp.status_code != 200:
            raise ProbeFailed(f"HEAD {url}: status {resp.status_code}")
        try:
            return int(resp.headers["Content-Length"])
        except (KeyError, ValueError) as exc:
            raise ProbeFailed(f"HEAD {url}: missing content length") from exc

    def get_stream(self, url: str, cred: Credential) -> Iterator[bytes]:
        """Stream the body of ``url``; verifies the advertised length.

        Raises CredentialExpired on 401, NodeGone on 410 (carrying any
        relocation hint), TransportError on anything else that is not a
        clean, complete 200.
        """
        headers = {TOKEN_HEADER: format_token(cred)}
        try:
            resp = self._session.get(
                url, headers=headers, stream=True, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"GET {url}: {exc}") from exc

        with resp:
            if resp.status_code == 401:
                raise CredentialExpired(f"node rejected token for {url}")
            if resp.status_code == 410:
                raise NodeGone(node_id_of(url), resp.headers.get(RELOCATION_HEADER))
            if resp.status_code != 200:
                raise TransportError(f"GET {url}: status {resp.status_code}")

            expected = resp.headers.get("Content-Length")
            received = 0
            try:
                for chunk in resp.iter_content(chunk_size=self.chunk_size):
                    received += len(chunk)
                    yield chunk
            except requests.RequestException as exc:
                raise TransportError(f"GET {url}: {exc}") from exc
            if expected is not None and received != int(expected):
                raise TransportError(
                    f"GET {url}: short body {received}/{expected} bytes"
                )
