"""HTTP fetching and local caching of MIT-BIH records.

Records are fetched with plain GET requests against a configurable base
URL (PhysioNet's public layout by default) and stored as
``<cache_dir>/<record_id>.{hea,dat,atr}``.  Fetches are idempotent: a
record whose three files are already cached and re-parse cleanly is never
re-downloaded.  Writes are serialized per record id so concurrent
pipelines sharing one cache cannot corrupt it.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import requests

from . import wfdb

__all__ = [
    "DEFAULT_BASE_URL",
    "MITDB_RECORD_IDS",
    "FetchError",
    "CorruptDownloadError",
    "RecordPaths",
    "FetchReport",
    "fetch_record",
    "fetch_all",
]

DEFAULT_BASE_URL = "https://physionet.org/files/mitdb/1.0.0/"

# The 48 record names of the MIT-BIH arrhythmia database.
MITDB_RECORD_IDS = tuple(
    str(r)
    for r in (
        list(range(100, 110)) + list(range(111, 120)) + list(range(121, 125))
        + [200, 201, 202, 203, 205, 207, 208, 209, 210, 212, 213, 214, 215, 217,
           219, 220, 221, 222, 223, 228, 230, 231, 232, 233, 234]
    )
)

_EXTENSIONS = ("hea", "dat", "atr")

_locks_guard = threading.Lock()
_record_locks: dict[tuple[str, str], threading.Lock] = {}


class FetchError(RuntimeError):
    """Download failure; ``retriable`` marks transient network/server errors."""

    def __init__(self, message: str, status: int | None = None, retriable: bool = False):
        super().__init__(message)
        self.status = status
        self.retriable = retriable


class CorruptDownloadError(RuntimeError):
    """Downloaded files did not survive a re-parse."""


@dataclass(frozen=True)
class RecordPaths:
    record_id: str
    hea: Path
    dat: Path
    atr: Path

    def as_tuple(self) -> tuple[Path, Path, Path]:
        return (self.hea, self.dat, self.atr)


@dataclass
class FetchReport:
    """Per-record outcome of a bulk fetch; failures keep partial progress."""

    fetched: dict[str, RecordPaths] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


def _record_lock(cache_dir: Path, record_id: str) -> threading.Lock:
    key = (str(cache_dir.resolve()), record_id)
    with _locks_guard:
        lock = _record_locks.get(key)
        if lock is None:
            lock = threading.Lock()
            _record_locks[key] = lock
        return lock


def _validate(paths: RecordPaths) -> None:
    header = wfdb.parse_header(paths.hea.read_bytes())
    n_total = header.n_signals * header.n_samples
    needed = ((n_total + 1) // 2) * 3
    actual = paths.dat.stat().st_size
    if actual < needed:
        raise wfdb.Format212Error("cached .dat too short", expected=needed, actual=actual)
    wfdb.decode_annotations(paths.atr.read_bytes())


def _download(url: str, dest: Path, timeout: float) -> None:
    try:
        resp = requests.get(url, timeout=timeout)
    except requests.RequestException as exc:
        raise FetchError(f"GET {url} failed: {exc}", retriable=True) from exc
    if resp.status_code == 404:
        raise FetchError(f"GET {url} -> 404 not found", status=404, retriable=False)
    if resp.status_code != 200:
        raise FetchError(
            f"GET {url} -> HTTP {resp.status_code}",
            status=resp.status_code,
            retriable=resp.status_code >= 500,
        )
    tmp = dest.with_suffix(dest.suffix + ".part")
    tmp.write_bytes(resp.content)
    os.replace(tmp, dest)


def fetch_record(
    record_id: str,
    base_url: str = DEFAULT_BASE_URL,
    cache_dir: str | Path = "mitdb-cache",
    timeout: float = 30.0,
) -> RecordPaths:
    """Ensure one record's three files are cached and parseable.

    Returns the cached paths.  A warm cache short-circuits without any
    network traffic; a failed integrity check after download raises
    :class:`CorruptDownloadError` and removes the offending files.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    paths = RecordPaths(
        record_id,
        *(cache_dir / f"{record_id}.{ext}" for ext in _EXTENSIONS),
    )

    with _record_lock(cache_dir, record_id):
        if all(p.is_file() for p in paths.as_tuple()):
            try:
                _validate(paths)
                return paths
            except Exception:
                # Stale or corrupt cache entry: refetch below.
                pass

        if not base_url.endswith("/"):
            base_url += "/"
        for p in paths.as_tuple():
            _download(f"{base_url}{p.name}", p, timeout)
        try:
            _validate(paths)
        except Exception as exc:
            for p in paths.as_tuple():
                p.unlink(missing_ok=True)
            raise CorruptDownloadError(f"corrupt download for record {record_id}: {exc}") from exc
        return paths


def fetch_all(
    record_ids=MITDB_RECORD_IDS,
    base_url: str = DEFAULT_BASE_URL,
    cache_dir: str | Path = "mitdb-cache",
    timeout: float = 30.0,
) -> FetchReport:
    """Fetch many records, keeping partial progress on per-record failures."""
    report = FetchReport()
    for record_id in record_ids:
        try:
            report.fetched[record_id] = fetch_record(record_id, base_url, cache_dir, timeout)
        except (FetchError, CorruptDownloadError) as exc:
            report.failed[record_id] = str(exc)
    return report
