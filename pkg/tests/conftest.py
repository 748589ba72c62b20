import os
from pathlib import Path

import pytest

from beatspace.fetch import MITDB_RECORD_IDS


def _cache_candidates():
    env = os.environ.get("BEATSPACE_CACHE")
    if env:
        yield Path(env)
    yield Path("mitdb-cache")
    yield Path.home() / ".cache" / "beatspace" / "mitdb"


@pytest.fixture(scope="session")
def mitdb_cache() -> Path:
    """Locate a complete 48-record MIT-BIH cache or skip dataset-bound tests."""
    for candidate in _cache_candidates():
        if candidate.is_dir() and all(
            (candidate / f"{r}.{ext}").is_file() for r in MITDB_RECORD_IDS for ext in ("hea", "dat", "atr")
        ):
            return candidate
    pytest.skip(
        "MIT-BIH record cache not found: set BEATSPACE_CACHE to a directory holding "
        "all 48 records or run `beatspace fetch` on a networked machine"
    )
