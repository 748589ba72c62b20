import functools
import http.server
import threading

import pytest

from beatspace.fetch import CorruptDownloadError, FetchError, fetch_all, fetch_record
from beatspace.wfdb import read_record
from wfdbgen import build_synthetic_record


@pytest.fixture()
def record_server(tmp_path):
    """Serve a directory of synthetic records over local HTTP."""
    serve_dir = tmp_path / "server"
    serve_dir.mkdir()
    build_synthetic_record(serve_dir, "100", n_beats=12)
    handler = functools.partial(http.server.SimpleHTTPRequestHandler, directory=str(serve_dir))
    handler.log_message = lambda *a, **k: None
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield serve_dir, f"http://127.0.0.1:{server.server_address[1]}/"
    server.shutdown()
    thread.join()


def test_cold_fetch_then_parse(record_server, tmp_path):
    _, base_url = record_server
    cache = tmp_path / "cache"
    paths = fetch_record("100", base_url=base_url, cache_dir=cache)
    assert all(p.is_file() for p in paths.as_tuple())
    header, signals, annotations = read_record(cache, "100")
    assert header.record_id == "100"
    assert len(annotations) == 12


def test_warm_cache_skips_network(record_server, tmp_path):
    _, base_url = record_server
    cache = tmp_path / "cache"
    fetch_record("100", base_url=base_url, cache_dir=cache)
    # A dead base URL proves the warm path never touches the network.
    paths = fetch_record("100", base_url="http://127.0.0.1:1/", cache_dir=cache)
    assert paths.hea.is_file()


def test_missing_record_raises_not_found(record_server, tmp_path):
    _, base_url = record_server
    with pytest.raises(FetchError) as err:
        fetch_record("999", base_url=base_url, cache_dir=tmp_path / "cache")
    assert err.value.status == 404
    assert not err.value.retriable


def test_corrupt_download_detected(record_server, tmp_path):
    serve_dir, base_url = record_server
    dat = serve_dir / "100.dat"
    dat.write_bytes(dat.read_bytes()[:10])  # truncate on the server
    cache = tmp_path / "cache"
    with pytest.raises(CorruptDownloadError, match="corrupt"):
        fetch_record("100", base_url=base_url, cache_dir=cache)
    assert not (cache / "100.dat").exists()


def test_fetch_all_partial_progress(record_server, tmp_path):
    _, base_url = record_server
    report = fetch_all(["100", "999"], base_url=base_url, cache_dir=tmp_path / "cache")
    assert set(report.fetched) == {"100"}
    assert set(report.failed) == {"999"}
    assert not report.ok


def test_unreachable_host_is_retriable(tmp_path):
    with pytest.raises(FetchError) as err:
        fetch_record("100", base_url="http://127.0.0.1:1/", cache_dir=tmp_path / "cache", timeout=2)
    assert err.value.retriable


def test_concurrent_fetches_serialize_per_record(record_server, tmp_path):
    import concurrent.futures

    _, base_url = record_server
    cache = tmp_path / "cache"
    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
        futures = [pool.submit(fetch_record, "100", base_url, cache) for _ in range(4)]
        results = [f.result() for f in futures]
    assert all(r.hea.is_file() for r in results)
    header, _, annotations = read_record(cache, "100")
    assert header.record_id == "100" and len(annotations) == 12
