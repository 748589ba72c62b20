"""Heartbeat segmentation and the labeled beat matrix.

Raw signals are cut into one window per annotation using a constant
division of each RR interval: the boundary between consecutive anchors
``r_i < r_j`` sits at ``r_i + floor(2*(r_j - r_i)/3)``, so every beat
keeps the last third of the previous interval and the first two thirds
of the next one, and consecutive windows tile the signal exactly.
Windows are then linearly resampled to 256 points and detrended by
subtracting a 127-point median filter (mirrored edges).

Each beat carries its MIT-BIH annotation symbol and the consolidated
AAMI superclass (N, S, V, F, Q), with every non-AAMI annotation type
grouped into a catch-all class O.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import wfdb

__all__ = [
    "AAMI_BY_SYMBOL",
    "AAMI_ORDER",
    "Beat",
    "BeatMatrix",
    "map_to_aami",
    "beat_spans",
    "segment_beats",
    "resample_to_256",
    "remove_baseline",
    "build_dataset",
    "write_beats_csv",
    "read_beats_csv",
    "write_beats_cache",
    "read_beats_cache",
    "stratified_subsample",
]

AAMI_ORDER = ("N", "S", "V", "F", "Q", "O")

AAMI_BY_SYMBOL = {
    "N": "N", ".": "N", "L": "N", "R": "N", "e": "N", "j": "N",
    "V": "V", "E": "V",
    "A": "S", "S": "S", "J": "S", "a": "S",
    "Q": "Q", "f": "Q", "/": "Q",
    "F": "F",
    '"': "O", "~": "O", "!": "O", "|": "O", "[": "O", "]": "O", "+": "O", "x": "O",
}

BEAT_WIDTH = 256
CACHE_MAGIC = b"CMBM"


def map_to_aami(symbol: str) -> str:
    """AAMI superclass for one MIT-BIH symbol; unrecognized symbols map to O."""
    return AAMI_BY_SYMBOL.get(symbol, "O")


@dataclass(frozen=True)
class Beat:
    waveform: np.ndarray
    record_id: str
    lead: str
    r_sample: int
    symbol: str
    aami: str
    gender: str


@dataclass
class BeatMatrix:
    """N aligned beats for one lead: waveforms plus parallel metadata columns."""

    X: np.ndarray  # (N, 256) float32
    lead: str
    record_id: np.ndarray  # (N,) str
    r_sample: np.ndarray  # (N,) int64
    symbol: np.ndarray  # (N,) str
    aami: np.ndarray  # (N,) str
    gender: np.ndarray  # (N,) str

    def __post_init__(self) -> None:
        n = self.X.shape[0]
        for name in ("record_id", "r_sample", "symbol", "aami", "gender"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"metadata column {name} is not aligned with X")

    def __len__(self) -> int:
        return self.X.shape[0]

    def beat(self, i: int) -> Beat:
        return Beat(
            waveform=self.X[i],
            record_id=str(self.record_id[i]),
            lead=self.lead,
            r_sample=int(self.r_sample[i]),
            symbol=str(self.symbol[i]),
            aami=str(self.aami[i]),
            gender=str(self.gender[i]),
        )

    def take(self, indices: np.ndarray) -> "BeatMatrix":
        return BeatMatrix(
            X=self.X[indices],
            lead=self.lead,
            record_id=self.record_id[indices],
            r_sample=self.r_sample[indices],
            symbol=self.symbol[indices],
            aami=self.aami[indices],
            gender=self.gender[indices],
        )

    def content_hash(self) -> str:
        """Stable hash of waveforms and metadata, used as embedding provenance."""
        h = hashlib.sha256()
        h.update(self.lead.encode())
        h.update(np.ascontiguousarray(self.X, dtype="<f4").tobytes())
        for col in (self.record_id, self.symbol, self.aami, self.gender):
            h.update("\x1f".join(str(v) for v in col).encode())
        h.update(np.ascontiguousarray(self.r_sample, dtype="<i8").tobytes())
        return h.hexdigest()


def beat_spans(anchors) -> list[tuple[int, int]]:
    """Half-open sample spans, one per anchor, tiling the annotated range.

    The split between anchors ``r_i`` and ``r_j`` is ``r_i + (2*(r_j-r_i))//3``;
    the first window starts at its anchor and the last one ends at its anchor,
    so every sample between the first and last anchor lands in exactly one span.
    """
    anchors = [int(a) for a in anchors]
    if len(anchors) < 2:
        raise ValueError("insufficient anchors: need at least 2")
    for a, b in zip(anchors, anchors[1:]):
        if b <= a:
            raise ValueError(f"anchors must be strictly ascending, got {a} then {b}")

    bounds = [a + (2 * (b - a)) // 3 for a, b in zip(anchors, anchors[1:])]
    spans = [(anchors[0], bounds[0])]
    spans += [(bounds[i - 1], bounds[i]) for i in range(1, len(bounds))]
    spans.append((bounds[-1], anchors[-1]))
    for (start, stop), anchor in zip(spans, anchors):
        if stop <= start:
            raise ValueError(f"empty window at anchor {anchor} (intervals too short)")
    return spans


def segment_beats(signal: np.ndarray, anchors) -> list[np.ndarray]:
    """Cut one lead's sample vector into per-anchor windows."""
    signal = np.asarray(signal)
    spans = beat_spans(anchors)
    if spans[0][0] < 0 or spans[-1][1] > signal.shape[0]:
        raise ValueError("anchors fall outside the signal")
    return [signal[a:b] for a, b in spans]


def resample_to_256(window: np.ndarray, width: int = BEAT_WIDTH) -> np.ndarray:
    """Linear interpolation onto ``width`` equispaced points over [0, len-1]."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 1 or w.size < 2:
        raise ValueError("window must be 1-D with at least 2 samples")
    positions = np.linspace(0.0, w.size - 1.0, width)
    return np.interp(positions, np.arange(w.size), w)


def _compile_sliding_median():
    try:
        import numba
    except ImportError:
        return None

    @numba.njit(cache=True, parallel=True)
    def sliding_median(padded, kernel, out):  # pragma: no cover - jitted
        half = kernel // 2
        n_rows, width = padded.shape
        n_out = width - kernel + 1
        for r in numba.prange(n_rows):
            window = np.sort(padded[r, :kernel].copy())
            out[r, 0] = window[half]
            for j in range(1, n_out):
                old = padded[r, j - 1]
                new = padded[r, j + kernel - 1]
                pos = np.searchsorted(window, old)
                if new >= old:
                    while pos + 1 < kernel and window[pos + 1] < new:
                        window[pos] = window[pos + 1]
                        pos += 1
                else:
                    while pos > 0 and window[pos - 1] > new:
                        window[pos] = window[pos - 1]
                        pos -= 1
                window[pos] = new
                out[r, j] = window[half]

    return sliding_median


_SLIDING_MEDIAN = None
_FAST_MEDIAN_MIN_ROWS = 64  # below this, compile latency dwarfs the work


def _median_baseline(rows: np.ndarray, kernel: int) -> np.ndarray:
    """Sliding median per row with mirrored edges (edge sample not repeated).

    Large batches run an insertion-based sliding median (numba, when
    available) that is bitwise identical to the windowed np.median path.
    """
    half = kernel // 2
    padded = np.pad(rows, ((0, 0), (half, half)), mode="reflect")
    if rows.shape[0] >= _FAST_MEDIAN_MIN_ROWS:
        global _SLIDING_MEDIAN
        if _SLIDING_MEDIAN is None:
            _SLIDING_MEDIAN = _compile_sliding_median() or np.median  # sentinel
        if _SLIDING_MEDIAN is not np.median:
            out = np.empty_like(rows, dtype=padded.dtype)
            _SLIDING_MEDIAN(padded, kernel, out)
            return out
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=1)
    return np.median(windows, axis=-1)


def remove_baseline(beat: np.ndarray, kernel: int = 127) -> np.ndarray:
    """Subtract the median-filtered waveform from the original."""
    b = np.asarray(beat, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[None, :]
    if kernel % 2 == 0:
        raise ValueError("kernel must be odd")
    if kernel > b.shape[1]:
        raise ValueError("kernel exceeds beat length")
    out = b - _median_baseline(b, kernel)
    return out[0] if squeeze else out


def _clamped_kernel(kernel: int, length: int) -> int:
    k = min(kernel, length)
    return k if k % 2 else k - 1


def build_dataset(
    cache_dir: str | Path,
    record_ids,
    leads=("MLII", "V1"),
    kernel: int = 127,
    order: str = "resample-then-filter",
) -> dict[str, BeatMatrix]:
    """Segment every annotation of every record into one BeatMatrix per lead.

    Anchors are all annotation sample indices, beat and non-beat alike, so
    non-beat annotation types flow through as class-O beats.  Output order
    is deterministic: record id ascending, then r_sample ascending.

    ``order`` picks when detrending happens: the default resamples each
    window to 256 points and median-filters that; ``filter-then-resample``
    filters the raw window first (kernel clamped to the window length).
    """
    if order not in ("resample-then-filter", "filter-then-resample"):
        raise ValueError(f"unknown processing order {order!r}")
    record_ids = sorted(str(r) for r in record_ids)

    per_lead: dict[str, list[np.ndarray]] = {lead: [] for lead in leads}
    meta: dict[str, list] = {"record_id": [], "r_sample": [], "symbol": [], "aami": [], "gender": []}

    for record_id in record_ids:
        header, signals, annotations = wfdb.read_record(cache_dir, record_id)
        for lead in leads:
            if lead not in header.lead_names:
                raise ValueError(f"record {record_id} has no {lead} lead (leads: {header.lead_names})")
        anchors = [a.sample for a in annotations]
        spans = beat_spans(anchors)

        for lead in leads:
            row = header.lead_names.index(lead)
            sig = signals.samples[row]
            if spans[-1][1] > sig.shape[0]:
                raise ValueError(f"record {record_id}: annotations beyond signal end")
            windows = [sig[a:b] for a, b in spans]
            if order == "resample-then-filter":
                resampled = np.vstack([resample_to_256(w) for w in windows])
                beats = resampled - _median_baseline(resampled, kernel)
            else:
                beats = np.vstack(
                    [
                        resample_to_256(remove_baseline(w, _clamped_kernel(kernel, w.size)))
                        for w in windows
                    ]
                )
            per_lead[lead].append(beats.astype(np.float32))

        meta["record_id"].extend([record_id] * len(annotations))
        meta["r_sample"].extend(anchors)
        meta["symbol"].extend(a.symbol for a in annotations)
        meta["aami"].extend(map_to_aami(a.symbol) for a in annotations)
        meta["gender"].extend([header.subject_gender] * len(annotations))

    result = {}
    for lead in leads:
        result[lead] = BeatMatrix(
            X=np.vstack(per_lead[lead]) if per_lead[lead] else np.empty((0, BEAT_WIDTH), np.float32),
            lead=lead,
            record_id=np.array(meta["record_id"], dtype=object),
            r_sample=np.array(meta["r_sample"], dtype=np.int64),
            symbol=np.array(meta["symbol"], dtype=object),
            aami=np.array(meta["aami"], dtype=object),
            gender=np.array(meta["gender"], dtype=object),
        )
    return result


def write_beats_csv(bm: BeatMatrix, path: str | Path) -> None:
    """CSV layout: record_id, r_sample, symbol, aami, gender, s0..s255."""
    with open(path, "w", newline="") as f:
        cols = ",".join(f"s{i}" for i in range(bm.X.shape[1]))
        f.write(f"record_id,r_sample,symbol,aami,gender,{cols}\n")
        for i in range(len(bm)):
            samples = ",".join(repr(float(v)) for v in bm.X[i])
            f.write(
                f"{bm.record_id[i]},{bm.r_sample[i]},{csv_quote(str(bm.symbol[i]))},"
                f"{bm.aami[i]},{bm.gender[i]},{samples}\n"
            )


def csv_quote(s: str) -> str:
    if "," in s or '"' in s:
        return '"' + s.replace('"', '""') + '"'
    return s


def read_beats_csv(path: str | Path, lead: str) -> BeatMatrix:
    import csv

    record_id, r_sample, symbol, aami, gender, rows = [], [], [], [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        width = len(header) - 5
        for row in reader:
            record_id.append(row[0])
            r_sample.append(int(row[1]))
            symbol.append(row[2])
            aami.append(row[3])
            gender.append(row[4])
            rows.append(np.array(row[5:], dtype=np.float32))
    X = np.vstack(rows) if rows else np.empty((0, width), np.float32)
    return BeatMatrix(
        X=X,
        lead=lead,
        record_id=np.array(record_id, dtype=object),
        r_sample=np.array(r_sample, dtype=np.int64),
        symbol=np.array(symbol, dtype=object),
        aami=np.array(aami, dtype=object),
        gender=np.array(gender, dtype=object),
    )


def write_beats_cache(bm: BeatMatrix, path: str | Path) -> None:
    """Binary cache: magic ``CMBM``, u32 N, u32 width, row-major f32 samples,
    then u32 byte length + a UTF-8 JSON metadata table (all little-endian)."""
    meta = {
        "lead": bm.lead,
        "record_id": [str(v) for v in bm.record_id],
        "r_sample": [int(v) for v in bm.r_sample],
        "symbol": [str(v) for v in bm.symbol],
        "aami": [str(v) for v in bm.aami],
        "gender": [str(v) for v in bm.gender],
    }
    blob = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<II", bm.X.shape[0], bm.X.shape[1]))
        f.write(np.ascontiguousarray(bm.X, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def read_beats_cache(path: str | Path) -> BeatMatrix:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a beat cache (bad magic {magic!r})")
        n, width = struct.unpack("<II", f.read(8))
        X = np.frombuffer(f.read(n * width * 4), dtype="<f4").reshape(n, width)
        (blob_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(blob_len).decode("utf-8"))
    return BeatMatrix(
        X=np.array(X, dtype=np.float32),
        lead=meta["lead"],
        record_id=np.array(meta["record_id"], dtype=object),
        r_sample=np.array(meta["r_sample"], dtype=np.int64),
        symbol=np.array(meta["symbol"], dtype=object),
        aami=np.array(meta["aami"], dtype=object),
        gender=np.array(meta["gender"], dtype=object),
    )


def stratified_subsample(bm: BeatMatrix, size: int, seed: int) -> np.ndarray:
    """Row indices of a record-stratified subsample, ascending.

    Quotas are proportional to per-record beat counts (largest-remainder
    rounding, remainders tied by record id); rows within a record are drawn
    without replacement from a generator seeded with ``seed``.
    """
    n = len(bm)
    if size >= n:
        return np.arange(n)
    records, counts = np.unique(np.asarray(bm.record_id, dtype=str), return_counts=True)
    exact = size * counts / n
    quota = np.floor(exact).astype(int)
    remainder = exact - quota
    shortfall = size - int(quota.sum())
    if shortfall > 0:
        order = np.lexsort((records, -remainder))
        quota[order[:shortfall]] += 1
    quota = np.minimum(quota, counts)
    # Rounding against the per-record caps can leave a deficit; spread it
    # over records with spare beats, largest first.
    deficit = size - int(quota.sum())
    while deficit > 0:
        spare = counts - quota
        order = np.lexsort((records, -spare))
        for idx in order:
            if deficit == 0:
                break
            if spare[idx] > 0:
                quota[idx] += 1
                deficit -= 1

    rng = np.random.default_rng(seed)
    chosen = []
    ids = np.asarray(bm.record_id, dtype=str)
    for rec, q in zip(records, quota):
        rows = np.flatnonzero(ids == rec)
        if q < len(rows):
            rows = rng.choice(rows, size=q, replace=False)
        chosen.append(rows)
    out = np.sort(np.concatenate(chosen))
    if out.size != size:
        warnings.warn(f"subsample size {out.size} != requested {size}")
    return out
