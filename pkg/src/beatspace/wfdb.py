"""WFDB record parsing for the MIT-BIH arrhythmia database.

Handles the three files that make up one record:

* ``<record>.hea`` -- text header (record line, one line per signal,
  ``#`` comment lines carrying subject age/sex),
* ``<record>.dat`` -- format-212 binary signal data (two 12-bit
  two's-complement samples packed into three bytes),
* ``<record>.atr`` -- MIT annotation stream (little-endian 16-bit words,
  top 6 bits type code, low 10 bits time increment, codes 59-63 reserved
  for SKIP/NUM/SUB/CHN/AUX escapes, a zero word terminates).

All parsers are pure functions over byte buffers and are safe to call
concurrently on distinct inputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "HeaderParseError",
    "Format212Error",
    "AnnotationError",
    "SignalSpec",
    "RecordHeader",
    "Annotation",
    "SignalMatrix",
    "ANNOTATION_SYMBOLS",
    "parse_header",
    "decode_format212",
    "decode_annotations",
    "apply_adc_calibration",
    "select_study_subset",
    "read_record",
]


class HeaderParseError(ValueError):
    """Malformed ``.hea`` content; carries the offending 1-based line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"header line {line_no}: {message}")
        self.line_no = line_no


class Format212Error(ValueError):
    """Truncated or inconsistent format-212 byte stream."""

    def __init__(self, message: str, expected: int | None = None, actual: int | None = None):
        if expected is not None:
            message = f"{message} (expected {expected} bytes, got {actual})"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class AnnotationError(ValueError):
    """Malformed MIT annotation stream."""


# Display symbols for annotation type codes, as fixed by the WFDB library
# (annot.c).  Codes without an assigned symbol render as "[code]".
ANNOTATION_SYMBOLS = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A",
    9: "S", 10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|",
    18: "s", 19: "T", 20: "*", 21: "D", 22: '"', 23: "=", 24: "p",
    25: "B", 26: "^", 27: "t", 28: "+", 29: "u", 30: "?", 31: "!",
    32: "[", 33: "]", 34: "e", 35: "n", 36: "@", 37: "x", 38: "f",
    39: "(", 40: ")", 41: "r",
}

_SKIP, _NUM, _SUB, _CHN, _AUX = 59, 60, 61, 62, 63


@dataclass(frozen=True)
class SignalSpec:
    """One signal line of a header."""

    file_name: str
    format_code: int
    adc_gain: float
    adc_baseline: int
    initial_value: int
    lead_name: str


@dataclass(frozen=True)
class RecordHeader:
    record_id: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: tuple[SignalSpec, ...]
    subject_age: int | None
    subject_gender: str  # "male" | "female" | "unknown"

    @property
    def lead_names(self) -> tuple[str, ...]:
        return tuple(s.lead_name for s in self.signals)


@dataclass(frozen=True)
class Annotation:
    """One decoded annotation; auxiliary fields carried verbatim."""

    sample: int
    code: int
    symbol: str
    subtype: int = 0
    chan: int = 0
    num: int = 0
    aux: str | None = None


@dataclass(frozen=True)
class SignalMatrix:
    """Calibrated signals in mV, one row per lead."""

    samples: np.ndarray  # (n_signals, n_samples) float64
    lead_names: tuple[str, ...]


_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+0-9]+)\))?(?:/.*)?$")
_DEMOG_RE = re.compile(r"^#\s*(\d+|\?)\s+([MFmf])\b")


def parse_header(raw: bytes | str) -> RecordHeader:
    """Parse the full contents of a ``.hea`` file.

    Subject age and gender come from the first comment line of the form
    ``# <age> <M|F> ...``; absent or unparseable demographics leave them
    unknown and the record is still usable.
    """
    text = raw.decode("latin-1") if isinstance(raw, bytes) else raw
    lines = text.splitlines()

    record_line = None
    record_line_no = 0
    signal_lines: list[tuple[int, str]] = []
    comments: list[str] = []
    for i, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped)
            continue
        if record_line is None:
            record_line = stripped
            record_line_no = i
        else:
            signal_lines.append((i, stripped))

    if record_line is None:
        raise HeaderParseError("empty header", 1)

    fields = record_line.split()
    if len(fields) < 4:
        raise HeaderParseError("record line needs name, signal count, sampling rate, sample count", record_line_no)
    name = fields[0]
    if "/" in name:
        raise HeaderParseError("multi-segment records are not supported", record_line_no)
    try:
        n_signals = int(fields[1])
    except ValueError:
        raise HeaderParseError(f"bad signal-count field {fields[1]!r}", record_line_no) from None
    if n_signals < 1:
        raise HeaderParseError("signal-count must be at least 1", record_line_no)
    try:
        # The rate field may carry a counter spec ("360/360(0)"); the
        # leading number is the sampling rate.
        sampling_rate = float(fields[2].split("/")[0])
        n_samples = int(fields[3])
    except ValueError:
        raise HeaderParseError("bad sampling rate or sample count", record_line_no) from None
    if sampling_rate <= 0:
        raise HeaderParseError("sampling rate must be positive", record_line_no)
    if n_samples <= 0:
        raise HeaderParseError("sample count must be positive", record_line_no)

    if len(signal_lines) < n_signals:
        raise HeaderParseError(
            f"signal-count mismatch: header declares {n_signals} signals, found {len(signal_lines)} signal lines",
            record_line_no,
        )

    signals = []
    for idx in range(n_signals):
        line_no, line = signal_lines[idx]
        toks = line.split()
        if len(toks) < 3:
            raise HeaderParseError("signal line needs file name, format, gain", line_no)
        file_name = toks[0]
        fmt_tok = toks[1]
        m = re.match(r"^(\d+)", fmt_tok)
        if not m:
            raise HeaderParseError(f"bad format field {fmt_tok!r}", line_no)
        format_code = int(m.group(1))
        if format_code != 212:
            raise HeaderParseError(f"unsupported format code {format_code} (only 212 is handled)", line_no)

        g = _GAIN_RE.match(toks[2])
        if not g:
            raise HeaderParseError(f"bad gain field {toks[2]!r}", line_no)
        adc_gain = float(g.group(1))
        if adc_gain == 0:
            adc_gain = 200.0  # WFDB default for an unspecified gain
        if adc_gain <= 0:
            raise HeaderParseError("adc gain must be positive", line_no)
        paren_baseline = g.group(2)

        adc_zero = int(toks[4]) if len(toks) > 4 else 0
        baseline = int(paren_baseline) if paren_baseline is not None else adc_zero
        initial_value = int(toks[5]) if len(toks) > 5 else adc_zero
        lead_name = " ".join(toks[8:]) if len(toks) > 8 else f"ch{idx}"
        signals.append(
            SignalSpec(
                file_name=file_name,
                format_code=format_code,
                adc_gain=adc_gain,
                adc_baseline=baseline,
                initial_value=initial_value,
                lead_name=lead_name,
            )
        )

    age: int | None = None
    gender = "unknown"
    for comment in comments:
        m = _DEMOG_RE.match(comment)
        if m:
            age = None if m.group(1) == "?" else int(m.group(1))
            gender = "male" if m.group(2).upper() == "M" else "female"
            break

    return RecordHeader(
        record_id=name,
        n_signals=n_signals,
        sampling_rate=sampling_rate,
        n_samples=n_samples,
        signals=tuple(signals),
        subject_age=age,
        subject_gender=gender,
    )


def decode_format212(raw: bytes, n_signals: int, n_samples: int) -> np.ndarray:
    """Unpack a format-212 byte stream into an ``(n_signals, n_samples)`` adu matrix.

    Every 3 bytes hold two 12-bit two's-complement samples: sample A is
    byte0 plus the low nibble of byte1 as high bits, sample B is byte2
    plus the high nibble of byte1 as high bits.  Samples interleave
    signal 0, signal 1, ... frame by frame.  When the total sample count
    is odd, the second sample of the final group is padding and is
    dropped.
    """
    n_total = n_signals * n_samples
    n_pairs = (n_total + 1) // 2
    needed = n_pairs * 3
    if len(raw) < needed:
        raise Format212Error("truncated format-212 stream", expected=needed, actual=len(raw))

    b = np.frombuffer(raw, dtype=np.uint8, count=needed).reshape(-1, 3).astype(np.int32)
    first = b[:, 0] | ((b[:, 1] & 0x0F) << 8)
    second = b[:, 2] | ((b[:, 1] & 0xF0) << 4)

    flat = np.empty(n_pairs * 2, dtype=np.int32)
    flat[0::2] = first
    flat[1::2] = second
    flat = flat[:n_total]
    flat[flat > 2047] -= 4096
    return flat.reshape(n_samples, n_signals).T


def decode_annotations(raw: bytes) -> list[Annotation]:
    """Decode a full ``.atr`` byte stream into annotations with absolute samples.

    Sample indices accumulate the per-word time increments; a SKIP escape
    contributes a signed 32-bit increment (high word first) and the
    following annotation word still adds its own increment.  NUM/SUB/CHN/AUX
    escapes attach to the preceding annotation; chan and num persist to
    later annotations, subtype and aux do not.
    """
    if len(raw) % 2:
        raise AnnotationError("annotation stream has an odd byte count")
    words = np.frombuffer(raw, dtype="<u2")

    out: list[Annotation] = []
    t = 0
    chan = 0
    num = 0
    i = 0
    n = len(words)
    terminated = False
    while i < n:
        w = int(words[i])
        if w == 0:
            terminated = True
            break
        code = w >> 10
        dt = w & 0x3FF

        pending_skip = 0
        while code == _SKIP:
            if i + 2 >= n:
                raise AnnotationError("skip escape truncated")
            hi = int(words[i + 1])
            lo = int(words[i + 2])
            skip = (hi << 16) | lo
            if skip > 0x7FFFFFFF:
                skip -= 0x100000000
            pending_skip += skip
            i += 3
            if i >= n:
                raise AnnotationError("skip escape not followed by an annotation")
            w = int(words[i])
            if w == 0:
                raise AnnotationError("skip escape not followed by an annotation")
            code = w >> 10
            dt = w & 0x3FF

        if code > _SKIP:
            raise AnnotationError(f"field escape code {code} before any annotation")

        t += pending_skip + dt
        if t < 0:
            raise AnnotationError(f"negative sample index {t}")
        if out and t < out[-1].sample:
            raise AnnotationError(f"sample indices decrease at annotation {len(out)}")
        subtype = 0
        aux: str | None = None
        i += 1

        while i < n:
            w = int(words[i])
            nxt = w >> 10
            if nxt <= _SKIP:
                break
            low = w & 0xFF
            if nxt == _NUM:
                num = low - 256 if low > 127 else low
                i += 1
            elif nxt == _SUB:
                subtype = low - 256 if low > 127 else low
                i += 1
            elif nxt == _CHN:
                chan = low
                i += 1
            else:  # _AUX
                aux_len = low
                n_words = (aux_len + 1) // 2
                if i + n_words >= n:
                    raise AnnotationError("aux string truncated")
                aux_bytes = words[i + 1 : i + 1 + n_words].view("<u1").tobytes()[:aux_len]
                aux = aux_bytes.decode("latin-1").rstrip("\x00")
                i += 1 + n_words

        out.append(
            Annotation(
                sample=t,
                code=code,
                symbol=ANNOTATION_SYMBOLS.get(code, f"[{code}]"),
                subtype=subtype,
                chan=chan,
                num=num,
                aux=aux,
            )
        )

    if not terminated:
        raise AnnotationError("unterminated annotation stream")
    return out


def apply_adc_calibration(raw: np.ndarray, header: RecordHeader) -> SignalMatrix:
    """Convert adu counts to mV: ``(adu - baseline) / gain`` per signal."""
    raw = np.asarray(raw)
    if raw.shape != (header.n_signals, header.n_samples):
        raise ValueError(
            f"signal matrix shape {raw.shape} does not match header "
            f"({header.n_signals} signals x {header.n_samples} samples)"
        )
    baselines = np.array([s.adc_baseline for s in header.signals], dtype=np.float64)
    gains = np.array([s.adc_gain for s in header.signals], dtype=np.float64)
    mv = (raw.astype(np.float64) - baselines[:, None]) / gains[:, None]
    return SignalMatrix(samples=mv, lead_names=header.lead_names)


def select_study_subset(headers: list[RecordHeader]) -> list[str]:
    """Record ids whose first lead is MLII and second is V1, ascending."""
    keep = [
        h.record_id
        for h in headers
        if h.n_signals >= 2 and h.lead_names[0] == "MLII" and h.lead_names[1] == "V1"
    ]
    return sorted(keep)


def read_record(cache_dir: str | Path, record_id: str) -> tuple[RecordHeader, SignalMatrix, list[Annotation]]:
    """Load and calibrate one cached record (``.hea`` + ``.dat`` + ``.atr``)."""
    cache_dir = Path(cache_dir)
    header = parse_header((cache_dir / f"{record_id}.hea").read_bytes())
    raw = decode_format212(
        (cache_dir / f"{record_id}.dat").read_bytes(), header.n_signals, header.n_samples
    )
    signals = apply_adc_calibration(raw, header)
    annotations = decode_annotations((cache_dir / f"{record_id}.atr").read_bytes())
    return header, signals, annotations
