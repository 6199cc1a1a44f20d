"""Reading and writing EDF 1.0 recordings and seizure annotation sidecars.

The reader decodes the whole file eagerly. Sample payloads are 16-bit
little-endian two's complement integers stored record by record, each record
holding ``samples_per_record`` values for every signal in turn.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_FIELDS = (
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration_s", 8),
    ("n_signals", 4),
)

SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dim", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


class EdfError(ValueError):
    """Base class for EDF decoding and encoding failures."""


class TruncatedFile(EdfError):
    pass


class MalformedField(EdfError):
    pass


class DegenerateScale(EdfError):
    pass


class FieldOverflow(EdfError):
    pass


class ValueOutOfPhysicalRange(EdfError):
    pass


class AnnotationError(ValueError):
    pass


class NegativeDuration(AnnotationError):
    pass


class UnparsableLine(AnnotationError):
    pass


class NonAsciiWarning(UserWarning):
    pass


@dataclass
class EdfHeader:
    version: str = "0"
    patient_id: str = ""
    recording_id: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    header_bytes: int = 256
    n_records: int = 0
    record_duration_s: float = 1.0
    n_signals: int = 0
    reserved: str = ""

    def __post_init__(self) -> None:
        if self.header_bytes != 256 + 256 * self.n_signals:
            raise MalformedField(
                f"header_bytes={self.header_bytes} does not match "
                f"256 + 256*{self.n_signals}"
            )
        if self.n_records < 0:
            raise MalformedField(f"n_records must be >= 0, got {self.n_records}")
        if not self.record_duration_s > 0:
            raise MalformedField(
                f"record_duration_s must be > 0, got {self.record_duration_s}"
            )


@dataclass
class EdfSignalSpec:
    label: str
    physical_dim: str = "uV"
    physical_min: float = -1.0
    physical_max: float = 1.0
    digital_min: int = -32768
    digital_max: int = 32767
    samples_per_record: int = 256
    transducer: str = ""
    prefilter: str = ""
    reserved: str = ""

    def __post_init__(self) -> None:
        if self.digital_min == self.digital_max:
            raise DegenerateScale(f"{self.label!r}: digital_min == digital_max")
        if self.digital_min > self.digital_max:
            raise MalformedField(f"{self.label!r}: digital_min > digital_max")
        if self.physical_min == self.physical_max:
            raise DegenerateScale(f"{self.label!r}: physical_min == physical_max")
        if self.samples_per_record <= 0:
            raise MalformedField(f"{self.label!r}: samples_per_record must be > 0")

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (
            self.digital_max - self.digital_min
        )

    def to_physical(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.float64)
        return (codes - self.digital_min) * self.gain + self.physical_min

    def to_digital(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        lo, hi = sorted((self.physical_min, self.physical_max))
        # half a digital step of slack so decoded values always re-encode
        slack = abs(self.gain) * 0.5
        if values.size and (values.min() < lo - slack or values.max() > hi + slack):
            raise ValueOutOfPhysicalRange(
                f"{self.label!r}: samples outside [{lo}, {hi}]"
            )
        codes = np.rint((values - self.physical_min) / self.gain + self.digital_min)
        return np.clip(codes, self.digital_min, self.digital_max).astype(np.int64)


@dataclass
class EdfRecording:
    header: EdfHeader
    specs: list[EdfSignalSpec] = field(default_factory=list)
    samples: list[np.ndarray] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.specs]

    @property
    def sample_rate_hz(self) -> list[float]:
        return [s.samples_per_record / self.header.record_duration_s for s in self.specs]

    def signal(self, label: str) -> np.ndarray:
        return self.samples[self.labels.index(label)]


@dataclass(frozen=True, order=True)
class SeizureAnnotation:
    file_id: str
    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        if self.start_s < 0:
            raise NegativeDuration(f"{self.file_id}: start_s < 0")
        if self.end_s <= self.start_s:
            raise NegativeDuration(
                f"{self.file_id}: end_s ({self.end_s}) <= start_s ({self.start_s})"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


# --------------------------------------------------------------------------
# field codecs


def _decode_text(raw: bytes, name: str) -> str:
    try:
        return raw.decode("ascii").rstrip(" \x00")
    except UnicodeDecodeError:
        warnings.warn(
            f"non-ASCII bytes in EDF field {name!r} replaced with '?'",
            NonAsciiWarning,
            stacklevel=3,
        )
        text = "".join(chr(b) if b < 128 else "?" for b in raw)
        return text.rstrip(" \x00")


def _decode_int(raw: bytes, name: str) -> int:
    text = _decode_text(raw, name).strip()
    try:
        return int(text)
    except ValueError:
        try:
            value = float(text)
        except ValueError:
            raise MalformedField(f"field {name!r}: {text!r} is not numeric") from None
        if not value.is_integer():
            raise MalformedField(f"field {name!r}: {text!r} is not an integer")
        return int(value)


def _decode_float(raw: bytes, name: str) -> float:
    text = _decode_text(raw, name).strip()
    try:
        value = float(text.replace(",", "."))
    except ValueError:
        raise MalformedField(f"field {name!r}: {text!r} is not numeric") from None
    if not math.isfinite(value):
        raise MalformedField(f"field {name!r}: {text!r} is not finite")
    return value


def _encode_text(value: str, width: int, name: str) -> bytes:
    try:
        raw = value.encode("ascii")
    except UnicodeEncodeError:
        warnings.warn(
            f"non-ASCII characters in EDF field {name!r} replaced with '?'",
            NonAsciiWarning,
            stacklevel=3,
        )
        raw = value.encode("ascii", errors="replace")
    if len(raw) > width:
        raise FieldOverflow(f"field {name!r}: {value!r} exceeds {width} bytes")
    return raw.ljust(width, b" ")


def format_number(value: float, width: int = 8) -> str:
    """Most precise ``%g`` rendering of ``value`` that fits ``width`` characters."""
    if float(value).is_integer() and abs(value) < 10 ** (width - 1):
        text = str(int(value))
        if len(text) <= width:
            return text
    for precision in range(width, 0, -1):
        text = format(float(value), f".{precision}g")
        if len(text) <= width:
            return text
    raise FieldOverflow(f"{value!r} cannot be written in {width} characters")


def _encode_number(value: float, width: int, name: str) -> bytes:
    try:
        text = format_number(value, width)
    except FieldOverflow:
        raise FieldOverflow(f"field {name!r}: {value!r} exceeds {width} bytes") from None
    return _encode_text(text, width, name)


# --------------------------------------------------------------------------
# EDF


def parse_header(data: bytes, file_size: int | None = None) -> tuple[EdfHeader, list[EdfSignalSpec]]:
    """Decode the header block only.

    ``file_size`` (defaults to ``len(data)``) resolves an unknown record count.
    """
    data = memoryview(bytes(data))
    file_size = len(data) if file_size is None else file_size
    if len(data) < 256:
        raise TruncatedFile(f"file has {len(data)} bytes, fixed header needs 256")

    raw: dict[str, bytes] = {}
    offset = 0
    for name, width in HEADER_FIELDS:
        raw[name] = bytes(data[offset : offset + width])
        offset += width

    n_signals = _decode_int(raw["n_signals"], "n_signals")
    header_bytes = _decode_int(raw["header_bytes"], "header_bytes")
    if n_signals < 0:
        raise MalformedField(f"n_signals must be >= 0, got {n_signals}")
    if len(data) < 256 + 256 * n_signals:
        raise TruncatedFile(
            f"file has {len(data)} bytes, header for {n_signals} signals needs "
            f"{256 + 256 * n_signals}"
        )

    columns: dict[str, list[bytes]] = {}
    for name, width in SIGNAL_FIELDS:
        columns[name] = [
            bytes(data[offset + i * width : offset + (i + 1) * width])
            for i in range(n_signals)
        ]
        offset += width * n_signals

    specs = [
        EdfSignalSpec(
            label=_decode_text(columns["label"][i], "label"),
            transducer=_decode_text(columns["transducer"][i], "transducer"),
            physical_dim=_decode_text(columns["physical_dim"][i], "physical_dim"),
            physical_min=_decode_float(columns["physical_min"][i], "physical_min"),
            physical_max=_decode_float(columns["physical_max"][i], "physical_max"),
            digital_min=_decode_int(columns["digital_min"][i], "digital_min"),
            digital_max=_decode_int(columns["digital_max"][i], "digital_max"),
            prefilter=_decode_text(columns["prefilter"][i], "prefilter"),
            samples_per_record=_decode_int(
                columns["samples_per_record"][i], "samples_per_record"
            ),
            reserved=_decode_text(columns["reserved"][i], "reserved"),
        )
        for i in range(n_signals)
    ]

    record_len = sum(s.samples_per_record for s in specs)
    n_records = _decode_int(raw["n_records"], "n_records")
    payload = file_size - header_bytes
    if n_records == -1:
        # unknown length (recording interrupted); keep whole records only
        n_records = payload // (2 * record_len) if record_len else 0
    header = EdfHeader(
        version=_decode_text(raw["version"], "version"),
        patient_id=_decode_text(raw["patient_id"], "patient_id"),
        recording_id=_decode_text(raw["recording_id"], "recording_id"),
        start_date=_decode_text(raw["start_date"], "start_date"),
        start_time=_decode_text(raw["start_time"], "start_time"),
        header_bytes=header_bytes,
        n_records=n_records,
        record_duration_s=_decode_float(raw["record_duration_s"], "record_duration_s"),
        n_signals=n_signals,
        reserved=_decode_text(raw["reserved"], "reserved"),
    )
    return header, specs


def parse_edf(data: bytes) -> EdfRecording:
    """Decode a complete EDF 1.0 file held in memory."""
    data = memoryview(bytes(data))
    header, specs = parse_header(data)
    header_bytes, n_records = header.header_bytes, header.n_records
    record_len = sum(s.samples_per_record for s in specs)
    payload = len(data) - header_bytes
    needed = 2 * n_records * record_len
    if payload < needed:
        raise TruncatedFile(
            f"payload has {max(payload, 0)} bytes, header promises {needed}"
        )
    codes = np.frombuffer(
        data[header_bytes : header_bytes + needed], dtype="<i2"
    ).reshape(n_records, record_len)

    samples = []
    start = 0
    for spec in specs:
        stop = start + spec.samples_per_record
        samples.append(spec.to_physical(codes[:, start:stop].reshape(-1)))
        start = stop
    return EdfRecording(header=header, specs=specs, samples=samples)


def write_edf(rec: EdfRecording) -> bytes:
    """Encode ``rec`` as EDF 1.0 bytes; samples are rounded to digital codes."""
    header = rec.header
    specs = rec.specs
    if len(specs) != header.n_signals or len(rec.samples) != header.n_signals:
        raise MalformedField(
            f"header declares {header.n_signals} signals, recording holds "
            f"{len(specs)} specs and {len(rec.samples)} sample arrays"
        )
    for spec, values in zip(specs, rec.samples):
        expected = header.n_records * spec.samples_per_record
        if len(values) != expected:
            raise MalformedField(
                f"{spec.label!r}: {len(values)} samples, header promises {expected}"
            )
        if spec.digital_min < -32768 or spec.digital_max > 32767:
            raise FieldOverflow(f"{spec.label!r}: digital range exceeds 16 bits")

    out = io.BytesIO()
    values = {
        "version": header.version,
        "patient_id": header.patient_id,
        "recording_id": header.recording_id,
        "start_date": header.start_date,
        "start_time": header.start_time,
        "reserved": header.reserved,
    }
    for name, width in HEADER_FIELDS:
        if name in values:
            out.write(_encode_text(values[name], width, name))
        elif name == "header_bytes":
            out.write(_encode_number(256 + 256 * header.n_signals, width, name))
        else:
            out.write(_encode_number(getattr(header, name), width, name))

    for name, width in SIGNAL_FIELDS:
        for spec in specs:
            value = getattr(spec, name)
            if isinstance(value, str):
                out.write(_encode_text(value, width, name))
            else:
                out.write(_encode_number(value, width, name))

    if header.n_records and specs:
        blocks = [
            spec.to_digital(values).reshape(header.n_records, spec.samples_per_record)
            for spec, values in zip(specs, rec.samples)
        ]
        out.write(np.concatenate(blocks, axis=1).astype("<i2").tobytes())
    return out.getvalue()


def read_header(path: str | Path) -> tuple[EdfHeader, list[EdfSignalSpec]]:
    """Header of an EDF file on disk without reading the samples."""
    path = Path(path)
    size = path.stat().st_size
    with path.open("rb") as fh:
        head = fh.read(256)
        if len(head) < 256:
            raise TruncatedFile(f"file has {len(head)} bytes, fixed header needs 256")
        n_signals = _decode_int(head[252:256], "n_signals")
        head += fh.read(256 * max(n_signals, 0))
    return parse_header(head, size)


def read_edf(path: str | Path) -> EdfRecording:
    return parse_edf(Path(path).read_bytes())


def save_edf(rec: EdfRecording, path: str | Path) -> None:
    Path(path).write_bytes(write_edf(rec))


def make_recording(
    signals: dict[str, np.ndarray],
    fs_hz: float,
    *,
    record_duration_s: float = 1.0,
    physical_dim: str = "uV",
    patient_id: str = "",
    recording_id: str = "",
    headroom: float = 1.0,
) -> EdfRecording:
    """Wrap equal-length physical signals in a recording with fitted scales.

    Physical ranges are symmetric, rounded outward so they print in 8 chars.
    Trailing samples that do not fill a whole record are dropped.
    """
    spr = fs_hz * record_duration_s
    if not float(spr).is_integer():
        raise MalformedField(f"fs_hz * record_duration_s = {spr} is not integral")
    spr = int(spr)
    lengths = {len(v) for v in signals.values()}
    if len(lengths) > 1:
        raise MalformedField("all signals must have the same length")
    n_records = (lengths.pop() // spr) if signals else 0

    specs, samples = [], []
    for label, values in signals.items():
        values = np.asarray(values, dtype=np.float64)[: n_records * spr]
        peak = float(np.max(np.abs(values))) if values.size else 1.0
        peak = _round_up_printable(max(peak * headroom, 1e-6))
        specs.append(
            EdfSignalSpec(
                label=label,
                physical_dim=physical_dim,
                physical_min=-peak,
                physical_max=peak,
                samples_per_record=spr,
            )
        )
        samples.append(values)
    header = EdfHeader(
        patient_id=patient_id,
        recording_id=recording_id,
        header_bytes=256 + 256 * len(specs),
        n_records=n_records,
        record_duration_s=record_duration_s,
        n_signals=len(specs),
    )
    return EdfRecording(header=header, specs=specs, samples=samples)


def _round_up_printable(value: float, width: int = 8) -> float:
    """Smallest number >= value, with at most 3 significant digits, whose
    negative also survives a ``width``-character header field unchanged."""
    for digits in (3, 2, 1):
        step = 10.0 ** (math.floor(math.log10(value)) - digits + 1)
        rounded = float(format(math.ceil(value / step) * step, f".{digits}g"))
        if rounded < value:
            rounded = float(format(rounded + step, f".{digits}g"))
        if float(format_number(-rounded, width)) == -rounded:
            return rounded
    raise FieldOverflow(f"no {width}-character physical range covers {value!r}")


# --------------------------------------------------------------------------
# annotations


def parse_annotations(text: str) -> list[SeizureAnnotation]:
    """Parse ``file_id,start_s,end_s`` lines; overlapping intervals are merged."""
    found: list[SeizureAnnotation] = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip():
            continue
        if row[0].lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in row]
        if cells == ["file_id", "start_s", "end_s"]:
            continue
        if len(cells) != 3:
            raise UnparsableLine(f"line {lineno}: expected 3 fields, got {len(cells)}")
        try:
            start, end = float(cells[1]), float(cells[2])
        except ValueError:
            raise UnparsableLine(f"line {lineno}: non-numeric time in {row!r}") from None
        if not cells[0]:
            raise UnparsableLine(f"line {lineno}: empty file_id")
        if end <= start:
            raise NegativeDuration(f"line {lineno}: end_s <= start_s")
        found.append(SeizureAnnotation(cells[0], start, end))
    return merge_annotations(found)


def merge_annotations(items: list[SeizureAnnotation]) -> list[SeizureAnnotation]:
    merged: list[SeizureAnnotation] = []
    for ann in sorted(items):
        last = merged[-1] if merged else None
        if last is not None and last.file_id == ann.file_id and ann.start_s <= last.end_s:
            merged[-1] = SeizureAnnotation(
                last.file_id, last.start_s, max(last.end_s, ann.end_s)
            )
        else:
            merged.append(ann)
    return merged


def format_annotations(items: list[SeizureAnnotation]) -> str:
    lines = ["# file_id,start_s,end_s"]
    lines += [f"{a.file_id},{a.start_s:g},{a.end_s:g}" for a in sorted(items)]
    return "\n".join(lines) + "\n"


def read_annotations(path: str | Path) -> list[SeizureAnnotation]:
    return parse_annotations(Path(path).read_text())
