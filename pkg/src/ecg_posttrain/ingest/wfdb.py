"""Minimal WFDB reader/writer: text headers and format-16 sample files."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_GAIN = 200.0
MISSING_ADC = -32768
SUPPORTED_FORMATS = (16,)

# gain[(baseline)][/units]
_GAIN_RE = re.compile(
    r"^(?P<gain>[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)?"
    r"(?:\((?P<baseline>[-+]?\d+)\))?"
    r"(?:/(?P<units>\S+))?$"
)
_INT_RE = re.compile(r"^[-+]?\d+$")


class WfdbFormatError(ValueError):
    """Raised for malformed or unsupported WFDB input."""


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    storage_format: int
    gain: float = DEFAULT_GAIN
    baseline: int = 0
    unit_label: str = "mV"
    signal_name: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: tuple[SignalSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.n_signals != len(self.signals):
            raise WfdbFormatError(
                f"header declares {self.n_signals} signals but lists {len(self.signals)}"
            )
        for sig in self.signals:
            if not sig.gain > 0:
                raise WfdbFormatError(f"signal {sig.signal_name!r}: gain must be positive")


@dataclass(frozen=True)
class EcgRecord:
    header: RecordHeader
    samples: np.ndarray  # [n_signals, n_samples] float, mV
    missing_mask: np.ndarray  # [n_signals, n_samples] bool

    @property
    def sampling_rate(self) -> float:
        return self.header.sampling_rate


def _parse_signal_line(tokens: list[str], lineno: int) -> SignalSpec:
    file_name = tokens[0]
    if len(tokens) < 2:
        raise WfdbFormatError(f"line {lineno}: signal line missing format field")
    fmt_tok = tokens[1]
    m = re.match(r"^(\d+)(?:x\d+)?(?::\d+)?(\+\d+)?$", fmt_tok)
    if m is None:
        raise WfdbFormatError(f"line {lineno}: bad format field {fmt_tok!r}")
    if m.group(2) and int(m.group(2)[1:]) != 0:
        raise WfdbFormatError(f"line {lineno}: byte offsets are not supported")
    storage_format = int(m.group(1))

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    rest = tokens[2:]
    if rest:
        gm = _GAIN_RE.match(rest[0])
        if gm is None or not any(gm.groupdict().values()):
            raise WfdbFormatError(f"line {lineno}: bad gain field {rest[0]!r}")
        if gm.group("gain") is not None and float(gm.group("gain")) != 0:
            gain = float(gm.group("gain"))
        if gm.group("baseline") is not None:
            baseline = int(gm.group("baseline"))
        if gm.group("units"):
            units = gm.group("units")
        rest = rest[1:]

    # adc_resolution, adc_zero, initial_value, checksum, block_size
    numeric: list[int] = []
    while rest and len(numeric) < 5 and _INT_RE.match(rest[0]):
        numeric.append(int(rest[0]))
        rest = rest[1:]
    if baseline is None:
        baseline = numeric[1] if len(numeric) > 1 else 0
    if not gain > 0:
        raise WfdbFormatError(f"line {lineno}: gain must be positive")
    return SignalSpec(
        file_name=file_name,
        storage_format=storage_format,
        gain=gain,
        baseline=baseline,
        unit_label=units,
        signal_name=" ".join(rest),
    )


def parse_wfdb_header(text: str) -> RecordHeader:
    """Parse the contents of a ``.hea`` file.

    Missing gain falls back to 200 ADC units per mV and missing baseline to
    the ADC zero (itself 0 when absent), following WFDB conventions.
    """
    lines = [
        (i, ln.strip())
        for i, ln in enumerate(text.splitlines(), start=1)
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise WfdbFormatError("line 1: empty header")
    lineno, first = lines[0]
    tokens = first.split()
    if len(tokens) < 2:
        raise WfdbFormatError(f"line {lineno}: record line needs name and signal count")
    name = tokens[0]
    if "/" in name:
        raise WfdbFormatError(f"line {lineno}: multi-segment records are not supported")
    try:
        n_signals = int(tokens[1])
        fs = float(tokens[2].split("/")[0]) if len(tokens) > 2 else 250.0
        n_samples = int(tokens[3]) if len(tokens) > 3 else 0
    except ValueError as exc:
        raise WfdbFormatError(f"line {lineno}: malformed record line: {exc}") from None
    if n_signals <= 0:
        raise WfdbFormatError(f"line {lineno}: non-positive signal count {n_signals}")
    if not fs > 0:
        raise WfdbFormatError(f"line {lineno}: non-positive sampling frequency {fs}")
    if n_samples <= 0:
        raise WfdbFormatError(f"line {lineno}: non-positive sample count {n_samples}")

    sig_lines = lines[1:]
    if len(sig_lines) != n_signals:
        at = sig_lines[-1][0] if sig_lines else lineno
        raise WfdbFormatError(
            f"line {at}: expected {n_signals} signal lines, found {len(sig_lines)}"
        )
    signals = tuple(_parse_signal_line(ln.split(), i) for i, ln in sig_lines)
    return RecordHeader(name, n_signals, fs, n_samples, signals)


def decode_format16(data: bytes, header: RecordHeader) -> EcgRecord:
    """Decode interleaved little-endian int16 samples into mV.

    The ADC value -32768 marks a missing sample; it is flagged in the mask and
    imputed as 0.0 mV.
    """
    for sig in header.signals:
        if sig.storage_format not in SUPPORTED_FORMATS:
            raise WfdbFormatError(
                f"unsupported format {sig.storage_format} for signal {sig.signal_name!r}"
            )
    expected = 2 * header.n_signals * header.n_samples
    if len(data) != expected:
        raise WfdbFormatError(f"expected {expected} bytes, got {len(data)}")
    adc = np.frombuffer(data, dtype="<i2").reshape(header.n_samples, header.n_signals).T
    missing = adc == MISSING_ADC
    gain = np.array([s.gain for s in header.signals], dtype=np.float64)[:, None]
    base = np.array([s.baseline for s in header.signals], dtype=np.float64)[:, None]
    samples = (adc.astype(np.float64) - base) / gain
    samples[missing] = 0.0
    return EcgRecord(header, samples, missing)


def encode_format16(adc: np.ndarray) -> bytes:
    """Inverse of the byte layout used by :func:`decode_format16` (ADC integers in)."""
    adc = np.asarray(adc)
    if adc.ndim != 2:
        raise ValueError("adc must be [n_signals, n_samples]")
    if adc.min(initial=0) < -32768 or adc.max(initial=0) > 32767:
        raise ValueError("ADC values out of int16 range")
    return np.ascontiguousarray(adc.T).astype("<i2").tobytes()


def format_header(header: RecordHeader) -> str:
    lines = [f"{header.record_name} {header.n_signals} {header.sampling_rate:g} {header.n_samples}"]
    for s in header.signals:
        lines.append(
            f"{s.file_name} {s.storage_format} {s.gain:g}({s.baseline})/{s.unit_label} "
            f"16 0 0 0 0 {s.signal_name}"
        )
    return "\n".join(lines) + "\n"


def read_record(path: str | Path) -> EcgRecord:
    """Read ``<path>.hea`` and its format-16 sample file."""
    path = Path(path)
    hea = path.with_name(path.name + ".hea") if path.suffix != ".hea" else path
    header = parse_wfdb_header(hea.read_text())
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise WfdbFormatError(f"{hea}: signals spread over several files are not supported")
    data = (hea.parent / files.pop()).read_bytes()
    return decode_format16(data, header)


def write_record(directory: str | Path, name: str, adc: np.ndarray, fs: float,
                 gain: float = 1000.0, signal_names: list[str] | None = None) -> Path:
    """Write a format-16 record; used to build synthetic fixtures."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_sig, n_samp = adc.shape
    names = signal_names or [f"S{i}" for i in range(n_sig)]
    header = RecordHeader(
        name, n_sig, fs, n_samp,
        tuple(SignalSpec(f"{name}.dat", 16, gain, 0, "mV", nm) for nm in names),
    )
    (directory / f"{name}.dat").write_bytes(encode_format16(adc))
    (directory / f"{name}.hea").write_text(format_header(header))
    return directory / name
