"""Seeded synthetic EEG corpora with injected ictal episodes.

Layout written by :func:`generate`::

    out/
      annotations.csv
      P01/P01_01.edf, P01/P01_02.edf, ...
      P02/...
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .edf_io import SeizureAnnotation, format_annotations, make_recording, write_edf

# bipolar montage labels in the style of the public scalp-EEG corpora
BIPOLAR_LABELS = (
    "FP1-F7", "F7-T7", "T7-P7", "P7-O1", "FP1-F3", "F3-C3", "C3-P3", "P3-O1",
    "FP2-F4", "F4-C4", "C4-P4", "P4-O2", "FP2-F8", "F8-T8", "T8-P8", "P8-O2",
    "FZ-CZ", "CZ-PZ", "P7-T7", "T7-FT9", "FT9-FT10", "FT10-T8",
)
EXTRA_LABEL = "ECG"


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 4
    minutes: float = 30.0  # per patient
    files_per_patient: int = 3
    seizures_per_file: int = 1
    seizure_s: tuple[float, float] = (30.0, 60.0)
    channels: int = 18
    fs_hz: float = 256.0
    gain: tuple[float, float] = (2.0, 5.0)
    rhythm_hz: tuple[float, float] = (3.0, 8.0)
    noise_uv: float = 30.0
    focal_floor: float = 0.5  # weakest channel's share of the ictal effect
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_patients < 1 or self.files_per_patient < 1:
            raise ValueError("need at least one patient and one file")
        if not 16 <= self.channels <= len(BIPOLAR_LABELS):
            raise ValueError(f"channels must be in [16, {len(BIPOLAR_LABELS)}]")
        if not 1 <= self.gain[0] <= self.gain[1]:
            raise ValueError("gain range must satisfy 1 <= lo <= hi")
        if not 0 < self.rhythm_hz[0] <= self.rhythm_hz[1] < self.fs_hz / 2:
            raise ValueError("rhythm band must lie below Nyquist")
        if not 0 < self.seizure_s[0] <= self.seizure_s[1]:
            raise ValueError("seizure duration range must be positive")
        if not 0 <= self.focal_floor <= 1:
            raise ValueError("focal_floor must be in [0, 1]")
        need = self.seizures_per_file * (self.seizure_s[1] + 20.0) + 20.0
        if self.seizures_per_file and self.file_seconds < need:
            raise ValueError("files are too short for the requested seizures")
        if not float(self.fs_hz).is_integer():
            raise ValueError("fs_hz must be a whole number (1 s EDF records)")

    @property
    def file_seconds(self) -> float:
        return float(int(self.minutes * 60 / self.files_per_patient))

    @classmethod
    def from_dict(cls, d) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown synth keys: {sorted(set(d) - known)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def patient_id(index: int) -> str:
    return f"P{index + 1:02d}"


def pink_noise(rng: np.random.Generator, n_channels: int, n: int, fs_hz: float) -> np.ndarray:
    """Unit-variance 1/f-shaped noise, (C, n), with the spectrum rolled off below 0.5 Hz."""
    white = rng.standard_normal((n_channels, n))
    spec = np.fft.rfft(white, axis=1)
    f = np.fft.rfftfreq(n, 1.0 / fs_hz)
    shape = 1.0 / np.sqrt(np.maximum(f, 0.5))
    shape[0] = 0.0
    x = np.fft.irfft(spec * shape, n=n, axis=1)
    return x / x.std(axis=1, keepdims=True)


def _place_seizures(rng, cfg: SynthConfig, file_s: float) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    if cfg.seizures_per_file == 0:
        return out
    slot = file_s / cfg.seizures_per_file
    for k in range(cfg.seizures_per_file):
        dur = float(np.round(rng.uniform(*cfg.seizure_s)))
        lo, hi = k * slot + 10.0, (k + 1) * slot - dur - 10.0
        start = float(np.round(rng.uniform(lo, max(lo, hi))))
        out.append((start, start + dur))
    return out


def synth_file(rng: np.random.Generator, cfg: SynthConfig, labels: list[str],
               seizures: list[tuple[float, float]]) -> np.ndarray:
    """Physical signals (C, S) in microvolts for one file."""
    fs = cfg.fs_hz
    n = int(cfg.file_seconds * fs)
    c = len(labels)
    x = cfg.noise_uv * pink_noise(rng, c, n, fs)
    # mild per-channel background rhythm so channels are not identical in character
    t = np.arange(n) / fs
    alpha_f = rng.uniform(8.5, 11.5, size=(c, 1))
    x += 0.3 * cfg.noise_uv * np.sin(2 * np.pi * alpha_f * t + rng.uniform(0, 2 * np.pi, (c, 1)))
    for start, end in seizures:
        i0, i1 = int(start * fs), int(end * fs)
        m = i1 - i0
        weight = rng.uniform(cfg.focal_floor, 1.0, size=(c, 1))
        gain = rng.uniform(*cfg.gain)
        f0 = rng.uniform(*cfg.rhythm_hz)
        # slow frequency drift across the episode, as in evolving ictal rhythms
        f_inst = f0 * (1.0 - 0.2 * np.linspace(0.0, 1.0, m))
        phase = 2 * np.pi * np.cumsum(f_inst) / fs
        rhythm = np.sin(phase[None, :] + rng.uniform(0, 2 * np.pi, (c, 1)))
        ramp = np.minimum(1.0, np.minimum(np.arange(m) + 1, m - np.arange(m)) / fs)
        seg = x[:, i0:i1]
        amp = 1.0 + (gain - 1.0) * weight * ramp
        x[:, i0:i1] = seg * amp + cfg.noise_uv * gain * weight * ramp * rhythm
    return x


def generate(cfg: SynthConfig, out: str | Path) -> list[SeizureAnnotation]:
    """Write the corpus under ``out`` and return its annotations."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    annotations: list[SeizureAnnotation] = []
    for p, child in enumerate(children):
        rng = np.random.default_rng(child)
        pid = patient_id(p)
        labels = list(BIPOLAR_LABELS[: cfg.channels])
        if p % 2 == 1:
            labels.append(EXTRA_LABEL)  # not shared by every patient
        pdir = out / pid
        pdir.mkdir(exist_ok=True)
        for f in range(cfg.files_per_patient):
            file_id = f"{pid}_{f + 1:02d}"
            seizures = _place_seizures(rng, cfg, cfg.file_seconds)
            x = synth_file(rng, cfg, labels, seizures)
            rec = make_recording(dict(zip(labels, x)), cfg.fs_hz, patient_id=pid,
                                 recording_id=file_id)
            (pdir / f"{file_id}.edf").write_bytes(write_edf(rec))
            annotations += [SeizureAnnotation(file_id, s, e) for s, e in seizures]
    (out / "annotations.csv").write_text(format_annotations(annotations))
    (out / "synth.json").write_text(json.dumps(asdict(cfg), indent=1) + "\n")
    return annotations
