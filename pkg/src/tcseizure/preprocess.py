"""Turn raw recordings into normalized, labeled half-second fragments.

Per recording: resample to 256 Hz, band-pass 0.1-50 Hz (causal), cut into
non-overlapping 128-sample fragments and label each by its midpoint. Per
patient: reserve one seizure-bearing file as the test set, downsample the
remaining negatives to 3x the positives, then split 40:60 into a pooled
development set and a patient-specific retraining set, each 80:20 into
train/validation.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .edf_io import EdfRecording, SeizureAnnotation

log = logging.getLogger(__name__)

FRAGMENT_SAMPLES = 128
N_CHANNELS = 16
TARGET_FS = 256.0
SPLIT_TAGS = ("dev-train", "dev-val", "retrain-train", "retrain-val", "test")


class PreprocessError(ValueError):
    pass


class EmptySignal(PreprocessError):
    pass


class InvalidBand(PreprocessError):
    pass


class TooFewChannels(PreprocessError):
    pass


class AllZeroData(PreprocessError):
    pass


class NoSeizureFile(PreprocessError):
    pass


@dataclass
class FragmentSet:
    data: np.ndarray  # (N, C, T)
    labels: np.ndarray  # (N,) int8, 1 = ictal
    patient_id: str
    split_tag: str
    ids: np.ndarray | None = None  # "<file_id>:<fragment index>" per row

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.data.ndim != 3:
            raise PreprocessError(f"data must be (N, C, T), got {self.data.shape}")
        if self.data.shape[2] != FRAGMENT_SAMPLES:
            raise PreprocessError(f"fragments must have {FRAGMENT_SAMPLES} samples")
        if len(self.labels) != len(self.data):
            raise PreprocessError("labels and data differ in length")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise PreprocessError("labels must be 0 or 1")
        if self.split_tag not in SPLIT_TAGS:
            raise PreprocessError(f"unknown split tag {self.split_tag!r}")
        if self.ids is None:
            self.ids = np.array([f"{self.patient_id}:{i}" for i in range(len(self))])
        else:
            self.ids = np.asarray(self.ids, dtype=str)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive

    def scaled(self, factor: float) -> FragmentSet:
        return FragmentSet(
            self.data / factor, self.labels, self.patient_id, self.split_tag, self.ids
        )

    def select_channels(self, index: Sequence[int]) -> FragmentSet:
        return FragmentSet(
            self.data[:, list(index), :],
            self.labels,
            self.patient_id,
            self.split_tag,
            self.ids,
        )


@dataclass
class ChannelSelection:
    kept_channels: list[str]
    variance_scores: dict[str, float]

    def indices(self, labels: Sequence[str]) -> list[int]:
        return [list(labels).index(c) for c in self.kept_channels]


@dataclass(frozen=True)
class SplitPlan:
    dev_fraction: float = 0.40
    retrain_fraction: float = 0.60
    train_fraction: float = 0.80
    neg_pos_ratio: int = 3

    def __post_init__(self) -> None:
        if abs(self.dev_fraction + self.retrain_fraction - 1.0) > 1e-12:
            raise PreprocessError("dev and retrain fractions must sum to 1")
        if not 0 < self.train_fraction < 1:
            raise PreprocessError("train_fraction must be in (0, 1)")


# --------------------------------------------------------------------------
# signal-level steps


def resample(signal: np.ndarray, from_hz: float, to_hz: float = TARGET_FS) -> np.ndarray:
    """Rational polyphase resampling with a Kaiser-windowed sinc low-pass."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise EmptySignal("cannot resample an empty signal")
    if from_hz <= 0 or to_hz <= 0:
        raise PreprocessError("sample rates must be positive")
    if from_hz == to_hz:
        return x.copy()
    ratio = Fraction(to_hz / from_hz).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    y = sps.resample_poly(x, up, down, window=_antialias_fir(up, down), padtype="line")
    n_out = int(round(len(x) * to_hz / from_hz))
    if len(y) >= n_out:
        return y[:n_out]
    return np.concatenate([y, np.full(n_out - len(y), y[-1])])


def _antialias_fir(up: int, down: int, stop_db: float = 60.0) -> np.ndarray:
    # stopband starts exactly at the lower of the two Nyquist rates
    edge = 1.0 / max(up, down)
    numtaps, beta = sps.kaiserord(stop_db, 0.2 * edge)
    numtaps |= 1
    return sps.firwin(numtaps, 0.9 * edge, window=("kaiser", beta))


def design_bandpass(
    lo_hz: float = 0.1, hi_hz: float = 50.0, fs_hz: float = TARGET_FS, order: int = 10
) -> np.ndarray:
    if not 0 < lo_hz < hi_hz < fs_hz / 2:
        raise InvalidBand(f"need 0 < {lo_hz} < {hi_hz} < {fs_hz / 2}")
    return sps.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=fs_hz, output="sos")


def bandpass(
    signal: np.ndarray,
    lo_hz: float = 0.1,
    hi_hz: float = 50.0,
    fs_hz: float = TARGET_FS,
    order: int = 10,
) -> np.ndarray:
    """Causal Butterworth band-pass along the last axis (single forward pass)."""
    sos = design_bandpass(lo_hz, hi_hz, fs_hz, order)
    return sps.sosfilt(sos, np.asarray(signal, dtype=np.float64), axis=-1)


def fragment(
    rec: np.ndarray, fs_hz: float = TARGET_FS, frag_s: float = 0.5
) -> np.ndarray:
    """Cut a (C, S) matrix into (N, C, fs*frag_s) non-overlapping windows.

    The trailing remainder shorter than one window is dropped.
    """
    width = fs_hz * frag_s
    if not float(width).is_integer():
        raise PreprocessError(f"fs_hz * frag_s = {width} is not integral")
    width = int(width)
    rec = np.asarray(rec)
    if rec.ndim == 1:
        rec = rec[None, :]
    n = rec.shape[1] // width
    out = rec[:, : n * width].reshape(rec.shape[0], n, width)
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def fragment_labels(
    n_fragments: int,
    annotations: Sequence[SeizureAnnotation] | Sequence[tuple[float, float]],
    frag_s: float = 0.5,
) -> np.ndarray:
    """1 where the fragment midpoint falls inside an annotated interval."""
    mid = (np.arange(n_fragments) + 0.5) * frag_s
    labels = np.zeros(n_fragments, dtype=np.int8)
    for ann in annotations:
        start, end = (ann.start_s, ann.end_s) if hasattr(ann, "start_s") else ann
        labels[(mid >= start) & (mid < end)] = 1
    return labels


# --------------------------------------------------------------------------
# channels and normalization


def common_channels(label_sets: Sequence[Sequence[str]]) -> list[str]:
    """Labels present in every set, in the order of the first set."""
    if not label_sets:
        return []
    shared = set(label_sets[0]).intersection(*map(set, label_sets[1:]))
    seen: set[str] = set()
    out = []
    for label in label_sets[0]:
        if label in shared and label not in seen:
            out.append(label)
            seen.add(label)
    return out


def select_channels(
    ictal_data: np.ndarray | Sequence[np.ndarray],
    common_labels: Sequence[str],
    n_keep: int = N_CHANNELS,
) -> ChannelSelection:
    """Keep the ``n_keep`` channels with the highest variance in ictal data.

    ``ictal_data`` holds one sample sequence per label (or an (N, C, T)
    fragment array). Ties go to the lexicographically smaller label. Kept
    channels are listed in their original montage order.
    """
    if isinstance(ictal_data, np.ndarray) and ictal_data.ndim == 3:
        per_channel = [ictal_data[:, c, :].ravel() for c in range(ictal_data.shape[1])]
    else:
        per_channel = [np.asarray(x, dtype=np.float64).ravel() for x in ictal_data]
    if len(per_channel) != len(common_labels):
        raise PreprocessError("one sample sequence per channel label required")
    if len(common_labels) < n_keep:
        raise TooFewChannels(f"{len(common_labels)} common channels, need {n_keep}")
    scores = {
        label: float(np.var(x, dtype=np.float64)) if x.size else 0.0
        for label, x in zip(common_labels, per_channel)
    }
    ranked = sorted(common_labels, key=lambda c: (-scores[c], c))[:n_keep]
    keep = set(ranked)
    return ChannelSelection(
        kept_channels=[c for c in common_labels if c in keep], variance_scores=scores
    )


def normalize(
    sets: Mapping[str, FragmentSet],
) -> tuple[dict[str, FragmentSet], float]:
    """Divide every set by the largest absolute value found in any of them."""
    peak = 0.0
    for fs in sets.values():
        if fs.data.size:
            peak = max(peak, float(np.max(np.abs(fs.data))))
    if peak == 0.0:
        raise AllZeroData("every sample is zero; nothing to normalize by")
    return {name: fs.scaled(peak) for name, fs in sets.items()}, peak


# --------------------------------------------------------------------------
# splits


@dataclass
class LabeledFile:
    file_id: str
    labels: np.ndarray
    fragments: np.ndarray | None = None  # (N, C, T); None while only planning


@dataclass
class PatientPlan:
    test_file: str
    # (file_id, fragment index) pairs per subset
    retrain_train: list[tuple[str, int]] = field(default_factory=list)
    retrain_val: list[tuple[str, int]] = field(default_factory=list)
    dev: list[tuple[str, int]] = field(default_factory=list)


@dataclass
class SplitIndex:
    dev_train: list[tuple[str, str, int]]  # (patient, file_id, index)
    dev_val: list[tuple[str, str, int]]
    patients: dict[str, PatientPlan]


@dataclass
class PatientSplits:
    retrain_train: FragmentSet
    retrain_val: FragmentSet
    test: FragmentSet


@dataclass
class Splits:
    dev_train: FragmentSet
    dev_val: FragmentSet
    patients: dict[str, PatientSplits]

    def all_sets(self) -> dict[str, FragmentSet]:
        out = {"dev-train": self.dev_train, "dev-val": self.dev_val}
        for pid, ps in self.patients.items():
            out[f"{pid}/retrain-train"] = ps.retrain_train
            out[f"{pid}/retrain-val"] = ps.retrain_val
            out[f"{pid}/test"] = ps.test
        return out

    def replace_sets(self, sets: Mapping[str, FragmentSet]) -> Splits:
        return Splits(
            dev_train=sets["dev-train"],
            dev_val=sets["dev-val"],
            patients={
                pid: PatientSplits(
                    sets[f"{pid}/retrain-train"],
                    sets[f"{pid}/retrain-val"],
                    sets[f"{pid}/test"],
                )
                for pid in self.patients
            },
        )


def stratified_split(
    pos: np.ndarray, neg: np.ndarray, fraction: float
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Split already-shuffled positive/negative index arrays by ``fraction``.

    The negative cut follows the positive cut so the class ratio carries over
    to both parts (exactly, when negatives are an integer multiple).
    """
    n_pos = int(round(fraction * len(pos)))
    if len(pos):
        n_neg = int(round(len(neg) * n_pos / len(pos)))
    else:
        n_neg = int(round(fraction * len(neg)))
    return (pos[:n_pos], neg[:n_neg]), (pos[n_pos:], neg[n_neg:])


def plan_splits(
    files: Mapping[str, Sequence[LabeledFile]],
    plan: SplitPlan = SplitPlan(),
    seed: int = 0,
) -> SplitIndex:
    """Decide which fragment goes where, from labels alone."""
    root = np.random.SeedSequence(seed)
    patient_ids = sorted(files)
    children = root.spawn(len(patient_ids) + 1)
    patients: dict[str, PatientPlan] = {}
    dev_pos: list[tuple[str, str, int]] = []
    dev_neg: list[tuple[str, str, int]] = []

    for pid, child in zip(patient_ids, children):
        rng = np.random.default_rng(child)
        pfiles = sorted(files[pid], key=lambda f: f.file_id)
        seizure_files = [f.file_id for f in pfiles if np.any(f.labels == 1)]
        if not seizure_files:
            raise NoSeizureFile(f"patient {pid} has no file with a seizure")
        test_file = seizure_files[int(rng.integers(len(seizure_files)))]

        keys = [
            (f.file_id, i)
            for f in pfiles
            if f.file_id != test_file
            for i in range(len(f.labels))
        ]
        flat = np.concatenate(
            [f.labels for f in pfiles if f.file_id != test_file] or [np.zeros(0)]
        )
        pos = np.flatnonzero(flat == 1)
        neg = np.flatnonzero(flat == 0)
        n_neg_keep = min(len(neg), plan.neg_pos_ratio * len(pos))
        neg = rng.choice(neg, size=n_neg_keep, replace=False) if n_neg_keep else neg[:0]
        pos = rng.permutation(pos)
        neg = rng.permutation(neg)

        (dpos, dneg), (rpos, rneg) = stratified_split(pos, neg, plan.dev_fraction)
        (tpos, tneg), (vpos, vneg) = stratified_split(rpos, rneg, plan.train_fraction)
        pp = PatientPlan(test_file=test_file)
        pp.retrain_train = [keys[i] for i in np.concatenate([tpos, tneg])]
        pp.retrain_val = [keys[i] for i in np.concatenate([vpos, vneg])]
        pp.dev = [keys[i] for i in np.concatenate([dpos, dneg])]
        dev_pos += [(pid, *keys[i]) for i in dpos]
        dev_neg += [(pid, *keys[i]) for i in dneg]
        patients[pid] = pp

    rng = np.random.default_rng(children[-1])
    pos_idx = rng.permutation(len(dev_pos))
    neg_idx = rng.permutation(len(dev_neg))
    (tp, tn), (vp, vn) = stratified_split(pos_idx, neg_idx, plan.train_fraction)
    dev_train = [dev_pos[i] for i in tp] + [dev_neg[i] for i in tn]
    dev_val = [dev_pos[i] for i in vp] + [dev_neg[i] for i in vn]
    return SplitIndex(dev_train=dev_train, dev_val=dev_val, patients=patients)


def _gather(
    keys: Sequence[tuple[str, str, int]],
    lookup: Mapping[tuple[str, str], LabeledFile],
    patient_id: str,
    tag: str,
    n_channels: int,
) -> FragmentSet:
    if not keys:
        return FragmentSet(
            np.zeros((0, n_channels, FRAGMENT_SAMPLES)), np.zeros(0), patient_id, tag, []
        )
    data = np.stack([lookup[(p, f)].fragments[i] for p, f, i in keys])
    labels = np.array([lookup[(p, f)].labels[i] for p, f, i in keys], dtype=np.int8)
    ids = [f"{f}:{i}" for _, f, i in keys]
    return FragmentSet(data, labels, patient_id, tag, ids)


def materialize(
    index: SplitIndex, files: Mapping[str, Sequence[LabeledFile]]
) -> Splits:
    lookup = {(pid, f.file_id): f for pid, fl in files.items() for f in fl}
    n_channels = next(iter(lookup.values())).fragments.shape[1]
    patients = {}
    for pid, pp in index.patients.items():
        test = lookup[(pid, pp.test_file)]
        patients[pid] = PatientSplits(
            retrain_train=_gather(
                [(pid, *k) for k in pp.retrain_train], lookup, pid, "retrain-train",
                n_channels,
            ),
            retrain_val=_gather(
                [(pid, *k) for k in pp.retrain_val], lookup, pid, "retrain-val",
                n_channels,
            ),
            test=FragmentSet(
                test.fragments,
                test.labels,
                pid,
                "test",
                [f"{test.file_id}:{i}" for i in range(len(test.labels))],
            ),
        )
    return Splits(
        dev_train=_gather(index.dev_train, lookup, "*", "dev-train", n_channels),
        dev_val=_gather(index.dev_val, lookup, "*", "dev-val", n_channels),
        patients=patients,
    )


def make_splits(
    files: Mapping[str, Sequence[LabeledFile]],
    plan: SplitPlan = SplitPlan(),
    seed: int = 0,
) -> Splits:
    """Build dev / retrain / test fragment sets from fully loaded files."""
    return materialize(plan_splits(files, plan, seed), files)


# --------------------------------------------------------------------------
# corpus level


def recording_matrix(
    rec: EdfRecording, labels: Sequence[str], fs_hz: float = TARGET_FS
) -> np.ndarray:
    """Stack the named signals as (C, S) at ``fs_hz``, resampling as needed."""
    rates = dict(zip(rec.labels, rec.sample_rate_hz))
    rows = [resample(rec.signal(label), rates[label], fs_hz) for label in labels]
    n = min(len(r) for r in rows)
    return np.stack([r[:n] for r in rows])


def len_after_resample(n: int, from_hz: float, to_hz: float = TARGET_FS) -> int:
    return n if from_hz == to_hz else int(round(n * to_hz / from_hz))


def save_fragment_set(fs: FragmentSet, directory: Path, name: str) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    fname = name.replace("/", "__") + ".f32"
    fs.data.astype("<f4").tofile(directory / fname)
    return {
        "file": fname,
        "shape": list(fs.data.shape),
        "labels": fs.labels.astype(int).tolist(),
        "split_tag": fs.split_tag,
        "patient_id": fs.patient_id,
        "ids": fs.ids.tolist(),
    }


def load_fragment_set(directory: Path, entry: Mapping) -> FragmentSet:
    shape = tuple(entry["shape"])
    data = np.fromfile(directory / entry["file"], dtype="<f4").reshape(shape)
    return FragmentSet(
        data.astype(np.float64),
        np.asarray(entry["labels"], dtype=np.int8),
        entry["patient_id"],
        entry["split_tag"],
        entry["ids"],
    )


def write_manifest(directory: Path, manifest: Mapping) -> None:
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
