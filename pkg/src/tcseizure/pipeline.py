"""Corpus-level orchestration: ingest, preprocess, train, deploy, calibrate, evaluate."""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig, PostprocConfig, PreprocessConfig
from .edf_io import SeizureAnnotation, format_annotations, read_annotations, read_edf, read_header
from .metrics import EvalReport, method_report
from .postproc import (
    HmmParams,
    SmoothingConfig,
    calibrate_thresholds,
    compile_lut,
    detection_delay,
    estimate_hmm,
    ewma,
    ewma_scores,
    hmm_decode,
    sma,
    sma_scores,
)
from .preprocess import (
    FRAGMENT_SAMPLES,
    TARGET_FS,
    FragmentSet,
    LabeledFile,
    PreprocessError,
    bandpass,
    common_channels,
    fragment,
    fragment_labels,
    len_after_resample,
    load_fragment_set,
    materialize,
    normalize,
    plan_splits,
    recording_matrix,
    save_fragment_set,
    select_channels,
    write_manifest,
)
from .tcresnet import (
    QConfig,
    QuantizedTcResNet,
    TcResNet4,
    fold_batchnorm,
    load_model,
    load_quantized,
    quantize_model,
    save_model,
    save_quantized,
)
from .train import (
    TrainConfig,
    TrainReport,
    apply_threshold_moving,
    predict_proba,
    retrain_patient,
    select_weight,
    sensitivity_by_weight,
    softmax,
    train_base,
)

log = logging.getLogger(__name__)

FRAG_S = FRAGMENT_SAMPLES / TARGET_FS
METHODS = ("sma", "ewma", "hmm")


class CorpusError(ValueError):
    pass


class UnknownAnnotatedFile(CorpusError):
    pass


# --------------------------------------------------------------------------
# discovery and ingestion


@dataclass(frozen=True)
class FileInfo:
    patient_id: str
    file_id: str
    path: Path
    channels: tuple[str, ...]
    rates_hz: tuple[float, ...]
    n_samples: tuple[int, ...]

    @property
    def duration_s(self) -> float:
        return min(n / r for n, r in zip(self.n_samples, self.rates_hz))

    def n_fragments(self, channels: Sequence[str]) -> int:
        idx = [self.channels.index(c) for c in channels]
        n = min(len_after_resample(self.n_samples[i], self.rates_hz[i]) for i in idx)
        return n // FRAGMENT_SAMPLES


def file_stem(name: str) -> str:
    return re.sub(r"\.edf$", "", Path(name).name, flags=re.IGNORECASE)


def discover(data_dir: str | Path) -> dict[str, list[FileInfo]]:
    """EDF files below ``data_dir`` grouped by patient (the parent directory name)."""
    root = Path(data_dir)
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".edf" and p.is_file())
    if not paths:
        raise CorpusError(f"no EDF files under {root}")
    out: dict[str, list[FileInfo]] = defaultdict(list)
    for path in paths:
        header, specs = read_header(path)
        pid = path.parent.name if path.parent != root else file_stem(path.name).split("_")[0]
        out[pid].append(FileInfo(
            patient_id=pid,
            file_id=file_stem(path.name),
            path=path,
            channels=tuple(s.label for s in specs),
            rates_hz=tuple(s.samples_per_record / header.record_duration_s for s in specs),
            n_samples=tuple(s.samples_per_record * header.n_records for s in specs),
        ))
    ids = [f.file_id for fl in out.values() for f in fl]
    if len(ids) != len(set(ids)):
        raise CorpusError("file names must be unique across patients")
    return dict(sorted(out.items()))


def annotations_by_file(annotations: Iterable[SeizureAnnotation],
                        files: Mapping[str, Sequence[FileInfo]]) -> dict[str, list[SeizureAnnotation]]:
    known = {f.file_id for fl in files.values() for f in fl}
    out: dict[str, list[SeizureAnnotation]] = defaultdict(list)
    for a in annotations:
        fid = file_stem(a.file_id)
        if fid not in known:
            raise UnknownAnnotatedFile(f"annotation refers to unknown file {a.file_id!r}")
        out[fid].append(SeizureAnnotation(fid, a.start_s, a.end_s))
    return out


def inventory(data_dir: str | Path, annotations_path: str | Path) -> dict:
    """Summary of a corpus: files, channels, durations and seizures per patient."""
    files = discover(data_dir)
    anns = annotations_by_file(read_annotations(annotations_path), files)
    shared = common_channels([f.channels for fl in files.values() for f in fl])
    return {
        "common_channels": shared,
        "patients": {
            pid: [
                {
                    "file_id": f.file_id,
                    "path": str(f.path),
                    "channels": list(f.channels),
                    "rates_hz": sorted(set(f.rates_hz)),
                    "duration_s": f.duration_s,
                    "seizures": [[a.start_s, a.end_s] for a in anns.get(f.file_id, [])],
                }
                for f in fl
            ]
            for pid, fl in files.items()
        },
    }


_SUMMARY_FILE = re.compile(r"^File Name:\s*(\S+)", re.IGNORECASE)
_SUMMARY_START = re.compile(r"^Seizure(?:\s+\d+)?\s+Start Time:\s*([\d.]+)", re.IGNORECASE)
_SUMMARY_END = re.compile(r"^Seizure(?:\s+\d+)?\s+End Time:\s*([\d.]+)", re.IGNORECASE)


def summary_to_annotations(text: str) -> list[SeizureAnnotation]:
    """Convert a per-patient summary text file (CHB-MIT style) to annotations."""
    out, current, start = [], None, None
    for line in text.splitlines():
        line = line.strip()
        if m := _SUMMARY_FILE.match(line):
            current, start = file_stem(m.group(1)), None
        elif (m := _SUMMARY_START.match(line)) and current:
            start = float(m.group(1))
        elif (m := _SUMMARY_END.match(line)) and current and start is not None:
            out.append(SeizureAnnotation(current, start, float(m.group(1))))
            start = None
    return sorted(out)


def summaries_to_csv(paths: Iterable[str | Path]) -> str:
    anns: list[SeizureAnnotation] = []
    for p in paths:
        anns += summary_to_annotations(Path(p).read_text(errors="replace"))
    return format_annotations(anns)


# --------------------------------------------------------------------------
# preprocessing


class _SparseFragments:
    """Row lookup for the few fragments of a file that a split needs."""

    def __init__(self, rows: dict[int, np.ndarray], n_channels: int):
        self.rows = rows
        self.shape = (None, n_channels, FRAGMENT_SAMPLES)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.rows[i]


def load_fragments(info: FileInfo, channels: Sequence[str], cfg: PreprocessConfig) -> np.ndarray:
    rec = read_edf(info.path)
    x = recording_matrix(rec, channels, TARGET_FS)
    lo, hi = cfg.band_hz
    x = bandpass(x, lo, hi, TARGET_FS, cfg.filter_order)
    return fragment(x, TARGET_FS, FRAG_S)


def _rle(labels: np.ndarray) -> list[list[int]]:
    if len(labels) == 0:
        return []
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.r_[0, edges]
    lengths = np.diff(np.r_[starts, len(labels)])
    return [[int(labels[s]), int(n)] for s, n in zip(starts, lengths)]


def _unrle(runs) -> np.ndarray:
    return np.concatenate([np.full(n, v, np.int8) for v, n in runs]) if runs else np.zeros(0, np.int8)


def preprocess_corpus(data_dir: str | Path, annotations_path: str | Path,
                      out_dir: str | Path, cfg: PreprocessConfig = PreprocessConfig()) -> dict:
    """Turn EDF files plus annotations into persisted, normalized fragment sets."""
    out_dir = Path(out_dir)
    files = discover(data_dir)
    anns = annotations_by_file(read_annotations(annotations_path), files)
    shared = common_channels([f.channels for fl in files.values() for f in fl])
    labeled = {
        pid: [LabeledFile(f.file_id, fragment_labels(f.n_fragments(shared), anns.get(f.file_id, []),
                                                      FRAG_S)) for f in fl]
        for pid, fl in files.items()
    }
    index = plan_splits(labeled, cfg.split, cfg.seed)
    info = {f.file_id: f for fl in files.values() for f in fl}
    label_of = {lf.file_id: lf.labels for fl in labeled.values() for lf in fl}

    needed: dict[str, set[int]] = defaultdict(set)
    for _, fid, i in index.dev_train + index.dev_val:
        needed[fid].add(i)
    for pp in index.patients.values():
        for fid, i in pp.retrain_train + pp.retrain_val:
            needed[fid].add(i)

    # pass 1: channel ranking from band-passed ictal fragments of the dev pool
    dev_ictal: dict[str, list[int]] = defaultdict(list)
    for _, fid, i in index.dev_train + index.dev_val:
        if label_of[fid][i] == 1:
            dev_ictal[fid].append(i)
    if not dev_ictal:
        raise PreprocessError("the development pool holds no ictal fragments")
    ictal = [load_fragments(info[fid], shared, cfg)[sorted(idx)]
             for fid, idx in sorted(dev_ictal.items())]
    selection = select_channels(np.concatenate(ictal), shared, cfg.n_channels)
    kept = selection.kept_channels
    del ictal

    # pass 2: gather what the splits need, on the kept channels only
    test_files = {pp.test_file for pp in index.patients.values()}
    loaded: dict[str, list[LabeledFile]] = {}
    for pid, fl in files.items():
        loaded[pid] = []
        for f in fl:
            if f.file_id not in needed and f.file_id not in test_files:
                loaded[pid].append(LabeledFile(f.file_id, label_of[f.file_id],
                                               _SparseFragments({}, len(kept))))
                continue
            frags = load_fragments(f, kept, cfg).astype(np.float32)
            labels = label_of[f.file_id]
            if len(frags) != len(labels):
                raise PreprocessError(f"{f.file_id}: fragment count changed between passes")
            if f.file_id in test_files:
                store = frags
            else:
                store = _SparseFragments({i: frags[i] for i in needed[f.file_id]}, len(kept))
            loaded[pid].append(LabeledFile(f.file_id, labels, store))
    splits = materialize(index, loaded)
    sets, peak = normalize(splits.all_sets())

    entries = {name: save_fragment_set(fs, out_dir / "sets", name) for name, fs in sets.items()}
    patients = {}
    for pid, pp in index.patients.items():
        patients[pid] = {
            "test_file": pp.test_file,
            "test_duration_s": info[pp.test_file].duration_s,
            "test_annotations": [[a.start_s, a.end_s] for a in anns.get(pp.test_file, [])],
            # true label sequences of the non-test recordings, run-length encoded
            "label_runs": {f.file_id: _rle(label_of[f.file_id])
                           for f in files[pid] if f.file_id != pp.test_file},
        }
    manifest = {
        "format": "tcseizure-fragments-1",
        "seed": cfg.seed,
        "fs_hz": TARGET_FS,
        "fragment_s": FRAG_S,
        "band_hz": list(cfg.band_hz),
        "filter_order": cfg.filter_order,
        "normalization": peak,
        "channels": kept,
        "common_channels": shared,
        "variance_scores": selection.variance_scores,
        "split_plan": {
            "dev_fraction": cfg.split.dev_fraction,
            "retrain_fraction": cfg.split.retrain_fraction,
            "train_fraction": cfg.split.train_fraction,
            "neg_pos_ratio": cfg.split.neg_pos_ratio,
        },
        "sets": entries,
        "patients": patients,
    }
    write_manifest(out_dir, manifest)
    return manifest


@dataclass
class PreparedCorpus:
    root: Path
    manifest: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root: str | Path) -> PreparedCorpus:
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise CorpusError(f"{root} holds no preprocessed corpus (manifest.json missing)")
        return cls(root, json.loads(path.read_text()))

    @property
    def patients(self) -> list[str]:
        return sorted(self.manifest["patients"])

    def set(self, name: str) -> FragmentSet:
        if name not in self._cache:
            if name not in self.manifest["sets"]:
                raise CorpusError(f"no fragment set named {name!r}")
            self._cache[name] = load_fragment_set(self.root / "sets", self.manifest["sets"][name])
        return self._cache[name]

    def label_sequences(self, pid: str) -> list[np.ndarray]:
        runs = self.manifest["patients"][pid]["label_runs"]
        return [_unrle(runs[fid]) for fid in sorted(runs)]

    def test_annotations(self, pid: str) -> list[SeizureAnnotation]:
        p = self.manifest["patients"][pid]
        return [SeizureAnnotation(p["test_file"], s, e) for s, e in p["test_annotations"]]


# --------------------------------------------------------------------------
# training and deployment


@dataclass
class PatientModel:
    patient_id: str
    model: TcResNet4
    report: TrainReport
    quantized: QuantizedTcResNet | None = None

    def probabilities(self, data: np.ndarray) -> np.ndarray:
        if self.quantized is not None:
            return quantized_proba(self.quantized, data)
        return predict_proba(self.model, data)


def quantized_proba(q: QuantizedTcResNet, data: np.ndarray, batch: int = 512) -> np.ndarray:
    out = [softmax(q.logits(data[i : i + batch]))[:, 1] for i in range(0, len(data), batch)]
    return np.concatenate(out) if out else np.zeros(0)


def deploy(model: TcResNet4, qconfig: QConfig | None) -> QuantizedTcResNet | None:
    """Fold batch norm and convert to the integer model (QAT-trained models only)."""
    if qconfig is None:
        return None
    return quantize_model(fold_batchnorm(model), qconfig)


@dataclass
class BaseResult:
    model: TcResNet4
    report: TrainReport
    seizure_weight: int
    weight_fallback: bool
    sensitivities: dict[int, float | None]


def run_train_base(corpus: PreparedCorpus, cfg: TrainConfig) -> BaseResult:
    model, report = train_base(corpus.set("dev-train"), cfg, corpus.set("dev-val"))
    dev = corpus.set("dev-train")
    sens = sensitivity_by_weight(predict_proba(model, dev.data), dev.labels)
    w, fallback = select_weight({k: v for k, v in sens.items() if v is not None})
    log.info("threshold weight %d (fallback=%s)", w, fallback)
    return BaseResult(model, report, w, fallback, sens)


def run_retrain(base: TcResNet4, corpus: PreparedCorpus, pid: str, cfg: TrainConfig) -> PatientModel:
    model, report = retrain_patient(base, corpus.set(f"{pid}/retrain-train"), cfg,
                                    corpus.set(f"{pid}/retrain-val"))
    return PatientModel(pid, model, report, deploy(model, cfg.qconfig))


def save_patient(pm: PatientModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    save_model(pm.model, path, extra={"patient_id": pm.patient_id, **(extra or {})})
    (path / "train_report.json").write_text(pm.report.to_json() + "\n")
    if pm.quantized is not None:
        save_quantized(pm.quantized, path / "quantized")


def load_patient(path: str | Path) -> PatientModel:
    path = Path(path)
    model = load_model(path)
    meta = json.loads((path / "manifest.json").read_text())["extra"]
    report = TrainReport.from_json((path / "train_report.json").read_text())
    q = load_quantized(path / "quantized") if (path / "quantized").is_dir() else None
    return PatientModel(meta.get("patient_id", path.name), model, report, q)


# --------------------------------------------------------------------------
# post-processing and evaluation


def patient_hmm(corpus: PreparedCorpus, pm: PatientModel) -> HmmParams:
    """Transitions from true label sequences, emissions from the training confusion."""
    return estimate_hmm(corpus.label_sequences(pm.patient_id), pm.report.confusion)


def hmm_labels(p: np.ndarray, seizure_weight: int, mode: str = "threshold") -> np.ndarray:
    return apply_threshold_moving(p, seizure_weight if mode == "threshold" else 1)


def choose_calibration(patients: Sequence[str], cfg: PostprocConfig) -> list[str]:
    if cfg.calib_patients:
        missing = set(cfg.calib_patients) - set(patients)
        if missing:
            raise CorpusError(f"unknown calibration patients {sorted(missing)}")
        return sorted(cfg.calib_patients)
    if len(patients) <= cfg.n_calib:
        raise CorpusError(f"need more than {cfg.n_calib} patients to keep a test group")
    rng = np.random.default_rng(cfg.seed)
    return sorted(rng.choice(sorted(patients), size=cfg.n_calib, replace=False).tolist())


def calibrate(corpus: PreparedCorpus, models: Mapping[str, PatientModel],
              calib: Sequence[str], window: int = 5) -> SmoothingConfig:
    data = {}
    for pid in calib:
        test = corpus.set(f"{pid}/test")
        data[pid] = [(models[pid].probabilities(test.data), test.labels)]
    return calibrate_thresholds(data, window)


@dataclass
class PatientOutputs:
    truth: np.ndarray
    probs: np.ndarray
    decisions: dict[str, np.ndarray]
    scores: dict[str, np.ndarray]
    delays: dict[str, list[float | None]]


def smooth_patient(probs: np.ndarray, hmm: HmmParams, smoothing: SmoothingConfig,
                   seizure_weight: int, hmm_input: str = "threshold", lut=None) -> tuple[dict, dict]:
    w = smoothing.window
    decisions = {
        "sma": sma(probs, w, smoothing.sma_threshold),
        "ewma": ewma(probs, smoothing.ewma_alpha, smoothing.ewma_threshold),
        "hmm": hmm_decode(hmm_labels(probs, seizure_weight, hmm_input),
                          hmm=None if lut is not None else hmm, lut=lut, window=w),
    }
    scores = {
        "sma": sma_scores(probs, w),
        "ewma": ewma_scores(probs, smoothing.ewma_alpha),
        "hmm": probs,  # hard HMM decisions carry no ranking; AUC uses the raw probability
    }
    return decisions, scores


def evaluate_patients(corpus: PreparedCorpus, models: Mapping[str, PatientModel],
                      patients: Sequence[str], smoothing: SmoothingConfig,
                      seizure_weight: int, hmm_input: str = "threshold") -> tuple[EvalReport, dict]:
    outputs: dict[str, PatientOutputs] = {}
    for pid in patients:
        test = corpus.set(f"{pid}/test")
        pm = models[pid]
        p = pm.probabilities(test.data)
        decisions, scores = smooth_patient(p, patient_hmm(corpus, pm), smoothing,
                                           seizure_weight, hmm_input)
        anns = corpus.test_annotations(pid)
        delays = {m: detection_delay(decisions[m], anns, FRAG_S, m, smoothing.window)
                  for m in METHODS}
        outputs[pid] = PatientOutputs(test.labels, p, decisions, scores, delays)

    report = EvalReport()
    for pid, o in outputs.items():
        report.per_patient[pid] = {
            m: method_report(o.truth, o.decisions[m], o.scores[m], o.delays[m]) for m in METHODS
        }
    if outputs:
        truth = np.concatenate([o.truth for o in outputs.values()])
        for m in METHODS:
            report.methods[m] = method_report(
                truth,
                np.concatenate([o.decisions[m] for o in outputs.values()]),
                np.concatenate([o.scores[m] for o in outputs.values()]),
                [d for o in outputs.values() for d in o.delays[m]],
            )
    return report, outputs


# --------------------------------------------------------------------------
# end to end


@dataclass
class PipelineResult:
    report: EvalReport
    smoothing: SmoothingConfig
    calib_patients: list[str]
    eval_patients: list[str]
    seizure_weight: int
    base: BaseResult
    models: dict[str, PatientModel]
    hmm_input: str = "threshold"


def run_pipeline(corpus: PreparedCorpus, cfg: PipelineConfig = PipelineConfig(),
                 work_dir: str | Path | None = None) -> PipelineResult:
    """Base training, weight selection, retraining, deployment, calibration, evaluation."""
    base = run_train_base(corpus, cfg.train)
    tcfg = replace(cfg.train, seizure_weight=base.seizure_weight)
    models = {pid: run_retrain(base.model, corpus, pid, tcfg) for pid in corpus.patients}
    calib = choose_calibration(corpus.patients, cfg.postproc)
    smoothing = calibrate(corpus, models, calib, cfg.postproc.window)
    held_out = [p for p in corpus.patients if p not in calib]
    report, _ = evaluate_patients(corpus, models, held_out, smoothing, base.seizure_weight,
                                  cfg.postproc.hmm_input)
    result = PipelineResult(report, smoothing, calib, held_out, base.seizure_weight, base, models,
                            cfg.postproc.hmm_input)
    if work_dir is not None:
        write_artifacts(result, corpus, Path(work_dir))
    return result


def write_artifacts(result: PipelineResult, corpus: PreparedCorpus, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_model(result.base.model, out / "base.ckpt",
               extra={"seizure_weight": result.seizure_weight,
                      "weight_fallback": result.base.weight_fallback})
    (out / "base.ckpt" / "train_report.json").write_text(result.base.report.to_json() + "\n")
    for pid, pm in result.models.items():
        save_patient(pm, out / "patients" / f"{pid}.ckpt", {"seizure_weight": result.seizure_weight})
        hmm = patient_hmm(corpus, pm)
        (out / "patients" / f"{pid}.hmm.json").write_text(hmm.to_json() + "\n")
        (out / "patients" / f"{pid}.lut.json").write_text(compile_lut(hmm).to_json() + "\n")
    smoothing = {**result.smoothing.to_dict(), "calib_patients": result.calib_patients,
                 "hmm_input": result.hmm_input,
                 "seizure_weight": result.seizure_weight}
    (out / "smoothing.json").write_text(json.dumps(smoothing, indent=1) + "\n")
    (out / "eval.json").write_text(result.report.to_json() + "\n")
    (out / "eval.csv").write_text(result.report.to_csv())
    (out / "auc_boxplot.csv").write_text(result.report.auc_boxplot_csv())
