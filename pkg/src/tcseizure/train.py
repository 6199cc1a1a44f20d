"""Base training, patient-specific retraining and threshold moving."""

from __future__ import annotations

import json
import logging
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .metrics import ConfusionMatrix, SingleClass, rates, roc_auc
from .preprocess import FragmentSet
from .tcresnet import QConfig, TcResNet4, build_tcresnet4

log = logging.getLogger(__name__)

CANDIDATE_WEIGHTS = (1, 2, 3, 4, 5)


class DivergedLoss(RuntimeError):
    pass


class EmptyRetrainSet(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs_base: int = 40
    batch_base: int = 128
    epochs_retrain: int = 10
    batch_retrain: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seizure_weight: int = 2
    qat_bits: int | None = None
    qat_feature_bits: int | None = None
    dropout: float = 0.5
    strict_63: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.seizure_weight not in CANDIDATE_WEIGHTS:
            raise ValueError(f"seizure_weight must be one of {CANDIDATE_WEIGHTS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def qconfig(self) -> QConfig | None:
        if self.qat_bits is None:
            return None
        return QConfig(self.qat_bits, feature_bits=self.qat_feature_bits)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    class_weights: tuple[float, float] = (1.0, 1.0)
    # rows = true class, columns = predicted label (after threshold moving)
    confusion: list[list[int]] = field(default_factory=lambda: [[0, 0], [0, 0]])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> TrainReport:
        d = json.loads(text)
        return cls(epochs=d["epochs"], class_weights=tuple(d["class_weights"]),
                   confusion=d["confusion"])


# --------------------------------------------------------------------------
# loss and optimizer


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_weights(labels) -> tuple[float, float]:
    """Inverse-frequency weights n / (2 n_class), rescaled to mean 1."""
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("class weights need both classes")
    w = np.array([len(labels) / (2 * n_neg), len(labels) / (2 * n_pos)])
    w = w / w.mean()
    return float(w[0]), float(w[1])


def weighted_cross_entropy(logits, labels, weights=(1.0, 1.0)):
    """Weighted-mean softmax cross-entropy and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.asarray(weights, dtype=np.float64)[labels]
    norm = w.sum()
    loss = -(w * logp[np.arange(len(labels)), labels]).sum() / norm
    grad = np.exp(logp)
    grad[np.arange(len(labels)), labels] -= 1.0
    grad *= (w / norm)[:, None]
    return float(loss), grad


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            p *= 1 - self.lr * self.wd
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --------------------------------------------------------------------------
# decisions


def apply_threshold_moving(probabilities, w: float = 2) -> np.ndarray:
    """Ictal iff w * p_ictal >= p_non_ictal.

    Accepts (N, 2) class probabilities or a vector of ictal probabilities.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim == 2:
        p0, p1 = p[:, 0], p[:, 1]
    else:
        p0, p1 = 1.0 - p, p
    return (w * p1 >= p0).astype(np.int8)


def select_weight(sensitivities: Mapping[int, float],
                  candidates: Sequence[int] = CANDIDATE_WEIGHTS,
                  target: float = 0.9) -> tuple[int, bool]:
    """Smallest weight whose sensitivity exceeds ``target``.

    Returns (weight, fallback); fallback is True when no candidate qualified
    and the largest candidate was returned instead.
    """
    for w in sorted(candidates):
        if w in sensitivities and sensitivities[w] > target:
            return w, False
    fallback = max(candidates)
    warnings.warn(f"no threshold weight reached sensitivity > {target}; using {fallback}",
                  stacklevel=2)
    return fallback, True


def sensitivity_by_weight(p_ictal, labels, candidates=CANDIDATE_WEIGHTS) -> dict[int, float]:
    out = {}
    for w in candidates:
        cm = ConfusionMatrix.from_labels(labels, apply_threshold_moving(p_ictal, w))
        out[w] = rates(cm)["sensitivity"]
    return out


def predict_proba(model, data: np.ndarray, batch: int = 512) -> np.ndarray:
    """Ictal probability per fragment (float or fake-quant path)."""
    out = []
    for i in range(0, len(data), batch):
        out.append(softmax(model.forward(data[i : i + batch]))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, fs: FragmentSet, w: float = 2) -> dict:
    p = predict_proba(model, fs.data)
    pred = apply_threshold_moving(p, w)
    cm = ConfusionMatrix.from_labels(fs.labels, pred)
    out = dict(rates(cm))
    try:
        out["auc"] = roc_auc(p, fs.labels)
    except SingleClass:
        out["auc"] = None
    out["confusion"] = cm.as_counts()
    return out


# --------------------------------------------------------------------------
# training loops


def _fit(model: TcResNet4, train: FragmentSet, epochs: int, batch: int,
         cfg: TrainConfig, rng: np.random.Generator, val: FragmentSet | None,
         report: TrainReport) -> None:
    weights = class_weights(train.labels)
    report.class_weights = weights
    opt = AdamW(model.params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    n = len(train)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            logits = model.forward(train.data[idx], train=True, rng=rng)
            loss, grad = weighted_cross_entropy(logits, train.labels[idx], weights)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            opt.step(model.backward(grad))
            total += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == train.labels[idx]))
        entry = {"epoch": epoch + 1, "loss": total / n, "train_accuracy": correct / n}
        if val is not None and len(val):
            entry["val"] = evaluate(model, val, cfg.seizure_weight)
        log.info("epoch %d loss %.4f", epoch + 1, entry["loss"])
        report.epochs.append(entry)
    final = apply_threshold_moving(predict_proba(model, train.data), cfg.seizure_weight)
    report.confusion = ConfusionMatrix.from_labels(train.labels, final).as_counts()


def train_base(dev_train: FragmentSet, cfg: TrainConfig = TrainConfig(),
               dev_val: FragmentSet | None = None,
               model: TcResNet4 | None = None) -> tuple[TcResNet4, TrainReport]:
    """Patient-unspecific model trained on the pooled development data."""
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = build_tcresnet4(int(rng.integers(2**31)), strict_63=cfg.strict_63,
                                dropout=cfg.dropout)
    model.qconfig = cfg.qconfig
    report = TrainReport()
    _fit(model, dev_train, cfg.epochs_base, cfg.batch_base, cfg, rng, dev_val, report)
    return model, report


def retrain_patient(base: TcResNet4, train: FragmentSet, cfg: TrainConfig = TrainConfig(),
                    val: FragmentSet | None = None) -> tuple[TcResNet4, TrainReport]:
    """Fine-tune every layer of a copy of ``base`` on one patient's data."""
    if len(train) == 0:
        raise EmptyRetrainSet(f"patient {train.patient_id} has no retraining data")
    model = base.copy()
    if cfg.qconfig is not None:
        model.qconfig = cfg.qconfig
    rng = np.random.default_rng([cfg.seed, _stable_hash(train.patient_id)])
    report = TrainReport()
    _fit(model, train, cfg.epochs_retrain, cfg.batch_retrain, cfg, rng, val, report)
    return model, report


def _stable_hash(text: str) -> int:
    return int.from_bytes(text.encode("utf-8")[:8].ljust(8, b"\0"), "little")
