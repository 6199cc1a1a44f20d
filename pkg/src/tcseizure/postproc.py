"""Smoothing of per-fragment CNN outputs: SMA, EWMA and a windowed 2-state HMM."""

from __future__ import annotations

import itertools
import json
import math
import warnings
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .edf_io import SeizureAnnotation

WINDOW = 5
FRAGMENT_S = 0.5
ROW_TOL = 1e-9
TIE_TOL = 1e-12
THETA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


class InvalidHmm(ValueError):
    pass


class NoCalibrationData(ValueError):
    pass


class DegenerateCalibration(UserWarning):
    pass


# --------------------------------------------------------------------------
# moving averages


def sma_scores(probs, w: int = WINDOW) -> np.ndarray:
    """Trailing mean of the last ``w`` values; shorter prefixes use what exists."""
    p = np.asarray(probs, dtype=np.float64)
    if w < 1:
        raise ValueError("window must be >= 1")
    if p.size == 0:
        return p.copy()
    # windows padded with NaN at the front so prefixes average what exists
    win = sliding_window_view(np.r_[np.full(w - 1, np.nan), p], w)
    mean = np.nanmean(win, axis=1)
    # rounding must not push a mean outside its window's range (constant input stays exact)
    return np.clip(mean, np.nanmin(win, axis=1), np.nanmax(win, axis=1))


def sma(probs, w: int = WINDOW, theta: float = 0.5) -> np.ndarray:
    return (sma_scores(probs, w) >= theta).astype(np.int8)


def ewma_scores(probs, alpha: float) -> np.ndarray:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    p = np.asarray(probs, dtype=np.float64)
    s = np.empty_like(p)
    acc = 0.0
    for t, v in enumerate(p):
        if t == 0 or alpha == 1.0:
            acc = v
        else:
            # a step toward v, kept between acc and v: constant input stays exact
            acc = min(max(acc + alpha * (v - acc), min(acc, v)), max(acc, v))
        s[t] = acc
    return s


def ewma(probs, alpha: float, theta: float = 0.5) -> np.ndarray:
    return (ewma_scores(probs, alpha) >= theta).astype(np.int8)


# --------------------------------------------------------------------------
# HMM parameters


def _check_stochastic(name: str, m: np.ndarray, shape) -> None:
    if m.shape != shape:
        raise InvalidHmm(f"{name} must have shape {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise InvalidHmm(f"{name} entries must be finite and non-negative")
    if np.any(np.abs(m.sum(axis=-1) - 1.0) > ROW_TOL):
        raise InvalidHmm(f"{name} rows must sum to 1")


def stationary(transition) -> np.ndarray:
    """Stationary distribution of a 2x2 transition matrix (uniform if undefined)."""
    t = np.asarray(transition, dtype=np.float64)
    a, b = t[0, 1], t[1, 0]
    if a + b == 0:
        return np.array([0.5, 0.5])
    return np.array([b / (a + b), a / (a + b)])


@dataclass(frozen=True, eq=False)
class HmmParams:
    transition: np.ndarray
    emission: np.ndarray  # row = hidden state, column = observed label
    initial: np.ndarray

    def __post_init__(self) -> None:
        for name in ("transition", "emission", "initial"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        _check_stochastic("transition", self.transition, (2, 2))
        _check_stochastic("emission", self.emission, (2, 2))
        _check_stochastic("initial", self.initial, (2,))

    def __eq__(self, other) -> bool:
        if not isinstance(other, HmmParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("transition", "emission", "initial"))

    __hash__ = None

    @classmethod
    def with_stationary_start(cls, transition, emission) -> HmmParams:
        return cls(transition, emission, stationary(transition))

    def to_dict(self) -> dict:
        # repr() gives the shortest decimal that round-trips exactly
        return {k: np.vectorize(repr, otypes=[str])(getattr(self, k)).tolist()
                for k in ("transition", "emission", "initial")}

    @classmethod
    def from_dict(cls, d: Mapping) -> HmmParams:
        conv = lambda v: np.array(v, dtype=str).astype(np.float64)  # noqa: E731
        return cls(conv(d["transition"]), conv(d["emission"]), conv(d["initial"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> HmmParams:
        return cls.from_dict(json.loads(text))


def estimate_transitions(sequences: Iterable[Sequence[int]]) -> np.ndarray:
    """Laplace-smoothed transition frequencies; pairs never span two sequences."""
    counts = np.ones((2, 2))
    for seq in sequences:
        s = np.asarray(seq, dtype=np.int64)
        if len(s) > 1:
            np.add.at(counts, (s[:-1], s[1:]), 1)
    return counts / counts.sum(axis=1, keepdims=True)


def emissions_from_confusion(confusion) -> np.ndarray:
    """Row-normalized confusion counts; an empty row becomes uniform (+1 smoothing)."""
    c = np.asarray(confusion, dtype=np.float64)
    if c.shape != (2, 2) or np.any(c < 0):
        raise ValueError("confusion must be a 2x2 matrix of non-negative counts")
    rows = c.sum(axis=1, keepdims=True)
    c = np.where(rows > 0, c, c + 1.0)
    return c / c.sum(axis=1, keepdims=True)


def estimate_hmm(label_sequences: Iterable[Sequence[int]], confusion) -> HmmParams:
    """Per-patient HMM; both matrices get +1 counts so no path has zero probability.

    A classifier that is perfect on its own training data would otherwise give
    an identity emission matrix, and the decoder could only repeat its input.
    """
    counts = np.asarray(confusion, dtype=np.float64)
    return HmmParams.with_stationary_start(
        estimate_transitions(label_sequences), emissions_from_confusion(counts + 1.0)
    )


# --------------------------------------------------------------------------
# windowed Viterbi


def _logs(hmm: HmmParams):
    log = lambda v: math.log(v) if v > 0 else -math.inf  # noqa: E731
    li = [log(v) for v in hmm.initial.tolist()]
    lt = [[log(v) for v in row] for row in hmm.transition.tolist()]
    le = [[log(v) for v in row] for row in hmm.emission.tolist()]
    return li, lt, le


def path_score(states: Sequence[int], obs: Sequence[int], hmm: HmmParams,
               _logs_cache=None) -> float:
    """Log joint probability of a state path and observations."""
    li, lt, le = _logs_cache or _logs(hmm)
    s = li[states[0]] + le[states[0]][obs[0]]
    for t in range(1, len(obs)):
        s += lt[states[t - 1]][states[t]] + le[states[t]][obs[t]]
    return s


def _decide(best0: float, best1: float) -> int:
    # ties (and all-impossible windows) go to non-ictal
    return int(best1 > best0 + TIE_TOL)


def _check_obs(obs) -> list[int]:
    obs = [int(o) for o in obs]
    if not obs or any(o not in (0, 1) for o in obs):
        raise ValueError("observations must be a non-empty 0/1 sequence")
    return obs


def viterbi_window(obs: Sequence[int], hmm: HmmParams) -> int:
    """Hidden state at the oldest position of the most probable path."""
    obs = _check_obs(obs)
    li, lt, le = _logs(hmm)
    # backward pass: tail[s] = best log-score of the suffix given state s
    tail = [0.0, 0.0]
    for t in range(len(obs) - 1, 0, -1):
        o = obs[t]
        tail = [max(lt[s][0] + le[0][o] + tail[0], lt[s][1] + le[1][o] + tail[1])
                for s in (0, 1)]
    return _decide(li[0] + le[0][obs[0]] + tail[0], li[1] + le[1][obs[0]] + tail[1])


def viterbi_bruteforce(obs: Sequence[int], hmm: HmmParams) -> int:
    """Exhaustive reference for :func:`viterbi_window`."""
    obs = _check_obs(obs)
    logs = _logs(hmm)
    best = [-math.inf, -math.inf]
    for path in itertools.product((0, 1), repeat=len(obs)):
        best[path[0]] = max(best[path[0]], path_score(path, obs, hmm, logs))
    return _decide(*best)


def window_bits(index: int, n: int = WINDOW) -> list[int]:
    """Observation window for a LUT index; the oldest label is the MSB."""
    return [(index >> (n - 1 - k)) & 1 for k in range(n)]


def window_index(obs: Sequence[int]) -> int:
    i = 0
    for o in obs:
        i = (i << 1) | int(o)
    return i


@dataclass(frozen=True)
class ViterbiLut:
    entries: tuple[int, ...]
    window: int = WINDOW

    def __post_init__(self) -> None:
        if len(self.entries) != 2**self.window:
            raise ValueError(f"LUT needs {2**self.window} entries")
        if any(e not in (0, 1) for e in self.entries):
            raise ValueError("LUT entries must be 0 or 1")

    def __getitem__(self, index: int) -> int:
        return self.entries[index]

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, obs: Sequence[int]) -> int:
        if len(obs) != self.window:
            raise ValueError(f"window of {self.window} labels expected")
        return self.entries[window_index(obs)]

    def bitstring(self) -> str:
        return "".join(str(e) for e in self.entries)

    def to_json(self) -> str:
        return json.dumps({"window": self.window, "entries": self.bitstring()})

    @classmethod
    def from_json(cls, text: str) -> ViterbiLut:
        d = json.loads(text)
        return cls(tuple(int(c) for c in d["entries"]), int(d["window"]))


def compile_lut(hmm: HmmParams, window: int = WINDOW) -> ViterbiLut:
    return ViterbiLut(
        tuple(viterbi_window(window_bits(i, window), hmm) for i in range(2**window)),
        window,
    )


class HmmStream:
    """Online decoder: push one label, get back the decision for the oldest one.

    A decision for fragment k is available once fragment k + n - 1 has been
    seen; ``flush`` pads the tail by repeating the last label.
    """

    def __init__(self, hmm: HmmParams | None = None, lut: ViterbiLut | None = None,
                 window: int = WINDOW):
        if (hmm is None) == (lut is None):
            raise ValueError("give exactly one of hmm or lut")
        self.window = lut.window if lut is not None else window
        self._decode = lut.lookup if lut is not None else (lambda o: viterbi_window(o, hmm))
        self._buf: deque[int] = deque(maxlen=self.window)

    def push(self, label: int) -> int | None:
        self._buf.append(int(label))
        if len(self._buf) < self.window:
            return None
        return self._decode(list(self._buf))

    def flush(self) -> list[int]:
        buf = list(self._buf)
        self._buf.clear()
        # a full buffer already produced the decision for its oldest label
        skip = 1 if len(buf) == self.window else 0
        pad = buf[-1:] * self.window
        return [self._decode((buf[i:] + pad)[: self.window]) for i in range(skip, len(buf))]


def hmm_decode(labels: Sequence[int], hmm: HmmParams | None = None,
               lut: ViterbiLut | None = None, window: int = WINDOW) -> np.ndarray:
    """Decision per fragment, aligned to the input (decision k is about fragment k)."""
    stream = HmmStream(hmm, lut, window)
    out = [d for d in (stream.push(x) for x in labels) if d is not None]
    out.extend(stream.flush())
    return np.asarray(out, dtype=np.int8)


# --------------------------------------------------------------------------
# threshold calibration


@dataclass(frozen=True)
class SmoothingConfig:
    window: int = WINDOW
    sma_threshold: float = 0.5
    ewma_alpha: float = 0.5
    ewma_threshold: float = 0.5
    degenerate: bool = False

    def __post_init__(self) -> None:
        for name in ("sma_threshold", "ewma_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1)")
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must be in (0, 1]")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def to_dict(self) -> dict:
        return {"window": self.window, "sma_threshold": self.sma_threshold,
                "ewma_alpha": self.ewma_alpha, "ewma_threshold": self.ewma_threshold,
                "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: Mapping) -> SmoothingConfig:
        return cls(**d)


def youden_j(truth: np.ndarray, pred: np.ndarray) -> float:
    pos = truth == 1
    sens = np.mean(pred[pos]) if pos.any() else 0.0
    spec = np.mean(pred[~pos] == 0) if (~pos).any() else 0.0
    return float(sens + spec - 1.0)


def _best_theta(scores: np.ndarray, truth: np.ndarray, grid) -> tuple[float, float]:
    best_j, best_t = -math.inf, grid[0]
    for theta in grid:
        j = youden_j(truth, (scores >= theta).astype(np.int8))
        if j > best_j + TIE_TOL:
            best_j, best_t = j, theta
    return best_t, best_j


def calibrate_thresholds(
    patients: Mapping[str, Sequence[tuple[Sequence[float], Sequence[int]]]],
    window: int = WINDOW,
    theta_grid: Sequence[float] = THETA_GRID,
    alpha_grid: Sequence[float] = ALPHA_GRID,
) -> SmoothingConfig:
    """Grid search maximizing Youden's J on pooled calibration recordings.

    ``patients`` maps a patient id to its recordings, each a pair of
    (ictal probabilities, true labels). Smoothing runs per recording and the
    results are pooled. Ties go to the smaller threshold, then smaller alpha.
    """
    recs = [(np.asarray(p, np.float64), np.asarray(y, np.int8))
            for pid in sorted(patients) for p, y in patients[pid] if len(p)]
    if not recs:
        raise NoCalibrationData("no calibration recordings supplied")
    truth = np.concatenate([y for _, y in recs])
    sma_s = np.concatenate([sma_scores(p, window) for p, _ in recs])
    theta_sma, j_sma = _best_theta(sma_s, truth, theta_grid)
    best = (-math.inf, alpha_grid[0], theta_grid[0])
    for alpha in alpha_grid:
        s = np.concatenate([ewma_scores(p, alpha) for p, _ in recs])
        theta, j = _best_theta(s, truth, theta_grid)
        if j > best[0] + TIE_TOL:
            best = (j, alpha, theta)
    degenerate = max(j_sma, best[0]) <= TIE_TOL
    if degenerate:
        warnings.warn("calibration data carry no signal; using the smallest grid values",
                      DegenerateCalibration, stacklevel=2)
    return SmoothingConfig(window, theta_sma, best[1], best[2], degenerate)


# --------------------------------------------------------------------------
# detection delay


def decision_lag(method: str, window: int = WINDOW, frag_s: float = FRAGMENT_S) -> float:
    """Seconds between a fragment's start and the moment its decision exists."""
    return (window - 1) * frag_s if method == "hmm" else 0.0


def detection_delay(
    decisions: Sequence[int],
    annotations: Sequence[SeizureAnnotation],
    frag_s: float = FRAGMENT_S,
    method: str = "sma",
    window: int = WINDOW,
) -> list[float | None]:
    """Per-seizure delay in seconds, or None for a missed seizure.

    Decision k is timestamped at k * frag_s plus the decoding lag of the
    method. The first positive decision for a fragment overlapping the
    seizure counts; delay = max(0, timestamp - onset).
    """
    d = np.asarray(decisions)
    lag = decision_lag(method, window, frag_s)
    out: list[float | None] = []
    for ann in annotations:
        first = max(0, math.floor(ann.start_s / frag_s))
        last = min(len(d), math.ceil(ann.end_s / frag_s))
        hits = np.flatnonzero(d[first:last] == 1) if last > first else []
        if len(hits) == 0:
            out.append(None)
            continue
        t = (first + int(hits[0])) * frag_s + lag
        out.append(max(0.0, t - ann.start_s))
    return out
