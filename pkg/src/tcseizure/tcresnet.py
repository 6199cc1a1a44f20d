"""TC-ResNet4 in NumPy: float training, batch-norm folding, fixed-point inference.

Graph (input 16 x 128)::

    conv0   16->16  k3 s2 p1                     -> 16 x 64
    block   main:  conv1 16->24 k9 s2 p4, BN, hardtanh
                   conv2 24->24 k9 s1 p4, BN
            short: conv_sc 16->24 k1 s2, BN, relu
            add, hardtanh                        -> 24 x 32
    global average pool, dropout                 -> 24
    fc      24->2 (no bias)                      -> 2

Convolutions carry no bias until batch norm is folded into them, which keeps
the deployable weight count at 9,840.

Three execution paths share the same parameters:

* float (``qconfig is None``): batch-norm uses batch statistics in training
  and running statistics otherwise.
* fake-quant (``qconfig`` set): each conv+BN pair is folded on the fly with
  running statistics, folded weights/biases and all intermediate features
  are fake-quantized, gradients use the straight-through estimator.
* integer (:class:`QuantizedTcResNet`): codes only, wide accumulators,
  one requantization per layer; bit-identical to the fake-quant path.
"""

from __future__ import annotations

import copy
import json
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quantize import (
    QTensor,
    QuantSpec,
    fake_quant_with_mask,
    fit_exponent,
    quantize,
    rounding_shift,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
OBSERVER_MOMENTUM = 0.1
ACCUMULATOR_BITS = 32

# conv+BN units: (conv name, bn name)
CONV_BN_UNITS = (
    ("block.conv1", "block.bn1"),
    ("block.conv2", "block.bn2"),
    ("block.conv_sc", "block.bn_sc"),
)
# fake-quant points on features, in execution order
FEATURE_POINTS = ("input", "conv0", "block.main1", "block.main2", "block.short",
                  "block.out", "pool")


class ShapeMismatch(ValueError):
    pass


class UnfittedBatchNorm(ValueError):
    pass


class SaturationOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_length: int = 0
    out_length: int = 0

    @property
    def out_shape(self) -> tuple[int, ...]:
        if self.kind in ("dropout", "linear"):
            return (self.out_channels,)
        return (self.out_channels, self.out_length)

    @property
    def params(self) -> int:
        if self.kind == "conv1d":
            return self.out_channels * self.in_channels * self.kernel
        if self.kind == "linear":
            return self.out_channels * self.in_channels
        return 0

    @property
    def macs(self) -> int:
        if self.kind == "conv1d":
            return self.out_length * self.params
        if self.kind == "linear":
            return self.params
        return 0


def conv_out_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def layer_specs(strict_63: bool = False, in_channels: int = 16, length: int = 128,
                width: int = 24, n_classes: int = 2) -> list[LayerSpec]:
    """Table of layers in execution order with derived shapes."""
    p0 = 0 if strict_63 else 1
    l0 = conv_out_length(length, 3, 2, p0)
    l1 = conv_out_length(l0, 9, 2, 4)
    l2 = conv_out_length(l1, 9, 1, 4)
    ls = conv_out_length(l0, 1, 2, 0)
    if ls != l2:
        raise ShapeMismatch(f"residual branches disagree: {l2} vs {ls}")
    c = in_channels
    return [
        LayerSpec("input", "input", c, c, in_length=length, out_length=length),
        LayerSpec("conv0", "conv1d", c, c, 3, 2, p0, length, l0),
        LayerSpec("block.conv1", "conv1d", c, width, 9, 2, 4, l0, l1),
        LayerSpec("block.bn1", "batchnorm1d", width, width, in_length=l1, out_length=l1),
        LayerSpec("block.act1", "hardtanh", width, width, in_length=l1, out_length=l1),
        LayerSpec("block.conv2", "conv1d", width, width, 9, 1, 4, l1, l2),
        LayerSpec("block.bn2", "batchnorm1d", width, width, in_length=l2, out_length=l2),
        LayerSpec("block.conv_sc", "conv1d", c, width, 1, 2, 0, l0, ls),
        LayerSpec("block.bn_sc", "batchnorm1d", width, width, in_length=ls, out_length=ls),
        LayerSpec("block.act_sc", "relu", width, width, in_length=ls, out_length=ls),
        LayerSpec("block.act_out", "hardtanh", width, width, in_length=l2, out_length=l2),
        LayerSpec("block.add", "residual_add", width, width, in_length=l2, out_length=l2),
        LayerSpec("pool", "global_avg_pool", width, width, in_length=l2, out_length=1),
        LayerSpec("dropout", "dropout", width, width),
        LayerSpec("fc", "linear", width, n_classes),
    ]


# --------------------------------------------------------------------------
# functional ops on (N, C, L) arrays


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]  # N, C, L, k
    n, c, lo, k = win.shape
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n, c * k, lo)


def conv1d(x, w, b=None, stride=1, padding=0):
    """Returns (y, cols); cols are kept for the backward pass."""
    cols = _im2col(x, w.shape[2], stride, padding)
    y = np.matmul(w.reshape(w.shape[0], -1), cols)
    if b is not None:
        y = y + b[None, :, None]
    return y, cols


def conv1d_backward(gy, cols, w, x_shape, stride, padding):
    o, c, k = w.shape
    n, _, length = x_shape
    lo = gy.shape[2]
    gw = np.einsum("nol,nkl->ok", gy, cols).reshape(w.shape)
    gcols = np.matmul(w.reshape(o, -1).T, gy).reshape(n, c, k, lo)
    gxp = np.zeros((n, c, length + 2 * padding), dtype=gy.dtype)
    for j in range(k):
        gxp[:, :, j : j + stride * (lo - 1) + 1 : stride] += gcols[:, :, j, :]
    gx = gxp[:, :, padding : padding + length] if padding else gxp
    return gx, gw, gy.sum(axis=(0, 2))


def fold_conv_bn(w, gamma, beta, mean, var, eps=BN_EPS):
    g = gamma / np.sqrt(var + eps)
    return w * g[:, None, None], beta - mean * g


def hardtanh(x):
    return np.clip(x, -1.0, 1.0)


# --------------------------------------------------------------------------
# model


@dataclass
class QConfig:
    weight_bits: int = 4
    feature_bits: int | None = None  # defaults to weight_bits
    bias_bits: int | None = None  # defaults to weight_bits

    @property
    def fbits(self) -> int:
        return self.feature_bits or self.weight_bits

    @property
    def bbits(self) -> int:
        return self.bias_bits or self.weight_bits


@dataclass
class TcResNet4:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    strict_63: bool = False
    folded: bool = False
    dropout: float = 0.5
    qconfig: QConfig | None = None
    observers: dict[str, float] = field(default_factory=dict)
    last_shapes: dict = field(default_factory=dict, repr=False)
    tap: Callable[[str, np.ndarray], None] | None = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    # -- structure ---------------------------------------------------------

    @property
    def layers(self) -> list[LayerSpec]:
        return layer_specs(self.strict_63)

    @property
    def conv_layers(self) -> dict[str, LayerSpec]:
        return {s.name: s for s in self.layers if s.kind == "conv1d"}

    def param_count(self) -> int:
        """Deployable weights (conv and linear kernels), as tabulated."""
        return sum(s.params for s in self.layers)

    def trainable_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> TcResNet4:
        cache, tap = self._cache, self.tap
        self._cache, self.tap = {}, None
        try:
            return copy.deepcopy(self)
        finally:
            self._cache, self.tap = cache, tap

    # -- float / fake-quant forward -----------------------------------------

    def _feature(self, name, x, train, record):
        if self.tap is not None:
            self.tap(name, x)
        if self.qconfig is None:
            return x
        if train:
            peak = float(np.max(np.abs(x))) if x.size else 0.0
            old = self.observers.get(name)
            self.observers[name] = peak if old is None else (
                (1 - OBSERVER_MOMENTUM) * old + OBSERVER_MOMENTUM * peak
            )
        if name not in self.observers:
            raise UnfittedBatchNorm(f"no activation range observed for {name!r}")
        spec = QuantSpec(self.qconfig.fbits,
                         fit_exponent(self.observers[name], self.qconfig.fbits))
        y, mask = fake_quant_with_mask(x, spec)
        if record:
            self._cache["fq:" + name] = mask
        return y

    def _conv_unit(self, conv, bn, x, train, record):
        """conv (+ BN) in whichever mode the model is in."""
        spec = self.conv_layers[conv]
        w = self.params[conv + ".weight"]
        cache = {"x_shape": x.shape}
        if self.folded or bn is None:
            b = self.params.get(conv + ".bias")
            if self.qconfig is not None:
                w, cache["mw"] = fake_quant_with_mask(
                    w, self._weight_spec(w, self.qconfig.weight_bits))
                if b is not None:
                    b, cache["mb"] = fake_quant_with_mask(
                        b, self._weight_spec(b, self.qconfig.bbits))
            y, cols = conv1d(x, w, b, spec.stride, spec.padding)
            cache.update(mode="plain", cols=cols, w_used=w, has_bias=b is not None)
        elif self.qconfig is not None:
            gamma, beta = self.params[bn + ".gamma"], self.params[bn + ".beta"]
            if train:
                raw, _ = conv1d(x, w, None, spec.stride, spec.padding)
                self._update_running(bn, raw)
            mean, var = self.buffers[bn + ".running_mean"], self.buffers[bn + ".running_var"]
            wf, bf = fold_conv_bn(w, gamma, beta, mean, var)
            wq, mw = fake_quant_with_mask(wf, self._weight_spec(wf, self.qconfig.weight_bits))
            bq, mb = fake_quant_with_mask(bf, self._weight_spec(bf, self.qconfig.bbits))
            y, cols = conv1d(x, wq, bq, spec.stride, spec.padding)
            cache.update(mode="qat", cols=cols, w_used=wq, mw=mw, mb=mb,
                         g=gamma / np.sqrt(var + BN_EPS), sd=np.sqrt(var + BN_EPS),
                         mean=mean)
        else:
            y, cols = conv1d(x, w, None, spec.stride, spec.padding)
            gamma, beta = self.params[bn + ".gamma"], self.params[bn + ".beta"]
            if train:
                mu = y.mean(axis=(0, 2))
                var = y.var(axis=(0, 2))
                self._update_running(bn, y, mu, var)
            else:
                mu = self.buffers[bn + ".running_mean"]
                var = self.buffers[bn + ".running_var"]
            sd = np.sqrt(var + BN_EPS)
            xhat = (y - mu[None, :, None]) / sd[None, :, None]
            cache.update(mode="bn", cols=cols, w_used=w, xhat=xhat, sd=sd,
                         batch_stats=train)
            y = gamma[None, :, None] * xhat + beta[None, :, None]
        if record:
            self._cache[conv] = cache
        return y

    def _update_running(self, bn, y, mu=None, var=None):
        mu = y.mean(axis=(0, 2)) if mu is None else mu
        var = y.var(axis=(0, 2)) if var is None else var
        m = y.shape[0] * y.shape[2]
        unbiased = var * m / max(m - 1, 1)
        rm, rv = bn + ".running_mean", bn + ".running_var"
        self.buffers[rm] = (1 - BN_MOMENTUM) * self.buffers[rm] + BN_MOMENTUM * mu
        self.buffers[rv] = (1 - BN_MOMENTUM) * self.buffers[rv] + BN_MOMENTUM * unbiased
        self.buffers[bn + ".fitted"] = np.ones(1)

    @staticmethod
    def _weight_spec(t, bits):
        return QuantSpec(bits, fit_exponent(float(np.max(np.abs(t))), bits))

    def forward(self, x, *, train=False, rng=None, record=None):
        """Logits (N, 2) for input fragments (N, 16, 128) or a single (16, 128)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        first = self.layers[0]
        if x.shape[1:] != (first.in_channels, first.in_length):
            raise ShapeMismatch(
                f"expected (*, {first.in_channels}, {first.in_length}), got {x.shape}"
            )
        record = train if record is None else record
        if record:
            self._cache = {}
        shapes = {"input": x.shape[1:]}

        x = self._feature("input", x, train, record)
        h0 = self._conv_unit("conv0", None, x, train, record)
        h0 = self._feature("conv0", h0, train, record)
        shapes["conv0"] = h0.shape[1:]

        pre1 = self._conv_unit("block.conv1", "block.bn1", h0, train, record)
        m1 = self._feature("block.main1", hardtanh(pre1), train, record)
        shapes["block.main1"] = m1.shape[1:]
        m2 = self._conv_unit("block.conv2", "block.bn2", m1, train, record)
        m2 = self._feature("block.main2", m2, train, record)
        shapes["block.main2"] = m2.shape[1:]
        pre_s = self._conv_unit("block.conv_sc", "block.bn_sc", h0, train, record)
        s = self._feature("block.short", np.maximum(pre_s, 0), train, record)
        r_pre = m2 + s
        r = self._feature("block.out", hardtanh(r_pre), train, record)
        shapes["block.out"] = r.shape[1:]

        g = r.mean(axis=2)
        g = self._feature("pool", g, train, record)
        shapes["pool"] = (g.shape[1], 1)
        if train and self.dropout > 0:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            keep = (rng.random(g.shape) >= self.dropout) / (1.0 - self.dropout)
        else:
            keep = None
        gd = g * keep if keep is not None else g
        wfc, mfc = self.params["fc.weight"], None
        if self.qconfig is not None:
            wfc, mfc = fake_quant_with_mask(
                wfc, self._weight_spec(wfc, self.qconfig.weight_bits))
        logits = gd @ wfc.T
        shapes["logits"] = logits.shape[1:]
        self.last_shapes = shapes
        if record:
            self._cache.update(pre1=pre1, pre_s=pre_s, r_pre=r_pre, r_len=r.shape[2],
                               gd=gd, keep=keep, wfc=wfc, mfc=mfc)
        return logits[0] if single else logits

    __call__ = forward

    # -- backward -------------------------------------------------------------

    def _feature_back(self, name, grad):
        mask = self._cache.get("fq:" + name)
        return grad if mask is None else grad * mask

    def _conv_unit_back(self, conv, bn, gy, grads):
        c = self._cache[conv]
        spec = self.conv_layers[conv]
        w = self.params[conv + ".weight"]
        if c["mode"] == "bn":
            gamma = self.params[bn + ".gamma"]
            xhat, sd = c["xhat"], c["sd"]
            grads[bn + ".gamma"] = (gy * xhat).sum(axis=(0, 2))
            grads[bn + ".beta"] = gy.sum(axis=(0, 2))
            gxhat = gy * gamma[None, :, None]
            if c["batch_stats"]:
                m = gy.shape[0] * gy.shape[2]
                gy = (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                ) / (m * sd[None, :, None])
            else:
                gy = gxhat / sd[None, :, None]
        gx, gw, gb = conv1d_backward(gy, c["cols"], c["w_used"], c["x_shape"],
                                     spec.stride, spec.padding)
        if c["mode"] == "qat":
            gw = gw * c["mw"]
            gb = gb * c["mb"]
            g = c["g"]
            grads[conv + ".weight"] = gw * g[:, None, None]
            dg = (gw * w).sum(axis=(1, 2)) - gb * c["mean"]
            grads[bn + ".gamma"] = dg / c["sd"]
            grads[bn + ".beta"] = gb
        elif c["mode"] == "plain":
            grads[conv + ".weight"] = gw * c["mw"] if "mw" in c else gw
            if c["has_bias"]:
                grads[conv + ".bias"] = gb * c["mb"] if "mb" in c else gb
        else:
            grads[conv + ".weight"] = gw
        return gx

    def backward(self, grad_logits):
        """Parameter gradients for the recorded forward pass."""
        if not self._cache:
            raise RuntimeError("backward needs a recorded forward pass")
        c = self._cache
        grad_logits = np.asarray(grad_logits, dtype=np.float64)
        if grad_logits.ndim == 1:
            grad_logits = grad_logits[None]
        grads: dict[str, np.ndarray] = {}
        grads["fc.weight"] = grad_logits.T @ c["gd"]
        if c["mfc"] is not None:
            grads["fc.weight"] = grads["fc.weight"] * c["mfc"]
        gg = grad_logits @ c["wfc"]
        if c["keep"] is not None:
            gg = gg * c["keep"]
        gg = self._feature_back("pool", gg)
        gr = np.repeat(gg[:, :, None] / c["r_len"], c["r_len"], axis=2)
        gr = self._feature_back("block.out", gr)
        gr = gr * (np.abs(c["r_pre"]) <= 1.0)
        gs = self._feature_back("block.short", gr) * (c["pre_s"] > 0)
        gh0 = self._conv_unit_back("block.conv_sc", "block.bn_sc", gs, grads)
        gm2 = self._feature_back("block.main2", gr)
        gm1 = self._conv_unit_back("block.conv2", "block.bn2", gm2, grads)
        gm1 = self._feature_back("block.main1", gm1) * (np.abs(c["pre1"]) <= 1.0)
        gh0 = gh0 + self._conv_unit_back("block.conv1", "block.bn1", gm1, grads)
        gh0 = self._feature_back("conv0", gh0)
        self._conv_unit_back("conv0", None, gh0, grads)
        for name, p in self.params.items():
            grads.setdefault(name, np.zeros_like(p))
        return grads


def build_tcresnet4(seed: int = 0, *, strict_63: bool = False, dropout: float = 0.5,
                    qconfig: QConfig | None = None) -> TcResNet4:
    """Fresh TC-ResNet4 with Kaiming-uniform (fan-in) kernels and identity BN."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for spec in layer_specs(strict_63):
        if spec.kind == "conv1d":
            fan_in = spec.in_channels * spec.kernel
            bound = math.sqrt(6.0 / fan_in)
            params[spec.name + ".weight"] = rng.uniform(
                -bound, bound, (spec.out_channels, spec.in_channels, spec.kernel))
        elif spec.kind == "linear":
            bound = math.sqrt(6.0 / spec.in_channels)
            params[spec.name + ".weight"] = rng.uniform(
                -bound, bound, (spec.out_channels, spec.in_channels))
        elif spec.kind == "batchnorm1d":
            params[spec.name + ".gamma"] = np.ones(spec.out_channels)
            params[spec.name + ".beta"] = np.zeros(spec.out_channels)
            buffers[spec.name + ".running_mean"] = np.zeros(spec.out_channels)
            buffers[spec.name + ".running_var"] = np.ones(spec.out_channels)
    return TcResNet4(params=params, buffers=buffers, strict_63=strict_63,
                     dropout=dropout, qconfig=qconfig)


def fold_batchnorm(model: TcResNet4, *, require_fitted: bool = True) -> TcResNet4:
    """Merge each BN into the preceding conv as adjusted weights plus a bias."""
    if model.folded:
        raise ValueError("model is already folded")
    out = model.copy()
    for conv, bn in CONV_BN_UNITS:
        if require_fitted and (bn + ".fitted") not in model.buffers:
            raise UnfittedBatchNorm(f"{bn} has no running statistics")
        w, b = fold_conv_bn(
            model.params[conv + ".weight"],
            model.params[bn + ".gamma"],
            model.params[bn + ".beta"],
            model.buffers[bn + ".running_mean"],
            model.buffers[bn + ".running_var"],
        )
        out.params[conv + ".weight"] = w
        out.params[conv + ".bias"] = b
        for key in (".gamma", ".beta"):
            del out.params[bn + key]
        for key in (".running_mean", ".running_var", ".fitted"):
            out.buffers.pop(bn + key, None)
    out.folded = True
    return out


# --------------------------------------------------------------------------
# integer inference


@dataclass
class QuantizedTcResNet:
    weights: dict[str, QTensor]
    biases: dict[str, QTensor]
    features: dict[str, QuantSpec]
    strict_63: bool = False
    mac_count: int = 0

    @property
    def layers(self) -> list[LayerSpec]:
        return layer_specs(self.strict_63)

    @property
    def logit_exponent(self) -> int:
        return self.features["pool"].exponent + self.weights["fc"].spec.exponent

    def quantize_input(self, x: np.ndarray) -> QTensor:
        return quantize(x, self.features["input"])

    def forward(self, codes: np.ndarray | QTensor) -> np.ndarray:
        """Integer logits at scale ``2**logit_exponent`` for input codes."""
        if isinstance(codes, QTensor):
            codes = codes.codes
        x = np.asarray(codes, dtype=np.int64)
        single = x.ndim == 2
        if single:
            x = x[None]
        convs = {s.name: s for s in self.layers if s.kind == "conv1d"}
        f = self.features

        def conv(name, xc, x_spec, out_spec, act=None):
            spec = convs[name]
            w = self.weights[name]
            cols = _im2col(xc, spec.kernel, spec.stride, spec.padding)
            acc = np.matmul(w.codes.reshape(w.codes.shape[0], -1), cols)
            self.mac_count += acc.size * cols.shape[1]
            e_acc = x_spec.exponent + w.spec.exponent
            terms = [(acc, e_acc)]
            if name in self.biases:
                b = self.biases[name]
                terms.append((np.broadcast_to(b.codes[None, :, None], acc.shape),
                              b.spec.exponent))
            return _requantize(terms, out_spec, act)

        h0 = conv("conv0", x, f["input"], f["conv0"])
        m1 = conv("block.conv1", h0, f["conv0"], f["block.main1"], "hardtanh")
        m2 = conv("block.conv2", m1, f["block.main1"], f["block.main2"])
        s = conv("block.conv_sc", h0, f["conv0"], f["block.short"], "relu")
        r = _requantize([(m2, f["block.main2"].exponent), (s, f["block.short"].exponent)],
                        f["block.out"], "hardtanh")
        length = r.shape[2]
        if length & (length - 1):
            raise ShapeMismatch(f"pooling length {length} is not a power of two")
        g = _requantize([(r.sum(axis=2), f["block.out"].exponent - int(math.log2(length)))],
                        f["pool"])
        wfc = self.weights["fc"].codes
        logits = g @ wfc.T
        self.mac_count += g.shape[0] * wfc.size
        _check_accumulator(logits)
        return logits[0] if single else logits

    __call__ = forward

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Real-valued logits for real input, via the integer path."""
        return self.forward(self.quantize_input(x)) * math.ldexp(1.0, self.logit_exponent)


def _check_accumulator(acc: np.ndarray) -> None:
    limit = 1 << (ACCUMULATOR_BITS - 1)
    if acc.size and (acc.max() >= limit or acc.min() < -limit):
        raise SaturationOverflow(f"accumulator exceeds {ACCUMULATOR_BITS} bits")


def _requantize(terms, out_spec: QuantSpec, act: str | None = None) -> np.ndarray:
    """Sum integer terms given as (codes, exponent), apply ``act``, requantize."""
    e = min(t[1] for t in terms)
    if act == "hardtanh":
        # the clip bound 1.0 must be a whole number of accumulator steps
        e = min(e, 0)
    total = sum(np.asarray(c, dtype=np.int64) << (te - e) for c, te in terms)
    _check_accumulator(total)
    if act == "relu":
        total = np.maximum(total, 0)
    elif act == "hardtanh":
        bound = 1 << (-e)
        total = np.clip(total, -bound, bound)
    out = rounding_shift(total, out_spec.exponent - e)
    return np.clip(out, out_spec.qmin, out_spec.qmax)


def quantize_model(model: TcResNet4, qconfig: QConfig | None = None,
                   calibration: np.ndarray | None = None) -> QuantizedTcResNet:
    """Integer model from a folded float model.

    Feature ranges come from the model's QAT observers, or from a float pass
    over ``calibration`` data when the model was trained without QAT.
    """
    if not model.folded:
        raise ValueError("fold batch norm before quantizing")
    qconfig = qconfig or model.qconfig
    if qconfig is None:
        raise ValueError("no quantization config given")
    m = model.copy()
    m.qconfig = qconfig
    if calibration is not None:
        m.observers = _calibrate_ranges(model, calibration)
    missing = [p for p in FEATURE_POINTS if p not in m.observers]
    if missing:
        raise UnfittedBatchNorm(f"no activation ranges for {missing}")
    weights, biases = {}, {}
    for spec in m.layers:
        if spec.kind not in ("conv1d", "linear"):
            continue
        w = m.params[spec.name + ".weight"]
        weights[spec.name] = quantize(w, m._weight_spec(w, qconfig.weight_bits))
        b = m.params.get(spec.name + ".bias")
        if b is not None:
            biases[spec.name] = quantize(b, m._weight_spec(b, qconfig.bbits))
    features = {
        name: QuantSpec(qconfig.fbits, fit_exponent(m.observers[name], qconfig.fbits))
        for name in FEATURE_POINTS
    }
    return QuantizedTcResNet(weights, biases, features, strict_63=m.strict_63)


def _calibrate_ranges(model: TcResNet4, data: np.ndarray) -> dict[str, float]:
    """Largest |activation| at each feature point over a float forward pass."""
    probe = model.copy()
    probe.qconfig = None
    peaks: dict[str, float] = {}

    def tap(name, x):
        peaks[name] = max(peaks.get(name, 0.0), float(np.max(np.abs(x))) if x.size else 0.0)

    probe.tap = tap
    probe.forward(data)
    return peaks


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: TcResNet4, path: str | Path, extra: dict | None = None) -> None:
    """Directory with manifest.json plus one little-endian float64 file per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for group, table in (("param", model.params), ("buffer", model.buffers)):
        for i, (name, arr) in enumerate(sorted(table.items())):
            fname = f"{group}_{i:02d}.f64"
            np.asarray(arr, dtype="<f8").tofile(path / fname)
            tensors[name] = {"group": group, "file": fname, "shape": list(arr.shape)}
    manifest = {
        "architecture": "tc-resnet4",
        "strict_63": model.strict_63,
        "folded": model.folded,
        "dropout": model.dropout,
        "qconfig": asdict(model.qconfig) if model.qconfig else None,
        "observers": model.observers,
        "tensors": tensors,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_model(path: str | Path) -> TcResNet4:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    params, buffers = {}, {}
    for name, entry in manifest["tensors"].items():
        arr = np.fromfile(path / entry["file"], dtype="<f8")
        arr = arr.reshape(entry["shape"])
        (params if entry["group"] == "param" else buffers)[name] = arr
    q = manifest.get("qconfig")
    return TcResNet4(
        params=params,
        buffers=buffers,
        strict_63=manifest["strict_63"],
        folded=manifest["folded"],
        dropout=manifest["dropout"],
        qconfig=QConfig(**q) if q else None,
        observers=dict(manifest.get("observers", {})),
    )


def _code_dtype(bits: int) -> str:
    return "<i1" if bits <= 8 else "<i2" if bits <= 16 else "<i4"


def save_quantized(qmodel: QuantizedTcResNet, path: str | Path) -> None:
    """Manifest with bit widths and scale exponents plus little-endian code files."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for group, table in (("weight", qmodel.weights), ("bias", qmodel.biases)):
        for name, q in table.items():
            dtype = _code_dtype(q.spec.bits)
            fname = f"{group}_{name}.{dtype[1:]}"
            q.codes.astype(dtype).tofile(path / fname)
            entries[f"{group}:{name}"] = {
                "file": fname, "dtype": dtype, "shape": list(q.shape),
                "bits": q.spec.bits, "exponent": q.spec.exponent,
            }
    manifest = {
        "architecture": "tc-resnet4-int",
        "strict_63": qmodel.strict_63,
        "tensors": entries,
        "features": {k: {"bits": s.bits, "exponent": s.exponent}
                     for k, s in qmodel.features.items()},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_quantized(path: str | Path) -> QuantizedTcResNet:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    weights, biases = {}, {}
    for key, e in manifest["tensors"].items():
        group, name = key.split(":", 1)
        codes = np.fromfile(path / e["file"], dtype=e["dtype"]).astype(np.int64)
        q = QTensor(codes.reshape(e["shape"]), QuantSpec(e["bits"], e["exponent"]))
        (weights if group == "weight" else biases)[name] = q
    features = {k: QuantSpec(v["bits"], v["exponent"])
                for k, v in manifest["features"].items()}
    return QuantizedTcResNet(weights, biases, features, strict_63=manifest["strict_63"])
