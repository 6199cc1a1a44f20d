"""Static parameter/MAC accounting and a first-order latency and power model."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

from .tcresnet import LayerSpec, layer_specs

# measured figures of the reference accelerator, reported next to our estimate
REFERENCE_LATENCY_MS = 80.626
REFERENCE_POWER_W = 495e-9
DEFAULT_IDLE_POWER_W = 100e-9


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    output_shape: tuple[int, ...]


@dataclass(frozen=True)
class CostReport:
    layers: tuple[LayerCost, ...]

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(layer) for layer in self.layers],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }


@dataclass(frozen=True)
class OperatingPoint:
    mac_array: int = 4  # N for an N x N array
    clock_hz: float = 250_000.0
    inference_rate_hz: float = 10.0
    energy_per_mac_j: float = 0.0
    idle_power_w: float = DEFAULT_IDLE_POWER_W

    def __post_init__(self) -> None:
        if self.mac_array < 1 or self.clock_hz <= 0:
            raise ValueError("mac_array and clock_hz must be positive")
        if self.inference_rate_hz < 0 or self.energy_per_mac_j < 0 or self.idle_power_w < 0:
            raise ValueError("rate, energy and idle power must be non-negative")

    @property
    def lanes(self) -> int:
        return self.mac_array * self.mac_array


@dataclass(frozen=True)
class LatencyEstimate:
    cycles: int
    latency_ms: float
    duty_cycle: float


def count_static(model_or_layers=None) -> CostReport:
    """Per-layer parameters and MACs for a model, a layer table or the default net."""
    if model_or_layers is None:
        layers = layer_specs()
    elif isinstance(model_or_layers, (list, tuple)):
        layers = model_or_layers
    else:
        layers = model_or_layers.layers
    return CostReport(tuple(_layer_cost(s) for s in layers))


def _layer_cost(s: LayerSpec) -> LayerCost:
    return LayerCost(s.name, s.kind, s.params, s.macs, s.out_shape)


def estimate_latency(report: CostReport, op: OperatingPoint = OperatingPoint()) -> LatencyEstimate:
    """Ideal-utilization cycles: every layer rounds up to whole array passes."""
    cycles = sum(math.ceil(layer.macs / op.lanes) for layer in report.layers)
    latency_s = cycles / op.clock_hz
    return LatencyEstimate(cycles, 1e3 * latency_s, latency_s * op.inference_rate_hz)


def estimate_energy(report: CostReport, op: OperatingPoint = OperatingPoint()) -> float:
    """Average power in watts: dynamic MAC energy at the inference rate plus idle."""
    return op.inference_rate_hz * report.total_macs * op.energy_per_mac_j + op.idle_power_w


def calibrate_energy_per_mac(report: CostReport, target_power_w: float = REFERENCE_POWER_W,
                             op: OperatingPoint = OperatingPoint()) -> float:
    """Energy per MAC that makes :func:`estimate_energy` hit ``target_power_w``."""
    if op.inference_rate_hz <= 0 or report.total_macs == 0:
        raise ValueError("calibration needs a positive rate and a non-empty model")
    dynamic = target_power_w - op.idle_power_w
    if dynamic < 0:
        raise ValueError("idle power exceeds the target power")
    return dynamic / (op.inference_rate_hz * report.total_macs)


def cost_summary(report: CostReport, op: OperatingPoint) -> dict:
    lat = estimate_latency(report, op)
    return {
        **report.to_dict(),
        "operating_point": asdict(op),
        "cycles": lat.cycles,
        "latency_ms": lat.latency_ms,
        "duty_cycle": lat.duty_cycle,
        "average_power_w": estimate_energy(report, op),
        "reference": {"latency_ms": REFERENCE_LATENCY_MS, "power_w": REFERENCE_POWER_W},
    }


def cost_json(report: CostReport, op: OperatingPoint) -> str:
    return json.dumps(cost_summary(report, op), indent=1)
