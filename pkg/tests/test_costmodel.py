import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tcseizure.costmodel import (
    DEFAULT_IDLE_POWER_W,
    REFERENCE_LATENCY_MS,
    REFERENCE_POWER_W,
    OperatingPoint,
    calibrate_energy_per_mac,
    cost_json,
    count_static,
    estimate_energy,
    estimate_latency,
)
from tcseizure.tcresnet import build_tcresnet4, layer_specs


def test_static_counts():
    rep = count_static()
    assert rep.total_params == 9840
    assert rep.total_macs == 337968
    by_name = {layer.name: layer for layer in rep.layers}
    assert by_name["block.conv_sc"].macs == 384 * 32 == 12288
    assert [layer.params for layer in rep.layers if layer.params] == [768, 3456, 5184, 384, 48]
    assert count_static(build_tcresnet4()).to_dict() == rep.to_dict()
    assert count_static(layer_specs()).total_macs == rep.total_macs


def test_latency_example():
    lat = estimate_latency(count_static())
    # per-layer ceil(MACs / 16): 3072 + 5184 + 10368 + 768 + 3
    assert lat.cycles == 21123
    assert lat.latency_ms == pytest.approx(84.492)
    assert round(lat.latency_ms, 1) == 84.5
    assert lat.duty_cycle == pytest.approx(0.84492)
    assert REFERENCE_LATENCY_MS == 80.626


def test_latency_scaling():
    rep = count_static()
    base = estimate_latency(rep).latency_ms
    assert estimate_latency(rep, OperatingPoint(clock_hz=500_000)).latency_ms == pytest.approx(base / 2)
    one = estimate_latency(rep, OperatingPoint(mac_array=1))
    assert one.cycles == rep.total_macs
    assert one.latency_ms / base == pytest.approx(rep.total_macs / 21123)
    assert one.latency_ms / base == pytest.approx(16, rel=1e-3)


def test_energy_calibration_example():
    rep = count_static()
    e = calibrate_energy_per_mac(rep)
    assert e == pytest.approx((495e-9 - 100e-9) / (10 * 337968), rel=1e-12)
    assert e == pytest.approx(1.17e-13, rel=1e-2)
    op = OperatingPoint(energy_per_mac_j=e)
    assert estimate_energy(rep, op) == pytest.approx(REFERENCE_POWER_W, rel=1e-3)


def test_energy_zero_rate_and_linearity():
    rep = count_static()
    assert estimate_energy(rep, OperatingPoint(inference_rate_hz=0, energy_per_mac_j=1e-12)) == DEFAULT_IDLE_POWER_W
    p = [estimate_energy(rep, OperatingPoint(inference_rate_hz=r, energy_per_mac_j=1e-12, idle_power_w=0))
         for r in (1, 2, 5)]
    assert p[1] == pytest.approx(2 * p[0]) and p[2] == pytest.approx(5 * p[0])


@given(st.integers(1, 8), st.floats(1e3, 1e8))
def test_cycles_formula(n, clock):
    rep = count_static()
    lat = estimate_latency(rep, OperatingPoint(mac_array=n, clock_hz=clock))
    assert lat.cycles == sum(math.ceil(layer.macs / (n * n)) for layer in rep.layers)
    assert lat.latency_ms == pytest.approx(1e3 * lat.cycles / clock)


def test_operating_point_validation():
    with pytest.raises(ValueError):
        OperatingPoint(mac_array=0)
    with pytest.raises(ValueError):
        OperatingPoint(idle_power_w=-1)
    with pytest.raises(ValueError):
        calibrate_energy_per_mac(count_static(), target_power_w=50e-9)


def test_cost_json():
    d = json.loads(cost_json(count_static(), OperatingPoint()))
    assert d["total_macs"] == 337968 and d["cycles"] == 21123
    assert d["reference"] == {"latency_ms": 80.626, "power_w": 495e-9}
