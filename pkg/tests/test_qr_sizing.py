import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aalhub.qr_sizing import (
    GOLDEN_RATIO,
    QrSizingInput,
    ScanConditions,
    ccd_dimensions,
    data_density_factor,
    distance_factor,
    format_report,
    min_qr_size,
    min_size_camera,
    min_size_environment,
)

ALL_CONDITIONS = ScanConditions(poor_lighting=True, mid_light_colored_code=True,
                                not_front_on=True)


# --- factor operations --------------------------------------------------------


def test_density_factor_values():
    assert data_density_factor(21) == pytest.approx(0.84)
    assert data_density_factor(25) == pytest.approx(1.0)
    assert data_density_factor(29) == pytest.approx(1.16)


def test_density_factor_rejects_nonpositive():
    with pytest.raises(ValueError):
        data_density_factor(0)


def test_distance_factor_values():
    assert distance_factor(ScanConditions()) == 10
    assert distance_factor(ScanConditions(poor_lighting=True)) == 9
    assert distance_factor(ALL_CONDITIONS) == 7


def test_environment_bound_values():
    assert min_size_environment(300, 10, 0.84) == pytest.approx(25.2)
    assert min_size_environment(250, 10, 0.84) == pytest.approx(21.0)
    assert min_size_environment(300, 7, 0.84) == pytest.approx(36.0)


def test_ccd_dimensions_solution():
    w, h = ccd_dimensions(12_000_000, GOLDEN_RATIO)
    # frozen from independent numeric solution of w*h = r, w = phi*h
    assert w == pytest.approx(4406.405, abs=0.05)
    assert h == pytest.approx(2723.308, abs=0.05)
    assert w * h == pytest.approx(12_000_000, rel=1e-6)
    assert w / h == pytest.approx(GOLDEN_RATIO, rel=1e-9)


def test_ccd_trivial_sensors():
    w, h = ccd_dimensions(GOLDEN_RATIO, GOLDEN_RATIO)
    assert (w, h) == (pytest.approx(GOLDEN_RATIO), pytest.approx(1.0))
    assert ccd_dimensions(1_000_000, 1.0) == (pytest.approx(1000.0),
                                              pytest.approx(1000.0))


def test_camera_bound_values():
    assert min_size_camera(10, 21, 340, 4406.405) == pytest.approx(16.2037, abs=1e-3)
    assert min_size_camera(10, 21, 340, 210) == pytest.approx(340.0)
    assert min_size_camera(10, 21, 680, 4406.405) == pytest.approx(32.407, abs=1e-2)


# --- composition ---------------------------------------------------------------


def test_default_composition():
    result = min_qr_size(QrSizingInput())
    assert result.k_den == pytest.approx(0.84)
    assert result.k_dis == 10
    assert result.l_min1_mm == pytest.approx(25.2, abs=0.05)
    assert result.l_min2_mm == pytest.approx(16.2, abs=0.1)
    assert result.l_min_mm == pytest.approx(25.2, abs=0.05)
    assert result.l_min_mm == max(result.l_min1_mm, result.l_min2_mm)


def test_low_resolution_regime_camera_bound_dominates():
    result = min_qr_size(QrSizingInput(resolution_pixels=500_000))
    assert result.l_min2_mm > result.l_min1_mm
    assert result.l_min_mm == result.l_min2_mm


def test_input_validation():
    with pytest.raises(ValueError):
        QrSizingInput(d_scan_mm=0)
    with pytest.raises(ValueError):
        QrSizingInput(fov_mm=-1)
    with pytest.raises(ValueError):
        QrSizingInput(modules_per_side=29)   # composed calculator: 21/25 only


# --- linearity / monotonicity properties -----------------------------------------


def test_environment_bound_linear_in_distance():
    base = min_size_environment(300, 10, 0.84)
    assert min_size_environment(600, 10, 0.84) == pytest.approx(2 * base)


def test_camera_bound_linear_in_fov_and_density():
    base = min_size_camera(10, 21, 340, 4406.405)
    assert min_size_camera(10, 21, 170, 4406.405) == pytest.approx(base / 2)
    assert min_size_camera(20, 21, 340, 4406.405) == pytest.approx(2 * base)


def test_monotonicity_over_random_inputs():
    rng = random.Random(1234)
    for _ in range(1000):
        inputs = QrSizingInput(
            d_scan_mm=rng.uniform(50, 2000),
            conditions=ScanConditions(
                poor_lighting=rng.random() < 0.5,
                mid_light_colored_code=rng.random() < 0.5,
                not_front_on=rng.random() < 0.5),
            modules_per_side=rng.choice((21, 25)),
            pixels_per_module=rng.randint(1, 40),
            fov_mm=rng.uniform(50, 2000),
            resolution_pixels=rng.uniform(1e5, 5e7),
            aspect_phi=rng.uniform(0.5, 3.0),
        )
        result = min_qr_size(inputs)
        assert result.l_min_mm >= result.l_min1_mm
        assert result.l_min_mm >= result.l_min2_mm
        assert result.l_min_mm in (result.l_min1_mm, result.l_min2_mm)
        assert result.ccd_w_px * result.ccd_h_px == pytest.approx(
            inputs.resolution_pixels, rel=1e-6)
        assert result.ccd_w_px / result.ccd_h_px == pytest.approx(
            inputs.aspect_phi, rel=1e-9)

        # adding any adverse condition never shrinks the answer
        if not inputs.conditions.poor_lighting:
            worse = min_qr_size(QrSizingInput(
                d_scan_mm=inputs.d_scan_mm,
                conditions=ScanConditions(
                    poor_lighting=True,
                    mid_light_colored_code=inputs.conditions.mid_light_colored_code,
                    not_front_on=inputs.conditions.not_front_on),
                modules_per_side=inputs.modules_per_side,
                pixels_per_module=inputs.pixels_per_module,
                fov_mm=inputs.fov_mm,
                resolution_pixels=inputs.resolution_pixels,
                aspect_phi=inputs.aspect_phi))
            assert worse.l_min_mm >= result.l_min_mm - 1e-12


@settings(max_examples=200)
@given(d_scan=st.floats(min_value=1, max_value=1e5),
       scale=st.floats(min_value=1.1, max_value=10))
def test_doubling_distance_scales_environment_bound(d_scan, scale):
    base = min_size_environment(d_scan, 10, 0.84)
    scaled = min_size_environment(d_scan * scale, 10, 0.84)
    assert scaled == pytest.approx(base * scale, rel=1e-9)


# --- report ---------------------------------------------------------------------


def test_report_contains_answer_and_reference_claim():
    inputs = QrSizingInput()
    report = format_report(inputs, min_qr_size(inputs))
    assert "25.2 mm" in report
    assert "16.2 mm" in report
    assert "at least 21x21 mm" in report
    assert "250 mm scan distance" in report
    assert "21.0 mm" in report
