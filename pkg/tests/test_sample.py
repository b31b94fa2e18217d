import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afmsim.sample import (
    GeneratorSurface,
    GridSurface,
    NonFiniteHeight,
    NonRectangular,
    OutOfBounds,
    ParseError,
    RasterPlan,
    SampleError,
    ideal_calibration_grid,
    load_heightmap,
    quasi_sinusoid,
    sample_to_grid,
    write_heightmap,
)

H = 28e-9
P = 1e-6


def test_grid_levels_and_steps():
    s = ideal_calibration_grid(H, P)
    assert s(0.1 * P) - s(0.6 * P) == H
    assert s(0.0) == H and s(0.5 * P) == 0.0
    assert {s(x) for x in np.linspace(0, 3 * P, 301)} == {0.0, H}


@given(x=st.floats(0.0, 9e-6), k=st.integers(0, 5))
def test_grid_periodic(x, k):
    s = ideal_calibration_grid(H, P)
    frac = (x / P) % 1.0
    if min(frac, abs(frac - 0.5), 1 - frac) < 1e-6:
        return  # too close to a step for float shifts
    assert s(x + k * P) == s(x)


def test_zero_step_height_is_flat():
    s = ideal_calibration_grid(0.0, P)
    assert all(s(x) == 0.0 for x in np.linspace(0, 5 * P, 77))


def test_grid_rejects_bad_period():
    with pytest.raises(SampleError):
        ideal_calibration_grid(H, 0.0)


def test_sinusoid_origin_and_bound():
    A, Ps = 80e-9, 4e-6
    s = quasi_sinusoid(A, Ps)
    assert s(0.0) == 0.0
    xs = np.linspace(0, 2 * Ps, 4001)
    assert max(abs(s(x)) for x in xs) <= 1.1 * A
    # the triangle peaks a quarter of the way into its own period
    assert s(Ps / 40) == pytest.approx(A * math.sin(2 * math.pi / 40) + A / 10, rel=1e-12)


def test_sinusoid_without_triangle_at_quarter():
    s = quasi_sinusoid(80e-9, 4e-6)
    # at P/4 the triangle is half way through its own period, crossing zero
    assert s(1e-6) == pytest.approx(80e-9, rel=1e-12)


def test_raster_ordering():
    assert len(RasterPlan((0.0, 1.0), 1.0)) == 2
    with pytest.raises(SampleError):
        RasterPlan((1.0, 0.0), 1.0)
    with pytest.raises(SampleError):
        RasterPlan((0.0,), 0.0)


def test_two_by_two_heightmap(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("# dx=1e-9 dy=2e-9 scale=1e-9\n0,1\n2,3\n")
    g = load_heightmap(p)
    assert g.I_x == 1e-9 and g.I_y == 2e-9
    assert g.height_at(0.5e-9, 0.0) == pytest.approx(0.5e-9, rel=1e-15)
    assert g.height_at(1e-9, 2e-9) == pytest.approx(3e-9, rel=1e-15)


def test_midpoint_interpolation():
    g = GridSurface([[0.0, 2.0, 6.0]], 1.0, 1.0)
    f = g.line(0.0)
    assert f(0.5) == 1.0
    assert f(1.5) == 4.0
    assert f(2.0) == 6.0


@given(x=st.floats(0.0, 1.0))
def test_interpolation_formula(x):
    rng = np.random.default_rng(1)
    row = rng.normal(size=17)
    dx = 1.0 / 16
    g = GridSurface([row], dx, 1.0)
    j = min(int(x / dx), 15)
    f = x / dx - j
    ref = row[j] + f * (row[j + 1] - row[j])
    assert g.line(0.0)(x) == pytest.approx(ref, abs=1e-15)


def test_heightmap_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    g = GridSurface(rng.normal(size=(3, 9)) * 1e-8, 3.3e-9, 4.6e-9)
    p = tmp_path / "rt.csv"
    write_heightmap(g, p)
    back = load_heightmap(p)
    assert np.array_equal(back.heights, g.heights)
    assert (back.dx, back.dy) == (g.dx, g.dy)


def test_sampled_generator_exact_at_nodes():
    prof = quasi_sinusoid(80e-9, 4e-6)
    surf = GeneratorSurface(prof, 4e-6)
    g = sample_to_grid(surf, 401, [0.0, 4.6e-9])
    xs = np.linspace(0.0, 4e-6, 401)
    for k in (0, 17, 200, 400):
        assert g.line(4.6e-9)(xs[k]) == pytest.approx(prof(xs[k]), abs=1e-20)


def test_out_of_bounds():
    g = GridSurface([[0.0, 1.0]], 1.0, 1.0)
    with pytest.raises(OutOfBounds):
        g.height_at(2.0, 0.0)
    with pytest.raises(OutOfBounds):
        GeneratorSurface(lambda x: 0.0, 1.0).height_at(-0.1, 0.0)


@pytest.mark.parametrize(
    "text, exc",
    [
        ("", ParseError),
        ("dx=1 dy=1\n0,1\n", ParseError),
        ("# dx=1 dy=1\n", ParseError),
        ("# dx=1 dy=1\n0,x\n", ParseError),
        ("# dx=1 dy=1\n0,1\n2\n", NonRectangular),
        ("# dx=1 dy=1\n0,nan\n", NonFiniteHeight),
    ],
)
def test_heightmap_parse_errors(tmp_path, text, exc):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(exc):
        load_heightmap(p)


def test_grid_needs_two_columns():
    with pytest.raises(NonRectangular):
        GridSurface([[1.0]], 1.0, 1.0)
