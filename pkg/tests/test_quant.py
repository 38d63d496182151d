import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitacc.quant import (
    BitWidths,
    FixedQuantizedRow,
    PotQuantizedRow,
    aligned_pot_bitwidth,
    calibrate_scale,
    dequantize_row,
    fixed_levels,
    fixed_quantize,
    max_pot_shift,
    pot_grid,
    pot_quantize,
    round_half_away,
)

BITS = range(2, 9)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# -- alignment ---------------------------------------------------------------


@pytest.mark.parametrize("b, expected", [(4, 3), (8, 4), (2, 2)])
def test_aligned_examples(b, expected):
    assert aligned_pot_bitwidth(b) == expected


@pytest.mark.parametrize("b", BITS)
def test_aligned_matches_log_formula(b):
    bp = aligned_pot_bitwidth(b)
    assert bp == math.floor(math.log2(b)) + 1
    assert 2 ** (bp - 1) <= b


@pytest.mark.parametrize("b", [0, 1, 9, 16])
def test_aligned_domain(b):
    with pytest.raises(ValueError):
        aligned_pot_bitwidth(b)


def test_bitwidths_rejects_misaligned_pair():
    with pytest.raises(ValueError):
        BitWidths(4, 4)
    assert BitWidths.aligned(8) == BitWidths(8, 4)


# -- scale -------------------------------------------------------------------


@pytest.mark.parametrize("values, scale", [([0.3, -0.7, 0.1], 0.7), ([0, 0], 1.0), ([-2.5], 2.5)])
def test_calibrate_scale_examples(values, scale):
    assert calibrate_scale(values) == scale


def test_calibrate_scale_empty():
    with pytest.raises(ValueError):
        calibrate_scale([])


# -- fixed -------------------------------------------------------------------


def test_fixed_examples():
    r = fixed_quantize([0.5], 4, 0.5)
    assert r.q.tolist() == [7] and r.dequantize().tolist() == [0.5]
    for b in BITS:
        assert fixed_quantize([0.0], b, 3.3).q.tolist() == [0]
    r = fixed_quantize([0.2], 4, 1.0)
    assert r.q.tolist() == [1]
    assert r.dequantize()[0] == pytest.approx(1 / 7)


@pytest.mark.parametrize("bad", [[float("nan")], [float("inf")], [1.0, -float("inf")]])
def test_fixed_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        fixed_quantize(bad, 4, 1.0)
    with pytest.raises(ValueError):
        pot_quantize(bad, 3, 1.0)


def test_fixed_rejects_bad_scale_and_bits():
    with pytest.raises(ValueError):
        fixed_quantize([0.1], 4, 0.0)
    with pytest.raises(ValueError):
        fixed_quantize([0.1], 9, 1.0)


def test_round_half_away():
    x = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49999999999999994, -0.49999999999999994])
    assert round_half_away(x).tolist() == [-3, -2, -1, 1, 2, 3, 0, 0]


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=20), st.integers(2, 8), st.floats(1e-3, 1e3))
def test_fixed_properties(values, b, scale):
    lim = fixed_levels(b)
    r = fixed_quantize(values, b, scale)
    assert np.all(np.abs(r.q) <= lim)
    # idempotence
    assert np.array_equal(fixed_quantize(r.dequantize(), b, scale).q, r.q)
    # sign symmetry
    assert np.array_equal(fixed_quantize(-np.asarray(values), b, scale).q, -r.q)
    # nearest level over the whole grid
    grid = scale * np.arange(-lim, lim + 1) / lim
    v = np.asarray(values)
    chosen = np.abs(r.dequantize() - v)
    best = np.abs(grid[None, :] - v[:, None]).min(axis=1)
    assert np.all(chosen <= best + 1e-12 * max(1.0, scale))


@pytest.mark.parametrize("b", BITS)
def test_fixed_level_count(b):
    vals = np.linspace(-1.2, 1.2, 20001)
    assert len(np.unique(fixed_quantize(vals, b, 1.0).q)) == 2 ** b - 1


# -- PoT ---------------------------------------------------------------------


@pytest.mark.parametrize("value, expected", [(0.6, 0.5), (0.75, 0.5), (-1.4, -1.0)])
def test_pot_examples(value, expected):
    assert pot_quantize([value], 3, 1.0).dequantize().tolist() == [expected]


def test_pot_grid_b3():
    assert pot_grid(3).tolist() == [0.0, 0.25, 0.5, 1.0]
    assert max_pot_shift(3) == 2


def test_pot_ties_go_down():
    # midpoints between adjacent grid magnitudes and between 0 and the smallest step
    for bp in range(2, 9):
        g = pot_grid(bp)
        mids = (g[:-1] + g[1:]) / 2
        got = np.abs(pot_quantize(mids, bp, 1.0).dequantize())
        assert np.array_equal(got, g[:-1])


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=20), st.integers(2, 8), st.floats(1e-3, 1e3))
def test_pot_properties(values, bp, scale):
    r = pot_quantize(values, bp, scale)
    E = max_pot_shift(bp)
    assert np.all((r.exps >= 0) & (r.exps <= E))
    assert np.all(np.isin(r.signs, (-1, 0, 1)))
    deq = r.dequantize()
    grid = scale * np.concatenate((-pot_grid(bp)[::-1], pot_grid(bp)[1:]))
    assert np.all(np.isin(deq, grid))
    assert np.array_equal(pot_quantize(deq, bp, scale).dequantize(), deq)
    assert np.array_equal(pot_quantize(-np.asarray(values), bp, scale).dequantize(), -deq)
    v = np.asarray(values)
    best = np.abs(grid[None, :] - v[:, None]).min(axis=1)
    assert np.all(np.abs(deq - v) <= best + 1e-12 * max(1.0, scale))


@pytest.mark.parametrize("bp", range(2, 9))
def test_pot_level_count(bp):
    vals = np.concatenate(([0.0], pot_grid(bp)[1:], -pot_grid(bp)[1:]))
    out = np.unique(pot_quantize(vals, bp, 1.0).dequantize())
    assert len(out) == 2 ** bp - 1


# -- dequantize --------------------------------------------------------------


def test_dequantize_examples():
    assert dequantize_row(FixedQuantizedRow(np.array([7]), 0.5, 4)).tolist() == [0.5]
    assert dequantize_row(PotQuantizedRow(np.array([1]), np.array([2]), 1.0, 3)).tolist() == [0.25]
    assert dequantize_row(PotQuantizedRow(np.array([0]), np.array([0]), 3.0, 3)).tolist() == [0.0]


def test_pot_codes_property():
    r = pot_quantize([0.5, -1.0, 0.0], 3, 1.0)
    assert r.codes == [(1, 1), (-1, 0), (0, 0)]
