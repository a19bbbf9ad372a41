import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from storeleak.addrspace import AllocPolicy, new_address_space
from storeleak.analysis import correlate_counters, histogram_classes, pearson
from storeleak.errors import InvalidConfigError, UndefinedCorrelationError
from storeleak.leak import CounterSample, TimingTrace, TraceEntry, aliasing_scan
from storeleak.mob import Mob


def test_pearson_identity_and_negation():
    xs = [1.0, 2.0, 5.0, 7.0]
    assert pearson(xs, xs) == pytest.approx(1.0)
    assert pearson(xs, [-x for x in xs]) == pytest.approx(-1.0)


def test_pearson_brute_force_value():
    # Independent evaluation of the product-moment formula with exact
    # rational arithmetic, frozen here.
    xs, ys = [1, 2, 3], [2, 4, 7]
    mx, my = Fraction(2), Fraction(13, 3)
    sxy = sum((Fraction(x) - mx) * (Fraction(y) - my) for x, y in zip(xs, ys))
    sxx = sum((Fraction(x) - mx) ** 2 for x in xs)
    syy = sum((Fraction(y) - my) ** 2 for y in ys)
    expected = float(sxy) / math.sqrt(float(sxx) * float(syy))
    assert expected == pytest.approx(0.9933992677987828)
    assert pearson(xs, ys) == pytest.approx(expected)


def test_pearson_errors():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1.0], [2.0])
    with pytest.raises(UndefinedCorrelationError):
        pearson([1.0, 1.0], [2.0, 3.0])
    with pytest.raises(InvalidConfigError):
        pearson([1.0, 2.0], [1.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=40),
       st.floats(0.1, 100.0), st.floats(-50.0, 50.0))
def test_pearson_scale_invariance(xs, a, b):
    if len(set(xs)) < 2:
        return
    ys = [2.0 * x - 3.0 for x in xs]
    r = pearson(xs, ys)
    r_scaled = pearson([a * x + b for x in xs], ys)
    assert r_scaled == pytest.approx(r, abs=1e-6)
    assert pearson([-x for x in xs], ys) == pytest.approx(-r, abs=1e-6)


def _trace(rows):
    entries = [TraceEntry(i, c, CounterSample(s, a, b))
               for i, (c, s, a, b) in enumerate(rows)]
    return TimingTrace(entries, 64, -1, 56)


def test_correlate_counters_on_synthetic_peak():
    # A planted peak whose address_alias is exactly the step index gives an
    # exact -1; stalls track cycles exactly for +1.
    rows = [(200.0, 170.0, 56, 9)] * 10
    for step in range(22):
        c = 1200.0 - step * 40.0
        rows.append((c, c - 30.0, step, 9))
    rows += [(200.0, 170.0, 56, 9)] * 10
    report = correlate_counters(_trace(rows), steps=22)
    assert report.windows == 1
    assert report.r_stalls_ldm_pending == pytest.approx(1.0)
    assert report.r_address_alias == pytest.approx(-1.0)
    assert report.r_bound_on_stores == 0.0
    assert "bound_on_stores" in report.constant_counters


def test_correlate_counters_no_windows():
    rows = [(200.0, 170.0, 56, 9)] * 50
    report = correlate_counters(_trace(rows), steps=22)
    assert report.no_windows


def test_correlate_counters_full_scan(kabylake):
    space = new_address_space(2**18, seed=21)
    space.alloc_pages(4097, AllocPolicy.fragmented(21))
    trace = aliasing_scan(space, Mob(kabylake), 4096, engine="fast")
    report = correlate_counters(trace, steps=22)
    assert report.windows >= 5
    assert report.r_stalls_ldm_pending >= 0.9
    assert report.r_address_alias <= -0.9
    assert abs(report.r_bound_on_stores) <= 0.2


def test_correlate_is_deterministic(kabylake):
    space = new_address_space(2**18, seed=3)
    space.alloc_pages(1025, AllocPolicy.fragmented(3))
    trace = aliasing_scan(space, Mob(kabylake), 1024, engine="fast")
    a = correlate_counters(trace, steps=22)
    b = correlate_counters(trace, steps=22)
    assert a == b


def test_histogram_classes():
    means = histogram_classes({"a": [10.0, 20.0], "b": [5.0]})
    assert means == {"a": 15.0, "b": 5.0}
    with pytest.raises(InvalidConfigError):
        histogram_classes({"empty": []})
