import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resonance_hunt.core import ConfigError
from resonance_hunt.windows import ScanPlan, default_geometry, independent_count, make_window, plan_scan


def test_make_window():
    w = make_window(3.5, 0.1, 0.3, (2.0, 6.0))
    assert w.sr == pytest.approx((3.4, 3.6))
    with pytest.raises(ConfigError, match="delta < epsilon violated"):
        make_window(3.5, 0.3, 0.1, (2.0, 6.0))
    with pytest.raises(ConfigError, match="window exceeds domain"):
        make_window(5.9, 0.1, 0.3, (2.0, 6.0))


def test_plan_scan_enumeration():
    plan = plan_scan((2.0, 6.0), 0.1, 0.3, 0.2)
    m0 = [w.m0 for w in plan]
    assert m0[0] == pytest.approx(2.3)
    assert m0[-1] == pytest.approx(5.7)
    assert len(plan) == 18
    assert plan.n_independent == 17


def test_step_two_epsilon_keeps_srs_apart():
    plan = plan_scan((2.0, 6.0), 0.1, 0.3, 0.6)
    for a, b in zip(plan.windows[:-1], plan.windows[1:]):
        assert a.ss_outer[1] == pytest.approx(b.ss_outer[0])
        assert a.sr[1] < b.sr[0]


def test_no_window_fits():
    with pytest.raises(ConfigError):
        plan_scan((2.0, 2.5), 0.1, 0.3, 0.1)
    with pytest.raises(ConfigError):
        plan_scan((2.0, 6.0), 0.1, 0.3, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.2), st.floats(1.5, 4.0), st.floats(0.2, 1.0))
def test_sr_coverage_when_step_small(delta, eps_ratio, step_frac):
    dom = (1.0, 5.0)
    eps = delta * eps_ratio
    step = 2 * delta * step_frac
    plan = plan_scan(dom, delta, eps, step)
    lo = plan.windows[0].m0
    hi = plan.windows[-1].m0
    grid = np.linspace(lo, hi, 2001)
    covered = np.zeros(grid.shape, dtype=bool)
    for w in plan:
        covered |= np.abs(grid - w.m0) < w.delta + 1e-12
    assert covered.all()


def test_plan_is_deterministic_and_serializable():
    a = plan_scan((2.5, 5.5), 0.1, 0.3, 0.1)
    b = plan_scan((2.5, 5.5), 0.1, 0.3, 0.1)
    assert a == b
    assert ScanPlan.from_dict(a.to_dict()) == a


def test_independent_count_floor():
    assert independent_count((2.0, 6.0), 0.1, 0.3) == 17
    assert independent_count((2.0, 2.7), 0.1, 0.3) == 1


def test_default_geometry():
    delta, eps, step = default_geometry((2.5, 5.5))
    assert delta == pytest.approx(0.06)
    assert eps == pytest.approx(0.18)
    assert step == pytest.approx(0.06)
    assert default_geometry((2.5, 5.5), 0.05)[0] == 0.05
