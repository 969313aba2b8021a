import pytest
from hypothesis import given, settings, strategies as st

from mmfl import timing as tm


def profile(**kw):
    base = dict(device_hz=(2e9, 2.2e9), bs_hz=(3.2e9, 2.6e9), cloud_hz=1e10, label_cycles={"a": 1e6, "b": 2e6},
                distill_cycles=1e6, aggregate_cycles=100.0, train_cycles_per_param=60.0, inference_cycles=2e6)
    base.update(kw)
    return tm.ComputeProfile(**base)


def test_profile_rejects_nonpositive():
    with pytest.raises(ValueError):
        profile(cloud_hz=0.0)
    with pytest.raises(ValueError):
        profile(label_cycles={"a": -1.0})


def test_params_per_second():
    assert tm.params_per_second(32e6, 4.0) == 1e6


def test_knowledge_examples():
    p = profile(bs_hz=(3.2e9,), label_cycles={"a": 1e6}, distill_cycles=1e6)
    assert tm.t_knowledge(0, ["a"], p, 0) == 0.0
    assert tm.t_knowledge(2400, ["a"], p, 0) == pytest.approx(1.5)
    assert tm.t_knowledge(4800, ["a"], p, 0) == pytest.approx(2 * tm.t_knowledge(2400, ["a"], p, 0))
    assert tm.t_knowledge(2400, [], p, 0) == 0.0


def test_partial_agg_examples():
    p = profile(bs_hz=(1e9,), aggregate_cycles=100.0)
    assert tm.t_partial_agg([], [], {}, {}, p, 0) == 0.0
    assert tm.t_partial_agg([1e4], [1e6], {"a": 1}, {"a": 10_000}, p, 0) == pytest.approx(0.011)
    # uplink part is the slowest transfer
    assert tm.t_partial_agg([1e4, 2e4], [1e6, 1e6], {}, {}, p, 0) == pytest.approx(0.02)


def test_partial_agg_zero_rate_raises():
    with pytest.raises(ValueError):
        tm.t_partial_agg([10.0], [0.0], {}, {}, profile(), 0)


def test_partial_agg_compute_linear_in_count():
    p = profile()
    one = tm.t_partial_agg([], [], {"a": 1}, {"a": 500}, p, 0)
    assert tm.t_partial_agg([], [], {"a": 3}, {"a": 500}, p, 0) == pytest.approx(3 * one)


def test_global_agg_examples():
    p = profile(cloud_hz=1e9, aggregate_cycles=10.0)
    assert tm.t_global_agg([0.0], [0.0], 1000, 1e30, p, 1) == pytest.approx(1000 * 10.0 / 1e9)
    # bracketed sums 1.0 and 1.5, cloud term 0.1
    p2 = profile(cloud_hz=2 * 1000 * 10.0 / 0.1, aggregate_cycles=10.0)
    got = tm.t_global_agg([0.5, 1.0], [0.4, 0.4], 1000, 1e4, p2, 2)
    assert got == pytest.approx(1.6)
    with pytest.raises(ValueError):
        tm.t_global_agg([], [], 10, 1.0, p, 0)


def test_downlink_examples():
    assert tm.t_downlink(0, 0, 1e7, 1e6) == 0.0
    assert tm.t_downlink(10_000, 5_000, 1e7, 1e6) == pytest.approx(0.006)
    assert tm.t_downlink(10_000, 4_000, 1e7, 1e6) < tm.t_downlink(10_000, 5_000, 1e7, 1e6)
    with pytest.raises(ValueError):
        tm.t_downlink(1, 1, 1.0, 0.0)


def test_local_examples():
    p = profile(device_hz=(2e9,), train_cycles_per_param=1.0)
    assert tm.t_local(0, 1_000_000, p, 0) == 0.0
    assert tm.t_local(900, 1_000_000, p, 0) == pytest.approx(0.45)
    assert tm.t_local(900, 9773, p, 0) < tm.t_local(900, 11553, p, 0)


def test_recognition_examples():
    p = profile(device_hz=(2e9, 2e9), inference_cycles=2e6)
    out = tm.t_recognition({0: 0.45, 1: 0.2}, 1.6, {0: 0.006, 1: 0.006}, p, 2)
    assert out[0] == pytest.approx(2.507)
    assert out[1] == pytest.approx(2.507)   # barrier: everybody waits for the slowest
    per_device = tm.t_recognition({0: 0.45, 1: 0.2}, 1.6, {0: 0.006, 1: 0.006}, p, 2, barrier=False)
    assert per_device[1] == pytest.approx(2 * 0.2 + 1.6 + 0.006 + 0.001)
    only_inf = tm.t_recognition({0: 0.0}, 0.0, {0: 0.0}, p, 1)
    assert only_inf[0] == pytest.approx(2e6 / 2e9)
    with pytest.raises(ValueError):
        tm.t_recognition({0: 1.0}, 0.0, {0: 0.0}, p, 0)


def test_mean_time():
    assert tm.mean_time({}) == 0.0
    assert tm.mean_time({0: 1.0, 3: 2.0}) == 1.5


@settings(max_examples=100, deadline=None)
@given(t_loc=st.dictionaries(st.integers(0, 1), st.floats(0, 5), min_size=2, max_size=2),
       t_ag=st.floats(0, 5), down=st.floats(0, 1), k=st.integers(1, 10))
def test_recognition_at_least_global_agg(t_loc, t_ag, down, k):
    out = tm.t_recognition(t_loc, t_ag, {0: down, 1: down}, profile(), k)
    assert all(v >= t_ag for v in out.values())
