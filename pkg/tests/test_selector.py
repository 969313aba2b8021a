import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfl.network import NetworkSnapshot
from mmfl.protocol import AssignmentPlan, validate_plan
from mmfl.selector import (DRLAgent, PolicyEnsemble, SelectorConfig, SelectorConfigError, TableEnvironment,
                           Transition, brute_force_selector, chosen_outputs, encode_state, enumerate_plans,
                           epsilon_schedule, greedy_plan, objective, random_selector, reward, select_action,
                           static_selector, train_on_table, update)

IDS = ("a", "b")


def snap(n=3, m=2, seed=0):
    rates = np.random.default_rng(seed).uniform(1e6, 1e8, (n, m))
    return NetworkSnapshot(0, np.ones((n, m)), rates, rates, [0] * n)


def test_epsilon_schedule_endpoints():
    assert epsilon_schedule(0, 200) == 1.0
    assert epsilon_schedule(199, 200) == pytest.approx(0.02)
    assert epsilon_schedule(0, 1) == 0.02
    vals = [epsilon_schedule(e, 50) for e in range(50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_config_validation():
    assert SelectorConfig().validate() == []
    assert SelectorConfig(gamma=1.0).validate()
    assert SelectorConfig(alpha=0, beta=0).validate()


def test_state_layout():
    s = encode_state(snap(), AssignmentPlan.from_indices(0, IDS, "b", [0, 1, 0]), 1e8)
    assert len(s) == 3 * 2 + 3 * 2
    np.testing.assert_array_equal(s.assignment, [1, 0, 0, 1, 1, 0])
    assert s.rates.max() <= 1.0


def test_random_selector_respects_quota():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = random_selector(rng, 10, IDS, "b", 0.6)
        assert validate_plan(p, 10, 0.6) == []


def test_random_selector_master_outside_slaves():
    p = random_selector(np.random.default_rng(0), 4, ("a",), "z", 0.0)
    assert p.indices == [0, 0, 0, 0] and p.master_count() == 0


def test_unsatisfiable_quota_raises():
    with pytest.raises(SelectorConfigError):
        random_selector(np.random.default_rng(0), 3, ("b",), "b", 0.5)


def test_static_selector():
    assert static_selector(0, 4, IDS, "b", 0.6).indices == [0] * 4
    assert static_selector(1, 4, IDS, "b", 1.0).master_count() == 4
    with pytest.raises(SelectorConfigError, match="T_max = 1"):
        static_selector(1, 4, IDS, "b", 0.6)


def test_greedy_plan_repairs_least_confident_master():
    probs = np.array([[0.1, 0.9], [0.4, 0.6], [0.2, 0.8]])
    assert greedy_plan(probs, 1, 2) == [1, 0, 1]
    assert greedy_plan(probs, 1, 0) == [0, 0, 0]
    assert greedy_plan(probs, None, 0) == [1, 1, 1]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**20), eps=st.floats(0, 1))
def test_select_action_always_feasible(seed, eps):
    rng = np.random.default_rng(seed)
    ens = PolicyEnsemble.create(10, 2, 2, 8, rng)
    state = encode_state(snap(10), AssignmentPlan.from_indices(0, IDS, "b", [1] * 10), 1e8)
    p = select_action(ens, state, eps, rng, 10, 0.6, IDS, "b")
    assert validate_plan(p, 10, 0.6) == []


def test_reward_sign_and_penalty():
    cfg = SelectorConfig(alpha=1.0, beta=2.0, penalty=-1e3)
    assert objective([1.0, 2.0], [0.5, 0.5], 1.0, 2.0) == pytest.approx(5.0)
    assert reward([1.0, 2.0], [0.5, 0.5], cfg) == pytest.approx(-5.0)
    assert reward([1.0], [0.0], cfg, feasible=False) == -1e3
    assert reward([1e4], [0.0], cfg, feasible=False) == -1e5


def transition(seed=0, r=0.3):
    rng = np.random.default_rng(seed)
    ens = PolicyEnsemble.create(2, 1, 2, 4, rng)
    s = snap(2, 1, seed)
    p = AssignmentPlan.from_indices(0, IDS, "b", [0, 1])
    st_ = encode_state(s, p, 1e8)
    return ens, Transition(st_, p, r, st_)


def test_update_lr_zero_is_identity():
    ens, tr = transition()
    out = update(ens, tr, 0.1, 0.0)
    for a, b in zip(ens.nets, out.nets):
        np.testing.assert_array_equal(a.params, b.params)


def test_update_converges_to_fixed_target_with_gamma_zero():
    ens, tr = transition(r=0.8)
    errs = []
    for _ in range(100):
        errs.append(np.abs(chosen_outputs(ens, tr.state, tr.action) - 0.8).max())
        ens = update(ens, tr, 0.0, 1.0)
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0]


def test_update_rejects_nonfinite_reward():
    ens, tr = transition(r=float("nan"))
    with pytest.raises(FloatingPointError):
        update(ens, tr, 0.1, 0.1)


def test_brute_force_finds_minimum():
    vals = {(0, 0): 3.0, (0, 1): 1.0, (1, 0): 2.0, (1, 1): 0.5}
    best = brute_force_selector(2, IDS, "b", 0.5, lambda p: vals[p.key()])
    assert best.key() == (0, 1)              # (1, 1) breaks the quota of one master
    assert len(list(enumerate_plans(2, IDS, "b", 0.5))) == 3
    with pytest.raises(SelectorConfigError):
        brute_force_selector(13, IDS, "b", 1.0, lambda p: 0.0)


def test_agent_learns_dominant_model_on_toy_table():
    env = TableEnvironment(loss_table=np.array([[0.2, 1.0], [0.2, 1.0]]),
                           time_table=np.array([[0.1, 0.5], [0.1, 0.5]]),
                           rates=np.array([[1e7], [5e6]]), model_ids=IDS, master_id="b")
    cfg = SelectorConfig(t_max=0.5)
    agent, curve = train_on_table(env, cfg, 120, 5, np.random.default_rng(0))
    best = brute_force_selector(2, IDS, "b", 0.5, env.evaluator(cfg.alpha, cfg.beta))
    prev = agent.initial_plan()
    plan = agent.act(agent.state(env.snapshot(), prev), 0.0)
    assert plan.key() == best.key() == (0, 0)
    assert np.mean(curve[-20:]) > np.mean(curve[:20])


def test_reward_scaling_range():
    agent = DRLAgent(2, 1, IDS, "b", SelectorConfig(), np.random.default_rng(0), 1e8)
    assert agent.scaled(-5.0) == 0.5
    assert agent.scaled(-1.0) == 1.0
    assert agent.scaled(-3.0) == pytest.approx(0.5)
    raw = DRLAgent(2, 1, IDS, "b", SelectorConfig(normalize_reward=False), np.random.default_rng(0), 1e8)
    assert raw.scaled(-7.0) == -7.0
