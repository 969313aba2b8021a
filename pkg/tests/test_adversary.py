import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfl.adversary import Adversary, AttackConfig, craft_poisoned, inject, random_target, select_compromised
from mmfl.nn import ModelSpec, ModelWeights, init_model
from mmfl.protocol import Upload

SPEC = ModelSpec("m", 3, "gru", 2)


def scalar(v):
    return ModelWeights(ModelSpec("s", 1, "dense", 0, 1), np.array([v, 0.0]))


def test_craft_scalar_example():
    assert craft_poisoned(scalar(2.0), scalar(12.0), 0.3).params[0] == pytest.approx(5.0)


def test_craft_endpoints():
    rng = np.random.default_rng(0)
    g, t = init_model(SPEC, rng), init_model(SPEC, rng, 1.0)
    np.testing.assert_array_equal(craft_poisoned(g, t, 0.0).params, g.params)
    np.testing.assert_allclose(craft_poisoned(g, t, 1.0).params, t.params, rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20), lam=st.floats(0.0, 1.0))
def test_craft_affine_identity(seed, lam):
    rng = np.random.default_rng(seed)
    g, t = init_model(SPEC, rng), init_model(SPEC, rng, 1.0)
    out = craft_poisoned(g, t, lam)
    np.testing.assert_allclose(out.params - g.params, lam * (t.params - g.params), atol=1e-15)
    assert out.spec == g.spec


def test_craft_rejects_other_structure():
    with pytest.raises(ValueError):
        craft_poisoned(init_model(SPEC, np.random.default_rng(0)),
                       init_model(ModelSpec("x", 3, "gru", 3), np.random.default_rng(0)), 0.3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_compromise_set_within_bounds(seed):
    cs = select_compromised(np.random.default_rng(seed), 10, AttackConfig(), episode=4)
    assert 3 <= len(cs.devices) <= 5
    assert len(set(cs.devices)) == len(cs.devices)
    assert all(0.25 <= cs.rates[u] <= 0.35 for u in cs.devices)


def test_disabled_attack_is_empty():
    assert select_compromised(np.random.default_rng(0), 10, AttackConfig(enabled=False)).devices == ()


def test_config_validation():
    assert AttackConfig().validate(10) == []
    assert AttackConfig(compromised_max=11).validate(10)
    assert AttackConfig(lr_range=(0.0, 0.3)).validate(10)


def test_target_scale():
    t = random_target(SPEC, np.random.default_rng(0), AttackConfig())
    assert np.abs(t.params).max() <= 1.0
    assert np.abs(t.params).max() > 0.5


def test_inject_replaces_only_compromised():
    rng = np.random.default_rng(0)
    g = init_model(SPEC, rng)
    benign = init_model(ModelSpec("other", 3, "gru", 1), rng)
    uploads = [Upload(u, benign, 10) for u in range(4)]
    cs = select_compromised(np.random.default_rng(1), 4, AttackConfig(compromised_min=2, compromised_max=2))
    out = inject(uploads, cs, g, rng)
    for up in out:
        if up.device_id in cs:
            assert up.crafted and up.weights.spec == g.spec and up.batch_size == 10
        else:
            assert not up.crafted and up.weights is benign


def test_fresh_targets_per_device_and_epoch():
    rng = np.random.default_rng(0)
    g = init_model(SPEC, rng)
    adv = Adversary(AttackConfig(compromised_min=2, compromised_max=2), np.random.default_rng(3), 4)
    cs = adv.start_episode(0)
    ups = [Upload(u, g, 5) for u in range(4)]
    a = [u.weights.params for u in adv(ups, g) if u.crafted]
    b = [u.weights.params for u in adv(ups, g) if u.crafted]
    assert not np.allclose(a[0], a[1]) and not np.allclose(a[0], b[0])
    assert adv.compromise is cs


def test_per_epoch_rate_switch():
    g = init_model(SPEC, np.random.default_rng(0))
    cfg = AttackConfig(compromised_min=1, compromised_max=1, lr_per_epoch=True)
    cs = select_compromised(np.random.default_rng(0), 1, cfg)
    out = inject([Upload(0, g, 1)], cs, g, np.random.default_rng(1), cfg)
    assert out[0].crafted
