from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multibackdoor import numkernel as nk
from multibackdoor.attack import (
    AttackerSpec, ConfigError, PoolUnderflow, ReplayPool, amplify, attacker_local_train, check_ratio_budget,
    compose_counts, poison_batch_direct, poison_batch_pooled,
)
from multibackdoor.federation import ClientUpdate, fedavg
from multibackdoor.triggers import TriggerSpec, apply_freq_trigger

TRIGGERS = [
    TriggerSpec(0, (15, 15), 3, 100.0, 0),
    TriggerSpec(1, (20, 20), 3, 100.0, 4),
    TriggerSpec(2, (25, 25), 3, 100.0, 6),
]


def three_attackers(r_b=8 / 64, r_br=3 / 64, mode="direct"):
    return [AttackerSpec(i + 1, i, t, r_b, r_br, {40 + i}, replay_mode=mode) for i, t in enumerate(TRIGGERS)]


def test_counts_for_the_three_attacker_setup():
    assert compose_counts(64, 8 / 64, 3 / 64, 2) == (8, 3, 50)


def test_counts_trivial_and_arithmetic():
    assert compose_counts(64, 0, 0, 2) == (0, 0, 64)
    assert compose_counts(32, 0.25, 0.0625, 2) == (8, 2, 20)


def test_counts_round_half_up():
    # 0.5 * 5 = 2.5 -> 3 ; 0.1 * 5 = 0.5 -> 1
    assert compose_counts(5, 0.5, 0.1, 1) == (3, 1, 1)


def test_counts_overflow_is_config_error():
    with pytest.raises(ConfigError):
        compose_counts(10, 0.8, 0.2, 2)


@settings(max_examples=1000, deadline=None)
@given(
    bs=st.integers(1, 512),
    r_b=st.floats(0, 1),
    r_br=st.floats(0, 1),
    n_others=st.integers(0, 8),
)
def test_counts_property(bs, r_b, r_br, n_others):
    own = int(np.floor(r_b * bs + 0.5 + 1e-9))
    per = int(np.floor(r_br * bs + 0.5 + 1e-9))
    if own + n_others * per > bs:
        with pytest.raises(ConfigError):
            compose_counts(bs, r_b, r_br, n_others)
        return
    got = compose_counts(bs, r_b, r_br, n_others)
    assert got == (own, per, bs - own - n_others * per)
    assert got[0] + n_others * got[1] + got[2] == bs


def test_direct_batch_composition():
    rng = np.random.default_rng(0)
    imgs = rng.uniform(0, 255, (64, 3, 32, 32))
    labels = rng.integers(0, 10, 64)
    a = three_attackers()
    b = poison_batch_direct(imgs, labels, a[0], a[1:], np.random.default_rng(1))
    assert (b.own, b.replayed, b.clean) == (8, (3, 3), 50)
    assert Counter(b.source.tolist()) == {-1: 50, 0: 8, 1: 3, 2: 3}
    assert np.all(b.labels[b.source == 0] == 0)
    assert np.all(b.labels[b.source == 1] == 4)
    assert np.all(b.labels[b.source == 2] == 6)
    clean = b.source == -1
    np.testing.assert_array_equal(b.images[clean], imgs[clean])
    np.testing.assert_array_equal(b.labels[clean], labels[clean])
    for src, trig in zip((0, 1, 2), TRIGGERS):
        sel = b.source == src
        np.testing.assert_allclose(b.images[sel], apply_freq_trigger(imgs[sel], trig, clip=True)[0])
    again = poison_batch_direct(imgs, labels, a[0], a[1:], np.random.default_rng(1))
    np.testing.assert_array_equal(again.images, b.images)


def test_no_replay_only_own_trigger():
    rng = np.random.default_rng(2)
    imgs = rng.uniform(0, 255, (64, 3, 32, 32))
    a = three_attackers(r_br=0.0)
    b = poison_batch_direct(imgs, np.zeros(64, int), a[1], [a[0], a[2]], rng)
    assert set(b.source.tolist()) == {-1, 0}
    assert b.own == 8 and b.clean == 56


def test_inputs_not_mutated():
    imgs = np.zeros((8, 3, 32, 32))
    labels = np.ones(8, int)
    a = three_attackers(r_b=0.5, r_br=0.125)
    poison_batch_direct(imgs, labels, a[0], a[1:], np.random.default_rng(0))
    assert imgs.max() == 0 and labels.min() == 1


def test_pool_mode_matches_counts_and_skips_own_partition():
    a = three_attackers(mode="pool")
    src = np.random.default_rng(3).uniform(0, 255, (40, 3, 32, 32))
    pool = ReplayPool.build(src, a, 10, np.random.default_rng(4))
    for aid, t in zip((1, 2, 3), TRIGGERS):
        assert np.all(pool.labels[aid] == t.target_label)
    imgs = np.random.default_rng(5).uniform(0, 255, (64, 3, 32, 32))
    direct = poison_batch_direct(imgs, np.full(64, 9), a[0], a[1:], np.random.default_rng(6))
    pooled = poison_batch_pooled(imgs, np.full(64, 9), a[0], a, pool, np.random.default_rng(6))
    assert (pooled.own, pooled.replayed, pooled.clean) == (direct.own, direct.replayed, direct.clean)
    replayed = pooled.images[pooled.source > 0]
    own_partition = pool.images[1].reshape(10, -1)
    for img in replayed:
        assert not (np.abs(own_partition - img.ravel()).max(axis=1) == 0).any()
    assert sorted(pooled.labels[pooled.source > 0].tolist()) == [4, 4, 4, 6, 6, 6]


def test_pool_entries_come_from_each_attackers_own_images():
    a = three_attackers(mode="pool")
    rng = np.random.default_rng(7)
    sources = {1: rng.uniform(0, 255, (5, 3, 32, 32)), 2: rng.uniform(0, 255, (3, 3, 32, 32)),
               3: rng.uniform(0, 255, (4, 3, 32, 32))}
    pool = ReplayPool.build(sources, a, None, np.random.default_rng(0))
    assert [len(pool.labels[i]) for i in (1, 2, 3)] == [5, 3, 4]
    for aid, t in zip((1, 2, 3), TRIGGERS):
        np.testing.assert_array_equal(pool.images[aid], apply_freq_trigger(sources[aid], t)[0])
    capped = ReplayPool.build(sources, a, 4, np.random.default_rng(0))
    assert [len(capped.labels[i]) for i in (1, 2, 3)] == [4, 3, 4]
    with pytest.raises(PoolUnderflow):
        ReplayPool.build({**sources, 2: np.empty((0, 3, 32, 32))}, a, None, np.random.default_rng(0))


def test_pool_underflow():
    a = three_attackers(r_br=8 / 64, mode="pool")
    pool = ReplayPool.build(np.zeros((5, 3, 32, 32)), a, 4, np.random.default_rng(0))
    with pytest.raises(PoolUnderflow):
        poison_batch_pooled(np.zeros((64, 3, 32, 32)), np.zeros(64, int), a[0], a[1:], pool,
                            np.random.default_rng(0))


def test_spec_validation():
    with pytest.raises(ConfigError):
        AttackerSpec(1, 0, TRIGGERS[0], 0.1, 0.1, set())
    with pytest.raises(ConfigError):
        AttackerSpec(1, 0, TRIGGERS[0], 0.1, 0.1, {3}, gamma=0.5)
    bad = [AttackerSpec(i, i, TRIGGERS[i], 0.6, 0.3, {1}) for i in range(3)]
    assert len(check_ratio_budget(bad)) == 3
    assert check_ratio_budget(three_attackers()) == []


def test_amplify_identities():
    rng = np.random.default_rng(7)
    g, l = rng.normal(size=50), rng.normal(size=50)
    np.testing.assert_array_equal(amplify(g, l, 1), l)
    np.testing.assert_array_equal(amplify(g, g, 7.5), g)
    np.testing.assert_allclose(amplify(g, l, 4), g + 4 * (l - g), rtol=1e-15)
    with pytest.raises(ValueError):
        amplify(g, l[:3], 2)


def test_scaling_by_client_count_replaces_model():
    # three equal-weight clients, two benign ones return the global unchanged
    rng = np.random.default_rng(8)
    g, local = rng.normal(size=20), rng.normal(size=20)
    ups = [ClientUpdate(0, amplify(g, local, 3), 10), ClientUpdate(1, g.copy(), 10), ClientUpdate(2, g.copy(), 10)]
    np.testing.assert_allclose(fedavg(g, ups, 1.0), local, atol=1e-12)


def tiny_arch():
    return nk.ModelArch((3, 32, 32), (nk.Conv2d(4, 3, 2), nk.ReLU(), nk.Flatten(), nk.Dense(10)), 10)


def test_overfit_single_backdoor():
    rng = np.random.default_rng(9)
    X = rng.uniform(0, 255, (48, 3, 32, 32))
    y = rng.integers(1, 10, 48)
    atk = AttackerSpec(1, 0, TRIGGERS[0], 1.0, 0.0, {0}, local_epochs=30,
                       sgd=nk.SgdConfig(0.05, 0.9, 0.0, 0.0))
    arch = tiny_arch()
    params, losses = attacker_local_train(arch, nk.init_params(arch, rng), atk, X, y, [], rng, batch_size=16)
    Xt, _ = apply_freq_trigger(X, TRIGGERS[0], clip=True)
    assert np.mean(nk.predict(arch, params, Xt) == 0) == 1.0
    assert losses[-1] < losses[0]


def test_local_training_deterministic_and_pool_required():
    arch = tiny_arch()
    rng = np.random.default_rng(10)
    X = rng.uniform(0, 255, (20, 3, 32, 32))
    y = rng.integers(0, 10, 20)
    a = three_attackers()
    p0 = nk.init_params(arch, rng)
    r1 = attacker_local_train(arch, p0, a[0], X, y, a, np.random.default_rng(1), batch_size=10)[0]
    r2 = attacker_local_train(arch, p0, a[0], X, y, a, np.random.default_rng(1), batch_size=10)[0]
    np.testing.assert_array_equal(r1, r2)
    pa = three_attackers(mode="pool")
    with pytest.raises(ConfigError):
        attacker_local_train(arch, p0, pa[0], X, y, pa, np.random.default_rng(1))


def test_pool_and_direct_replay_end_comparably(desk):
    # desk-scale paired run: the shared warmup feeds both modes
    direct = desk.replay()
    pooled = desk.run("pool", replace(desk.cfg, replay_mode="pool"))
    a, b = direct.records[-1].asr, pooled.records[-1].asr
    print("final ASR direct", a, "pool", b)
    assert len(a) == len(b) == 3
    assert max(abs(x - y) for x, y in zip(a, b)) <= 0.15
