import itertools
import math

import numpy as np
import pytest
from sklearn.base import clone

from multibackdoor.triggers import (
    FrequencyTrigger, PatchTrigger, PatchTriggerSpec, TriggerSpec, apply_freq_trigger, apply_patch_trigger,
    check_distinct, dct2, idct2,
)

SETUP_TRIGGERS = [
    TriggerSpec("R", (15, 15), 3, 100.0, 0),
    TriggerSpec("G", (20, 20), 3, 100.0, 4),
    TriggerSpec("B", (25, 25), 3, 100.0, 6),
]


def _c(k, n):
    return math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)


def dct_oracle(m):
    """Direct O(N^4) double sum for the orthonormal DCT-II."""
    h, w = m.shape
    out = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            s = 0.0
            for x in range(h):
                for y in range(w):
                    s += m[x, y] * math.cos(math.pi * (2 * x + 1) * u / (2 * h)) * math.cos(
                        math.pi * (2 * y + 1) * v / (2 * w))
            out[u, v] = _c(u, h) * _c(v, w) * s
    return out


def idct_oracle(f):
    h, w = f.shape
    out = np.zeros((h, w))
    for x in range(h):
        for y in range(w):
            s = 0.0
            for u in range(h):
                for v in range(w):
                    s += _c(u, h) * _c(v, w) * f[u, v] * math.cos(math.pi * (2 * x + 1) * u / (2 * h)) * math.cos(
                        math.pi * (2 * y + 1) * v / (2 * w))
            out[x, y] = s
    return out


def test_dct_of_constant():
    f = dct2(np.ones((32, 32)))
    assert f[0, 0] == pytest.approx(32.0, abs=1e-12)
    f[0, 0] = 0
    assert np.abs(f).max() < 1e-12


def test_idct_of_dc():
    f = np.zeros((32, 32))
    f[0, 0] = 32.0
    np.testing.assert_allclose(idct2(f), np.ones((32, 32)), atol=1e-12)


def test_dct_matches_double_sum():
    m = np.random.default_rng(0).uniform(0, 255, (8, 8))
    np.testing.assert_allclose(dct2(m), dct_oracle(m), rtol=0, atol=1e-10)
    rect = np.random.default_rng(1).uniform(-1, 1, (5, 7))
    np.testing.assert_allclose(dct2(rect), dct_oracle(rect), rtol=0, atol=1e-10)


def test_idct_matches_double_sum():
    f = np.random.default_rng(2).normal(0, 50, (8, 8))
    np.testing.assert_allclose(idct2(f), idct_oracle(f), rtol=0, atol=1e-10)


def test_round_trip_and_parseval():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = rng.uniform(0, 255, (32, 32))
        f = dct2(m)
        assert np.abs(idct2(f) - m).max() <= 1e-9
        assert abs((f**2).sum() - (m**2).sum()) <= 1e-9 * (m**2).sum()


def test_zero_magnitude_is_identity():
    img = np.random.default_rng(4).uniform(0, 255, (3, 32, 32))
    out, target = apply_freq_trigger(img, TriggerSpec(0, (15, 15), 3, 0.0, 2))
    np.testing.assert_allclose(out, img, atol=1e-10)
    assert target == 2


@pytest.mark.parametrize("spec", SETUP_TRIGGERS)
def test_unclipped_energy_is_s2_m2(spec):
    rng = np.random.default_rng(5)
    for img in rng.uniform(0, 255, (5, 3, 32, 32)):
        out, _ = apply_freq_trigger(img, spec, clip=False)
        assert np.sum((out - img) ** 2) == pytest.approx(90000.0, rel=1e-12)


def test_trigger_is_additive_channel_local_and_content_free():
    spec = SETUP_TRIGGERS[1]
    rng = np.random.default_rng(6)
    imgs = rng.uniform(0, 255, (4, 3, 32, 32))
    out, _ = apply_freq_trigger(imgs, spec, clip=False)
    delta = out - imgs
    assert np.abs(delta[:, [0, 2]]).max() == 0.0
    for d in delta[1:]:
        np.testing.assert_allclose(d, delta[0], atol=1e-10)
    np.testing.assert_allclose(delta[0, 1], spec.spatial_delta(), atol=1e-10)


def test_delta_equals_sum_of_basis_images():
    spec = TriggerSpec(2, (3, 1), 2, 7.5, 0)
    img = np.zeros((3, 8, 8))
    out, _ = apply_freq_trigger(img, spec, clip=False)
    coef = np.zeros((8, 8))
    coef[3:5, 1:3] = 7.5
    np.testing.assert_allclose(out[2], idct_oracle(coef), atol=1e-10)


def test_clipping_keeps_pixel_range():
    img = np.full((3, 32, 32), 250.0)
    out, _ = apply_freq_trigger(img, TriggerSpec(0, (0, 0), 2, 3000.0, 0), clip=True)
    assert out.min() >= 0 and out.max() <= 255
    raw, _ = apply_freq_trigger(img, TriggerSpec(0, (0, 0), 2, 3000.0, 0), clip=False)
    assert raw.max() > 255


def test_block_out_of_range():
    with pytest.raises(ValueError):
        apply_freq_trigger(np.zeros((3, 32, 32)), TriggerSpec(0, (30, 30), 3, 1.0, 0))
    with pytest.raises(ValueError):
        TriggerSpec(5, (0, 0), 3, 1.0, 0)
    with pytest.raises(ValueError):
        TriggerSpec(0, (0, 0), 0, 1.0, 0)


def test_distinctness_and_orthogonality():
    assert check_distinct(SETUP_TRIGGERS) == []
    deltas = []
    for t in SETUP_TRIGGERS:
        out, _ = apply_freq_trigger(np.zeros((3, 32, 32)), t, clip=False)
        deltas.append(out.ravel())
    for a, b in itertools.combinations(deltas, 2):
        assert abs(a @ b) < 1e-9
    same_block_other_channel = TriggerSpec("G", (15, 15), 3, 100.0, 1)
    d = apply_freq_trigger(np.zeros((3, 32, 32)), same_block_other_channel, clip=False)[0].ravel()
    assert abs(d @ deltas[0]) < 1e-9
    clash = check_distinct([SETUP_TRIGGERS[0], TriggerSpec(0, (15, 15), 2, 50.0, 3)])
    assert len(clash) == 1


def test_patch_transparency_formula():
    img = np.zeros((3, 32, 32))
    out, target = apply_patch_trigger(img, PatchTriggerSpec(0.5, 3))
    assert target == 3
    mask = PatchTriggerSpec(0.5, 3).mask(32, 32)
    assert mask.sum() == 4 * 25
    assert np.all(out[:, mask] == 127.5)
    assert np.all(out[:, ~mask] == 0)


def test_patch_extremes():
    img = np.random.default_rng(7).uniform(0, 255, (3, 32, 32))
    np.testing.assert_array_equal(apply_patch_trigger(img, PatchTriggerSpec(0.0, 0))[0], img)
    out = apply_patch_trigger(img, PatchTriggerSpec(1.0, 0))[0]
    assert np.all(out[:, :5, :5] == 255) and np.all(out[:, -5:, -5:] == 255)
    with pytest.raises(ValueError):
        PatchTriggerSpec(1.5, 0)
    with pytest.raises(ValueError):
        PatchTriggerSpec(0.5, 0, patch_size=40).mask(32, 32)


def test_sklearn_transformers():
    X = np.random.default_rng(8).uniform(0, 255, (4, 3, 32, 32))
    tr = FrequencyTrigger(channel="G", block_origin=(20, 20), magnitude=100.0, target_label=4, clip=False)
    assert clone(tr).get_params()["channel"] == "G"
    Xp, y = tr.fit(X).poison(X)
    np.testing.assert_allclose(Xp, apply_freq_trigger(X, SETUP_TRIGGERS[1], clip=False)[0])
    assert list(y) == [4] * 4
    pt = PatchTrigger(transparency=0.8, target_label=1)
    assert np.allclose(pt.fit_transform(X), apply_patch_trigger(X, PatchTriggerSpec(0.8, 1))[0])
