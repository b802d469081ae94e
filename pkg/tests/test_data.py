import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multibackdoor import numkernel as nk
from multibackdoor.data import (
    Dataset, dirichlet_partition, largest_remainder, read_raw_bin, synth_shapes, write_raw_bin,
)


def encode_records(labels, images) -> bytes:
    """Independent encoder: label byte, then R, G, B planes row by row."""
    out = bytearray()
    for lab, img in zip(labels, images):
        out += struct.pack("B", lab)
        for ch in range(3):
            for row in range(32):
                out += struct.pack("32B", *img[ch, row])
    return bytes(out)


def test_synth_counts():
    ds = synth_shapes(1, 10, 10)
    assert len(ds) == 100
    assert np.array_equal(np.bincount(ds.labels), np.full(10, 10))
    assert ds.images.shape == (100, 3, 32, 32)
    assert ds.images.min() >= 0 and ds.images.max() <= 255


def test_synth_deterministic_and_seed_sensitive():
    a, b = synth_shapes(3, 4), synth_shapes(3, 4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_shapes(4, 4).images)


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_shapes(0, 5, 11)
    with pytest.raises(ValueError):
        synth_shapes(0, 0)


def test_dataset_indexing():
    ds = synth_shapes(1, 2, 3)
    ex = ds[3]
    assert ex.label == 1 and ex.image.shape == (3, 32, 32)
    sub = ds.subset([0, 5])
    assert list(sub.labels) == [0, 2]
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 3, 4, 4)), [3], 3)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 3, 4, 4), 300.0), [0], 3)


def test_tinyconv_learns_synth_centrally():
    train, test = synth_shapes(11, 100), synth_shapes(12, 30)
    arch = nk.tiny_conv(10)
    rng = np.random.default_rng(0)
    params = nk.init_params(arch, rng)
    params, _ = nk.train_sgd(arch, params, train.images, train.labels, nk.SgdConfig(0.01, 0.9, 5e-4), 5, 64, rng)
    assert nk.accuracy(arch, params, test.images, test.labels) >= 0.90


def test_raw_bin_reads_independent_encoding(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (2, 3, 32, 32))
    path = tmp_path / "two.bin"
    path.write_bytes(encode_records([7, 2], imgs))
    ds = read_raw_bin(path, 10)
    assert len(ds) == 2
    assert list(ds.labels) == [7, 2]
    np.testing.assert_array_equal(ds.images, imgs.astype(float))


def test_raw_bin_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (5, 3, 32, 32)).astype(float)
    ds = Dataset(imgs, [0, 1, 2, 3, 4], 5)
    path = tmp_path / "rt.bin"
    write_raw_bin(ds, path)
    assert path.read_bytes() == encode_records(ds.labels, imgs.astype(int))
    back = read_raw_bin(path, 5)
    np.testing.assert_array_equal(back.images, imgs)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_raw_bin_truncated(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(encode_records([1, 1], np.zeros((2, 3, 32, 32), int)) + b"\x00")
    with pytest.raises(ValueError, match="malformed"):
        read_raw_bin(path, 10)


def test_raw_bin_label_out_of_range(tmp_path):
    path = tmp_path / "lab.bin"
    path.write_bytes(encode_records([3, 12], np.zeros((2, 3, 32, 32), int)))
    with pytest.raises(ValueError, match="label"):
        read_raw_bin(path, 10)


def test_raw_bin_empty(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    with pytest.raises(ValueError):
        read_raw_bin(path, 10)


def test_largest_remainder():
    assert list(largest_remainder(np.array([0.5, 0.3, 0.2]), 7)) == [4, 2, 1]
    assert largest_remainder(np.array([1 / 3] * 3), 10).sum() == 10


def test_single_client_gets_everything():
    ds = synth_shapes(1, 5)
    plan = dirichlet_partition(ds, 1, 0.8, 0)
    assert np.array_equal(plan.client_indices[0], np.arange(len(ds)))


@settings(max_examples=60, deadline=None)
@given(
    n_per=st.integers(1, 12),
    k=st.integers(1, 10),
    n_clients=st.integers(1, 15),
    alpha=st.floats(0.01, 100.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_partition_is_disjoint_cover(n_per, k, n_clients, alpha, seed):
    labels = np.repeat(np.arange(k), n_per)
    ds = Dataset(np.zeros((len(labels), 3, 2, 2)), labels, k)
    plan = dirichlet_partition(ds, n_clients, alpha, seed)
    assert len(plan) == n_clients
    assert plan.is_partition_of(len(ds))
    again = dirichlet_partition(ds, n_clients, alpha, seed)
    assert all(np.array_equal(a, b) for a, b in zip(plan.client_indices, again.client_indices))


def _mean_entropy(ds, plan):
    ents = []
    for ix in plan.client_indices:
        if len(ix) == 0:
            continue
        p = np.bincount(ds.labels[ix], minlength=ds.n_classes) / len(ix)
        p = p[p > 0]
        ents.append(-(p * np.log(p)).sum())
    return float(np.mean(ents))


def test_skew_grows_as_alpha_shrinks():
    labels = np.repeat(np.arange(10), 50)
    ds = Dataset(np.zeros((len(labels), 3, 2, 2)), labels, 10)
    means = {}
    for alpha in (0.1, 1.0, 100.0):
        means[alpha] = np.mean([_mean_entropy(ds, dirichlet_partition(ds, 10, alpha, s)) for s in range(20)])
    assert means[0.1] < means[1.0] < means[100.0]


def test_partition_argument_checks():
    ds = synth_shapes(1, 2)
    with pytest.raises(ValueError):
        dirichlet_partition(ds, 0, 1.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition(ds, 3, 0.0, 0)
