import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from champfl import nn
from champfl.data import (
    BackdoorSpec,
    Dataset,
    apply_trigger,
    backdoor_testset,
    gen_synthetic,
    idx_image_shape,
    load_idx,
    partition_iid,
    poison_dataset,
    poison_indices,
    stamp,
    write_idx,
)
from champfl.errors import FormatError, InputError


def _pair(tmp_path, compress=False):
    imgs = np.array([[[0, 255], [128, 1]], [[255, 255], [0, 0]]], dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(ip, lp, imgs, labels, compress=compress)
    return ip, lp


def test_load_idx_exact_values(tmp_path):
    ds = load_idx(*_pair(tmp_path))
    assert len(ds) == 2
    assert ds.images.shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(ds.images[0, 0], [[0.0, 1.0], [128 / 255, 1 / 255]])
    assert ds.labels.tolist() == [3, 7]
    assert idx_image_shape(tmp_path / "img.idx") == (1, 2, 2)


def test_gzip_and_raw_identical(tmp_path):
    raw = load_idx(*_pair(tmp_path))
    (tmp_path / "z").mkdir()
    gz = load_idx(*_pair(tmp_path / "z", compress=True))
    assert raw == gz


def test_idx_hand_built_bytes(tmp_path):
    # header written by hand rather than through write_idx
    img = bytes.fromhex("00000803 00000001 00000001 00000002".replace(" ", "")) + bytes([51, 204])
    lbl = bytes.fromhex("00000801 00000001".replace(" ", "")) + bytes([4])
    (tmp_path / "i").write_bytes(gzip.compress(img))
    (tmp_path / "l").write_bytes(lbl)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(ds.images[0, 0, 0], [0.2, 0.8])
    assert ds.labels.tolist() == [4]


def test_idx_errors(tmp_path):
    ip, lp = _pair(tmp_path)
    img = ip.read_bytes()
    (tmp_path / "bad").write_bytes(b"\x00\x00\x08\x04" + img[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(tmp_path / "bad", lp)
    (tmp_path / "short").write_bytes(img[:-1])
    with pytest.raises(FormatError, match="offset"):
        load_idx(tmp_path / "short", lp)
    write_idx(tmp_path / "i3", tmp_path / "l3", np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(FormatError, match="3 images"):
        load_idx(tmp_path / "i3", tmp_path / "l3")
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="truncated header"):
        load_idx(tmp_path / "tiny", lp)


def test_synthetic_deterministic_and_sized():
    a = gen_synthetic(3, 2, 100)
    assert len(a) == 200
    assert a == gen_synthetic(3, 2, 100)
    assert a != gen_synthetic(4, 2, 100)
    assert a.images.min() >= 0 and a.images.max() <= 1
    with pytest.raises(InputError):
        gen_synthetic(0, 1, 10)


def test_synthetic_is_learnable_by_logistic():
    ds = gen_synthetic(0, 10, 200)
    spec = nn.ModelSpec("logistic", ds.shape, classes=10)
    model = nn.train_local(nn.init_model(spec, 0), ds, 5, 0.2, 32, seed=1)
    held = gen_synthetic(0, 10, 50)
    assert nn.accuracy(model, held.images, held.labels) > 0.9


def test_label_noise_caps_agreement():
    clean = gen_synthetic(0, 10, 300)
    noisy = gen_synthetic(0, 10, 300, label_noise=0.2)
    flipped = np.mean(clean.labels != noisy.labels)
    assert 0.14 < flipped < 0.22  # 0.2 * 9/10 expected


def test_partition_examples():
    ds = gen_synthetic(1, 4, 25)
    # one shard holds every item, in the seeded shuffle order
    assert partition_iid(ds, 1, 0)[0] == ds.subset(np.random.default_rng(0).permutation(100))
    shards = partition_iid(ds, 10, 0)
    assert [len(s) for s in shards] == [10] * 10
    with pytest.raises(InputError):
        partition_iid(ds, 0, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_partition_disjoint_cover(n, seed):
    ds = Dataset(np.arange(60, dtype=float).reshape(60, 1, 1, 1) / 60, np.zeros(60, int), 2)
    shards = partition_iid(ds, n, seed)
    ids = np.concatenate([np.round(s.images.ravel() * 60).astype(int) for s in shards])
    assert sorted(ids.tolist()) == list(range(60))
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1


def test_partition_class_balance():
    ds = gen_synthetic(2, 10, 200)
    overall = np.bincount(ds.labels, minlength=10) / len(ds)
    for shard in partition_iid(ds, 2, 7):
        share = np.bincount(shard.labels, minlength=10) / len(shard)
        assert np.all(np.abs(share - overall) <= 0.10)


def test_trigger_geometry():
    zero = np.zeros((1, 2, 6, 6))
    out = stamp(zero, BackdoorSpec(0, 1, size=3))
    assert out.sum() == 2 * 9
    assert np.all(out[0, :, :3, :3] == 1.0)
    one = stamp(zero, BackdoorSpec(0, 1, size=1))
    assert one.sum() == 2 and one[0, 0, 0, 0] == 1
    again = stamp(out, BackdoorSpec(0, 1, size=3))
    np.testing.assert_array_equal(again, out)
    with pytest.raises(InputError):
        stamp(zero, BackdoorSpec(0, 1, size=7))
    img = Dataset(zero, [0], 2)[0]
    assert apply_trigger(img, BackdoorSpec(0, 1)).pixels.sum() == 18


def test_backdoor_spec_validation():
    with pytest.raises(InputError):
        BackdoorSpec(2, 2)
    BackdoorSpec(2, 2, mode="untargeted")
    with pytest.raises(InputError):
        BackdoorSpec(0, 1, size=0)


def _labelled(n_source=100, n_other=50):
    labels = np.r_[np.zeros(n_source, int), np.ones(n_other, int) * 2]
    rng = np.random.default_rng(0)
    return Dataset(rng.uniform(0, 0.5, (len(labels), 1, 5, 5)), labels, 4)


def test_poison_counts():
    ds = _labelled()
    spec = BackdoorSpec(0, 1)
    assert poison_dataset(ds, spec, 0.0, 0) == ds
    assert len(poison_indices(ds, spec, 0.3, 0)) == 30
    full = poison_dataset(ds, spec, 1.0, 0)
    src = ds.labels == 0
    assert np.all(full.labels[src] == 1)
    assert np.all(full.images[src][:, :, :3, :3] == 1.0)
    np.testing.assert_array_equal(full.images[~src], ds.images[~src])


def test_poison_untargeted_avoids_source():
    ds = _labelled()
    out = poison_dataset(ds, BackdoorSpec(0, 0, mode="untargeted"), 1.0, 3)
    assert np.all(out.labels[ds.labels == 0] != 0)
    assert out == poison_dataset(ds, BackdoorSpec(0, 0, mode="untargeted"), 1.0, 3)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_poison_count_is_floor(p, seed):
    ds = _labelled()
    idx = poison_indices(ds, BackdoorSpec(0, 1), p, seed)
    assert len(idx) == int(np.floor(p * 100 + 1e-9))
    assert np.all(ds.labels[idx] == 0)


def test_backdoor_testset():
    ds = _labelled(50, 30)
    out = backdoor_testset(ds, BackdoorSpec(0, 1))
    assert len(out) == 50
    assert np.all(out.labels == 0)
    diff = out.images != ds.images[ds.labels == 0]
    assert not diff[:, :, 3:, :].any() and not diff[:, :, :, 3:].any()
    with pytest.raises(InputError):
        backdoor_testset(ds, BackdoorSpec(3, 1))
