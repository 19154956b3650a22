import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frskd.config import load_config
from frskd.data import (AugmentConfig, DataError, Dataset, augment, batch_iter, gen_synthetic, load_dataset,
                        normalize, save_dataset)
from frskd.train import train


def test_round_trip(tmp_path):
    ds = gen_synthetic(4, 10, 16, seed=3)
    loaded = load_dataset(save_dataset(ds, tmp_path / "d.json"))
    assert len(loaded) == 10
    assert loaded.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    np.testing.assert_array_equal(loaded.mean, ds.mean)


def test_test_split_reuses_train_stats(tmp_path):
    tr, te = gen_synthetic(4, 20, 16, seed=1), gen_synthetic(4, 8, 16, seed=2, split="test")
    loaded = load_dataset(save_dataset(te, tmp_path / "t.json", stats_from=tr))
    np.testing.assert_array_equal(loaded.mean, tr.mean)
    np.testing.assert_array_equal(loaded.std, tr.std)


def test_label_equal_to_class_count_rejected(tmp_path):
    ds = gen_synthetic(4, 10, 16, seed=3)
    m = save_dataset(ds, tmp_path / "d.json")
    labels = ds.labels.astype("<u2")
    labels[0] = 4
    labels.tofile(tmp_path / "d.labels.u16")
    with pytest.raises(DataError):
        load_dataset(m)


def test_truncated_images_rejected(tmp_path):
    m = save_dataset(gen_synthetic(4, 10, 16, seed=3), tmp_path / "d.json")
    (tmp_path / "d.images.u8").write_bytes(b"\0" * 100)
    with pytest.raises(DataError):
        load_dataset(m)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.json")


def test_dataset_contract():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4), np.uint8), np.array([0, 2]), 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0, 1]), 2)


def test_same_seed_bit_identical():
    a, b = gen_synthetic(4, 50, 16, seed=9), gen_synthetic(4, 50, 16, seed=9)
    assert a.images.tobytes() == b.images.tobytes()
    assert gen_synthetic(4, 50, 16, seed=10).images.tobytes() != a.images.tobytes()


def test_balanced_histogram():
    counts = np.bincount(gen_synthetic(4, 1000, 8, seed=0).labels, minlength=4)
    assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize("args", [(1, 10, 16), (9, 10, 16), (4, 0, 16), (4, 10, 4)])
def test_invalid_generator_args(args):
    with pytest.raises(ValueError):
        gen_synthetic(*args, seed=0)


# ------------------------------------------------------------------ augment

def test_augment_disabled_is_identity(rng):
    x = rng.integers(0, 256, (3, 3, 8, 8), dtype=np.uint8)
    assert augment(x, AugmentConfig(enabled=False), rng) is x


def test_augment_mirror(rng):
    x = rng.integers(0, 256, (3, 3, 8, 8), dtype=np.uint8)
    out = augment(x, AugmentConfig(padding=0, flip_prob=1.0), rng)
    np.testing.assert_array_equal(out, x[..., ::-1])


def test_augment_crop_is_shifted_window(rng):
    x = rng.integers(1, 256, (1, 3, 8, 8), dtype=np.uint8)
    out = augment(x, AugmentConfig(padding=2, flip_prob=0.0), np.random.default_rng(5))
    oy, ox = np.random.default_rng(5).integers(0, 5, size=(1, 2))[0]
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    np.testing.assert_array_equal(out, padded[:, :, oy:oy + 8, ox:ox + 8])


@pytest.mark.parametrize("kw", [dict(padding=-1), dict(flip_prob=1.5)])
def test_augment_config_validation(kw):
    with pytest.raises(ValueError):
        AugmentConfig(**kw)


@settings(max_examples=30)
@given(st.integers(0, 6), st.floats(0, 1), st.integers(0, 1000))
def test_augment_keeps_extent(padding, prob, seed):
    x = np.random.default_rng(seed).integers(0, 256, (2, 3, 8, 8), dtype=np.uint8)
    assert augment(x, AugmentConfig(padding, prob), np.random.default_rng(seed)).shape == x.shape


# ----------------------------------------------------------------- batching

def test_batch_sizes():
    ds = gen_synthetic(2, 10, 8, seed=0)
    assert [len(b.labels) for b in batch_iter(ds, 4, epoch_seed=1)] == [4, 4, 2]


def test_same_seed_same_order():
    ds = gen_synthetic(2, 30, 8, seed=0)
    a = [b.indices.tolist() for b in batch_iter(ds, 7, 11)]
    b = [b.indices.tolist() for b in batch_iter(ds, 7, 11)]
    assert a == b


def test_stream_is_deterministic_with_augmentation():
    ds = gen_synthetic(2, 30, 8, seed=0)
    kw = dict(augment_cfg=AugmentConfig(), augment_seed=4)
    a = [b.images.tobytes() for b in batch_iter(ds, 8, 3, **kw)]
    b = [b.images.tobytes() for b in batch_iter(ds, 8, 3, **kw)]
    assert a == b


def test_normalize_uses_given_stats():
    x = np.full((1, 3, 2, 2), 255, np.uint8)
    out = normalize(x, np.array([0.5, 0.5, 0.5]), np.array([0.25, 0.5, 1.0]), np.float64)
    np.testing.assert_allclose(out[0, :, 0, 0], [2.0, 1.0, 0.5])


@given(st.integers(1, 60), st.integers(1, 16), st.integers(0, 10_000))
def test_batches_partition_indices(n, batch, seed):
    ds = Dataset(np.zeros((n, 3, 2, 2), np.uint8), np.zeros(n, np.int64), 1)
    idx = np.concatenate([b.indices for b in batch_iter(ds, batch, seed)])
    assert sorted(idx.tolist()) == list(range(n))


# ----------------------------------------------------------- learnability

@pytest.fixture(scope="module")
def reference_split():
    tr = gen_synthetic(4, 5000, 16, seed=100)
    te = gen_synthetic(4, 1000, 16, seed=200, split="test")
    te.mean, te.std = tr.mean, tr.std
    return tr, te


def test_linear_model_stays_below_60_percent(reference_split):
    from sklearn.linear_model import LogisticRegression

    tr, te = reference_split
    feats = lambda d: normalize(d.images, tr.mean, tr.std, np.float64).reshape(len(d), -1)
    clf = LogisticRegression(max_iter=300).fit(feats(tr), tr.labels)
    assert clf.score(feats(te), te.labels) < 0.60


@pytest.mark.slow
def test_small_cnn_exceeds_95_percent(reference_split, tmp_path):
    tr, te = reference_split
    cfg = load_config(None, ["teacher.enabled=false", "train.epochs=8", f"output.dir={tmp_path}"])
    last = train(cfg, tr, te)
    assert last.student_test_acc >= 0.95
