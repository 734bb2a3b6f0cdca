import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trinas import data


def _toy_set(n_per=6, classes=3, size=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1, 1, (n_per * classes, size, size, 1))
    labels = np.repeat(np.arange(classes), n_per)
    return data.LabeledImageSet(images, labels, classes)


def test_nchw_moves_channels_first():
    x = np.zeros((5, 8, 8, 3))
    assert data.nchw(x).shape == (5, 3, 8, 8)


def test_labeled_set_validates_range_and_labels():
    with pytest.raises(ValueError):
        data.LabeledImageSet(np.full((2, 4, 4, 1), 2.0),
                             np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        data.LabeledImageSet(np.zeros((2, 4, 4, 1)), np.array([0, 5]), 2)


def test_class_templates_orthonormal_and_zero_mean():
    for c, size in ((4, 8), (3, 6), (6, 8)):
        t = data.class_templates(c, size)
        assert t.shape == (c, size, size)
        flat = t.reshape(c, -1)
        np.testing.assert_allclose(flat @ flat.T, np.eye(c), atol=1e-10)
        np.testing.assert_allclose(flat.sum(axis=1), np.zeros(c), atol=1e-10)


def test_bayes_error_bound_decreases_with_separation():
    errs = [data.bayes_error_bound(4, s) for s in (1.0, 2.0, 3.0, 4.0)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert 0 < errs[-1] < errs[0] < 3.0


def test_synth_blobs_shapes_and_balance():
    ds = data.synth_blobs(4, 32, size=8, separation=3.0,
                          rng=np.random.default_rng(5))
    assert ds.images.shape == (128, 8, 8, 1)
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    np.testing.assert_array_equal(np.bincount(ds.labels), [32] * 4)


def test_synth_blobs_classes_separable_by_template_match():
    ds = data.synth_blobs(4, 64, size=8, separation=3.0,
                          rng=np.random.default_rng(9))
    t = data.class_templates(4, 8).reshape(4, -1)
    scores = ds.images.reshape(ds.n, -1) @ t.T
    acc = (scores.argmax(axis=1) == ds.labels).mean()
    assert acc > 0.9


def test_synth_blobs_deterministic_for_fixed_rng():
    a = data.synth_blobs(3, 10, rng=np.random.default_rng(42))
    b = data.synth_blobs(3, 10, rng=np.random.default_rng(42))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


class TestStratifiedSplit:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 5), st.integers(2, 9),
           st.floats(0.2, 0.8), st.integers(0, 10 ** 6))
    def test_partition_laws(self, classes, n_per, frac, seed):
        ds = _toy_set(n_per, classes, seed=seed)
        split = data.stratified_split(ds, frac, np.random.default_rng(seed))
        assert split.train.n + split.val.n == ds.n
        # every class present on both sides
        assert np.bincount(split.train.labels, minlength=classes).min() >= 1
        assert np.bincount(split.val.labels, minlength=classes).min() >= 1
        # no example lost or duplicated
        key = lambda s: sorted(map(tuple, s.images.reshape(s.n, -1)))
        merged = sorted(key(split.train) + key(split.val))
        np.testing.assert_allclose(merged,
                                   sorted(map(tuple,
                                              ds.images.reshape(ds.n, -1))))

    def test_fraction_sizing_rounds_up_for_train(self):
        ds = _toy_set(5, 2)
        split = data.stratified_split(ds, 0.5, np.random.default_rng(0))
        np.testing.assert_array_equal(
            np.bincount(split.train.labels), [3, 3])

    def test_rejects_single_example_class(self):
        images = np.zeros((3, 4, 4, 1))
        ds = data.LabeledImageSet(images, np.array([0, 0, 1]), 2)
        with pytest.raises(ValueError):
            data.stratified_split(ds, 0.5, np.random.default_rng(0))


def test_cig_view_swaps_without_copying():
    split = data.stratified_split(_toy_set(), 0.5, np.random.default_rng(1))
    flipped = data.cig_view(split)
    assert flipped.train is split.val and flipped.val is split.train


class TestLfmc:
    def test_roundtrip(self, tmp_path):
        ds = data.synth_blobs(3, 5, size=6, rng=np.random.default_rng(2))
        path = tmp_path / "set.lfmc"
        data.save_lfmc(path, ds)
        back = data.load_lfmc(path)
        assert back.num_classes == 3
        np.testing.assert_array_equal(back.labels, ds.labels)
        # float32 on disk, float64 in memory
        np.testing.assert_array_equal(
            back.images, ds.images.astype(np.float32).astype(np.float64))

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.lfmc"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(data.LfmcFormatError):
            data.load_lfmc(path)

    def test_truncation_detected(self, tmp_path):
        ds = data.synth_blobs(2, 4, size=4, rng=np.random.default_rng(3))
        path = tmp_path / "cut.lfmc"
        data.save_lfmc(path, ds)
        whole = path.read_bytes()
        path.write_bytes(whole[:len(whole) - 7])
        with pytest.raises(data.LfmcFormatError):
            data.load_lfmc(path)

    def test_label_out_of_range_detected(self, tmp_path):
        ds = data.synth_blobs(2, 2, size=4, rng=np.random.default_rng(4))
        path = tmp_path / "label.lfmc"
        data.save_lfmc(path, ds)
        raw = bytearray(path.read_bytes())
        # first record's label field sits right after the fixed header
        import struct
        hdr = struct.calcsize("<4sHHIHHB")
        struct.pack_into("<H", raw, hdr, 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(data.LfmcFormatError):
            data.load_lfmc(path)


class TestStreams:
    def test_batch_stream_deterministic(self):
        ds = _toy_set(8, 2)
        a = data.BatchStream(ds, np.random.default_rng(6))
        b = data.BatchStream(ds, np.random.default_rng(6))
        for _ in range(5):
            xa, ya = a.next(4)
            xb, yb = b.next(4)
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)

    def test_batch_stream_covers_epoch(self):
        ds = _toy_set(4, 2)  # 8 examples
        stream = data.BatchStream(ds, np.random.default_rng(7))
        seen = np.concatenate([stream.next(4)[1] for _ in range(2)])
        np.testing.assert_array_equal(np.bincount(seen), [4, 4])

    def test_stratified_stream_balances_every_batch(self):
        ds = _toy_set(10, 4)
        stream = data.StratifiedStream(ds, np.random.default_rng(8))
        for _ in range(6):
            _, y = stream.next(8)
            np.testing.assert_array_equal(np.bincount(y, minlength=4),
                                          [2, 2, 2, 2])

    def test_stratified_stream_rejects_indivisible_batch(self):
        ds = _toy_set(4, 3)
        stream = data.StratifiedStream(ds, np.random.default_rng(9))
        with pytest.raises(ValueError):
            stream.next(7)
