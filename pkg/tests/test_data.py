import numpy as np
import pytest

from pibconv.data import (
    CIFAR_MEAN,
    CIFAR_STD,
    DataError,
    TEST_FILES,
    TRAIN_FILES,
    augment_batch,
    cutout,
    cutout_batch,
    load_cifar10,
    make_synthetic,
    normalize_images,
    write_cifar10_batch,
)


def _fake_cifar(root, n_train_per_file=4, n_test=6, seed=0):
    rng = np.random.default_rng(seed)
    d = root / "cifar-10-batches-bin"
    d.mkdir()
    expect_train, expect_labels = [], []
    for name in TRAIN_FILES:
        imgs = rng.integers(0, 256, (n_train_per_file, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, n_train_per_file, dtype=np.uint8)
        write_cifar10_batch(d / name, imgs, labels)
        expect_train.append(imgs)
        expect_labels.append(labels)
    timgs = rng.integers(0, 256, (n_test, 3, 32, 32), dtype=np.uint8)
    tlabels = rng.integers(0, 10, n_test, dtype=np.uint8)
    write_cifar10_batch(d / TEST_FILES[0], timgs, tlabels)
    return d, np.concatenate(expect_train), np.concatenate(expect_labels), timgs, tlabels


class TestCifarLoader:
    def test_round_trip_raw(self, tmp_path):
        d, imgs, labels, timgs, tlabels = _fake_cifar(tmp_path)
        (tx, ty), (vx, vy) = load_cifar10(d, normalize=False)
        np.testing.assert_array_equal(tx, imgs.astype(np.float32) / 255.0)
        np.testing.assert_array_equal(ty, labels)
        np.testing.assert_array_equal(vx, timgs.astype(np.float32) / 255.0)
        np.testing.assert_array_equal(vy, tlabels)

    def test_normalization_applied(self, tmp_path):
        d, imgs, _, _, _ = _fake_cifar(tmp_path)
        (tx, _), _ = load_cifar10(d, normalize=True)
        manual = (imgs.astype(np.float32) / 255.0 - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]
        np.testing.assert_allclose(tx, manual, atol=1e-6)

    def test_accepts_parent_directory(self, tmp_path):
        _fake_cifar(tmp_path)
        load_cifar10(tmp_path)  # resolves the nested batches dir

    def test_missing_file(self, tmp_path):
        d, *_ = _fake_cifar(tmp_path)
        (d / TRAIN_FILES[3]).unlink()
        with pytest.raises(DataError, match=TRAIN_FILES[3]):
            load_cifar10(d)

    def test_truncated_record(self, tmp_path):
        d, *_ = _fake_cifar(tmp_path)
        p = d / TRAIN_FILES[0]
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(DataError, match="size"):
            load_cifar10(d)

    def test_bad_label(self, tmp_path):
        d, *_ = _fake_cifar(tmp_path)
        p = d / TRAIN_FILES[0]
        raw = bytearray(p.read_bytes())
        raw[0] = 11
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="label"):
            load_cifar10(d)

    def test_normalize_images_helper(self):
        u8 = np.zeros((1, 3, 2, 2), dtype=np.uint8)
        out = normalize_images(u8)
        expect = (0.0 - CIFAR_MEAN) / CIFAR_STD
        np.testing.assert_allclose(out[0, :, 0, 0], expect, atol=1e-6)


class TestSynthetic:
    def test_deterministic(self):
        x1, y1 = make_synthetic(seed=5, n=40, classes=4, hw=16)
        x2, y2 = make_synthetic(seed=5, n=40, classes=4, hw=16)
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)
        x3, _ = make_synthetic(seed=6, n=40, classes=4, hw=16)
        assert not np.array_equal(x1, x3)

    def test_shapes_and_balance(self):
        x, y = make_synthetic(seed=0, n=40, classes=4, hw=16)
        assert x.shape == (40, 3, 16, 16) and x.dtype == np.float32
        assert y.shape == (40,) and y.dtype == np.int64
        counts = np.bincount(y, minlength=4)
        assert counts.min() == counts.max() == 10

    def test_zero_noise_collapses_to_templates(self):
        x, y = make_synthetic(seed=1, n=8, classes=2, hw=12, noise=0.0)
        for c in range(2):
            members = x[y == c]
            for m in members[1:]:
                np.testing.assert_array_equal(m, members[0])
        assert not np.array_equal(x[y == 0][0], x[y == 1][0])

    def test_classes_linearly_separable_enough(self):
        # nearest-template classification should be perfect at low noise
        x, y = make_synthetic(seed=2, n=64, classes=4, hw=16, noise=0.1)
        t, _ = make_synthetic(seed=2, n=4, classes=4, hw=16, noise=0.0)
        d = ((x[:, None] - t[None]) ** 2).sum(axis=(2, 3, 4))
        assert (d.argmin(axis=1) == y).all()


class TestAugment:
    def test_deterministic_given_stream(self):
        x = np.random.default_rng(0).standard_normal((6, 3, 8, 8)).astype(np.float32)
        a = augment_batch(x, np.random.default_rng(1))
        b = augment_batch(x, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_preserves_shape_and_values_come_from_padded(self):
        x = np.arange(2 * 3 * 8 * 8, dtype=np.float32).reshape(2, 3, 8, 8) + 1
        out = augment_batch(x, np.random.default_rng(3), pad=4)
        assert out.shape == x.shape
        padded_vals = set(np.concatenate([[0.0], x.ravel()]).tolist())
        assert set(out.ravel().tolist()) <= padded_vals

    def test_identity_crop_recoverable(self):
        # with pad=0 the only crop is the identity; flips may still occur
        x = np.random.default_rng(4).standard_normal((64, 3, 8, 8)).astype(np.float32)
        out = augment_batch(x, np.random.default_rng(5), pad=0)
        for i in range(64):
            same = np.array_equal(out[i], x[i])
            flipped = np.array_equal(out[i], x[i][:, :, ::-1])
            assert same or flipped
        n_flipped = sum(not np.array_equal(out[i], x[i]) for i in range(64))
        assert 10 < n_flipped < 54  # roughly half


class TestCutout:
    def test_square_zeroed_and_copy(self):
        img = np.ones((3, 16, 16), dtype=np.float32)
        out = cutout(img, 4, np.random.default_rng(0))
        assert out is not img
        assert img.min() == 1.0  # input untouched
        zeroed = (out == 0).sum()
        assert 0 < zeroed <= 3 * 4 * 4
        # the zeroed region is the same square on every channel
        mask = out[0] == 0
        for c in (1, 2):
            np.testing.assert_array_equal(out[c] == 0, mask)
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        assert len(rows) <= 4 and len(cols) <= 4
        assert mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].all()

    def test_clipping_at_border(self):
        # length 6 on an 8x8 image: interior centers give 6x6, corners clip to 4x4
        img = np.ones((3, 8, 8), dtype=np.float32)
        sizes = set()
        for seed in range(40):
            out = cutout(img, 6, np.random.default_rng(seed))
            sizes.add(int((out[0] == 0).sum()))
        assert max(sizes) == 36
        assert min(sizes) < 36  # clipped variants occur
        assert all(s >= 9 for s in sizes)  # at worst a 3x3 corner remnant

    def test_full_coverage_when_length_exceeds_image(self):
        img = np.ones((3, 8, 8), dtype=np.float32)
        out = cutout(img, 16, np.random.default_rng(0))
        assert (out == 0).all()

    def test_batch_variant(self):
        x = np.ones((5, 3, 16, 16), dtype=np.float32)
        out = cutout_batch(x, 4, np.random.default_rng(1))
        assert out.shape == x.shape
        assert all((out[i] == 0).any() for i in range(5))
        patches = {tuple(np.argwhere(out[i][0] == 0).ravel()) for i in range(5)}
        assert len(patches) > 1  # positions vary per image
