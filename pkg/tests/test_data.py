import math
import struct

import numpy as np
import pytest

from cfsnn.data import (
    EncoderConfig,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    augment_crop_flip,
    encode_input,
    inject_noise,
    load_csv,
    load_idx,
    make_rng,
    make_split,
    synth_dataset,
    write_idx,
)


# ---------------------------------------------------------------- IDX


def test_idx_hand_built_example(tmp_path):
    img = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4])
    lab = struct.pack(">II", 0x801, 2) + bytes([3, 7])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.x.shape == (2, 1, 2, 2)
    np.testing.assert_allclose(ds.x[0, 0], [[0.0, 1.0], [0.2, 0.4]])
    np.testing.assert_array_equal(ds.y, [3, 7])


def test_idx_round_trip_gzip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, 5, dtype=np.uint8)
    write_idx(images, labels, tmp_path / "i.gz", tmp_path / "l.gz", compress=True)
    assert (tmp_path / "i.gz").read_bytes()[:2] == b"\x1f\x8b"
    ds = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    np.testing.assert_array_equal(np.round(ds.x[:, 0] * 255).astype(np.uint8), images)
    assert ds.value_range == (0.0, 1.0)


def test_idx_bad_magic(tmp_path):
    write_idx(np.zeros((1, 2, 2)), np.zeros(1), tmp_path / "i", tmp_path / "l")
    with pytest.raises(IdxMagicError, match="0x00000803"):
        load_idx(tmp_path / "l", tmp_path / "l")


def test_idx_truncated(tmp_path):
    write_idx(np.zeros((3, 2, 2)), np.zeros(3), tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-1])
    with pytest.raises(IdxTruncatedError):
        load_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "i").write_bytes(raw[:2])
    with pytest.raises(IdxTruncatedError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    write_idx(np.zeros((3, 2, 2)), np.zeros(2), tmp_path / "i", tmp_path / "l")
    with pytest.raises(IdxCountMismatchError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_load_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,label\n0.5,1.0,0\n-1,2,2\n")
    ds = load_csv(path)
    np.testing.assert_array_equal(ds.x, [[0.5, 1.0], [-1.0, 2.0]])
    np.testing.assert_array_equal(ds.y, [0, 2])
    assert ds.classes == 3
    (tmp_path / "e.csv").write_text("a,label\n")
    with pytest.raises(ValueError):
        load_csv(tmp_path / "e.csv")


# ---------------------------------------------------------------- synthetic tasks


def test_synth_deterministic_and_split_independent():
    a = synth_dataset("gaussians", 100, 3)
    b = synth_dataset("gaussians", 100, 3)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    train, test = make_split("gaussians", 100, 100, 3)
    assert train.x.tobytes() != test.x.tobytes()
    assert np.bincount(a.y).tolist() == [50, 50]


def test_synth_errors():
    with pytest.raises(ValueError):
        synth_dataset("spirals", 100, 0)
    with pytest.raises(ValueError):
        synth_dataset("gaussians", 19, 0)
    with pytest.raises(ValueError):
        synth_dataset("gaussians", 100, 0, dim=1)


def test_gaussians_bayes_accuracy():
    n = 20_000
    ds = synth_dataset("gaussians", n, 1, separation=6.0)
    # means sit at (+-3, 0); the optimal rule is the sign of the first feature
    pred = (ds.x[:, 0] < 0).astype(int)
    acc = np.mean(pred == ds.y)
    bayes = 0.5 * (1 + math.erf(3.0 / math.sqrt(2)))
    assert bayes == pytest.approx(0.99865, abs=1e-5)
    assert abs(acc - bayes) < 4 * np.sqrt(bayes * (1 - bayes) / n)


def test_temporal_xor_order_carries_label():
    ds = synth_dataset("temporal_xor", 400, 0, time_steps=4)
    assert ds.temporal and ds.x.shape == (400, 4, 2)
    first = np.argmax(ds.x[:, :, 0], axis=1) < np.argmax(ds.x[:, :, 1], axis=1)
    np.testing.assert_array_equal(first.astype(int), ds.y)


def test_temporal_xor_single_step_is_uninformative():
    ds = synth_dataset("temporal_xor", 20_000, 0, time_steps=1)
    x = ds.x[:, 0]
    # both pulses land together, so the two classes share one distribution
    for c in range(2):
        np.testing.assert_allclose(x[ds.y == c].mean(axis=0), [1.0, 1.0], atol=0.02)
    pred = (x[:, 0] > x[:, 1]).astype(int)
    assert abs(np.mean(pred == ds.y) - 0.5) < 0.03


def test_moons_shape():
    ds = synth_dataset("moons", 40, 0)
    assert ds.x.shape == (40, 2) and ds.classes == 2


# ---------------------------------------------------------------- encoding


def test_direct_encoding_repeats():
    x = np.array([[0.2, 0.7]])
    enc = encode_input(x, EncoderConfig("direct", 3))
    assert enc.shape == (3, 1, 2)
    np.testing.assert_array_equal(enc[2], x)


def test_rate_encoding_extremes_and_rate():
    x = np.array([[0.0, 1.0, 0.3]])
    enc = encode_input(x, EncoderConfig("rate", 10_000), make_rng(0, 1))
    assert np.all(enc[:, 0, 0] == 0) and np.all(enc[:, 0, 1] == 1)
    assert abs(enc[:, 0, 2].mean() - 0.3) < 4 * np.sqrt(0.21 / 10_000)
    assert set(np.unique(enc)) <= {0.0, 1.0}


def test_rate_encoding_errors():
    with pytest.raises(ValueError):
        encode_input(np.array([1.5]), EncoderConfig("rate", 2), make_rng(0))
    with pytest.raises(ValueError):
        encode_input(np.array([0.5]), EncoderConfig("rate", 2))
    with pytest.raises(ValueError):
        EncoderConfig("latency")


def test_temporal_encoding_is_time_major():
    x = np.arange(12, dtype=float).reshape(2, 3, 2)
    enc = encode_input(x, EncoderConfig("direct", 3), temporal=True)
    np.testing.assert_array_equal(enc[1, 0], x[0, 1])
    with pytest.raises(ValueError):
        encode_input(x, EncoderConfig("direct", 4), temporal=True)


# ---------------------------------------------------------------- noise


def test_noise_zero_is_identity():
    x = np.random.default_rng(0).random((5, 5))
    for kind in ("uniform", "gaussian", "salt_pepper"):
        np.testing.assert_array_equal(inject_noise(x, kind, 0.0, make_rng(0)), x)


def test_noise_clamped_to_range():
    x = np.random.default_rng(0).random(10_000)
    for kind in ("uniform", "gaussian"):
        out = inject_noise(x, kind, 0.8, make_rng(1))
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_gaussian_noise_std():
    x = np.zeros(1_000_000)
    out = inject_noise(x, "gaussian", 0.1, make_rng(2), value_range=None)
    assert abs(out.std() - 0.1) / 0.1 < 0.01


def test_uniform_noise_bounds():
    out = inject_noise(np.zeros(10_000), "uniform", 0.3, make_rng(3), value_range=None)
    assert np.abs(out).max() <= 0.3
    assert abs(out.var() - 0.09 / 3) < 0.002


def test_salt_pepper_full_intensity():
    x = np.full(10_000, 0.4)
    out = inject_noise(x, "salt_pepper", 1.0, make_rng(4))
    assert set(np.unique(out)) == {0.0, 1.0}
    assert abs(out.mean() - 0.5) < 0.03
    half = inject_noise(x, "salt_pepper", 0.5, make_rng(4))
    assert abs(np.mean(half != 0.4) - 0.5) < 0.03


def test_noise_errors():
    with pytest.raises(ValueError):
        inject_noise(np.zeros(3), "salt_pepper", 1.5, make_rng(0))
    with pytest.raises(ValueError):
        inject_noise(np.zeros(3), "uniform", -0.1, make_rng(0))
    with pytest.raises(ValueError):
        inject_noise(np.zeros(3), "poisson", 0.1, make_rng(0))


def test_noise_reproducible():
    x = np.random.default_rng(0).random(50)
    a = inject_noise(x, "uniform", 0.2, make_rng(9, 103, 0))
    b = inject_noise(x, "uniform", 0.2, make_rng(9, 103, 0))
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- augmentation


def test_crop_flip_preserves_shape_and_content():
    x = np.random.default_rng(0).random((6, 1, 8, 8))
    out = augment_crop_flip(x, make_rng(0), pad=2)
    assert out.shape == x.shape
    assert np.all(out >= 0) and out.max() <= x.max()


def test_crop_without_padding_is_flip_or_identity():
    x = np.random.default_rng(1).random((10, 2, 5, 5))
    out = augment_crop_flip(x, make_rng(1), pad=0)
    for a, b in zip(x, out):
        assert np.array_equal(a, b) or np.array_equal(a[:, :, ::-1], b)
