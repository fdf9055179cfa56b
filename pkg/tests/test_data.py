import numpy as np
import pytest

from adaprune.autodiff import Tensor, no_grad
from adaprune.config import TrainConfig
from adaprune.data import (
    NORMALIZATION,
    DatasetSplit,
    batches,
    hflip,
    load_cifar,
    normalize,
    normalize_augment,
    parse_batch,
    random_crop_flip,
    serialize_batch,
    synth_dataset,
)
from adaprune.errors import ConfigError, CorruptFileError, MissingFileError
from adaprune.trainer import evaluate, phase1_pretrain, make_network
from adaprune.checkpoint import load_checkpoint
from adaprune.spm import Variant


def random_records(rng, n, fine_max=10, coarse=False):
    labels = rng.integers(0, fine_max, n, dtype=np.uint8)
    pixels = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
    rows = [labels[:, None], pixels]
    if coarse:
        rows.insert(0, rng.integers(0, 20, n, dtype=np.uint8)[:, None])
    return np.concatenate(rows, axis=1).tobytes(), labels, pixels


def write_cifar10(root, rng, per_file=3):
    d = root / "cifar-10-batches-bin"
    d.mkdir(parents=True)
    blobs = {}
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        blobs[name] = random_records(rng, per_file)[0]
        (d / name).write_bytes(blobs[name])
    return d, blobs


def test_record_count_from_file_size():
    data = bytes(30_730)
    labels, images, coarse = parse_batch(data)
    assert len(labels) == 10 and images.shape == (10, 3, 32, 32) and coarse is None


def test_label_and_pixel_layout():
    rec = bytes([7]) + bytes([255]) * 3072
    labels, images, _ = parse_batch(rec)
    assert labels[0] == 7
    assert images.dtype == np.uint8 and np.all(images == 255)


def test_plane_order_is_rgb_row_major():
    pixels = np.arange(3072) % 251
    labels, images, _ = parse_batch(bytes([0]) + bytes(pixels.astype(np.uint8)))
    assert images[0, 0, 0, 1] == pixels[1]
    assert images[0, 0, 1, 0] == pixels[32]
    assert images[0, 1, 0, 0] == pixels[1024]
    assert images[0, 2, 31, 31] == pixels[3071]


def test_cifar100_uses_fine_label():
    rec = bytes([3, 42]) + bytes(3072)
    fine, _, coarse = parse_batch(rec, "cifar100")
    assert fine[0] == 42 and coarse[0] == 3


@pytest.mark.parametrize("dataset,coarse", [("cifar10", False), ("cifar100", True)])
def test_reserialize_is_bit_exact(rng, dataset, coarse):
    blob, _, _ = random_records(rng, 7, 100 if coarse else 10, coarse)
    fine, images, co = parse_batch(blob, dataset)
    assert serialize_batch(fine, images, dataset, co) == blob


@pytest.mark.parametrize("size", [1, 3072, 3074, 30_731])
def test_bad_size_is_corrupt(size):
    with pytest.raises(CorruptFileError):
        parse_batch(bytes(size))


def test_load_cifar10_preserves_order(tmp_path, rng):
    _, blobs = write_cifar10(tmp_path, rng)
    train, test = load_cifar(tmp_path)
    assert len(train) == 15 and len(test) == 3
    expected = b"".join(blobs[f"data_batch_{i}.bin"] for i in range(1, 6))
    assert serialize_batch(train.labels, train.images) == expected
    assert train.num_classes == 10 and train.raw


def test_missing_files_listed(tmp_path, rng):
    d, _ = write_cifar10(tmp_path, rng)
    (d / "data_batch_3.bin").unlink()
    with pytest.raises(MissingFileError, match="data_batch_3.bin"):
        load_cifar(tmp_path)
    with pytest.raises(MissingFileError, match="test.bin"):
        load_cifar(tmp_path / "empty", "cifar100")


def test_corrupt_file_named(tmp_path, rng):
    d, _ = write_cifar10(tmp_path, rng)
    (d / "test_batch.bin").write_bytes(bytes(100))
    with pytest.raises(CorruptFileError, match="test_batch.bin"):
        load_cifar(tmp_path)


def test_unknown_dataset():
    with pytest.raises(ConfigError):
        load_cifar(".", "mnist")


# ------------------------------------------------------------ normalization


def test_zero_image_normalizes_to_neg_mean_over_std():
    mean, std = NORMALIZATION["cifar10"]
    x = normalize(np.zeros((1, 3, 32, 32), np.uint8), mean, std)
    for c in range(3):
        assert np.all(x[0, c] == -mean[c] / std[c])


def _raw_split(rng, n=6):
    return DatasetSplit(
        rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8),
        np.zeros(n, np.int64),
        "train",
        10,
        *NORMALIZATION["cifar10"],
    )


def test_eval_mode_is_deterministic_and_unaugmented(rng):
    split = _raw_split(rng)
    idx = np.arange(6)
    a = normalize_augment(split, idx, "eval", np.random.default_rng(0))
    b = normalize_augment(split, idx, "eval", np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, normalize(split.images, split.mean, split.std))


def test_train_mode_crops_and_flips(rng):
    split = _raw_split(rng)
    a = normalize_augment(split, np.arange(6), "train", np.random.default_rng(0))
    assert a.shape == (6, 3, 32, 32)
    assert not np.array_equal(a, normalize(split.images, split.mean, split.std))


def test_train_mode_needs_rng(rng):
    with pytest.raises(ConfigError):
        normalize_augment(_raw_split(rng), np.arange(2), "train")


def test_flip_is_involution(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    np.testing.assert_array_equal(hflip(hflip(x)), x)


def test_crop_shift_zero_pad_with_forced_flip(rng):
    x = rng.standard_normal((4, 3, 8, 8))
    once = random_crop_flip(x, np.random.default_rng(3), pad=0, flip=True)
    np.testing.assert_array_equal(once, hflip(x))
    np.testing.assert_array_equal(random_crop_flip(once, rng, pad=0, flip=True), x)


def test_crop_is_a_shifted_window(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    out = random_crop_flip(x, np.random.default_rng(5), pad=2, flip=False)
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    hits = [
        (dy, dx) for dy in range(5) for dx in range(5) if np.array_equal(padded[0, 0, dy : dy + 6, dx : dx + 6], out[0, 0])
    ]
    assert hits


# -------------------------------------------------------------- synthetic


def test_synthetic_same_seed_bit_identical():
    a_tr, a_te = synth_dataset(50, 5, seed=3)
    b_tr, b_te = synth_dataset(50, 5, seed=3)
    np.testing.assert_array_equal(a_tr.images, b_tr.images)
    np.testing.assert_array_equal(a_te.labels, b_te.labels)
    c_tr, _ = synth_dataset(50, 5, seed=4)
    assert not np.array_equal(a_tr.images, c_tr.images)


def test_synthetic_balance():
    train, _ = synth_dataset(100, 10, seed=0)
    assert np.all(np.bincount(train.labels, minlength=10) == 10)


def test_synthetic_requires_enough_samples():
    with pytest.raises(ConfigError):
        synth_dataset(3, 10)


def test_shuffle_order_reproducible():
    a = np.concatenate(list(batches(50, 8, np.random.default_rng(9))))
    b = np.concatenate(list(batches(50, 8, np.random.default_rng(9))))
    np.testing.assert_array_equal(a, b)
    assert sorted(a) == list(range(50))
    assert [len(i) for i in batches(50, 8, drop_last=True)] == [8] * 6


def test_tinynet_fits_synthetic_in_200_steps(tmp_path):
    cfg = TrainConfig(
        synthetic_n=1600,
        synthetic_test_n=100,
        image_size=16,
        batch_size=32,
        lr=0.05,
        epochs_pretrain=4,
        out_dir=str(tmp_path),
    )
    data = synth_dataset(1600, 10, seed=0, n_test=100, image_size=16)
    res = phase1_pretrain(cfg, data)
    assert res.steps == 200
    net = make_network(cfg, Variant.UNPRUNED)
    load_checkpoint(net, res.checkpoint)
    assert evaluate(net, data[0]).top1 > 0.90
