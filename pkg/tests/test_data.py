import struct

import numpy as np
import pytest

from data import (
    DIGITS_PER_SAMPLE,
    INDEX_FILE,
    DigitBank,
    as_arrays,
    compose_label,
    downscale,
    generate_ultramnist,
    iterate_batches,
    load_dataset,
    load_idx,
    make_sample,
    procedural_digits,
    save_dataset,
    stratified_labels,
)
from errors import LoadError, ParseError, ValidationError


@pytest.fixture(scope="module")
def bank():
    return procedural_digits()


@pytest.fixture(scope="module")
def samples(bank):
    return generate_ultramnist(bank, 20, image_size=64, scale_range=(0.1, 0.4), seed=3)


def _idx(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


# -----------------------------
# digit sources
# -----------------------------
def test_procedural_bank_has_every_class(bank):
    assert bank.images.shape == (10, 28, 28)
    assert set(np.unique(bank.images)) <= {0.0, 1.0}
    assert all(len(bank.exemplars(d)) == 1 for d in range(10))
    # glyphs are pairwise distinct
    flat = bank.images.reshape(10, -1)
    assert len({row.tobytes() for row in flat}) == 10


def test_bank_validation():
    with pytest.raises(ValidationError, match="classes"):
        DigitBank(np.zeros((3, 4, 4)), np.array([0, 1, 2]))
    with pytest.raises(ValidationError, match="normalised"):
        DigitBank(np.full((10, 4, 4), 2.0), np.arange(10))


def test_load_idx(tmp_path):
    pixels = np.arange(10 * 2 * 3, dtype=np.uint8)
    (tmp_path / "img").write_bytes(_idx(0x803, (10, 2, 3), pixels))
    (tmp_path / "lbl").write_bytes(_idx(0x801, (10,), range(10)))
    loaded = load_idx(tmp_path / "img", tmp_path / "lbl")
    assert loaded.images.shape == (10, 2, 3)
    assert loaded.images.max() == pytest.approx(59 / 255)
    np.testing.assert_array_equal(loaded.labels, np.arange(10))


@pytest.mark.parametrize(
    "blob,offset",
    [
        (b"\x00\x00", 2),
        (_idx(0x801, (10, 2, 3), range(60)), 0),
        (struct.pack(">I", 0x803) + b"\x00\x00\x00\x0a", 8),
        (_idx(0x803, (10, 2, 3), range(59)), 75),
        (_idx(0x803, (10, 2, 3), range(61)), 76),
    ],
)
def test_idx_parse_errors(tmp_path, blob, offset):
    (tmp_path / "img").write_bytes(blob)
    (tmp_path / "lbl").write_bytes(_idx(0x801, (10,), range(10)))
    with pytest.raises(ParseError) as exc:
        load_idx(tmp_path / "img", tmp_path / "lbl")
    assert exc.value.offset == offset


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(_idx(0x803, (10, 1, 1), range(10)))
    (tmp_path / "lbl").write_bytes(_idx(0x801, (9,), range(9)))
    with pytest.raises(ValidationError, match="10 images vs 9 labels"):
        load_idx(tmp_path / "img", tmp_path / "lbl")


# -----------------------------
# generation
# -----------------------------
@pytest.mark.parametrize("count", [7, 10, 23, 100])
def test_stratified_labels_are_balanced(count):
    counts = np.bincount(stratified_labels(count, seed=1), minlength=10)
    assert counts.max() - counts.min() <= 1
    assert counts.sum() == count


def test_compose_label_sums_to_label():
    rng = np.random.default_rng(0)
    for label in range(10):
        for _ in range(20):
            parts = compose_label(label, rng)
            assert sum(parts) == label
            assert len(parts) in DIGITS_PER_SAMPLE
            assert all(0 <= d <= 9 for d in parts)


def test_samples_follow_generation_rules(samples):
    for s in samples:
        assert s.image.shape == (64, 64, 1) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert sum(s.digits) == s.label
        assert len(s.digits) in DIGITS_PER_SAMPLE
        assert len(s.boxes) == len(s.digits) == len(s.scales)
        for i, (r, c, h, w) in enumerate(s.boxes):
            assert 0 <= r and r + h <= 64 and 0 <= c and c + w <= 64
            assert 6 <= h <= 26
            for r2, c2, h2, w2 in s.boxes[i + 1:]:
                assert r + h <= r2 or r2 + h2 <= r or c + w <= c2 or c2 + w2 <= c


def test_generation_is_deterministic(bank, samples):
    again = generate_ultramnist(bank, 20, image_size=64, scale_range=(0.1, 0.4), seed=3)
    threaded = generate_ultramnist(bank, 20, image_size=64, scale_range=(0.1, 0.4), seed=3, workers=3)
    for a, b, c in zip(samples, again, threaded):
        assert a.image.tobytes() == b.image.tobytes() == c.image.tobytes()
        assert a.provenance() == b.provenance() == c.provenance()
    other = generate_ultramnist(bank, 20, image_size=64, scale_range=(0.1, 0.4), seed=4)
    assert any(a.image.tobytes() != o.image.tobytes() for a, o in zip(samples, other))


def test_dense_layout_still_terminates(bank):
    sample = make_sample(bank, 9, 32, (0.4, 0.6), seed=11)
    assert sum(sample.digits) == 9
    assert all(side >= 13 for side in sample.scales)


@pytest.mark.parametrize("scale_range", [(0.0, 0.5), (0.6, 0.5), (0.2, 1.5)])
def test_invalid_scale_range(bank, scale_range):
    with pytest.raises(ValidationError, match="scale_range"):
        generate_ultramnist(bank, 3, image_size=64, scale_range=scale_range)


def test_impossible_layout(bank):
    with pytest.raises(ValidationError, match="could not place"):
        make_sample(bank, 9, 16, (1.0, 1.0), seed=0)


def test_as_arrays(samples):
    X, y = as_arrays(samples)
    assert X.shape == (20, 64, 64, 1) and y.dtype == np.int64
    with pytest.raises(ValidationError):
        as_arrays([])


def test_downscale_block_mean():
    X = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    out = downscale(X, 2)
    assert out.shape == (1, 2, 2, 1)
    assert out[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    assert downscale(X, 1) is X
    with pytest.raises(ValidationError):
        downscale(X, 3)


def test_iterate_batches():
    X = np.arange(10)[:, None]
    y = np.arange(10)
    batches = list(iterate_batches(X, y, 4, seed=1, epoch=0))
    assert [len(b[1]) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate([b[1] for b in batches]).tolist()) == list(range(10))
    for xb, yb in batches:
        np.testing.assert_array_equal(xb[:, 0], yb)
    again = [b[1].tolist() for b in iterate_batches(X, y, 4, seed=1, epoch=0)]
    assert again == [b[1].tolist() for b in batches]
    next_epoch = [b[1].tolist() for b in iterate_batches(X, y, 4, seed=1, epoch=1)]
    assert next_epoch != again
    plain = [b[1].tolist() for b in iterate_batches(X, y, 4, shuffle=False)]
    assert plain[0] == [0, 1, 2, 3]


# -----------------------------
# dataset IO
# -----------------------------
def test_save_and_load(tmp_path, samples):
    save_dataset(samples, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.provenance() == b.provenance()


def _saved(tmp_path, samples):
    return save_dataset(samples[:3], tmp_path / "ds")


def test_load_missing_index(tmp_path):
    with pytest.raises(LoadError, match="index not found"):
        load_dataset(tmp_path)


@pytest.mark.parametrize(
    "index_text,message",
    [
        ("id,label\n", "header"),
        ("id,label,seed\n0,1\n", "partial index row"),
        ("id,label,seed\n0,x,1\n", "non-integer"),
        ("id,label,seed\n1,0,0\n", "expected id 0"),
    ],
)
def test_load_bad_index(tmp_path, samples, index_text, message):
    directory = _saved(tmp_path, samples)
    (directory / INDEX_FILE).write_text(index_text, encoding="utf-8")
    with pytest.raises(LoadError, match=message):
        load_dataset(directory)


def test_load_missing_record(tmp_path, samples):
    directory = _saved(tmp_path, samples)
    (directory / "sample_000001.rec").unlink()
    with pytest.raises(LoadError, match="missing record") as exc:
        load_dataset(directory)
    assert exc.value.name == "1"


def test_load_label_mismatch(tmp_path, samples):
    directory = _saved(tmp_path, samples)
    lines = (directory / INDEX_FILE).read_text(encoding="utf-8").splitlines()
    sample_id, label, seed = lines[1].split(",")
    lines[1] = ",".join([sample_id, str((int(label) + 1) % 10), seed])
    (directory / INDEX_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(LoadError, match="disagrees"):
        load_dataset(directory)


def test_load_truncated_index(tmp_path, samples):
    directory = _saved(tmp_path, samples)
    lines = (directory / INDEX_FILE).read_text(encoding="utf-8").splitlines()
    (directory / INDEX_FILE).write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
    with pytest.raises(LoadError, match="partial index"):
        load_dataset(directory)
