from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepobf.data import (
    CIFAR_RECORD,
    DatasetSpec,
    batches,
    class_template,
    load,
    load_cifar_binary,
    parse_spec,
    per_class_subset,
    read_cifar_records,
    synth_generate,
)
from deepobf.errors import DatasetError

REF = DatasetSpec()


@pytest.fixture(scope="module")
def ref_splits():
    return synth_generate(REF)


def test_same_spec_is_bit_identical(ref_splits):
    again = synth_generate(REF)
    assert again[0].digest() == ref_splits[0].digest()
    assert again[1].digest() == ref_splits[1].digest()


def test_seed_changes_data(ref_splits):
    other, _ = synth_generate(replace(REF, seed=8))
    assert other.digest() != ref_splits[0].digest()


def test_shapes_and_ranges(ref_splits):
    train, test = ref_splits
    assert train.images.shape == (800, 3, 16, 16) and test.images.shape == (200, 3, 16, 16)
    assert train.images.dtype == np.float32
    assert train.images.min() >= 0.0 and train.images.max() <= 1.0
    assert np.bincount(train.labels).tolist() == [200] * 4


def test_train_and_test_disjoint(ref_splits):
    train, test = ref_splits
    a = {img.tobytes() for img in train.images}
    assert not any(img.tobytes() in a for img in test.images)


def _ridge_accuracy(train, test, lam=1.0):
    x = train.images.reshape(len(train), -1).astype(np.float64)
    xt = test.images.reshape(len(test), -1).astype(np.float64)
    mu = x.mean(0)
    a = np.c_[x - mu, np.ones(len(x))]
    w = np.linalg.solve(a.T @ a + lam * np.eye(a.shape[1]), a.T @ np.eye(train.classes)[train.labels])
    return float(np.mean((np.c_[xt - mu, np.ones(len(xt))] @ w).argmax(1) == test.labels))


def test_linear_classifier_on_raw_pixels(ref_splits):
    # pinned by a one-off ridge run: 1.0 at lambda=1
    acc = _ridge_accuracy(*ref_splits)
    assert acc >= 0.85
    assert acc == pytest.approx(1.0)


def test_noise_free_nearest_template_is_perfect():
    train, test = synth_generate(replace(REF, noise=0.0))
    means = np.stack([train.images[train.labels == k].mean(0).ravel() for k in range(4)])
    d = ((test.images.reshape(len(test), -1)[:, None] - means[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(1) == test.labels) == 1.0


def test_superset_shares_first_classes(ref_splits):
    train8, test8 = synth_generate(replace(REF, classes=8))
    keep = train8.labels < 4
    assert train8.images[keep].tobytes() == ref_splits[0].images.tobytes()
    assert test8.images[test8.labels < 4].tobytes() == ref_splits[1].images.tobytes()


def test_shift_moves_blobs_but_keeps_classes():
    moved = replace(REF, shift=(3, 2))
    for k in range(4):
        a, b = class_template(REF, k), class_template(moved, k)
        assert b["center"] == (a["center"][0] + 2, a["center"][1] + 3)
        assert b["angle"] == a["angle"] and b["freq"] == a["freq"]
    assert _ridge_accuracy(*synth_generate(replace(REF, shift=(3, 2)))) >= 0.85


def test_too_many_classes_rejected():
    with pytest.raises(DatasetError, match="representable"):
        synth_generate(replace(REF, classes=17))


def test_spec_invariants():
    with pytest.raises(DatasetError):
        DatasetSpec(channels=2)
    with pytest.raises(DatasetError):
        synth_generate(DatasetSpec(kind="cifar_binary"))


def test_single_channel_generation():
    train, _ = synth_generate(replace(REF, channels=1, train_per_class=5, test_per_class=1))
    assert train.images.shape == (20, 1, 16, 16)


def test_parse_spec_round_trip():
    s = "synth:4:3x16x16:200:50:11:shift=3,2"
    spec = parse_spec(s)
    assert spec.shift == (3, 2) and spec.seed == 11 and spec.train_per_class == 200
    assert spec.to_string() == s
    assert parse_spec("synth:8:1x8x8:10:5:0").to_string() == "synth:8:1x8x8:10:5:0"
    assert load("synth:2:1x8x8:3:2:0")[0].images.shape == (6, 1, 8, 8)


@pytest.mark.parametrize("bad", ["synth:4:3x16:1:1:1", "cifar", "synth:4:3x16x16:1:1:1:shift=1"])
def test_parse_spec_rejects(bad):
    with pytest.raises(DatasetError, match="expected"):
        parse_spec(bad)


def test_per_class_subset(ref_splits):
    sub = per_class_subset(ref_splits[0], 3)
    assert np.bincount(sub.labels).tolist() == [3] * 4
    assert sub.images[0].tobytes() == ref_splits[0].images[0].tobytes()


# --- CIFAR binary ---------------------------------------------------------------------------------


def _record(label, fill=0, r0=None):
    rec = bytearray([label]) + bytearray([fill]) * 3072
    if r0 is not None:
        rec[1] = r0
    return bytes(rec)


def test_zero_record(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(_record(3))
    split = read_cifar_records(p)
    assert len(split) == 1 and split.labels[0] == 3
    assert split.images.shape == (1, 3, 32, 32) and not split.images.any()


def test_r_plane_offset_zero(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(_record(0, r0=255))
    img = read_cifar_records(p).images[0]
    assert img[0, 0, 0] == 1.0
    assert img[1:].sum() == 0.0 and img[0].sum() == 1.0


def test_two_record_fixture_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    raw = b"".join(bytes([lab]) + pix[i].tobytes() for i, lab in enumerate([7, 2]))
    p = tmp_path / "b.bin"
    p.write_bytes(raw)
    split = read_cifar_records(p)
    assert split.labels.tolist() == [7, 2]
    np.testing.assert_array_equal(split.images, (pix.astype(np.float32) / 255.0).astype(np.float32))


def test_partial_record_reports_offset(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(_record(1) + b"\x00" * 10)
    with pytest.raises(DatasetError, match=f"offset {CIFAR_RECORD}"):
        read_cifar_records(p)


def test_label_over_nine_rejected(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(_record(1) + _record(10))
    with pytest.raises(DatasetError, match="label byte 10"):
        read_cifar_records(p)


def test_cifar_directory(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(_record(1) + _record(2))
    (tmp_path / "data_batch_2.bin").write_bytes(_record(3))
    (tmp_path / "test_batch.bin").write_bytes(_record(4))
    train, test = load_cifar_binary(tmp_path)
    assert train.labels.tolist() == [1, 2, 3] and test.labels.tolist() == [4]
    with pytest.raises(DatasetError):
        load_cifar_binary(tmp_path / "missing")


# --- batching -------------------------------------------------------------------------------------


def test_unshuffled_storage_order(ref_splits):
    got = np.concatenate([b.labels for b in batches(ref_splits[1], 64, shuffle=False)])
    np.testing.assert_array_equal(got, ref_splits[1].labels)


def test_batches_keep_partial_and_are_seeded(ref_splits):
    test = ref_splits[1]
    sizes = [len(b.labels) for b in batches(test, 64, seed=1)]
    assert sizes == [64, 64, 64, 8]
    a = [b.labels.tobytes() for b in batches(test, 64, seed=1)]
    b = [b.labels.tobytes() for b in batches(test, 64, seed=1)]
    c = [b.labels.tobytes() for b in batches(test, 64, seed=2)]
    assert a == b and a != c


def test_batch_size_must_be_positive(ref_splits):
    with pytest.raises(DatasetError):
        next(batches(ref_splits[1], 0))


@settings(max_examples=25, deadline=None)
@given(bs=st.integers(1, 70), seed=st.integers(0, 1000), shuffle=st.booleans())
def test_batches_cover_labels_as_multiset(bs, seed, shuffle):
    split = per_class_subset(synth_generate(replace(REF, train_per_class=12, test_per_class=1))[0], 12)
    got = np.concatenate([b.labels for b in batches(split, bs, seed, shuffle)])
    assert sorted(got.tolist()) == sorted(split.labels.tolist())
    for b in batches(split, bs, seed, shuffle):
        assert b.images.shape[0] == len(b.labels)
