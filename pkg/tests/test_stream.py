import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expblend.stream import (
    Dataset,
    DatasetFormatError,
    SyntheticSpec,
    class_prototypes,
    gen_synthetic,
    iblurry_split,
    load_dataset,
    store_dataset,
)
from oracles import class_task_tally


def _labels_dataset(per_class, K=10, shape=(1, 1, 1)):
    labels = np.repeat(np.arange(K), per_class)
    images = np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1) * np.ones((1,) + shape, np.float32)
    return Dataset(images, labels, K)


@pytest.fixture(scope="module")
def d100():
    return _labels_dataset(100)


def test_all_disjoint_every_class_in_one_task(d100):
    s = iblurry_split(d100, 5, 100, 37, 16, 0)
    tally = class_task_tally(s, d100.labels, 10)
    assert ((tally > 0).sum(axis=0) == 1).all()
    assert (tally.sum(axis=0) == 100).all()


def test_no_leakage_at_m_zero(d100):
    s = iblurry_split(d100, 5, 0, 0, 16, 1)
    tally = class_task_tally(s, d100.labels, 10)
    assert ((tally > 0).sum(axis=0) == 1).all()
    for c, t in s.metadata["blurry_major_task"].items():
        assert tally[t, int(c)] == 100


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_blurry_50_10_counts(d100, seed):
    s = iblurry_split(d100, 5, 50, 10, 128, seed)
    tally = class_task_tally(s, d100.labels, 10)
    disjoint = {int(c): t for c, t in s.metadata["disjoint_classes"].items()}
    assert len(disjoint) == 5
    assert sorted(disjoint.values()) == [0, 1, 2, 3, 4]
    for c in range(10):
        col = tally[:, c]
        if c in disjoint:
            assert col[disjoint[c]] == 100 and col.sum() == 100
        else:
            major = s.metadata["blurry_major_task"][str(c)]
            assert col[major] == 90
            assert sorted(np.delete(col, major).tolist()) == [2, 2, 3, 3]


def test_too_many_tasks_rejected(d100):
    with pytest.raises(ValueError):
        iblurry_split(d100, 6, 50, 10, 16, 0)


def test_single_task_holds_everything(d100):
    s = iblurry_split(d100, 1, 50, 10, 16, 0)
    assert len(s) == 1 and sorted(s.task_indices[0].tolist()) == list(range(1000))


@pytest.mark.parametrize("args", [(0, 50, 10, 16), (5, 101, 10, 16), (5, 50, -1, 16), (5, 50, 10, 0)])
def test_bad_arguments_rejected(d100, args):
    T, n, m, bs = args
    with pytest.raises(ValueError):
        iblurry_split(d100, T, n, m, bs, 0)


def test_split_is_deterministic(d100):
    a = iblurry_split(d100, 5, 50, 10, 32, 9)
    b = iblurry_split(d100, 5, 50, 10, 32, 9)
    c = iblurry_split(d100, 5, 50, 10, 32, 10)
    assert all(np.array_equal(x, y) for x, y in zip(a.task_indices, b.task_indices))
    assert a.metadata == b.metadata
    assert not all(np.array_equal(x, y) for x, y in zip(a.task_indices, c.task_indices))


def test_batches_follow_task_order(d100):
    s = iblurry_split(d100, 5, 50, 10, 32, 0)
    for t in range(5):
        imgs = np.concatenate([x for x, _ in s.tasks[t]])
        np.testing.assert_array_equal(imgs[:, 0, 0, 0], d100.images[s.task_indices[t], 0, 0, 0])
        sizes = [len(y) for _, y in s.tasks[t]]
        assert all(n == 32 for n in sizes[:-1]) and 0 < sizes[-1] <= 32
    assert s.task_classes(0) == sorted(set(d100.labels[s.task_indices[0]].tolist()))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 12),
    st.integers(1, 6),
    st.integers(0, 100),
    st.integers(0, 100),
    st.integers(1, 40),
    st.integers(0, 2**31 - 1),
)
def test_split_properties(K, T, n, m, per_class, seed):
    d = _labels_dataset(per_class, K)
    num_disjoint = n * K // 100
    if n > 0 and T > 1 and T > num_disjoint:
        with pytest.raises(ValueError):
            iblurry_split(d, T, n, m, 8, seed)
        return
    s = iblurry_split(d, T, n, m, 8, seed)
    everything = np.sort(np.concatenate(s.task_indices))
    np.testing.assert_array_equal(everything, np.arange(len(d)))
    tally = class_task_tally(s, d.labels, K)
    for c, t in s.metadata["disjoint_classes"].items():
        assert tally[t, int(c)] == per_class and tally[:, int(c)].sum() == per_class
    if T > 1:
        for c, t in s.metadata["blurry_major_task"].items():
            col = tally[:, int(c)]
            assert col[t] == (100 - m) * per_class // 100
            rest = np.delete(col, t)
            assert rest.max() - rest.min() <= 1


# --------------------------------------------------------------------------
# synthetic data


def test_noise_free_classes_are_constant():
    d = gen_synthetic(SyntheticSpec(samples_per_class=5, noise_std=0.0), 0)
    for c in range(10):
        imgs = d.images[d.labels == c]
        assert (imgs == imgs[0]).all()


def test_prototypes_pairwise_distinct():
    spec = SyntheticSpec()
    protos = class_prototypes(spec)
    side = int(np.ceil(np.sqrt(spec.num_classes)))
    centres = {(k // side, k % side) for k in range(spec.num_classes)}
    assert len(centres) == spec.num_classes
    flat = protos.reshape(spec.num_classes, -1)
    dists = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    assert dists[~np.eye(spec.num_classes, dtype=bool)].min() > 1.0


def test_synthetic_determinism_and_disjoint_splits():
    spec = SyntheticSpec(samples_per_class=20)
    a, b = gen_synthetic(spec, 4), gen_synthetic(spec, 4)
    assert a.images.tobytes() == b.images.tobytes()
    test = gen_synthetic(spec, 4, "test")
    assert not np.array_equal(a.images, test.images)
    assert gen_synthetic(spec, 4, "test", 3).images.shape == (30, 16, 16, 1)
    with pytest.raises(ValueError):
        gen_synthetic(spec, 4, "val")


def test_linear_classifier_separates_classes():
    # ridge-regression one-vs-all on raw pixels; recorded accuracy 1.000
    spec = SyntheticSpec(samples_per_class=100, noise_std=0.1)
    train, test = gen_synthetic(spec, 0), gen_synthetic(spec, 0, "test", 50)
    X = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    W = np.linalg.solve(X.T @ X + 1e-2 * np.eye(X.shape[1]), X.T @ np.eye(10)[train.labels])
    Xt = np.c_[test.images.reshape(len(test), -1), np.ones(len(test))]
    acc = (np.argmax(Xt @ W, axis=1) == test.labels).mean()
    assert acc > 0.9
    assert acc == 1.0


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=0)
    with pytest.raises(ValueError):
        SyntheticSpec(noise_std=-1)


# --------------------------------------------------------------------------
# SBDS format


def test_dataset_round_trip(tmp_path):
    d = gen_synthetic(SyntheticSpec(samples_per_class=3, channels=2, height=6, width=5), 1)
    store_dataset(d, tmp_path / "d.sbds")
    back = load_dataset(tmp_path / "d.sbds")
    assert back.images.tobytes() == d.images.tobytes()
    np.testing.assert_array_equal(back.labels, d.labels)
    assert back.num_classes == 10 and back.image_shape == (6, 5, 2)


def test_dataset_header_layout(tmp_path):
    store_dataset(Dataset(np.zeros((1, 1, 1, 1), np.float32), [2], 3), tmp_path / "x.sbds")
    buf = (tmp_path / "x.sbds").read_bytes()
    assert buf == b"SBDS" + struct.pack("<IQHHHH", 1, 1, 1, 1, 1, 3) + struct.pack("<f", 0.0) + struct.pack("<H", 2)


def test_dataset_parse_errors(tmp_path):
    path = tmp_path / "x.sbds"
    store_dataset(Dataset(np.ones((2, 2, 2, 1), np.float32), [0, 1], 2), path)
    buf = path.read_bytes()
    cases = [
        (b"SBDX" + buf[4:], "offset 0"),
        (buf[:4] + struct.pack("<I", 3) + buf[8:], "offset 4"),
        (buf[:10], "truncated header"),
        (buf[:-1], "truncated body"),
        (buf + b"\0\0", "trailing"),
        (buf[:-2] + struct.pack("<H", 5), f"offset {len(buf) - 2}"),
    ]
    for bad, pattern in cases:
        path.write_bytes(bad)
        with pytest.raises(DatasetFormatError, match=pattern):
            load_dataset(path)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1)), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1, 1)), [0], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 1, 1)), [2], 2)
