import gzip
import math
import os
import struct

import numpy as np
import pytest

from fedaug import data
from fedaug.errors import DataError


def small_ds(seed=0, n=60, dim=9, classes=3):
    rng = np.random.default_rng(seed)
    return data.LabeledDataset(rng.uniform(size=(n, dim)), rng.integers(0, classes, n), classes)


# ---------------------------------------------------------------------------
# IDX files

def write_raw_idx(path_img, path_lab, images, labels, rows, cols, img_magic=0x803, lab_magic=0x801, lab_count=None):
    n = len(images)
    with open(path_img, "wb") as f:
        f.write(struct.pack(">IIII", img_magic, n, rows, cols))
        f.write(np.asarray(images, dtype=np.uint8).tobytes())
    with open(path_lab, "wb") as f:
        f.write(struct.pack(">II", lab_magic, lab_count if lab_count is not None else n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def test_idx_roundtrip_plain_and_gzip(tmp_path):
    ds = small_ds(dim=9)
    for suffix in ("", ".gz"):
        img = str(tmp_path / f"img{suffix}")
        lab = str(tmp_path / f"lab{suffix}")
        data.write_idx(ds, img, lab, side=3)
        back = data.load_idx(img, lab)
        assert len(back) == len(ds)
        assert back.input_dim == 9
        assert np.array_equal(back.labels, ds.labels)
        assert np.abs(back.features - ds.features).max() <= 0.5 / 255 + 1e-12


def test_idx_zero_sample_file(tmp_path):
    img, lab = str(tmp_path / "i"), str(tmp_path / "l")
    write_raw_idx(img, lab, np.zeros((0, 4)), np.zeros(0), 2, 2)
    ds = data.load_idx(img, lab)
    assert len(ds) == 0 and ds.num_classes == 0


def test_idx_count_mismatch(tmp_path):
    img, lab = str(tmp_path / "i"), str(tmp_path / "l")
    write_raw_idx(img, lab, np.zeros((10, 4)), np.zeros(10), 2, 2, lab_count=9)
    with pytest.raises(DataError, match="label count 9 does not match image count 10"):
        data.load_idx(img, lab)


def test_idx_bad_magic(tmp_path):
    img, lab = str(tmp_path / "i"), str(tmp_path / "l")
    write_raw_idx(img, lab, np.zeros((2, 4)), np.zeros(2), 2, 2, img_magic=0x9999)
    with pytest.raises(DataError, match="bad magic"):
        data.load_idx(img, lab)


def test_idx_truncated_reports_offset(tmp_path):
    img, lab = str(tmp_path / "i"), str(tmp_path / "l")
    write_raw_idx(img, lab, np.zeros((4, 4)), np.zeros(4), 2, 2)
    blob = open(img, "rb").read()[:-3]
    open(img, "wb").write(blob)
    with pytest.raises(DataError, match=r"truncated data at offset 29"):
        data.load_idx(img, lab)


def test_idx_gzip_detected_by_magic_not_suffix(tmp_path):
    ds = small_ds(n=8, dim=4)
    img, lab = str(tmp_path / "img.bin"), str(tmp_path / "lab.bin")
    data.write_idx(ds, img, lab, side=2)
    gz_img, gz_lab = str(tmp_path / "i2"), str(tmp_path / "l2")
    open(gz_img, "wb").write(gzip.compress(open(img, "rb").read()))
    open(gz_lab, "wb").write(gzip.compress(open(lab, "rb").read()))
    back = data.load_idx(gz_img, gz_lab)
    assert len(back) == 8


@pytest.mark.skipif(not os.environ.get("MNIST_DIR"), reason="real MNIST not present")
def test_idx_real_mnist_shape():
    root = os.environ["MNIST_DIR"]
    img = os.path.join(root, "train-images-idx3-ubyte.gz")
    lab = os.path.join(root, "train-labels-idx1-ubyte.gz")
    ds = data.load_idx(img, lab)
    assert len(ds) == 60000 and ds.input_dim == 784 and ds.num_classes == 10


# ---------------------------------------------------------------------------
# synthetic blobs

def test_blobs_balanced_labels():
    ds = data.synthetic_blobs(10, 2, 5, 1.0, seed=1)
    assert len(ds) == 20
    assert np.bincount(ds.labels).tolist() == [10, 10]
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0


def test_blobs_deterministic():
    a = data.synthetic_blobs(7, 3, 4, 0.5, seed=9)
    b = data.synthetic_blobs(7, 3, 4, 0.5, seed=9)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    c = data.synthetic_blobs(7, 3, 4, 0.5, seed=10)
    assert not np.array_equal(a.features, c.features)


def test_blobs_zero_spread_collapses_to_class_means():
    ds = data.synthetic_blobs(6, 3, 4, 0.0, seed=2)
    for cls in range(3):
        rows = ds.features[ds.labels == cls]
        assert np.abs(rows - rows[0]).max() < 1e-12


def test_blobs_validation():
    with pytest.raises(ValueError, match="positive"):
        data.synthetic_blobs(0, 3, 4, 1.0, seed=0)


# ---------------------------------------------------------------------------
# rotation

def square_ds(images, labels=None, classes=2):
    n, side, _ = images.shape
    labels = np.zeros(n, dtype=int) if labels is None else labels
    return data.LabeledDataset(images.reshape(n, side * side), labels, classes)


def test_rotate_zero_is_identity():
    ds = small_ds(n=5, dim=16)
    out = data.rotate_images(ds, 0.0)
    assert np.abs(out.features - ds.features).max() < 1e-12
    assert np.array_equal(out.labels, ds.labels)


def test_rotate_full_turn_is_identity():
    ds = small_ds(n=5, dim=25)
    out = data.rotate_images(ds, 360.0)
    assert np.abs(out.features - ds.features).max() < 1e-6


def test_rotate_single_pixel_oracle_90_degrees():
    # Independent coordinate-map oracle: a positive angle turns content
    # counter-clockwise, so the pixel at (r, c) lands where the rotation
    # matrix R(angle) sends it (x right, y up, origin at image center).
    side = 9
    center = (side - 1) / 2
    img = np.zeros((1, side, side))
    r0, c0 = 2, 6
    img[0, r0, c0] = 1.0
    out = data.rotate_images(square_ds(img), 90.0).features.reshape(side, side)
    x, y = c0 - center, center - r0
    xr, yr = -y, x  # R(90) @ (x, y)
    expect_r, expect_c = int(round(center - yr)), int(round(center + xr))
    assert out[expect_r, expect_c] > 0.95
    assert abs(out.sum() - 1.0) < 0.05


def test_rotate_mass_roughly_conserved_interior():
    side = 15
    rng = np.random.default_rng(3)
    img = np.zeros((1, side, side))
    img[0, 4:11, 4:11] = rng.uniform(0.2, 1.0, size=(7, 7))
    out = data.rotate_images(square_ds(img), 33.0).features
    assert abs(out.sum() - img.sum()) / img.sum() < 0.05


def test_rotate_stays_in_unit_range():
    ds = small_ds(n=6, dim=49)
    out = data.rotate_images(ds, 45.0)
    assert out.features.min() >= 0.0 and out.features.max() <= 1.0


def test_rotate_non_square_raises():
    ds = small_ds(n=3, dim=10)
    with pytest.raises(ValueError, match="square"):
        data.rotate_images(ds, 15.0)


# ---------------------------------------------------------------------------
# partitioning

def test_partition_single_client_gets_everything():
    ds = small_ds(n=40)
    parts = data.lda_partition(ds, data.PartitionSpec(1, 0.5, seed=4))
    assert len(parts) == 1 and len(parts[0]) == 40
    assert sorted(map(tuple, parts[0].features)) == sorted(map(tuple, ds.features))


def multiset(ds):
    return sorted(zip(map(tuple, ds.features), ds.labels.tolist()))


def test_partition_conserves_samples_exactly():
    ds = small_ds(n=120, classes=4)
    for alpha in (0.01, 0.5, 100.0):
        parts = data.lda_partition(ds, data.PartitionSpec(5, alpha, seed=5))
        assert sum(len(p) for p in parts) == len(ds)
        merged = sorted(sum((multiset(p) for p in parts), []))
        assert merged == multiset(ds)


def test_partition_no_empty_clients_even_at_tiny_alpha():
    ds = small_ds(n=80, classes=4)
    for seed in range(8):
        parts = data.lda_partition(ds, data.PartitionSpec(8, 0.01, seed=seed))
        assert all(len(p) >= 1 for p in parts)


def test_partition_deterministic():
    ds = small_ds(n=100, classes=5)
    a = data.lda_partition(ds, data.PartitionSpec(4, 0.2, seed=6))
    b = data.lda_partition(ds, data.PartitionSpec(4, 0.2, seed=6))
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.features, pb.features)


def test_partition_high_alpha_is_roughly_uniform():
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(2), 200)
    ds = data.LabeledDataset(rng.uniform(size=(400, 3)), labels, 2)
    for seed in range(10):
        parts = data.lda_partition(ds, data.PartitionSpec(2, 1e9, seed=seed))
        for p in parts:
            for cls in range(2):
                share = (p.labels == cls).sum() / 200
                assert abs(share - 0.5) < 0.05


def test_partition_low_alpha_is_skewed():
    rng = np.random.default_rng(9)
    labels = np.repeat(np.arange(10), 100)
    ds = data.LabeledDataset(rng.uniform(size=(1000, 3)), labels, 10)
    entropies = []
    for seed in range(5):
        parts = data.lda_partition(ds, data.PartitionSpec(10, 0.01, seed=seed))
        for p in parts:
            freq = np.bincount(p.labels, minlength=10) / len(p)
            nz = freq[freq > 0]
            entropies.append(float(-(nz * np.log(nz)).sum()))
    assert np.mean(entropies) < 0.3 * math.log(10)


def test_partition_more_clients_than_samples():
    ds = small_ds(n=5)
    with pytest.raises(DataError, match="cannot split"):
        data.lda_partition(ds, data.PartitionSpec(6, 1.0, seed=0))


def test_largest_remainder_rounding_conserves_total():
    rng = np.random.default_rng(10)
    for _ in range(50):
        p = rng.dirichlet(np.full(7, 0.3))
        assert abs(p.sum() - 1.0) < 1e-9
        counts = data._largest_remainder_counts(p, 123)
        assert counts.sum() == 123 and (counts >= 0).all()


def test_split_train_test_disjoint_and_exhaustive():
    ds = small_ds(n=30)
    train, test = data.split_train_test(ds, 0.2, np.random.default_rng(11))
    assert len(train) == 24 and len(test) == 6
    assert sorted(multiset(train) + multiset(test)) == multiset(ds)
    with pytest.raises(DataError, match="at least 2"):
        data.split_train_test(ds.take(np.array([0])), 0.2, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# pseudo-data

def test_pseudo_identical_sources_returns_the_source():
    feats = np.tile(np.array([[0.3, 0.7, 0.1]]), (6, 1))
    ds = data.LabeledDataset(feats, np.zeros(6, dtype=int), 1)
    pool = data.build_pseudo_data([ds], k_per_client=4, m_per_sample=3, seed=12)
    assert np.abs(pool.features - feats[0]).max() < 1e-12


def test_pseudo_mean_of_two():
    ds = data.LabeledDataset(np.array([[0.0, 2.0], [2.0, 4.0]]) / 4, np.zeros(2, dtype=int), 1)
    pool = data.build_pseudo_data([ds], k_per_client=3, m_per_sample=2, seed=13)
    assert np.abs(pool.features - np.array([1.0, 3.0]) / 4).max() < 1e-12


def test_pseudo_pool_size_is_clients_times_k():
    locals_ = [small_ds(seed=s, n=60) for s in range(10)]
    pool = data.build_pseudo_data(locals_, k_per_client=50, m_per_sample=10, seed=14)
    assert len(pool) == 500
    assert pool.k_per_client == 50 and pool.m_per_sample == 10


def test_pseudo_values_inside_source_hull():
    locals_ = [small_ds(seed=s, n=40) for s in range(3)]
    lo = min(ds.features.min() for ds in locals_)
    hi = max(ds.features.max() for ds in locals_)
    pool = data.build_pseudo_data(locals_, k_per_client=20, m_per_sample=5, seed=15)
    assert pool.features.min() >= lo - 1e-12 and pool.features.max() <= hi + 1e-12


def test_pseudo_too_few_samples_names_client():
    locals_ = [small_ds(n=20), small_ds(n=3)]
    with pytest.raises(ValueError, match="client 1 has 3 samples"):
        data.build_pseudo_data(locals_, k_per_client=5, m_per_sample=10, seed=16)


def test_pseudo_m_must_average_at_least_two():
    with pytest.raises(ValueError, match="at least 2"):
        data.build_pseudo_data([small_ds()], k_per_client=5, m_per_sample=1, seed=17)


def test_pseudo_deterministic():
    locals_ = [small_ds(seed=3, n=30)]
    a = data.build_pseudo_data(locals_, 10, 5, seed=18)
    b = data.build_pseudo_data(locals_, 10, 5, seed=18)
    assert np.array_equal(a.features, b.features)


def test_sample_pseudo_batch_full_size_is_permutation():
    pool = data.build_pseudo_data([small_ds(n=30)], 12, 3, seed=19)
    batch = data.sample_pseudo_batch(pool, 12, np.random.default_rng(20))
    assert sorted(map(tuple, batch)) == sorted(map(tuple, pool.features))


def test_sample_pseudo_batch_empty_and_too_large():
    pool = data.build_pseudo_data([small_ds(n=30)], 5, 3, seed=21)
    assert data.sample_pseudo_batch(pool, 0, np.random.default_rng(0)).shape == (0, 9)
    with pytest.raises(ValueError, match="exceeds"):
        data.sample_pseudo_batch(pool, 6, np.random.default_rng(0))


def test_sample_pseudo_batch_deterministic_with_cloned_rng():
    pool = data.build_pseudo_data([small_ds(n=30)], 8, 3, seed=22)
    a = data.sample_pseudo_batch(pool, 4, np.random.default_rng(23))
    b = data.sample_pseudo_batch(pool, 4, np.random.default_rng(23))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# batch iteration

def test_batch_iterator_covers_each_epoch():
    rng = np.random.default_rng(24)
    it = data.BatchIterator(10, 4, rng)
    batches = [it.next_indices() for _ in range(3)]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert [b.size for b in batches] == [4, 4, 2]


def test_batch_iterator_sizes_and_reshuffle():
    rng = np.random.default_rng(25)
    it = data.BatchIterator(7, 3, rng)
    sizes = [it.next_indices().size for _ in range(6)]
    assert sizes == [3, 3, 1, 3, 3, 1]
    epoch1 = np.concatenate([data.BatchIterator(50, 50, np.random.default_rng(1)).next_indices()])
    epoch2 = np.concatenate([data.BatchIterator(50, 50, np.random.default_rng(2)).next_indices()])
    assert not np.array_equal(epoch1, epoch2)


def test_batch_iterator_batch_larger_than_n():
    it = data.BatchIterator(5, 100, np.random.default_rng(26))
    assert it.next_indices().size == 5


def test_labeled_dataset_validation():
    with pytest.raises(ValueError, match="finite"):
        data.LabeledDataset(np.array([[np.nan]]), np.array([0]), 1)
    with pytest.raises(ValueError, match="labels"):
        data.LabeledDataset(np.zeros((2, 2)), np.array([0]), 1)
    with pytest.raises(ValueError, match=r"\[0, 2\)"):
        data.LabeledDataset(np.zeros((2, 2)), np.array([0, 5]), 2)
