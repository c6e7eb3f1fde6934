import hashlib
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearn_audit._rng import keyed_rng
from unlearn_audit.datasets import (BackdoorSpec, Dataset, UnknownSampleError,
                                    dirichlet_partition, gen_blobs, inject_backdoor,
                                    largest_remainder, load_csv, load_idx, split_dirichlet,
                                    split_random)


def tiny():
    x = np.arange(12, dtype=float).reshape(4, 3)
    return Dataset(x, [0, 1, 0, 1], [10, 3, 7, 1], 2)


class TestDataset:
    def test_rows_sorted_by_id(self):
        ds = tiny()
        assert ds.ids.tolist() == [1, 3, 7, 10]
        assert ds.labels.tolist() == [1, 1, 0, 0]
        assert ds.features[0].tolist() == [9, 10, 11]

    def test_arrays_are_read_only(self):
        ds = tiny()
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0

    @pytest.mark.parametrize("kwargs, msg", [
        (dict(labels=[0, 2, 0, 1]), "labels must lie"),
        (dict(ids=[1, 1, 2, 3]), "unique"),
        (dict(ids=[-1, 1, 2, 3]), "non-negative"),
        (dict(num_classes=1), "num_classes"),
    ])
    def test_invalid(self, kwargs, msg):
        args = dict(features=np.zeros((4, 2)), labels=[0, 1, 0, 1], ids=[0, 1, 2, 3],
                    num_classes=2)
        args.update(kwargs)
        with pytest.raises(ValueError, match=msg):
            Dataset(**args)

    def test_nonfinite_features_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            Dataset([[np.nan]], [0], [0], 2)

    def test_take_orders_by_id_and_keeps_duplicates(self):
        ds = tiny()
        x, y = ds.take([10, 1, 10])
        assert x[:, 0].tolist() == [9, 0, 0]
        assert y.tolist() == [1, 0, 0]

    def test_unknown_id(self):
        with pytest.raises(UnknownSampleError):
            tiny().rows([5])
        assert tiny().contains([1, 5, 99]).tolist() == [True, False, False]

    def test_permutation_invariant_fingerprint(self):
        ds = tiny()
        perm = np.array([2, 0, 3, 1])
        other = Dataset(ds.features[perm], ds.labels[perm], ds.ids[perm], 2)
        assert other.fingerprint == ds.fingerprint

    def test_label_flip_changes_fingerprint(self):
        ds = tiny()
        y = ds.labels.copy()
        y[0] = 1 - y[0]
        assert Dataset(ds.features, y, ds.ids, 2).fingerprint != ds.fingerprint

    def test_fingerprint_matches_manual_serialization(self):
        ds = tiny()
        blob = struct.pack("<QQQ", 4, 3, 2)
        for i, y, row in zip(ds.ids, ds.labels, ds.features):
            blob += struct.pack("<QQ", int(i), int(y)) + struct.pack("<3d", *row)
        assert ds.fingerprint == hashlib.sha256(blob).digest()

    def test_content_hash_ignores_id(self):
        a = Dataset([[1.0, 2.0]], [1], [0], 2)
        b = Dataset([[1.0, 2.0]], [1], [99], 2)
        assert a.sample_hashes == b.sample_hashes


class TestCsv:
    def test_header_and_named_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,label,b\n1,0,2\n3,1,4\n")
        ds = load_csv(p, "label")
        assert ds.features.tolist() == [[1, 2], [3, 4]]
        assert ds.labels.tolist() == [0, 1]

    def test_no_header_default_last_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.5,1\n1.5,0\n")
        assert load_csv(p).labels.tolist() == [1, 0]

    def test_bad_cell_names_row_and_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\n1,0\nfoo,1\n")
        with pytest.raises(ValueError, match="row 3, column 0"):
            load_csv(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("")
        with pytest.raises(ValueError, match="empty"):
            load_csv(p)

    def test_absent_class_warns(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,0\n2,2\n")
        with pytest.warns(UserWarning, match=r"classes \[1\]"):
            ds = load_csv(p)
        assert ds.num_classes == 3


def write_idx(path, magic, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
                     + arr.tobytes())


class TestIdx:
    def test_round_trip(self, tmp_path):
        imgs = np.arange(2 * 2 * 3).reshape(2, 2, 3) * 10
        write_idx(tmp_path / "i", 0x803, imgs)
        write_idx(tmp_path / "l", 0x801, [3, 1])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds = load_idx(tmp_path / "i", tmp_path / "l")
        assert ds.dim == 6
        np.testing.assert_array_equal(ds.features[1], imgs[1].reshape(-1) / 255.0)
        assert ds.labels.tolist() == [3, 1]

    def test_bad_magic(self, tmp_path):
        write_idx(tmp_path / "i", 0x801, np.zeros((1, 2, 2)))
        write_idx(tmp_path / "l", 0x801, [0])
        with pytest.raises(ValueError, match="magic"):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_truncated(self, tmp_path):
        write_idx(tmp_path / "i", 0x803, np.zeros((2, 2, 2)))
        (tmp_path / "i").write_bytes((tmp_path / "i").read_bytes()[:-1])
        write_idx(tmp_path / "l", 0x801, [0, 1])
        with pytest.raises(ValueError, match="truncated"):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "i", 0x803, np.zeros((2, 2, 2)))
        write_idx(tmp_path / "l", 0x801, [0, 1, 1])
        with pytest.raises(ValueError, match="count mismatch"):
            load_idx(tmp_path / "i", tmp_path / "l")


class TestGenerators:
    def test_blobs_shape_and_determinism(self):
        a = gen_blobs(3, 5, 4, 0.1, seed=1)
        b = gen_blobs(3, 5, 4, 0.1, seed=1)
        assert (a.n, a.dim, a.num_classes) == (12, 5, 3)
        assert a.fingerprint == b.fingerprint
        assert a.fingerprint != gen_blobs(3, 5, 4, 0.1, seed=2).fingerprint

    def test_blob_class_means_near_centers(self):
        ds = gen_blobs(3, 4, 2000, 0.5, seed=0)
        for c in range(3):
            mean = ds.features[ds.labels == c].mean(axis=0)
            expect = np.zeros(4)
            expect[c] = 2.0
            np.testing.assert_allclose(mean, expect, atol=0.05)

    def test_split_random_count(self):
        ds = gen_blobs(2, 2, 50, 0.5, 0)
        u = split_random(ds, 0.1, 3)
        assert u.size == 10 and np.unique(u).size == 10
        assert np.array_equal(u, split_random(ds, 0.1, 3))

    def test_split_random_rejects_degenerate(self):
        ds = gen_blobs(2, 2, 2, 0.5, 0)
        with pytest.raises(ValueError):
            split_random(ds, 0.01, 0)


class TestDirichlet:
    @given(st.lists(st.floats(0.01, 10), min_size=1, max_size=8), st.integers(0, 500))
    def test_largest_remainder_total(self, w, total):
        counts = largest_remainder(w, total)
        assert counts.sum() == total and (counts >= 0).all()
        quota = np.asarray(w) / np.sum(w) * total
        assert np.all(np.abs(counts - quota) < 1 + 1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.05, 5), st.integers(2, 6), st.integers(0, 2**32))
    def test_pieces_partition_each_class(self, alpha, pieces, seed):
        ds = gen_blobs(3, 3, 20, 0.5, 0)
        parts, _ = dirichlet_partition(ds, alpha, pieces, seed)
        allids = np.concatenate(parts)
        assert np.array_equal(np.sort(allids), ds.ids)

    def test_large_alpha_is_near_uniform(self):
        ds = gen_blobs(4, 4, 1000, 0.5, 0)
        parts, props = dirichlet_partition(ds, 1e6, 4, 0)
        assert np.all(np.abs(props - 0.25) < 0.02)
        assert all(abs(p.size - 1000) <= 4 for p in parts)

    def test_split_dirichlet_piece(self):
        ds = gen_blobs(3, 3, 30, 0.5, 0)
        piece = split_dirichlet(ds, 0.5, 3, 1, 4)
        parts, _ = dirichlet_partition(ds, 0.5, 3, 4)
        assert np.array_equal(piece, parts[1])
        with pytest.raises(ValueError):
            split_dirichlet(ds, 0.5, 3, 3, 4)


class TestBackdoor:
    def spec(self, **kw):
        args = dict(trigger_indices=[0, 1], target_label=2, alternate_trigger_indices=[3],
                    alternate_label=0)
        args.update(kw)
        return BackdoorSpec(**args)

    def test_poison_count_and_content(self):
        ds = gen_blobs(4, 20, 1000, 0.5, 0)
        u = split_random(ds, 0.1, 0)
        spec = self.spec(trigger_indices=[16, 17, 18, 19])
        pds, chosen = inject_backdoor(ds, spec, u, 0)
        assert chosen.size == 40 and np.isin(chosen, u).all()
        rows = pds.rows(chosen)
        assert (pds.labels[rows] == 2).all()
        assert (pds.features[np.ix_(rows, [16, 17, 18, 19])] == 1.0).all()
        other = np.setdiff1d(np.arange(ds.n), rows)
        np.testing.assert_array_equal(pds.features[other], ds.features[other])
        np.testing.assert_array_equal(pds.labels[other], ds.labels[other])
        changed = pds.features[rows] != ds.features[rows]
        assert not changed[:, :16].any()
        assert pds.fingerprint != ds.fingerprint

    def test_empty_trigger_only_relabels(self):
        ds = gen_blobs(3, 4, 10, 0.5, 0)
        pds, chosen = inject_backdoor(ds, self.spec(trigger_indices=[]), ds.ids[:10], 0)
        np.testing.assert_array_equal(pds.features, ds.features)
        assert (pds.labels[pds.rows(chosen)] == 2).all()

    def test_rounding_minimum_one(self):
        ds = gen_blobs(3, 4, 10, 0.5, 0)
        _, chosen = inject_backdoor(ds, self.spec(poison_fraction=0.01), ds.ids[:3], 0)
        assert chosen.size == 1

    def test_out_of_range_trigger(self):
        ds = gen_blobs(3, 4, 10, 0.5, 0)
        with pytest.raises(ValueError, match="out of range"):
            inject_backdoor(ds, self.spec(trigger_indices=[9]), ds.ids[:3], 0)

    @pytest.mark.parametrize("kw", [dict(alternate_trigger_indices=[1]),
                                    dict(alternate_label=2), dict(poison_fraction=0.0)])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            self.spec(**kw)


def test_keyed_rng_tags_are_independent():
    a = keyed_rng(1, "x", 2).integers(0, 2**62, 4)
    assert np.array_equal(a, keyed_rng(1, "x", 2).integers(0, 2**62, 4))
    assert not np.array_equal(a, keyed_rng(1, "x", 3).integers(0, 2**62, 4))
    assert not np.array_equal(a, keyed_rng(1, "y", 2).integers(0, 2**62, 4))
