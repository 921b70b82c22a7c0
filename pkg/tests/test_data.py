import numpy as np
import pytest
import torch

from sparse_ssl.data import (MEDMNIST_SPLITS, ArchiveCorruptionError, ArchiveFormatError,
                             InsufficientDataError, archive_from_arrays, augment, augment_batch,
                             build_fewshot_split, hflip, load_archive, make_toy_archive,
                             save_archive, to_model_range)


def fake_arrays(sizes, k, hw=4, channels=None, seed=0):
    rng = np.random.default_rng(seed)
    arrays = {}
    for split, n in zip(("train", "val", "test"), sizes):
        shape = (n, hw, hw) if channels is None else (n, hw, hw, channels)
        arrays[f"{split}_images"] = rng.integers(0, 256, size=shape, dtype=np.uint8)
        arrays[f"{split}_labels"] = (np.arange(n) % k)[:, None]
    return arrays


class TestArchive:
    @pytest.mark.parametrize("name", sorted(MEDMNIST_SPLITS))
    def test_published_sizes_accepted(self, name):
        train, val, test, k = MEDMNIST_SPLITS[name]
        # tiny 1x1 images keep the larger sets cheap
        archive = archive_from_arrays(fake_arrays((train, val, test), k, hw=1), name=name, num_classes=k)
        assert archive.split_sizes() == {"train": train, "val": val, "test": test}
        assert archive.num_classes == k

    def test_table_values(self):
        assert MEDMNIST_SPLITS["bloodmnist"] == (11959, 1712, 3421, 8)
        assert MEDMNIST_SPLITS["breastmnist"] == (546, 78, 156, 2)
        assert MEDMNIST_SPLITS["tissuemnist"] == (165466, 23640, 47280, 8)

    def test_mismatched_known_sizes(self):
        with pytest.raises(ArchiveFormatError, match="do not match"):
            archive_from_arrays(fake_arrays((10, 2, 2), 2), name="breastmnist")

    def test_missing_array(self):
        arrays = fake_arrays((10, 4, 4), 2)
        del arrays["val_labels"]
        with pytest.raises(ArchiveFormatError, match="val_labels"):
            archive_from_arrays(arrays)

    def test_label_out_of_range(self):
        arrays = fake_arrays((10, 4, 4), 3)
        with pytest.raises(ArchiveCorruptionError):
            archive_from_arrays(arrays, num_classes=2)

    def test_inconsistent_shapes(self):
        arrays = fake_arrays((10, 4, 4), 2)
        arrays["test_images"] = np.zeros((4, 5, 5), np.uint8)
        with pytest.raises(ArchiveFormatError, match="inconsistent"):
            archive_from_arrays(arrays)

    def test_multilabel_rejected(self):
        arrays = fake_arrays((10, 4, 4), 2)
        arrays["train_labels"] = np.zeros((10, 3), np.int64)
        with pytest.raises(ArchiveFormatError):
            archive_from_arrays(arrays)

    def test_grayscale_gets_channel_axis(self):
        archive = archive_from_arrays(fake_arrays((6, 2, 2), 2))
        assert archive.image_shape == (4, 4, 1)

    def test_rgb_kept(self):
        archive = archive_from_arrays(fake_arrays((6, 2, 2), 2, channels=3))
        assert archive.image_shape == (4, 4, 3)

    def test_round_trip(self, tmp_path):
        archive = make_toy_archive(n_train=20, n_val=6, n_test=6, resolution=8)
        path = tmp_path / "toy_8.npz"
        save_archive(archive, path)
        loaded = load_archive(path)
        assert loaded.name == "toy"
        for split in ("train", "val", "test"):
            assert np.array_equal(loaded.images[split], archive.images[split])
            assert np.array_equal(loaded.labels[split], archive.labels[split])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_archive(tmp_path / "nope.npz")

    def test_arrays_read_only(self):
        archive = make_toy_archive(n_train=10, n_val=4, n_test=4, resolution=8)
        with pytest.raises(ValueError):
            archive.images["train"][0, 0, 0, 0] = 1


class TestFewShotSplit:
    @pytest.mark.parametrize("name, shots, labeled, unlabeled", [
        ("bloodmnist", 5, 40, 11919),
        ("breastmnist", 50, 100, 446),
    ])
    def test_split_arithmetic(self, name, shots, labeled, unlabeled):
        train, val, test, k = MEDMNIST_SPLITS[name]
        archive = archive_from_arrays(fake_arrays((train, val, test), k, hw=1), name=name, num_classes=k)
        split = build_fewshot_split(archive, shots, seed=0)
        assert len(split.labeled_ids) == labeled
        assert split.num_unlabeled == unlabeled
        assert np.all(np.bincount(split.labeled_labels, minlength=k) == shots)

    def test_disjoint_and_covering(self):
        archive = make_toy_archive(n_train=60, n_val=4, n_test=4, resolution=8)
        split = build_fewshot_split(archive, 5, seed=3)
        assert not set(split.labeled_ids) & set(split.unlabeled_ids)
        assert len(split.labeled_ids) + split.num_unlabeled == 60

    def test_deterministic(self):
        archive = make_toy_archive(n_train=60, n_val=4, n_test=4, resolution=8)
        a = build_fewshot_split(archive, 5, seed=7)
        b = build_fewshot_split(archive, 5, seed=7)
        c = build_fewshot_split(archive, 5, seed=8)
        assert np.array_equal(a.labeled_ids, b.labeled_ids)
        assert not np.array_equal(a.labeled_ids, c.labeled_ids)

    def test_insufficient_class(self):
        archive = make_toy_archive(n_train=8, n_val=4, n_test=4, resolution=8)
        with pytest.raises(InsufficientDataError):
            build_fewshot_split(archive, 5, seed=0)

    def test_pool_hides_labels(self):
        archive = make_toy_archive(n_train=20, n_val=4, n_test=4, resolution=8)
        pool = build_fewshot_split(archive, 2, seed=0).unlabeled_pool()
        assert set(vars(pool)) == {"ids", "images"}

    def test_diagnostic_truth(self):
        archive = make_toy_archive(n_train=20, n_val=4, n_test=4, resolution=8)
        split = build_fewshot_split(archive, 2, seed=0)
        ids = split.unlabeled_ids[[3, 0, 5]]
        assert np.array_equal(split.diagnostic_truth(ids), archive.labels["train"][ids])

    def test_manifest(self, tmp_path):
        archive = make_toy_archive(n_train=20, n_val=4, n_test=4, resolution=8)
        split = build_fewshot_split(archive, 2, seed=0)
        split.write_manifest(tmp_path / "m.tsv")
        lines = (tmp_path / "m.tsv").read_text().splitlines()
        assert len(lines) == 20
        assert sum(l.startswith("labeled\t") for l in lines) == 4


class TestPreprocessing:
    def test_range_and_layout(self):
        img = np.array([[[[0], [255]], [[128], [64]]]], np.uint8)
        x = to_model_range(img)
        assert x.shape == (1, 1, 2, 2)
        assert x.min().item() == -1.0 and x.max().item() == 1.0

    def test_resize(self):
        img = np.zeros((2, 28, 28, 3), np.uint8)
        assert to_model_range(img, 32).shape == (2, 3, 32, 32)

    def test_flip_involution(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(3, 5, 7))
        assert np.array_equal(hflip(hflip(img)), img)
        t = torch.from_numpy(img)
        assert torch.equal(hflip(hflip(t)), t)

    def test_forced_flip(self):
        img = np.arange(6.0).reshape(1, 2, 3)
        assert np.array_equal(augment(img, None, force_flip=True), img[..., ::-1])
        assert augment(img, None, force_flip=False) is img

    def test_flip_frequency(self):
        rng = np.random.default_rng(1)
        img = torch.arange(4.0).view(1, 1, 1, 4).expand(20_000, 1, 1, 4)
        out = augment_batch(img, rng)
        frac = (out[:, 0, 0, 0] == 3).float().mean().item()
        assert abs(frac - 0.5) < 0.02


class TestToy:
    def test_balanced_and_deterministic(self):
        a = make_toy_archive(seed=5)
        b = make_toy_archive(seed=5)
        assert np.array_equal(a.images["train"], b.images["train"])
        assert a.split_sizes() == {"train": 510, "val": 200, "test": 400}
        assert np.all(np.bincount(a.labels["test"]) == 200)
        assert a.image_shape == (32, 32, 1)

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            make_toy_archive(n_train=4, n_val=2, n_test=2, shapes=("disc", "hexagon"))
