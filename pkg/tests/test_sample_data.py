import numpy as np
import pytest
from PIL import Image

from sijscc.sample_data import TRAIN_SOURCES, source_images, write_patches, write_split


def test_patches_are_deterministic(tmp_path):
    a = write_patches(tmp_path / "a", 5, 32, seed=4)
    b = write_patches(tmp_path / "b", 5, 32, seed=4)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert np.asarray(Image.open(a[0])).shape == (32, 32, 3)


def test_split_keeps_heldout_crops_out_of_the_training_strips(tmp_path):
    train, held = write_split(tmp_path / "train", tmp_path / "held", 8, 48, seed=1)
    assert len(train) == len(TRAIN_SOURCES) and len(held) == 8
    for i, (path, img) in enumerate(zip(train, source_images())):
        strip = np.asarray(Image.open(path))
        cut = int(img.shape[1] * 0.75)
        assert strip.shape == (img.shape[0], cut, 3)
        assert np.array_equal(strip, img[:, :cut])
        crop = np.asarray(Image.open(held[i]))
        right = img[:, cut:]
        # the crop matches some window of the right strip and none reaching into the left part
        found = [
            (t, l)
            for t in range(right.shape[0] - 47)
            for l in range(right.shape[1] - 47)
            if right[t, l, 0] == crop[0, 0, 0] and np.array_equal(right[t : t + 48, l : l + 48], crop)
        ]
        assert found


def test_split_rejects_bad_fraction(tmp_path):
    with pytest.raises(ValueError):
        write_split(tmp_path / "a", tmp_path / "b", 1, 16, train_fraction=1.0)
