import numpy as np
import pytest

from clusterscan.imageio import write_image
from clusterscan.network import build, smoke_config
from clusterscan.training import (
    PairingError,
    block_averages,
    find_pairs,
    load_pairs,
    random_crop_flip,
    train_pairs,
)


def make_pairs(root, stems=("a", "b"), size=(16, 16), ext=".png"):
    rng = np.random.default_rng(0)
    for s in stems:
        clean = rng.uniform(0, 1, (*size, 3))
        write_image(root / f"{s}_gt{ext}", clean)
        write_image(root / f"{s}_in{ext}", clean * 0.5)
    return root


def test_find_pairs_sorted(tmp_path):
    make_pairs(tmp_path, ("b", "a"))
    (tmp_path / "notes.txt").write_text("ignored")
    assert [p[0] for p in find_pairs(tmp_path)] == ["a", "b"]


def test_empty_directory(tmp_path):
    with pytest.raises(PairingError, match="no image pairs"):
        find_pairs(tmp_path)


def test_unpaired_files_are_listed(tmp_path):
    make_pairs(tmp_path, ("a",))
    write_image(tmp_path / "lonely_in.png", np.zeros((4, 4, 3)))
    write_image(tmp_path / "stray.ppm", np.zeros((4, 4, 3)))
    with pytest.raises(PairingError) as err:
        find_pairs(tmp_path)
    assert "lonely_in.png" in str(err.value) and "stray.ppm" in str(err.value)


def test_mismatched_pair_sizes(tmp_path):
    write_image(tmp_path / "x_in.png", np.zeros((4, 4, 3)))
    write_image(tmp_path / "x_gt.png", np.zeros((4, 6, 3)))
    with pytest.raises(PairingError, match="differ"):
        load_pairs(tmp_path)


def test_crop_flip_is_shared_and_seeded():
    rng_data = np.random.default_rng(1)
    x = rng_data.uniform(0, 1, (3, 10, 12))
    y = x * 2
    a = random_crop_flip(np.random.default_rng(5), x, y, 8)
    b = random_crop_flip(np.random.default_rng(5), x, y, 8)
    assert a[0].shape == (3, 8, 8)
    np.testing.assert_array_equal(a[1], 2 * a[0])
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(PairingError):
        random_crop_flip(np.random.default_rng(0), x, y, 11)


def test_full_crop_without_flips_is_identity():
    x = np.arange(48.0).reshape(3, 4, 4)
    rng = np.random.default_rng(2)
    for _ in range(8):
        a, b = random_crop_flip(rng, x, x + 1, 4, flips=False)
        np.testing.assert_array_equal(a, x)
        np.testing.assert_array_equal(b, x + 1)


def test_flip_toggle_keeps_generator_stream():
    x = np.zeros((3, 4, 4))
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    random_crop_flip(r1, x, x, 2)
    random_crop_flip(r2, x, x, 2, flips=False)
    assert r1.integers(0, 2**32) == r2.integers(0, 2**32)


def test_block_averages():
    np.testing.assert_array_equal(block_averages(np.arange(250.0), 100), [49.5, 149.5])


def test_training_is_reproducible(tmp_path):
    pairs = load_pairs(make_pairs(tmp_path))
    logs = []
    for _ in range(2):
        model = build(smoke_config(), seed=0)
        log, _ = train_pairs(model, pairs, steps=4, crop=8, seed=3)
        logs.append(log.text())
    assert logs[0] == logs[1]
    lines = logs[0].splitlines()
    assert len(lines) == 4 and lines[0].split()[0] == "1"
    assert float(lines[0].split()[1]) == 5e-4


def test_fixed_seed_policy_trains(tmp_path):
    pairs = load_pairs(make_pairs(tmp_path, ("a",)))
    model = build(smoke_config(seed_policy="fixed"), seed=0)
    log, state = train_pairs(model, pairs, steps=3, crop=8, seed=0)
    assert state.step == 3 and all(np.isfinite(log.losses))
