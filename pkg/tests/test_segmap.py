import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mga.segmap import (BoundingBox, Heatmap, bilinear_upsample, evaluate_heatmap,
                        heatmap_from_features, heatmap_pgm, sentence_heatmap, write_heatmap)
from mga.corpus import read_pgm


def loop_bilinear(grid, h, w):
    """Align-corners bilinear interpolation, one output pixel at a time."""
    gh, gw = grid.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            y = i * (gh - 1) / (h - 1) if h > 1 else 0.0
            x = j * (gw - 1) / (w - 1) if w > 1 else 0.0
            y0, x0 = min(int(np.floor(y)), max(gh - 2, 0)), min(int(np.floor(x)), max(gw - 2, 0))
            y1, x1 = min(y0 + 1, gh - 1), min(x0 + 1, gw - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * grid[y0, x0] + fx * grid[y0, x1])
                         + fy * ((1 - fx) * grid[y1, x0] + fx * grid[y1, x1]))
    return out


def test_center_of_checkerboard_is_half():
    up = bilinear_upsample(np.array([[0.0, 1.0], [1.0, 0.0]]), 3, 3)
    assert up[1, 1] == 0.5


def test_constant_grid_stays_constant():
    np.testing.assert_allclose(bilinear_upsample(np.full((4, 4), 0.7), 13, 9), 0.7, atol=1e-15)


def test_same_size_is_identity(rng):
    g = rng.normal(size=(5, 5))
    np.testing.assert_array_equal(bilinear_upsample(g, 5, 5), g)


def test_upsample_matches_loop_oracle(rng):
    g = rng.normal(size=(4, 3))
    np.testing.assert_allclose(bilinear_upsample(g, 11, 7), loop_bilinear(g, 11, 7), atol=1e-14)


def test_shrinking_rejected():
    with pytest.raises(ValueError):
        bilinear_upsample(np.zeros((4, 4)), 3, 8)


def test_orthogonal_sentence_gives_zero_grid():
    grid = np.zeros((2, 2, 3))
    grid[..., 0] = 1.0
    hm = heatmap_from_features(np.array([0.0, 1.0, 0.0]), grid, 8, 8)
    np.testing.assert_array_equal(hm.upsampled, 0.0)


def test_sentence_equal_to_patch_peaks_there(rng):
    grid = rng.normal(size=(3, 3, 4))
    grid /= np.linalg.norm(grid, axis=-1, keepdims=True)
    hm = heatmap_from_features(grid[2, 1], grid, 9, 9)
    assert np.unravel_index(np.argmax(hm.grid), hm.grid.shape) == (2, 1)
    assert abs(hm.grid.max() - 1.0) <= 1e-15


def test_heatmap_deterministic(small_model, rng):
    img = rng.uniform(size=(8, 8))
    a = sentence_heatmap("There is edema.", img, small_model)
    b = sentence_heatmap("There is edema.", img, small_model)
    np.testing.assert_array_equal(a.upsampled, b.upsampled)
    with pytest.raises(ValueError):
        sentence_heatmap("...", img, small_model)


def test_pointing_hit_and_exact_iou():
    values = np.zeros((20, 20))
    values[2:4, 5:10] = 1.0  # 10 pixels = 2.5 % of the map
    box = BoundingBox(5, 2, 5, 2)
    hit, iou = evaluate_heatmap(values, [box], q=0.975)
    assert hit and iou == 1.0


def test_argmax_ties_go_to_first_pixel():
    values = np.ones((4, 4))
    assert evaluate_heatmap(values, [BoundingBox(0, 0, 1, 1)])[0]
    assert not evaluate_heatmap(values, [BoundingBox(1, 1, 1, 1)])[0]


def test_random_heatmap_hit_rate_matches_box_area():
    rng = np.random.default_rng(0)
    box = BoundingBox(0, 0, 10, 10)  # 10 % of a 100 x 10 map
    hits = [evaluate_heatmap(rng.random((10, 100)), [box])[0] for _ in range(1000)]
    assert abs(np.mean(hits) - 0.10) <= 0.03


@given(arrays(np.int64, (6, 6), elements=st.integers(-1000, 1000)), st.floats(0.05, 0.95))
def test_scores_depend_only_on_ranks(values, q):
    boxes = [BoundingBox(1, 2, 3, 2)]
    x = values.astype(np.float64)
    a = evaluate_heatmap(x, boxes, q)
    b = evaluate_heatmap(x ** 3 + 2 * x, boxes, q)  # strictly increasing, exact on integers
    assert a == b


def test_evaluate_validates_inputs():
    with pytest.raises(ValueError):
        evaluate_heatmap(np.zeros((3, 3)), [])
    with pytest.raises(ValueError):
        evaluate_heatmap(np.zeros((3, 3)), [BoundingBox(0, 0, 1, 1)], q=1.0)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 2)


def test_box_json_round_trip():
    b = BoundingBox(3, 4, 5, 6, "edema")
    assert BoundingBox.from_json(b.to_json()) == b
    assert b.to_json()["class"] == "edema"


def test_written_files(tmp_path, rng):
    up = rng.uniform(size=(6, 5))
    hm = Heatmap(up[:2, :2], up, "x")
    csv_path, pgm_path = write_heatmap(hm, tmp_path, "ex")
    back = np.loadtxt(csv_path, delimiter=",")
    np.testing.assert_allclose(back, up, atol=5e-7)
    img = read_pgm(pgm_path)
    assert img.shape == (6, 5)
    assert img.min() == 0.0 and img.max() == 1.0
    assert heatmap_pgm(hm).startswith(b"P5\n5 6\n255\n")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ex.csv", "ex.pgm"]
