import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtloc.errors import InputError
from gtloc.mask_matching import (
    BinarizedMap,
    binarize_map,
    read_map_image,
    resize_mask_to_map,
    select_mask,
    similarity_score,
    write_map_image,
)
from gtloc.mask_provider import MaskGallery


def iou_oracle(a, b):
    """Brute-force pixel-count IoU, independent of the library path."""
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        if x and y:
            inter += 1
        if x or y:
            union += 1
    return 0.0 if union == 0 else inter / union


# -- binarize_map -------------------------------------------------------------


def test_binarize_constant_above_threshold():
    out = binarize_map(np.full((4, 4), 0.7), 0.5)
    assert out.grid.all()


def test_binarize_zero_threshold_all_ones(rng):
    out = binarize_map(rng.random((6, 6)), 0.0)
    assert out.grid.all()


def test_binarize_matches_elementwise_comparison(rng):
    m = rng.random((9, 13))
    out = binarize_map(m, 0.5)
    expected = np.array([[v >= 0.5 for v in row] for row in m])
    assert int(out.grid.sum()) == int(expected.sum())
    assert np.array_equal(out.grid, expected)


def test_binarize_rejects_non_2d():
    with pytest.raises(InputError):
        binarize_map(np.zeros((2, 2, 2)))


# -- resize_mask_to_map --------------------------------------------------------


def test_resize_all_ones():
    assert resize_mask_to_map(np.ones((224, 224), bool), (14, 14)).all()


def test_resize_all_zeros():
    assert not resize_mask_to_map(np.zeros((224, 224), bool), (14, 14)).any()


def test_resize_half_plane_exact_coverage():
    mask = np.zeros((224, 224), bool)
    mask[:, :112] = True  # cells 0..6 fully covered, 7..13 at zero coverage
    out = resize_mask_to_map(mask, (14, 14))
    expected = np.zeros((14, 14), bool)
    expected[:, :7] = True
    assert np.array_equal(out, expected)


def test_resize_non_divisible_matches_manual_coverage():
    # 3 -> 2: output cell 0 spans input rows [0, 1.5)
    mask = np.array([[1, 1, 1], [0, 0, 0], [0, 0, 0]], bool)
    out = resize_mask_to_map(mask, (2, 2))
    # coverage of top cells = 1 * (1/1.5) = 2/3 >= 0.5; bottom = 0
    assert np.array_equal(out, np.array([[True, True], [False, False]]))


# -- similarity_score ----------------------------------------------------------


def test_score_identical_is_one(rng):
    m = rng.random((14, 14)) > 0.5
    m[0, 0] = True
    assert similarity_score(m, BinarizedMap(m, 0.5)) == 1.0


def test_score_disjoint_is_zero():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, 0] = True
    b[3, 3] = True
    assert similarity_score(a, BinarizedMap(b, 0.5)) == 0.0


def test_score_shifted_blocks():
    # 2x3 block at cols 0..2 vs cols 1..3 on a 2x4 grid: inter 4, union 8
    a = np.zeros((2, 4), bool)
    b = np.zeros((2, 4), bool)
    a[:, 0:3] = True
    b[:, 1:4] = True
    assert similarity_score(a, BinarizedMap(b, 0.5)) == 4 / 8


def test_score_shape_mismatch():
    with pytest.raises(InputError):
        similarity_score(np.ones((3, 3), bool), BinarizedMap(np.ones((4, 4), bool), 0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**30 - 1))
def test_score_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a = r.random((7, 7)) > 0.6
    b = r.random((7, 7)) > 0.6
    s1 = similarity_score(a, BinarizedMap(b, 0.5))
    s2 = similarity_score(b, BinarizedMap(a, 0.5))
    assert s1 == s2
    assert 0.0 <= s1 <= 1.0


# -- select_mask ---------------------------------------------------------------


def _gallery(masks, h, w, image_id="img"):
    return MaskGallery(image_id=image_id, masks=masks, height=h, width=w)


def test_select_self_match_wins(rng):
    grid = rng.random((14, 14)) > 0.5
    grid[3:7, 3:7] = True
    self_mask = np.kron(grid, np.ones((16, 16), bool))
    noise = np.zeros((224, 224), bool)
    noise[0:5, 0:5] = True
    fg = np.where(grid, 0.9, 0.1)
    result = select_mask(_gallery([noise, self_mask], 224, 224), fg)
    assert result.winner_index == 1
    assert result.scores[1] == 1.0
    assert not result.fallback_used


def test_select_matches_bruteforce_oracle(rng):
    for _ in range(25):
        fg = rng.random((14, 14))
        masks = [rng.random((14, 14)) > rng.uniform(0.3, 0.8) for _ in range(5)]
        masks = [m | (rng.random((14, 14)) > 0.95) for m in masks]
        masks = [m for m in masks if m.any()]
        result = select_mask(_gallery(masks, 14, 14), fg)
        bin_grid = np.array([[v >= 0.5 for v in row] for row in fg])
        oracle_scores = [iou_oracle(m, bin_grid) for m in masks]
        assert result.scores == oracle_scores
        if max(oracle_scores) > 0:
            expected = oracle_scores.index(max(oracle_scores))
            assert result.winner_index == expected


def test_select_empty_gallery_falls_back():
    fg = np.full((4, 4), 0.8)
    result = select_mask(_gallery([], 16, 16), fg)
    assert result.fallback_used
    assert result.winner_index is None
    assert result.final_mask.shape == (16, 16)
    assert result.final_mask.all()


def test_select_fallback_nonempty_even_for_low_maps():
    fg = np.full((4, 4), 0.1)
    fg[1, 2] = 0.2
    result = select_mask(_gallery([], 8, 8), fg)
    assert result.fallback_used
    assert result.final_mask.any()


def test_select_zero_overlap_falls_back():
    fg = np.zeros((4, 4))
    fg[0, 0] = 0.9
    mask = np.zeros((4, 4), bool)
    mask[3, 3] = True
    result = select_mask(_gallery([mask], 4, 4), fg)
    assert result.fallback_used


def test_winner_invariant_under_permutation(rng):
    fg = rng.random((8, 8))
    masks = [rng.random((8, 8)) > 0.5 for _ in range(6)]
    masks = [m if m.any() else ~m for m in masks]
    base = select_mask(_gallery(masks, 8, 8), fg)
    perm = rng.permutation(len(masks))
    shuffled = select_mask(_gallery([masks[i] for i in perm], 8, 8), fg)
    if base.winner_index is not None:
        assert shuffled.scores[list(perm).index(base.winner_index)] == max(base.scores)
        assert max(shuffled.scores) == max(base.scores)


def test_adding_strictly_better_mask_changes_winner(rng):
    fg = rng.random((8, 8))
    bin_grid = fg >= 0.5
    if not bin_grid.any():
        bin_grid[0, 0] = True
        fg[0, 0] = 0.9
    weak = ~bin_grid if (~bin_grid).any() else bin_grid
    base = select_mask(_gallery([weak], 8, 8), fg)
    better = select_mask(_gallery([weak, bin_grid], 8, 8), fg)
    assert better.winner_index == 1
    assert better.scores[1] == 1.0
    assert better.scores[1] > max(base.scores)


def test_final_mask_binary_and_nonempty(rng):
    for _ in range(10):
        fg = rng.random((6, 6))
        masks = [rng.random((12, 12)) > 0.7 for _ in range(3)]
        masks = [m for m in masks if m.any()]
        result = select_mask(_gallery(masks, 12, 12), fg)
        assert result.final_mask.dtype == np.bool_
        assert result.final_mask.any()


# -- 16-bit map files ----------------------------------------------------------


def test_map_image_round_trip(tmp_path, rng):
    fg = rng.random((14, 14))
    path = tmp_path / "map.png"
    write_map_image(fg, path)
    back = read_map_image(path)
    assert np.abs(back - fg).max() <= 0.5 / 65535 + 1e-12


def test_map_image_rejects_out_of_range(tmp_path):
    with pytest.raises(InputError):
        write_map_image(np.full((3, 3), 1.5), tmp_path / "bad.png")
