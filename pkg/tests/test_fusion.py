import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaisnet.fusion import ScoredMask, binarize, fuse_all, fuse_pair, pair_weights

masks = arrays(np.float64, (14, 14), elements=st.floats(0, 1))
scores = st.floats(0, 1)
scored = st.builds(ScoredMask, masks, scores)


def uniform(v, s):
    return ScoredMask(np.full((14, 14), v), s)


def test_equal_scores_average(rng):
    a, b = rng.random((14, 14)), rng.random((14, 14))
    out = fuse_pair(ScoredMask(a, 0.4), ScoredMask(b, 0.4))
    np.testing.assert_allclose(out.mask, (a + b) / 2, atol=1e-15)
    assert out.score == pytest.approx(0.4, abs=1e-15)


def test_pair_hand_case():
    out = fuse_pair(uniform(0.8, 0.6), uniform(0.4, 0.2))
    np.testing.assert_allclose(out.mask, 0.7, atol=1e-12)
    assert out.score == pytest.approx(0.5, abs=1e-12)


def test_identical_masks_unchanged(rng):
    m = rng.random((14, 14))
    out = fuse_pair(ScoredMask(m, 0.9), ScoredMask(m, 0.1))
    np.testing.assert_array_equal(out.mask, m)


def test_fuse_all_identical(rng):
    m = rng.random((14, 14))
    out = fuse_all(ScoredMask(m, 0.3), ScoredMask(m, 0.7), ScoredMask(m, 0.2))
    np.testing.assert_array_equal(out.mask, m)


def test_zero_disparity_scores_fall_back(rng):
    m2, m25, m3 = rng.random((3, 14, 14))
    out = fuse_all(ScoredMask(m2, 0.6), ScoredMask(m25, 0.0), ScoredMask(m3, 0.0))
    # disparity pair is averaged with score 0, then the 2D mask takes all the weight
    np.testing.assert_array_equal(out.mask, m2)
    assert out.score == 0.6


def test_all_zero_scores_average_everything(rng):
    m2, m25, m3 = rng.random((3, 14, 14))
    out = fuse_all(ScoredMask(m2, 0.0), ScoredMask(m25, 0.0), ScoredMask(m3, 0.0))
    np.testing.assert_allclose(out.mask, 0.5 * m2 + 0.25 * (m25 + m3), atol=1e-15)


def test_fuse_all_hand_case():
    out = fuse_all(uniform(0.9, 0.5), uniform(0.8, 0.6), uniform(0.4, 0.2))
    np.testing.assert_allclose(out.mask, 0.8, atol=1e-12)
    assert out.score == pytest.approx(0.5, abs=1e-12)


def test_fuse_all_order_is_fixed():
    a, b, c = uniform(1.0, 0.9), uniform(0.0, 0.1), uniform(0.5, 0.5)
    expected = fuse_pair(a, fuse_pair(b, c))
    other = fuse_pair(c, fuse_pair(a, b))
    out = fuse_all(a, b, c)
    np.testing.assert_array_equal(out.mask, expected.mask)
    assert not np.allclose(out.mask, other.mask)


@settings(max_examples=200, deadline=None)
@given(scored, scored)
def test_pair_convex_and_symmetric(a, b):
    out = fuse_pair(a, b)
    assert np.all(out.mask >= np.minimum(a.mask, b.mask))
    assert np.all(out.mask <= np.maximum(a.mask, b.mask))
    assert min(a.score, b.score) <= out.score <= max(a.score, b.score)
    rev = fuse_pair(b, a)
    np.testing.assert_array_equal(out.mask, rev.mask)
    assert out.score == rev.score


@settings(max_examples=500, deadline=None)
@given(scores, scores)
def test_weights_sum_to_one(s_a, s_b):
    w_a, w_b = pair_weights(s_a, s_b)
    assert w_a + w_b == 1.0
    assert w_a >= 0 and w_b >= 0
    assert pair_weights(s_b, s_a) == (w_b, w_a)


@settings(max_examples=200, deadline=None)
@given(scored, scored, st.floats(0.01, 1.0))
def test_score_scale_invariance(a, b, c):
    out = fuse_pair(a, b)
    scaled = fuse_pair(ScoredMask(a.mask, a.score * c), ScoredMask(b.mask, b.score * c))
    if a.score + b.score >= 1e-6 and (a.score + b.score) * c >= 1e-6:
        np.testing.assert_allclose(scaled.mask, out.mask, atol=1e-12)
        assert scaled.score == pytest.approx(c * out.score, abs=1e-12)


def test_scored_mask_validation():
    with pytest.raises(ValueError):
        ScoredMask(np.full((14, 14), 1.5), 0.5)
    with pytest.raises(ValueError):
        ScoredMask(np.full((14, 14), 0.5), -0.1)
    with pytest.raises(ValueError):
        fuse_pair(uniform(0.5, 0.5), ScoredMask(np.zeros((7, 7)), 0.5))


def test_binarize_tie_rule():
    assert binarize(np.full((14, 14), 0.5)).all()
    np.testing.assert_array_equal(binarize(np.array([0.49, 0.51])), [False, True])


@settings(max_examples=50, deadline=None)
@given(masks)
def test_binarize_idempotent(m):
    once = binarize(m)
    np.testing.assert_array_equal(binarize(once), once)
