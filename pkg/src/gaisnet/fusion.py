"""Score-weighted fusion of probability masks at inference time.

Two scored masks are merged as a convex combination weighted by their
normalized scores, and the merged score is the same combination of the
scores. Disparity-derived masks (2.5D and 3D) are merged first; the image
mask is merged with that result last.
"""
from dataclasses import dataclass

import numpy as np

from ._validation import check_prob_mask, check_same_shape, check_score

SCORE_EPS = 1e-8


@dataclass
class ScoredMask:
    mask: np.ndarray
    score: float

    def __post_init__(self):
        self.mask = check_prob_mask(self.mask)
        self.score = check_score(self.score)


def pair_weights(s_a, s_b):
    """Normalized weights ``(s_a, s_b) / (s_a + s_b)``; equal weights if the sum vanishes."""
    total = s_a + s_b
    if total < SCORE_EPS:
        return 0.5, 0.5
    # divide for the larger score, subtract for the other: sums to exactly 1
    # and assigns bit-identical weights regardless of argument order
    if s_a >= s_b:
        w_a = s_a / total
        return w_a, 1.0 - w_a
    w_b = s_b / total
    return 1.0 - w_b, w_b


def fuse_pair(a, b):
    check_same_shape(a.mask, b.mask, ("a.mask", "b.mask"))
    w_a, w_b = pair_weights(a.score, b.score)
    mask = w_a * a.mask + w_b * b.mask
    score = w_a * a.score + w_b * b.score
    # guard against 1 ulp overshoot outside the inputs' range
    lo, hi = np.minimum(a.mask, b.mask), np.maximum(a.mask, b.mask)
    mask = np.clip(mask, lo, hi)
    score = min(max(score, min(a.score, b.score)), max(a.score, b.score))
    return ScoredMask(mask, score)


def fuse_all(m2d, m25d, m3d):
    """Fuse (2.5D, 3D) into a disparity mask, then fuse the 2D mask with it."""
    disparity = fuse_pair(m25d, m3d)
    return fuse_pair(m2d, disparity)


def binarize(m, threshold=0.5):
    """Cells with value ``>= threshold`` become True."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(m, dtype=np.float64) >= threshold
