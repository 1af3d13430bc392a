"""Input validation helpers shared across the package.

These mirror the ``sklearn.utils.validation`` style: each helper either
returns a normalized copy of its input or raises ``ValueError``.
"""
import numpy as np


def check_grid_size(G):
    G = int(G)
    if G < 2:
        raise ValueError(f"grid size must be >= 2, got {G}")
    return G


def check_prob_mask(mask, shape=None, name="mask"):
    """Return ``mask`` as a float64 array with every value in [0, 1]."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_binary_mask(mask, name="mask"):
    arr = np.asarray(mask)
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{name} must be binary")
        arr = arr.astype(bool)
    return arr


def check_score(score, name="score"):
    s = float(score)
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {s}")
    return s


def check_same_shape(a, b, names=("a", "b")):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}"
        )


def check_image(image):
    """Validate an RGB image of shape (H, W, 3)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {arr.shape}")
    return arr


def check_scenes(scenes, min_scenes=1):
    """Validate a list of scene records (duck-typed) and return it as a list."""
    scenes = list(scenes)
    if len(scenes) < min_scenes:
        raise ValueError(f"expected at least {min_scenes} scene(s), got {len(scenes)}")
    for s in scenes:
        for attr in ("image", "disparity", "instance_map", "instances", "rig"):
            if not hasattr(s, attr):
                raise TypeError(f"scene object lacks attribute {attr!r}")
        check_image(s.image)
        if s.image.shape[:2] != s.instance_map.shape or s.disparity.values.shape != s.instance_map.shape:
            raise ValueError(f"scene {getattr(s, 'scene_id', '?')}: image, disparity and "
                             "instance map sizes differ")
    return scenes
