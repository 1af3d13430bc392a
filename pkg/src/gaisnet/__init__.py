"""Geometry-aware instance segmentation from a single image plus stereo disparity."""
from .data import SceneConfig, SceneRecord, generate_dataset, generate_scene, read_dataset, write_dataset
from .estimator import GeometryAwareSegmenter
from .evaluation import Detection, EvalResult, GroundTruth, coco_ap, mask_iou
from .fusion import ScoredMask, binarize, fuse_all, fuse_pair
from .geometry import (DisparityMap, DisparityPatch, PointSet3D, RoiBox, StereoRig,
                       backproject_roi, crop_roi_disparity, disparity_to_depth,
                       reproject_points, sample_points)
from .losses import LossWeights
from .models import GAISNet, load_checkpoint, save_params
from .pipeline import TrainConfig, infer, train

__version__ = "0.1.0"

__all__ = [
    "DisparityMap", "DisparityPatch", "PointSet3D", "RoiBox", "StereoRig",
    "backproject_roi", "crop_roi_disparity", "disparity_to_depth", "reproject_points",
    "sample_points", "SceneConfig", "SceneRecord", "generate_dataset", "generate_scene",
    "read_dataset", "write_dataset", "GeometryAwareSegmenter", "Detection", "EvalResult",
    "GroundTruth", "coco_ap", "mask_iou", "ScoredMask", "binarize", "fuse_all", "fuse_pair",
    "LossWeights", "GAISNet", "load_checkpoint", "save_params", "TrainConfig", "infer", "train",
]
