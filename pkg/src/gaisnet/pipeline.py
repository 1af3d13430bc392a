"""Training loop and inference path.

Per proposal, the image features feed the box/category head, the 2D mask
head and the MaskIoU head. The disparity crop feeds the 2.5D head, and its
sampled point set feeds the 3D head. At inference the MaskIoU head scores all
three masks and the masks are fused by those scores.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import batched_nms

from . import fusion, geometry, losses
from .data import make_proposals
from .evaluation import Detection, GroundTruth
from .models import GAISNet, decode_boxes, encode_boxes, image_to_tensor, reproject_torch

logger = logging.getLogger(__name__)

REPRESENTATIONS = ("2d", "2d+25d", "2d+3d", "full")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    n_points: int = geometry.DEFAULT_N_POINTS
    grid_size: int = geometry.DEFAULT_GRID
    representations: str = "full"
    channels: int = 32
    standardize_disparity: bool = True
    cont_on_all_masks: bool = False
    jitter: float = 0.15
    negatives_per_image: int = 4
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections: int = 100

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = losses.weights_from_dict(self.weights)
        if self.representations not in REPRESENTATIONS:
            raise ValueError(f"representations must be one of {REPRESENTATIONS}")
        for name in ("epochs", "batch_size", "n_points", "channels"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")

    @property
    def use_25d(self):
        return self.representations in ("2d+25d", "full")

    @property
    def use_3d(self):
        return self.representations in ("2d+3d", "full")

    def to_dict(self):
        return asdict(self)


def gt_mask_grid(scene, inst_id, box, G):
    """Binary ``G x G`` target: the instance mask resampled in ``box``, thresholded at 0.5."""
    m = scene.instance_map == inst_id
    return geometry.resample_box(m.astype(np.float64), box, G) >= 0.5


def _roi_seed(config, epoch, scene_id, k):
    # epoch -1 (inference) and k -1 (proposals) shift to non-negative entropy
    return np.random.SeedSequence([config.seed, epoch + 1, scene_id, k + 1])


def _disparity_inputs(scene, boxes, config, epoch, seed_offset=0):
    """2.5D patches and sampled 3D point sets for ``boxes``."""
    G = config.grid_size
    patches = [geometry.crop_roi_disparity(scene.disparity, b, G) for b in boxes]
    point_sets = []
    if config.use_3d:
        for k, patch in enumerate(patches):
            ps = geometry.backproject_roi(patch)
            seed = _roi_seed(config, epoch, scene.scene_id, seed_offset + k)
            point_sets.append(geometry.sample_points(ps, config.n_points, seed))
    return patches, point_sets


def _stack_patches(patches, dtype):
    grids = torch.as_tensor(np.stack([p.grid for p in patches]), dtype=dtype)
    valid = torch.as_tensor(np.stack([p.valid for p in patches]))
    return grids, valid


def _stack_points(point_sets, dtype):
    pts = torch.as_tensor(np.stack([p.points for p in point_sets]), dtype=dtype)
    src = np.stack([p.source_index for p in point_sets])
    return pts, src


def compute_losses(model, scenes, config, epoch=0):
    """Loss terms for one batch of scenes, as a dict of scalar tensors."""
    dtype = model.dtype
    G = config.grid_size
    images = torch.stack([image_to_tensor(s.image, dtype) for s in scenes])
    fmaps = model.features(images)

    feats, labels, targets, gt_grids, fg_cats = [], [], [], [], []
    fg_boxes = []  # (scene, box) per foreground proposal
    for b, scene in enumerate(scenes):
        props = make_proposals(scene, seed=_roi_seed(config, epoch, scene.scene_id, -1),
                               jitter=config.jitter, negatives_per_image=config.negatives_per_image)
        boxes = np.array([p.box.as_array() for p in props])
        feats.append(model.roi_features(fmaps[b], boxes))
        for p in props:
            labels.append(p.label)
            if p.is_foreground:
                gt_box = scene.instances[p.matched_gt - 1].box
                targets.append(encode_boxes(p.box.as_array(), gt_box.as_array())[0])
                gt_grids.append(gt_mask_grid(scene, p.matched_gt, p.box, G))
                fg_cats.append(p.label - 1)
                fg_boxes.append((scene, p.box))
            else:
                targets.append(np.zeros(4))
    feats = torch.cat(feats)
    labels = torch.as_tensor(labels, dtype=torch.long)
    logits, deltas = model.box_class(feats)
    l_cls, l_box = losses.detection_losses(logits, deltas, labels, np.array(targets))
    terms = {"cls": l_cls, "box": l_box}

    fg = torch.nonzero(labels > 0).flatten()
    if fg.numel() == 0:
        return terms
    gt = torch.as_tensor(np.stack(gt_grids), dtype=dtype)
    fg_feats = feats[fg]
    m2d = model.mask2d_probs(fg_feats, fg_cats)
    terms["2dmask"] = losses.mask_bce(m2d, gt)
    s2d = model.maskiou_scores(fg_feats, m2d.detach(), fg_cats)
    terms["miou"] = losses.maskiou_loss(s2d, m2d, gt)

    cont_masks = [m2d] if config.cont_on_all_masks else []
    m25 = m3 = None
    if config.use_25d or config.use_3d:
        patches, point_sets = [], []
        for k, (scene, box) in enumerate(fg_boxes):
            p, ps = _disparity_inputs(scene, [box], config, epoch, seed_offset=k)
            patches += p
            point_sets += ps
        if config.use_25d:
            grids, valid = _stack_patches(patches, dtype)
            m25 = model.mask25d_probs(grids, valid, fg_cats)
            terms["25dmask"] = losses.mask_bce(m25, gt)
            if config.cont_on_all_masks:
                cont_masks.append(m25)
        if config.use_3d:
            pts, src = _stack_points(point_sets, dtype)
            probs = model.point_probs(pts, fg_cats)
            gt_points = gt.flatten(1).gather(1, torch.as_tensor(src))
            terms["3dmask"] = losses.mask_bce(probs, gt_points)
            m3 = reproject_torch(probs, src, G)
            cont_masks.append(m3)
    if cont_masks:
        terms["cont"] = sum(losses.continuity_loss(m) for m in cont_masks)
    if m25 is not None and m3 is not None:
        terms["corr"] = losses.correspondence_loss(m3, m25)
    return terms


def train(dataset, config, callback=None):
    """Fit a fresh :class:`GAISNet` with SGD; returns ``(model, loss_log)``.

    Raises ``FloatingPointError`` naming the term and step on divergence.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    model = GAISNet(num_categories=len(dataset[0].categories), channels=config.channels,
                    grid_size=config.grid_size, seed=config.seed,
                    standardize_disparity=config.standardize_disparity)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    log = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            terms = compute_losses(model, batch, config, epoch)
            try:
                total = losses.total_loss(terms, config.weights)
            except FloatingPointError as exc:
                raise FloatingPointError(f"step {step}: {exc}") from exc
            opt.zero_grad()
            total.backward()
            opt.step()
            report = losses.LossReport(terms={k: float(v.detach()) for k, v in terms.items()},
                                       total=float(total.detach()), step=step, epoch=epoch)
            log.append(report)
            if callback is not None:
                callback(report)
            step += 1
        logger.info("epoch %d: mean total loss %.4f", epoch,
                    np.mean([r.total for r in log if r.epoch == epoch]))
    return model, log


def _paste_prob(mask, box):
    """Bilinear resize of a ``G x G`` probability mask to the box's pixel size."""
    h, w = int(box.height), int(box.width)
    t = torch.as_tensor(mask, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()


@torch.no_grad()
def infer(scene, model, config, proposals=None, return_masks=False):
    """Detections for one scene.

    With ``return_masks`` the per-representation probability masks and
    scores (before binarization) are returned alongside, one dict per
    detection.
    """
    dtype = model.dtype
    G = config.grid_size
    H, W = scene.shape
    if proposals is None:
        proposals = make_proposals(scene, seed=_roi_seed(config, -1, scene.scene_id, -1),
                                   jitter=config.jitter,
                                   negatives_per_image=config.negatives_per_image)
    empty = ([], []) if return_masks else []
    if not proposals:
        return empty
    fmap = model.features(image_to_tensor(scene.image, dtype)[None])[0]
    boxes = np.array([p.box.as_array() for p in proposals])
    logits, deltas = model.box_class(model.roi_features(fmap, boxes))
    probs = torch.softmax(logits, dim=1)[:, 1:].double().numpy()
    cats = probs.argmax(axis=1)
    scores = probs[np.arange(len(cats)), cats]
    d = deltas.double().numpy().reshape(len(cats), -1, 4)[np.arange(len(cats)), cats]
    refined = decode_boxes(boxes, d)
    refined[:, [0, 2]] = refined[:, [0, 2]].clip(0, W)
    refined[:, [1, 3]] = refined[:, [1, 3]].clip(0, H)
    keep = (scores >= config.score_threshold) & (refined[:, 2] - refined[:, 0] >= 1) & (
        refined[:, 3] - refined[:, 1] >= 1)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return empty
    nms = batched_nms(torch.as_tensor(refined[idx]), torch.as_tensor(scores[idx]),
                      torch.as_tensor(cats[idx]), config.nms_threshold).numpy()
    idx = idx[nms[: config.max_detections]]

    det_boxes = [geometry.RoiBox(*refined[i]).rounded().clip(H, W) for i in idx]
    det_cats = [int(cats[i]) for i in idx]
    feats = model.roi_features(fmap, np.array([b.as_array() for b in det_boxes]))
    m2d = model.mask2d_probs(feats, det_cats)
    s2d = model.maskiou_scores(feats, m2d, det_cats)
    outputs = {"2d": (m2d, s2d)}
    if config.use_25d or config.use_3d:
        patches, point_sets = _disparity_inputs(scene, det_boxes, config, -1)
        if config.use_25d:
            m25 = model.mask25d_probs(*_stack_patches(patches, dtype), det_cats)
            outputs["25d"] = (m25, model.maskiou_scores(feats, m25, det_cats))
        if config.use_3d:
            pts, src = _stack_points(point_sets, dtype)
            m3 = reproject_torch(model.point_probs(pts, det_cats), src, G)
            outputs["3d"] = (m3, model.maskiou_scores(feats, m3, det_cats))

    detections, extras = [], []
    for j, i in enumerate(idx):
        scored = {k: fusion.ScoredMask(np.clip(m[j].double().numpy(), 0, 1), float(s[j]))
                  for k, (m, s) in outputs.items()}
        if config.representations == "full":
            fused = fusion.fuse_all(scored["2d"], scored["25d"], scored["3d"])
        elif config.representations == "2d+25d":
            fused = fusion.fuse_pair(scored["2d"], scored["25d"])
        elif config.representations == "2d+3d":
            fused = fusion.fuse_pair(scored["2d"], scored["3d"])
        else:
            fused = scored["2d"]
        box = det_boxes[j]
        mask = fusion.binarize(_paste_prob(fused.mask, box))
        detections.append(Detection(box=box, category=det_cats[j], box_score=float(scores[i]),
                                    mask=mask, mask_score=fused.score, image_id=scene.scene_id,
                                    det_id=scene.scene_id * 10000 + j))
        extras.append({"masks": scored, "fused": fused})
    if return_masks:
        return detections, extras
    return detections


def ground_truths(scene):
    return [GroundTruth(scene.scene_id, inst.category, inst.box, scene.instance_mask(k + 1))
            for k, inst in enumerate(scene.instances)]
