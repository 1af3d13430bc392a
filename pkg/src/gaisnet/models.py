"""Toy differentiable networks for geometry-aware mask regression.

``GAISNet`` bundles a small convolutional backbone with five heads:

* box/category head on pooled image features,
* 2D mask head on image ROI features,
* 2.5D mask head on the resampled disparity patch,
* PointNet-style 3D mask head on sampled ``(u, v, d)`` points,
* a single MaskIoU head that scores a mask given image ROI features.

Every head is initialized from its own seeded generator, so enabling or
disabling one head never changes the initial weights of another.
"""
import json
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import DEFAULT_GRID, bilinear_taps, nearest_fill_index

CHECKPOINT_VERSION = 1
BOX_CODER_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
BBOX_CLIP = math.log(1000.0 / 16)


def _conv(cin, cout, stride=1, dilation=1, padding_mode="zeros"):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation,
                     padding_mode=padding_mode)


def _init_module(module, generator, final_layers=()):
    """Truncated-normal weights and zero biases.

    Hidden layers use He scaling so activations keep their magnitude through
    the stack; the prediction layers in ``final_layers`` use std 0.01.
    """
    final_ids = {id(m) for m in final_layers}
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            if id(m) in final_ids:
                std = 0.01
            else:
                fan_in = m.weight[0].numel()
                std = math.sqrt(2.0 / fan_in)
            nn.init.trunc_normal_(m.weight, 0.0, std, -2 * std, 2 * std, generator=generator)
            nn.init.zeros_(m.bias)


def image_to_tensor(image, dtype=torch.float32):
    """(H, W, 3) uint8 image -> (3, H, W) tensor centered on zero."""
    arr = np.asarray(image, dtype=np.float64) / 255.0 - 0.5
    return torch.as_tensor(arr.transpose(2, 0, 1).copy(), dtype=dtype)


def roi_crop(feature_map, boxes, G, scale):
    """Bilinear crop-resize of ``(C, H, W)`` features to ``(R, C, G, G)``.

    One sample per output cell at the cell center (a simplified ROI-Align);
    ``scale`` maps image pixels to feature pixels.
    """
    C, H, W = feature_map.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return feature_map.new_zeros((0, C, G, G))
    ty = [bilinear_taps(b[1], b[3] - b[1], G, H, scale) for b in boxes]
    tx = [bilinear_taps(b[0], b[2] - b[0], G, W, scale) for b in boxes]
    ylo, yhi, wy = (np.stack(a) for a in zip(*ty))
    xlo, xhi, wx = (np.stack(a) for a in zip(*tx))
    wy = torch.as_tensor(wy, dtype=feature_map.dtype)[:, :, None]
    wx = torch.as_tensor(wx, dtype=feature_map.dtype)[:, None, :]
    Y0, Y1 = torch.as_tensor(ylo)[:, :, None], torch.as_tensor(yhi)[:, :, None]
    X0, X1 = torch.as_tensor(xlo)[:, None, :], torch.as_tensor(xhi)[:, None, :]
    f = feature_map
    top = f[:, Y0, X0] + wx * (f[:, Y0, X1] - f[:, Y0, X0])
    bottom = f[:, Y1, X0] + wx * (f[:, Y1, X1] - f[:, Y1, X0])
    out = top + wy * (bottom - top)
    return out.permute(1, 0, 2, 3)


def encode_boxes(proposals, targets):
    """Standard box deltas of ``targets`` relative to ``proposals`` (both (N, 4))."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = BOX_CODER_WEIGHTS
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    tx, ty = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    return np.stack(
        [wx * (tx - px) / pw, wy * (ty - py) / ph, ww * np.log(tw / pw), wh * np.log(th / ph)],
        axis=1,
    )


def decode_boxes(proposals, deltas):
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = BOX_CODER_WEIGHTS
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    cx = px + d[:, 0] / wx * pw
    cy = py + d[:, 1] / wy * ph
    w = pw * np.exp(np.minimum(d[:, 2] / ww, BBOX_CLIP))
    h = ph * np.exp(np.minimum(d[:, 3] / wh, BBOX_CLIP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


class Backbone(nn.Module):
    """Three 3x3 convolutions, the second with stride 2; ``channels`` output maps."""

    stride = 2

    def __init__(self, channels=32):
        super().__init__()
        width = max(channels // 2, 1)
        self.body = nn.Sequential(
            _conv(3, width), nn.SiLU(),
            _conv(width, width, stride=2), nn.SiLU(),
            _conv(width, channels), nn.SiLU(),
        )

    def forward(self, x):
        return self.body(x)


class MaskHead(nn.Module):
    """Per-category mask logits on a ``G x G`` grid, no up-sampling."""

    def __init__(self, in_channels, num_categories, width=32, padding_mode="zeros"):
        super().__init__()
        self.body = nn.Sequential(
            _conv(in_channels, width, padding_mode=padding_mode), nn.SiLU(),
            _conv(width, width, dilation=2, padding_mode=padding_mode), nn.SiLU(),
            _conv(width, width, padding_mode=padding_mode), nn.SiLU(),
        )
        self.predictor = nn.Conv2d(width, num_categories, 1)

    def forward(self, x):
        return self.predictor(self.body(x))


class PointMaskHead(nn.Module):
    """Shared per-point MLP, max-pooled global feature, per-point logits."""

    def __init__(self, num_categories, local=32, glob=64, hidden=64):
        super().__init__()
        self.local = nn.Sequential(
            nn.Conv1d(3, local, 1), nn.SiLU(),
            nn.Conv1d(local, local, 1), nn.SiLU(),
        )
        self.global_mlp = nn.Sequential(nn.Conv1d(local, glob, 1), nn.SiLU())
        self.seg = nn.Sequential(
            nn.Conv1d(local + glob, hidden, 1), nn.SiLU(),
        )
        self.predictor = nn.Conv1d(hidden, num_categories, 1)

    def forward(self, pts):
        # pts: (R, N, 3) -> logits (R, K, N)
        x = pts.transpose(1, 2)
        local = self.local(x)
        g = self.global_mlp(local).max(dim=2, keepdim=True).values
        feat = torch.cat([local, g.expand(-1, -1, x.shape[2])], dim=1)
        return self.predictor(self.seg(feat))


class MaskIoUHead(nn.Module):
    """Regresses a per-category IoU score from ROI features plus a mask channel."""

    def __init__(self, in_channels, num_categories, grid=DEFAULT_GRID, width=32, hidden=128):
        super().__init__()
        self.convs = nn.Sequential(
            _conv(in_channels + 1, width), nn.SiLU(),
            nn.MaxPool2d(2, ceil_mode=True),
            _conv(width, width), nn.SiLU(),
        )
        pooled = math.ceil(grid / 2)
        self.fc = nn.Sequential(nn.Linear(width * pooled * pooled, hidden), nn.SiLU())
        self.predictor = nn.Linear(hidden, num_categories)

    def forward(self, feat, mask):
        x = torch.cat([feat, mask[:, None]], dim=1)
        return self.predictor(self.fc(self.convs(x).flatten(1)))


class BoxClassHead(nn.Module):
    def __init__(self, in_channels, num_categories, grid=DEFAULT_GRID, hidden=256):
        super().__init__()
        self.pool = nn.AvgPool2d(2, ceil_mode=True)
        pooled = math.ceil(grid / 2)
        self.fc = nn.Sequential(nn.Linear(in_channels * pooled * pooled, hidden), nn.SiLU())
        self.cls_score = nn.Linear(hidden, num_categories + 1)
        self.bbox_pred = nn.Linear(hidden, 4 * num_categories)

    def forward(self, feat):
        h = self.fc(self.pool(feat).flatten(1))
        return self.cls_score(h), self.bbox_pred(h)


HEADS = ("backbone", "box_head", "mask2d_head", "mask25d_head", "point_head", "maskiou_head")


class GAISNet(nn.Module):
    """All learnable parts of the geometry-aware segmenter."""

    def __init__(self, num_categories=3, channels=32, grid_size=DEFAULT_GRID, seed=0,
                 standardize_disparity=True, dtype=torch.float32):
        super().__init__()
        self.num_categories = int(num_categories)
        self.channels = int(channels)
        self.grid_size = int(grid_size)
        self.seed = int(seed)
        self.standardize_disparity = bool(standardize_disparity)
        K, C, G = self.num_categories, self.channels, self.grid_size
        self.backbone = Backbone(C)
        self.box_head = BoxClassHead(C, K, G)
        self.mask2d_head = MaskHead(C, K)
        self.mask25d_head = MaskHead(1, K, padding_mode="replicate")
        self.point_head = PointMaskHead(K)
        self.maskiou_head = MaskIoUHead(C, K, G)
        finals = {
            "backbone": (),
            "box_head": (self.box_head.cls_score, self.box_head.bbox_pred),
            "mask2d_head": (self.mask2d_head.predictor,),
            "mask25d_head": (self.mask25d_head.predictor,),
            "point_head": (self.point_head.predictor,),
            "maskiou_head": (self.maskiou_head.predictor,),
        }
        for k, name in enumerate(HEADS):
            gen = torch.Generator().manual_seed(self.seed * 1009 + k)
            _init_module(getattr(self, name), gen, finals[name])
        self.to(dtype)

    @property
    def dtype(self):
        return self.backbone.body[0].weight.dtype

    def config(self):
        return {
            "num_categories": self.num_categories,
            "channels": self.channels,
            "grid_size": self.grid_size,
            "seed": self.seed,
            "standardize_disparity": self.standardize_disparity,
        }

    def check_category(self, category):
        c = torch.as_tensor(category, dtype=torch.long)
        if torch.any((c < 0) | (c >= self.num_categories)):
            raise ValueError(f"unknown category {category!r}; expected 0..{self.num_categories - 1}")
        return c.reshape(-1)

    # batched building blocks -------------------------------------------

    def features(self, images):
        return self.backbone(images)

    def roi_features(self, feature_map, boxes):
        return roi_crop(feature_map, boxes, self.grid_size, 1.0 / Backbone.stride)

    def mask2d_probs(self, feats, categories):
        cats = self.check_category(categories)
        logits = self.mask2d_head(feats)
        return torch.sigmoid(logits[torch.arange(len(cats)), cats])

    def mask25d_probs(self, grids, valid, categories):
        cats = self.check_category(categories)
        x = self.prepare_disparity(grids, valid)
        logits = self.mask25d_head(x[:, None])
        return torch.sigmoid(logits[torch.arange(len(cats)), cats])

    def prepare_disparity(self, grids, valid):
        """Per-ROI standardization over valid cells; invalid cells become 0."""
        valid = valid.to(grids.dtype)
        if not self.standardize_disparity:
            return grids * valid
        n = valid.sum(dim=(-2, -1), keepdim=True).clamp(min=1)
        mean = (grids * valid).sum(dim=(-2, -1), keepdim=True) / n
        var = (((grids - mean) * valid) ** 2).sum(dim=(-2, -1), keepdim=True) / n
        std = torch.sqrt(var + 1e-24).clamp(min=1e-6)
        return (grids - mean) / std * valid

    def point_probs(self, points, categories):
        """Per-point probabilities for ``points`` of shape (R, N, 3)."""
        cats = self.check_category(categories)
        if self.standardize_disparity:
            d = points[..., 2:]
            mean = d.mean(dim=1, keepdim=True)
            std = torch.sqrt(((d - mean) ** 2).mean(dim=1, keepdim=True) + 1e-24).clamp(min=1e-6)
            points = torch.cat([points[..., :2], (d - mean) / std], dim=-1)
        logits = self.point_head(points)
        return torch.sigmoid(logits[torch.arange(len(cats)), cats])

    def maskiou_scores(self, feats, masks, categories):
        cats = self.check_category(categories)
        out = self.maskiou_head(feats, masks)
        return torch.sigmoid(out[torch.arange(len(cats)), cats])

    def box_class(self, feats):
        return self.box_head(feats)


def reproject_torch(per_point, source_index, G):
    """Differentiable re-projection of (R, N) per-point values to (R, G, G).

    Cells hit by several points take their mean; empty cells copy the
    nearest occupied cell (see :func:`gaisnet.geometry.nearest_fill_index`).
    """
    R, N = per_point.shape
    idx = torch.as_tensor(source_index, dtype=torch.long).reshape(R, N)
    sums = per_point.new_zeros((R, G * G)).scatter_add(1, idx, per_point)
    counts = torch.zeros((R, G * G), dtype=per_point.dtype).scatter_add(
        1, idx, torch.ones_like(per_point))
    mean = sums / counts.clamp(min=1)
    occupied = (counts > 0).numpy().reshape(R, G, G)
    fill = np.stack([nearest_fill_index(o) for o in occupied])
    return torch.gather(mean, 1, torch.as_tensor(fill)).reshape(R, G, G)


# single-ROI operations ------------------------------------------------


def _check_box(box, shape):
    return box.clip(*shape)


def extract_roi_features(image, box, model):
    """``(C, G, G)`` features of one box; ``image`` is (H, W, 3) or a (3, H, W) tensor."""
    if not isinstance(image, torch.Tensor):
        image = image_to_tensor(image, model.dtype)
    box = _check_box(box, image.shape[-2:])
    fmap = model.features(image[None])[0]
    return model.roi_features(fmap, box.as_array()[None])[0]


def predict_mask_2d(feat, category, model):
    return model.mask2d_probs(feat[None], [category])[0]


def predict_mask_25d(patch, category, model):
    if isinstance(patch, torch.Tensor):
        grid, valid = patch, torch.ones_like(patch, dtype=torch.bool)
    else:
        grid = torch.as_tensor(patch.grid, dtype=model.dtype)
        valid = torch.as_tensor(patch.valid)
    return model.mask25d_probs(grid[None], valid[None], [category])[0]


def predict_mask_3d(ps, category, model, n_points=None, points=None):
    """Per-point probabilities and their re-projected ``G x G`` mask.

    ``points`` may override ``ps.points`` with a tensor (for gradients).
    """
    if n_points is not None and len(ps) != n_points:
        raise ValueError(f"expected {n_points} points, got {len(ps)}")
    if points is None:
        points = torch.as_tensor(ps.points, dtype=model.dtype)
    probs = model.point_probs(points[None], [category])[0]
    mask = reproject_torch(probs[None], ps.source_index[None], ps.grid_size)[0]
    return probs, mask


def predict_maskiou(feat, mask, category, model):
    mask = torch.as_tensor(mask, dtype=feat.dtype)
    if mask.shape != feat.shape[-2:]:
        raise ValueError(f"mask must be {tuple(feat.shape[-2:])}, got {tuple(mask.shape)}")
    return model.maskiou_scores(feat[None], mask[None], [category])[0]


def predict_box_class(feat, model):
    logits, deltas = model.box_class(feat[None])
    return logits[0], deltas[0]


# checkpoints ------------------------------------------------------------


def save_params(model, path, extra=None):
    """Write an ``.npz`` checkpoint: one array per named parameter plus a JSON header.

    The ``__meta__`` entry holds ``{"version", "config", "dtype", "shapes",
    "extra"}``; ``config`` includes the initialization seed.
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config(),
        "dtype": str(model.dtype).replace("torch.", ""),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "extra": extra or {},
    }
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=header, **arrays)


def load_checkpoint(path):
    """Return ``(model, meta)`` from a file written by :func:`save_params`."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    with data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        model = GAISNet(dtype=getattr(torch, meta["dtype"]), **meta["config"])
        state = {}
        for k, shape in meta["shapes"].items():
            arr = data[k]
            if list(arr.shape) != shape:
                raise ValueError(f"checkpoint entry {k!r} has shape {arr.shape}, expected {shape}")
            state[k] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, meta


def load_params(path):
    return load_checkpoint(path)[0]
