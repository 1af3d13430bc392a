"""Training objectives.

All functions take torch tensors (numpy arrays are converted) and accept a
single ``G x G`` mask or a batch ``(N, G, G)``; batched results are averaged
over the batch.
"""
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .fusion import binarize

EPS = 1e-7
TERMS = ("box", "cls", "2dmask", "25dmask", "3dmask", "cont", "corr", "miou")


@dataclass
class LossWeights:
    """Per-term weights of the total loss.

    ``w_cont`` defaults to 0.01 because the continuity term is a sum over all
    grid cells; at weight 1 it dominates and flattens the 3D mask to a constant.
    """

    w_box: float = 1.0
    w_cls: float = 1.0
    w_2dmask: float = 1.0
    w_25dmask: float = 1.0
    w_3dmask: float = 1.0
    w_cont: float = 0.01
    w_corr: float = 1.0
    w_miou: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not v >= 0:
                raise ValueError(f"{f.name} must be non-negative, got {v}")
            setattr(self, f.name, v)

    def weight(self, term):
        return getattr(self, "w_" + term)


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)
    total: float = 0.0
    step: int = 0
    epoch: int = 0

    def to_json(self):
        return json.dumps({"step": self.step, "epoch": self.epoch, "total": self.total, **self.terms},
                          sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        step, epoch, total = d.pop("step"), d.pop("epoch"), d.pop("total")
        return cls(terms=d, total=total, step=step, epoch=epoch)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _cross_entropy(target, prob):
    prob = prob.clamp(EPS, 1 - EPS)
    return -(target * torch.log(prob) + (1 - target) * torch.log1p(-prob))


def mask_bce(pred, gt):
    """Mean binary cross-entropy between probabilities and a binary target."""
    pred, gt = _as_tensor(pred), _as_tensor(gt).to(_as_tensor(pred).dtype)
    _check_shapes(pred, gt)
    return _cross_entropy(gt, pred).mean()


def laplacian(M):
    """5-point stencil response with replicate padding; same shape as ``M``."""
    M = _as_tensor(M)
    batch_shape = M.shape[:-2]
    x = M.reshape(-1, 1, *M.shape[-2:])
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    lap = p[..., 2:, 1:-1] + p[..., :-2, 1:-1] + p[..., 1:-1, 2:] + p[..., 1:-1, :-2] - 4 * x
    return lap.reshape(*batch_shape, *M.shape[-2:])


def continuity_loss(M):
    """Sum of squared mask-Laplacian responses (mean over a batch)."""
    lap = laplacian(M)
    energy = (lap ** 2).sum(dim=(-2, -1))
    return energy.mean() if energy.ndim else energy


def correspondence_loss(m3, m25):
    """Symmetrized per-cell cross-entropy between the 3D and 2.5D masks."""
    m3, m25 = _as_tensor(m3), _as_tensor(m25)
    _check_shapes(m3, m25)
    m3c, m25c = m3.clamp(EPS, 1 - EPS), m25.clamp(EPS, 1 - EPS)
    return 0.5 * (_cross_entropy(m3c, m25c) + _cross_entropy(m25c, m3c)).mean()


def maskiou_targets(pred_mask, gt):
    """IoU of the binarized prediction with its ground truth, per mask."""
    pm = np.asarray(_as_tensor(pred_mask).detach().cpu(), dtype=np.float64)
    g = np.asarray(_as_tensor(gt).detach().cpu()) > 0.5
    if pm.shape != g.shape:
        raise ValueError(f"shape mismatch: {pm.shape} vs {g.shape}")
    if pm.ndim == 2:
        return np.array(evaluation.mask_iou(binarize(pm), g))
    return np.array([evaluation.mask_iou(binarize(a), b) for a, b in zip(pm, g)])


def maskiou_loss(predicted, pred_mask, gt):
    """Squared error between the regressed score and the actual mask IoU."""
    predicted = _as_tensor(predicted)
    target = torch.as_tensor(maskiou_targets(pred_mask, gt), dtype=predicted.dtype)
    return ((predicted - target.reshape(predicted.shape)) ** 2).mean()


def smooth_l1(x, beta=1.0 / 9):
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def detection_losses(logits, deltas, labels, target_deltas):
    """Softmax cross-entropy and smooth-L1 box loss.

    ``labels`` holds 0 for background and ``1..K`` for categories;
    ``deltas`` has ``4K`` columns. Only the ground-truth category's deltas of
    foreground proposals are penalized; the box loss is normalized by the
    total number of proposals.
    """
    logits, deltas = _as_tensor(logits), _as_tensor(deltas)
    if logits.ndim == 1:
        logits, deltas = logits[None], deltas[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    target_deltas = _as_tensor(target_deltas).to(deltas.dtype).reshape(-1, 4)
    l_cls = F.cross_entropy(logits, labels)
    fg = torch.nonzero(labels > 0).flatten()
    if fg.numel() == 0:
        return l_cls, deltas.sum() * 0.0
    per_cat = deltas.reshape(deltas.shape[0], -1, 4)
    chosen = per_cat[fg, labels[fg] - 1]
    l_box = smooth_l1(chosen - target_deltas[fg]).sum() / labels.numel()
    return l_cls, l_box


def total_loss(terms, weights):
    """Weighted sum of the available terms; raises on a non-finite term."""
    total = 0.0
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name!r} is not finite ({v})")
        total = total + weights.weight(name) * value
    return total


def weights_from_dict(d):
    base = asdict(LossWeights())
    unknown = set(d) - set(base)
    if unknown:
        raise ValueError(f"unknown loss weights: {sorted(unknown)}")
    base.update(d)
    return LossWeights(**base)
