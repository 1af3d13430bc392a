"""Synthetic stereo scenes with exact disparity, proposals, and dataset files.

Scenes contain three shape families standing in for the road classes
(ellipse for humans, thin tilted bar for bicycles/motorcycles, body-plus-cabin
silhouette for vehicles). Instances of one category share a base color, so
two overlapping same-category objects are hard to separate from color alone
while their disparities differ.
"""
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .evaluation import box_iou
from .geometry import DisparityMap, RoiBox, StereoRig, depth_to_disparity

FORMAT_VERSION = 1
DISPARITY_SCALE = 256
CATEGORIES = ("human", "bicycle", "vehicle")

# physical (width, height) in meters
_SIZES = {"human": (0.9, 1.9), "bicycle": (1.9, 0.45), "vehicle": (3.8, 1.7)}
_COLORS = {"human": (196, 120, 92), "bicycle": (92, 168, 96), "vehicle": (84, 112, 196)}
_MIN_VISIBLE = 24


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 256
    min_instances: int = 2
    max_instances: int = 6
    depth_range: tuple = (7.0, 36.0)
    background_depth: float = 120.0
    overlap_prob: float = 0.5
    categories: tuple = CATEGORIES
    # long-range reference rig (f = 3300 px at 3072 px width, b = 0.5 m) scaled to the image width
    focal_length_px: float = 3300.0 * 256 / 3072
    baseline_m: float = 0.5
    noise_std: float = 6.0

    def __post_init__(self):
        if not self.categories:
            raise ValueError("at least one category is required")
        unknown = set(self.categories) - set(_SIZES)
        if unknown:
            raise ValueError(f"unknown categories {sorted(unknown)}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth_range must satisfy 0 < lo < hi")
        if hi * 1.2 > self.background_depth:
            raise ValueError("background must lie beyond every object")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError("overlap_prob must lie in [0, 1]")

    @property
    def rig(self):
        return StereoRig(self.focal_length_px, self.baseline_m)


@dataclass
class Instance:
    category: int
    box: RoiBox
    depth_m: float


@dataclass
class SceneRecord:
    image: np.ndarray
    disparity: DisparityMap
    instance_map: np.ndarray
    instances: list
    rig: StereoRig
    scene_id: int = 0
    categories: tuple = CATEGORIES

    @property
    def shape(self):
        return self.instance_map.shape

    def instance_mask(self, inst_id):
        return self.instance_map == inst_id


@dataclass
class Proposal:
    box: RoiBox
    matched_gt: int = None
    label: int = 0  # 0 = background, k + 1 = category k

    @property
    def is_foreground(self):
        return self.label > 0


@dataclass
class _Placement:
    category: int
    cx: float
    cy: float
    w: float
    h: float
    depth: float
    angle: float
    color: tuple
    phase: float
    forced: bool = False

    def nominal_box(self):
        return np.array([self.cx - self.w / 2, self.cy - self.h / 2,
                         self.cx + self.w / 2, self.cy + self.h / 2])


def _shape_mask(p, name, xs, ys):
    dx, dy = xs - p.cx, ys - p.cy
    if name == "human":
        return (dx / (p.w / 2)) ** 2 + (dy / (p.h / 2)) ** 2 <= 1.0
    if name == "bicycle":
        c, s = np.cos(p.angle), np.sin(p.angle)
        along, across = dx * c + dy * s, -dx * s + dy * c
        return (np.abs(along) <= p.w / 2) & (np.abs(across) <= p.h / 2)
    # vehicle: full-width body over the lower 60 %, narrower cabin above
    body = (np.abs(dx) <= p.w / 2) & (dy >= -0.1 * p.h) & (dy <= p.h / 2)
    cabin = (np.abs(dx) <= 0.3 * p.w) & (dy >= -p.h / 2) & (dy < -0.1 * p.h)
    return body | cabin


def _make_placement(rng, cfg, category, depth, center=None):
    name = cfg.categories[category]
    sw, sh = _SIZES[name]
    scale = rng.uniform(0.85, 1.15)
    f = cfg.focal_length_px
    w, h = f * sw * scale / depth, f * sh * scale / depth
    if center is None:
        center = (rng.uniform(w / 2, cfg.width - w / 2), rng.uniform(h / 2, cfg.height - h / 2))
    base = np.array(_COLORS[name], dtype=np.float64)
    color = tuple(np.clip(base + rng.uniform(-12, 12, size=3), 0, 255))
    angle = rng.uniform(-0.35, 0.35) if name == "bicycle" else 0.0
    if name == "bicycle":
        # bounding extent of the tilted bar
        c, s = abs(np.cos(angle)), abs(np.sin(angle))
        w, h = w * c + h * s, w * s + h * c
    return _Placement(category, float(center[0]), float(center[1]), w, h, float(depth),
                      angle, color, rng.uniform(0, 2 * np.pi))


def _render(cfg, placements, rng):
    H, W = cfg.height, cfg.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    # low-frequency background texture plus pixel noise
    bg = 110.0 + 18.0 * np.sin(xs / rng.uniform(9, 17) + rng.uniform(0, 6)) * np.cos(
        ys / rng.uniform(7, 13) + rng.uniform(0, 6))
    image = np.repeat(bg[..., None], 3, axis=2) + rng.uniform(-10, 10, size=3)
    depth = np.full((H, W), cfg.background_depth)
    inst = np.zeros((H, W), dtype=np.int64)
    order = sorted(range(len(placements)), key=lambda i: -placements[i].depth)
    for i in order:
        p = placements[i]
        m = _shape_mask(p, cfg.categories[p.category], xs, ys) & (p.depth < depth)
        stripes = 10.0 * np.sin((xs + ys) / 3.0 + p.phase)
        image[m] = np.array(p.color) + stripes[m, None]
        depth[m] = p.depth
        inst[m] = i + 1
    image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8), depth, inst


def _tight_box(mask):
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    return RoiBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def _place(rng, cfg, n, force):
    lo, hi = cfg.depth_range
    K = len(cfg.categories)
    placements = []
    if force:
        cat = int(rng.integers(K))
        z1 = rng.uniform(lo, hi / 1.25)
        z2 = min(z1 * rng.uniform(1.25, 1.6), hi)
        a = _make_placement(rng, cfg, cat, z1)
        off = rng.uniform(-0.4, 0.4, size=2) * np.array([a.w, a.h])
        b = _make_placement(rng, cfg, cat, z2, center=(a.cx + off[0], a.cy + off[1]))
        a.forced = b.forced = True
        placements += [a, b]
    for _ in range(n - len(placements)):
        for _try in range(30):
            p = _make_placement(rng, cfg, int(rng.integers(K)), rng.uniform(lo, hi))
            if not placements:
                placements.append(p)
                break
            ious = box_iou(p.nominal_box(), [q.nominal_box() for q in placements])
            if ious.max() < 0.05:
                placements.append(p)
                break
    return placements


def generate_scene(config=None, seed=0, scene_id=0):
    """Render one scene; identical ``(config, seed)`` gives identical output."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    rig = cfg.rig
    force = rng.random() < cfg.overlap_prob
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    for _attempt in range(200):
        placements = _place(rng, cfg, n, force)
        image, depth, inst = _render(cfg, placements, rng)
        keep = list(range(len(placements)))
        if len(keep) < cfg.min_instances or any(
                np.count_nonzero(inst == i + 1) < _MIN_VISIBLE for i in keep):
            continue
        boxes = {i: _tight_box(inst == i + 1) for i in keep}
        forced = [i for i in keep if placements[i].forced]
        ok = True
        for a in range(len(keep)):
            for b in range(a + 1, len(keep)):
                i, j = keep[a], keep[b]
                iou = box_iou(boxes[i].as_array(), boxes[j].as_array())[0, 0]
                pair_forced = i in forced and j in forced
                if pair_forced:
                    ratio = max(placements[i].depth, placements[j].depth) / min(
                        placements[i].depth, placements[j].depth)
                    ok &= iou >= 0.3 and ratio >= 1.2
                else:
                    ok &= iou < 0.3
        if not ok:
            continue
        break
    else:
        raise RuntimeError(f"could not generate a valid scene for seed {seed}")

    # ids follow placement order, so they are contiguous from 1
    instances = [Instance(placements[i].category, boxes[i], placements[i].depth) for i in keep]
    disparity = DisparityMap(depth_to_disparity(depth, rig), np.ones_like(inst, dtype=bool))
    return SceneRecord(image=image, disparity=disparity, instance_map=inst.astype(np.uint8),
                       instances=instances, rig=rig, scene_id=scene_id,
                       categories=tuple(cfg.categories))


def generate_dataset(n, config=None, seed=0, start_id=0):
    """``n`` scenes; scene ``i`` uses the seed sequence ``(seed, i)``."""
    scenes = []
    for i in range(n):
        ss = np.random.SeedSequence([seed, start_id + i])
        scenes.append(generate_scene(config, seed=ss, scene_id=start_id + i))
    return scenes


def _jitter_box(rng, box, jitter, H, W):
    w, h = box.width, box.height
    d = rng.uniform(-jitter, jitter, size=4) * np.array([w, h, w, h])
    x0, y0, x1, y1 = box.as_array() + d
    return RoiBox(min(max(x0, 0.0), W), min(max(y0, 0.0), H), min(max(x1, 0.0), W), min(max(y1, 0.0), H))


def make_proposals(scene, seed=0, jitter=0.15, negatives_per_image=4, per_instance=3):
    """Region proposals standing in for an RPN.

    Each instance gets ``per_instance`` jittered copies of its box (resampled
    until IoU >= 0.5, falling back to the exact box after 100 tries). Then up
    to ``negatives_per_image`` random boxes with IoU < 0.3 to every instance
    are added as background.
    """
    rng = np.random.default_rng(seed)
    H, W = scene.shape
    gt = np.array([inst.box.as_array() for inst in scene.instances]).reshape(-1, 4)
    out = []
    for k, inst in enumerate(scene.instances):
        for _ in range(per_instance):
            box = inst.box
            if jitter > 0:
                for _try in range(100):
                    cand = _jitter_box(rng, inst.box, jitter, H, W)
                    if cand.width > 1 and cand.height > 1 and \
                            box_iou(cand.as_array(), inst.box.as_array())[0, 0] >= 0.5:
                        box = cand
                        break
            out.append(Proposal(box=box, matched_gt=k + 1, label=inst.category + 1))
    if len(gt):
        sizes = np.stack([gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]], axis=1)
    else:
        sizes = np.array([[W / 8, H / 4]])
    for _ in range(negatives_per_image):
        for _try in range(100):
            w, h = sizes[rng.integers(len(sizes))] * rng.uniform(0.6, 1.4, size=2)
            w, h = min(max(w, 4.0), W), min(max(h, 4.0), H)
            x0, y0 = rng.uniform(0, W - w), rng.uniform(0, H - h)
            cand = RoiBox(x0, y0, x0 + w, y0 + h)
            if not len(gt) or box_iou(cand.as_array(), gt).max() < 0.3:
                out.append(Proposal(box=cand))
                break
    return out


# dataset files ----------------------------------------------------------


def _scene_key(scene_id):
    return f"{scene_id:04d}"


def encode_disparity(values, valid):
    q = np.round(np.asarray(values, dtype=np.float64) * DISPARITY_SCALE)
    q = np.where(valid, np.clip(q, 1, 65535), 0)
    return q.astype(np.uint16)


def decode_disparity(q):
    q = np.asarray(q, dtype=np.uint16)
    return DisparityMap(q.astype(np.float64) / DISPARITY_SCALE, q > 0)


def write_dataset(scenes, directory):
    """Write scenes as PNG images plus JSON metadata and a manifest."""
    os.makedirs(directory, exist_ok=True)
    rig = scenes[0].rig if scenes else None
    manifest = {
        "format_version": FORMAT_VERSION,
        "categories": list(scenes[0].categories if scenes else CATEGORIES),
        "rig": None if rig is None else {"focal_length_px": rig.focal_length_px,
                                         "baseline_m": rig.baseline_m},
        "image_size": None if not scenes else list(scenes[0].shape),
        "disparity_scale": DISPARITY_SCALE,
        "scenes": [],
    }
    for s in scenes:
        key = _scene_key(s.scene_id)
        prefix = os.path.join(directory, key)
        Image.fromarray(s.image).save(prefix + "_rgb.png")
        Image.fromarray(encode_disparity(s.disparity.values, s.disparity.valid)).save(prefix + "_disp.png")
        Image.fromarray(s.instance_map.astype(np.uint8)).save(prefix + "_inst.png")
        meta = {
            "scene_id": s.scene_id,
            "rig": {"focal_length_px": s.rig.focal_length_px, "baseline_m": s.rig.baseline_m},
            "instances": [
                {"id": i + 1, "category": inst.category,
                 "category_name": s.categories[inst.category],
                 "box": [float(v) for v in inst.box.as_array()], "depth_m": inst.depth_m}
                for i, inst in enumerate(s.instances)
            ],
        }
        with open(prefix + "_meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        manifest["scenes"].append(key)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_dataset(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read dataset manifest {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')!r}")
    categories = tuple(manifest["categories"])
    scenes = []
    for key in manifest["scenes"]:
        prefix = os.path.join(directory, key)
        try:
            with open(prefix + "_meta.json") as fh:
                meta = json.load(fh)
            image = np.array(Image.open(prefix + "_rgb.png").convert("RGB"))
            disp = np.array(Image.open(prefix + "_disp.png")).astype(np.uint16)
            inst = np.array(Image.open(prefix + "_inst.png")).astype(np.uint8)
            instances = [Instance(d["category"], RoiBox(*d["box"]), d["depth_m"])
                         for d in meta["instances"]]
            rig = StereoRig(**meta["rig"])
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"scene {key}: corrupt or missing files ({exc})") from exc
        if image.shape[:2] != disp.shape or disp.shape != inst.shape:
            raise ValueError(f"scene {key}: image, disparity and instance sizes differ")
        scenes.append(SceneRecord(image=image, disparity=decode_disparity(disp), instance_map=inst,
                                  instances=instances, rig=rig, scene_id=meta["scene_id"],
                                  categories=categories))
    return scenes
