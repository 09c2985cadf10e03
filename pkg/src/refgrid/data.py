"""Deterministic synthetic grounding corpus: scenes, expressions, priors.

A scene is 2-6 colored shapes on a dark canvas; its referring expression is
drawn from four template classes:

* category    "the circle"                      (shape unique in scene)
* attribute   "the red circle"                  (color needed; shape is not unique)
* location    "the circle on the left"          (absolute half-plane of the canvas)
* relational  "the circle left of the blue square"

Every emitted scene is checked by an independent predicate evaluator that
parses the expression string and confirms exactly one object satisfies it.
Scenes are built by rejection sampling from a per-scene seeded generator, so
regeneration is bitwise reproducible and splits (disjoint index ranges) never
share a scene.

Relational scenes place the anchor far from the referent (beyond any single
conv cell's receptive field) and add a same-shape distractor on the wrong
side, so the relation itself is the only reliable cue.  Attribute scenes are
crowded with small shapes so neighboring objects fall into the same coarse
grid cell; the finer feature scales keep them apart.
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .text import Vocabulary

SHAPES = ("circle", "square", "triangle")
COLOR_RGB = {
    "red": (225, 55, 50),
    "green": (60, 190, 80),
    "blue": (55, 105, 235),
    "yellow": (235, 215, 70),
    "purple": (160, 70, 210),
}
COLORS = tuple(COLOR_RGB)
BACKGROUND = (30, 30, 36)
SIZE_RADIUS = {"small": 7.0, "large": 12.0}
SIZE_JITTER = 0.15

REGIONS = ("left", "right", "top", "bottom")
RELATIONS = ("left of", "right of", "above", "below")
TEMPLATE_CLASSES = ("category", "attribute", "location", "relational")

CANONICAL_TOKENS = (
    "the", "on", "of", "above", "below", "left", "right", "top", "bottom",
) + SHAPES + COLORS

MAX_SCENE_ATTEMPTS = 1000
MAX_BBOX_IOU = 0.2
REGION_MARGIN = 6.0       # px clearance from the canvas midlines
RELATION_MIN_SEP = 40.0   # px center separation along the relation axis
RELATION_FAIL_MARGIN = 8.0


class GenerationError(RuntimeError):
    """Rejection sampling could not satisfy the scene constraints."""


def build_vocabulary():
    return Vocabulary(CANONICAL_TOKENS)


# ---------------------------------------------------------------------------
# scene geometry

@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    cx: float
    cy: float
    half_w: float
    half_h: float

    def bbox(self):
        """Tight pixel-space box (x, y, w, h), top-left corner."""
        return (self.cx - self.half_w, self.cy - self.half_h,
                2 * self.half_w, 2 * self.half_h)

    def contains(self, px, py):
        """Pixel-center membership test; vectorized over coordinate arrays."""
        dx, dy = px - self.cx, py - self.cy
        if self.shape == "circle":
            return dx * dx + dy * dy <= self.half_w * self.half_w
        if self.shape == "square":
            return (np.abs(dx) <= self.half_w) & (np.abs(dy) <= self.half_h)
        # triangle: apex at the top center, base at the bottom
        t = (py - (self.cy - self.half_h)) / (2 * self.half_h)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= self.half_w * t)


def _half_extents(shape, radius):
    if shape == "circle":
        return radius, radius
    if shape == "square":
        return 0.9 * radius, 0.9 * radius
    return 1.1 * radius, 0.85 * radius  # triangle: wider than tall


@dataclass
class Scene:
    index: int
    size: int
    objects: list
    referent: int
    template: str
    expression: str
    split: str = ""
    scene_id: str = ""
    extra: dict = field(default_factory=dict)

    def gt_box(self):
        """Referent box normalized to [0, 1], top-left (x, y, w, h)."""
        x, y, w, h = self.objects[self.referent].bbox()
        s = float(self.size)
        return np.array([x / s, y / s, w / s, h / s])


def bbox_iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def render(scene):
    """Anti-aliasing-free rasterization: a pixel belongs to a shape iff its
    center does.  Objects draw in list order.  Returns uint8 (H, W, 3)."""
    s = scene.size
    img = np.empty((s, s, 3), dtype=np.uint8)
    img[..., 0], img[..., 1], img[..., 2] = BACKGROUND
    ys, xs = np.mgrid[0:s, 0:s]
    px, py = xs + 0.5, ys + 0.5
    for obj in scene.objects:
        mask = obj.contains(px, py)
        img[mask] = COLOR_RGB[obj.color]
    return img


def image_to_array(img_u8):
    """uint8 (H, W, 3) -> float32 in [0, 1]."""
    return np.asarray(img_u8, dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# independent expression checker

def _in_region(obj, region, size):
    half = size / 2.0
    if region == "left":
        return obj.cx < half
    if region == "right":
        return obj.cx > half
    if region == "top":
        return obj.cy < half
    if region == "bottom":
        return obj.cy > half
    raise ValueError(f"unknown region {region!r}")


def _relation_holds(obj, anchor, rel):
    if rel == "left":
        return obj.cx < anchor.cx
    if rel == "right":
        return obj.cx > anchor.cx
    if rel == "above":
        return obj.cy < anchor.cy
    if rel == "below":
        return obj.cy > anchor.cy
    raise ValueError(f"unknown relation {rel!r}")


def matching_objects(scene, expression):
    """Parse an expression string and return the objects satisfying it.

    This evaluator is independent of the generator's bookkeeping: it works
    purely from the expression text and scene geometry, and is used to verify
    that every emitted expression identifies exactly one object.
    """
    toks = expression.lower().split()
    if not toks or toks[0] != "the":
        raise ValueError(f"cannot parse expression {expression!r}")
    i = 1
    color = None
    if toks[i] in COLOR_RGB:
        color = toks[i]
        i += 1
    shape = toks[i]
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r} in {expression!r}")
    i += 1
    cands = [o for o in scene.objects
             if o.shape == shape and (color is None or o.color == color)]
    if i == len(toks):
        return cands

    if toks[i] == "on":  # "on the <region>"
        region = toks[i + 2]
        return [o for o in cands if _in_region(o, region, scene.size)]

    rel = toks[i]
    i += 2 if rel in ("left", "right") else 1  # skip "of" for left/right
    if toks[i] != "the":
        raise ValueError(f"cannot parse expression {expression!r}")
    i += 1
    anchor_color = None
    if toks[i] in COLOR_RGB:
        anchor_color = toks[i]
        i += 1
    anchor_shape = toks[i]
    anchors = [o for o in scene.objects
               if o.shape == anchor_shape
               and (anchor_color is None or o.color == anchor_color)]
    if len(anchors) != 1:
        return []
    anchor = anchors[0]
    return [o for o in cands
            if o is not anchor and _relation_holds(o, anchor, rel)]


# ---------------------------------------------------------------------------
# scene construction

def _sample_radius(rng, size_name):
    base = SIZE_RADIUS[size_name]
    return base * rng.uniform(1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER)


def _place(rng, placed, shape, color, size_name, canvas,
           x_range=None, y_range=None, tries=60):
    """Sample a non-overlapping position inside optional center ranges."""
    hw, hh = _half_extents(shape, _sample_radius(rng, size_name))
    lo_x, hi_x = hw + 2.0, canvas - hw - 2.0
    lo_y, hi_y = hh + 2.0, canvas - hh - 2.0
    if x_range is not None:
        lo_x, hi_x = max(lo_x, x_range[0]), min(hi_x, x_range[1])
    if y_range is not None:
        lo_y, hi_y = max(lo_y, y_range[0]), min(hi_y, y_range[1])
    if lo_x > hi_x or lo_y > hi_y:
        return None
    for _ in range(tries):
        cx = rng.uniform(lo_x, hi_x)
        cy = rng.uniform(lo_y, hi_y)
        obj = SceneObject(shape, color, size_name, cx, cy, hw, hh)
        if all(bbox_iou(obj.bbox(), p.bbox()) <= MAX_BBOX_IOU for p in placed):
            return obj
    return None


def _other_shape(rng, exclude):
    options = [s for s in SHAPES if s not in exclude]
    return options[rng.integers(len(options))]


def _rand(rng, seq):
    return seq[rng.integers(len(seq))]


def _build_category(rng, cfg, canvas):
    n = max(int(rng.integers(cfg.min_objects, cfg.max_objects + 1)), 2)
    shape = _rand(rng, SHAPES)
    ref = _place(rng, [], shape, _rand(rng, COLORS), _rand(rng, ("small", "large")), canvas)
    if ref is None:
        return None
    objs = [ref]
    for _ in range(n - 1):
        o = _place(rng, objs, _other_shape(rng, {shape}), _rand(rng, COLORS),
                   _rand(rng, ("small", "large")), canvas)
        if o is None:
            return None
        objs.append(o)
    return objs, 0, f"the {shape}"


def _build_attribute(rng, cfg, canvas):
    # crowded small shapes; a same-shape different-color distractor sits close
    # to the referent so coarse grid cells mix the two
    n = max(int(rng.integers(cfg.min_objects, cfg.max_objects + 1)), 4)
    shape = _rand(rng, SHAPES)
    color = _rand(rng, COLORS)
    ref = _place(rng, [], shape, color, "small", canvas)
    if ref is None:
        return None
    objs = [ref]
    other_color = _rand(rng, [c for c in COLORS if c != color])
    near = rng.uniform(16.0, 26.0)
    ang = rng.uniform(0, 2 * np.pi)
    dist = _place(rng, objs, shape, other_color, "small", canvas,
                  x_range=(ref.cx + near * np.cos(ang) - 2,
                           ref.cx + near * np.cos(ang) + 2),
                  y_range=(ref.cy + near * np.sin(ang) - 2,
                           ref.cy + near * np.sin(ang) + 2))
    if dist is None:
        dist = _place(rng, objs, shape, other_color, "small", canvas)
    if dist is None:
        return None
    objs.append(dist)
    for _ in range(n - 2):
        o_shape = _rand(rng, SHAPES)
        o_color = _rand(rng, [c for c in COLORS
                              if not (o_shape == shape and c == color)])
        o = _place(rng, objs, o_shape, o_color, "small", canvas)
        if o is None:
            return None
        objs.append(o)
    return objs, 0, f"the {color} {shape}"


def _region_ranges(region, canvas, for_referent):
    half = canvas / 2.0
    m = REGION_MARGIN
    inside = {
        "left": ((None, half - m), None),
        "right": ((half + m, None), None),
        "top": (None, (None, half - m)),
        "bottom": (None, (half + m, None)),
    }
    outside = {
        "left": ((half + m, None), None),
        "right": ((None, half - m), None),
        "top": (None, (half + m, None)),
        "bottom": (None, (None, half - m)),
    }
    xr, yr = (inside if for_referent else outside)[region]

    def fill(rng_pair):
        if rng_pair is None:
            return None
        lo, hi = rng_pair
        return (0.0 if lo is None else lo, canvas if hi is None else hi)

    return fill(xr), fill(yr)


def _build_location(rng, cfg, canvas):
    n = max(int(rng.integers(cfg.min_objects, cfg.max_objects + 1)), 2)
    shape = _rand(rng, SHAPES)
    region = _rand(rng, REGIONS)
    xr, yr = _region_ranges(region, canvas, True)
    ref = _place(rng, [], shape, _rand(rng, COLORS),
                 _rand(rng, ("small", "large")), canvas, xr, yr)
    if ref is None:
        return None
    objs = [ref]
    xr, yr = _region_ranges(region, canvas, False)
    dist = _place(rng, objs, shape, _rand(rng, COLORS),
                  _rand(rng, ("small", "large")), canvas, xr, yr)
    if dist is None:
        return None
    objs.append(dist)
    for _ in range(n - 2):
        o = _place(rng, objs, _other_shape(rng, {shape}), _rand(rng, COLORS),
                   _rand(rng, ("small", "large")), canvas)
        if o is None:
            return None
        objs.append(o)
    return objs, 0, f"the {shape} on the {region}"


def _build_relational(rng, cfg, canvas):
    need = 3 if cfg.relational_distractor else 2
    n = max(int(rng.integers(cfg.min_objects, cfg.max_objects + 1)), need)
    shape = _rand(rng, SHAPES)
    rel = _rand(rng, RELATIONS)
    anchor_shape = _rand(rng, SHAPES)
    anchor_color = _rand(rng, COLORS)

    # the anchor leaves `sep` of room on the satisfying side and enough space
    # on the opposite side for the wrong-side distractor
    sep = RELATION_MIN_SEP
    if rel in ("left of", "above"):
        arange = (sep + 18.0, canvas - 30.0)
    else:
        arange = (30.0, canvas - sep - 18.0)
    x_band, y_band = (arange, None) if rel in ("left of", "right of") else (None, arange)
    anchor = _place(rng, [], anchor_shape, anchor_color,
                    _rand(rng, ("small", "large")), canvas, x_band, y_band)
    if anchor is None:
        return None
    objs = [anchor]

    def side_ranges(satisfy):
        # center ranges putting an object on the correct / wrong side
        if rel == "left of":
            return ((None, anchor.cx - sep) if satisfy
                    else (anchor.cx + RELATION_FAIL_MARGIN, None)), None
        if rel == "right of":
            return ((anchor.cx + sep, None) if satisfy
                    else (None, anchor.cx - RELATION_FAIL_MARGIN)), None
        if rel == "above":
            return None, ((None, anchor.cy - sep) if satisfy
                          else (anchor.cy + RELATION_FAIL_MARGIN, None))
        return None, ((anchor.cy + sep, None) if satisfy
                      else (None, anchor.cy - RELATION_FAIL_MARGIN))

    def fill(pair):
        if pair is None:
            return None
        lo, hi = pair
        return (0.0 if lo is None else lo, canvas if hi is None else hi)

    xr, yr = side_ranges(True)
    ref = _place(rng, objs, shape, _rand(rng, COLORS),
                 _rand(rng, ("small", "large")), canvas, fill(xr), fill(yr))
    if ref is None:
        return None
    objs.append(ref)

    if cfg.relational_distractor:
        xr, yr = side_ranges(False)
        dist = _place(rng, objs, shape, _rand(rng, COLORS),
                      _rand(rng, ("small", "large")), canvas, fill(xr), fill(yr))
        if dist is None:
            return None
        objs.append(dist)

    for _ in range(n - len(objs)):
        o_shape = _other_shape(rng, {shape})
        o_color = _rand(rng, [c for c in COLORS
                              if not (o_shape == anchor_shape and c == anchor_color)])
        o = _place(rng, objs, o_shape, o_color, _rand(rng, ("small", "large")), canvas)
        if o is None:
            return None
        objs.append(o)
    expr = f"the {shape} {rel} the {anchor_color} {anchor_shape}"
    return objs, 1, expr  # referent was appended right after the anchor


_BUILDERS = {
    "category": _build_category,
    "attribute": _build_attribute,
    "location": _build_location,
    "relational": _build_relational,
}


def generate_scene(seed, index, cfg, template=None):
    """Build one verified scene, deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    if template is None:
        mix = cfg.mix_fractions()
        probs = np.array([mix[c] for c in TEMPLATE_CLASSES])
        template = TEMPLATE_CLASSES[rng.choice(len(probs), p=probs / probs.sum())]
    builder = _BUILDERS[template]
    for _ in range(MAX_SCENE_ATTEMPTS):
        built = builder(rng, cfg, float(cfg.image_size))
        if built is None:
            continue
        objs, ref_idx, expr = built
        order = rng.permutation(len(objs))
        objs = [objs[i] for i in order]
        ref_idx = int(np.flatnonzero(order == ref_idx)[0])
        scene = Scene(index, cfg.image_size, objs, ref_idx, template, expr)
        matches = matching_objects(scene, expr)
        if len(matches) == 1 and matches[0] is scene.objects[ref_idx]:
            return scene
    raise GenerationError(
        f"no valid scene for template {template!r} after {MAX_SCENE_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# dataset generation and loading

MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.jsonl"
VOCAB_NAME = "vocab.txt"
IMAGES_DIR = "images"
DATASET_VERSION = 1


def generate_dataset(cfg, data_dir):
    """Emit manifest, vocabulary, per-scene records, and PNG images.

    Returns a summary dict including the predicate-oracle pass count.
    """
    os.makedirs(os.path.join(data_dir, IMAGES_DIR), exist_ok=True)
    vocab = build_vocabulary()
    vocab.save(os.path.join(data_dir, VOCAB_NAME))

    splits = (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test))
    manifest = {
        "version": DATASET_VERSION,
        "seed": cfg.seed,
        "counts": {name: count for name, count in splits},
        "mix": cfg.mix_fractions(),
        "image_size": cfg.image_size,
        "object_count_range": [cfg.min_objects, cfg.max_objects],
        "relational_distractor": cfg.relational_distractor,
        "vocab": VOCAB_NAME,
        "records": RECORDS_NAME,
    }
    with open(os.path.join(data_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    verified = 0
    total = 0
    index = 0
    per_template = {c: 0 for c in TEMPLATE_CLASSES}
    with open(os.path.join(data_dir, RECORDS_NAME), "w", encoding="utf-8") as rec:
        for split, count in splits:
            for _ in range(count):
                scene = generate_scene(cfg.seed, index, cfg)
                scene.split = split
                scene.scene_id = f"{split}-{index:06d}"
                img = render(scene)
                rel_path = f"{IMAGES_DIR}/{scene.scene_id}.png"
                Image.fromarray(img).save(os.path.join(data_dir, rel_path))
                matches = matching_objects(scene, scene.expression)
                ok = len(matches) == 1 and matches[0] is scene.objects[scene.referent]
                verified += int(ok)
                total += 1
                per_template[scene.template] += 1
                record = {
                    "scene_id": scene.scene_id,
                    "split": split,
                    "expression": scene.expression,
                    "box": [round(float(v), 8) for v in scene.gt_box()],
                    "image": rel_path,
                    "template": scene.template,
                    "seed_index": index,
                }
                rec.write(json.dumps(record, sort_keys=True) + "\n")
                index += 1
    return {"total": total, "verified": verified,
            "per_template": per_template, "manifest": manifest}


class GroundingDataset:
    """One split's records with images preloaded as uint8 arrays."""

    def __init__(self, data_dir, split, preload=True):
        manifest_path = os.path.join(data_dir, MANIFEST_NAME)
        with open(manifest_path, encoding="utf-8") as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("version") != DATASET_VERSION:
            raise ValueError(
                f"dataset version {self.manifest.get('version')} unsupported")
        self.data_dir = data_dir
        self.split = split
        self.vocab = Vocabulary.load(os.path.join(data_dir, self.manifest["vocab"]))
        self.records = []
        with open(os.path.join(data_dir, self.manifest["records"]), encoding="utf-8") as fh:
            for line in fh:
                r = json.loads(line)
                if r["split"] == split:
                    self.records.append(r)
        if not self.records:
            raise ValueError(f"no records for split {split!r} in {data_dir}")
        self.boxes = np.array([r["box"] for r in self.records])
        self.templates = [r["template"] for r in self.records]
        self._images = None
        if preload:
            self._images = np.stack([self._load_image(r) for r in self.records])

    def _load_image(self, record):
        path = os.path.join(self.data_dir, record["image"])
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)

    def __len__(self):
        return len(self.records)

    def image(self, i):
        if self._images is not None:
            return self._images[i]
        return self._load_image(self.records[i])

    def batch_images(self, indices):
        """float32 (B, H, W, 3) in [0, 1] for the given record indices."""
        if self._images is not None:
            raw = self._images[np.asarray(indices)]
        else:
            raw = np.stack([self.image(i) for i in indices])
        return raw.astype(np.float32) / 255.0

    def expressions(self, indices):
        return [self.records[i]["expression"] for i in indices]


def fit_priors(boxes_wh, n, seed=0, iters=100):
    """K-means over box shapes with IoU distance (boxes on a common center).

    Returns (n, 2) priors sorted by area.  Degenerate input (all shapes
    identical) yields n copies with a warning.
    """
    boxes = np.asarray(boxes_wh, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 2 or np.any(boxes <= 0):
        raise ValueError("boxes must be (M, 2) positive widths and heights")
    uniq = np.unique(boxes, axis=0)
    if uniq.shape[0] == 1:
        warnings.warn("all boxes identical; priors are n copies", stacklevel=2)
        return np.repeat(uniq, n, axis=0)
    if uniq.shape[0] < n:
        raise ValueError(f"need at least {n} distinct shapes, got {uniq.shape[0]}")

    def iou_dist(shapes, centers):
        inter = (np.minimum(shapes[:, None, 0], centers[None, :, 0])
                 * np.minimum(shapes[:, None, 1], centers[None, :, 1]))
        union = (shapes[:, 0] * shapes[:, 1])[:, None] \
            + (centers[:, 0] * centers[:, 1])[None, :] - inter
        return 1.0 - inter / union

    rng = np.random.default_rng(seed)
    centers = uniq[rng.choice(uniq.shape[0], size=n, replace=False)]
    assign = None
    for _ in range(iters):
        d = iou_dist(boxes, centers)
        new_assign = d.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(n):
            sel = boxes[assign == c]
            if sel.size == 0:
                centers[c] = boxes[rng.integers(boxes.shape[0])]
            else:
                centers[c] = sel.mean(axis=0)
    order = np.argsort(centers[:, 0] * centers[:, 1])
    return centers[order]
