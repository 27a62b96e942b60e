"""Synthetic counting scenes with a vertical pseudo-perspective gradient.

Objects are soft disks (raised-cosine falloff) whose radius grows linearly with
the row of their center, so objects near the bottom of the frame look bigger.
The emitted perspective map is in pixels-per-meter units with
``M(x, y) = r(y) / 0.2``, i.e. a head-kernel sigma of ``0.2 * M`` equals the
rendered radius.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from amdcn.supervision import (
    HEAD_SIGMA_M,
    PerspectiveMap,
    PointAnnotations,
    read_annotations,
    read_perspective,
    write_annotations,
    write_perspective,
)

MAX_FILL = 0.6  # cap on total disk area / image area
BACKGROUND = 0.2
FOREGROUND = 0.9


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (64, 64)
    count_range: tuple = (5, 20)
    r_min: float = 1.5
    r_max: float = 4.0
    noise_level: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "count_range", tuple(int(v) for v in self.count_range))
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"count_range must satisfy 0 <= min <= max, got {self.count_range}")
        if not 0 < self.r_min <= self.r_max:
            raise ValueError(f"radii must satisfy 0 < r_min <= r_max, got {self.r_min}, {self.r_max}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        H, W = self.image_size
        if hi * math.pi * self.r_max ** 2 > MAX_FILL * H * W:
            raise ValueError(
                f"{hi} objects of radius up to {self.r_max} cannot be packed into a {H}x{W} image"
            )

    def radius(self, y):
        H = self.image_size[0]
        return self.r_min + (self.r_max - self.r_min) * y / H


@dataclass
class Record:
    image: np.ndarray  # [C, H, W] in [0, 1]
    annotations: PointAnnotations
    perspective: PerspectiveMap = None

    @property
    def count(self):
        return len(self.annotations)


def perspective_map(spec):
    H, W = spec.image_size
    rows = spec.radius(np.arange(H, dtype=np.float64))
    return PerspectiveMap(np.repeat((rows / HEAD_SIGMA_M)[:, None], W, axis=1), "worldexpo_meters")


def render_disk(canvas, x, y, r):
    """Max-composite a raised-cosine disk of radius ``r`` centered at ``(x, y)``."""
    H, W = canvas.shape
    x0, x1 = max(int(math.floor(x - r)), 0), min(int(math.ceil(x + r)) + 1, W)
    y0, y1 = max(int(math.floor(y - r)), 0), min(int(math.ceil(y + r)) + 1, H)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx - x, yy - y)
    w = np.where(d < r, 0.5 * (1.0 + np.cos(np.pi * d / r)), 0.0)
    np.maximum(canvas[y0:y1, x0:x1], w, out=canvas[y0:y1, x0:x1])


def render_scene(spec, rng):
    H, W = spec.image_size
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    # keep centers on [0, size-1] so the nearest pixel is always in bounds
    pts = np.column_stack([rng.uniform(0, W - 1, n), rng.uniform(0, H - 1, n)])
    mask = np.zeros((H, W))
    for x, y in pts:
        render_disk(mask, x, y, spec.radius(y))
    img = BACKGROUND + (FOREGROUND - BACKGROUND) * mask
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, size=(H, W))
    # 8-bit quantization so in-memory scenes equal their on-disk form
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Record(img[None], PointAnnotations(pts, (H, W)), perspective_map(spec))


def generate(spec, n_images):
    """``n_images`` records, deterministic given ``spec.seed`` (one child stream per image)."""
    children = np.random.SeedSequence(spec.seed).spawn(n_images)
    return [render_scene(spec, np.random.default_rng(s)) for s in children]


# ---------------------------------------------------------------------------
# on-disk layout
#
#   <dir>/images/NNNN.png        8-bit grayscale
#   <dir>/annotations/NNNN.txt   x,y lines
#   <dir>/perspective/NNNN.txt   semantics header + grid (optional)


def write_dataset(root, records, manifest=None):
    for sub in ("images", "annotations", "perspective"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for k, rec in enumerate(records):
        stem = f"{k:04d}"
        save_image(os.path.join(root, "images", stem + ".png"), rec.image)
        write_annotations(os.path.join(root, "annotations", stem + ".txt"), rec.annotations)
        if rec.perspective is not None:
            write_perspective(os.path.join(root, "perspective", stem + ".txt"), rec.perspective)
    if manifest is not None:
        with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def save_image(path, image):
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def load_image(path):
    """``[C,H,W]`` float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr[..., :3], -1, 0)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def read_dataset(root):
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"{root}: no images/ directory")
    records = []
    for fname in sorted(os.listdir(img_dir)):
        stem, ext = os.path.splitext(fname)
        if ext.lower() not in (".png", ".pgm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
            continue
        image = load_image(os.path.join(img_dir, fname))
        size = image.shape[1:]
        ann_path = os.path.join(root, "annotations", stem + ".txt")
        if not os.path.exists(ann_path):
            raise FileNotFoundError(f"{root}: missing annotations for {fname}")
        ann = read_annotations(ann_path, image_size=size)
        persp_path = os.path.join(root, "perspective", stem + ".txt")
        persp = read_perspective(persp_path) if os.path.exists(persp_path) else None
        records.append(Record(image, ann, persp))
    if not records:
        raise FileNotFoundError(f"{root}: dataset is empty")
    return records


def spec_dict(spec):
    return asdict(spec)
