"""Normalization, patch sampling, tiling/stitching, dense scanning and padding.

Images are ``[C, H, W]`` arrays with values in [0, 1]; density maps are ``[H, W]``.
"""

from dataclasses import dataclass

import numpy as np

PATCH_MODES = ("random_train", "tile_exact", "dense_scan")


@dataclass(frozen=True)
class PatchPolicy:
    patch_size: tuple  # (height, width)
    mode: str = "random_train"
    stride: int = 0
    num_samples: int = 1
    flip_augment: bool = False

    def __post_init__(self):
        ph, pw = (int(v) for v in self.patch_size)
        object.__setattr__(self, "patch_size", (ph, pw))
        if ph < 1 or pw < 1:
            raise ValueError(f"patch size must be positive, got {self.patch_size}")
        if self.mode not in PATCH_MODES:
            raise ValueError(f"unknown patch mode {self.mode!r}")
        if self.mode == "dense_scan" and not 1 <= self.stride <= min(ph, pw):
            raise ValueError(f"dense_scan stride must be in 1..{min(ph, pw)}, got {self.stride}")
        if self.mode == "random_train" and self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass(frozen=True)
class PadSpec:
    target_size: tuple


# ---------------------------------------------------------------------------
# normalization


def channel_means(images):
    """Per-channel mean over a list of ``[C,H,W]`` images, accumulated in list order."""
    if not images:
        raise ValueError("cannot compute channel means of an empty image list")
    C = images[0].shape[0]
    total = np.zeros(C)
    count = 0
    for img in images:
        if img.shape[0] != C:
            raise ValueError(f"image has {img.shape[0]} channels, expected {C}")
        total += img.reshape(C, -1).sum(axis=1)
        count += img.shape[1] * img.shape[2]
    return total / count


def normalize(image, means):
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    if image.shape[0] != means.size:
        raise ValueError(f"image has {image.shape[0]} channels but {means.size} channel means were given")
    return image - means[:, None, None]


# ---------------------------------------------------------------------------
# random sampling


def _flip(a):
    return np.ascontiguousarray(a[..., ::-1])


def _cut(image, density, top, left, ph, pw):
    return image[:, top:top + ph, left:left + pw].copy(), density[top:top + ph, left:left + pw].copy()


def sample_patches(image, density, policy, seed):
    """``policy.num_samples`` random congruent (image, density) crops, plus mirrors if ``flip_augment``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ph, pw = policy.patch_size
    H, W = density.shape
    if ph > H or pw > W:
        raise ValueError(f"patch {policy.patch_size} larger than image {(H, W)}")
    out = []
    for _ in range(policy.num_samples):
        top = int(rng.integers(0, H - ph + 1))
        left = int(rng.integers(0, W - pw + 1))
        ip, dp = _cut(image, density, top, left, ph, pw)
        out.append((ip, dp))
        if policy.flip_augment:
            out.append((_flip(ip), _flip(dp)))
    return out


def sample_training_set(images, densities, policy, seed):
    """Draw ``policy.num_samples`` patches across a dataset (image chosen uniformly per patch)."""
    if not images:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    ph, pw = policy.patch_size
    for k, d in enumerate(densities):
        if ph > d.shape[0] or pw > d.shape[1]:
            raise ValueError(f"patch {policy.patch_size} larger than image {k} of size {d.shape}")
    out = []
    for _ in range(policy.num_samples):
        k = int(rng.integers(0, len(images)))
        H, W = densities[k].shape
        top = int(rng.integers(0, H - ph + 1))
        left = int(rng.integers(0, W - pw + 1))
        ip, dp = _cut(images[k], densities[k], top, left, ph, pw)
        out.append((ip, dp))
        if policy.flip_augment:
            out.append((_flip(ip), _flip(dp)))
    return out


# ---------------------------------------------------------------------------
# tiling


def cut_tiles(x, patch_size):
    """Split the trailing ``(H, W)`` axes of ``x`` into a row-major grid of tiles.

    Returns ``(tiles, layout)`` with ``layout = (rows, cols)``.
    """
    ph, pw = patch_size
    H, W = x.shape[-2:]
    if H % ph or W % pw:
        raise ValueError(f"image {(H, W)} is not divisible into {(ph, pw)} tiles")
    rows, cols = H // ph, W // pw
    tiles = [
        x[..., r * ph:(r + 1) * ph, c * pw:(c + 1) * pw].copy() for r in range(rows) for c in range(cols)
    ]
    return tiles, (rows, cols)


def stitch_tiles(patches, layout):
    rows, cols = layout
    if len(patches) != rows * cols:
        raise ValueError(f"{len(patches)} patches cannot fill a {rows}x{cols} layout")
    shape = patches[0].shape
    for k, p in enumerate(patches):
        if p.shape != shape:
            raise ValueError(f"patch {k} has shape {p.shape}, expected {shape}")
    ph, pw = shape[-2:]
    out = np.empty(shape[:-2] + (rows * ph, cols * pw), dtype=patches[0].dtype)
    for k, p in enumerate(patches):
        r, c = divmod(k, cols)
        out[..., r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = p
    return out


def window_starts(n, size, stride):
    """Window origins along one axis; the last window is clamped to end at ``n``."""
    size = min(size, n)
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts


def dense_scan_average(image, predictor, patch_size, stride):
    """Average ``predictor`` outputs over overlapping windows.

    ``predictor`` maps a ``[C,h,w]`` window to an ``[h,w]`` map.  Returns
    ``(average, coverage)`` where ``coverage`` counts windows per pixel.
    """
    C, H, W = image.shape
    ph, pw = min(patch_size[0], H), min(patch_size[1], W)
    if stride < 1 or stride > min(ph, pw):
        raise ValueError(f"stride must be in 1..{min(ph, pw)}, got {stride}")
    acc = np.zeros((H, W))
    cover = np.zeros((H, W), dtype=np.int64)
    for top in window_starts(H, ph, stride):
        for left in window_starts(W, pw, stride):
            pred = np.asarray(predictor(image[:, top:top + ph, left:left + pw]))
            acc[top:top + ph, left:left + pw] += pred.reshape(ph, pw)
            cover[top:top + ph, left:left + pw] += 1
    return acc / cover, cover


# ---------------------------------------------------------------------------
# padding


def pad_and_mask(image, pad):
    """Zero-pad ``[C,H,W]`` to ``pad.target_size`` with the image at the origin.

    The mask is True on padded pixels.
    """
    C, H, W = image.shape
    TH, TW = pad.target_size
    if TH < H or TW < W:
        raise ValueError(f"pad target {(TH, TW)} smaller than image {(H, W)}")
    out = np.zeros((C, TH, TW), dtype=image.dtype)
    out[:, :H, :W] = image
    mask = np.ones((TH, TW), dtype=bool)
    mask[:H, :W] = False
    return out, mask


def apply_suppression(density, mask):
    return np.where(mask, 0.0, density)


# ---------------------------------------------------------------------------
# dataset presets

TEST_MODES = ("full", "pad", "tile", "dense_scan")


@dataclass(frozen=True)
class Preset:
    name: str
    train_policy: PatchPolicy
    test_mode: str
    regime: str = "fixed-sigma"
    sigma: float = 15.0
    test_patch: tuple = None
    test_stride: int = 0
    pad_to: tuple = None

    def __post_init__(self):
        if self.test_mode not in TEST_MODES:
            raise ValueError(f"unknown test mode {self.test_mode!r}")


PRESETS = {
    "ucf": Preset(
        "ucf", PatchPolicy((150, 150), "random_train", num_samples=1600),
        test_mode="pad", pad_to=(1024, 1024), sigma=15.0,
    ),
    "trancos": Preset(
        "trancos", PatchPolicy((80, 80), "random_train", num_samples=1600),
        test_mode="tile", test_patch=(80, 80), sigma=15.0,
    ),
    "ucsd": Preset(
        "ucsd", PatchPolicy((79, 119), "random_train", num_samples=1600, flip_augment=True),
        test_mode="tile", test_patch=(79, 119), regime="ucsd-perspective",
    ),
    "worldexpo": Preset(
        "worldexpo", PatchPolicy((150, 150), "random_train", num_samples=16000),
        test_mode="dense_scan", test_patch=(150, 150), test_stride=100, sigma=15.0,
    ),
    "synthetic": Preset(
        "synthetic", PatchPolicy((32, 32), "random_train", num_samples=800),
        test_mode="full", sigma=2.0,
    ),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
