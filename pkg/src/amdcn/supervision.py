"""Ground-truth density maps from dot annotations.

Three regimes:

* ``gaussian_density`` - one isotropic Gaussian of fixed sigma per object.
* ``ucsd_density`` - covariance ``sigma_base**2 * I`` divided by the square root
  of a combined (horizontal x vertical) perspective value at the object.
* ``worldexpo_density`` - head Gaussian plus elongated body Gaussian, both
  scaled by pixels-per-meter, averaged so each person has unit mass.

Kernels are evaluated at integer pixel coordinates over a +/-4 sigma window
(per axis), normalized to unit mass over that window, and clipped at the image
border.  Objects near the border therefore lose mass.
"""

import math
from dataclasses import dataclass

import numpy as np

from amdcn.tensor import Tensor

SUPPORT_SIGMAS = 4.0
BODY_OFFSET_M = 0.875
HEAD_SIGMA_M = 0.2
BODY_SIGMA_X_M = 0.2
BODY_SIGMA_Y_M = 0.5
PERSPECTIVE_SEMANTICS = ("ucsd_divisor", "worldexpo_meters")


@dataclass(frozen=True)
class PointAnnotations:
    """Object centers ``points[k] = (x, y)`` in pixels on an ``(H, W)`` image."""

    points: np.ndarray
    image_size: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        H, W = (int(v) for v in self.image_size)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "image_size", (H, W))
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            bad = (x < 0) | (x >= W) | (y < 0) | (y >= H) | ~np.isfinite(x) | ~np.isfinite(y)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise ValueError(f"annotation {k} at {tuple(pts[k])} lies outside image of size {(H, W)}")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class PerspectiveMap:
    values: np.ndarray
    semantics: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"perspective map must be 2-D, got shape {vals.shape}")
        if self.semantics not in PERSPECTIVE_SEMANTICS:
            raise ValueError(f"unknown perspective semantics {self.semantics!r}")
        if not np.all(vals > 0) or not np.all(np.isfinite(vals)):
            raise ValueError("perspective values must be finite and > 0")
        object.__setattr__(self, "values", vals)

    def at(self, x, y):
        H, W = self.values.shape
        r = min(max(int(math.floor(y + 0.5)), 0), H - 1)
        c = min(max(int(math.floor(x + 0.5)), 0), W - 1)
        return float(self.values[r, c])


def _center(v):
    # round-half-up keeps integer shifts exact
    return int(math.floor(v + 0.5))


def kernel_window(cx, cy, sigma_x, sigma_y):
    """Unit-mass Gaussian on its +/-4 sigma integer window.

    Returns ``(kernel, row0, col0)`` where ``kernel[0, 0]`` sits at pixel ``(row0, col0)``.
    """
    rx = int(math.ceil(SUPPORT_SIGMAS * sigma_x))
    ry = int(math.ceil(SUPPORT_SIGMAS * sigma_y))
    col0 = _center(cx) - rx
    row0 = _center(cy) - ry
    xs = np.arange(col0, col0 + 2 * rx + 1) - cx
    ys = np.arange(row0, row0 + 2 * ry + 1) - cy
    gx = np.exp(-0.5 * (xs / sigma_x) ** 2)
    gy = np.exp(-0.5 * (ys / sigma_y) ** 2)
    k = np.outer(gy, gx)
    k /= k.sum()
    return k, row0, col0


def place_kernel(out, kernel, row0, col0):
    """Add ``kernel`` into ``out`` at ``(row0, col0)``, dropping out-of-bounds parts."""
    H, W = out.shape
    kh, kw = kernel.shape
    r0, c0 = max(row0, 0), max(col0, 0)
    r1, c1 = min(row0 + kh, H), min(col0 + kw, W)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] += kernel[r0 - row0:r1 - row0, c0 - col0:c1 - col0]
    return out


def gaussian_density(ann, sigma):
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    out = np.zeros(ann.image_size)
    for x, y in ann.points:
        place_kernel(out, *kernel_window(x, y, sigma, sigma))
    return out


def _check_perspective(perspective, ann, semantics):
    if perspective.semantics != semantics:
        raise ValueError(f"expected a {semantics} perspective map, got {perspective.semantics}")
    if perspective.values.shape != ann.image_size:
        raise ValueError(
            f"perspective map shape {perspective.values.shape} does not match image {ann.image_size}"
        )


def ucsd_density(ann, sigma_base=math.sqrt(8.0), perspective=None):
    """Covariance ``sigma_base**2 / sqrt(p(x)) * I`` per object; ``p`` defaults to 1."""
    if perspective is not None:
        _check_perspective(perspective, ann, "ucsd_divisor")
    out = np.zeros(ann.image_size)
    base_var = sigma_base ** 2
    for x, y in ann.points:
        divisor = math.sqrt(perspective.at(x, y)) if perspective is not None else 1.0
        s = math.sqrt(base_var / divisor)
        place_kernel(out, *kernel_window(x, y, s, s))
    return out


def worldexpo_components(x, y, meters):
    """Head and body kernel windows for one person; ``meters`` is pixels per meter at the head."""
    head = kernel_window(x, y, HEAD_SIGMA_M * meters, HEAD_SIGMA_M * meters)
    body = kernel_window(x, y + BODY_OFFSET_M * meters, BODY_SIGMA_X_M * meters, BODY_SIGMA_Y_M * meters)
    return head, body


def worldexpo_density(ann, perspective):
    _check_perspective(perspective, ann, "worldexpo_meters")
    out = np.zeros(ann.image_size)
    for x, y in ann.points:
        (hk, hr, hc), (bk, br, bc) = worldexpo_components(x, y, perspective.at(x, y))
        place_kernel(out, hk * 0.5, hr, hc)
        place_kernel(out, bk * 0.5, br, bc)
    return out


def scale_targets(density, gamma=255.0):
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return Tensor(np.asarray(density, dtype=np.float64) * gamma)


REGIMES = ("fixed-sigma", "ucsd-perspective", "worldexpo-perspective")


def make_density(ann, regime, sigma=15.0, perspective=None):
    """Dispatch on a regime name as used by presets and the CLI."""
    if regime == "fixed-sigma":
        return gaussian_density(ann, sigma)
    if regime == "ucsd-perspective":
        if perspective is not None and perspective.semantics != "ucsd_divisor":
            perspective = None
        return ucsd_density(ann, perspective=perspective)
    if regime == "worldexpo-perspective":
        if perspective is None:
            raise ValueError("worldexpo-perspective supervision needs a perspective map")
        return worldexpo_density(ann, perspective)
    raise ValueError(f"unknown supervision regime {regime!r}; expected one of {REGIMES}")


# ---------------------------------------------------------------------------
# file formats


def write_annotations(path, ann):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# image_size {ann.image_size[0]} {ann.image_size[1]}\n")
        for x, y in ann.points:
            fh.write(f"{float(x)!r},{float(y)!r}\n")


def read_annotations(path, image_size=None):
    """Parse ``x,y`` lines; ``#`` starts a comment.  A ``# image_size H W`` comment is honored."""
    pts, size = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line, _, comment = raw.partition("#")
            parts = comment.split()
            if len(parts) == 3 and parts[0] == "image_size":
                size = (int(parts[1]), int(parts[2]))
            line = line.strip()
            if not line:
                continue
            try:
                x, y = (float(v) for v in line.split(","))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'x,y', got {line!r}") from None
            pts.append((x, y))
    size = image_size or size
    if size is None:
        raise ValueError(f"{path}: image size unknown (no '# image_size' header and none supplied)")
    return PointAnnotations(np.array(pts).reshape(-1, 2), size)


def write_perspective(path, pmap):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(pmap.semantics + "\n")
        np.savetxt(fh, pmap.values, fmt="%.17g")


def read_perspective(path):
    with open(path, encoding="utf-8") as fh:
        semantics = fh.readline().strip()
        values = np.loadtxt(fh, ndmin=2)
    return PerspectiveMap(values, semantics)
