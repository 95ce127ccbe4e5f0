"""Evasive input transformations with magnitude and probability knobs.

Each transform mirrors the usual image-augmentation semantics: a fixed
magnitude parameter plus a probability gate, with any residual randomness
(signs, corner displacements) drawn from the caller's generator. Geometric
warps resample bilinearly with zero fill outside the frame. All transforms
accept (H, W) or (C, H, W) arrays in [0, 1] and clip their output back into
that range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

# magnitude ranges per transform kind; None marks probability-only kinds
MAGNITUDE_RANGES = {
    "brightness_contrast": (0.0, 0.5),
    "hflip": None,
    "vflip": None,
    "sharpness": (0.8, 1.8),
    "perspective": (0.25, 0.5),
    "rotation": (0.0, 180.0),
    "pixel_scale": (0.8, 1.2),
    "crop_resize": (0.6, 1.0),
    "translation": (-0.2, 0.2),
}

TABLE_ORDER = list(MAGNITUDE_RANGES)

# least-distorting magnitude per kind, used by the semantic-preservation
# metric; flips carry no magnitude and are excluded there
MILD_MAGNITUDES = {
    "brightness_contrast": 0.0,
    "sharpness": 1.0,
    "perspective": 0.25,
    "rotation": 0.0,
    "pixel_scale": 1.0,
    "crop_resize": 1.0,
    "translation": 0.0,
}


@dataclass
class TransformSpec:
    kind: str
    magnitude: float = 0.0
    probability: float = 0.0

    def __post_init__(self):
        if self.kind not in MAGNITUDE_RANGES:
            raise InvalidInputError(f"unknown transform kind {self.kind!r}")
        rng_range = MAGNITUDE_RANGES[self.kind]
        if rng_range is not None:
            lo, hi = rng_range
            if not lo <= self.magnitude <= hi:
                raise InvalidInputError(
                    f"{self.kind} magnitude {self.magnitude} outside "
                    f"[{lo}, {hi}]")
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidInputError("probability must lie in [0, 1]")


def default_transform_specs(probability=0.0):
    """All known kinds in canonical order at mid-range magnitudes."""
    specs = []
    for kind, bounds in MAGNITUDE_RANGES.items():
        mag = 0.0 if bounds is None else 0.5 * (bounds[0] + bounds[1])
        specs.append(TransformSpec(kind, mag, probability))
    return specs


def mild_transform_specs(probability=1.0):
    """Magnitude-bearing kinds at their least-distorting settings."""
    return [TransformSpec(kind, mag, probability)
            for kind, mag in MILD_MAGNITUDES.items()]


def _as_chw(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, :, :], True
    if x.ndim == 3:
        return x, False
    raise InvalidInputError("transforms expect (H, W) or (C, H, W) input")


def _warp(img, ys, xs):
    """Bilinear resample of each channel at the given source coordinates."""
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.map_coordinates(img[c], [ys, xs], order=1, cval=0.0)
    return out


def _identity_grid(h, w):
    return np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")


def _apply_brightness_contrast(img, mag, rng):
    shift = rng.uniform(-mag, mag)
    factor = rng.uniform(1.0 - mag, 1.0 + mag)
    mean = img.mean()
    return (img - mean) * factor + mean + shift


def _apply_sharpness(img, mag, rng):
    kernel = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]])
    kernel /= kernel.sum()
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        blurred = ndimage.convolve(img[c], kernel, mode="nearest")
        out[c] = blurred + mag * (img[c] - blurred)
    return out


def _apply_rotation(img, mag, rng):
    angle = rng.uniform(-mag, mag)
    theta = np.deg2rad(angle)
    h, w = img.shape[1:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = _identity_grid(h, w)
    yc, xc = ys - cy, xs - cx
    src_y = np.cos(theta) * yc - np.sin(theta) * xc + cy
    src_x = np.sin(theta) * yc + np.cos(theta) * xc + cx
    return _warp(img, src_y, src_x)


def _apply_pixel_scale(img, mag, rng):
    h, w = img.shape[1:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = _identity_grid(h, w)
    return _warp(img, (ys - cy) / mag + cy, (xs - cx) / mag + cx)


def _apply_crop_resize(img, mag, rng):
    # keep a centered fraction ``mag`` of each side, resized back up
    h, w = img.shape[1:]
    ch, cw = mag * h, mag * w
    oy, ox = (h - ch) / 2.0, (w - cw) / 2.0
    ys, xs = _identity_grid(h, w)
    return _warp(img, ys * (ch / h) + oy, xs * (cw / w) + ox)


def _apply_translation(img, mag, rng):
    h, w = img.shape[1:]
    span = abs(mag)
    dy = rng.uniform(-span, span) * h
    dx = rng.uniform(-span, span) * w
    ys, xs = _identity_grid(h, w)
    return _warp(img, ys - dy, xs - dx)


def _apply_perspective(img, mag, rng):
    # displace the four corners inward by up to ``mag`` of each side and
    # resample through the induced projective map (inverse mapping)
    h, w = img.shape[1:]
    dh, dw = mag * (h - 1) / 2.0, mag * (w - 1) / 2.0
    dst = np.array([[0.0, 0.0], [0.0, w - 1.0],
                    [h - 1.0, 0.0], [h - 1.0, w - 1.0]])
    jitter = rng.uniform(0.0, 1.0, size=(4, 2)) * np.array([dh, dw])
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
    src = dst + jitter * signs
    m = _projective_from_points(dst, src)
    ys, xs = _identity_grid(h, w)
    denom = m[2, 0] * ys + m[2, 1] * xs + m[2, 2]
    src_y = (m[0, 0] * ys + m[0, 1] * xs + m[0, 2]) / denom
    src_x = (m[1, 0] * ys + m[1, 1] * xs + m[1, 2]) / denom
    return _warp(img, src_y, src_x)


def _projective_from_points(dst, src):
    """3x3 homography mapping each dst corner to its src corner."""
    a = []
    b = []
    for (y, x), (v, u) in zip(dst, src):
        a.append([y, x, 1, 0, 0, 0, -y * v, -x * v])
        b.append(v)
        a.append([0, 0, 0, y, x, 1, -y * u, -x * u])
        b.append(u)
    coeff = np.linalg.solve(np.array(a), np.array(b))
    return np.append(coeff, 1.0).reshape(3, 3)


_APPLMAP = {
    "brightness_contrast": _apply_brightness_contrast,
    "hflip": lambda img, mag, rng: img[:, :, ::-1],
    "vflip": lambda img, mag, rng: img[:, ::-1, :],
    "sharpness": _apply_sharpness,
    "perspective": _apply_perspective,
    "rotation": _apply_rotation,
    "pixel_scale": _apply_pixel_scale,
    "crop_resize": _apply_crop_resize,
    "translation": _apply_translation,
}


def apply_transforms(x, specs, rng):
    """Apply each spec independently with its probability, in list order."""
    img, squeeze = _as_chw(x)
    out = img
    changed = False
    for spec in specs:
        if spec.kind not in _APPLMAP:
            raise InvalidInputError(f"unknown transform kind {spec.kind!r}")
        if spec.probability <= 0.0:
            continue
        if spec.probability < 1.0 and rng.random() >= spec.probability:
            continue
        out = _APPLMAP[spec.kind](out, spec.magnitude, rng)
        changed = True
    if changed:
        out = np.clip(out, 0.0, 1.0)
    else:
        out = out.copy()
    return out[0] if squeeze else out


def l2_displacement(x, x_prime):
    """Plain euclidean distance between two equal-shape inputs."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise InvalidInputError("shape mismatch")
    return float(np.linalg.norm(np.ravel(x) - np.ravel(x_prime)))


def semantic_preservation_rate(net, images, rng, specs=None):
    """Fraction of images whose top-class survives the mild transforms."""
    from . import numerics as nm
    from .oracle import decide

    if specs is None:
        specs = mild_transform_specs()
    kept = 0
    for img in images:
        before = decide(nm.forward(net, img))
        after = decide(nm.forward(net, apply_transforms(img, specs, rng)))
        kept += int(before == after)
    return kept / len(images)
