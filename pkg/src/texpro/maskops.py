"""Binary mask smoothing and alignment of external and rendered part masks."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from texpro.tensor import Tensor

_FOUR = ndimage.generate_binary_structure(2, 1)


class MaskKind(str, enum.Enum):
    RENDERED = "rendered"
    EXTERNAL = "external"
    ALIGNED = "aligned"


@dataclass
class Mask:
    bits: np.ndarray
    view: int = -1
    part: int = -1
    kind: MaskKind = MaskKind.EXTERNAL

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {b.shape}")
        if b.dtype != bool:
            if not np.all((b == 0) | (b == 1)):
                raise ValueError("mask values must be binary")
            b = b.astype(bool)
        self.bits = b
        self.kind = MaskKind(self.kind)

    @property
    def shape(self):
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def filename(self) -> str:
        return mask_filename(self.view, self.part, self.kind)

    def _like(self, bits, kind=None) -> Mask:
        return Mask(bits, self.view, self.part, self.kind if kind is None else kind)


def mask_filename(view: int, part: int, kind) -> str:
    return f"mask_v{view}_p{part}_{MaskKind(kind).value}.png"


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def _wrap(template, bits, kind=None):
    return template._like(bits, kind) if isinstance(template, Mask) else bits


def median_filter(m, k: int = 5):
    """Window majority with edge replication (odd ``k`` >= 3)."""
    if k < 3 or k % 2 == 0:
        raise ValueError(f"median window must be odd and >= 3, got {k}")
    b = _bits(m)
    out = ndimage.median_filter(b.astype(np.uint8), size=k, mode="nearest").astype(bool)
    return _wrap(m, out)


def erode(m, radius: int = 1):
    """Square-element erosion; pixels outside the image count as true (edge replication)."""
    if radius < 1:
        raise ValueError("erosion radius must be >= 1")
    b = _bits(m)
    el = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    padded = np.pad(b, radius, mode="edge")
    out = ndimage.binary_erosion(padded, structure=el, border_value=1)[radius:-radius, radius:-radius]
    return _wrap(m, out & b)


def components(bits) -> tuple[np.ndarray, np.ndarray]:
    """4-connected labels (0 = background) and the size of each label 1..n."""
    labels, n = ndimage.label(np.asarray(bits, dtype=bool), structure=_FOUR)
    sizes = np.bincount(labels.reshape(-1), minlength=n + 1)[1:]
    return labels, sizes


def filter_regions(m, rendered, beta: float = 0.5):
    """Drop components of ``m`` smaller than beta x (smallest rendered component)."""
    r = _bits(rendered)
    if not r.any():
        raise ValueError("rendered mask is empty")
    _, rsizes = components(r)
    cutoff = beta * rsizes.min()
    labels, sizes = components(_bits(m))
    keep = np.concatenate([[False], sizes >= cutoff])
    return _wrap(m, keep[labels])


def smooth(m, rendered, window: int = 5, radius: int = 1, beta: float = 0.5):
    """median -> erode -> filter_regions."""
    return filter_regions(erode(median_filter(m, window), radius), rendered, beta)


def align(rendered, external):
    r, e = _bits(rendered), _bits(external)
    if r.shape != e.shape:
        raise ValueError(f"mask dimensions differ: {r.shape} vs {e.shape}")
    return _wrap(rendered, r & e, MaskKind.ALIGNED)


def bbox(m) -> tuple[int, int, int, int]:
    """Tight (row0, col0, row1, col1) bounds, end-exclusive."""
    b = _bits(m)
    rows = np.flatnonzero(b.any(axis=1))
    cols = np.flatnonzero(b.any(axis=0))
    if len(rows) == 0:
        raise ValueError("cannot crop an empty mask")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def bbox_crop(m, image):
    """Crop mask and (C, H, W) image to the mask's tight bounding box."""
    r0, c0, r1, c1 = bbox(m)
    b = _bits(m)
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.shape[-2:] != b.shape:
        raise ValueError(f"image {img.shape} and mask {b.shape} differ in size")
    return b[r0:r1, c0:c1].copy(), img[..., r0:r1, c0:c1].copy(), (r0, c0, r1, c1)


def fallback_external(reference, white_preview, rendered, tau: float = 0.5):
    """Stand-in for an external segmentation of one part.

    Keeps rendered pixels whose reference brightness, relative to the part's
    mean, follows the white-material preview's shading within ``tau``.
    Pixels where the reference disagrees with the geometry (background
    bleeding in, misregistered edges) drop out.
    """
    ref = np.asarray(reference, dtype=np.float64)
    pre = np.asarray(white_preview, dtype=np.float64)
    r = _bits(rendered)
    if not r.any():
        return _wrap(rendered, np.zeros_like(r), MaskKind.EXTERNAL)
    lr = ref.mean(axis=0) if ref.ndim == 3 else ref
    lp = pre.mean(axis=0) if pre.ndim == 3 else pre
    qr = lr / max(float(lr[r].mean()), 1e-8)
    qp = lp / max(float(lp[r].mean()), 1e-8)
    return _wrap(rendered, r & (np.abs(qr - qp) <= tau), MaskKind.EXTERNAL)
