"""Supervision masks and the two training losses.

The heatmap loss is pixel-wise BCE against a mask of dilated annotation points.
The contrastive loss compares the encoder features of the ROI with the aligned
features of its mirror image, pixel by pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .geometry import TpsWarp, warp_to_grid
from .tensor import (
    Tensor,
    _make,
    add,
    bce_with_logits,
    contrastive_margin,
    grid_sample_bilinear,
    maxpool2x2,
    mul,
    no_grad,
)

FULL_RES_RADIUS_PX = 50
FULL_RES_ROI_HEIGHT = 256


def desk_radius(roi_height: int) -> int:
    """The 50 px full-resolution dilation radius rescaled to a ROI of another height."""
    return int(round(FULL_RES_RADIUS_PX * roi_height / FULL_RES_ROI_HEIGHT))


@dataclass(frozen=True)
class FractureAnnotations:
    points: np.ndarray  # (k, 2) ROI pixels, may be empty
    dilation_radius_px: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        if not self.dilation_radius_px > 0:
            raise ContractError("dilation radius must be positive")


def read_annotations(path) -> np.ndarray:
    """``x y`` per line; an empty file (or only comments) means no fracture."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                x, y = line.split()
                rows.append((float(x), float(y)))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def write_annotations(path, points) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# fracture points, x y in ROI pixels\n")
        for x, y in np.asarray(points).reshape(-1, 2):
            fh.write(f"{x:.4f} {y:.4f}\n")


def cell_centres(hw: tuple, stride: int) -> np.ndarray:
    """Full-resolution (x, y) of each cell centre of the stride-``stride`` grid, shape (h, w, 2)."""
    h, w = hw
    if h % stride or w % stride:
        raise ContractError(f"stride {stride} does not divide {hw}")
    off = (stride - 1) / 2.0
    xs = np.arange(w // stride) * stride + off
    ys = np.arange(h // stride) * stride + off
    xx, yy = np.meshgrid(xs, ys)
    return np.stack([xx, yy], axis=-1)


def min_distance(points: np.ndarray, hw: tuple, stride: int) -> np.ndarray:
    """Distance from each cell centre to the nearest point (inf when there are none)."""
    c = cell_centres(hw, stride)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.full(c.shape[:2], np.inf)
    d = np.sqrt(((c[:, :, None, :] - pts[None, None]) ** 2).sum(-1))
    return d.min(axis=-1)


def make_mask(ann: FractureAnnotations, hw: tuple, stride: int = 1) -> np.ndarray:
    """Binary (1, 1, h/stride, w/stride) mask of cells within the dilation radius of any point."""
    d = min_distance(ann.points, hw, stride)
    return (d <= ann.dilation_radius_px).astype(np.float32)[None, None]


def make_contrast_mask(m: np.ndarray, m_flipped: np.ndarray, warp: TpsWarp, stride: int) -> np.ndarray:
    """Union of ``m`` with the flipped mask pulled back through ``warp``, max-pooled to ``stride``.

    ``m`` and ``m_flipped`` are full-resolution ROI masks of the image and of its
    mirror image; the warp maps ROI coordinates of the image to those of the
    mirror image.
    """
    m = np.asarray(m, dtype=np.float32).reshape((1, 1) + np.shape(m)[-2:])
    mf = np.asarray(m_flipped, dtype=np.float32).reshape(m.shape)
    hw = m.shape[2:]
    if stride < 1 or (stride & (stride - 1)):
        raise ContractError(f"stride must be a power of two, got {stride}")
    grid = warp_to_grid(warp, hw, hw)
    with no_grad():
        warped = grid_sample_bilinear(Tensor(mf), grid).data
        union = np.maximum(m, (warped >= 0.5).astype(np.float32))
        t = Tensor(union)
        s = stride
        while s > 1:
            t = maxpool2x2(t)
            s //= 2
    return t.data


def bce_loss(y: Tensor, m, logits: Tensor | None = None) -> Tensor:
    """Mean pixel-wise BCE of heatmap ``y`` against mask ``m``.

    Pass the pre-sigmoid ``logits`` whenever they are available: the loss is then
    computed with the log-sum-exp form and never sees a saturated probability.
    """
    md = m.data if isinstance(m, Tensor) else np.asarray(m)
    if md.shape != y.shape:
        raise DimensionError(f"bce_loss: heatmap {y.shape} vs mask {md.shape}")
    if logits is not None:
        return bce_with_logits(logits, md)
    return bce_with_logits(_logit(y), md)


def _logit(y: Tensor) -> Tensor:
    p = np.clip(y.data.astype(np.float64), 1e-7, 1 - 1e-7)
    z = np.log(p) - np.log1p(-p)
    return _make(z.astype(y.dtype), (y,), lambda g: ((g / (p * (1 - p))).astype(y.dtype),), "logit")


def contrastive_loss(f: Tensor, f_aligned: Tensor, m_hat, margin: float = 0.5,
                     use_projection: bool = False, g=None, reduction: str = "mean") -> Tensor:
    """Pull mirrored features together outside ``m_hat`` and push them past ``margin`` inside.

    ``g`` is the projection head applied to both inputs when ``use_projection``.
    """
    if f.shape != f_aligned.shape:
        raise DimensionError(f"contrastive_loss: features {f.shape} vs {f_aligned.shape}")
    if use_projection:
        if g is None:
            raise ContractError("use_projection requires a projection callable g")
        a, b = g(f), g(f_aligned)
    else:
        a, b = f, f_aligned
    md = m_hat.data if isinstance(m_hat, Tensor) else np.asarray(m_hat)
    n, _, h, w = a.shape
    if md.shape[0] == 1 and n > 1:
        md = np.broadcast_to(md, (n,) + md.shape[1:])
    if md.shape != (n, 1, h, w):
        raise DimensionError(f"contrastive_loss: mask {md.shape} vs feature grid {(n, 1, h, w)}")
    return contrastive_margin(a, b, md, margin, reduction)


def total_loss(l_b: Tensor, l_c: Tensor | None, lam: float = 0.5) -> Tensor:
    if l_c is None or lam == 0:
        return l_b
    return add(l_b, mul(l_c, lam))
