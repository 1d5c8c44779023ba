"""Landmark geometry: symmetry line, reflection, ROI crops and thin-plate splines.

Coordinates are (x, y) in pixels with pixel centres on integers, x to the right
and y downwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError, SchemaError, SingularSystemError
from .tensor import Tensor, grid_sample_bilinear, no_grad

# (name, site, side, pair index, on pubis/ischium)
SCHEMA: tuple = (
    ("L1", "iliac crest", "left", 1, False),
    ("L2", "iliac wing", "left", 2, False),
    ("L3", "acetabular end of superior ramus", "left", 3, True),
    ("L4", "superior ramus midpoint", "left", 4, True),
    ("L5", "pubic tubercle", "left", 5, True),
    ("L6", "inferior ramus", "left", 6, True),
    ("L7", "ischial tuberosity", "left", 7, True),
    ("R1", "iliac crest", "right", 1, False),
    ("R2", "iliac wing", "right", 2, False),
    ("R3", "acetabular end of superior ramus", "right", 3, True),
    ("R4", "superior ramus midpoint", "right", 4, True),
    ("R5", "pubic tubercle", "right", 5, True),
    ("R6", "inferior ramus", "right", 6, True),
    ("R7", "ischial tuberosity", "right", 7, True),
    ("S1", "superior pubic symphysis", "axis", 0, True),
    ("S2", "inferior pubic symphysis", "axis", 0, True),
)
NAMES: tuple = tuple(row[0] for row in SCHEMA)
ROI_FLAGS = np.array([row[4] for row in SCHEMA])
LEFT = np.arange(7)
RIGHT = np.arange(7, 14)
AXIS = np.array([14, 15])
# index of the mirror-image landmark: L_i <-> R_i, symphysis points map to themselves
PARTNER = np.concatenate([RIGHT, LEFT, AXIS])


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (16, 2) in SCHEMA order

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (16, 2):
            raise SchemaError(f"expected 16 landmarks of (x, y), got array of shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise SchemaError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkSet":
        missing = [n for n in NAMES if n not in d]
        if missing:
            raise SchemaError(f"missing landmark(s): {', '.join(missing)}")
        extra = sorted(set(d) - set(NAMES))
        if extra:
            raise SchemaError(f"unknown landmark name(s): {', '.join(extra)}")
        return cls(np.array([d[n] for n in NAMES], dtype=np.float64))

    def to_dict(self) -> dict:
        return {n: (float(x), float(y)) for n, (x, y) in zip(NAMES, self.points)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.points[NAMES.index(name)]

    def axis_points(self) -> np.ndarray:
        """The 7 bilateral-pair midpoints followed by S1 and S2."""
        mids = 0.5 * (self.points[LEFT] + self.points[RIGHT])
        return np.vstack([mids, self.points[AXIS]])

    def roi_points(self) -> np.ndarray:
        return self.points[ROI_FLAGS]

    def transformed(self, fn) -> "LandmarkSet":
        return LandmarkSet(fn(self.points))

    def in_bounds(self, hw: tuple) -> bool:
        h, w = hw
        p = self.points
        return bool(np.all((p[:, 0] >= 0) & (p[:, 0] <= w - 1) & (p[:, 1] >= 0) & (p[:, 1] <= h - 1)))


def read_landmarks(path) -> LandmarkSet:
    """Parse a landmark file: one ``name x y`` record per line, ``#`` comments."""
    d = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise SchemaError(f"{path}:{lineno}: expected 'name x y', got {line!r}")
            name, x, y = parts
            if name in d:
                raise SchemaError(f"{path}:{lineno}: duplicate landmark {name}")
            try:
                d[name] = (float(x), float(y))
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
    return LandmarkSet.from_dict(d)


def write_landmarks(path, lm: LandmarkSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# name x y  (pixels, origin at top-left pixel centre)\n")
        for name, (x, y) in zip(NAMES, lm.points):
            fh.write(f"{name} {x:.6f} {y:.6f}\n")


# ---------------------------------------------------------------------------
# symmetry line


@dataclass(frozen=True)
class SymmetryLine:
    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        norm = np.hypot(*d)
        if not norm > 0:
            raise GeometryError("symmetry line direction must be non-zero")
        object.__setattr__(self, "direction", d / norm)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))

    def reflect_points(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        rel = p - self.point
        along = rel @ self.direction
        foot = self.point + along[..., None] * self.direction
        return 2 * foot - p

    def distance(self, pts) -> np.ndarray:
        """Signed perpendicular distance (positive on the +x side of a vertical line)."""
        rel = np.asarray(pts, dtype=np.float64) - self.point
        normal = np.array([self.direction[1], -self.direction[0]])
        return rel @ normal

    def angle(self) -> float:
        return float(np.arctan2(self.direction[1], self.direction[0]))


def fit_symmetry_line(lm: LandmarkSet) -> SymmetryLine:
    """Total-least-squares line through pair midpoints and the symphysis points."""
    pts = lm.axis_points()
    centre = pts.mean(axis=0)
    rel = pts - centre
    scatter = rel.T @ rel
    if np.trace(scatter) < 1e-18:
        raise GeometryError("axis points are coincident; symmetry line is undefined")
    evals, evecs = np.linalg.eigh(scatter)
    d = evecs[:, np.argmax(evals)]
    if d[1] < 0 or (d[1] == 0 and d[0] < 0):
        d = -d
    return SymmetryLine(centre, d)


# ---------------------------------------------------------------------------
# image sampling helpers


def _as_image4(img) -> tuple[np.ndarray, bool]:
    if isinstance(img, Tensor):
        img = img.data
    arr = np.asarray(img)
    if arr.ndim == 2:
        return arr[None, None], True
    if arr.ndim != 4:
        raise ContractError(f"expected an H x W or N x C x H x W image, got rank {arr.ndim}")
    return arr, False


def pixel_to_norm(pts: np.ndarray, hw: tuple) -> np.ndarray:
    h, w = hw
    out = np.empty_like(pts, dtype=np.float64)
    out[..., 0] = 2 * pts[..., 0] / (w - 1) - 1 if w > 1 else 0.0
    out[..., 1] = 2 * pts[..., 1] / (h - 1) - 1 if h > 1 else 0.0
    return out


def sample_at(img, coords: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``img`` (H x W or 4-d) at pixel coords of shape (Ho, Wo, 2)."""
    arr, was2d = _as_image4(img)
    h, w = arr.shape[2:]
    norm = pixel_to_norm(coords, (h, w))
    grid = np.moveaxis(norm, -1, 0)[None]
    with no_grad():
        out = grid_sample_bilinear(Tensor(arr), grid).data
    return out[0, 0] if was2d else out


def pixel_grid(hw: tuple) -> np.ndarray:
    h, w = hw
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([xs, ys], axis=-1)


def reflect_image(img, line: SymmetryLine):
    """Mirror an image across ``line``; same container type and shape as the input."""
    arr, was2d = _as_image4(img)
    h, w = arr.shape[2:]
    src = line.reflect_points(pixel_grid((h, w)))
    out = sample_at(arr, src)
    out = out[0, 0] if was2d else out
    return Tensor(out) if isinstance(img, Tensor) else out


# ---------------------------------------------------------------------------
# ROI


@dataclass(frozen=True)
class Roi:
    rect: tuple  # (x0, y0, x1, y1) in source pixels
    out_hw: tuple

    def __post_init__(self):
        x0, y0, x1, y1 = self.rect
        if not (x1 > x0 and y1 > y0):
            raise GeometryError(f"degenerate ROI rectangle {self.rect}")

    @property
    def scale(self) -> tuple:
        """(sx, sy): source pixels per ROI pixel."""
        x0, y0, x1, y1 = self.rect
        h, w = self.out_hw
        return (x1 - x0) / (w - 1), (y1 - y0) / (h - 1)

    def to_roi(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([(p[..., 0] - self.rect[0]) / sx, (p[..., 1] - self.rect[1]) / sy], axis=-1)

    def to_source(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([self.rect[0] + p[..., 0] * sx, self.rect[1] + p[..., 1] * sy], axis=-1)


def roi_rect(lm: LandmarkSet, image_hw: tuple, margin_frac: float = 0.1) -> tuple:
    pts = lm.roi_points()
    if len(pts) == 0:
        raise GeometryError("no pubis/ischium landmarks to bound the ROI")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    mx, my = margin_frac * (x1 - x0), margin_frac * (y1 - y0)
    h, w = image_hw
    return (max(x0 - mx, 0.0), max(y0 - my, 0.0), min(x1 + mx, w - 1.0), min(y1 + my, h - 1.0))


def extract_roi(img, lm: LandmarkSet, margin_frac: float = 0.1, out_hw: tuple = (64, 128)):
    """Crop the pubis/ischium bounding box (plus margin) and resize it bilinearly.

    Returns the ROI image (same container kind as ``img``), the :class:`Roi` and
    the landmarks expressed in ROI pixel coordinates.
    """
    arr, was2d = _as_image4(img)
    roi = Roi(roi_rect(lm, arr.shape[2:], margin_frac), tuple(out_hw))
    src = roi.to_source(pixel_grid(roi.out_hw))
    out = sample_at(arr, src)
    out = out[0, 0] if was2d else out
    if isinstance(img, Tensor):
        out = Tensor(out)
    return out, roi, lm.transformed(roi.to_roi)


# ---------------------------------------------------------------------------
# thin-plate spline


def tps_kernel(r: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r with U(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


@dataclass(frozen=True)
class TpsWarp:
    """Backward map from target-frame coordinates to source-frame coordinates.

    ``affine`` rows give [c, a_x, a_y] for output x and output y; ``weights`` is
    (k, 2), one kernel weight per control point and output coordinate.
    """

    src: np.ndarray
    dst: np.ndarray
    affine: np.ndarray
    weights: np.ndarray
    reg: float = 0.0

    def __call__(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        flat = p.reshape(-1, 2)
        u = tps_kernel(_pairwise(flat, self.src))
        out = self.affine[:, 0] + flat @ self.affine[:, 1:].T + u @ self.weights
        return out.reshape(p.shape)

    @classmethod
    def identity(cls, pts) -> "TpsWarp":
        pts = np.asarray(pts, dtype=np.float64)
        aff = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        return cls(pts, pts.copy(), aff, np.zeros((len(pts), 2)))

    def to_dict(self) -> dict:
        return {
            "src": self.src.tolist(), "dst": self.dst.tolist(),
            "affine": self.affine.tolist(), "weights": self.weights.tolist(), "reg": self.reg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TpsWarp":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("src", "dst", "affine", "weights")),
                   reg=float(d.get("reg", 0.0)))


def fit_tps(src, dst, reg: float = 0.0) -> TpsWarp:
    """Fit the thin-plate spline taking ``src`` points onto ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ContractError(f"fit_tps: src {src.shape} and dst {dst.shape} must both be (k, 2)")
    k = len(src)
    if k < 3:
        raise ContractError("fit_tps needs at least 3 control points")
    if reg < 0:
        raise ContractError("TPS regularisation must be non-negative")
    p = np.hstack([np.ones((k, 1)), src])
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1.0):
        raise SingularSystemError("control points are collinear; TPS system is singular")
    a = np.zeros((k + 3, k + 3))
    a[:k, :k] = tps_kernel(_pairwise(src, src)) + reg * np.eye(k)
    a[:k, k:] = p
    a[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = dst
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"TPS system is singular: {exc}") from None
    return TpsWarp(src, dst, sol[k:].T.copy(), sol[:k].copy(), float(reg))


def mirror_correspondences(lm_roi: LandmarkSet, lm_flip_roi: LandmarkSet) -> tuple[np.ndarray, np.ndarray]:
    """Control pairs taking each ROI landmark to its contralateral partner in the flipped ROI."""
    return lm_roi.points.copy(), lm_flip_roi.points[PARTNER].copy()


def warp_to_grid(warp: TpsWarp, feat_hw: tuple, roi_hw: tuple) -> np.ndarray:
    """Evaluate the warp at feature-cell centres; returns a (1, 2, Hf, Wf) sampling grid."""
    hf, wf = feat_hw
    h, w = roi_hw
    if h % hf or w % wf or h // hf != w // wf:
        raise ContractError(f"feature grid {feat_hw} is not an integer-stride reduction of ROI {roi_hw}")
    s = h // hf
    off = (s - 1) / 2.0
    centres = pixel_grid((hf, wf)) * s + off
    src = warp(centres)
    feat = (src - off) / s
    return np.moveaxis(pixel_to_norm(feat, (hf, wf)), -1, 0)[None]
