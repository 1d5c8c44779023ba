"""Deterministic bilateral "pelvic phantom" generator.

Each sample is rendered analytically in a canonical, exactly mirror-symmetric
frame and then posed by a global affine map, so the ground-truth landmarks and
lesion points are known to machine precision.

Asymmetry sources, and whether they are pathological:

* global pose (rotation, scale, shear, shift) - no; it moves the symmetry line
* per-side smooth intensity fields, gas-like dark blobs and small elastic
  jitter - no
* lesions: thin transverse breaks cut into one side's rami - yes

Both sides also carry identical *bilateral variants*: breaks with the same
appearance as lesions but mirrored onto the other side.  A break is only a
lesion when the contralateral bone is intact.
"""

from __future__ import annotations

import logging
from math import comb
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .geometry import LandmarkSet, SymmetryLine, sample_at

log = logging.getLogger(__name__)

_REF_W = 224.0

# left-side control polygons relative to the symphysis centre, at 224 px width
_CURVES = {
    "sup_ramus": np.array([[-52.0, -16.0], [-28.0, -30.0], [-5.0, -12.0]]),
    "inf_ramus": np.array([[-5.0, 12.0], [-16.0, 36.0], [-46.0, 40.0], [-56.0, 2.0]]),
    "pubic_body": np.array([[-5.0, -12.0], [-6.5, 0.0], [-5.0, 12.0]]),
    "ilium": np.array([[-34.0, -44.0], [-72.0, -74.0], [-100.0, -40.0]]),
}
_LESION_CURVES = ("sup_ramus", "inf_ramus")
# landmark -> (curve, arc parameter), pair index order L1..L7
_LANDMARK_ARCS = (
    ("ilium", 0.3), ("ilium", 0.7),
    ("sup_ramus", 0.1), ("sup_ramus", 0.5), ("sup_ramus", 0.9),
    ("inf_ramus", 0.3), ("inf_ramus", 0.7),
)
_SYMPHYSIS = np.array([[0.0, -13.0], [0.0, 13.0]])


@dataclass
class PhantomSpec:
    seed: int = 0
    image_hw: tuple = (128, 224)
    n_images: int = 100
    lesion_prob: float = 0.4
    max_lesions: int = 2
    pose_magnitude: float = 1.0
    nuisance_magnitude: float = 1.25
    lesion_contrast: float = 0.2
    lesion_width_px: float = 2.5
    noise_sigma: float = 0.02
    max_variants: int = 3

    def validate(self) -> None:
        if not 0.0 <= self.lesion_prob <= 1.0:
            raise ConfigError(f"lesion_prob must be in [0, 1], got {self.lesion_prob}")
        for name in ("pose_magnitude", "nuisance_magnitude", "lesion_contrast", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lesion_width_px <= 0:
            raise ConfigError("lesion_width_px must be positive")
        if self.max_lesions < 1 or self.max_variants < 0 or self.n_images < 0:
            raise ConfigError("max_lesions >= 1, max_variants >= 0 and n_images >= 0 are required")
        h, w = self.image_hw
        if h < 32 or w < 64:
            raise ConfigError(f"image_hw {self.image_hw} too small for the phantom layout")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d


@dataclass
class PhantomSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    landmarks: LandmarkSet
    annotations: np.ndarray  # (k, 2) lesion centres in image pixels
    index: int
    seed: int
    # generator geometry kept for the mirror-window oracle
    mirror_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    lesion_sides: tuple = ()

    @property
    def label(self) -> int:
        return int(len(self.annotations) > 0)


def _bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    n = len(ctrl) - 1
    t = np.asarray(t, dtype=np.float64)[..., None]
    out = np.zeros(t.shape[:-1] + (2,))
    for i, c in enumerate(ctrl):
        out += comb(n, i) * (1 - t) ** (n - i) * t ** i * c
    return out


def _mirror(p: np.ndarray) -> np.ndarray:
    q = np.array(p, dtype=np.float64, copy=True)
    q[..., 0] = -q[..., 0]
    return q


class _Anatomy:
    """Per-image symmetric skeleton in canonical coordinates (origin at the symphysis)."""

    n_samples = 160

    def __init__(self, rng: np.random.Generator, scale: float):
        self.scale = scale
        self.curves = {}
        self.half_width = {}
        self.intensity = {}
        for name, ctrl in _CURVES.items():
            jitter = rng.uniform(-3.0, 3.0, size=ctrl.shape)
            jitter[-1] *= 0.3 if name != "ilium" else 1.0
            self.curves[name] = (ctrl + jitter) * scale
            self.half_width[name] = rng.uniform(2.4, 3.6) * scale * (1.4 if name == "ilium" else 1.0)
            self.intensity[name] = rng.uniform(0.55, 0.75)
        # pubic body endpoints follow the rami
        body = self.curves["pubic_body"]
        body[0] = self.curves["sup_ramus"][-1]
        body[-1] = self.curves["inf_ramus"][0]
        self.t = np.linspace(0.0, 1.0, self.n_samples)
        pts, ids, ts = [], [], []
        self.names = list(self.curves)
        self.length = {}
        for side in (0, 1):
            for ci, name in enumerate(self.names):
                p = _bezier(self.curves[name], self.t)
                if side == 1:
                    p = _mirror(p)
                self.length[name] = float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())
                # the body's end samples duplicate the rami ends; ties there would break symmetry
                keep = slice(1, -1) if name == "pubic_body" else slice(None)
                pts.append(p[keep])
                ids.append(np.full(self.n_samples, side * len(self.names) + ci)[keep])
                ts.append(self.t[keep])
        self.points = np.concatenate(pts)
        self.curve_id = np.concatenate(ids)
        self.curve_t = np.concatenate(ts)
        self.tree = cKDTree(self.points)

    def point(self, name: str, t: float, side: int) -> np.ndarray:
        p = _bezier(self.curves[name], np.array([t]))[0]
        return _mirror(p) if side == 1 else p

    def landmarks(self) -> np.ndarray:
        left = np.array([self.point(c, t, 0) for c, t in _LANDMARK_ARCS])
        return np.vstack([left, _mirror(left), _SYMPHYSIS * self.scale])

    def render(self, q: np.ndarray, breaks: list, width_px: float) -> np.ndarray:
        """Bone intensity at canonical points ``q`` (..., 2); ``breaks`` = (side, curve, t, depth)."""
        flat = q.reshape(-1, 2)
        reach = max(self.half_width.values()) + 2.0
        dist, idx = self.tree.query(flat, distance_upper_bound=reach)
        far = ~np.isfinite(dist)
        dist = np.where(far, reach + 1.0, dist)
        idx = np.where(far, 0, idx)
        cid = np.where(far, -1, self.curve_id[idx])
        ct = self.curve_t[idx]
        nc = len(self.names)
        hw = np.array([self.half_width[n] for n in self.names])[cid % nc]
        inten = np.array([self.intensity[n] for n in self.names])[cid % nc]
        # soft-edged band with a brighter cortical rim
        body = np.clip((hw + 0.75 - dist) / 1.5, 0.0, 1.0)
        rim = np.exp(-0.5 * ((dist - (hw - 0.8)) / 0.8) ** 2) * (dist < hw + 1.0)
        bone = inten * body + 0.12 * rim
        half = width_px / 2.0
        for side, name, t0, depth in breaks:
            ci = side * nc + self.names.index(name)
            on = cid == ci
            if not np.any(on):
                continue
            s = np.abs(ct[on] - t0) * self.length[name]
            band = np.clip(half + 0.5 - s, 0.0, 1.0)
            bone[on] = bone[on] - depth * band * body[on]
        return bone.reshape(q.shape[:-1])


def _smooth_side_field(rng, shape, scale, amp):
    """A sum of a broad Gaussian bump and 0-2 small dark blobs, centred somewhere in ``shape``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    f = np.zeros(shape)
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    sig = rng.uniform(10, 25) * scale
    f += rng.uniform(-1, 1) * 0.08 * amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
    for _ in range(rng.integers(0, 3)):
        bx, by = rng.uniform(0, w), rng.uniform(0, h)
        bs = rng.uniform(2.5, 5.0) * scale
        f -= 0.10 * amp * rng.uniform(0.5, 1.0) * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * bs ** 2))
    return f


class PhantomGenerator:
    """Renders sample ``index`` of a :class:`PhantomSpec`; independent of call order."""

    def __init__(self, spec: PhantomSpec):
        spec.validate()
        self.spec = spec
        h, w = spec.image_hw
        self.scale = w / _REF_W
        self.centre = np.array([(w - 1) / 2.0, 0.61 * (h - 1)])

    def _rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.spec.seed, index, 0xA5A5]))

    def _pose(self, rng) -> tuple[np.ndarray, np.ndarray]:
        pm = self.spec.pose_magnitude
        theta = np.deg2rad(rng.uniform(-8, 8) * pm)
        sc = 1.0 + rng.uniform(-0.05, 0.05) * pm
        sh = rng.uniform(-0.05, 0.05) * pm
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        a = sc * rot @ np.array([[1.0, sh], [0.0, 1.0]])
        t = self.centre + rng.uniform(-4, 4, size=2) * pm * self.scale
        return a, t

    def _jitter(self, rng):
        """Small one-sided smooth displacement fields; returns f(q, side) -> displacement."""
        amp = 1.5 * self.spec.nuisance_magnitude * self.scale
        params = [(rng.uniform(-1, 1, size=(2, 2)) * amp, rng.uniform(0.02, 0.05, size=2) / self.scale,
                   rng.uniform(0, 2 * np.pi, size=2)) for _ in (0, 1)]

        def disp(q, side):
            a, k, ph = params[side]
            u = np.sin(k[0] * q[..., 0] + ph[0])
            v = np.sin(k[1] * q[..., 1] + ph[1])
            fade = np.tanh(np.abs(q[..., 0]) / (12 * self.scale))
            d = np.stack([a[0, 0] * u + a[0, 1] * v, a[1, 0] * u + a[1, 1] * v], axis=-1)
            return d * fade[..., None]

        return disp

    def sample(self, index: int) -> PhantomSample:
        spec, rng = self.spec, self._rng(index)
        h, w = spec.image_hw
        for _attempt in range(50):
            anat = _Anatomy(rng, self.scale)
            a, t = self._pose(rng)
            lm_can = anat.landmarks()
            lm_img = lm_can @ a.T + t
            if np.all((lm_img[:, 0] >= 2) & (lm_img[:, 0] <= w - 3) & (lm_img[:, 1] >= 2) & (lm_img[:, 1] <= h - 3)):
                break
        else:  # pragma: no cover - the layout leaves ample room
            raise ConfigError("could not place the phantom inside the image")
        jitter = self._jitter(rng)

        # bilateral variants and one-sided lesions share one appearance model
        breaks, used = [], []
        for _ in range(rng.integers(0, spec.max_variants + 1)):
            name = _LESION_CURVES[rng.integers(len(_LESION_CURVES))]
            t0 = rng.uniform(0.15, 0.85)
            depth = spec.lesion_contrast * rng.uniform(0.9, 1.1)
            breaks += [(0, name, t0, depth), (1, name, t0, depth)]
            used.append((name, t0))
        lesions = []
        if rng.uniform() < spec.lesion_prob:
            side = int(rng.integers(2))
            for _ in range(int(rng.integers(1, spec.max_lesions + 1))):
                for _try in range(100):
                    name = _LESION_CURVES[rng.integers(len(_LESION_CURVES))]
                    t0 = rng.uniform(0.15, 0.85)
                    sep = [abs(t0 - u) * anat.length[name] for n, u in used if n == name]
                    if all(s > 4 * spec.lesion_width_px + 4 for s in sep):
                        break
                else:
                    continue
                depth = spec.lesion_contrast * rng.uniform(1.0, 1.1)
                breaks.append((side, name, t0, depth))
                used.append((name, t0))
                lesions.append((side, name, t0))

        # canonical coordinates of every image pixel, with per-side jitter
        ainv = np.linalg.inv(a)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        pix = np.stack([xx, yy], axis=-1)
        q = (pix - t) @ ainv.T
        left = q[..., 0] < 0
        q = q - np.where(left[..., None], jitter(q, 0), jitter(q, 1))
        bone = anat.render(q, breaks, spec.lesion_width_px * self.scale)

        r2 = (q[..., 0] / (90 * self.scale)) ** 2 + (q[..., 1] / (70 * self.scale)) ** 2
        img = 0.1 + 0.12 * np.exp(-r2) + bone

        if spec.nuisance_magnitude > 0:
            line = SymmetryLine(t, a @ np.array([0.0, 1.0]))
            side_of = line.distance(pix) > 0
            for s in (False, True):
                fld = _smooth_side_field(rng, (h, w), self.scale, spec.nuisance_magnitude)
                img = img + np.where(side_of == s, fld, 0.0) * np.clip(np.abs(line.distance(pix)) / 4, 0, 1)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)

        ann, mir, sides = [], [], []
        for side, name, t0 in lesions:
            qc = anat.point(name, t0, side)
            qm = _mirror(qc)
            ann.append(self._to_image(qc, side, a, t, jitter))
            mir.append(self._to_image(qm, 1 - side, a, t, jitter))
            sides.append(side)
        return PhantomSample(
            image=img,
            landmarks=LandmarkSet(lm_img),
            annotations=np.array(ann, dtype=np.float64).reshape(-1, 2),
            index=index,
            seed=spec.seed,
            mirror_points=np.array(mir, dtype=np.float64).reshape(-1, 2),
            lesion_sides=tuple(sides),
        )

    @staticmethod
    def _to_image(qc, side, a, t, jitter) -> np.ndarray:
        # the drawn bone sits where q - jitter(q) == qc; two fixed-point steps suffice
        q = qc.copy()
        for _ in range(3):
            q = qc + jitter(q, side)
        return q @ a.T + t


def generate(spec: PhantomSpec, start: int = 0) -> Iterator[PhantomSample]:
    gen = PhantomGenerator(spec)
    for i in range(start, spec.n_images):
        yield gen.sample(i)


def window_mean(img: np.ndarray, centre, radius: float = 1.0) -> float:
    """Mean of a (2r+1)^2 bilinear window around a sub-pixel point."""
    offs = np.arange(-radius, radius + 1.0)
    ox, oy = np.meshgrid(offs, offs)
    coords = np.stack([ox + centre[0], oy + centre[1]], axis=-1)
    return float(sample_at(img, coords).mean())


def mirror_contrast(sample: PhantomSample, radius: float = 1.0) -> np.ndarray:
    """Mirrored-window minus lesion-window mean intensity, one value per lesion."""
    return np.array([
        window_mean(sample.image, m, radius) - window_mean(sample.image, p, radius)
        for p, m in zip(sample.annotations, sample.mirror_points)
    ])


def split(labels, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified, seed-deterministic partition of sample indices into three parts."""
    labels = np.asarray(labels).astype(int)
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5111]))
    # overall sizes by largest remainder, then allocate each class proportionally
    sizes = _largest_remainder(fr * n)
    parts: list[list[int]] = [[], [], []]
    classes = sorted(set(labels.tolist()))
    remaining = sizes.copy()
    for c in classes:
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        counts = np.minimum(_largest_remainder(fr * len(idx)), remaining)
        deficit = len(idx) - counts.sum()
        for k in np.argsort(-(remaining - counts), kind="stable"):
            add = min(deficit, remaining[k] - counts[k])
            counts[k] += add
            deficit -= add
        remaining = remaining - counts
        bounds = np.cumsum([0, *counts])
        for k in range(3):
            parts[k].extend(idx[bounds[k]:bounds[k + 1]].tolist())
    out = tuple(np.array(sorted(p), dtype=int) for p in parts)
    for name, p, f in zip(("train", "val", "test"), out, fr):
        if f > 0 and len(p) == 0:
            raise ConfigError(f"{name} partition is empty")
    return out


def _largest_remainder(x: np.ndarray) -> np.ndarray:
    base = np.floor(x + 1e-9).astype(int)
    short = int(round(x.sum())) - base.sum()
    if short > 0:
        order = np.argsort(-(x - base), kind="stable")
        base[order[:short]] += 1
    return base
