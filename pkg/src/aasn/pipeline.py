"""Dataset I/O, per-sample geometry preparation, training, evaluation and warp diagnostics.

A dataset directory holds::

    manifest.json          spec, per-sample label/split and the cached TPS warp
    images/<id>.png        8-bit grayscale phantom
    landmarks/<id>.txt     ``name x y`` per line, image pixels
    annotations/<id>.txt   ``x y`` lesion points, image pixels (empty: negative)
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import model as model_io
from .config import RunConfig
from .errors import CheckpointError, ConfigError, DivergenceError
from .geometry import (
    LandmarkSet,
    TpsWarp,
    extract_roi,
    fit_symmetry_line,
    fit_tps,
    mirror_correspondences,
    pixel_grid,
    read_landmarks,
    reflect_image,
    sample_at,
    warp_to_grid,
    write_landmarks,
)
from .losses import (
    FractureAnnotations,
    bce_loss,
    contrastive_loss,
    make_contrast_mask,
    make_mask,
    read_annotations,
    total_loss,
    write_annotations,
)
from .metrics import EvalRecord, auc, classification_report, write_report
from .model import AasnModel
from .synthdata import PhantomGenerator, split
from .tensor import Adam, Tensor, backward, no_grad

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# image files


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_png(path, img) -> None:
    """Write a [0, 1] float image (H, W) or (H, W, 3) as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# per-sample geometry


@dataclass
class SampleGeometry:
    roi: np.ndarray  # (H, W)
    roi_flipped: np.ndarray
    roi_flipped_warped: np.ndarray  # mirrored ROI pulled into the ROI frame by the warp
    warp: TpsWarp
    points: np.ndarray  # annotation points in ROI pixels
    points_flipped: np.ndarray  # their mirror images in flipped-ROI pixels
    lm_roi: LandmarkSet
    lm_flip_roi: LandmarkSet


def fit_sample_warp(image, lm: LandmarkSet, margin_frac: float, roi_hw: tuple, reg: float) -> TpsWarp:
    line = fit_symmetry_line(lm)
    lm_f = LandmarkSet(line.reflect_points(lm.points))
    _, _, lm_roi = extract_roi(np.zeros(np.shape(image)[-2:], np.float32), lm, margin_frac, roi_hw)
    _, _, lm_flip_roi = extract_roi(np.zeros(np.shape(image)[-2:], np.float32), lm_f, margin_frac, roi_hw)
    src, dst = mirror_correspondences(lm_roi, lm_flip_roi)
    return fit_tps(src, dst, reg)


def sample_geometry(image, lm: LandmarkSet, ann, margin_frac: float, roi_hw: tuple,
                    reg: float, warp: TpsWarp | None = None) -> SampleGeometry:
    """ROI, mirrored ROI, the warp between them and the annotations in both frames."""
    line = fit_symmetry_line(lm)
    flipped = reflect_image(image, line)
    lm_f = LandmarkSet(line.reflect_points(lm.points))
    roi_img, roi, lm_roi = extract_roi(image, lm, margin_frac, roi_hw)
    roi_f_img, roi_f, lm_flip_roi = extract_roi(flipped, lm_f, margin_frac, roi_hw)
    if warp is None:
        warp = fit_tps(*mirror_correspondences(lm_roi, lm_flip_roi), reg)
    ann = np.asarray(ann, dtype=np.float64).reshape(-1, 2)
    pts = roi.to_roi(ann)
    pts_f = roi_f.to_roi(line.reflect_points(ann)) if len(ann) else np.zeros((0, 2))
    warped = sample_at(roi_f_img, warp(pixel_grid(roi_hw)))
    return SampleGeometry(roi_img, roi_f_img, warped, warp, pts.reshape(-1, 2), pts_f.reshape(-1, 2),
                          lm_roi, lm_flip_roi)


# ---------------------------------------------------------------------------
# dataset generation


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def cmd_gen_data(cfg: RunConfig, force: bool = False) -> str:
    """Render the phantom dataset into ``cfg.paths.data_dir``; returns the manifest hash."""
    cfg.validate()
    out = cfg.paths.data_dir
    if os.path.exists(os.path.join(out, "manifest.json")) and not force:
        raise ConfigError(f"{out} already holds a dataset; pass --force to overwrite")
    d = cfg.data
    spec = d.phantom_spec()
    gen = PhantomGenerator(spec)
    samples = [gen.sample(i) for i in range(spec.n_images)]
    labels = np.array([s.label for s in samples])
    parts = split(labels, d.fractions, d.seed)
    which = np.empty(len(samples), dtype=object)
    for name, idx in zip(SPLITS, parts):
        which[idx] = name

    if os.path.isdir(out) and force:
        for sub in ("images", "landmarks", "annotations"):
            shutil.rmtree(os.path.join(out, sub), ignore_errors=True)
        for f in os.listdir(out):
            if f.startswith("prepared_"):
                os.remove(os.path.join(out, f))
    for sub in ("images", "landmarks", "annotations"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)

    roi_hw = cfg.model.input_hw
    entries = []
    for s in samples:
        sid = f"{s.index:06d}"
        write_png(os.path.join(out, "images", f"{sid}.png"), s.image)
        write_landmarks(os.path.join(out, "landmarks", f"{sid}.txt"), s.landmarks)
        write_annotations(os.path.join(out, "annotations", f"{sid}.txt"), s.annotations)
        warp = fit_sample_warp(s.image, s.landmarks, d.margin_frac, roi_hw, d.tps_reg)
        entries.append({"id": sid, "label": s.label, "split": str(which[s.index]), "tps": warp.to_dict()})
    manifest = {
        "spec": spec.to_dict(),
        "tps_key": _tps_key(cfg),
        "counts": {k: int(len(p)) for k, p in zip(SPLITS, parts)},
        "samples": entries,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    h = manifest_hash(manifest)
    log.info("wrote %d samples to %s (manifest %s)", len(entries), out, h[:12])
    return h


def _tps_key(cfg: RunConfig) -> dict:
    return {"margin_frac": cfg.data.margin_frac, "tps_reg": cfg.data.tps_reg, "roi_hw": list(cfg.model.input_hw)}


def load_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"no dataset at {data_dir} (missing manifest.json); run gen-data first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# prepared tensors


@dataclass
class Prepared:
    """Network-ready arrays for one split, stacked along the batch axis."""

    ids: list
    labels: np.ndarray
    roi: np.ndarray  # (N, 1, H, W)
    roi_flipped: np.ndarray
    roi_flipped_warped: np.ndarray
    grid: np.ndarray  # (N, 2, Hf, Wf)
    mask: np.ndarray  # (N, 1, H/os, W/os)
    contrast_mask: np.ndarray  # (N, 1, Hf, Wf)
    points: list  # per-sample (k, 2) ROI pixels

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Prepared":
        idx = np.asarray(idx, dtype=int)
        return Prepared(
            [self.ids[i] for i in idx], self.labels[idx], self.roi[idx], self.roi_flipped[idx],
            self.roi_flipped_warped[idx], self.grid[idx], self.mask[idx], self.contrast_mask[idx],
            [self.points[i] for i in idx],
        )


_PREP_ARRAYS = ("labels", "roi", "roi_flipped", "roi_flipped_warped", "grid", "mask", "contrast_mask")


def prepare_entry(data_dir, entry: dict, cfg: RunConfig, warp: TpsWarp | None) -> dict:
    sid = entry["id"]
    img = read_png(os.path.join(data_dir, "images", f"{sid}.png"))
    lm = read_landmarks(os.path.join(data_dir, "landmarks", f"{sid}.txt"))
    ann = read_annotations(os.path.join(data_dir, "annotations", f"{sid}.txt"))
    mc = cfg.model
    g = sample_geometry(img, lm, ann, cfg.data.margin_frac, mc.input_hw, cfg.data.tps_reg, warp)
    r = cfg.train.dilation_radius
    m_full = make_mask(FractureAnnotations(g.points, r), mc.input_hw, 1)
    m_full_f = make_mask(FractureAnnotations(g.points_flipped, r), mc.input_hw, 1)
    return {
        "labels": int(len(ann) > 0),
        "roi": g.roi[None],
        "roi_flipped": g.roi_flipped[None],
        "roi_flipped_warped": g.roi_flipped_warped[None],
        "grid": warp_to_grid(g.warp, mc.feature_hw, mc.input_hw)[0],
        "mask": make_mask(FractureAnnotations(g.points, r), mc.input_hw, mc.output_stride)[0],
        "contrast_mask": make_contrast_mask(m_full, m_full_f, g.warp, mc.feature_stride)[0],
        "points": g.points,
    }


def _prep_key(cfg: RunConfig, manifest: dict, split_name: str) -> str:
    mc = cfg.model
    key = {
        "manifest": manifest_hash(manifest), "split": split_name, "margin": cfg.data.margin_frac,
        "reg": cfg.data.tps_reg, "hw": list(mc.input_hw), "os": mc.output_stride,
        "fs": mc.feature_stride, "r": cfg.train.dilation_radius, "v": 2,
    }
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def prepare_split(cfg: RunConfig, split_name: str, cache: bool = True) -> Prepared:
    """Load and prepare one split; results are cached next to the dataset."""
    data_dir = cfg.paths.data_dir
    manifest = load_manifest(data_dir)
    entries = [e for e in manifest["samples"] if e["split"] == split_name]
    if not entries:
        raise ConfigError(f"split {split_name!r} of {data_dir} is empty")
    cache_path = os.path.join(data_dir, f"prepared_{_prep_key(cfg, manifest, split_name)}.npz")
    if cache and os.path.exists(cache_path):
        with np.load(cache_path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in _PREP_ARRAYS}
            counts = z["point_counts"]
            flat = z["points"]
        pts = np.split(flat, np.cumsum(counts)[:-1]) if len(counts) else []
        return Prepared([e["id"] for e in entries], points=[p.reshape(-1, 2) for p in pts], **arrays)

    use_cache = manifest.get("tps_key") == _tps_key(cfg)
    rows = [prepare_entry(data_dir, e, cfg, TpsWarp.from_dict(e["tps"]) if use_cache else None) for e in entries]
    dtypes = {"labels": np.int64, "grid": np.float64}
    arrays = {k: np.stack([r[k] for r in rows]).astype(dtypes.get(k, np.float32)) for k in _PREP_ARRAYS}
    pts = [r["points"] for r in rows]
    if cache:
        counts = np.array([len(p) for p in pts], dtype=np.int64)
        flat = np.concatenate(pts) if pts else np.zeros((0, 2))
        tmp = cache_path + ".tmp.npz"
        np.savez(tmp, point_counts=counts, points=flat, **arrays)
        os.replace(tmp, cache_path)
    return Prepared([e["id"] for e in entries], points=pts, **arrays)


# ---------------------------------------------------------------------------
# model execution


def batch_inputs(model: AasnModel, data: Prepared, idx):
    cfg = model.config
    x = Tensor(data.roi[idx])
    if not cfg.two_stream:
        return x, None, None
    if cfg.align == "image":
        return x, Tensor(data.roi_flipped_warped[idx]), None
    return x, Tensor(data.roi_flipped[idx]), data.grid[idx]


def contrastive_weight(tc, epoch: int) -> float:
    """lam for a 1-based epoch, reaching its full value at epoch ``cl_warmup_epochs``.

    Never zero: the projection head must keep receiving gradients.
    """
    if tc.cl_warmup_epochs <= 0:
        return tc.lam
    return tc.lam * min(1.0, epoch / tc.cl_warmup_epochs)


def batch_loss(model: AasnModel, data: Prepared, idx, cfg: RunConfig, lam: float | None = None):
    out = model(*batch_inputs(model, data, idx))
    l_b = bce_loss(out.y, data.mask[idx], out.logits)
    l_c = None
    mc = model.config
    if mc.contrastive != "off":
        proj = mc.contrastive == "on_with_projection"
        l_c = contrastive_loss(out.f, out.f_aligned, data.contrast_mask[idx], cfg.train.margin,
                               use_projection=proj, g=model.project if proj else None,
                               reduction=cfg.train.reduction)
    return total_loss(l_b, l_c, cfg.train.lam if lam is None else lam), l_b, l_c


def predict(model: AasnModel, data: Prepared, batch_size: int = 64, with_distance: bool = False):
    """Heatmaps (N, h, w) in eval mode; optionally the per-cell feature distance |F - F'_f|."""
    model.eval()
    heat, dist = [], []
    with no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            out = model(*batch_inputs(model, data, idx))
            heat.append(out.y.data[:, 0].astype(np.float64))
            if with_distance and out.f_aligned is not None:
                d = out.f.data.astype(np.float64) - out.f_aligned.data
                dist.append(np.sqrt((d * d).sum(axis=1)))
    h = np.concatenate(heat)
    return (h, np.concatenate(dist) if dist else None) if with_distance else h


def evaluation_records(heatmaps, data: Prepared, cfg: RunConfig) -> list:
    return [EvalRecord(h, p, cfg.model.output_stride, cfg.eval.ambiguity_radius)
            for h, p in zip(heatmaps, data.points)]


def _val_auc(model, data, cfg) -> float:
    scores = predict(model, data).reshape(len(data), -1).max(axis=1)
    labels = data.labels
    if labels.min() == labels.max():
        return float("nan")
    return auc(scores, labels)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: list  # per epoch (epoch, l_b, l_c, l, val_auc)
    best_epoch: int
    best_val_auc: float
    checkpoint: str
    seconds: float

    def final_metrics(self) -> dict:
        e = self.history[-1]
        return {"l_b": e[1], "l_c": e[2], "loss": e[3], "val_auc": e[4], "best_val_auc": self.best_val_auc}


def run_header(cfg: RunConfig) -> str:
    """Every section except [model], which the checkpoint writer adds itself."""
    text = cfg.to_text()
    _, rest = model_io.split_header(text)
    return rest


def cmd_train(cfg: RunConfig, train: Prepared | None = None, val: Prepared | None = None) -> TrainResult:
    cfg.validate()
    t0 = time.perf_counter()
    tc = cfg.train
    train = train if train is not None else prepare_split(cfg, "train")
    val = val if val is not None else prepare_split(cfg, "val")
    if tc.max_train and tc.max_train < len(train):
        train = train.subset(np.arange(tc.max_train))
    os.makedirs(cfg.paths.run_dir, exist_ok=True)
    ckpt = os.path.join(cfg.paths.run_dir, "best.ckpt")

    model = AasnModel(cfg.model, seed=tc.seed)
    opt = Adam(model.params, lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x7EA1]))
    history, best, best_epoch = [], -math.inf, -1
    log_path = os.path.join(cfg.paths.run_dir, "train_log.tsv")
    with open(log_path, "w", encoding="utf-8") as log_fh:
        log_fh.write("epoch\tl_b\tl_c\tloss\tval_auc\n")
        for epoch in range(1, tc.epochs + 1):
            model.train()
            lam = contrastive_weight(tc, epoch)
            order = rng.permutation(len(train))
            sums = np.zeros(3)
            n_batches = 0
            for b, s in enumerate(range(0, len(order), tc.batch_size)):
                idx = np.sort(order[s:s + tc.batch_size])
                opt.zero_grad()
                loss, l_b, l_c = batch_loss(model, train, idx, cfg, lam)
                vals = np.array([l_b.item(), 0.0 if l_c is None else l_c.item(), loss.item()])
                if not np.all(np.isfinite(vals)):
                    _dump_divergence(cfg, epoch, b, train, idx, vals)
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {b} (samples {[train.ids[i] for i in idx]})"
                    )
                backward(loss)
                opt.step()
                sums += vals
                n_batches += 1
            val_auc = _val_auc(model, val, cfg)
            l_b, l_c, l = sums / max(n_batches, 1)
            history.append((epoch, float(l_b), float(l_c), float(l), float(val_auc)))
            log_fh.write(f"{epoch}\t{l_b:.8f}\t{l_c:.8f}\t{l:.8f}\t{val_auc:.8f}\n")
            log_fh.flush()
            log.info("epoch %d  L_b %.4f  L_c %.4f  L %.4f  val AUC %.4f", epoch, l_b, l_c, l, val_auc)
            score = val_auc if np.isfinite(val_auc) else -l
            if score >= best:  # ties go to the later, longer-trained epoch
                best, best_epoch = score, epoch
                model_io.save(model, ckpt, run_header(cfg))
    return TrainResult(history, best_epoch, float(best), ckpt, time.perf_counter() - t0)


def _dump_divergence(cfg, epoch, batch, data, idx, vals) -> None:
    path = os.path.join(cfg.paths.run_dir, "divergence.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"epoch": epoch, "batch": batch, "samples": [data.ids[i] for i in idx],
                   "l_b": repr(vals[0]), "l_c": repr(vals[1]), "loss": repr(vals[2])}, fh, indent=1)
    log.error("divergence at epoch %d batch %d; details in %s", epoch, batch, path)


# ---------------------------------------------------------------------------
# evaluation


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[AasnModel, RunConfig]:
    """Load a checkpoint; when ``cfg`` is given its model section must match the stored one."""
    model, rest = model_io.load_with_header(path)
    try:
        stored = RunConfig.from_text(rest, env=False)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint header is not a run config: {exc}") from None
    stored.model = model.config
    if cfg is None:
        cfg = stored
        cfg.apply_env()
    else:
        diffs = [f"{k}: config {getattr(cfg.model, k)!r} vs checkpoint {getattr(model.config, k)!r}"
                 for k in vars(model.config) if getattr(cfg.model, k) != getattr(model.config, k)]
        if diffs:
            raise ConfigError("config/checkpoint mismatch in [model]: " + "; ".join(diffs))
    return model, cfg


def cmd_eval(cfg: RunConfig | None, checkpoint, split_name: str | None = None,
             out_dir: str | None = None, data: Prepared | None = None) -> tuple[dict, str]:
    """Metrics of a checkpoint on one split; writes ``report_<split>.tsv`` (and PNGs if asked)."""
    model, cfg = load_checkpoint(checkpoint, cfg)
    split_name = split_name or cfg.eval.split
    data = data if data is not None else prepare_split(cfg, split_name)
    heat, dist = predict(model, data, with_distance=True)
    records = evaluation_records(heat, data, cfg)
    metrics, curve = classification_report(records)
    out_dir = out_dir or cfg.paths.run_dir
    os.makedirs(out_dir, exist_ok=True)
    report = os.path.join(out_dir, f"report_{split_name}.tsv")
    header = cfg.to_text() + f"\n[eval_run]\ncheckpoint = {os.path.basename(str(checkpoint))}\nsplit = {split_name}\n"
    write_report(report, metrics, curve, header)
    if cfg.eval.n_png > 0:
        write_overlays(os.path.join(out_dir, f"png_{split_name}"), data, heat, dist, cfg.eval.n_png)
    return metrics, report


def _upsample_display(a: np.ndarray, hw: tuple) -> np.ndarray:
    im = Image.fromarray(np.asarray(a, dtype=np.float32), mode="F")
    return np.asarray(im.resize((hw[1], hw[0]), Image.BILINEAR), dtype=np.float64)


def _heat_rgb(base: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Gray base image with the map blended in red."""
    rgb = np.repeat(base[..., None], 3, axis=-1) * 0.7
    rgb[..., 0] += 0.6 * np.clip(heat, 0, 1)
    return np.clip(rgb, 0, 1)


def write_overlays(out_dir, data: Prepared, heat, dist, n: int) -> list:
    """Input, heatmap, contrast-mask and feature-distance panels at ROI size."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    hw = data.roi.shape[2:]
    for i in range(min(n, len(data))):
        base = data.roi[i, 0].astype(np.float64)
        sid = data.ids[i]
        panels = {
            "input": base,
            "heatmap": _heat_rgb(base, _upsample_display(heat[i], hw)),
            "mask": _heat_rgb(base, _upsample_display(data.contrast_mask[i, 0], hw)),
        }
        if dist is not None:
            d = _upsample_display(dist[i], hw)
            panels["featdist"] = _heat_rgb(base, d / (d.max() + 1e-12))
        for name, img in panels.items():
            path = os.path.join(out_dir, f"{sid}_{name}.png")
            write_png(path, img)
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# warp diagnostics


def checkerboard(a: np.ndarray, b: np.ndarray, tile: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[0:a.shape[0], 0:a.shape[1]]
    return np.where(((yy // tile) + (xx // tile)) % 2 == 0, a, b)


def cmd_warp(image_path, landmarks_path, out_dir, margin_frac: float = 0.1,
             roi_hw: tuple = (64, 128), reg: float = 0.0) -> dict:
    """Write I, I_f, the warped I_f and a checkerboard blend; returns per-landmark residuals."""
    img = read_png(image_path)
    lm = read_landmarks(landmarks_path)
    g = sample_geometry(img, lm, np.zeros((0, 2)), margin_frac, tuple(roi_hw), reg)
    os.makedirs(out_dir, exist_ok=True)
    write_png(os.path.join(out_dir, "roi.png"), g.roi)
    write_png(os.path.join(out_dir, "roi_flipped.png"), g.roi_flipped)
    write_png(os.path.join(out_dir, "roi_flipped_warped.png"), g.roi_flipped_warped)
    write_png(os.path.join(out_dir, "checkerboard.png"), checkerboard(g.roi, g.roi_flipped_warped))
    src, dst = mirror_correspondences(g.lm_roi, g.lm_flip_roi)
    res = np.linalg.norm(g.warp(src) - dst, axis=1)
    names = list(g.lm_roi.to_dict())
    residuals = dict(zip(names, res.tolist()))
    with open(os.path.join(out_dir, "residuals.txt"), "w", encoding="utf-8") as fh:
        fh.write("# landmark residual_px\n")
        for k, v in residuals.items():
            fh.write(f"{k} {v:.3e}\n")
    return {"residuals": residuals, "geometry": g}

