import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aasn.errors import ContractError, DimensionError
from aasn.geometry import SymmetryLine, TpsWarp, fit_tps, reflect_image
from aasn.losses import (
    FractureAnnotations,
    bce_loss,
    contrastive_loss,
    desk_radius,
    make_contrast_mask,
    make_mask,
    read_annotations,
    total_loss,
    write_annotations,
)
from aasn.tensor import Tensor, conv2d, linear_1x1, sigmoid

HW = (32, 64)


def test_desk_radius_scales_linearly():
    assert desk_radius(256) == 50
    assert desk_radius(64) == 12
    assert desk_radius(128) == 25


def test_empty_annotations_give_empty_mask():
    m = make_mask(FractureAnnotations(np.zeros((0, 2)), 5.0), HW, 2)
    assert m.shape == (1, 1, 16, 32) and not m.any()


@pytest.mark.parametrize("stride", [1, 2, 4])
def test_disc_area_close_to_pi_r2(stride):
    r = 24.0
    m = make_mask(FractureAnnotations([[63.5, 47.5]], r), (96, 128), stride)
    assert set(np.unique(m)) <= {0.0, 1.0}
    area = m.sum()
    assert abs(area - math.pi * r * r / stride**2) <= 0.1 * math.pi * r * r / stride**2


def test_mask_matches_brute_force(rng):
    pts = rng.uniform(0, 60, (3, 2))
    m = make_mask(FractureAnnotations(pts, 6.0), HW, 4)[0, 0]
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            c = np.array([4 * j + 1.5, 4 * i + 1.5])
            assert m[i, j] == float(min(np.hypot(*(c - p)) for p in pts) <= 6.0)


def test_annotation_file_roundtrip(tmp_path):
    p = tmp_path / "a.txt"
    write_annotations(p, [[1.25, 2.5], [3.0, 4.0]])
    np.testing.assert_allclose(read_annotations(p), [[1.25, 2.5], [3.0, 4.0]])
    write_annotations(p, np.zeros((0, 2)))
    assert read_annotations(p).shape == (0, 2)


def test_bad_radius_rejected():
    with pytest.raises(ContractError):
        FractureAnnotations([[1, 1]], 0.0)


# -- contrast mask ---------------------------------------------------------------


def identity_warp():
    return TpsWarp.identity(np.array([[0.0, 0.0], [63.0, 0.0], [0.0, 31.0], [63.0, 31.0]]))


def test_contrast_mask_empty():
    z = np.zeros((1, 1) + HW, np.float32)
    assert not make_contrast_mask(z, z, identity_warp(), 8).any()


def test_symmetric_mask_is_a_fixed_point():
    m = make_mask(FractureAnnotations([[15.5, 15.5], [47.5, 15.5]], 5.0), HW)
    mf = reflect_image(m[0, 0], SymmetryLine([31.5, 0.0], [0.0, 1.0]))
    out = make_contrast_mask(m, mf, identity_warp(), 1)
    np.testing.assert_array_equal(out, m)


def test_one_sided_disc_becomes_two():
    m = make_mask(FractureAnnotations([[15.5, 15.5]], 5.0), HW)
    mf = reflect_image(m[0, 0], SymmetryLine([31.5, 0.0], [0.0, 1.0]))
    out = make_contrast_mask(m, mf, identity_warp(), 1)[0, 0]
    assert out[15, 15] == 1 and out[15, 47] == 1
    assert out.sum() == 2 * m.sum()
    coarse = make_contrast_mask(m, mf, identity_warp(), 8)
    assert coarse.shape == (1, 1, 4, 8)
    # any positive sub-pixel marks the cell
    pooled = m[0, 0].reshape(4, 8, 8, 8).max(axis=(1, 3))
    assert np.all(coarse[0, 0] >= pooled)


def test_contrast_mask_follows_the_warp():
    m = np.zeros((1, 1) + HW, np.float32)
    mf = make_mask(FractureAnnotations([[40.0, 16.0]], 3.0), HW)
    src = np.array([[0, 0], [63, 0], [0, 31], [63, 31], [20, 10]], dtype=np.float64)
    out = make_contrast_mask(m, mf, fit_tps(src, src + [10.0, 0.0]), 1)[0, 0]
    ys, xs = np.nonzero(out)
    assert abs(xs.mean() - 30.0) < 0.6 and abs(ys.mean() - 16.0) < 0.6


def test_contrast_mask_bad_stride():
    z = np.zeros((1, 1) + HW, np.float32)
    with pytest.raises(ContractError):
        make_contrast_mask(z, z, identity_warp(), 3)


# -- BCE -----------------------------------------------------------------------------


def test_bce_half_is_ln2(rng):
    m = (rng.uniform(size=(2, 1, 4, 8)) > 0.5).astype(np.float32)
    y = Tensor(np.full(m.shape, 0.5, np.float32))
    assert abs(float(bce_loss(y, m).data) - math.log(2)) < 1e-6
    assert abs(float(bce_loss(y, m, logits=Tensor(np.zeros(m.shape, np.float32))).data) - math.log(2)) < 1e-6


def test_bce_perfect_prediction_is_near_zero():
    m = np.zeros((1, 1, 4, 4), np.float32)
    m[0, 0, 1, 2] = 1
    logits = Tensor((m * 2 - 1) * 40)
    assert float(bce_loss(sigmoid(logits), m, logits=logits).data) < 1e-12


def test_bce_matches_direct_sum(rng):
    z = rng.normal(0, 3, (3, 1, 5, 7))
    m = (rng.uniform(size=z.shape) > 0.7).astype(np.float64)
    p = 1 / (1 + np.exp(-z))
    oracle = -np.mean(m * np.log(p) + (1 - m) * np.log(1 - p))
    lt = Tensor(z)
    assert abs(float(bce_loss(sigmoid(lt), m, logits=lt).data) - oracle) < 1e-6
    assert abs(float(bce_loss(Tensor(p), m).data) - oracle) < 1e-6


@given(target=st.sampled_from([0.0, 1.0]), a=st.floats(0.02, 0.98), b=st.floats(0.02, 0.98))
def test_bce_decreases_toward_the_mask(target, a, b):
    near, far = sorted([a, b], key=lambda v: abs(v - target))
    m = np.full((1, 1, 2, 2), target)
    assert float(bce_loss(Tensor(np.full(m.shape, near)), m).data) <= float(bce_loss(Tensor(np.full(m.shape, far)), m).data)


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))


# -- contrastive -----------------------------------------------------------------------


def test_contrastive_branches(rng):
    f = Tensor(rng.normal(size=(2, 8, 4, 8)).astype(np.float32))
    zeros = np.zeros((2, 1, 4, 8))
    assert float(contrastive_loss(f, f, zeros).data) == 0.0
    assert float(contrastive_loss(f, f, np.ones_like(zeros)).data) == pytest.approx(0.5, abs=1e-7)
    assert float(contrastive_loss(f, f, np.ones_like(zeros), margin=0.8, reduction="sum").data) == pytest.approx(0.8 * 64)


def test_contrastive_satisfied_margin_is_zero(rng):
    a = rng.normal(size=(1, 4, 3, 5))
    b = a.copy()
    inside = np.zeros((1, 1, 3, 5))
    inside[..., :, 2:] = 1
    b[:, 0, :, 2:] += 0.8  # d^2 = 0.64 >= 0.5 inside, 0 outside
    assert float(contrastive_loss(Tensor(a), Tensor(b), inside).data) == 0.0


def test_contrastive_matches_direct_sum(rng):
    a, b = rng.normal(size=(2, 2, 6, 3, 4))
    inside = (rng.uniform(size=(2, 1, 3, 4)) > 0.5).astype(float)
    total = 0.0
    for n in range(2):
        for i in range(3):
            for j in range(4):
                d2 = sum((a[n, c, i, j] - b[n, c, i, j]) ** 2 for c in range(6))
                total += max(0.0, 0.5 - d2) if inside[n, 0, i, j] else d2
    assert float(contrastive_loss(Tensor(a), Tensor(b), inside).data) == pytest.approx(total / 24, abs=1e-12)


@given(seed=st.integers(0, 1000))
def test_contrastive_symmetric_and_nonnegative(seed):
    r = np.random.default_rng(seed)
    a, b = Tensor(r.normal(0, 0.3, (1, 3, 4, 4))), Tensor(r.normal(0, 0.3, (1, 3, 4, 4)))
    inside = (r.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
    ab = float(contrastive_loss(a, b, inside).data)
    assert ab >= 0
    assert ab == pytest.approx(float(contrastive_loss(b, a, inside).data), abs=1e-12)


def test_contrastive_projection_applies_g(rng):
    w = rng.normal(size=(5, 4, 1, 1))
    g = lambda t: linear_1x1(t, Tensor(w[:, :, 0, 0]), None)
    a, b = Tensor(rng.normal(size=(1, 4, 2, 3))), Tensor(rng.normal(size=(1, 4, 2, 3)))
    inside = np.zeros((1, 1, 2, 3))
    got = float(contrastive_loss(a, b, inside, use_projection=True, g=g).data)
    want = float(contrastive_loss(conv2d(a, Tensor(w)), conv2d(b, Tensor(w)), inside).data)
    assert got == pytest.approx(want, rel=1e-12)
    with pytest.raises(ContractError):
        contrastive_loss(a, b, inside, use_projection=True)


def test_contrastive_mask_shape_checked(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    with pytest.raises(DimensionError):
        contrastive_loss(a, a, np.zeros((1, 1, 3, 4)))
    with pytest.raises(DimensionError):
        contrastive_loss(a, Tensor(rng.normal(size=(1, 2, 3, 4))), np.zeros((1, 1, 3, 3)))


def test_total_loss():
    lb, lc = Tensor(np.array(0.6931)), Tensor(np.array(0.5))
    assert float(total_loss(lb, lc, 0.5).data) == pytest.approx(0.9431, abs=1e-12)
    assert float(total_loss(lb, lc, 0.0).data) == 0.6931
    assert float(total_loss(lb, None).data) == 0.6931
