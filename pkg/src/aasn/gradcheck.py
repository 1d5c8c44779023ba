"""Finite-difference verification of every differentiable op.

Each registered case builds a random instance: a function of a few tensors plus
the float64 base arrays to evaluate it at.  The analytic gradient of
``sum(out * R)`` (``R`` a fixed random projection) is compared with central
differences computed in float64 on up to ``max_coords`` coordinates per input.

``mode=32`` runs the analytic pass in float32 and ``mode=64`` in float64; the
numeric reference is always float64.  The error is the norm-wise relative error
``|g_a - g_n| / max(|g_a|, |g_n|)`` over all checked coordinates.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import _logit
from .tensor import BatchNormState, Tensor, no_grad

TOLERANCE = {32: 1e-3, 64: 1e-6}


@dataclass
class GradCase:
    name: str
    make: Callable  # rng -> (fn, [float64 arrays])
    instances: int = 20
    max_coords: int = 48
    tolerance: dict | None = None
    fd_step: float = 1e-6


@dataclass
class CaseResult:
    name: str
    mode: int
    instances: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


REGISTRY: dict[str, GradCase] = {}


def register(name: str, **kw):
    def deco(make):
        REGISTRY[name] = GradCase(name, make, **kw)
        return make
    return deco


# -- instance helpers ------------------------------------------------------------


def _away_from(rng, shape, gap=1e-2, scale=1.0):
    """Normal values at least ``gap`` from zero (keeps ReLU-type kinks out of reach)."""
    x = rng.normal(0.0, scale, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct_windows(rng, shape, gap=1e-2):
    """Values whose 2x2 windows have a unique maximum by at least ``gap``."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * gap + rng.uniform(0, gap / 4, n)
    return vals.reshape(shape) - vals.mean()


def _small_shape(rng, even=False):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    if even:
        return n, c, 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 4))
    return n, c, int(rng.integers(2, 5)), int(rng.integers(2, 6))


# -- elementwise and reductions ------------------------------------------------


@register("add")
def _case_add(rng):
    s = _small_shape(rng)
    return (lambda a, b: T.add(a, b)), [rng.normal(size=s), rng.normal(size=s)]


@register("sub")
def _case_sub(rng):
    s = _small_shape(rng)
    return (lambda a, b: T.sub(a, b)), [rng.normal(size=s), rng.normal(size=s)]


@register("neg")
def _case_neg(rng):
    return (lambda a: T.neg(a)), [rng.normal(size=_small_shape(rng))]


@register("mul")
def _case_mul(rng):
    s = _small_shape(rng)
    k = float(rng.normal())
    return (lambda a, b: T.mul(T.mul(a, b), k)), [rng.normal(size=s), rng.normal(size=s)]


@register("square")
def _case_square(rng):
    return (lambda a: T.square(a)), [rng.normal(size=_small_shape(rng))]


@register("sum_all")
def _case_sum(rng):
    return (lambda a: T.sum_all(a)), [rng.normal(size=_small_shape(rng))]


@register("mean_all")
def _case_mean(rng):
    return (lambda a: T.mean_all(a)), [rng.normal(size=_small_shape(rng))]


@register("relu")
def _case_relu(rng):
    return (lambda a: T.relu(a)), [_away_from(rng, _small_shape(rng))]


@register("sigmoid")
def _case_sigmoid(rng):
    return (lambda a: T.sigmoid(a)), [rng.normal(0, 2, _small_shape(rng))]


@register("logit")
def _case_logit(rng):
    return (lambda a: _logit(a)), [rng.uniform(0.1, 0.9, _small_shape(rng))]


# -- layers ----------------------------------------------------------------------


@register("conv2d")
def _case_conv(rng):
    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    h, w = int(rng.integers(k, 7)), int(rng.integers(k, 8))
    fn = lambda x, wt, b: T.conv2d(x, wt, b, stride, pad)
    return fn, [rng.normal(size=(n, cin, h, w)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)]


@register("linear_1x1")
def _case_linear(rng):
    n, c, h, w = _small_shape(rng)
    p = int(rng.integers(1, 5))
    return (lambda x, wt, b: T.linear_1x1(x, wt, b)), [
        rng.normal(size=(n, c, h, w)), rng.normal(size=(p, c)), rng.normal(size=p)]


def _bn_fn(mode, mean=None, var=None):
    def fn(x, g, b):
        st = BatchNormState.fresh(x.shape[1], x.dtype)
        if mean is not None:
            st.running_mean = mean.astype(x.dtype)
            st.running_var = var.astype(x.dtype)
        return T.batchnorm2d(x, g, b, st, mode)
    return fn


@register("batchnorm2d_train")
def _case_bn_train(rng):
    n, c, h, w = 2, int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
    return _bn_fn("train"), [rng.normal(1.0, 2.0, (n, c, h, w)), rng.normal(size=c), rng.normal(size=c)]


@register("batchnorm2d_eval")
def _case_bn_eval(rng):
    n, c, h, w = _small_shape(rng)
    mean, var = rng.normal(size=c), rng.uniform(0.5, 2.0, c)
    return _bn_fn("eval", mean, var), [rng.normal(size=(n, c, h, w)), rng.normal(size=c), rng.normal(size=c)]


@register("avgpool2x2")
def _case_avgpool(rng):
    return (lambda a: T.avgpool2x2(a)), [rng.normal(size=_small_shape(rng, even=True))]


@register("maxpool2x2")
def _case_maxpool(rng):
    return (lambda a: T.maxpool2x2(a)), [_distinct_windows(rng, _small_shape(rng, even=True))]


@register("upsample_bilinear2x")
def _case_upsample(rng):
    return (lambda a: T.upsample_bilinear2x(a)), [rng.normal(size=_small_shape(rng))]


@register("concat_channels")
def _case_concat(rng):
    n, c, h, w = _small_shape(rng)
    c2 = int(rng.integers(1, 4))
    return (lambda a, b: T.concat_channels([a, b])), [rng.normal(size=(n, c, h, w)), rng.normal(size=(n, c2, h, w))]


@register("slice_channels")
def _case_slice(rng):
    n, c, h, w = _small_shape(rng)
    c += 1
    lo = int(rng.integers(0, c - 1))
    hi = int(rng.integers(lo + 1, c + 1))
    return (lambda a: T.slice_channels(a, lo, hi)), [rng.normal(size=(n, c, h, w))]


@register("flip_horizontal")
def _case_flip(rng):
    return (lambda a: T.flip_horizontal(a)), [rng.normal(size=_small_shape(rng))]


@register("grid_sample_bilinear")
def _case_grid_sample(rng):
    n, c, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 3)), 5, 5
    ho, wo = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    # some samples fall outside to exercise the zero padding
    grid = rng.uniform(-1.2, 1.2, (n, 2, ho, wo))
    return (lambda x: T.grid_sample_bilinear(x, grid)), [rng.normal(size=(n, c, h, w))]


# -- losses ----------------------------------------------------------------------


@register("bce_with_logits")
def _case_bce(rng):
    s = _small_shape(rng)
    t = (rng.uniform(size=s) < 0.4).astype(np.float64)
    red = str(rng.choice(["mean", "sum"]))
    return (lambda z: T.bce_with_logits(z, t, red)), [rng.normal(0, 3, s)]


@register("contrastive_margin")
def _case_contrastive(rng):
    n, c, h, w = _small_shape(rng)
    a = rng.normal(0, 0.4, (n, c, h, w))
    b = rng.normal(0, 0.4, (n, c, h, w))
    margin = 0.5
    d2 = ((a - b) ** 2).sum(1, keepdims=True)
    # keep the hinge away from its kink
    while np.any(np.abs(margin - d2) < 1e-2):
        b = rng.normal(0, 0.4, (n, c, h, w))
        d2 = ((a - b) ** 2).sum(1, keepdims=True)
    inside = (rng.uniform(size=(n, 1, h, w)) < 0.5).astype(np.float64)
    red = str(rng.choice(["mean", "sum"]))
    return (lambda x, y: T.contrastive_margin(x, y, inside, margin, red)), [a, b]


# -- composites --------------------------------------------------------------------


@register("composite_conv_bn_relu_pool", instances=20)
def _case_composite(rng):
    n, cin, cout = 2, int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = 4, 6
    bn = _bn_fn("train")

    def fn(x, wt, b, g, be):
        return T.sum_all(T.avgpool2x2(T.relu(bn(T.conv2d(x, wt, b, 1, 1), g, be))))

    return fn, [rng.normal(size=(n, cin, h, w)), rng.normal(size=(cout, cin, 3, 3)),
                rng.normal(size=cout), rng.uniform(0.5, 1.5, cout), rng.normal(size=cout)]


@register("projection_head", instances=20)
def _case_project(rng):
    from .model import AasnModel, ModelConfig

    cf = 4
    cfg = ModelConfig(base_channels=1, input_hw=(16, 32), proj_dim=int(rng.integers(1, 5)))
    base = AasnModel(cfg, seed=int(rng.integers(1 << 30)))
    models = {}

    def fn(f, w, b, g, be):
        m = models.setdefault(f.dtype, base.astype(f.dtype))
        m.params.update({"proj.w": w, "proj.b": b, "proj.bn.gamma": g, "proj.bn.beta": be})
        m.bn_state["proj.bn"] = BatchNormState.fresh(cfg.proj_dim, f.dtype)
        return m.project(f)

    pd = cfg.proj_dim
    f = rng.normal(size=(2, cf, 2, 4))
    w, b = rng.normal(size=(pd, cf)), rng.normal(size=pd)
    return fn, [f, w, b, rng.uniform(0.5, 1.5, pd), rng.normal(size=pd)]


def _end_to_end_instance(rng, overrides=None):
    """Full forward plus both losses on a 2x1x16x32 toy configuration.

    A batch of two keeps the fusion BN from normalising over only eight values,
    which would make the float32 gradient ill-conditioned rather than wrong.
    """
    from .model import AasnModel, ModelConfig

    kw = dict(base_channels=2, input_hw=(16, 32), output_stride=4)
    kw.update(overrides or {})
    cfg = ModelConfig(**kw)
    base = AasnModel(cfg, seed=int(rng.integers(1 << 30)))
    names = sorted(base.params)
    pick = [names[i] for i in rng.choice(len(names), size=min(6, len(names)), replace=False)]
    roi = rng.uniform(size=(2, 1, 16, 32))
    roi_f = rng.uniform(size=(2, 1, 16, 32))
    fh, fw = cfg.feature_hw
    grid = T.identity_grid(fh, fw, np.float64) + rng.uniform(-0.1, 0.1, (1, 2, fh, fw))
    m = (rng.uniform(size=(2, 1) + cfg.output_hw) < 0.3).astype(np.float64)
    m_hat = (rng.uniform(size=(2, 1, fh, fw)) < 0.4).astype(np.float64)
    models = {}

    def fn(x, *ps):
        from .losses import bce_loss, contrastive_loss, total_loss

        mdl = models.setdefault(x.dtype, base.astype(x.dtype))
        mdl.params.update(dict(zip(pick, ps)))
        for name, st in base.bn_state.items():
            mdl.bn_state[name] = BatchNormState.fresh(len(st.running_mean), x.dtype)
        out = mdl.forward(x, Tensor(roi_f.astype(x.dtype)), grid.astype(x.dtype))
        l_b = bce_loss(out.y, m.astype(x.dtype), out.logits)
        proj = cfg.contrastive == "on_with_projection"
        l_c = contrastive_loss(out.f, out.f_aligned, m_hat.astype(x.dtype), 0.5,
                               use_projection=proj, g=mdl.project if proj else None)
        return total_loss(l_b, l_c, 0.5)

    return fn, [roi] + [base.params[k].data.astype(np.float64) for k in pick]


for _fusion in ("before_transition", "after_transition", "inside_transition"):
    REGISTRY[f"end_to_end_{_fusion}"] = GradCase(
        f"end_to_end_{_fusion}",
        (lambda fu: lambda rng: _end_to_end_instance(rng, {"fusion": fu}))(_fusion),
        instances=20,
        max_coords=12,
        fd_step=1e-7,  # the small-batch BN makes the loss strongly curved
    )


# -- checking ----------------------------------------------------------------------


def _objective(fn, arrays, dtype, proj):
    ts = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    out = fn(*ts)
    r = proj if out.ndim else None
    if r is None:
        loss = out
    else:
        loss = T.sum_all(T.mul(out, Tensor(r.astype(dtype))))
    return ts, loss


def _numeric(fn, arrays, proj, coords, step):
    grads = []
    with no_grad():
        for k, a in enumerate(arrays):
            g = np.zeros(len(coords[k]))
            for j, flat in enumerate(coords[k]):
                vals = []
                for sgn in (1.0, -1.0):
                    b = [x.copy() for x in arrays]
                    b[k].flat[flat] += sgn * step
                    _, loss = _objective(fn, b, np.float64, proj)
                    vals.append(float(loss.data))
                g[j] = (vals[0] - vals[1]) / (2 * step)
            grads.append(g)
    return grads


def check_instance(fn, arrays, modes, rng, max_coords=48, step=1e-6) -> dict:
    """Relative error per mode for one instance; the float64 reference is shared."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with no_grad():
        probe = fn(*[Tensor(a) for a in arrays])
    proj = rng.normal(size=probe.shape) if probe.ndim else None
    coords = [
        np.arange(a.size) if a.size <= max_coords else np.sort(rng.choice(a.size, max_coords, replace=False))
        for a in arrays
    ]
    numeric = np.concatenate(_numeric(fn, arrays, proj, coords, step))
    errors = {}
    for mode in modes:
        ts, loss = _objective(fn, arrays, np.float32 if mode == 32 else np.float64, proj)
        T.backward(loss)
        analytic = np.concatenate([
            (t.grad if t.grad is not None else np.zeros(t.shape)).astype(np.float64).ravel()[c]
            for t, c in zip(ts, coords)
        ])
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        err = 0.0 if scale == 0.0 else float(np.linalg.norm(analytic - numeric) / scale)
        errors[mode] = err if np.isfinite(err) else np.inf
    return errors


def run_case(case: GradCase, modes=(32, 64), seed: int = 0, instances: int | None = None) -> list[CaseResult]:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    worst = {m: 0.0 for m in modes}
    n = case.instances if instances is None else instances
    for _ in range(n):
        fn, arrays = case.make(rng)
        for m, err in check_instance(fn, arrays, modes, rng, case.max_coords, case.fd_step).items():
            worst[m] = max(worst[m], err)
    dt = (time.perf_counter() - t0) / len(modes)
    tol = case.tolerance or TOLERANCE
    return [CaseResult(case.name, m, n, worst[m], tol[m], dt) for m in modes]


def run_suite(names=None, modes=(32, 64), seed: int = 0, instances: int | None = None) -> list[CaseResult]:
    names = list(REGISTRY) if names is None else list(names)
    return [r for n in names for r in run_case(REGISTRY[n], modes, seed, instances)]


def format_table(results) -> str:
    lines = [f"{'op':32s} {'mode':>4s} {'n':>3s} {'max_rel_err':>12s} {'tol':>8s}  result"]
    for r in results:
        lines.append(
            f"{r.name:32s} {r.mode:4d} {r.instances:3d} {r.max_error:12.3e} {r.tolerance:8.0e}  "
            f"{'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)


@contextlib.contextmanager
def corrupted(op_name: str, factor: float = 1.5):
    """Test hook: scale the gradient that ``tensor.<op_name>`` sends back by ``factor``.

    Only calls made through the ``tensor`` module namespace are affected, which
    covers every registered case.
    """
    original = getattr(T, op_name)

    def wrapped(*args, **kw):
        out = original(*args, **kw)
        node = out._node
        if node is not None:
            bw = node.backward_fn

            def scaled(g):
                return tuple(None if gi is None else gi * factor for gi in bw(g))

            node.backward_fn = scaled
        return out

    setattr(T, op_name, wrapped)
    try:
        yield
    finally:
        setattr(T, op_name, original)
