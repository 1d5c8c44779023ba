"""Siamese encoder / fusion decoder network and its checkpoint format.

Layout (defaults: 3 encoder blocks, 1 decoder block)::

    stem: conv3x3/2 -> BN -> ReLU                         stride 2
    encoder block i: (conv3x3 -> BN -> ReLU) x 2, then a transition
        (BN -> ReLU -> conv1x1 -> avgpool) between blocks   stride 2**blocks_before_split
    fusion transition (see ``fusion``)                     one more avgpool
    decoder blocks, transitions between them
    head: conv1x1 -> 1 channel, bilinear 2x upsampling to ``output_stride``

Both streams call the same encoder code on the same parameter objects.  Every
convolution that consumes the concatenation of the two streams keeps its weight
as two tensors, ``w`` over the image half and ``w_ref`` over the mirrored half.
The concatenated conv is evaluated as ``conv(x, w) + conv(x_ref, w_ref)``, which
is the same linear map and makes the single-stream reduction exact.
"""

from __future__ import annotations

import copy
import io
import os
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    avgpool2x2,
    batchnorm2d,
    concat_channels,
    conv2d,
    grid_sample_bilinear,
    linear_1x1,
    read_fragment,
    relu,
    sigmoid,
    slice_channels,
    upsample_bilinear2x,
    write_fragment,
)

FUSIONS = ("none", "before_transition", "after_transition", "inside_transition")
ALIGNS = ("image", "feature")
CONTRASTIVE = ("off", "on_no_projection", "on_with_projection")


@dataclass
class ModelConfig:
    base_channels: int = 8
    blocks_before_split: int = 3
    blocks_after_split: int = 1
    fusion: str = "inside_transition"
    align: str = "feature"
    contrastive: str = "on_with_projection"
    proj_dim: int = 0  # 0: same width as the encoder output
    input_hw: tuple = (64, 128)
    output_stride: int = 4
    in_channels: int = 1

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.align not in ALIGNS:
            raise ConfigError(f"align must be one of {ALIGNS}, got {self.align!r}")
        if self.contrastive not in CONTRASTIVE:
            raise ConfigError(f"contrastive must be one of {CONTRASTIVE}, got {self.contrastive!r}")
        if self.base_channels < 1 or self.blocks_before_split < 1 or self.blocks_after_split < 1:
            raise ConfigError("base_channels, blocks_before_split and blocks_after_split must be >= 1")
        total = 2 ** (self.blocks_before_split + self.blocks_after_split)
        h, w = self.input_hw
        if h % total or w % total:
            raise ConfigError(f"input_hw {self.input_hw} must be divisible by {total}")
        os_ = self.output_stride
        if os_ < 1 or os_ & (os_ - 1) or os_ > total:
            raise ConfigError(f"output_stride must be a power of two <= {total}, got {os_}")

    @property
    def feature_stride(self) -> int:
        return 2 ** self.blocks_before_split

    @property
    def decoder_stride(self) -> int:
        return 2 ** (self.blocks_before_split + self.blocks_after_split)

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2 ** (self.blocks_before_split - 1)

    @property
    def feature_hw(self) -> tuple:
        return self.input_hw[0] // self.feature_stride, self.input_hw[1] // self.feature_stride

    @property
    def output_hw(self) -> tuple:
        return self.input_hw[0] // self.output_stride, self.input_hw[1] // self.output_stride

    @property
    def two_stream(self) -> bool:
        return self.fusion != "none" or self.contrastive != "off"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "x".join(str(i) for i in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("["):
                continue
            key, _, val = (p.strip() for p in line.partition("="))
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            if key == "input_hw":
                kw[key] = tuple(int(v) for v in val.split("x"))
            elif kinds[key] in ("int", int):
                kw[key] = int(val)
            else:
                kw[key] = val
        return cls(**kw)


class ForwardOutput(NamedTuple):
    y: Tensor
    logits: Tensor
    f: Tensor
    f_aligned: Tensor | None


class AasnModel:
    """Parameters live in ``params`` (name -> Tensor) and BN statistics in ``bn_state``."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn_state: dict[str, BatchNormState] = {}
        self.mode = "train"
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        self._build()
        del self._rng

    # -- construction ------------------------------------------------------

    def _add_conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True, ref_cin: int = 0):
        std = np.sqrt(2.0 / ((cin + ref_cin) * k * k))
        self.params[f"{name}.w"] = self._param(self._rng.normal(0.0, std, (cout, cin, k, k)))
        if ref_cin:
            self.params[f"{name}.w_ref"] = self._param(self._rng.normal(0.0, std, (cout, ref_cin, k, k)))
        if bias:
            self.params[f"{name}.b"] = self._param(np.zeros(cout))

    def _add_bn(self, name: str, c: int):
        self.params[f"{name}.gamma"] = self._param(np.ones(c))
        self.params[f"{name}.beta"] = self._param(np.zeros(c))
        self.bn_state[name] = BatchNormState.fresh(c, self.dtype)

    def _param(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def _build(self):
        cfg = self.config
        base = cfg.base_channels
        self._add_conv("stem.conv", cfg.in_channels, base, 3)
        self._add_bn("stem.bn", base)
        cin = base
        for i in range(cfg.blocks_before_split):
            c = base * 2 ** i
            self._add_block(f"enc.{i}", cin, c)
            if i < cfg.blocks_before_split - 1:
                self._add_transition(f"enc.{i}.trans", c)
            cin = c
        cf = cfg.feature_channels
        if cfg.fusion == "before_transition":
            self._add_bn("fuse.bn", 2 * cf)
            self._add_conv("fuse.conv", cf, cf, 1, ref_cin=cf)
        elif cfg.fusion == "inside_transition":
            self._add_bn("fuse.bn", cf)
            self._add_conv("fuse.conv", cf, cf, 1, ref_cin=cf)
        else:
            self._add_transition("fuse", cf)
        cin = cf
        for j in range(cfg.blocks_after_split):
            c = cf * 2 ** (j + 1)
            ref = cin if (j == 0 and cfg.fusion == "after_transition") else 0
            self._add_block(f"dec.{j}", cin, c, ref_cin=ref)
            if j < cfg.blocks_after_split - 1:
                self._add_transition(f"dec.{j}.trans", c)
            cin = c
        self._add_conv("head", cin, 1, 1)
        if cfg.contrastive == "on_with_projection":
            pd = cfg.proj_dim or cf
            std = np.sqrt(2.0 / cf)
            self.params["proj.w"] = self._param(self._rng.normal(0.0, std, (pd, cf)))
            self.params["proj.b"] = self._param(np.zeros(pd))
            self._add_bn("proj.bn", pd)

    def _add_block(self, name: str, cin: int, cout: int, ref_cin: int = 0):
        self._add_conv(f"{name}.conv1", cin, cout, 3, ref_cin=ref_cin)
        self._add_bn(f"{name}.bn1", cout)
        self._add_conv(f"{name}.conv2", cout, cout, 3)
        self._add_bn(f"{name}.bn2", cout)

    def _add_transition(self, name: str, c: int):
        self._add_bn(f"{name}.bn", c)
        self._add_conv(f"{name}.conv", c, c, 1)

    # -- layers --------------------------------------------------------------

    def train(self) -> "AasnModel":
        self.mode = "train"
        return self

    def eval(self) -> "AasnModel":
        self.mode = "eval"
        return self

    def _conv(self, name: str, x: Tensor, stride: int = 1, x_ref: Tensor | None = None) -> Tensor:
        w = self.params[f"{name}.w"]
        pad = w.shape[2] // 2
        y = conv2d(x, w, self.params.get(f"{name}.b"), stride, pad)
        if x_ref is not None:
            y = add(y, conv2d(x_ref, self.params[f"{name}.w_ref"], None, stride, pad))
        return y

    def _bn(self, name: str, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                           self.bn_state[name], self.mode)

    def _block(self, name: str, x: Tensor, x_ref: Tensor | None = None) -> Tensor:
        x = relu(self._bn(f"{name}.bn1", self._conv(f"{name}.conv1", x, x_ref=x_ref)))
        return relu(self._bn(f"{name}.bn2", self._conv(f"{name}.conv2", x)))

    def _transition(self, name: str, x: Tensor) -> Tensor:
        return avgpool2x2(self._conv(f"{name}.conv", relu(self._bn(f"{name}.bn", x))))

    # -- public graph ------------------------------------------------------------

    def encode(self, roi: Tensor) -> Tensor:
        cfg = self.config
        if roi.ndim != 4 or roi.shape[1] != cfg.in_channels or roi.shape[2:] != cfg.input_hw:
            raise DimensionError(
                f"encode: expected (N, {cfg.in_channels}, {cfg.input_hw[0]}, {cfg.input_hw[1]}), got {roi.shape}"
            )
        x = relu(self._bn("stem.bn", self._conv("stem.conv", roi, stride=2)))
        for i in range(cfg.blocks_before_split):
            x = self._block(f"enc.{i}", x)
            if i < cfg.blocks_before_split - 1:
                x = self._transition(f"enc.{i}.trans", x)
        return x

    def fuse_and_decode(self, f: Tensor, f_ref: Tensor | None = None) -> Tensor:
        """Fusion transition, decoder blocks and head; returns logits at ``output_stride``."""
        cfg = self.config
        if cfg.fusion != "none" and f_ref is None:
            raise ContractError(f"fusion={cfg.fusion} needs the aligned mirrored features")
        if f_ref is not None and cfg.fusion != "none" and f_ref.shape != f.shape:
            raise DimensionError(f"fuse_and_decode: F {f.shape} vs aligned F_f {f_ref.shape}")
        ref_next = None
        cf = f.shape[1]
        if cfg.fusion == "before_transition":
            z = relu(self._bn("fuse.bn", concat_channels([f, f_ref])))
            x = avgpool2x2(self._conv("fuse.conv", slice_channels(z, 0, cf), x_ref=slice_channels(z, cf, 2 * cf)))
        elif cfg.fusion == "inside_transition":
            a = relu(self._bn("fuse.bn", f))
            b = relu(self._bn("fuse.bn", f_ref))
            x = avgpool2x2(self._conv("fuse.conv", a, x_ref=b))
        elif cfg.fusion == "after_transition":
            x = self._transition("fuse", f)
            ref_next = self._transition("fuse", f_ref)
        else:
            x = self._transition("fuse", f)
        for j in range(cfg.blocks_after_split):
            x = self._block(f"dec.{j}", x, x_ref=ref_next if j == 0 else None)
            if j < cfg.blocks_after_split - 1:
                x = self._transition(f"dec.{j}.trans", x)
        z = self._conv("head", x)
        s = cfg.decoder_stride
        while s > cfg.output_stride:
            z = upsample_bilinear2x(z)
            s //= 2
        return z

    def project(self, f: Tensor) -> Tensor:
        if self.config.contrastive != "on_with_projection":
            raise ContractError("projection head is disabled in this configuration")
        z = linear_1x1(f, self.params["proj.w"], self.params["proj.b"])
        return relu(self._bn("proj.bn", z))

    def forward(self, roi: Tensor, roi_flipped: Tensor | None = None, grid=None) -> ForwardOutput:
        cfg = self.config
        f = self.encode(roi)
        f_al = None
        if cfg.two_stream:
            if roi_flipped is None:
                raise ContractError("this configuration needs the mirrored ROI")
            f_f = self.encode(roi_flipped)
            if cfg.align == "feature":
                if grid is None:
                    raise ContractError("align=feature needs a sampling grid")
                f_al = grid_sample_bilinear(f_f, grid)
            else:
                # the mirrored ROI was warped in image space already
                f_al = f_f
        logits = self.fuse_and_decode(f, f_al if cfg.fusion != "none" else None)
        return ForwardOutput(sigmoid(logits), logits, f, f_al)

    __call__ = forward

    # -- utilities ---------------------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype) -> "AasnModel":
        m = copy.deepcopy(self)
        m.dtype = np.dtype(dtype)
        for k, p in m.params.items():
            m.params[k] = Tensor(p.data.astype(dtype), requires_grad=True)
        for st in m.bn_state.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return m

    def state_arrays(self) -> dict:
        out = {k: p.data for k, p in self.params.items()}
        for k, st in self.bn_state.items():
            out[f"{k}.running_mean"] = st.running_mean
            out[f"{k}.running_var"] = st.running_var
        return out

    def load_arrays(self, arrays: dict) -> None:
        expected = self.state_arrays()
        unknown = sorted(set(arrays) - set(expected))
        if unknown:
            raise CheckpointError(f"unknown parameter name(s): {', '.join(unknown)}")
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameter(s): {', '.join(missing)}")
        staged = {}
        for k, ref in expected.items():
            a = np.asarray(arrays[k])
            if a.size != ref.size:
                raise CheckpointError(f"{k}: {a.size} values stored, model expects shape {ref.shape}")
            staged[k] = a.reshape(ref.shape).astype(self.dtype)
        for k, a in staged.items():
            if k in self.params:
                self.params[k] = Tensor(a, requires_grad=True)
            else:
                layer, stat = k.rsplit(".", 1)
                setattr(self.bn_state[layer], stat, a)


def save(model: AasnModel, path, extra_header: str = "") -> None:
    """Write the model; the header carries the config plus any run description."""
    header = "[model]\n" + model.config.to_text()
    if extra_header:
        header += "\n" + extra_header.rstrip("\n")
    buf = io.BytesIO()
    write_fragment(buf, model.state_arrays(), header)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def split_header(header: str) -> tuple[str, str]:
    """Separate the ``[model]`` section from the rest of a checkpoint header."""
    model_lines, rest, in_model = [], [], False
    for line in header.splitlines():
        s = line.strip()
        if s.startswith("["):
            in_model = s == "[model]"
            if not in_model:
                rest.append(line)
            continue
        (model_lines if in_model else rest).append(line)
    return "\n".join(model_lines), "\n".join(rest)


def load(path) -> AasnModel:
    model, _ = load_with_header(path)
    return model


def load_with_header(path) -> tuple[AasnModel, str]:
    with open(path, "rb") as fh:
        header, arrays = read_fragment(fh)
    model_text, rest = split_header(header)
    try:
        cfg = ModelConfig.from_text(model_text)
        model = AasnModel(cfg)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model header: {exc}") from None
    model.load_arrays(arrays)
    model.eval()
    return model, rest


def single_stream_equivalent(model: AasnModel) -> AasnModel:
    """A ``fusion=none`` model sharing every weight that acts on the image stream."""
    cfg = copy.deepcopy(model.config)
    cfg.fusion = "none"
    cfg.contrastive = "off"
    out = AasnModel(cfg, dtype=model.dtype)
    out.mode = model.mode
    cf = model.config.feature_channels
    src = model.state_arrays()
    arrays = {}
    for k, ref in out.state_arrays().items():
        a = src[k]
        if a.shape != ref.shape and k.startswith("fuse.bn"):
            # the single-stream BN is the image half of the concatenated one
            a = a[:cf]
        arrays[k] = a
    out.load_arrays(arrays)
    return out
