"""Candidate operations of the search space, realized over the tensor
engine.

Every block maps C channels to C channels; stride-2 variants halve the
spatial dims.  Parameters are registered with a kind tag ("conv",
"norm", "linear", "bias") so conv-kernel counts can be isolated from
affine/bias bookkeeping when checking the analytical weight formulas.
Convs are bias-free throughout (a norm layer follows wherever a shift
matters); only classifier linears carry biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .engine import ops
from .engine.tensor import Tensor, default_dtype
from .genotype import OpKind


class Buffer:
    """Non-learnable state (running stats); mutable via .value."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


class StateMismatch(RuntimeError):
    """Checkpoint does not match the model; names the first offender."""


class Module:
    def __init__(self):
        self.training = True
        self._entries: list[tuple] = []

    # -- registration -------------------------------------------------
    def add_param(self, name: str, array, kind: str) -> Tensor:
        t = Tensor(np.asarray(array, dtype=default_dtype()), traced=True)
        self._entries.append(("p", name, t, kind))
        return t

    def add_buffer(self, name: str, array) -> Buffer:
        b = Buffer(np.asarray(array))
        self._entries.append(("b", name, b, None))
        return b

    def add_child(self, name: str, module: "Module") -> "Module":
        self._entries.append(("m", name, module, None))
        return module

    # -- traversal ----------------------------------------------------
    def named_params(self, prefix: str = ""):
        for tag, name, obj, kind in self._entries:
            full = f"{prefix}{name}"
            if tag == "p":
                yield full, obj, kind
            elif tag == "m":
                yield from obj.named_params(f"{full}.")

    def parameters(self) -> list:
        return [t for _, t, _ in self.named_params()]

    def named_buffers(self, prefix: str = ""):
        for tag, name, obj, _ in self._entries:
            full = f"{prefix}{name}"
            if tag == "b":
                yield full, obj
            elif tag == "m":
                yield from obj.named_buffers(f"{full}.")

    def modules(self):
        yield self
        for tag, _, obj, _ in self._entries:
            if tag == "m":
                yield from obj.modules()

    def set_training(self, flag: bool) -> None:
        for m in self.modules():
            m.training = flag

    # -- state --------------------------------------------------------
    def state_items(self):
        """(name, ndarray) pairs for params then buffers, in stable
        registration order (checkpoints are byte-deterministic)."""
        for name, t, _ in self.named_params():
            yield name, t.data
        for name, b in self.named_buffers():
            yield f"{name}!buf", b.value

    def load_state(self, mapping) -> None:
        expected = dict(self.state_items())
        for name in expected:
            if name not in mapping:
                raise StateMismatch(f"checkpoint is missing tensor '{name}'")
            if tuple(mapping[name].shape) != tuple(np.shape(expected[name])):
                raise StateMismatch(
                    f"shape mismatch for '{name}': checkpoint {mapping[name].shape}, "
                    f"model {np.shape(expected[name])}"
                )
        for name in mapping:
            if name not in expected:
                raise StateMismatch(f"checkpoint has unexpected tensor '{name}'")
        for name, t, _ in self.named_params():
            t.data = mapping[name].astype(t.data.dtype).reshape(t.data.shape)
        for name, b in self.named_buffers():
            stored = mapping[f"{name}!buf"]
            b.value = stored.astype(b.value.dtype).reshape(np.shape(b.value))

    # -- accounting ---------------------------------------------------
    def count_params(self, kinds=None) -> int:
        total = 0
        for _, t, kind in self.named_params():
            if kinds is None or kind in kinds:
                total += t.data.size
        return total

    def itemize_params(self):
        return [(name, kind, t.data.size) for name, t, kind in self.named_params()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockConfig:
    C: int
    K: int = 3
    stride: int = 1
    F: float = 2.0
    convnext_F: float = 4.0  # expansion used by the plain inverted bottleneck
    activation: str = "gelu"  # gelu | relu
    norm: str = "bn"  # bn | ln
    norm_affine: bool = True
    pib_grouped_reduce: bool = True

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.F < 1:
            raise ValueError(f"bottleneck ratio F must be >= 1, got {self.F}")
        fc = self.F * self.C
        if abs(fc - round(fc)) > 1e-9:
            raise ValueError(f"F*C must be integral, got F={self.F}, C={self.C}")


def _act(cfg: BlockConfig):
    return ops.gelu if cfg.activation == "gelu" else ops.relu


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, groups=1):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if cin % groups or cout % groups:
            raise ValueError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
        fan_in = (cin // groups) * kh * kw
        std = math.sqrt(2.0 / fan_in)
        self.w = self.add_param("weight", rng.normal(0.0, std, (cout, cin // groups, kh, kw)), "conv")
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x):
        return ops.conv2d(x, self.w, stride=self.stride, padding=self.padding,
                          dilation=self.dilation, groups=self.groups)


class WindowedPointwise(Module):
    """1x1 channel reduction where each output channel reads a contiguous,
    evenly spaced window of input channels.  Used for the grouped-style
    PIB reduce when (F, C) admit no standard grouped conv; the weight
    count is out_channels x window either way."""

    def __init__(self, cin, cout, window, rng):
        super().__init__()
        if window > cin:
            raise ValueError(f"window {window} exceeds input channels {cin}")
        std = math.sqrt(2.0 / window)
        self.w = self.add_param("weight", rng.normal(0.0, std, (cout, window)), "conv")
        if cout == 1:
            starts = [0]
        else:
            starts = [(j * (cin - window)) // (cout - 1) for j in range(cout)]
        self.starts = np.asarray(starts, dtype=np.int64)

    def forward(self, x):
        return ops.windowed_pointwise(x, self.w, self.starts)


class BatchNorm(Module):
    def __init__(self, C, affine=True, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum, self.affine = eps, momentum, affine
        if affine:
            self.gamma = self.add_param("gamma", np.ones(C), "norm")
            self.beta = self.add_param("beta", np.zeros(C), "norm")
        else:
            self.gamma = self.beta = None
        self.running_mean = self.add_buffer("running_mean", np.zeros(C, dtype=np.float32))
        self.running_var = self.add_buffer("running_var", np.ones(C, dtype=np.float32))
        self.batches_seen = self.add_buffer("batches_seen", np.zeros((), dtype=np.float32))

    def forward(self, x):
        if self.training:
            y, mean, var = ops.batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            unbiased = var * (m / (m - 1)) if m > 1 else var
            mom = self.momentum
            self.running_mean.value = ((1 - mom) * self.running_mean.value + mom * mean).astype(np.float32)
            self.running_var.value = ((1 - mom) * self.running_var.value + mom * unbiased).astype(np.float32)
            self.batches_seen.value = self.batches_seen.value + 1
            return y
        if float(self.batches_seen.value) == 0.0:
            raise RuntimeError("batch norm in eval mode before any training batch initialized running stats")
        return ops.batch_norm_eval(x, self.gamma, self.beta,
                                   self.running_mean.value.astype(x.data.dtype),
                                   self.running_var.value.astype(x.data.dtype), self.eps)


class LayerNorm(Module):
    def __init__(self, C, affine=True, eps=1e-6):
        super().__init__()
        self.eps = eps
        if affine:
            self.gamma = self.add_param("gamma", np.ones(C), "norm")
            self.beta = self.add_param("beta", np.zeros(C), "norm")
        else:
            # fixed identity affine keeps the op signature uniform
            self.gamma = Tensor(np.ones(C, dtype=default_dtype()))
            self.beta = Tensor(np.zeros(C, dtype=default_dtype()))

    def forward(self, x):
        gamma = self.gamma
        if gamma.data.dtype != x.data.dtype:
            gamma = Tensor(self.gamma.data.astype(x.data.dtype))
            beta = Tensor(self.beta.data.astype(x.data.dtype))
            return ops.layer_norm(x, gamma, beta, self.eps)
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


def make_norm(C, cfg: BlockConfig) -> Module:
    if cfg.norm == "ln":
        return LayerNorm(C, affine=cfg.norm_affine)
    return BatchNorm(C, affine=cfg.norm_affine)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True):
        super().__init__()
        std = math.sqrt(1.0 / din)
        self.w = self.add_param("weight", rng.normal(0.0, std, (din, dout)), "linear")
        self.b = self.add_param("bias", np.zeros(dout), "bias") if bias else None

    def forward(self, x):
        return ops.linear(x, self.w, self.b)


# ---------------------------------------------------------------------------
# search-space blocks
# ---------------------------------------------------------------------------


class ZeroBlock(Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.stride = cfg.stride

    def forward(self, x):
        return ops.zeros_spatial(x, self.stride)


class SkipBlock(Module):
    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        self.is_identity = cfg.stride == 1
        if not self.is_identity:
            self.reduce = self.add_child("reduce", FactorizedReduce(cfg.C, cfg.C, cfg, rng))

    def forward(self, x):
        return x if self.is_identity else self.reduce(x)


class PoolBlock(Module):
    def __init__(self, kind: OpKind, cfg: BlockConfig):
        super().__init__()
        self.kind = kind
        self.stride = cfg.stride
        self.norm = self.add_child("norm", make_norm(cfg.C, cfg))

    def forward(self, x):
        if self.kind is OpKind.MAX_POOL_3X3:
            y = ops.max_pool3(x, self.stride)
        else:
            y = ops.avg_pool3(x, self.stride)
        return self.norm(y)


class SepConv(Module):
    """Two stacked act -> depthwise -> pointwise -> norm passes; only the
    first depthwise carries the stride."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        C, K = cfg.C, cfg.K
        pad = (K - 1) // 2
        self.act = _act(cfg)
        self.dw1 = self.add_child("dw1", Conv2d(C, C, K, rng, stride=cfg.stride, padding=pad, groups=C))
        self.pw1 = self.add_child("pw1", Conv2d(C, C, 1, rng))
        self.norm1 = self.add_child("norm1", make_norm(C, cfg))
        self.dw2 = self.add_child("dw2", Conv2d(C, C, K, rng, stride=1, padding=pad, groups=C))
        self.pw2 = self.add_child("pw2", Conv2d(C, C, 1, rng))
        self.norm2 = self.add_child("norm2", make_norm(C, cfg))

    def forward(self, x):
        y = self.norm1(self.pw1(self.dw1(self.act(x))))
        return self.norm2(self.pw2(self.dw2(self.act(y))))


class DilConv(Module):
    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        C, K = cfg.C, cfg.K
        self.act = _act(cfg)
        # dilation 2 doubles the receptive span, so pad K-1 keeps dims
        self.dw = self.add_child("dw", Conv2d(C, C, K, rng, stride=cfg.stride, padding=K - 1,
                                              dilation=2, groups=C))
        self.pw = self.add_child("pw", Conv2d(C, C, 1, rng))
        self.norm = self.add_child("norm", make_norm(C, cfg))

    def forward(self, x):
        return self.norm(self.pw(self.dw(self.act(x))))


class Conv7x1_1x7(Module):
    """Factorized 7x7: a 7x1 conv striding H then a 1x7 conv striding W."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        C, s = cfg.C, cfg.stride
        self.act = _act(cfg)
        self.conv_v = self.add_child("conv_v", Conv2d(C, C, (7, 1), rng, stride=(s, 1), padding=(3, 0)))
        self.conv_h = self.add_child("conv_h", Conv2d(C, C, (1, 7), rng, stride=(1, s), padding=(0, 3)))
        self.norm = self.add_child("norm", make_norm(C, cfg))

    def forward(self, x):
        return self.norm(self.conv_h(self.conv_v(self.act(x))))


class ConvNeXtBlock(Module):
    """Inverted bottleneck: depthwise K, norm, expand to F*C, GELU,
    contract back to C.  No trailing norm."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        C, K = cfg.C, cfg.K
        fc = int(round(cfg.convnext_F * C))
        self.dw = self.add_child("dw", Conv2d(C, C, K, rng, stride=cfg.stride, padding=(K - 1) // 2, groups=C))
        self.norm = self.add_child("norm", make_norm(C, cfg))
        self.expand = self.add_child("expand", Conv2d(C, fc, 1, rng))
        self.reduce = self.add_child("reduce", Conv2d(fc, C, 1, rng))

    def forward(self, x):
        y = self.norm(self.dw(x))
        return self.reduce(ops.gelu(self.expand(y)))


class PIBConv(Module):
    """Pseudo-inverted bottleneck: like the ConvNeXt block but the
    contraction is grouped (or windowed where grouping is impossible)
    and a second stride-1 depthwise conv plus norm close the block."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        C, K = cfg.C, cfg.K
        fc = int(round(cfg.F * C))
        self.act = _act(cfg)
        self.dw1 = self.add_child("dw1", Conv2d(C, C, K, rng, stride=cfg.stride, padding=(K - 1) // 2, groups=C))
        self.norm1 = self.add_child("norm1", make_norm(C, cfg))
        self.expand = self.add_child("expand", Conv2d(C, fc, 1, rng))
        if not cfg.pib_grouped_reduce:
            reduce: Module = Conv2d(fc, C, 1, rng)
        else:
            f_int = int(round(cfg.F))
            if abs(cfg.F - f_int) < 1e-9 and C % f_int == 0:
                reduce = Conv2d(fc, C, 1, rng, groups=f_int)
            else:
                reduce = WindowedPointwise(fc, C, C, rng)
        self.reduce = self.add_child("reduce", reduce)
        self.dw2 = self.add_child("dw2", Conv2d(C, C, K, rng, stride=1, padding=(K - 1) // 2, groups=C))
        self.norm2 = self.add_child("norm2", make_norm(C, cfg))

    def forward(self, x):
        y = self.norm1(self.dw1(x))
        y = self.reduce(self.act(self.expand(y)))
        return self.norm2(self.dw2(y))


class FactorizedReduce(Module):
    """Stride-2 channel adapter: two offset 1x1 stride-2 convs whose
    outputs concatenate to C_out."""

    def __init__(self, cin, cout, cfg: BlockConfig, rng):
        super().__init__()
        if cout % 2:
            raise ValueError(f"factorized reduce needs even output channels, got {cout}")
        self.act = _act(cfg)
        self.conv1 = self.add_child("conv1", Conv2d(cin, cout // 2, 1, rng, stride=2))
        self.conv2 = self.add_child("conv2", Conv2d(cin, cout // 2, 1, rng, stride=2))
        self.norm = self.add_child("norm", make_norm(cout, cfg))

    def forward(self, x):
        y = self.act(x)
        a = self.conv1(y)
        b = self.conv2(ops.crop_offset(y, 1, 1))
        return self.norm(ops.concat_channels([a, b]))


class ActConvNorm(Module):
    """1x1 projection with leading activation; aligns cell input channels."""

    def __init__(self, cin, cout, cfg: BlockConfig, rng):
        super().__init__()
        self.act = _act(cfg)
        self.conv = self.add_child("conv", Conv2d(cin, cout, 1, rng))
        self.norm = self.add_child("norm", make_norm(cout, cfg))

    def forward(self, x):
        return self.norm(self.conv(self.act(x)))


class Stem(Module):
    def __init__(self, cout, cfg: BlockConfig, rng, cin=3):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, 3, rng, padding=1))
        self.norm = self.add_child("norm", make_norm(cout, cfg))

    def forward(self, x):
        return self.norm(self.conv(x))


class AuxiliaryHead(Module):
    """Secondary classifier fed from the 2/3-depth cell output."""

    def __init__(self, cin, num_classes, hw_in, cfg: BlockConfig, rng):
        super().__init__()
        pooled = (hw_in - 5) // 3 + 1
        if pooled < 2:
            raise ValueError(f"auxiliary head needs >= 8x8 features, got {hw_in}x{hw_in}")
        self.act = _act(cfg)
        self.conv1 = self.add_child("conv1", Conv2d(cin, 128, 1, rng))
        self.norm1 = self.add_child("norm1", make_norm(128, cfg))
        self.conv2 = self.add_child("conv2", Conv2d(128, 768, 2, rng))
        self.norm2 = self.add_child("norm2", make_norm(768, cfg))
        flat = 768 * (pooled - 1) * (pooled - 1)
        self.classifier = self.add_child("classifier", Linear(flat, num_classes, rng))

    def forward(self, x):
        y = ops.avg_pool2d(x, 5, 3, 0)
        y = self.act(self.norm1(self.conv1(y)))
        y = self.act(self.norm2(self.conv2(y)))
        return self.classifier(ops.flatten2d(y))


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------


def make_sep_conv(cfg: BlockConfig, rng) -> Module:
    return SepConv(cfg, rng)


def make_convnext_block(cfg: BlockConfig, rng) -> Module:
    return ConvNeXtBlock(cfg, rng)


def make_pib_conv(cfg: BlockConfig, rng) -> Module:
    return PIBConv(cfg, rng)


def make_dil_conv(cfg: BlockConfig, rng) -> Module:
    return DilConv(cfg, rng)


def make_conv_7x1_1x7(cfg: BlockConfig, rng) -> Module:
    return Conv7x1_1x7(cfg, rng)


def make_pool(cfg: BlockConfig, kind: OpKind) -> Module:
    return PoolBlock(kind, cfg)


def make_skip(cfg: BlockConfig, rng) -> Module:
    return SkipBlock(cfg, rng)


def make_zero(cfg: BlockConfig) -> Module:
    return ZeroBlock(cfg)


def make_factorized_reduce(cin, cout, cfg: BlockConfig, rng) -> Module:
    return FactorizedReduce(cin, cout, cfg, rng)


_KERNEL_OF = {
    OpKind.PIB_CONV_3X3: 3,
    OpKind.PIB_CONV_5X5: 5,
    OpKind.PIB_CONV_7X7: 7,
    OpKind.DIL_CONV_3X3: 3,
    OpKind.DIL_CONV_5X5: 5,
    OpKind.SEP_CONV_3X3: 3,
    OpKind.SEP_CONV_5X5: 5,
    OpKind.CONVNEXT_CONV_7X7: 7,
}


def build_op(kind: OpKind, C: int, stride: int, cfg: BlockConfig, rng) -> Module:
    """Instantiate the block for one genotype edge.  ``cfg`` supplies the
    style knobs (activation, norm, affine, F, grouping); C/K/stride are
    taken from the edge context."""
    cfg = replace(cfg, C=C, stride=stride, K=_KERNEL_OF.get(kind, cfg.K))
    if kind is OpKind.NONE:
        return make_zero(cfg)
    if kind is OpKind.SKIP_CONNECT:
        return make_skip(cfg, rng)
    if kind in (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3):
        return make_pool(cfg, kind)
    if kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5):
        return make_sep_conv(cfg, rng)
    if kind in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
        return make_dil_conv(cfg, rng)
    if kind in (OpKind.PIB_CONV_3X3, OpKind.PIB_CONV_5X5, OpKind.PIB_CONV_7X7):
        return make_pib_conv(cfg, rng)
    if kind is OpKind.CONV_7X1_1X7:
        return make_conv_7x1_1x7(cfg, rng)
    if kind is OpKind.CONVNEXT_CONV_7X7:
        return make_convnext_block(cfg, rng)
    raise ValueError(f"no block realization for {kind}")


def count_block_weights(block: Module, kinds=("conv", "linear")) -> int:
    """Measured learnable-scalar count; defaults to conv/linear kernels
    so the analytical formulas can be checked without norm bookkeeping.
    Pass kinds=None for every learnable scalar."""
    return block.count_params(kinds)
