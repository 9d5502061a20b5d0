"""Feature processing (RGCAB / FPM) and edge-boosting deformable alignment."""
from __future__ import annotations

from dataclasses import dataclass

from . import ops
from . import tensor as T
from .nn import Conv, Module, Parameter
from .tensor import Tensor

LEAKY_SLOPE = 0.2
GCA_RATIO = 4
# init scale for convs closing a residual branch; keeps deep stacks near identity
RESIDUAL_GAIN = 0.1


class GCA(Module):
    """Global context attention with a residual connection.

    A 1x1 conv scores every pixel, a spatial softmax turns the scores into
    pooling weights, and the pooled ``[f]`` context passes through a
    bottleneck (f -> f/r -> f) before being added back at every pixel.
    """

    def __init__(self, f: int, ratio: int = GCA_RATIO, dtype="f32"):
        if f % ratio:
            raise ValueError(f"feature width {f} not divisible by bottleneck ratio {ratio}")
        self.score = Conv(f, 1, k=1, dtype=dtype)
        self.squeeze = Conv(f, f // ratio, k=1, dtype=dtype)
        self.expand = Conv(f // ratio, f, k=1, dtype=dtype)

    def pooling_weights(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        logits = T.reshape(self.score(x), (n, 1, h * w))
        return T.softmax(logits, axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        x4, squeeze = ops._batched(x)
        n, f, h, w = x4.shape
        attn = T.reshape(self.pooling_weights(x4), (n, h * w, 1))
        context = T.matmul(T.reshape(x4, (n, f, h * w)), attn)
        context = T.reshape(context, (n, f, 1, 1))
        t = self.expand(T.leaky_relu(self.squeeze(context), LEAKY_SLOPE))
        return ops._unbatch(T.add(x4, t), squeeze)


class RGCAB(Module):
    """Residual block followed by global context attention, with outer skip."""

    def __init__(self, f: int, dtype="f32"):
        self.conv1 = Conv(f, f, 3, dtype=dtype)
        self.conv2 = Conv(f, f, 3, dtype=dtype)
        self.gca = GCA(f, dtype=dtype)
        self.out = Conv(f, f, 1, gain=RESIDUAL_GAIN, dtype=dtype)

    def branch(self, x: Tensor) -> Tensor:
        xbar = self.conv2(T.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        return self.out(self.gca(xbar))

    def forward(self, x: Tensor) -> Tensor:
        return T.add(x, self.branch(x))


class RiRGroup(Module):
    def __init__(self, f: int, m: int, dtype="f32"):
        self.blocks = [RGCAB(f, dtype) for _ in range(m)]
        self.tail = Conv(f, f, 3, gain=RESIDUAL_GAIN, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        return T.add(x, self.tail(h))


class FPM(Module):
    """Residual-in-residual stack: ``g`` groups of ``m`` RGCABs."""

    def __init__(self, f: int, g: int = 3, m: int = 3, dtype="f32"):
        if g < 1 or m < 1:
            raise ValueError("FPM needs at least one group and one block")
        self.groups = [RiRGroup(f, m, dtype) for _ in range(g)]
        self.tail = Conv(f, f, 3, gain=RESIDUAL_GAIN, dtype=dtype)

    @property
    def num_blocks(self) -> int:
        return sum(len(grp.blocks) for grp in self.groups)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for grp in self.groups:
            h = grp(h)
        return T.add(x, self.tail(h))


@dataclass
class DeformField:
    offsets: Tensor  # [N,18,H,W], (dy, dx) per tap
    masks: Tensor    # [N,9,H,W], in [0, 1]


class OffsetPredictor(Module):
    """Offset conv: (frame, base) features -> 18 offsets + 9 sigmoid masks.

    Zero-initialized, so a fresh predictor yields zero offsets and masks of
    0.5 everywhere.
    """

    def __init__(self, f: int, dtype="f32"):
        self.conv = Conv(2 * f, 27, 3, zero_init=True, dtype=dtype)

    def forward(self, y: Tensor, y_base: Tensor) -> DeformField:
        if y.shape != y_base.shape:
            raise ValueError(f"frame features {y.shape} and base features {y_base.shape} differ")
        raw = self.conv(T.concat([y, y_base], axis=1))
        offsets = T.slice_axis(raw, 1, 0, 18)
        masks = T.sigmoid(T.slice_axis(raw, 1, 18, 27))
        return DeformField(offsets, masks)


class DeformStage(Module):
    def __init__(self, f: int, dtype="f32"):
        self.predict = OffsetPredictor(f, dtype)
        self.weight = Parameter((f, f, 3, 3), "he_normal", f * 9, dtype)

    def forward(self, y: Tensor, y_base: Tensor) -> Tensor:
        field = self.predict(y, y_base)
        return ops.deform_conv2d(y, field.offsets, field.masks, self.weight)


class EBFA(Module):
    """Edge boosting feature alignment for a burst ``[B, Cin, H, W]``.

    Frame 0 is the base; every frame, including the base, is aligned to the
    base features by three deformable stages, refined by an FPM, and boosted
    with the residue against the base: ``e = raf + W3(raf - y_base)``.
    """

    def __init__(self, in_channels: int, f: int, stages: int = 3, dtype="f32"):
        self.conv_in = Conv(in_channels, f, 3, bias=True, dtype=dtype)
        self.fpm_in = FPM(f, 3, 3, dtype)
        self.stages = [DeformStage(f, dtype) for _ in range(stages)]
        self.fpm_out = FPM(f, 3, 3, dtype)
        self.edge = Conv(f, f, 3, dtype=dtype)

    def features(self, burst: Tensor) -> Tensor:
        return self.fpm_in(self.conv_in(burst))

    def align(self, y: Tensor) -> tuple[Tensor, Tensor]:
        b = y.shape[0]
        base = T.slice_axis(y, 0, 0, 1)
        base_b = T.concat([base] * b, axis=0) if b > 1 else base
        h = y
        for stage in self.stages:
            h = stage(h, base_b)
        return h, base_b

    def forward(self, burst: Tensor) -> Tensor:
        if burst.ndim != 4 or burst.shape[0] < 1:
            raise ValueError(f"burst must be [B,C,H,W] with B >= 1, got {burst.shape}")
        if burst.shape[1] != self.conv_in.spec.in_channels:
            raise ValueError(
                f"burst has {burst.shape[1]} channels, model expects {self.conv_in.spec.in_channels}")
        y = self.features(burst)
        aligned, base_b = self.align(y)
        raf = self.fpm_out(aligned)
        return T.add(raf, self.edge(T.sub(raf, base_b)))

