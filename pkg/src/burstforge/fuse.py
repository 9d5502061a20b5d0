"""Pseudo-burst construction and the shared multi-scale U-Net."""
from __future__ import annotations

from . import tensor as T
from .align import FPM, GCA_RATIO
from .nn import Conv, Module, TConv
from .tensor import Tensor


def unet_width(ch: int) -> int:
    """round(1.5 * ch), then snapped to a multiple of the GCA ratio."""
    w = round(1.5 * ch)
    return max(GCA_RATIO, GCA_RATIO * round(w / GCA_RATIO))


class PseudoBurst(Module):
    """Pseudo-frame c = W_rho applied to channel c of every aligned frame.

    ``e`` is ``[B, f, H, W]``; the result is ``[f, f, H, W]``. The shared
    conv sees only channel ``c`` when producing pseudo-frame ``c``.
    """

    def __init__(self, burst_size: int, f: int, dtype="f32"):
        self.burst_size = burst_size
        self.rho = Conv(burst_size, f, 3, dtype=dtype)

    def forward(self, e: Tensor) -> Tensor:
        if e.ndim != 4 or e.shape[0] != self.burst_size:
            raise ValueError(f"expected [{self.burst_size}, f, H, W] aligned features, got {e.shape}")
        return self.rho(T.transpose(e, (1, 0, 2, 3)))


class MSFUNet(Module):
    """Three-level U-Net with FPMs; weights shared over all pseudo-frames."""

    def __init__(self, f: int, g: int = 2, m: int = 2, dtype="f32"):
        w1 = unet_width(f)
        w2 = unet_width(w1)
        self.widths = (f, w1, w2)
        self.down1 = Conv(f, w1, 3, stride=2, dtype=dtype)
        self.fpm_d1 = FPM(w1, g, m, dtype)
        self.down2 = Conv(w1, w2, 3, stride=2, dtype=dtype)
        self.fpm_d2 = FPM(w2, g, m, dtype)
        self.up1 = TConv(w2, w1, dtype=dtype)
        self.fpm_u1 = FPM(w1, g, m, dtype)
        self.up2 = TConv(w1, f, dtype=dtype)
        self.fpm_u2 = FPM(f, g, m, dtype)

    def forward(self, s: Tensor) -> Tensor:
        h, w = s.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"U-Net input {h}x{w} must be divisible by 4")
        d1 = self.fpm_d1(self.down1(s))
        d2 = self.fpm_d2(self.down2(d1))
        u1 = self.fpm_u1(T.add(self.up1(d2), d1))
        return self.fpm_u2(T.add(self.up2(u1), s))
