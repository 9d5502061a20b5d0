"""Adaptive group upsampling: attention-weighted merging of pseudo-frames.

Pseudo-frames are taken in consecutive groups of four. For each group the
members are summed, passed through two 1x1 convs, and softmax-normalized
over the member axis to give a per-pixel, per-channel weighting. The
weighted members are concatenated and merged either by a stride-2
transposed conv (``up``) or by a grouped 3x3 conv (``flat``). Each level
shares one merger across all of its groups.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

from . import tensor as T
from .align import LEAKY_SLOPE
from .nn import Conv, Module, TConv
from .tensor import Tensor

GROUP = 4
MODES = ("up", "flat")


class GroupAttention(Module):
    def __init__(self, f: int, dtype="f32"):
        self.reduce = Conv(f, f, 1, dtype=dtype)
        self.expand = Conv(f, GROUP * f, 1, dtype=dtype)

    def forward(self, groups: Tensor) -> Tensor:
        """``groups [G, 4, f, H, W]`` -> attention of the same shape.

        Expanded channel ``i*f + c`` is the logit for member ``i``, channel ``c``.
        """
        if groups.ndim != 5 or groups.shape[1] != GROUP:
            raise ValueError(f"group attention needs groups of exactly {GROUP}, got {groups.shape}")
        g, _, f, h, w = groups.shape
        summed = T.sum(groups, axis=1)
        logits = self.expand(T.leaky_relu(self.reduce(summed), LEAKY_SLOPE))
        logits = T.reshape(logits, (g, GROUP, f, h, w))
        return T.softmax(logits, axis=1)


def _merge_groups(out_channels: int) -> int:
    return math.gcd(GROUP, out_channels)


class AGULevel(Module):
    """One upsampling level.

    ``grouped`` levels merge groups of four frames with attention; a level
    reached with a single frame left just applies the merger to it.
    """

    def __init__(self, f: int, out_channels: int, mode: str, grouped: bool, dtype="f32"):
        if mode not in MODES:
            raise ValueError(f"invalid merge mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.grouped = grouped
        cin = GROUP * f if grouped else f
        self.attention = GroupAttention(f, dtype) if grouped else None
        if mode == "up":
            self.merger = TConv(cin, out_channels, dtype=dtype)
        else:
            groups = _merge_groups(out_channels) if grouped else 1
            self.merger = Conv(cin, out_channels, 3, groups=groups, dtype=dtype)

    def merge(self, members: Tensor, attention: Tensor) -> Tensor:
        g, k, f, h, w = members.shape
        weighted = T.reshape(T.mul(members, attention), (g, k * f, h, w))
        return self.merger(weighted)

    def forward(self, frames: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        n, f, h, w = frames.shape
        if not self.grouped:
            if n != 1:
                raise ValueError(f"ungrouped level expects a single frame, got {n}")
            return self.merger(frames), None
        if n % GROUP:
            raise ValueError(f"{n} frames cannot be split into groups of {GROUP}")
        members = T.reshape(frames, (n // GROUP, GROUP, f, h, w))
        attention = self.attention(members)
        return self.merge(members, attention), attention


def level_plan(f: int, modes: Sequence[str]) -> list[tuple[str, bool, int]]:
    """(mode, grouped, n_groups) per level for ``f`` pseudo-frames.

    Levels group by four while frames remain; any further levels act on the
    single merged frame.
    """
    if f % 16:
        raise ValueError(f"pseudo-burst size {f} is not a multiple of 16")
    plan = []
    n = f
    for mode in modes:
        if n >= GROUP:
            if n % GROUP:
                raise ValueError(f"{n} pseudo-frames cannot be grouped by {GROUP}")
            plan.append((mode, True, n // GROUP))
            n //= GROUP
        else:
            plan.append((mode, False, 1))
    if n != 1:
        raise ValueError(f"{len(modes)} levels leave {n} frames from f={f}; need a single output")
    return plan


class AGU(Module):
    def __init__(self, f: int, out_channels: int, modes: Sequence[str], dtype="f32"):
        self.plan = level_plan(f, modes)
        last = len(self.plan) - 1
        self.levels = [AGULevel(f, out_channels if i == last else f, mode, grouped, dtype)
                       for i, (mode, grouped, _) in enumerate(self.plan)]

    @property
    def groups_per_level(self) -> list[int]:
        return [n for _, _, n in self.plan]

    def forward(self, s: Tensor, return_attention: bool = False):
        """``s [f, f, H, W]`` -> image ``[out_channels, H', W']``."""
        x = s
        maps = []
        for level in self.levels:
            x, att = level(x)
            if att is not None:
                maps.append(att)
        out = T.reshape(x, x.shape[1:])
        return (out, maps) if return_attention else out
