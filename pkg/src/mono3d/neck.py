"""Iterative aggregation of the feature pyramid into one stride-4 map.

Each level is projected to a common width (1x1 conv, per-pixel channel
norm, ReLU). Starting from the deepest level, the running map is
bilinearly upsampled to the next shallower level's size, summed with it,
and fused by a 3x3 conv + ReLU. The fusion stack is norm-free so each
fused output channel depends only on its own conv filter; slicing the
first `slice_channels` channels therefore leaves the remaining filters
with exactly zero gradient.
"""

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .nn import Conv2d, LayerNorm, Module, map_to_tokens, tokens_to_map


@dataclass(frozen=True)
class NeckConfig:
    out_channels: int = 64
    slice_channels: int = 64


class ChannelNorm(Module):
    """LayerNorm over the channel axis, applied independently per pixel."""

    def __init__(self, ch):
        self.norm = LayerNorm(ch)

    def __call__(self, x):
        h, w = x.shape[2], x.shape[3]
        return tokens_to_map(self.norm(map_to_tokens(x)), h, w)


class ProjectNode(Module):
    def __init__(self, in_ch, out_ch, rng):
        self.conv = Conv2d(in_ch, out_ch, 1, rng)
        self.norm = ChannelNorm(out_ch)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


class FuseNode(Module):
    def __init__(self, ch, rng):
        self.conv = Conv2d(ch, ch, 3, rng, padding=1)

    def __call__(self, x):
        return T.relu(self.conv(x))


def _check_pyramid(features):
    if len(features) != 4:
        raise UsageError(f"neck expects 4 pyramid levels, got {len(features)}")
    for i in range(1, 4):
        ph, pw = features[i - 1].shape[2], features[i - 1].shape[3]
        ch, cw = features[i].shape[2], features[i].shape[3]
        if ch != -(-ph // 2) or cw != -(-pw // 2):
            raise DimensionError(
                f"level {i} is {ch}x{cw}, expected ceil-half of {ph}x{pw}"
            )


class Neck(Module):
    """Four pyramid maps -> one [N, slice_channels, H/4, W/4] map."""

    def __init__(self, in_channels, cfg, rng):
        if cfg.slice_channels > cfg.out_channels:
            raise ConfigError(
                f"slice_channels {cfg.slice_channels} exceeds out_channels {cfg.out_channels}"
            )
        if len(in_channels) != 4:
            raise ConfigError("neck needs the four pyramid channel counts")
        self.cfg = cfg
        self.projects = [ProjectNode(c, cfg.out_channels, rng) for c in in_channels]
        self.fuses = [FuseNode(cfg.out_channels, rng) for _ in range(3)]

    def aggregate(self, features):
        """IDA ladder, deepest to shallowest; keeps full out_channels width."""
        _check_pyramid(features)
        x = self.projects[3](features[3])
        for level in (2, 1, 0):
            p = self.projects[level](features[level])
            up = T.bilinear_resize(x, p.shape[2], p.shape[3])
            x = self.fuses[level](p + up)
        return x

    def __call__(self, features):
        x = self.aggregate(features)
        return x[:, : self.cfg.slice_channels]
