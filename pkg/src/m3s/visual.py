"""Cloud-image encoder/decoder producing per-frame visual features and
4-class segmentation logits.

The encoder is a stride-2 stem plus a chain of multi-scale spatial-channel
blocks: the first blocks use a partial convolution front (convolve a channel
fraction, pass the rest through), the final block a partial spatial
attention front.  Each block splits the map with two dilated depthwise
kernels, lets the two views attend to each other over spatial tokens, and
re-weights channels through gated excitation before the stride-2 handoff.
The decoder upsamples and concatenates top-down, runs a selective
state-space block over the aggregated map's spatial tokens, and reduces the
finest map to one feature row per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .fusion import SelectiveSSMBlock
from .nn import Conv2d, Linear, Module, ModuleList, scaled_dot_attention
from .tensor import Tensor

NUM_CLASSES = 4  # white cloud, gray cloud, sun, background
WHITE_CLOUD, GRAY_CLOUD, SUN, BACKGROUND = 0, 1, 2, 3


@dataclass(frozen=True)
class SCSMConfig:
    """Multi-scale split settings shared by every encoder stage."""

    k1: int = 3
    d1: int = 1
    k2: int = 5
    d2: int = 2
    r: float = 0.25
    lambda_init: float = 1.0

    def validate(self, channels: int) -> int:
        if self.k1 % 2 == 0 or self.k2 % 2 == 0:
            raise ConfigError(f"kernels must be odd, got {self.k1}, {self.k2}")
        if not self.k1 < self.k2:
            raise ConfigError(f"kernel sizes must increase: {self.k1} !< {self.k2}")
        sel = self.r * channels
        if sel <= 0 or abs(sel - round(sel)) > 1e-9:
            raise ConfigError(
                f"partial ratio {self.r} of {channels} channels is not a "
                f"positive integer")
        return int(round(sel))


class PartialConv2d(Module):
    """Convolve the first r*C channels (3x3, size-preserving); identity on
    the remainder."""

    def __init__(self, channels: int, cfg: SCSMConfig, rng):
        super().__init__()
        self.n_sel = cfg.validate(channels)
        self.conv = Conv2d(self.n_sel, self.n_sel, 3, rng, pad=1)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        if self.n_sel == self.channels:
            return self.conv(x)
        head = T.narrow(x, 1, 0, self.n_sel)
        tail = T.narrow(x, 1, self.n_sel, self.channels - self.n_sel)
        return T.concat([self.conv(head), tail], axis=1)


class PartialAttention(Module):
    """Single-head self-attention over spatial tokens on the first r*C
    channels; identity on the remainder."""

    def __init__(self, channels: int, cfg: SCSMConfig, rng):
        super().__init__()
        self.n_sel = cfg.validate(channels)
        self.q = Linear(self.n_sel, self.n_sel, rng)
        self.k = Linear(self.n_sel, self.n_sel, rng)
        self.v = Linear(self.n_sel, self.n_sel, rng)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        head = T.narrow(x, 1, 0, self.n_sel) if self.n_sel < c else x
        tokens = T.transpose(T.reshape(head, (b, self.n_sel, h * w)), (0, 2, 1))
        out = scaled_dot_attention(self.q(tokens), self.k(tokens), self.v(tokens))
        out = T.reshape(T.transpose(out, (0, 2, 1)), (b, self.n_sel, h, w))
        if self.n_sel == c:
            return out
        tail = T.narrow(x, 1, self.n_sel, c - self.n_sel)
        return T.concat([out, tail], axis=1)


class MultiScaleSplit(Module):
    """Two size-preserving dilated depthwise views of the same map."""

    def __init__(self, channels: int, cfg: SCSMConfig, rng):
        super().__init__()
        self.dw1 = Conv2d(channels, channels, cfg.k1, rng, groups=channels,
                          pad=cfg.d1 * (cfg.k1 - 1) // 2, dilation=cfg.d1)
        self.dw2 = Conv2d(channels, channels, cfg.k2, rng, groups=channels,
                          pad=cfg.d2 * (cfg.k2 - 1) // 2, dilation=cfg.d2)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.dw1(x), self.dw2(x)


class CrossScaleInteractiveAttention(Module):
    """Q and one value path from the fine view, K and the other value path
    from the coarse view; attention over spatial tokens; channel concat."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.dw_q = Conv2d(channels, channels, 3, rng, groups=channels, pad=1)
        self.dw_v1 = Conv2d(channels, channels, 3, rng, groups=channels, pad=1)
        self.dw_k = Conv2d(channels, channels, 3, rng, groups=channels, pad=1)
        self.dw_v2 = Conv2d(channels, channels, 3, rng, groups=channels, pad=1)

    def __call__(self, x_k1: Tensor, x_k2: Tensor) -> Tensor:
        if x_k1.shape != x_k2.shape:
            raise ShapeError(f"kernel paths differ: {x_k1.shape} vs {x_k2.shape}")
        b, c, h, w = x_k1.shape

        def tok(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (b, c, h * w)), (0, 2, 1))

        q, v1 = tok(self.dw_q(x_k1)), tok(self.dw_v1(x_k1))
        k, v2 = tok(self.dw_k(x_k2)), tok(self.dw_v2(x_k2))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))),
                       Tensor(np.asarray(1.0 / math.sqrt(c))))
        attn = T.softmax(scores, axis=-1)
        out1 = T.matmul(attn, v1)
        out2 = T.matmul(attn, v2)

        def untok(t: Tensor) -> Tensor:
            return T.reshape(T.transpose(t, (0, 2, 1)), (b, c, h, w))

        return T.concat([untok(out1), untok(out2)], axis=1)


class ChannelExcitation(Module):
    """Screening (sigmoid gates) and enhancement (softmax weights) branches
    from the pooled channel vector; their concatenation, scaled by the
    shared lambda, is reduced back to the stage width by a 1x1 conv."""

    def __init__(self, channels2: int, out_channels: int, cfg: SCSMConfig, rng):
        super().__init__()
        hidden = max(4, channels2 // 4)
        self.scr1 = Linear(channels2, hidden, rng)
        self.scr2 = Linear(hidden, channels2, rng)
        self.enh1 = Linear(channels2, hidden, rng)
        self.enh2 = Linear(hidden, channels2, rng)
        self.lam = Tensor(np.asarray(cfg.lambda_init), requires_grad=True)
        self.reduce = Conv2d(2 * channels2, out_channels, 1, rng)
        self.channels2 = channels2

    def __call__(self, x_a: Tensor) -> Tensor:
        b, c2, h, w = x_a.shape
        pooled = T.global_avg_pool(x_a)                       # (B, 2C)
        w_scr = T.sigmoid(self.scr2(T.gelu(self.scr1(pooled))))
        w_enh = T.softmax(self.enh2(T.gelu(self.enh1(pooled))), axis=-1)
        x_cs = T.mul(x_a, T.reshape(w_enh, (b, c2, 1, 1)))
        x_cf = T.mul(x_a, T.reshape(w_scr, (b, c2, 1, 1)))
        cat = T.concat([x_cs, x_cf], axis=1)
        return self.reduce(T.mul(cat, self.lam))


class SCSMBlock(Module):
    """One encoder stage: partial front, depthwise stem, multi-scale split,
    cross-scale attention + excitation (or a plain merge when disabled),
    residual, stride-2 downsample doubling the channels."""

    def __init__(self, channels: int, cfg: SCSMConfig, rng,
                 attention_front: bool, use_scsm: bool = True):
        super().__init__()
        if attention_front:
            self.front = PartialAttention(channels, cfg, rng)
        else:
            self.front = PartialConv2d(channels, cfg, rng)
        self.stem = Conv2d(channels, channels, 3, rng, groups=channels, pad=1)
        self.split = MultiScaleSplit(channels, cfg, rng)
        if use_scsm:
            self.csia = CrossScaleInteractiveAttention(channels, rng)
            self.ce = ChannelExcitation(2 * channels, channels, cfg, rng)
        else:
            self.merge = Conv2d(2 * channels, channels, 1, rng)
        self._use_scsm = use_scsm
        self.down = Conv2d(channels, 2 * channels, 3, rng, stride=2, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.gelu(self.stem(self.front(x)))
        x_k1, x_k2 = self.split(y)
        if self._use_scsm:
            z = self.ce(self.csia(x_k1, x_k2))
        else:
            z = self.merge(T.concat([x_k1, x_k2], axis=1))
        return T.gelu(self.down(T.add(z, x)))


class Encoder(Module):
    """Stem plus n_stages blocks; emits n_stages+1 maps with channel count
    base*2^(i-1) and spatial extent H/2^i at depth i."""

    def __init__(self, cfg: SCSMConfig, rng, base: int = 64, n_stages: int = 4,
                 use_scsm: bool = True):
        super().__init__()
        if n_stages < 2:
            raise ConfigError(f"encoder needs >= 2 stages, got {n_stages}")
        self.stem = Conv2d(3, base, 3, rng, stride=2, pad=1)
        blocks = []
        ch = base
        for i in range(n_stages):
            is_last = i == n_stages - 1
            blocks.append(SCSMBlock(ch, cfg, rng, attention_front=is_last,
                                    use_scsm=use_scsm))
            ch *= 2
        self.blocks = ModuleList(blocks)
        self.base = base
        self.n_stages = n_stages

    def __call__(self, img: Tensor) -> list[Tensor]:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"encoder expects (B,3,H,W), got {img.shape}")
        h, w = img.shape[2], img.shape[3]
        need = 2 ** (self.n_stages + 1)
        if h % need or w % need:
            raise ShapeError(
                f"spatial dims {h}x{w} must be divisible by {need} "
                f"for {self.n_stages} stages")
        feats = [T.gelu(self.stem(img))]
        for block in self.blocks:
            feats.append(block(feats[-1]))
        return feats


class PlainEncoder(Module):
    """Rudimentary stand-in: a chain of stride-2 convolutions producing the
    same dimension schedule as the full encoder."""

    def __init__(self, rng, base: int = 64, n_stages: int = 4):
        super().__init__()
        self.stem = Conv2d(3, base, 3, rng, stride=2, pad=1)
        convs = []
        ch = base
        for _ in range(n_stages):
            convs.append(Conv2d(ch, 2 * ch, 3, rng, stride=2, pad=1))
            ch *= 2
        self.convs = ModuleList(convs)
        self.base = base
        self.n_stages = n_stages

    def __call__(self, img: Tensor) -> list[Tensor]:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"encoder expects (B,3,H,W), got {img.shape}")
        h, w = img.shape[2], img.shape[3]
        need = 2 ** (self.n_stages + 1)
        if h % need or w % need:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {need}")
        feats = [T.gelu(self.stem(img))]
        for conv in self.convs:
            feats.append(T.gelu(conv(feats[-1])))
        return feats


class SpatialScanBlock(Module):
    """Selective state-space block over row-major flattened spatial tokens."""

    def __init__(self, channels: int, n_state: int, rng):
        super().__init__()
        self.block = SelectiveSSMBlock(channels, n_state, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))
        out = self.block(tokens)
        return T.reshape(T.transpose(out, (0, 2, 1)), (b, c, h, w))


class Decoder(Module):
    """Top-down upsample-and-concat, a spatial scan over the aggregated map,
    and reduction of the finest map to one d_model row per frame."""

    def __init__(self, channels: list[int], d_model: int, n_state: int, rng):
        super().__init__()
        # channels[i] is the width of f_{i+1}; merges run top scale -> scale 1
        merges = []
        for i in range(len(channels) - 2, -1, -1):
            merges.append(Conv2d(channels[i] + channels[i + 1], channels[i], 1, rng))
        self.merges = ModuleList(merges)
        self.scan = SpatialScanBlock(channels[1], n_state, rng)
        d1_ch = channels[0] + channels[1]
        self.row1 = Linear(d1_ch, d_model, rng)
        self.row2 = Linear(d_model, d_model, rng)
        # class tone is a per-pixel property, so the mask head mixes the
        # upsampled context map with the raw image at native resolution
        self.seg_reduce = Conv2d(d1_ch, channels[0], 1, rng)
        self.seg_fine = Conv2d(channels[0] + 3, channels[0], 3, rng, pad=1)
        self.seg = Conv2d(channels[0], NUM_CLASSES, 1, rng)
        self.d_model = d_model

    def __call__(self, feats: list[Tensor], img: Tensor | None = None,
                 want_seg: bool = True):
        u = feats[-1]
        maps = {len(feats): u}
        for j, merge in zip(range(len(feats) - 1, 0, -1), self.merges):
            u = merge(T.concat([feats[j - 1], T.upsample2x_bilinear(u)], axis=1))
            maps[j] = u
        f_s = self.scan(maps[2])
        d1 = T.concat([maps[1], T.upsample2x_bilinear(f_s)], axis=1)
        rows = self.row2(T.gelu(self.row1(T.global_avg_pool(d1))))
        seg = None
        if want_seg:
            if img is None:
                raise ContractError("mask head needs the input image")
            up = T.upsample2x_bilinear(self.seg_reduce(d1))
            seg = self.seg(T.gelu(self.seg_fine(T.concat([up, img], axis=1))))
        return rows, seg


class VisualBranch(Module):
    """Per-frame encoder + decoder; frames are independent, so a stacked
    (B*T) pass and a frame loop give identical rows."""

    def __init__(self, rng, cfg: SCSMConfig | None = None, base: int = 64,
                 n_stages: int = 4, d_model: int = 128, n_state: int = 16,
                 use_scsm: bool = True, plain: bool = False):
        super().__init__()
        cfg = cfg or SCSMConfig()
        if plain:
            self.encoder = PlainEncoder(rng, base=base, n_stages=n_stages)
        else:
            self.encoder = Encoder(cfg, rng, base=base, n_stages=n_stages,
                                   use_scsm=use_scsm)
        channels = [base * 2 ** i for i in range(n_stages + 1)]
        self.decoder = Decoder(channels, d_model, n_state, rng)

    def __call__(self, frames: Tensor, want_seg: bool = False):
        """(F, 3, H, W) frames -> (F, d_model) rows, optional (F,4,H,W) logits."""
        feats = self.encoder(frames)
        return self.decoder(feats, img=frames, want_seg=want_seg)

    def forward_sequence(self, frames: Tensor, want_seg: bool = False):
        """(B, T, 3, H, W) -> (B, T, d_model), optional (B*T, 4, H, W)."""
        b, t = frames.shape[0], frames.shape[1]
        flat = T.reshape(frames, (b * t,) + frames.shape[2:])
        rows, seg = self(flat, want_seg=want_seg)
        return T.reshape(rows, (b, t, self.decoder.d_model)), seg


__all__ = [
    "NUM_CLASSES", "WHITE_CLOUD", "GRAY_CLOUD", "SUN", "BACKGROUND",
    "SCSMConfig", "PartialConv2d", "PartialAttention", "MultiScaleSplit",
    "CrossScaleInteractiveAttention", "ChannelExcitation", "SCSMBlock",
    "Encoder", "PlainEncoder", "SpatialScanBlock", "Decoder", "VisualBranch",
]
