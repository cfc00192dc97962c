"""Encoder-decoder grid model with per-stage encoder taps.

Encoder stage i runs two 3x3 conv + ReLU at width ``base * 2**i``, records
its activation as tap i, then average-pools by 2. A bottleneck works at
``H / 2**depth``. Each decoder stage upsamples (nearest), applies a 3x3 conv,
concatenates the matching tap and runs two more conv + ReLU. A 1x1 conv maps
to 96 output channels (12 frames x 8 channels, frame-major).

A separate 1x1 ``adapter`` maps 96-channel frame stacks onto the stem width
so predictions and targets can be re-encoded for the hidden-layer loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .features import UNET_CHANNELS
from .nn import Module, he_conv
from .tensor_core import (Tensor, avg_pool2, concat, conv2d, crop_top_left, pad_bottom_right, relu,
                          upsample_nearest2)

OUT_CHANNELS = 96

HEAD_INIT_SCALE = 0.1


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = UNET_CHANNELS
    out_channels: int = OUT_CHANNELS

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    def width(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    @property
    def multiple(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int
    pad_h: int
    pad_w: int


def pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, CropRecord]:
    """Zero-pad the bottom/right of the last two axes up to multiples of ``m``."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    return pad_bottom_right(x, ph, pw), CropRecord(H, W, ph, pw)


def crop(x: Tensor, rec: CropRecord) -> Tensor:
    return crop_top_left(x, rec.height, rec.width)


class _Conv(Module):
    def __init__(self, c_in, c_out, k, rng, dtype):
        super().__init__(dtype)
        self.c_in = c_in
        self.w = self.param("w", he_conv(rng, c_out, c_in, k))
        self.b = self.param("b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b)


class UNet(Module):
    kind = "unet"

    def __init__(self, cfg: UNetConfig | None = None, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg = cfg or UNetConfig()
        rng = np.random.default_rng(seed)
        D = cfg.depth
        self.enc = []
        c_in = cfg.in_channels
        for i in range(D):
            w = cfg.width(i)
            self.enc.append((self.child(f"enc{i}.a", _Conv(c_in, w, 3, rng, dtype)),
                             self.child(f"enc{i}.b", _Conv(w, w, 3, rng, dtype))))
            c_in = w
        wb = cfg.width(D)
        self.mid = (self.child("mid.a", _Conv(c_in, wb, 3, rng, dtype)),
                    self.child("mid.b", _Conv(wb, wb, 3, rng, dtype)))
        self.dec = {}
        for i in reversed(range(D)):
            w = cfg.width(i)
            self.dec[i] = (self.child(f"dec{i}.up", _Conv(cfg.width(i + 1), w, 3, rng, dtype)),
                           self.child(f"dec{i}.a", _Conv(2 * w, w, 3, rng, dtype)),
                           self.child(f"dec{i}.b", _Conv(w, w, 3, rng, dtype)))
        self.head = self.child("head", _Conv(cfg.width(0), cfg.out_channels, 1, rng, dtype))
        # small readout: targets are mostly near zero, so start close to it
        self.head.w.data *= HEAD_INIT_SCALE
        self.adapter = self.child("adapter", _Conv(cfg.out_channels, cfg.in_channels, 1, rng, dtype))

    def config(self) -> dict:
        return {"depth": self.cfg.depth, "base_channels": self.cfg.base_channels}

    def _lift(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))

    def _encode_padded(self, xp: Tensor) -> tuple[list[Tensor], Tensor]:
        taps = []
        h = xp
        for conv_a, conv_b in self.enc:
            h = relu(conv_b(relu(conv_a(h))))
            taps.append(h)
            h = avg_pool2(h)
        return taps, h

    def encoder_only(self, x) -> list[Tensor]:
        """Encoder taps for a stem-width input (the same path the full forward uses)."""
        x = self._lift(x)
        if x.shape[-3] != self.cfg.in_channels:
            raise ShapeError(f"encoder expects {self.cfg.in_channels} channels, got {x.shape[-3]}")
        xp, _ = pad_to_multiple(x, self.cfg.multiple)
        return self._encode_padded(xp)[0]

    def encode_frames(self, stack) -> list[Tensor]:
        """Taps for a 96-channel frame stack, via the learned 1x1 adapter."""
        stack = self._lift(stack)
        if stack.shape[-3] != self.cfg.out_channels:
            raise ShapeError(f"frame stack must have {self.cfg.out_channels} channels, got {stack.shape[-3]}")
        return self.encoder_only(self.adapter(stack))

    def forward(self, x) -> tuple[Tensor, list[Tensor]]:
        x = self._lift(x)
        if x.ndim not in (3, 4) or x.shape[-3] != self.cfg.in_channels:
            raise ShapeError(f"U-Net expects {self.cfg.in_channels} input channels, got shape {x.shape}")
        xp, rec = pad_to_multiple(x, self.cfg.multiple)
        taps, h = self._encode_padded(xp)
        mid_a, mid_b = self.mid
        h = relu(mid_b(relu(mid_a(h))))
        for i in reversed(range(self.cfg.depth)):
            up, conv_a, conv_b = self.dec[i]
            h = relu(up(upsample_nearest2(h)))
            h = concat([h, taps[i]], axis=-3)
            h = relu(conv_b(relu(conv_a(h))))
        return crop(self.head(h), rec), taps

    def __call__(self, x) -> Tensor:
        return self.forward(x)[0]


def unet_forward(model: UNet, features) -> tuple[Tensor, list[Tensor]]:
    return model.forward(features)


def encoder_only(model: UNet, x) -> list[Tensor]:
    return model.encoder_only(x)
