"""Networks for the desk-scale latent diffusion backend.

The autoencoder is an x8 convolutional pair; its decoder is strictly local
(conv + nearest upsampling only, no spatially global normalization), which
downstream blending relies on. The noise predictor is a small residual UNet
with sinusoidal step embedding and a learned per-session context vector.
Low-rank adapters can be attached to every conv in the noise predictor:
out = conv(x) + scale * B(A(x)) with B zero-initialized, so an untrained or
zero-scaled adapter is exactly the identity delta.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class ConvAutoencoder(nn.Module):
    """x8 autoencoder: (3, H, W) -> (c, H/8, W/8) -> (3, H, W) in [0, 1]."""

    def __init__(self, latent_channels: int = 4):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 24, 3, padding=1), nn.SiLU(),
            nn.Conv2d(24, 48, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(48, 64, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 96, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(96, latent_channels, 3, padding=1),
        )
        self.decoder = Decoder(latent_channels)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class Decoder(nn.Module):
    # Receptive field stays within ~3 latent pixels of each output pixel.
    def __init__(self, latent_channels: int):
        super().__init__()
        self.head = nn.Conv2d(latent_channels, 96, 3, padding=1)
        self.c1 = nn.Conv2d(96, 64, 3, padding=1)
        self.c2 = nn.Conv2d(64, 48, 3, padding=1)
        self.c3 = nn.Conv2d(48, 24, 3, padding=1)
        self.out = nn.Conv2d(24, 3, 3, padding=1)

    def forward(self, z):
        h = F.silu(self.head(z))
        h = F.silu(self.c1(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = F.silu(self.c2(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = F.silu(self.c3(F.interpolate(h, scale_factor=2, mode="nearest")))
        return torch.sigmoid(self.out(h))


def step_embedding(step_frac: torch.Tensor, dim: int = 32) -> torch.Tensor:
    """Sinusoidal embedding of the normalized noise index (batch,) -> (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float32, device=step_frac.device)
        * (-math.log(200.0) / max(half - 1, 1))
    )
    args = step_frac[:, None] * 200.0 * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _apply_conv(name: str, conv: nn.Conv2d, x: torch.Tensor, adapter) -> torch.Tensor:
    out = conv(x)
    if adapter is not None and name in adapter.tensors and adapter.scale != 0.0:
        a, b = adapter.tensors[name]
        delta = F.conv2d(
            F.conv2d(x, a, None, stride=conv.stride, padding=conv.padding), b
        )
        out = out + adapter.scale * delta
    return out


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)

    def forward(self, x, emb, prefix, adapter):
        h = F.silu(_apply_conv(f"{prefix}.c1", self.c1, x, adapter))
        h = h + self.emb(emb)[:, :, None, None]
        h = F.silu(_apply_conv(f"{prefix}.c2", self.c2, h, adapter))
        return x + h


class TinyUNet(nn.Module):
    """Residual UNet noise predictor on latents, one downsample level.

    forward returns the epsilon prediction; with return_features=True it also
    returns mid/early activations concatenated at latent resolution, the
    feature map the drag optimizer tracks against.
    """

    EMB_DIM = 64

    def __init__(self, latent_channels: int = 4, width: int = 48):
        super().__init__()
        self.n_channels = latent_channels
        w = width
        self.emb_mlp = nn.Sequential(
            nn.Linear(32, self.EMB_DIM), nn.SiLU(), nn.Linear(self.EMB_DIM, self.EMB_DIM)
        )
        self.session_context = nn.Parameter(torch.zeros(self.EMB_DIM))
        self.conv_in = nn.Conv2d(latent_channels, w, 3, padding=1)
        self.r1 = ResBlock(w, self.EMB_DIM)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.m1 = ResBlock(2 * w, self.EMB_DIM)
        self.m2 = ResBlock(2 * w, self.EMB_DIM)
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.fuse = nn.Conv2d(2 * w, w, 3, padding=1)
        self.r2 = ResBlock(w, self.EMB_DIM)
        self.conv_out = nn.Conv2d(w, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def conv_hosts(self) -> dict[str, nn.Conv2d]:
        return {
            "conv_in": self.conv_in,
            "r1.c1": self.r1.c1, "r1.c2": self.r1.c2,
            "down": self.down,
            "m1.c1": self.m1.c1, "m1.c2": self.m1.c2,
            "m2.c1": self.m2.c1, "m2.c2": self.m2.c2,
            "up": self.up,
            "fuse": self.fuse,
            "r2.c1": self.r2.c1, "r2.c2": self.r2.c2,
            "conv_out": self.conv_out,
        }

    def forward(self, z, step_frac, adapter=None, return_features: bool = False):
        emb = self.emb_mlp(step_embedding(step_frac)) + self.session_context[None, :]
        h0 = F.silu(_apply_conv("conv_in", self.conv_in, z, adapter))
        h1 = self.r1(h0, emb, "r1", adapter)
        hd = F.silu(_apply_conv("down", self.down, h1, adapter))
        hm = self.m1(hd, emb, "m1", adapter)
        hm = self.m2(hm, emb, "m2", adapter)
        hu = F.interpolate(hm, size=h1.shape[-2:], mode="nearest")
        hu = F.silu(_apply_conv("up", self.up, hu, adapter))
        h = F.silu(_apply_conv("fuse", self.fuse, torch.cat([hu, h1], dim=1), adapter))
        h = self.r2(h, emb, "r2", adapter)
        eps = _apply_conv("conv_out", self.conv_out, h, adapter)
        if return_features:
            mid_up = F.interpolate(hm, size=h1.shape[-2:], mode="nearest")
            return eps, torch.cat([h1, mid_up], dim=1)
        return eps


def init_adapter_tensors(unet: TinyUNet, rank: int) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    """Fresh low-rank factors for every host conv; B zero so the delta is 0."""
    tensors = {}
    for name, conv in unet.conv_hosts().items():
        c_out, c_in, kh, kw = conv.weight.shape
        a = torch.randn(rank, c_in, kh, kw) * (1.0 / math.sqrt(c_in * kh * kw))
        b = torch.zeros(c_out, rank, 1, 1)
        tensors[name] = (a, b)
    return tensors
