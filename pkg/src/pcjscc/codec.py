"""Encoder/decoder pair with a shared configuration."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .decoder import DecodeResult, Decoder
from .encoder import Encoder

LATENT_HEADS = ("maxpool", "projection")


@dataclass
class CodecConfig:
    """Widths and neighborhood settings shared by encoder and decoder."""

    num_points: int  # N; the codec consumes and reproduces exactly N points
    n: int  # channel bandwidth (real dimensions) and stage-2 feature width
    d_f: int  # intermediate feature width
    k: int = 16
    r: float = 0.25
    head: str = "maxpool"
    proj_t: int = 0  # per-point width of the projection head
    coord_hidden: int = 128
    upsample_branches: int = 4
    upsample_scale: float = 0.1

    def __post_init__(self):
        if self.num_points % 16 != 0 or self.num_points < 16:
            raise ValueError("num_points must be a positive multiple of 16")
        if self.n < 2 or self.n % 2 != 0:
            raise ValueError("n must be even and >= 2")
        if self.d_f < 1:
            raise ValueError("d_f must be positive")
        if self.k < 1 or self.r <= 0:
            raise ValueError("neighborhood requires k >= 1 and r > 0")
        if self.head not in LATENT_HEADS:
            raise ValueError(f"head must be one of {LATENT_HEADS}")
        if self.head == "projection":
            rows = self.num_points // 16
            if self.proj_t < 1 or rows * self.proj_t > self.n:
                raise ValueError("projection head requires 1 <= (N/16)*t <= n")
            if (rows * self.proj_t) % 2 != 0:
                raise ValueError("projection latent length must be even")

    @property
    def rows(self) -> int:
        return self.num_points // 16

    @property
    def n_latent(self) -> int:
        """Transmitted latent length: n for max pooling, (N/16)*t for projection."""
        return self.n if self.head == "maxpool" else self.rows * self.proj_t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


class Codec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode(self, xyz: torch.Tensor, feats: torch.Tensor | None = None):
        return self.encoder(xyz, feats)

    def decode(self, y: torch.Tensor, coords: torch.Tensor | None = None) -> DecodeResult:
        return self.decoder(y, coords)
