"""Decoder: latent expansion, coordinate reconstruction, refinement, offset upsampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Mlp, VectorAttention


@dataclass
class DecodeResult:
    """Final cloud plus the decoder's intermediate estimates."""

    points: torch.Tensor  # (B, N, 3)
    features: torch.Tensor  # (B, N, d_f); produced but unused by the metrics
    x_initial: torch.Tensor | None  # X' from the first coordinate head
    x_refined: torch.Tensor | None  # X'' after attention refinement
    f_initial: torch.Tensor  # (B, N/16, n)
    f_refined: torch.Tensor  # (B, N/16, n)
    displacements: list = field(default_factory=list)  # per stage: (B, M, L, 3)


class OffsetUpsampler(nn.Module):
    """Generate L children per point: x + s*tanh(O_l(f)) with fresh features G_l(f).

    Offsets are bounded to [-s, s] per component by the tanh; children are
    emitted input-major then branch-major.
    """

    def __init__(self, dim: int, branches: int = 4, scale: float = 0.1):
        super().__init__()
        self.scale = scale
        self.offset_heads = nn.ModuleList(Mlp(dim, 3, hidden=dim) for _ in range(branches))
        self.feature_heads = nn.ModuleList(Mlp(dim, dim) for _ in range(branches))

    def forward(self, xyz: torch.Tensor, feats: torch.Tensor):
        if feats.shape[-1] != self.feature_heads[0].net[0].in_features:
            raise ValueError(f"feature width {feats.shape[-1]} does not match upsampler")
        disp = self.scale * torch.stack(
            [torch.tanh(h(feats)) for h in self.offset_heads], dim=2
        )  # (B, M, L, 3)
        children = xyz[:, :, None, :] + disp
        child_feats = torch.stack([h(feats) for h in self.feature_heads], dim=2)
        b, m, l, _ = children.shape
        return (
            children.reshape(b, m * l, 3),
            child_feats.reshape(b, m * l, child_feats.shape[-1]),
            disp,
        )


class Decoder(nn.Module):
    """Noisy latent -> point cloud with exactly N = 16 * rows points.

    Chain: transposed-conv latent expansion (single input position, kernel
    extent = rows, unit stride) -> ReLU -> coordinate head -> attention
    refinement -> refined coordinate head -> width adapter -> two 4x offset
    upsampling stages. When true downsampled coordinates are supplied
    (hybrid transmission), both coordinate heads are bypassed.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.rows = cfg.num_points // 16
        self.expand = nn.ConvTranspose1d(cfg.n_latent, cfg.n, kernel_size=self.rows)
        self.coord_initial = Mlp(cfg.n, 3, hidden=cfg.coord_hidden)  # psi'
        self.refine = VectorAttention(cfg.n, cfg.k, cfg.r)
        self.coord_refined = Mlp(cfg.n, 3, hidden=cfg.coord_hidden)  # psi''
        self.adapter = nn.Linear(cfg.n, cfg.d_f)
        self.up1 = OffsetUpsampler(cfg.d_f, cfg.upsample_branches, cfg.upsample_scale)
        self.up2 = OffsetUpsampler(cfg.d_f, cfg.upsample_branches, cfg.upsample_scale)

    def expand_latent(self, y: torch.Tensor) -> torch.Tensor:
        """(B, n_latent) -> (B, rows, n) feature grid, ReLU applied."""
        if y.shape[-1] != self.cfg.n_latent:
            raise ValueError(f"latent length {y.shape[-1]} != {self.cfg.n_latent}")
        grid = self.expand(y[:, :, None])  # (B, n, rows)
        return F.relu(grid).transpose(1, 2)

    def forward(self, y: torch.Tensor, coords: torch.Tensor | None = None) -> DecodeResult:
        f_initial = self.expand_latent(y)
        if coords is None:
            x_initial = self.coord_initial(f_initial)
            f_refined = self.refine(x_initial, f_initial)
            x_refined = self.coord_refined(f_refined)
            seed_xyz = x_refined
        else:
            x_initial = x_refined = None
            f_refined = self.refine(coords, f_initial)
            seed_xyz = coords
        h = self.adapter(f_refined)
        xyz1, h1, disp1 = self.up1(seed_xyz, h)
        xyz2, h2, disp2 = self.up2(xyz1, h1)
        return DecodeResult(
            points=xyz2,
            features=h2,
            x_initial=x_initial,
            x_refined=x_refined,
            f_initial=f_initial,
            f_refined=f_refined,
            displacements=[disp1, disp2],
        )
