"""Encoder: two (downsample -> vector self-attention) stages and a latent head.

Neighbor selection (FPS, kNN) is delegated to the numpy routines in
geometry.py so the selection rules live in exactly one place; only the
differentiable gathers and maps run in torch.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import farthest_point_sample, knn_radius


def index_points(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Gather rows: x (B, P, C), idx (B, ...) -> (B, ..., C)."""
    raw = idx.shape
    flat = idx.reshape(raw[0], -1)
    out = torch.gather(x, 1, flat[..., None].expand(-1, -1, x.shape[-1]))
    return out.reshape(*raw, x.shape[-1])


def batch_fps(xyz: torch.Tensor, m: int) -> torch.Tensor:
    """Geometry-deterministic FPS per batch element: (B, P, 3) -> (B, m) indices."""
    pts = xyz.detach().cpu().numpy()
    idx = np.stack([farthest_point_sample(p, m) for p in pts])
    return torch.from_numpy(idx).to(xyz.device)


def batch_knn(queries: torch.Tensor, pool: torch.Tensor, k: int, r: float) -> torch.Tensor:
    """Radius-guarded kNN indices per batch element: -> (B, Q, k) long."""
    q = queries.detach().cpu().numpy()
    p = pool.detach().cpu().numpy()
    idx = np.stack([knn_radius(q[i], p[i], k, r) for i in range(q.shape[0])])
    return torch.from_numpy(idx).to(queries.device)


class Mlp(nn.Module):
    """Linear -> ReLU -> Linear; hidden width defaults to the output width."""

    def __init__(self, d_in: int, d_out: int, hidden: int | None = None):
        super().__init__()
        hidden = d_out if hidden is None else hidden
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out)
        )

    def forward(self, x):
        return self.net(x)


class VectorAttention(nn.Module):
    """Local vector self-attention over kNN neighborhoods.

    Per point i with neighbors j: weights = softmax_j(gamma(phi(f_i) - phi(f_j))
    + delta), applied per channel, with delta = theta(x_i - x_j); the output is
    sum_j weights * (alpha(f_j) + delta). Coordinates pass through unchanged.
    k is clamped to the neighborhood pool size, so the layer also works on
    very small clouds.
    """

    def __init__(self, dim: int, k: int, r: float):
        super().__init__()
        self.dim = dim
        self.k = k
        self.r = r
        self.phi = Mlp(dim, dim)
        self.gamma = Mlp(dim, dim)
        self.alpha = Mlp(dim, dim)
        self.theta = Mlp(3, dim)  # positional embedding

    def forward(self, xyz: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.dim:
            raise ValueError(f"feature width {feats.shape[-1]} != attention width {self.dim}")
        k = min(self.k, xyz.shape[1])
        idx = batch_knn(xyz, xyz, k, self.r)  # (B, M, k)
        pos = self.theta(xyz[:, :, None, :] - index_points(xyz, idx))  # (B, M, k, dim)
        pf = self.phi(feats)
        logits = self.gamma(pf[:, :, None, :] - index_points(pf, idx)) + pos
        weights = torch.softmax(logits, dim=2)  # per-channel softmax over neighbors
        values = index_points(self.alpha(feats), idx) + pos
        return (weights * values).sum(dim=2)


class DownsampleBlock(nn.Module):
    """FPS to a quarter of the points; neighbors aggregated into new features.

    Per sampled center: gather k input neighbors, form [feature || relative
    coordinates], apply a shared linear map + batch norm + ReLU, then take the
    max over the neighbors.
    """

    def __init__(self, d_in: int, d_out: int, k: int, r: float):
        super().__init__()
        self.k = k
        self.r = r
        self.linear = nn.Linear(d_in + 3, d_out, bias=False)
        self.bn = nn.BatchNorm1d(d_out)

    def forward(self, xyz: torch.Tensor, feats: torch.Tensor):
        n_in = xyz.shape[1]
        if n_in % 4 != 0:
            raise ValueError(f"input count {n_in} not divisible by 4")
        if self.k > n_in:
            raise ValueError(f"k={self.k} exceeds input count {n_in}")
        centers = index_points(xyz, batch_fps(xyz, n_in // 4))  # (B, m, 3)
        nidx = batch_knn(centers, xyz, self.k, self.r)  # (B, m, k)
        rel = index_points(xyz, nidx) - centers[:, :, None, :]
        grouped = torch.cat([index_points(feats, nidx), rel], dim=-1)
        h = self.linear(grouped)  # (B, m, k, d_out)
        h = self.bn(h.reshape(-1, h.shape[-1])).reshape(h.shape)
        return centers, F.relu(h).max(dim=2).values


class Encoder(nn.Module):
    """Cloud -> latent: (N,1) -> (N/4,d_f) -> (N/16,n) -> pooled latent.

    The final coordinates are discarded; only pooled features are transmitted.
    Latent head is either channel-wise max pooling over the N/16 rows (latent
    length n) or a per-row linear projection to width t flattened to length
    (N/16)*t.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.down1 = DownsampleBlock(1, cfg.d_f, cfg.k, cfg.r)
        self.att1 = VectorAttention(cfg.d_f, cfg.k, cfg.r)
        self.down2 = DownsampleBlock(cfg.d_f, cfg.n, cfg.k, cfg.r)
        self.att2 = VectorAttention(cfg.n, cfg.k, cfg.r)
        if cfg.head == "projection":
            self.proj = nn.Linear(cfg.n, cfg.proj_t)

    def forward(self, xyz: torch.Tensor, feats: torch.Tensor | None = None):
        """Returns (latent (B, n_latent), coords (B, N/16, 3), features (B, N/16, n))."""
        if xyz.shape[1] % 16 != 0:
            raise ValueError(f"point count {xyz.shape[1]} not divisible by 16")
        if feats is None:
            feats = torch.ones(xyz.shape[0], xyz.shape[1], 1, dtype=xyz.dtype,
                               device=xyz.device)
        x1, f1 = self.down1(xyz, feats)
        f1 = self.att1(x1, f1)
        x2, f2 = self.down2(x1, f1)
        f2 = self.att2(x2, f2)
        if self.cfg.head == "maxpool":
            z = f2.max(dim=1).values
        else:
            z = self.proj(f2).reshape(f2.shape[0], -1)
        return z, x2, f2
