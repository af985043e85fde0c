"""Training losses.

Per-episode losses keep any leading batch dimensions; the harness averages
over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .structures import KeypointSet, cell_centers

GT_SIGMA_PX = 2.0


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.1
    gamma: float = 1e-3
    lambda_heatmap: float = 1.0

    def __post_init__(self):
        if min(self.beta, self.gamma, self.lambda_heatmap) < 0:
            raise ValueError("loss weights must be non-negative")


def gaussian_heatmaps(kp: KeypointSet, grid: tuple[int, int], sigma_px: float = GT_SIGMA_PX) -> torch.Tensor:
    """Unit-peak isotropic Gaussians at each keypoint, ``[..., M, h, w]``.

    Distances are measured in grid cells; masked channels are zero.
    """
    h, w = grid
    centers = cell_centers(grid, kp.coords.dtype)  # [hw, 2]
    scale = torch.tensor([w, h], dtype=kp.coords.dtype)
    diff = (kp.coords.unsqueeze(-2) - centers) * scale  # [..., M, hw, 2]
    g = torch.exp(-(diff**2).sum(-1) / (2 * sigma_px**2))
    g = g * kp.mask.unsqueeze(-1).to(g.dtype)
    return g.reshape(*g.shape[:-1], h, w)


def heatmap_loss(pred: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over unmasked channels and all pixels."""
    if pred.shape != truth.shape:
        raise ValueError(f"heatmap shapes differ: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    n_vis = mask.sum(dim=-1)
    if bool((n_vis == 0).any()):
        raise ValueError("heatmap_loss needs at least one unmasked keypoint")
    hw = pred.shape[-1] * pred.shape[-2]
    sq = ((pred - truth) ** 2).sum(dim=(-1, -2)) * mask.to(pred.dtype)
    return sq.sum(dim=-1) / (n_vis.to(pred.dtype) * hw)


def offset_loss(preds: Sequence[KeypointSet], truth: KeypointSet) -> torch.Tensor:
    """L1 keypoint error summed over visible keypoints, averaged over layers."""
    if len(preds) == 0:
        raise ValueError("offset_loss needs at least one layer prediction")
    w = truth.mask.to(truth.coords.dtype).unsqueeze(-1)
    total = 0.0
    for p in preds:
        if not torch.equal(p.mask, truth.mask):
            raise ValueError("prediction and ground-truth masks disagree")
        total = total + ((p.coords - truth.coords).abs() * w).sum(dim=(-1, -2))
    return total / len(preds)


def vae_loss(kl_per_layer: Sequence, sparsity_per_layer: Sequence, beta: float) -> torch.Tensor:
    if len(kl_per_layer) != len(sparsity_per_layer):
        raise ValueError("kl and sparsity lists must have one entry per layer")
    total = torch.zeros((), dtype=torch.float64)
    for kl, sp in zip(kl_per_layer, sparsity_per_layer):
        total = total + kl + beta * sp
    return total


def total_loss(heatmap, offset, vae, w: LossWeights):
    return w.lambda_heatmap * heatmap + offset + w.gamma * vae
