"""Value types shared by the episode generator and the decoder.

All tensors may carry leading batch dimensions; the trailing dimensions are
the ones documented on each field.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .numeric import ShapeError


@dataclass(frozen=True)
class SupportEmbedding:
    values: torch.Tensor  # [..., M, D]
    mask: torch.Tensor  # [..., M] bool, True = real keypoint

    def __post_init__(self):
        if self.values.shape[:-1] != self.mask.shape:
            raise ShapeError(
                f"support values {tuple(self.values.shape)} do not match mask {tuple(self.mask.shape)}"
            )

    @property
    def m(self) -> int:
        return self.values.shape[-2]

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    def masked(self) -> "SupportEmbedding":
        """Copy with masked-out rows forced to zero."""
        return SupportEmbedding(self.values * self.mask.unsqueeze(-1).to(self.values.dtype), self.mask)


@dataclass(frozen=True)
class QueryFeatureMap:
    values: torch.Tensor  # [..., h*w, D]
    grid: tuple[int, int]  # (h, w)

    def __post_init__(self):
        h, w = self.grid
        if self.values.shape[-2] != h * w:
            raise ShapeError(f"query map has {self.values.shape[-2]} rows, grid {h}x{w} needs {h * w}")

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    def pooled(self) -> torch.Tensor:
        """Global average over grid positions, ``[..., D]``."""
        return self.values.mean(dim=-2)


@dataclass(frozen=True)
class KeypointSet:
    coords: torch.Tensor  # [..., M, 2] as (x, y) in [0, 1]
    mask: torch.Tensor  # [..., M] bool

    def __post_init__(self):
        if self.coords.shape[-1] != 2 or self.coords.shape[:-1] != self.mask.shape:
            raise ShapeError(
                f"keypoint coords {tuple(self.coords.shape)} do not match mask {tuple(self.mask.shape)}"
            )

    @property
    def m(self) -> int:
        return self.coords.shape[-2]


def cell_centers(grid: tuple[int, int], dtype=torch.float64) -> torch.Tensor:
    """Normalized (x, y) centers of a row-major h x w grid, shape ``[h*w, 2]``."""
    h, w = grid
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)
