"""Compositional graph transfer.

Sampled adjacencies of one decoder layer are fused with inverse-uncertainty
weights; the fused graphs of all layers seen so far are then mixed by their
similarity to the pooled query descriptor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .latent_graph import (
    NORM_EPS,
    AdjacencyMatrix,
    IsvaeParams,
    LatentDistribution,
    Stage,
    decode_adjacency,
    deterministic_latent,
    encode_posterior,
    kl_to_standard_normal,
    row_normalize,
    sample_latent,
    sparsity_penalty,
    symmetrize,
)
from .numeric import DTYPE, RngStream, ShapeError
from .structures import QueryFeatureMap, SupportEmbedding

logger = logging.getLogger(__name__)

BAYESIAN = "bayesian"
QUERY = "query"
STRATEGIES = (BAYESIAN, QUERY)


@dataclass(frozen=True)
class FusionConfig:
    n_samples: int = 3
    eps: float = NORM_EPS
    sample_strategy: str = BAYESIAN
    layer_strategy: str = QUERY

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        for name in ("sample_strategy", "layer_strategy"):
            if getattr(self, name) not in STRATEGIES:
                raise ValueError(f"{name} must be one of {STRATEGIES}, got {getattr(self, name)!r}")


@dataclass
class GatingProjection:
    proj_w: torch.Tensor  # [D_z, D]

    @classmethod
    def init(cls, d: int, d_z: int, rng: RngStream) -> "GatingProjection":
        return cls(torch.from_numpy(rng.normal((d_z, d)) / d**0.5))


@dataclass(frozen=True)
class LayerHistory:
    """Fused graphs and posteriors of the layers already processed."""

    fused: tuple[AdjacencyMatrix, ...] = ()
    dists: tuple[LatentDistribution, ...] = ()

    def extend(self, fused: AdjacencyMatrix, dist: LatentDistribution) -> "LayerHistory":
        return LayerHistory(self.fused + (fused,), self.dists + (dist,))

    def __len__(self):
        return len(self.fused)


def confidence_weights(dists: Sequence[LatentDistribution], eps: float = NORM_EPS) -> torch.Tensor:
    """Normalized inverse total-sigma weights, stacked on the last axis ``[..., N]``."""
    if len(dists) == 0:
        raise ValueError("confidence_weights needs at least one distribution")
    d_z = dists[0].d_z
    if any(d.d_z != d_z for d in dists):
        raise ShapeError("all distributions must share the latent dimension")
    w = torch.stack([1.0 / (d.sigma.sum(dim=-1) + eps) for d in dists], dim=-1)
    return w / w.sum(dim=-1, keepdim=True)


def _convex_mix(mats: Sequence[AdjacencyMatrix], weights: torch.Tensor) -> torch.Tensor:
    if len(mats) != weights.shape[-1]:
        raise ValueError(f"{len(mats)} matrices but {weights.shape[-1]} weights")
    stacked = torch.stack([a.values for a in mats], dim=-3)  # [..., N, M, M]
    return (weights[..., :, None, None] * stacked).sum(dim=-3)


def fuse_samples(adjs: Sequence[AdjacencyMatrix], weights: torch.Tensor) -> AdjacencyMatrix:
    for a in adjs:
        a.require(Stage.NORMALIZED)
    if len({a.m for a in adjs}) > 1:
        raise ShapeError("all sampled adjacencies must have the same size")
    return AdjacencyMatrix(_convex_mix(adjs, weights), Stage.NORMALIZED)


def _cosine(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    denom = q.norm(dim=-1) * v.norm(dim=-1)
    safe = denom > 1e-300
    return torch.where(safe, (q * v).sum(dim=-1) / torch.where(safe, denom, torch.ones_like(denom)), 0.0)


def gating_scores(
    fq: QueryFeatureMap, mus: Sequence[torch.Tensor], proj: GatingProjection
) -> torch.Tensor:
    """Softmax over cosine similarities between the projected pooled query and each code.

    Zero-norm vectors get similarity 0, so an all-zero query (or all-zero
    codes) yields uniform scores.  Returns ``[..., L]``.
    """
    if len(mus) == 0:
        raise ValueError("gating_scores needs at least one latent mean")
    if proj.proj_w.shape[1] != fq.d:
        raise ShapeError(f"gating projection expects D={proj.proj_w.shape[1]}, query has D={fq.d}")
    q = fq.pooled() @ proj.proj_w.T
    cos = torch.stack([_cosine(q, mu) for mu in mus], dim=-1)
    if not bool((cos != 0).any()):
        logger.debug("gating_scores: degenerate query or codes, using uniform weights")
    return torch.softmax(cos, dim=-1)


def fuse_layers(fused: Sequence[AdjacencyMatrix], alphas: torch.Tensor) -> AdjacencyMatrix:
    if len(fused) == 1 and alphas.shape[-1] == 1:
        return fused[0]
    return AdjacencyMatrix(_convex_mix(fused, alphas), Stage.NORMALIZED)


@dataclass
class CgtOutput:
    final: AdjacencyMatrix
    history: LayerHistory
    kl: torch.Tensor
    sparsity: torch.Tensor
    samples: list[AdjacencyMatrix] = field(default_factory=list)


def cgt_step(
    fs: SupportEmbedding,
    fq: QueryFeatureMap,
    history: LayerHistory,
    params: IsvaeParams,
    proj: GatingProjection,
    cfg: FusionConfig,
    rng: RngStream | None = None,
    training: bool = True,
) -> CgtOutput:
    """One decoder layer of graph inference and fusion.

    In training mode ``cfg.n_samples`` codes are drawn with a single
    ``rng.normal((n_samples, *mu.shape))`` call; inference uses ``z = mu`` once.
    """
    m = fs.m
    dist = encode_posterior(fs, params)
    if training:
        if rng is None:
            raise ValueError("training mode needs an rng")
        eps = rng.normal_tensor((cfg.n_samples, *dist.mu.shape))
        codes = [sample_latent(dist, eps=eps[n]) for n in range(cfg.n_samples)]
    else:
        codes = [deterministic_latent(dist)]

    samples = [row_normalize(symmetrize(decode_adjacency(z, params, m)), cfg.eps) for z in codes]
    if len(samples) == 1:
        fused = samples[0]
    else:
        if cfg.sample_strategy == BAYESIAN:
            w = confidence_weights([dist] * len(samples), cfg.eps)
        else:
            w = gating_scores(fq, codes, proj)
        fused = fuse_samples(samples, w)

    history = history.extend(fused, dist)
    if len(history) == 1:
        final = fused
    else:
        if cfg.layer_strategy == QUERY:
            alphas = gating_scores(fq, [d.mu for d in history.dists], proj)
        else:
            alphas = confidence_weights(list(history.dists), cfg.eps)
        final = fuse_layers(list(history.fused), alphas)

    return CgtOutput(final, history, kl_to_standard_normal(dist), sparsity_penalty(final, m), samples)


def fixed_graph(values: torch.Tensor, eps: float = NORM_EPS) -> AdjacencyMatrix:
    """Symmetrize and row-normalize a given non-negative matrix (static/random baselines)."""
    return row_normalize(symmetrize(AdjacencyMatrix(values.to(DTYPE), Stage.RAW)), eps)
