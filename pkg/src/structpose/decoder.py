"""Graph-conditioned keypoint refinement across decoder layers."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import torch

from .cgt import CgtOutput, FusionConfig, GatingProjection, LayerHistory, cgt_step
from .latent_graph import AdjacencyMatrix, IsvaeParams, Stage, sparsity_penalty
from .numeric import DTYPE, RngStream, ShapeError
from .structures import KeypointSet, QueryFeatureMap, SupportEmbedding

COORD_CLAMP = 1e-4
LOGIT_CLAMP = 30.0
N_CUES = 2  # per-keypoint proposal cues: soft-argmax spread, peak similarity


@dataclass
class RefineMLP:
    w1: torch.Tensor  # [D, D]
    b1: torch.Tensor  # [D]
    w2: torch.Tensor  # [2, D]
    b2: torch.Tensor  # [2]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(x @ self.w1.T + self.b1) @ self.w2.T + self.b2


@dataclass
class DecoderLayerParams:
    w_adj: torch.Tensor  # [D, D]
    w_self: torch.Tensor  # [D, D]
    mlp_w1: torch.Tensor
    mlp_b1: torch.Tensor
    mlp_w2: torch.Tensor
    mlp_b2: torch.Tensor

    @property
    def mlp(self) -> RefineMLP:
        return RefineMLP(self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2)


@dataclass
class DecoderParams:
    layers: list[DecoderLayerParams]
    # embeds [logit x, logit y, spread, peak] of the current estimate into node states
    pos_w: torch.Tensor  # [D, 2 + N_CUES]
    pos_b: torch.Tensor  # [D]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, n_layers: int, d: int, rng: RngStream, out_scale: float = 0.01) -> "DecoderParams":
        def dense(n_out, n_in, gain=1.0):
            return torch.from_numpy(rng.normal((n_out, n_in)) * gain / n_in**0.5)

        zeros = lambda n: torch.zeros(n, dtype=DTYPE)  # noqa: E731
        layers = [
            DecoderLayerParams(
                w_adj=dense(d, d),
                w_self=dense(d, d),
                mlp_w1=dense(d, d, 2**0.5),
                mlp_b1=zeros(d),
                mlp_w2=dense(2, d, out_scale),
                mlp_b2=zeros(2),
            )
            for _ in range(n_layers)
        ]
        return cls(layers, dense(d, 2 + N_CUES), zeros(d))

    def as_dict(self, prefix: str = "") -> dict[str, torch.Tensor]:
        out = {prefix + "pos_w": self.pos_w, prefix + "pos_b": self.pos_b}
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                out[f"{prefix}layer{i}.{f.name}"] = getattr(layer, f.name)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, torch.Tensor], n_layers: int, prefix: str = "") -> "DecoderParams":
        layers = [
            DecoderLayerParams(**{f.name: d[f"{prefix}layer{i}.{f.name}"] for f in fields(DecoderLayerParams)})
            for i in range(n_layers)
        ]
        return cls(layers, d[prefix + "pos_w"], d[prefix + "pos_b"])


def gcn_forward(
    fs: SupportEmbedding, a: AdjacencyMatrix, w_adj: torch.Tensor, w_self: torch.Tensor
) -> SupportEmbedding:
    """Neighbor aggregation through ``a`` plus a self path, then ReLU."""
    a.require(Stage.NORMALIZED)
    if a.m != fs.m:
        raise ShapeError(f"adjacency is {a.m}x{a.m} but support has {fs.m} keypoints")
    if w_adj.shape[1] != fs.d or w_self.shape[1] != fs.d:
        raise ShapeError(f"GCN weights expect D={w_adj.shape[1]}, support has D={fs.d}")
    x = fs.masked().values
    out = torch.relu((a.values @ x) @ w_adj.T + x @ w_self.T)
    return SupportEmbedding(out, fs.mask).masked()


def _logit(p: torch.Tensor) -> torch.Tensor:
    p = p.clamp(COORD_CLAMP, 1.0 - COORD_CLAMP)
    return torch.log(p) - torch.log1p(-p)


def keypoint_refine(p: KeypointSet, fs: SupportEmbedding, mlp: RefineMLP) -> KeypointSet:
    offset = mlp(fs.masked().values)
    logits = (_logit(p.coords) + offset).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return KeypointSet(torch.sigmoid(logits), p.mask)


def node_states(
    f: SupportEmbedding, p: KeypointSet, cues: torch.Tensor, params: DecoderParams
) -> SupportEmbedding:
    """Support features plus an embedding of the current location estimate."""
    desc = torch.cat([_logit(p.coords), cues], dim=-1)
    return SupportEmbedding(f.values + desc @ params.pos_w.T + params.pos_b, f.mask).masked()


@dataclass
class DecoderOutput:
    keypoints: list[KeypointSet]
    graphs: list[AdjacencyMatrix]
    kl: list[torch.Tensor]
    sparsity: list[torch.Tensor]
    cgt: list[CgtOutput] = field(default_factory=list)

    @property
    def final(self) -> KeypointSet:
        return self.keypoints[-1]


def run_decoder(
    fs0: SupportEmbedding,
    fq: QueryFeatureMap,
    p0: KeypointSet,
    params: DecoderParams,
    isvae: Sequence[IsvaeParams] | None,
    proj: GatingProjection | None,
    cfg: FusionConfig,
    rng: RngStream | None = None,
    training: bool = True,
    cues: torch.Tensor | None = None,
    fixed_graph: AdjacencyMatrix | None = None,
) -> DecoderOutput:
    """Run every decoder layer: graph inference, GCN update, keypoint refinement.

    With ``fixed_graph`` the latent-graph path is bypassed and the same
    normalized adjacency conditions every layer (static / random baselines);
    its KL term is zero.
    """
    if params.n_layers < 1:
        raise ValueError("decoder needs at least one layer")
    if fixed_graph is None and (isvae is None or len(isvae) != params.n_layers):
        raise ValueError("one i-SVAE parameter set per decoder layer is required")
    if cues is None:
        cues = torch.zeros(*p0.coords.shape[:-1], N_CUES, dtype=DTYPE)

    f, p = fs0.masked(), p0
    history = LayerHistory()
    out = DecoderOutput([], [], [], [])
    for i, layer in enumerate(params.layers):
        h = node_states(f, p, cues, params)
        if fixed_graph is None:
            step = cgt_step(h, fq, history, isvae[i], proj, cfg, rng, training)
            history = step.history
            graph, kl, sp = step.final, step.kl, step.sparsity
            out.cgt.append(step)
        else:
            graph = fixed_graph.require(Stage.NORMALIZED)
            sp = sparsity_penalty(graph).expand(p.mask.shape[:-1])
            kl = torch.zeros_like(sp)
        f = gcn_forward(h, graph, layer.w_adj, layer.w_self)
        p = keypoint_refine(p, f, layer.mlp)
        out.keypoints.append(p)
        out.graphs.append(graph)
        out.kl.append(kl)
        out.sparsity.append(sp)
    return out
