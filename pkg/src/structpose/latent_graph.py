"""Variational inference of soft keypoint graphs.

A two-layer MLP encodes the flattened support embedding into a diagonal
Gaussian over a graph code ``z``; a linear+sigmoid decoder maps ``z`` to an
``M x M`` soft adjacency that is then symmetrized and row-normalized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import torch

from .numeric import DTYPE, RngStream, ShapeError
from .structures import SupportEmbedding

HIDDEN_DIM = 256
LOGVAR_CLAMP = 30.0
NORM_EPS = 1e-6


class StageError(ValueError):
    """An adjacency matrix was passed to an operation expecting another stage."""


class Stage(enum.Enum):
    RAW = "raw"
    SYMMETRIC = "symmetric"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class AdjacencyMatrix:
    values: torch.Tensor  # [..., M, M]
    stage: Stage

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def require(self, *stages: Stage) -> "AdjacencyMatrix":
        if self.stage not in stages:
            names = "/".join(s.value for s in stages)
            raise StageError(f"expected a {names} adjacency, got {self.stage.value}")
        return self


@dataclass(frozen=True)
class LatentDistribution:
    mu: torch.Tensor  # [..., D_z]
    logvar: torch.Tensor  # [..., D_z]

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    @property
    def d_z(self) -> int:
        return self.mu.shape[-1]


@dataclass
class IsvaeParams:
    """One layer's encoder/decoder weights, stored ``[out, in]``."""

    enc_w1: torch.Tensor  # [hidden, M*D]
    enc_b1: torch.Tensor  # [hidden]
    enc_w2: torch.Tensor  # [2*D_z, hidden]
    enc_b2: torch.Tensor  # [2*D_z]
    dec_w: torch.Tensor  # [M*M, D_z]
    dec_b: torch.Tensor  # [M*M]

    @property
    def d_z(self) -> int:
        return self.dec_w.shape[1]

    @property
    def m(self) -> int:
        m = int(round(self.dec_w.shape[0] ** 0.5))
        return m

    def as_dict(self, prefix: str = "") -> dict[str, torch.Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, torch.Tensor], prefix: str = "") -> "IsvaeParams":
        return cls(**{f.name: d[prefix + f.name] for f in fields(cls)})

    @classmethod
    def zeros(cls, m: int, d: int, d_z: int, hidden: int = HIDDEN_DIM) -> "IsvaeParams":
        z = lambda *s: torch.zeros(*s, dtype=DTYPE)  # noqa: E731
        return cls(z(hidden, m * d), z(hidden), z(2 * d_z, hidden), z(2 * d_z), z(m * m, d_z), z(m * m))

    @classmethod
    def init(cls, m: int, d: int, d_z: int, rng: RngStream, hidden: int = HIDDEN_DIM) -> "IsvaeParams":
        """He-style init for the ReLU layer, Glorot-style for the linear heads."""

        def dense(n_out, n_in, gain):
            return torch.from_numpy(rng.normal((n_out, n_in)) * gain / n_in**0.5)

        return cls(
            enc_w1=dense(hidden, m * d, 2**0.5),
            enc_b1=torch.zeros(hidden, dtype=DTYPE),
            enc_w2=dense(2 * d_z, hidden, 1.0),
            enc_b2=torch.zeros(2 * d_z, dtype=DTYPE),
            dec_w=dense(m * m, d_z, 1.0),
            dec_b=torch.zeros(m * m, dtype=DTYPE),
        )


def encode_posterior(fs: SupportEmbedding, p: IsvaeParams) -> LatentDistribution:
    x = fs.masked().values
    flat = x.reshape(*x.shape[:-2], -1)
    if flat.shape[-1] != p.enc_w1.shape[1]:
        raise ShapeError(
            f"encoder expects M*D = {p.enc_w1.shape[1]} inputs, support embedding gives {flat.shape[-1]}"
        )
    hidden = torch.relu(flat @ p.enc_w1.T + p.enc_b1)
    out = hidden @ p.enc_w2.T + p.enc_b2
    mu, logvar = out.split(p.d_z, dim=-1)
    return LatentDistribution(mu, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))


def sample_latent(
    dist: LatentDistribution, rng: RngStream | None = None, eps: torch.Tensor | None = None
) -> torch.Tensor:
    """Reparameterized draw ``mu + sigma * eps``; ``eps`` carries no gradient."""
    if eps is None:
        if rng is None:
            raise ValueError("sample_latent needs either rng or eps")
        eps = rng.normal_tensor(dist.mu.shape)
    return dist.mu + dist.sigma * eps.detach()


def deterministic_latent(dist: LatentDistribution) -> torch.Tensor:
    return dist.mu


def decode_adjacency(z: torch.Tensor, p: IsvaeParams, m: int) -> AdjacencyMatrix:
    if z.shape[-1] != p.d_z:
        raise ShapeError(f"latent code has length {z.shape[-1]}, decoder expects {p.d_z}")
    logits = z @ p.dec_w.T + p.dec_b
    return AdjacencyMatrix(torch.sigmoid(logits).reshape(*z.shape[:-1], m, m), Stage.RAW)


def symmetrize(a: AdjacencyMatrix) -> AdjacencyMatrix:
    a.require(Stage.RAW, Stage.SYMMETRIC)
    v = a.values
    return AdjacencyMatrix(0.5 * (v + v.transpose(-1, -2)), Stage.SYMMETRIC)


def row_normalize(a: AdjacencyMatrix, eps: float = NORM_EPS) -> AdjacencyMatrix:
    """L1 row normalization; ``eps`` floors the row sum so empty rows stay zero."""
    a.require(Stage.SYMMETRIC)
    v = a.values
    return AdjacencyMatrix(v / v.sum(dim=-1, keepdim=True).clamp(min=eps), Stage.NORMALIZED)


def kl_to_standard_normal(dist: LatentDistribution) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dimensions."""
    lv = dist.logvar
    # expm1 keeps the result >= 0 for tiny logvar
    return 0.5 * (dist.mu**2 + torch.expm1(lv) - lv).sum(dim=-1)


def sparsity_penalty(a: AdjacencyMatrix, m: int | None = None) -> torch.Tensor:
    """Squared Frobenius norm scaled by ``1/M^2``."""
    a.require(Stage.NORMALIZED)
    m = a.m if m is None else m
    return (a.values**2).sum(dim=(-1, -2)) / (m * m)
