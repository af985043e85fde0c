"""Full keypoint model: proposal head, per-layer latent graphs, GCN decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .cgt import BAYESIAN, QUERY, FusionConfig, GatingProjection, fixed_graph
from .decoder import DecoderOutput, DecoderParams, run_decoder
from .episodes import EpisodeBatch, Proposals, SynthConfig, proposal_init
from .latent_graph import AdjacencyMatrix, IsvaeParams
from .numeric import DTYPE, RngStream
from .objective import LossWeights, gaussian_heatmaps, heatmap_loss, offset_loss, total_loss, vae_loss
from .structures import KeypointSet

GRAPH_MODES = ("learned", "random-frozen", "static-given")

# RngStream ids derived from the run seed
STREAM_INIT = 0
STREAM_TRAIN_DATA = 1
STREAM_EVAL_DATA = 2
STREAM_LATENT = 3
STREAM_BATCH = 4
STREAM_FROZEN_GRAPH = 5


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-5
    lr_milestones: tuple[float, ...] = (0.8, 0.9)
    lr_decay: float = 0.1
    seed: int = 0
    # model
    n_layers: int = 3
    d_z: int = 32
    n_samples: int = 3
    beta: float = 0.1
    gamma: float = 1e-3
    lambda_heatmap: float = 1.0
    sample_strategy: str = BAYESIAN
    layer_strategy: str = QUERY
    graph_mode: str = "learned"
    init_temperature: float = 20.0
    # data
    m: int = 8
    feature_dim: int = 32
    grid: tuple[int, ...] = (16, 16)
    topology: str = "ring"
    shots: int = 1
    noise_std: float = 0.05
    occlusion_prob: float = 0.0
    n_distractors: int = 0
    train_episodes: int = 2000
    eval_episodes: int = 200
    train_categories: tuple[int, ...] = (0, 80)
    eval_categories: tuple[int, ...] = (80, 100)

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("steps/batch_size/lr out of range")
        if self.graph_mode not in GRAPH_MODES:
            raise ValueError(f"graph_mode must be one of {GRAPH_MODES}")
        FusionConfig(self.n_samples, sample_strategy=self.sample_strategy, layer_strategy=self.layer_strategy)

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.n_samples, sample_strategy=self.sample_strategy, layer_strategy=self.layer_strategy)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma, self.lambda_heatmap)

    def synth(self, split: str = "train") -> SynthConfig:
        cats = self.train_categories if split == "train" else self.eval_categories
        return SynthConfig(
            m=self.m,
            m_max=self.m,
            topology=self.topology,
            grid=tuple(self.grid),
            feature_dim=self.feature_dim,
            noise_std=self.noise_std,
            occlusion_prob=self.occlusion_prob,
            n_distractors=self.n_distractors,
            shots=self.shots,
            categories=tuple(cats),
        )

    def lr_at(self, step: int) -> float:
        passed = sum(step >= int(f * self.steps) for f in self.lr_milestones)
        return self.lr * self.lr_decay**passed


@dataclass
class ForwardResult:
    proposals: Proposals
    decoder: DecoderOutput
    loss: torch.Tensor | None = None
    record: dict | None = None


class GraphPoseModel:
    """Parameter container and forward pass.

    ``params`` is an ordered name -> leaf tensor mapping; that order fixes the
    optimizer and checkpoint layout.
    """

    def __init__(self, cfg: TrainConfig, params: dict[str, torch.Tensor] | None = None, frozen=None):
        self.cfg = cfg
        if params is None:
            params, frozen = self._init_params(cfg)
        self.params = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
        self.frozen_graph = frozen

    @staticmethod
    def _init_params(cfg: TrainConfig):
        rng = RngStream(cfg.seed, STREAM_INIT)
        m, d = cfg.m, cfg.feature_dim
        p: dict[str, torch.Tensor] = {
            "prop.w": torch.eye(d, dtype=DTYPE),
            "prop.logtemp": torch.tensor(math.log(cfg.init_temperature), dtype=DTYPE),
        }
        p.update(DecoderParams.init(cfg.n_layers, d, rng).as_dict("dec."))
        frozen = None
        if cfg.graph_mode == "learned":
            for layer in range(cfg.n_layers):
                p.update(IsvaeParams.init(m, d, cfg.d_z, rng).as_dict(f"isvae{layer}."))
            p["gate.proj_w"] = GatingProjection.init(d, cfg.d_z, rng).proj_w
        elif cfg.graph_mode == "random-frozen":
            g = RngStream(cfg.seed, STREAM_FROZEN_GRAPH)
            frozen = torch.from_numpy(g.uniform(0.0, 1.0, (m, m)))
        return p, frozen

    # parameter views
    @property
    def decoder_params(self) -> DecoderParams:
        return DecoderParams.from_dict(self.params, self.cfg.n_layers, "dec.")

    @property
    def isvae_params(self) -> list[IsvaeParams] | None:
        if self.cfg.graph_mode != "learned":
            return None
        return [IsvaeParams.from_dict(self.params, f"isvae{i}.") for i in range(self.cfg.n_layers)]

    @property
    def gating(self) -> GatingProjection | None:
        if "gate.proj_w" not in self.params:
            return None
        return GatingProjection(self.params["gate.proj_w"])

    def graph_for(self, batch: EpisodeBatch) -> AdjacencyMatrix | None:
        if self.cfg.graph_mode == "random-frozen":
            return fixed_graph(self.frozen_graph)
        if self.cfg.graph_mode == "static-given":
            return fixed_graph(batch.true_adjacency)
        return None

    def forward(self, batch: EpisodeBatch, rng: RngStream | None = None, training: bool = True) -> ForwardResult:
        prop = proposal_init(
            batch.support, batch.query, self.params["prop.w"], torch.exp(self.params["prop.logtemp"])
        )
        dec = run_decoder(
            batch.support,
            batch.query,
            prop.keypoints,
            self.decoder_params,
            self.isvae_params,
            self.gating,
            self.cfg.fusion,
            rng,
            training,
            cues=prop.cues,
            fixed_graph=self.graph_for(batch),
        )
        return ForwardResult(prop, dec)

    def loss(self, batch: EpisodeBatch, rng: RngStream | None = None, training: bool = True) -> ForwardResult:
        res = self.forward(batch, rng, training)
        truth = batch.truth
        valid = truth.mask.any(dim=-1)
        if not bool(valid.any()):
            raise TrainingError("batch has no visible keypoints")
        idx = valid.nonzero().squeeze(-1)
        t = KeypointSet(truth.coords[idx], truth.mask[idx])
        gt_heat = gaussian_heatmaps(t, batch.query.grid)
        l_heat = heatmap_loss(res.proposals.heatmap[idx], gt_heat, t.mask).mean()
        preds = [KeypointSet(k.coords[idx], t.mask) for k in res.decoder.keypoints]
        l_off = offset_loss(preds, t).mean()
        kl = sum(k.mean() for k in res.decoder.kl)
        sp = sum(s.mean() for s in res.decoder.sparsity)
        l_vae = vae_loss([k.mean() for k in res.decoder.kl], [s.mean() for s in res.decoder.sparsity], self.cfg.beta)
        loss = total_loss(l_heat, l_off, l_vae, self.cfg.weights)
        record = {"heatmap": l_heat, "offset": l_off, "kl": kl, "sparse": sp, "vae": l_vae, "total": loss}
        for name, v in record.items():
            if not bool(torch.isfinite(v)):
                raise TrainingError(f"non-finite loss term {name!r}: {float(v.detach())}")
        res.loss = loss
        res.record = {k: float(v.detach()) for k, v in record.items()}
        return res

    @torch.no_grad()
    def predict(self, batch: EpisodeBatch) -> ForwardResult:
        return self.forward(batch, None, training=False)
