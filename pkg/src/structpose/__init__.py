"""Latent keypoint-graph inference for few-shot keypoint localization."""

from .cgt import FusionConfig, GatingProjection, cgt_step, confidence_weights, fuse_layers, fuse_samples, gating_scores
from .decoder import DecoderParams, gcn_forward, keypoint_refine, run_decoder
from .episodes import Episode, SynthConfig, generate_episode, proposal_init, render_features
from .latent_graph import (
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
from .metrics import adjacency_recovery, pck_eval
from .model import GraphPoseModel, TrainConfig
from .numeric import RngStream, grad_check, matmul
from .objective import LossWeights, heatmap_loss, offset_loss, total_loss, vae_loss
from .structures import KeypointSet, QueryFeatureMap, SupportEmbedding

__version__ = "0.1.0"
