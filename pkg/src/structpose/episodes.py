"""Synthetic few-shot keypoint episodes with known topology.

Each category owns a keypoint template (ring, star or chain) and a fixed random
unit "signature" vector per keypoint.  An image instance is a random
similarity transform of the template plus jitter; its feature field is a sum
of Gaussian bumps carrying the signatures, optional distractor bumps that copy
a keypoint's signature at a random location, and white noise.  Query features
are the field sampled at grid-cell centers; a support embedding is the field
sampled at the support's own keypoints.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .numeric import DTYPE, RngStream
from .serialization import read_bundle, write_bundle
from .structures import KeypointSet, QueryFeatureMap, SupportEmbedding, cell_centers

TOPOLOGIES = ("ring", "star", "chain")
CATEGORY_SEED = 0x5EED_CA7E
EPISODE_MAGIC = b"SPEPISOD"
EPISODE_VERSION = 1
MAX_REDRAWS = 1000


@dataclass(frozen=True)
class SynthConfig:
    m: int = 8
    m_max: int = 8
    topology: str = "ring"
    grid: tuple[int, int] = (16, 16)
    feature_dim: int = 32
    noise_std: float = 0.05
    occlusion_prob: float = 0.0
    n_distractors: int = 0
    shots: int = 1
    max_rotation_deg: float = 15.0
    max_scale: float = 0.15
    max_shift: float = 0.12
    jitter_std: float = 0.01
    bump_sigma: float = 1.0  # in grid cells
    distractor_amp: tuple[float, float] = (0.7, 1.3)
    template_radius: float = 0.25
    categories: tuple[int, int] = (0, 100)  # half-open id range

    def __post_init__(self):
        if self.m < 3 or self.m > self.m_max:
            raise ValueError(f"need 3 <= m <= m_max, got m={self.m}, m_max={self.m_max}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1)")
        if self.shots not in (1, 5):
            raise ValueError("shots must be 1 or 5")
        if min(self.grid) < 1:
            raise ValueError("grid must be positive")

    def replace(self, **kw) -> "SynthConfig":
        d = asdict(self)
        d.update(kw)
        d["grid"] = tuple(d["grid"])
        d["distractor_amp"] = tuple(d["distractor_amp"])
        d["categories"] = tuple(d["categories"])
        return SynthConfig(**d)


@dataclass
class Episode:
    supports: list[tuple[SupportEmbedding, KeypointSet]]
    query: QueryFeatureMap
    query_truth: KeypointSet
    true_adjacency: np.ndarray  # [M, M] {0, 1}
    category_id: int
    bbox_scale: float

    @property
    def support(self) -> SupportEmbedding:
        return aggregate_supports([s for s, _ in self.supports])


@dataclass(frozen=True)
class Category:
    template: np.ndarray  # [m, 2]
    signatures: np.ndarray  # [m, D] unit rows
    adjacency: np.ndarray  # [m, m]

    @property
    def bbox_scale(self) -> float:
        span = self.template.max(axis=0) - self.template.min(axis=0)
        return float(np.hypot(*span))


def topology_adjacency(topology: str, m: int) -> np.ndarray:
    a = np.zeros((m, m))
    if topology == "ring":
        edges = [(i, (i + 1) % m) for i in range(m)]
    elif topology == "chain":
        edges = [(i, i + 1) for i in range(m - 1)]
    else:
        edges = [(0, i) for i in range(1, m)]
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    return a


def make_category(cfg: SynthConfig, category_id: int) -> Category:
    rng = RngStream(CATEGORY_SEED + TOPOLOGIES.index(cfg.topology), category_id)
    m, r = cfg.m, cfg.template_radius
    if cfg.topology == "ring":
        step = 2 * math.pi / m
        theta = np.arange(m) * step + rng.uniform(0, 2 * math.pi) + rng.uniform(-0.15, 0.15, m) * step
        radius = r * (1 + rng.uniform(-0.1, 0.1, m))
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1) * radius[:, None]
    elif cfg.topology == "star":
        theta = np.arange(m - 1) * 2 * math.pi / (m - 1) + rng.uniform(0, 2 * math.pi)
        radius = r * (0.6 + 0.4 * rng.uniform(0, 1, m - 1))
        pts = np.vstack([[0.0, 0.0], np.stack([np.cos(theta), np.sin(theta)], axis=1) * radius[:, None]])
    else:
        heading = rng.uniform(0, 2 * math.pi) + np.cumsum(rng.uniform(-0.7, 0.7, m - 1))
        seg = 2 * r / (m - 1) * 1.5
        steps = np.stack([np.cos(heading), np.sin(heading)], axis=1) * seg
        pts = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
        pts -= (pts.max(axis=0) + pts.min(axis=0)) / 2
    sig = rng.normal((m, cfg.feature_dim))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    return Category(pts + 0.5, sig, topology_adjacency(cfg.topology, m))


def _instance_keypoints(cat: Category, cfg: SynthConfig, rng: RngStream) -> np.ndarray:
    ang = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    scale = 1.0 + rng.uniform(-cfg.max_scale, cfg.max_scale)
    shift = rng.uniform(-cfg.max_shift, cfg.max_shift, 2)
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    pts = 0.5 + scale * (cat.template - 0.5) @ rot.T + shift
    pts = pts + cfg.jitter_std * rng.normal(pts.shape)
    return np.clip(pts, 0.01, 0.99)


def _visibility(cfg: SynthConfig, rng: RngStream) -> np.ndarray:
    for _ in range(MAX_REDRAWS):
        vis = rng.uniform(0, 1, cfg.m) >= cfg.occlusion_prob
        if vis.any():
            return vis
    vis = np.zeros(cfg.m, dtype=bool)
    vis[rng.integers(0, cfg.m)] = True
    return vis


def _pad_keypoints(pts: np.ndarray, vis: np.ndarray, m_max: int) -> KeypointSet:
    coords = np.full((m_max, 2), 0.5)
    mask = np.zeros(m_max, dtype=bool)
    coords[: len(pts)] = pts
    mask[: len(vis)] = vis
    return KeypointSet(torch.from_numpy(coords), torch.from_numpy(mask))


def _field(points: np.ndarray, bumps_at: np.ndarray, bump_sig: np.ndarray, amps: np.ndarray, cfg: SynthConfig):
    """Sum of signature-weighted Gaussian bumps evaluated at ``points`` [P, 2]."""
    if len(bumps_at) == 0:
        return np.zeros((len(points), cfg.feature_dim))
    h, w = cfg.grid
    cell = np.array([w, h], dtype=float)
    d = (points[:, None, :] - bumps_at[None, :, :]) * cell
    g = np.exp(-(d**2).sum(-1) / (2 * cfg.bump_sigma**2)) * amps[None, :]
    return g @ bump_sig


def render_features(
    keypoints: KeypointSet, signatures: np.ndarray, cfg: SynthConfig, rng: RngStream
) -> tuple[QueryFeatureMap, SupportEmbedding]:
    """Feature grid of one image and the embedding sampled at its visible keypoints."""
    coords = keypoints.coords.numpy()[: cfg.m]
    vis = keypoints.mask.numpy()[: cfg.m]
    centers = cell_centers(cfg.grid).numpy()

    bump_at = coords[vis]
    bump_sig = signatures[vis]
    amps = np.ones(len(bump_at))
    if cfg.n_distractors > 0:
        k = rng.integers(0, cfg.m, cfg.n_distractors)
        d_at = rng.uniform(0.05, 0.95, (cfg.n_distractors, 2))
        d_amp = rng.uniform(*cfg.distractor_amp, cfg.n_distractors)
        bump_at = np.vstack([bump_at, d_at])
        bump_sig = np.vstack([bump_sig, signatures[k]])
        amps = np.concatenate([amps, d_amp])

    grid_feats = _field(centers, bump_at, bump_sig, amps, cfg)
    grid_feats = grid_feats + cfg.noise_std * rng.normal(grid_feats.shape)

    emb = np.zeros((cfg.m_max, cfg.feature_dim))
    emb[: cfg.m] = _field(coords, bump_at, bump_sig, amps, cfg) + cfg.noise_std * rng.normal((cfg.m, cfg.feature_dim))
    mask = np.zeros(cfg.m_max, dtype=bool)
    mask[: cfg.m] = vis
    emb[~mask] = 0.0
    return (
        QueryFeatureMap(torch.from_numpy(grid_feats), tuple(cfg.grid)),
        SupportEmbedding(torch.from_numpy(emb), torch.from_numpy(mask)),
    )


def generate_episode(cfg: SynthConfig, rng: RngStream) -> Episode:
    category_id = int(rng.integers(*cfg.categories))
    cat = make_category(cfg, category_id)

    supports = []
    for _ in range(cfg.shots):
        kp = _pad_keypoints(_instance_keypoints(cat, cfg, rng), _visibility(cfg, rng), cfg.m_max)
        _, emb = render_features(kp, cat.signatures, cfg, rng)
        supports.append((emb, kp))

    truth = _pad_keypoints(_instance_keypoints(cat, cfg, rng), _visibility(cfg, rng), cfg.m_max)
    query, _ = render_features(truth, cat.signatures, cfg, rng)

    adj = np.zeros((cfg.m_max, cfg.m_max))
    adj[: cfg.m, : cfg.m] = cat.adjacency
    return Episode(supports, query, truth, adj, category_id, cat.bbox_scale)


def generate_episodes(cfg: SynthConfig, n: int, seed: int, stream_id: int = 0) -> list[Episode]:
    rng = RngStream(seed, stream_id)
    return [generate_episode(cfg, rng) for _ in range(n)]


def aggregate_supports(shots: list[SupportEmbedding]) -> SupportEmbedding:
    """Masked mean over shots; a keypoint is visible if any shot sees it."""
    vals = torch.stack([s.masked().values for s in shots])
    masks = torch.stack([s.mask for s in shots])
    count = masks.sum(dim=0).to(DTYPE)
    mean = vals.sum(dim=0) / count.clamp(min=1.0).unsqueeze(-1)
    return SupportEmbedding(mean, count > 0)


@dataclass
class Proposals:
    keypoints: KeypointSet
    heatmap: torch.Tensor  # [..., M, h, w] raw similarities
    cues: torch.Tensor  # [..., M, 2] (soft-argmax spread, peak similarity)


def proposal_init(
    fs: SupportEmbedding,
    fq: QueryFeatureMap,
    proj: torch.Tensor | None = None,
    temperature: float | torch.Tensor = 20.0,
) -> Proposals:
    """Similarity maps between support rows and query cells, and their soft-argmax.

    ``proj`` is an optional ``[D, D]`` linear map applied to both sides before
    the dot product.
    """
    s_feat, q_feat = fs.masked().values, fq.values
    if proj is not None:
        s_feat, q_feat = s_feat @ proj.T, q_feat @ proj.T
    sim = s_feat @ q_feat.transpose(-1, -2)  # [..., M, hw]
    prob = torch.softmax(temperature * sim, dim=-1)
    centers = cell_centers(fq.grid, sim.dtype)
    coords = prob @ centers
    spread = torch.sqrt((prob * ((centers - coords.unsqueeze(-2)) ** 2).sum(-1)).sum(-1) + 1e-12)
    peak = sim.max(dim=-1).values
    h, w = fq.grid
    return Proposals(
        KeypointSet(coords, fs.mask),
        sim.reshape(*sim.shape[:-1], h, w),
        torch.stack([spread, peak], dim=-1),
    )


@dataclass
class EpisodeBatch:
    """Episodes stacked along a leading batch axis."""

    support: SupportEmbedding
    query: QueryFeatureMap
    truth: KeypointSet  # mask = query visibility AND support visibility
    true_adjacency: torch.Tensor
    bbox_scale: torch.Tensor
    category_id: torch.Tensor

    def __len__(self):
        return self.support.values.shape[0]

    def index(self, idx) -> "EpisodeBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return EpisodeBatch(
            SupportEmbedding(self.support.values[idx], self.support.mask[idx]),
            QueryFeatureMap(self.query.values[idx], self.query.grid),
            KeypointSet(self.truth.coords[idx], self.truth.mask[idx]),
            self.true_adjacency[idx],
            self.bbox_scale[idx],
            self.category_id[idx],
        )


def stack_episodes(episodes: list[Episode]) -> EpisodeBatch:
    supports = [ep.support for ep in episodes]
    s_mask = torch.stack([s.mask for s in supports])
    t_mask = torch.stack([ep.query_truth.mask for ep in episodes]) & s_mask
    return EpisodeBatch(
        SupportEmbedding(torch.stack([s.values for s in supports]), s_mask),
        QueryFeatureMap(torch.stack([ep.query.values for ep in episodes]), episodes[0].query.grid),
        KeypointSet(torch.stack([ep.query_truth.coords for ep in episodes]), t_mask),
        torch.stack([torch.from_numpy(ep.true_adjacency) for ep in episodes]),
        torch.tensor([ep.bbox_scale for ep in episodes], dtype=DTYPE),
        torch.tensor([ep.category_id for ep in episodes]),
    )


def dump_episodes(path, episodes: list[Episode]) -> None:
    arrays, meta = {}, {"count": len(episodes), "episodes": []}
    for i, ep in enumerate(episodes):
        meta["episodes"].append(
            {"category_id": ep.category_id, "bbox_scale": ep.bbox_scale, "grid": list(ep.query.grid), "shots": len(ep.supports)}
        )
        p = f"ep{i}."
        for j, (emb, kp) in enumerate(ep.supports):
            arrays[p + f"support{j}.values"] = emb.values.numpy()
            arrays[p + f"support{j}.mask"] = emb.mask.numpy()
            arrays[p + f"support{j}.coords"] = kp.coords.numpy()
            arrays[p + f"support{j}.kpmask"] = kp.mask.numpy()
        arrays[p + "query"] = ep.query.values.numpy()
        arrays[p + "truth.coords"] = ep.query_truth.coords.numpy()
        arrays[p + "truth.mask"] = ep.query_truth.mask.numpy()
        arrays[p + "adjacency"] = ep.true_adjacency
    write_bundle(path, EPISODE_MAGIC, EPISODE_VERSION, meta, arrays)


def load_episodes(path) -> list[Episode]:
    _, meta, arrays = read_bundle(path, EPISODE_MAGIC, (EPISODE_VERSION,))
    out = []
    t = torch.from_numpy
    for i, em in enumerate(meta["episodes"]):
        p = f"ep{i}."
        supports = [
            (
                SupportEmbedding(t(arrays[p + f"support{j}.values"]), t(arrays[p + f"support{j}.mask"])),
                KeypointSet(t(arrays[p + f"support{j}.coords"]), t(arrays[p + f"support{j}.kpmask"])),
            )
            for j in range(em["shots"])
        ]
        out.append(
            Episode(
                supports,
                QueryFeatureMap(t(arrays[p + "query"]), tuple(em["grid"])),
                KeypointSet(t(arrays[p + "truth.coords"]), t(arrays[p + "truth.mask"])),
                arrays[p + "adjacency"],
                em["category_id"],
                em["bbox_scale"],
            )
        )
    return out
