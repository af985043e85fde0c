"""Training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .episodes import EpisodeBatch, generate_episodes, stack_episodes
from .metrics import DEFAULT_THRESHOLDS, adjacency_recovery, pck_eval
from .model import (
    STREAM_BATCH,
    STREAM_EVAL_DATA,
    STREAM_LATENT,
    STREAM_TRAIN_DATA,
    GraphPoseModel,
    TrainConfig,
)
from .numeric import RngStream
from .serialization import decode_bundle, encode_bundle
from .structures import KeypointSet

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SPCKPT\x00\x01"
CKPT_VERSION = 1
LOG_FIELDS = ("step", "loss_total", "loss_heatmap", "loss_offset", "loss_kl", "loss_sparse")


@dataclass
class TrainState:
    model: GraphPoseModel
    optimizer: torch.optim.Adam
    step: int
    latent_rng: RngStream
    batch_rng: RngStream
    log: list[dict] = field(default_factory=list)

    @property
    def cfg(self) -> TrainConfig:
        return self.model.cfg


def _adam(model: GraphPoseModel, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(list(model.params.values()), lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=False)


def init_state(cfg: TrainConfig) -> TrainState:
    model = GraphPoseModel(cfg)
    return TrainState(
        model,
        _adam(model, cfg.lr_at(0)),
        0,
        RngStream(cfg.seed, STREAM_LATENT),
        RngStream(cfg.seed, STREAM_BATCH),
    )


def train_dataset(cfg: TrainConfig) -> EpisodeBatch:
    return stack_episodes(generate_episodes(cfg.synth("train"), cfg.train_episodes, cfg.seed, STREAM_TRAIN_DATA))


def eval_dataset(cfg: TrainConfig, n: int | None = None, seed: int | None = None) -> EpisodeBatch:
    n = cfg.eval_episodes if n is None else n
    seed = cfg.seed if seed is None else seed
    return stack_episodes(generate_episodes(cfg.synth("eval"), n, seed, STREAM_EVAL_DATA))


def train_step(state: TrainState, batch: EpisodeBatch) -> dict:
    """One Adam update on ``batch``; returns the loss record for this step."""
    lr = state.cfg.lr_at(state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    res = state.model.loss(batch, state.latent_rng, training=True)
    res.loss.backward()
    if lr > 0:
        state.optimizer.step()
    state.step += 1
    rec = {
        "step": state.step,
        "loss_total": res.record["total"],
        "loss_heatmap": res.record["heatmap"],
        "loss_offset": res.record["offset"],
        "loss_kl": res.record["kl"],
        "loss_sparse": res.record["sparse"],
    }
    state.log.append(rec)
    return rec


def next_batch(state: TrainState, data: EpisodeBatch) -> EpisodeBatch:
    idx = state.batch_rng.integers(0, len(data), state.cfg.batch_size)
    return data.index(idx)


def train(state: TrainState, data: EpisodeBatch, until: int | None = None, log_every: int = 0) -> TrainState:
    """Advance ``state`` to step ``until`` (default ``cfg.steps``)."""
    until = state.cfg.steps if until is None else until
    while state.step < until:
        rec = train_step(state, next_batch(state, data))
        if log_every and state.step % log_every == 0:
            logger.info("step %d loss %.5f", state.step, rec["loss_total"])
    return state


def write_log(path, records: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -- evaluation ---------------------------------------------------------------


def evaluate(model: GraphPoseModel, data: EpisodeBatch, thresholds=DEFAULT_THRESHOLDS, chunk: int = 256) -> dict:
    """PCK at each threshold, mPCK, and final-layer structure recovery."""
    preds, graphs = [], []
    for start in range(0, len(data), chunk):
        part = data.index(range(start, min(start + chunk, len(data))))
        out = model.predict(part)
        preds.append(out.decoder.final.coords)
        graphs.append(out.decoder.graphs[-1].values.expand(len(part), -1, -1))
    coords = torch.cat(preds)
    graph = torch.cat(graphs)
    res = pck_eval(KeypointSet(coords, data.truth.mask), data.truth, data.bbox_scale, thresholds)
    rec = [adjacency_recovery(graph[i], data.true_adjacency[i]) for i in range(len(data))]
    res["recovery"] = float(np.mean(rec))
    return res


# -- checkpoints --------------------------------------------------------------


def _config_meta(cfg: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def checkpoint_bytes(state: TrainState) -> bytes:
    model = state.model
    names = list(model.params)
    arrays = {f"param/{n}": model.params[n].detach().numpy() for n in names}
    adam_steps = []
    for n in names:
        st = state.optimizer.state.get(model.params[n], {})
        if st:
            adam_steps.append(float(st["step"]))
            arrays[f"adam_m/{n}"] = st["exp_avg"].numpy()
            arrays[f"adam_v/{n}"] = st["exp_avg_sq"].numpy()
        else:
            adam_steps.append(0.0)
    if model.frozen_graph is not None:
        arrays["frozen_graph"] = model.frozen_graph.numpy()
    meta = {
        "config": _config_meta(state.cfg),
        "step": state.step,
        "param_names": names,
        "adam_steps": adam_steps,
        "rng": {"latent": state.latent_rng.get_state(), "batch": state.batch_rng.get_state()},
    }
    return encode_bundle(CKPT_MAGIC, CKPT_VERSION, meta, arrays)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def state_from_bytes(data: bytes) -> TrainState:
    _, meta, arrays = decode_bundle(data, CKPT_MAGIC, (CKPT_VERSION,))
    cfg = TrainConfig().replace(**meta["config"])
    names = meta["param_names"]
    params = {n: torch.from_numpy(arrays[f"param/{n}"]) for n in names}
    frozen = torch.from_numpy(arrays["frozen_graph"]) if "frozen_graph" in arrays else None
    model = GraphPoseModel(cfg, params, frozen)
    opt = _adam(model, cfg.lr_at(meta["step"]))
    sd = opt.state_dict()
    sd["state"] = {
        i: {
            "step": torch.tensor(s),
            "exp_avg": torch.from_numpy(arrays[f"adam_m/{n}"]),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam_v/{n}"]),
        }
        for i, (n, s) in enumerate(zip(names, meta["adam_steps"]))
        if f"adam_m/{n}" in arrays
    }
    opt.load_state_dict(sd)
    return TrainState(
        model,
        opt,
        meta["step"],
        RngStream.from_state(meta["rng"]["latent"]),
        RngStream.from_state(meta["rng"]["batch"]),
    )


def load_checkpoint(path) -> TrainState:
    return state_from_bytes(Path(path).read_bytes())
