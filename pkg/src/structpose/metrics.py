"""Evaluation metrics: PCK at several thresholds and edge-recovery precision."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .latent_graph import AdjacencyMatrix
from .structures import KeypointSet

DEFAULT_THRESHOLDS = (0.05, 0.1, 0.15, 0.2)


def pck_eval(
    preds: KeypointSet,
    truth: KeypointSet,
    bbox_scale,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> dict:
    """Probability of correct keypoint per threshold, plus ``"mPCK"``.

    A keypoint is correct when its error is ``<= tau * bbox_scale``.  PCK is
    computed per instance over its visible keypoints and averaged over
    instances; instances without visible keypoints are skipped.

    Inputs may be a single instance ``[M, 2]`` or a batch ``[B, M, 2]``.
    """
    if not torch.equal(preds.mask, truth.mask):
        raise ValueError("prediction and ground-truth masks disagree")
    pc = preds.coords.detach()
    tc = truth.coords.detach()
    mask = truth.mask
    if pc.dim() == 2:
        pc, tc, mask = pc[None], tc[None], mask[None]
    scale = torch.as_tensor(bbox_scale, dtype=pc.dtype).reshape(-1)
    if bool((scale <= 0).any()):
        raise ValueError("bbox_scale must be positive")
    scale = scale.expand(pc.shape[0])
    err = torch.linalg.norm(pc - tc, dim=-1)  # [B, M]
    n_vis = mask.sum(-1)
    keep = n_vis > 0
    out = {}
    for tau in thresholds:
        hit = ((err <= tau * scale[:, None]) & mask).sum(-1)
        frac = hit[keep].to(pc.dtype) / n_vis[keep].to(pc.dtype)
        out[tau] = float(frac.mean()) if bool(keep.any()) else float("nan")
    out["mPCK"] = float(np.mean([out[t] for t in thresholds]))
    return out


def adjacency_recovery(learned, truth, nodes=None) -> float:
    """Precision of the top-k learned undirected edges against the true edge set.

    ``k`` is the true edge count.  Pairs are scored by the symmetrized learned
    weight; a tie straddling the cut-off receives its expected share under
    uniformly random tie-breaking, so a constant matrix scores exactly
    ``k / (M(M-1)/2)``.
    """
    a = learned.values if isinstance(learned, AdjacencyMatrix) else learned
    a = torch.as_tensor(a).detach().double()
    t = torch.as_tensor(truth).detach().double()
    if nodes is not None:
        sel = torch.as_tensor(nodes, dtype=torch.bool)
        a, t = a[sel][:, sel], t[sel][:, sel]
    m = a.shape[-1]
    iu = torch.triu_indices(m, m, offset=1)
    score = (0.5 * (a + a.T))[iu[0], iu[1]].numpy()
    is_edge = (t[iu[0], iu[1]] > 0).numpy()
    k = int(is_edge.sum())
    if k == 0:
        return float("nan")
    order = np.sort(score)[::-1]
    cut = order[k - 1]
    above = score > cut
    tied = score == cut
    hits = is_edge[above].sum()
    slots = k - above.sum()
    hits = hits + slots * is_edge[tied].mean()
    return float(hits / k)
