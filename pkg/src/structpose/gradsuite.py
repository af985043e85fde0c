"""Finite-difference checks for every differentiable operation.

Each check builds a small random instance from a seed, wraps the operation as a
scalar function of one input tensor and compares autograd with central
differences via :func:`grad_check`.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable

import torch

from . import cgt, decoder, latent_graph as lg, objective
from .episodes import proposal_init
from .numeric import RngStream, grad_check, matmul
from .structures import KeypointSet, QueryFeatureMap, SupportEmbedding

OP_TOL = 1e-5
COMPOSITE_TOL = 1e-4
H = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


class _Tiny:
    """Random tiny instance: M=4, D=8, D_z=4, 2 layers, 2 samples, 5x5 grid, batch 2."""

    def __init__(self, seed: int):
        self.rng = RngStream(seed, 99)
        r = self.rng
        self.b, self.m, self.d, self.dz, self.nl, self.ns = 2, 4, 8, 4, 2, 2
        self.grid = (5, 5)
        t = lambda *s: torch.from_numpy(r.normal(s))  # noqa: E731
        self.t = t
        self.fs = t(self.b, self.m, self.d)
        self.mask = torch.tensor([[True, True, True, False], [True, True, True, True]])
        self.fq = t(self.b, 25, self.d) * 0.5
        self.p0 = torch.from_numpy(r.uniform(0.15, 0.85, (self.b, self.m, 2)))
        self.cues = torch.from_numpy(r.uniform(0.0, 1.0, (self.b, self.m, decoder.N_CUES)))
        self.truth = torch.from_numpy(r.uniform(0.1, 0.9, (self.b, self.m, 2)))
        self.isvae = [lg.IsvaeParams.init(self.m, self.d, self.dz, r) for _ in range(self.nl)]
        for p in self.isvae:
            p.enc_b1 = t(*p.enc_b1.shape) * 0.1
            p.enc_b2 = t(*p.enc_b2.shape) * 0.1
        self.proj = cgt.GatingProjection.init(self.d, self.dz, r)
        self.dec = decoder.DecoderParams.init(self.nl, self.d, r, out_scale=0.5)
        # nonzero biases keep zero rows (masked keypoints, dead units) off the ReLU kink
        self.dec.pos_b = t(self.d) * 0.1
        for layer in self.dec.layers:
            layer.mlp_b1 = t(self.d) * 0.1
            layer.mlp_b2 = t(2) * 0.1
        self.prop_w = torch.eye(self.d) + 0.1 * t(self.d, self.d)
        self.eps_seed = int(r.integers(0, 2**31))

    def support(self, values=None):
        return SupportEmbedding(self.fs if values is None else values, self.mask)

    def query(self, values=None):
        return QueryFeatureMap(self.fq if values is None else values, self.grid)

    def latent_rng(self):
        return RngStream(self.eps_seed, 7)

    def full_loss(self, isvae=None, proj=None, dec=None, prop_w=None, fs=None, cfg=None):
        cfg = cfg or cgt.FusionConfig(self.ns)
        support = self.support(fs)
        q = self.query()
        prop = proposal_init(support, q, self.prop_w if prop_w is None else prop_w, 4.0)
        out = decoder.run_decoder(
            support, q, prop.keypoints, dec or self.dec, isvae or self.isvae, proj or self.proj,
            cfg, self.latent_rng(), True, cues=prop.cues,
        )
        truth = KeypointSet(self.truth, self.mask)
        gt = objective.gaussian_heatmaps(truth, self.grid)
        l_heat = objective.heatmap_loss(prop.heatmap, gt, self.mask).mean()
        l_off = objective.offset_loss([KeypointSet(k.coords, self.mask) for k in out.keypoints], truth).mean()
        l_vae = objective.vae_loss([k.mean() for k in out.kl], [s.mean() for s in out.sparsity], 0.1)
        return objective.total_loss(l_heat, l_off, l_vae, objective.LossWeights(0.1, 1e-3, 1.0))


def _sub(n: int, rng: RngStream, k: int = 16) -> list[int]:
    if n <= k:
        return list(range(n))
    return sorted(int(i) for i in rng.permutation(n)[:k])


def _replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


def operation_checks(seed: int) -> list[tuple[str, float, Callable[[], float]]]:
    """``(name, tolerance, thunk)`` for every differentiable operation."""
    s = _Tiny(seed)
    r, t = s.rng, s.t
    p = s.isvae[0]
    N = lg.Stage.NORMALIZED
    lay = s.dec.layers[0]

    def normalized(x):
        return lg.row_normalize(lg.symmetrize(lg.AdjacencyMatrix(x, lg.Stage.RAW)))

    dist = lg.encode_posterior(s.support(), p)
    mu, logvar = dist.mu.detach(), dist.logvar.detach()
    eps = t(*mu.shape)
    raw = torch.from_numpy(r.uniform(0.05, 0.95, (s.m, s.m)))
    adjs = [normalized(torch.from_numpy(r.uniform(0, 1, (s.m, s.m)))) for _ in range(3)]
    mus = [t(s.b, s.dz) for _ in range(3)]
    a_mat, b_mat, w_prod = t(4, 5), t(5, 3), t(4, 3)
    w_mm, w_feat = t(s.m, s.m), t(s.b, s.m, s.d)
    w3 = torch.from_numpy(r.uniform(0.1, 1.0, 3))
    w4 = torch.from_numpy(r.uniform(0.0, 2.0, 4))
    hm_pred, hm_truth = t(s.b, s.m, 5, 5), t(s.b, s.m, 5, 5)
    coef3 = torch.tensor([1.0, -2.0, 0.5])
    refine = lambda x, mlp=lay.mlp: decoder.keypoint_refine(KeypointSet(x, s.mask), s.support(), mlp).coords  # noqa: E731

    def wsum(x, w):
        return (x * w).sum()

    def sub(x):
        return _sub(x.numel(), r)

    return [
        ("matmul", OP_TOL, lambda: grad_check(lambda x: wsum(matmul(x, b_mat), w_prod), a_mat, H)),
        ("encode_posterior[fs]", OP_TOL, lambda: grad_check(
            lambda x: _posterior_scalar(lg.encode_posterior(s.support(x), p)), s.fs, H, sub(s.fs))),
        ("encode_posterior[enc_w1]", OP_TOL, lambda: grad_check(
            lambda x: _posterior_scalar(lg.encode_posterior(s.support(), _replace(p, enc_w1=x))), p.enc_w1, H, sub(p.enc_w1))),
        ("encode_posterior[enc_w2]", OP_TOL, lambda: grad_check(
            lambda x: _posterior_scalar(lg.encode_posterior(s.support(), _replace(p, enc_w2=x))), p.enc_w2, H, sub(p.enc_w2))),
        ("sample_latent[mu]", OP_TOL, lambda: grad_check(
            lambda x: (lg.sample_latent(lg.LatentDistribution(x, logvar), eps=eps) ** 2).sum(), mu, H)),
        ("sample_latent[logvar]", OP_TOL, lambda: grad_check(
            lambda x: (lg.sample_latent(lg.LatentDistribution(mu, x), eps=eps) ** 2).sum(), logvar, H)),
        ("decode_adjacency[z]", OP_TOL, lambda: grad_check(
            lambda x: wsum(lg.decode_adjacency(x, p, s.m).values, w_mm), mu, H)),
        ("decode_adjacency[dec_w]", OP_TOL, lambda: grad_check(
            lambda x: wsum(lg.decode_adjacency(mu, _replace(p, dec_w=x), s.m).values, w_mm), p.dec_w, H, sub(p.dec_w))),
        ("symmetrize+row_normalize", OP_TOL, lambda: grad_check(lambda x: wsum(normalized(x).values, w_mm), raw, H)),
        ("kl_to_standard_normal[mu]", OP_TOL, lambda: grad_check(
            lambda x: lg.kl_to_standard_normal(lg.LatentDistribution(x, logvar)).sum(), mu, H)),
        ("kl_to_standard_normal[logvar]", OP_TOL, lambda: grad_check(
            lambda x: lg.kl_to_standard_normal(lg.LatentDistribution(mu, x)).sum(), logvar, H)),
        ("sparsity_penalty", OP_TOL, lambda: grad_check(
            lambda x: lg.sparsity_penalty(lg.AdjacencyMatrix(x, N)), adjs[0].values, H)),
        ("confidence_weights[logvar]", OP_TOL, lambda: grad_check(
            lambda x: wsum(cgt.confidence_weights([lg.LatentDistribution(mu, x), lg.LatentDistribution(mu, 0.5 * logvar)]),
                           torch.tensor([1.0, -0.5])), logvar, H)),
        ("fuse_samples[adjacency]", OP_TOL, lambda: grad_check(
            lambda x: wsum(cgt.fuse_samples([lg.AdjacencyMatrix(x, N)] + adjs[1:], w3 / w3.sum()).values, w_mm), adjs[0].values, H)),
        ("fuse_samples[weights]", OP_TOL, lambda: grad_check(
            lambda x: wsum(cgt.fuse_samples(adjs, x / x.sum()).values, w_mm), w3, H)),
        ("gating_scores[proj]", OP_TOL, lambda: grad_check(
            lambda x: wsum(cgt.gating_scores(s.query(), mus, cgt.GatingProjection(x)), coef3), s.proj.proj_w, H)),
        ("gating_scores[mu]", OP_TOL, lambda: grad_check(
            lambda x: wsum(cgt.gating_scores(s.query(), [x] + mus[1:], s.proj), coef3), mus[0], H)),
        ("fuse_layers", OP_TOL, lambda: grad_check(
            lambda x: wsum(cgt.fuse_layers(adjs, torch.softmax(x, -1)).values, w_mm), w3, H)),
        ("gcn_forward[fs]", OP_TOL, lambda: grad_check(
            lambda x: wsum(decoder.gcn_forward(s.support(x), adjs[0], lay.w_adj, lay.w_self).values, w_feat), s.fs, H, sub(s.fs))),
        ("gcn_forward[w_adj]", OP_TOL, lambda: grad_check(
            lambda x: wsum(decoder.gcn_forward(s.support(), adjs[0], x, lay.w_self).values, w_feat), lay.w_adj, H, sub(lay.w_adj))),
        ("gcn_forward[adjacency]", OP_TOL, lambda: grad_check(
            lambda x: wsum(decoder.gcn_forward(s.support(), lg.AdjacencyMatrix(x, N), lay.w_adj, lay.w_self).values, w_feat),
            adjs[0].values, H)),
        ("keypoint_refine[coords]", OP_TOL, lambda: grad_check(lambda x: wsum(refine(x), s.truth), s.p0, H)),
        ("keypoint_refine[mlp_w2]", OP_TOL, lambda: grad_check(
            lambda x: wsum(refine(s.p0, decoder.RefineMLP(lay.mlp_w1, lay.mlp_b1, x, lay.mlp_b2)), s.truth), lay.mlp_w2, H)),
        ("proposal_init[proj]", OP_TOL, lambda: grad_check(
            lambda x: _proposal_scalar(proposal_init(s.support(), s.query(), x, 4.0)), s.prop_w, H, sub(s.prop_w))),
        ("proposal_init[query]", OP_TOL, lambda: grad_check(
            lambda x: _proposal_scalar(proposal_init(s.support(), s.query(x), s.prop_w, 4.0)), s.fq, H, sub(s.fq))),
        ("heatmap_loss", OP_TOL, lambda: grad_check(
            lambda x: objective.heatmap_loss(x, hm_truth, s.mask).sum(), hm_pred, H, sub(hm_pred))),
        ("offset_loss", OP_TOL, lambda: grad_check(
            lambda x: objective.offset_loss([KeypointSet(x, s.mask), KeypointSet(s.p0, s.mask)], KeypointSet(s.truth, s.mask)).sum(),
            s.p0, H)),
        ("vae_loss", OP_TOL, lambda: grad_check(lambda x: objective.vae_loss(list(x[:2]), list(x[2:]), 0.1), w4, H)),
        ("total_loss[components]", OP_TOL, lambda: grad_check(
            lambda x: objective.total_loss(x[0], x[1], x[2], objective.LossWeights(0.1, 1e-3, 0.7)), w3, H)),
        ("total_loss[weights]", OP_TOL, lambda: grad_check(
            lambda x: objective.total_loss(1.3, 0.7, 2.1, _Weights(x[0], x[1])), torch.tensor([1.0, 1e-3]), H)),
        ("cgt_step[dec_b]", COMPOSITE_TOL, lambda: grad_check(lambda x: _cgt_scalar(s, _replace(p, dec_b=x)), p.dec_b, H)),
        ("cgt_step[enc_b2]", COMPOSITE_TOL, lambda: grad_check(lambda x: _cgt_scalar(s, _replace(p, enc_b2=x)), p.enc_b2, H)),
        ("cgt_step[proj] query/query", COMPOSITE_TOL, lambda: grad_check(
            lambda x: _cgt_scalar(s, p, cgt.GatingProjection(x), cgt.FusionConfig(s.ns, sample_strategy="query", layer_strategy="query")),
            s.proj.proj_w, H, sub(s.proj.proj_w))),
        ("cgt_step[dec_w] bayesian/bayesian", COMPOSITE_TOL, lambda: grad_check(
            lambda x: _cgt_scalar(s, _replace(p, dec_w=x), cfg=cgt.FusionConfig(s.ns, layer_strategy="bayesian")), p.dec_w, H, sub(p.dec_w))),
        ("run_decoder[w_self]", COMPOSITE_TOL, lambda: grad_check(
            lambda x: s.full_loss(dec=_dec_with(s.dec, 1, w_self=x)), s.dec.layers[1].w_self, H, sub(s.dec.layers[1].w_self))),
    ]


@dataclass
class _Weights:
    lambda_heatmap: torch.Tensor
    gamma: torch.Tensor


def _posterior_scalar(dist) -> torch.Tensor:
    return dist.mu.sum() + 0.3 * (dist.logvar**2).sum()


def _proposal_scalar(prop) -> torch.Tensor:
    return (prop.keypoints.coords * torch.tensor([1.0, -0.7])).sum() + 0.1 * prop.heatmap.sum() + prop.cues.sum()


def _cgt_scalar(s: _Tiny, p, proj=None, cfg=None) -> torch.Tensor:
    cfg = cfg or cgt.FusionConfig(s.ns)
    hist = cgt.LayerHistory()
    rng = s.latent_rng()
    # two layers so the layer-fusion path is exercised
    first = cgt.cgt_step(s.support(), s.query(), hist, s.isvae[1], proj or s.proj, cfg, rng)
    out = cgt.cgt_step(s.support(), s.query(), first.history, p, proj or s.proj, cfg, rng)
    weight = torch.arange(s.m * s.m, dtype=torch.float64).reshape(s.m, s.m) / 7 - 1
    return (out.final.values * weight).sum() + out.kl.sum() + 5 * out.sparsity.sum()


def _dec_with(dec: decoder.DecoderParams, layer: int, **kw) -> decoder.DecoderParams:
    layers = list(dec.layers)
    layers[layer] = _replace(layers[layer], **kw)
    return decoder.DecoderParams(layers, dec.pos_w, dec.pos_b)


def full_loss_checks(seed: int) -> list[tuple[str, float, Callable[[], float]]]:
    """Composite checks of the full training loss w.r.t. every parameter tensor."""
    s = _Tiny(seed)
    r = RngStream(seed, 100)
    out = []

    def add(name, x, f):
        out.append((f"total_loss[{name}]", COMPOSITE_TOL, lambda: grad_check(f, x, H, _sub(x.numel(), r, 8))))

    for i, p in enumerate(s.isvae):
        for field in ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w", "dec_b"):
            def f(x, i=i, field=field):
                isvae = list(s.isvae)
                isvae[i] = _replace(isvae[i], **{field: x})
                return s.full_loss(isvae=isvae)
            add(f"isvae{i}.{field}", getattr(p, field), f)
    add("gate.proj_w", s.proj.proj_w, lambda x: s.full_loss(proj=cgt.GatingProjection(x)))
    add("prop.w", s.prop_w, lambda x: s.full_loss(prop_w=x))
    add("dec.pos_w", s.dec.pos_w, lambda x: s.full_loss(dec=decoder.DecoderParams(s.dec.layers, x, s.dec.pos_b)))
    add("dec.pos_b", s.dec.pos_b, lambda x: s.full_loss(dec=decoder.DecoderParams(s.dec.layers, s.dec.pos_w, x)))
    for i, layer in enumerate(s.dec.layers):
        for field in ("w_adj", "w_self", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            add(f"dec.layer{i}.{field}", getattr(layer, field), lambda x, i=i, field=field: s.full_loss(dec=_dec_with(s.dec, i, **{field: x})))
    add("support", s.fs, lambda x: s.full_loss(fs=x))
    return out


def run_suite(seeds, include_full: bool = True, report=None) -> list[CheckResult]:
    results = []
    for seed in seeds:
        checks = operation_checks(seed) + (full_loss_checks(seed) if include_full else [])
        for name, tol, thunk in checks:
            res = CheckResult(f"{name} (seed {seed})", thunk(), tol)
            results.append(res)
            if report is not None:
                report(res)
    return results


def main_report(seeds, include_full=True, stream=None) -> bool:
    start = time.perf_counter()
    failed = []

    def report(res: CheckResult):
        if not res.ok:
            failed.append(res)
        if stream is not None:
            print(f"{'PASS' if res.ok else 'FAIL'} {res.name}: {res.error:.2e} (tol {res.tol:.0e})", file=stream)

    results = run_suite(seeds, include_full, report)
    if stream is not None:
        worst = max(results, key=lambda r: r.error / r.tol)
        print(
            f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s; "
            f"worst {worst.name} {worst.error:.2e}",
            file=stream,
        )
    return not failed


