"""Acceptance criteria, each at its stated tolerance; one PASS/FAIL line per criterion."""

import io
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import reference as ref
from structpose.cgt import BAYESIAN, QUERY, FusionConfig, GatingProjection, LayerHistory, cgt_step, confidence_weights, fuse_layers, fuse_samples, fixed_graph
from structpose.decoder import DecoderParams, run_decoder
from structpose.gradsuite import run_suite
from structpose.latent_graph import (
    AdjacencyMatrix,
    IsvaeParams,
    LatentDistribution,
    Stage,
    decode_adjacency,
    kl_to_standard_normal,
    row_normalize,
    symmetrize,
)
from structpose.metrics import DEFAULT_THRESHOLDS, adjacency_recovery
from structpose.numeric import RngStream
from structpose.structures import KeypointSet, QueryFeatureMap, SupportEmbedding
from structpose.training import (
    checkpoint_bytes,
    eval_dataset,
    evaluate,
    init_state,
    state_from_bytes,
    train,
    train_dataset,
)

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
from train_ring import RING_BENCHMARK  # noqa: E402

pytestmark = pytest.mark.slow


# -- 1 ------------------------------------------------------------------------


def test_c1_gradient_suite(verdict):
    start = time.perf_counter()
    results = run_suite(range(10), include_full=True)
    elapsed = time.perf_counter() - start
    failed = [r for r in results if not r.ok]
    worst_op = max((r.error for r in results if r.tol == 1e-5), default=0.0)
    worst_full = max((r.error for r in results if r.tol == 1e-4), default=0.0)
    ok = not failed and elapsed < 120
    verdict(
        "1 gradient suite",
        ok,
        f"{len(results) - len(failed)}/{len(results)} checks over 10 seeds, worst op {worst_op:.1e} (< 1e-5), "
        f"worst composite {worst_full:.1e} (< 1e-4), {elapsed:.1f}s (< 120s)",
    )
    assert ok, [f"{r.name}: {r.error:.2e}" for r in failed]


# -- 2 ------------------------------------------------------------------------


def test_c2_closed_form_kl(verdict):
    dz = 16
    zero = float(kl_to_standard_normal(LatentDistribution(torch.zeros(dz, dtype=torch.float64), torch.zeros(dz, dtype=torch.float64))))
    per_dim = kl_to_standard_normal(LatentDistribution(torch.ones(dz, 1, dtype=torch.float64), torch.zeros(dz, 1, dtype=torch.float64)))
    err = float((per_dim - 0.5).abs().max())
    ok = abs(zero) <= 1e-12 and err <= 1e-12
    verdict("2 closed-form KL", ok, f"KL(N(0,I)||N(0,I)) = {zero:.1e}, max |KL(N(1,1)||N(0,1)) - 0.5| = {err:.1e} (tol 1e-12)")
    assert ok


# -- 3 ------------------------------------------------------------------------


def test_c3_fusion_algebra(verdict):
    rng = RngStream(2024)
    worst_sum = worst_uniform = 0.0
    hull_ok = True
    for _ in range(1000):
        n, dz, m = int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(2, 9))
        dists = [LatentDistribution(rng.normal_tensor((dz,)), rng.normal_tensor((dz,)) * 2) for _ in range(n)]
        w = confidence_weights(dists)
        worst_sum = max(worst_sum, abs(float(w.sum()) - 1))
        same = LatentDistribution(rng.normal_tensor((dz,)), torch.full((dz,), float(rng.normal(1)[0]), dtype=torch.float64))
        u = confidence_weights([same] * n)
        worst_uniform = max(worst_uniform, float((u - 1 / n).abs().max()))
        mats = [fixed_graph(torch.from_numpy(rng.uniform(0, 1, (m, m)))) for _ in range(n)]
        stack = torch.stack([a.values for a in mats])
        lo, hi = stack.min(0).values, stack.max(0).values
        for out in (fuse_samples(mats, w).values, fuse_layers(mats, w).values):
            hull_ok &= bool((out >= lo - 1e-15).all() and (out <= hi + 1e-15).all())
    ok = worst_sum <= 1e-12 and worst_uniform <= 1e-12 and hull_ok
    verdict(
        "3 fusion algebra",
        ok,
        f"1000 trials: max |sum w - 1| = {worst_sum:.1e}, equal-variance deviation {worst_uniform:.1e} (tol 1e-12), "
        f"convex hull {'held' if hull_ok else 'VIOLATED'}",
    )
    assert ok


# -- 4 ------------------------------------------------------------------------


def test_c4_stage_invariants(verdict):
    rng = RngStream(4)
    asym = row_dev = 0.0
    raw_ok = True
    for _ in range(500):
        m, dz = int(rng.integers(2, 10)), int(rng.integers(1, 8))
        p = IsvaeParams.init(m, 2, dz, rng, hidden=4)
        p.dec_b = rng.normal_tensor((m * m,)) * 3
        raw = decode_adjacency(rng.normal_tensor((dz,)) * 3, p, m)
        raw_ok &= bool(((raw.values > 0) & (raw.values < 1)).all())
        sym = symmetrize(raw)
        asym = max(asym, float((sym.values - sym.values.T).abs().max()))
        # also arbitrary (not sigmoid-bounded) raw inputs
        free = symmetrize(AdjacencyMatrix(torch.from_numpy(rng.normal((m, m)) * 100), Stage.RAW))
        asym = max(asym, float((free.values - free.values.T).abs().max()))
        rows = row_normalize(sym).values.sum(-1)
        row_dev = max(row_dev, float((rows - 1).abs().max()))
    ok = asym < 1e-15 and row_dev <= 1e-9 and raw_ok
    verdict(
        "4 stage invariants",
        ok,
        f"500 cases: max|A - A^T| = {asym:.1e} (< 1e-15), max |row sum - 1| = {row_dev:.1e} (<= 1e-9), "
        f"raw entries in (0,1): {raw_ok}",
    )
    assert ok


# -- 5 ------------------------------------------------------------------------


def _instance(rng):
    m, n_s, n_layers = int(rng.integers(3, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
    d, dz, hw = int(rng.integers(2, 7)), int(rng.integers(2, 6)), (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    mask = rng.uniform(0, 1, m) > 0.2
    mask[0] = True
    dec = DecoderParams.init(n_layers, d, rng, out_scale=1.0)
    dec.pos_b = rng.normal_tensor((d,)) * 0.3
    isvae = []
    for _ in range(n_layers):
        p = IsvaeParams.init(m, d, dz, rng, hidden=32)
        p.enc_b2 = rng.normal_tensor((2 * dz,)) * 0.5
        p.dec_b = rng.normal_tensor((m * m,))
        isvae.append(p)
    strategies = (BAYESIAN, QUERY)
    cfg = FusionConfig(n_s, sample_strategy=strategies[int(rng.integers(0, 2))], layer_strategy=strategies[int(rng.integers(0, 2))])
    return dict(
        m=m, d=d, dz=dz, n_layers=n_layers, cfg=cfg, mask=mask, hw=hw,
        fs=rng.normal((m, d)) * mask[:, None], fq=rng.normal((hw[0] * hw[1], d)),
        p0=rng.uniform(0.02, 0.98, (m, 2)), cues=rng.uniform(0, 1, (m, 2)),
        dec=dec, isvae=isvae, proj=GatingProjection.init(d, dz, rng),
    )


def _rel(got, want):
    # scalar regularizers can reach 1e8 on random weights; compare them on the max(1, |x|) scale
    return abs(float(got) - want) / max(1.0, abs(want))


def test_c5_oracle_equivalence(verdict):
    start = time.perf_counter()
    rng = RngStream(55)
    worst_cgt = worst_dec = 0.0
    for k in range(50):
        inst = _instance(rng)
        cfg = inst["cfg"]
        mask = torch.from_numpy(inst["mask"])
        fs = SupportEmbedding(torch.from_numpy(inst["fs"]), mask)
        fq = QueryFeatureMap(torch.from_numpy(inst["fq"]), inst["hw"])
        np_isvae = [{n: v.numpy() for n, v in p.as_dict().items()} for p in inst["isvae"]]
        proj_np = inst["proj"].proj_w.numpy()

        # cgt_step on a fixed support embedding, layer after layer
        run_rng, draw_rng = RngStream(k, 1), RngStream(k, 1)
        hist, ref_hist = LayerHistory(), []
        for p, p_np in zip(inst["isvae"], np_isvae):
            out = cgt_step(fs, fq, hist, p, inst["proj"], cfg, run_rng, True)
            hist = out.history
            final, ref_hist, kl, sp = ref.cgt_layer(
                inst["fs"], inst["mask"], inst["fq"], ref_hist, p_np, proj_np, cfg.n_samples,
                cfg.sample_strategy, cfg.layer_strategy, draw_rng.normal((cfg.n_samples, inst["dz"])),
            )
            worst_cgt = max(worst_cgt, float(np.abs(out.final.values.numpy() - final).max()), _rel(out.kl, kl), _rel(out.sparsity, sp))

        # full decoder (training mode, then inference mode)
        for training in (True, False):
            dec_rng = RngStream(k, 2) if training else None
            out = run_decoder(
                fs, fq, KeypointSet(torch.from_numpy(inst["p0"]), mask), inst["dec"], inst["isvae"], inst["proj"],
                cfg, dec_rng, training, cues=torch.from_numpy(inst["cues"]),
            )
            draws = None
            if training:
                g = RngStream(k, 2)
                draws = [g.normal((cfg.n_samples, inst["dz"])) for _ in range(inst["n_layers"])]
            dec_np = {
                "pos_w": inst["dec"].pos_w.numpy(), "pos_b": inst["dec"].pos_b.numpy(),
                "layers": [{n: getattr(l, n).numpy() for n in ("w_adj", "w_self", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")} for l in inst["dec"].layers],
            }
            kps, graphs, kls, sps = ref.decoder(
                inst["fs"], inst["mask"], inst["fq"], inst["p0"], inst["cues"], dec_np, np_isvae, proj_np,
                cfg.n_samples, cfg.sample_strategy, cfg.layer_strategy, draws,
            )
            for layer in range(inst["n_layers"]):
                worst_dec = max(
                    worst_dec,
                    float(np.abs(out.keypoints[layer].coords.numpy() - kps[layer]).max()),
                    float(np.abs(out.graphs[layer].values.numpy() - graphs[layer]).max()),
                    _rel(out.kl[layer], kls[layer]),
                    _rel(out.sparsity[layer], sps[layer]),
                )
    elapsed = time.perf_counter() - start
    ok = worst_cgt < 1e-12 and worst_dec < 1e-12 and elapsed < 30
    verdict(
        "5 oracle equivalence",
        ok,
        f"50 instances: cgt_step max diff {worst_cgt:.1e}, run_decoder max diff {worst_dec:.1e} (< 1e-12; "
        f"graphs/coords absolute, kl/sparsity relative to max(1,|ref|)), {elapsed:.1f}s (< 30s)",
    )
    assert ok


# -- shared benchmark runs for 6-10 -------------------------------------------


@pytest.fixture(scope="module")
def bench_data():
    return train_dataset(RING_BENCHMARK), eval_dataset(RING_BENCHMARK)


@pytest.fixture(scope="module")
def trained(bench_data):
    """Train each graph mode once on the ring benchmark; reused by criteria 7-10."""
    out = {}
    for mode in ("learned", "random-frozen"):
        cfg = RING_BENCHMARK.replace(graph_mode=mode)
        start = time.perf_counter()
        data, held_out = train_dataset(cfg), eval_dataset(cfg)  # timed from scratch
        state = train(init_state(cfg), data)
        res = evaluate(state.model, held_out)
        out[mode] = (state, res, time.perf_counter() - start)
    return out


def test_c6_determinism(verdict, bench_data):
    data, held_out = bench_data
    cfg = RING_BENCHMARK.replace(steps=30)
    a, b = train(init_state(cfg), data), train(init_state(cfg), data)
    logs_equal = a.log == b.log
    blob = checkpoint_bytes(a)
    preds = [state_from_bytes(blob).model.predict(held_out) for _ in range(2)]
    bit_equal = all(
        torch.equal(x.coords, y.coords) for x, y in zip(preds[0].decoder.keypoints, preds[1].decoder.keypoints)
    ) and all(torch.equal(x.values, y.values) for x, y in zip(preds[0].decoder.graphs, preds[1].decoder.graphs))
    ok = logs_equal and bit_equal
    verdict("6 determinism", ok, f"two inference passes bit-identical: {bit_equal}; equal-seed 30-step loss logs identical: {logs_equal}")
    assert ok


def test_c7_synthetic_learning(verdict, trained):
    _, res, elapsed = trained["learned"]
    pcks = [res[t] for t in DEFAULT_THRESHOLDS]
    monotone = all(x <= y for x, y in zip(pcks, pcks[1:]))
    ok = res[0.2] >= 0.90 and elapsed < 600 and monotone
    verdict(
        "7 synthetic learning",
        ok,
        f"learned PCK@0.2 = {res[0.2]:.4f} (>= 0.90) in {elapsed:.0f}s (< 600s); "
        f"PCK by threshold {' '.join(f'{p:.3f}' for p in pcks)} monotone: {monotone}",
    )
    assert ok


def test_c8_ablation_direction(verdict, trained):
    learned, frozen = trained["learned"][1][0.2], trained["random-frozen"][1][0.2]
    gap = 100 * (learned - frozen)
    ok = gap >= 2.0
    verdict("8 ablation direction", ok, f"learned {learned:.4f} vs random-frozen {frozen:.4f}: gap {gap:.1f} points (>= 2)")
    assert ok


def test_c9_structure_recovery(verdict, trained, bench_data):
    state = trained["learned"][0]
    held_out = bench_data[1].index(range(50))
    out = state.model.predict(held_out)
    final = out.decoder.graphs[-1].values.expand(50, -1, -1)
    scores = [adjacency_recovery(final[i], held_out.true_adjacency[i]) for i in range(50)]
    m = RING_BENCHMARK.m
    chance = m / (m * (m - 1) / 2)
    mean = float(np.mean(scores))
    ok = mean > 2 * chance
    verdict("9 structure recovery", ok, f"mean top-k precision over 50 episodes {mean:.3f} (> 2 x {chance:.3f} = {2 * chance:.3f})")
    assert ok


def test_c10_checkpoint_round_trip(verdict, trained, bench_data):
    data = bench_data[0]
    state = trained["learned"][0]
    blob = checkpoint_bytes(state)
    round_trip = checkpoint_bytes(state_from_bytes(blob)) == blob

    cfg = RING_BENCHMARK.replace(steps=100)
    full = train(init_state(cfg), data)
    interrupted = train(init_state(cfg), data, until=37)
    buf = io.BytesIO(checkpoint_bytes(interrupted))
    resumed = train(state_from_bytes(buf.getvalue()), data)
    same_log = resumed.log == full.log[37:]
    same_params = all(torch.equal(full.model.params[k], resumed.model.params[k]) for k in full.model.params)
    ok = round_trip and same_log and same_params
    verdict(
        "10 checkpoint round-trip",
        ok,
        f"save->load->save identical: {round_trip}; resume at step 37 matches the 100-step run step-for-step: "
        f"{same_log} (final params equal: {same_params})",
    )
    assert ok
