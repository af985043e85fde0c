import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import reference as ref
from structpose.latent_graph import (
    AdjacencyMatrix,
    IsvaeParams,
    LatentDistribution,
    Stage,
    StageError,
    decode_adjacency,
    deterministic_latent,
    encode_posterior,
    kl_to_standard_normal,
    row_normalize,
    sample_latent,
    sparsity_penalty,
    symmetrize,
)
from structpose.numeric import RngStream, ShapeError, grad_check
from structpose.structures import SupportEmbedding


def support(values, mask=None):
    values = torch.as_tensor(values, dtype=torch.float64)
    if mask is None:
        mask = torch.ones(values.shape[:-1], dtype=torch.bool)
    return SupportEmbedding(values, torch.as_tensor(mask))


def np_params(p: IsvaeParams):
    return {k: v.detach().numpy() for k, v in p.as_dict().items()}


def test_param_shapes():
    p = IsvaeParams.init(5, 6, 4, RngStream(0))
    assert p.enc_w1.shape == (256, 30) and p.enc_b1.shape == (256,)
    assert p.enc_w2.shape == (8, 256) and p.dec_w.shape == (25, 4) and p.dec_b.shape == (25,)
    assert p.m == 5 and p.d_z == 4


def test_encode_zero_params():
    dist = encode_posterior(support(RngStream(1).normal((4, 3))), IsvaeParams.zeros(4, 3, 5))
    assert torch.equal(dist.mu, torch.zeros(5, dtype=torch.float64))
    assert torch.equal(dist.logvar, torch.zeros(5, dtype=torch.float64))
    assert torch.equal(dist.sigma, torch.ones(5, dtype=torch.float64))


def test_encode_bias_pass_through():
    p = IsvaeParams.zeros(4, 3, 5)
    p.enc_b2 = torch.cat([torch.ones(5), torch.zeros(5)]).double()
    dist = encode_posterior(support(np.zeros((4, 3))), p)
    assert torch.equal(dist.mu, torch.ones(5, dtype=torch.float64))
    assert torch.equal(dist.logvar, torch.zeros(5, dtype=torch.float64))


def test_encode_matches_forward_oracle():
    rng = RngStream(2)
    p = IsvaeParams.init(6, 4, 3, rng)
    p.enc_b1 = rng.normal_tensor((256,))
    fs = rng.normal((6, 4))
    mask = np.array([1, 1, 0, 1, 1, 0], dtype=bool)
    dist = encode_posterior(support(fs, mask), p)
    mu, lv = ref.encoder(fs, mask, np_params(p))
    assert np.abs(dist.mu.numpy() - mu).max() < 1e-12
    assert np.abs(dist.logvar.numpy() - lv).max() < 1e-12


def test_encode_shape_mismatch():
    with pytest.raises(ShapeError):
        encode_posterior(support(np.zeros((4, 3))), IsvaeParams.zeros(5, 3, 2))


def test_logvar_clamped():
    p = IsvaeParams.zeros(2, 2, 2)
    p.enc_b2 = torch.tensor([0.0, 0.0, 500.0, -500.0], dtype=torch.float64)
    dist = encode_posterior(support(np.zeros((2, 2))), p)
    assert dist.logvar.tolist() == [30.0, -30.0]
    assert torch.isfinite(dist.sigma).all()


def test_sample_unit_transform(t):
    dist = LatentDistribution(t([0.0, 0.0]), t([0.0, 0.0]))
    assert sample_latent(dist, eps=t([1.0, -1.0])).tolist() == [1.0, -1.0]


def test_sample_zero_variance_limit(t):
    dist = LatentDistribution(t([0.4, -2.0]), t([-30.0, -30.0]))
    z = sample_latent(dist, RngStream(5))
    assert (z - dist.mu).abs().max() < 1e-5


def test_sample_monte_carlo_mean(t):
    mu, lv = t([0.3, -1.2, 2.0]), t([0.0, 1.0, -2.0])
    dist = LatentDistribution(mu.expand(100_000, 3), lv.expand(100_000, 3))
    z = sample_latent(dist, RngStream(9))
    bound = 4 * torch.exp(0.5 * lv) / 100_000**0.5
    assert ((z.mean(0) - mu).abs() < bound).all()


def test_sample_requires_source(t):
    with pytest.raises(ValueError):
        sample_latent(LatentDistribution(t([0.0]), t([0.0])))


@settings(max_examples=50, deadline=None)
@given(
    mu=arrays(np.float64, 4, elements=st.floats(-5, 5)),
    lv=arrays(np.float64, 4, elements=st.floats(-5, 5)),
    eps=arrays(np.float64, 4, elements=st.floats(-3, 3)),
    delta=arrays(np.float64, 4, elements=st.floats(-2, 2)),
)
def test_sample_is_affine_in_mu(mu, lv, eps, delta):
    e = torch.from_numpy(eps)
    z0 = sample_latent(LatentDistribution(torch.from_numpy(mu), torch.from_numpy(lv)), eps=e)
    z1 = sample_latent(LatentDistribution(torch.from_numpy(mu + delta), torch.from_numpy(lv)), eps=e)
    assert np.allclose((z1 - z0).numpy(), delta, rtol=0, atol=1e-12)


def test_deterministic_latent(t):
    dist = LatentDistribution(t([0.3, -0.7]), t([1.0, 2.0]))
    a, b = deterministic_latent(dist), deterministic_latent(dist)
    assert a.tolist() == [0.3, -0.7] and torch.equal(a, b)


def test_decode_zero_params():
    a = decode_adjacency(torch.ones(3, dtype=torch.float64), IsvaeParams.zeros(4, 2, 3), 4)
    assert a.stage is Stage.RAW and torch.equal(a.values, torch.full((4, 4), 0.5, dtype=torch.float64))


def test_decode_saturates():
    p = IsvaeParams.zeros(3, 2, 2)
    p.dec_b = torch.full((9,), -30.0, dtype=torch.float64)
    assert decode_adjacency(torch.zeros(2, dtype=torch.float64), p, 3).values.max() < 1e-12


def test_decode_matches_oracle():
    rng = RngStream(4)
    p = IsvaeParams.init(5, 2, 6, rng)
    p.dec_b = rng.normal_tensor((25,))
    z = rng.normal(6)
    raw = decode_adjacency(torch.from_numpy(z), p, 5).values.numpy()
    oracle = ref.sigmoid(p.dec_w.numpy() @ z + p.dec_b.numpy()).reshape(5, 5)
    assert np.abs(raw - oracle).max() < 1e-12
    assert ((raw > 0) & (raw < 1)).all()


def test_decode_rejects_wrong_code_length():
    with pytest.raises(ShapeError):
        decode_adjacency(torch.zeros(5, dtype=torch.float64), IsvaeParams.zeros(3, 2, 2), 3)


def test_symmetrize_examples(t):
    s = symmetrize(AdjacencyMatrix(t([[0.0, 1.0], [0.0, 0.0]]), Stage.RAW))
    assert s.values.tolist() == [[0.0, 0.5], [0.5, 0.0]]
    sym = t([[0.2, 0.7], [0.7, 0.1]])
    assert torch.equal(symmetrize(AdjacencyMatrix(sym, Stage.RAW)).values, sym)
    assert torch.equal(symmetrize(s).values, s.values)


@settings(max_examples=100, deadline=None)
@given(m=st.integers(1, 9), seed=st.integers(0, 10_000))
def test_symmetrize_exactly_symmetric(m, seed):
    v = torch.from_numpy(RngStream(seed).uniform(0, 1, (m, m)))
    s = symmetrize(AdjacencyMatrix(v, Stage.RAW)).values
    assert (s - s.T).abs().max() < 1e-15


def test_row_normalize_examples(t):
    out = row_normalize(AdjacencyMatrix(t([[0.0, 0.5], [0.5, 0.0]]), Stage.SYMMETRIC)).values
    assert (out - t([[0.0, 1.0], [1.0, 0.0]])).abs().max() < 1e-5
    zero_row = row_normalize(AdjacencyMatrix(t([[0.0, 0.0], [0.0, 1.0]]), Stage.SYMMETRIC)).values
    assert zero_row[0].abs().max() == 0.0


def test_row_normalize_property_sweep():
    rng = RngStream(6)
    for _ in range(100):
        m = int(rng.integers(2, 10))
        v = torch.from_numpy(rng.uniform(0, 1, (m, m)))
        rows = row_normalize(symmetrize(AdjacencyMatrix(v, Stage.RAW))).values.sum(-1)
        assert ((rows - 1).abs() <= 1e-9).all()


def test_stage_discipline(t):
    raw = AdjacencyMatrix(t([[0.5, 0.5], [0.5, 0.5]]), Stage.RAW)
    with pytest.raises(StageError):
        row_normalize(raw)
    with pytest.raises(StageError):
        sparsity_penalty(symmetrize(raw))
    norm = row_normalize(symmetrize(raw))
    with pytest.raises(StageError):
        symmetrize(norm)


def test_kl_examples(t):
    assert float(kl_to_standard_normal(LatentDistribution(t([0.0, 0.0]), t([0.0, 0.0])))) == 0.0
    assert abs(float(kl_to_standard_normal(LatentDistribution(t([1.0]), t([0.0])))) - 0.5) < 1e-12


def test_kl_per_dimension_closed_form():
    n = 7
    dist = LatentDistribution(torch.ones(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64))
    assert abs(float(kl_to_standard_normal(dist)) - 0.5 * n) < 1e-12


def test_kl_nonnegative_sweep():
    rng = RngStream(8)
    mu = rng.normal_tensor((1000, 6)) * 3
    lv = rng.normal_tensor((1000, 6)) * 3
    assert (kl_to_standard_normal(LatentDistribution(mu, lv)) >= 0).all()


@settings(max_examples=100, deadline=None)
@given(
    mu=arrays(np.float64, 3, elements=st.floats(-4, 4)),
    lv=arrays(np.float64, 3, elements=st.floats(-4, 4)),
)
def test_kl_zero_iff_standard(mu, lv):
    kl = float(kl_to_standard_normal(LatentDistribution(torch.from_numpy(mu), torch.from_numpy(lv))))
    assert kl >= 0
    if kl < 1e-12:
        assert np.abs(mu).max() < 1e-5 and np.abs(lv).max() < 1e-5


def test_sparsity_examples(t):
    assert float(sparsity_penalty(AdjacencyMatrix(torch.zeros(3, 3, dtype=torch.float64), Stage.NORMALIZED))) == 0.0
    assert float(sparsity_penalty(AdjacencyMatrix(t([[0.0, 1.0], [1.0, 0.0]]), Stage.NORMALIZED))) == 0.5


def test_sparsity_matches_double_loop():
    v = RngStream(10).uniform(0, 1, (6, 6))
    s = 0.0
    for i in range(6):
        for j in range(6):
            s += v[i, j] ** 2
    got = float(sparsity_penalty(AdjacencyMatrix(torch.from_numpy(v), Stage.NORMALIZED)))
    assert abs(got - s / 36) < 1e-14


@pytest.mark.parametrize("seed", range(3))
def test_gradients(seed):
    rng = RngStream(seed, 99)
    m, d, dz = 3, 2, 2
    p = IsvaeParams.init(m, d, dz, rng, hidden=6)
    fs = support(rng.normal((m, d)))
    eps = rng.normal_tensor((dz,))

    def through(name):
        def f(x):
            q = IsvaeParams(**{**p.as_dict(), name: x})
            dist = encode_posterior(fs, q)
            z = sample_latent(dist, eps=eps)
            a = row_normalize(symmetrize(decode_adjacency(z, q, m)))
            return kl_to_standard_normal(dist) + sparsity_penalty(a) + a.values[0, 1]

        return f

    for name, value in p.as_dict().items():
        assert grad_check(through(name), value) < 1e-5, name
