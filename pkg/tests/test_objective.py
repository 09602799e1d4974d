from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import integrate, stats

from cgdl import numerics as nx
from cgdl.errors import ContractError, DimensionError
from cgdl.ladder import LadderConfig, LadderModel, LayerStats, forward
from cgdl.objective import (
    beta_schedule,
    combine,
    cross_entropy,
    kl_conditional,
    kl_gaussian_pair,
    loss_terms,
    recon_l1,
    total_loss,
)


def _stats(mu, var):
    return LayerStats(nx.Tensor(np.asarray(mu, float)), nx.Tensor(np.asarray(var, float)))


def kl_1d_quadrature(m1, v1, m2, v2):
    p = stats.norm(m1, np.sqrt(v1))
    q = stats.norm(m2, np.sqrt(v2))
    s = np.sqrt(v1)
    val, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), m1 - 30 * s, m1 + 30 * s,
                            points=[m1], limit=200)
    return val


def test_kl_pair_matches_quadrature_per_axis():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m1, m2 = rng.normal(size=3), rng.normal(size=3)
        v1, v2 = rng.uniform(0.2, 3, 3), rng.uniform(0.2, 3, 3)
        want = sum(kl_1d_quadrature(*a) for a in zip(m1, v1, m2, v2))
        got = kl_gaussian_pair(_stats(m1[None], v1[None]), _stats(m2[None], v2[None])).item()
        assert got == pytest.approx(want, rel=1e-7, abs=1e-9)


def test_kl_conditional_is_pair_with_unit_prior():
    rng = np.random.default_rng(1)
    mu, var, mk = rng.normal(size=(4, 5)), rng.uniform(0.1, 2, (4, 5)), rng.normal(size=(4, 5))
    a = kl_conditional(mu, var, mk).item()
    b = kl_gaussian_pair(_stats(mu, var), _stats(mk, np.ones((4, 5)))).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_kl_batch_mean_of_per_sample_sums():
    rng = np.random.default_rng(2)
    mu, var, mk = rng.normal(size=(3, 2)), rng.uniform(0.1, 2, (3, 2)), rng.normal(size=(3, 2))
    per = [0.5 * np.sum(var[i] + (mu[i] - mk[i]) ** 2 - 1 - np.log(var[i])) for i in range(3)]
    assert kl_conditional(mu, var, mk).item() == pytest.approx(np.mean(per), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(1e-2, 1e2)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(1e-2, 1e2)))
def test_kl_nonnegative_and_zero_at_equality(m1, v1, m2, v2):
    assert kl_gaussian_pair(_stats(m1, v1), _stats(m2, v2)).item() >= -1e-12
    assert kl_gaussian_pair(_stats(m1, v1), _stats(m1, v1)).item() == pytest.approx(0.0, abs=1e-12)
    assert kl_conditional(m1, np.ones_like(m1), m1).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_rejects_bad_variance_and_shapes():
    with pytest.raises(ContractError):
        kl_conditional(np.zeros((1, 2)), np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        kl_gaussian_pair(_stats(np.zeros((1, 2)), np.ones((1, 2))), _stats(np.zeros((1, 3)), np.ones((1, 3))))


def test_cross_entropy_matches_naive_and_is_stable():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, 6)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert cross_entropy(z, y).item() == pytest.approx(-np.mean(np.log(p[np.arange(6), y])), rel=1e-12)
    # saturated logits stay finite and exact
    big = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    assert cross_entropy(big, [1, 1]).item() == pytest.approx(500.0)
    with pytest.raises(IndexError):
        cross_entropy(z, np.full(6, 4))


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = nx.parameter(np.array([[0.5, -1.0, 2.0]]))
    nx.backward(cross_entropy(z, [2]))
    p = np.exp(z.data) / np.exp(z.data).sum()
    np.testing.assert_allclose(z.grad, p - np.array([[0, 0, 1.0]]), rtol=1e-12)


def test_recon_l1_per_sample_sum():
    x = np.array([[0.0, 1.0], [0.5, 0.5]])
    xh = np.array([[0.25, 0.5], [0.5, 0.0]])
    assert recon_l1(x, xh).item() == pytest.approx((0.75 + 0.5) / 2)
    with pytest.raises(DimensionError):
        recon_l1(x, xh[:, :1])


def test_beta_schedule_ramp():
    assert beta_schedule(0, 10) == 0.0
    assert beta_schedule(5, 10) == 0.5
    assert beta_schedule(10, 10) == 1.0
    assert beta_schedule(20, 10) == 1.0
    with pytest.raises(ValueError):
        beta_schedule(0, 0)


@pytest.mark.parametrize("ladder", [True, False])
def test_total_loss_composition(ladder):
    m = LadderModel.init(LadderConfig(16, (12, 8), 3, latent_dim=4, ladder=ladder), seed=0)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(5, 16)), rng.integers(0, 3, 5)
    tr = forward(m, x, mode="train", rng=rng)
    terms = loss_terms(tr, x, y, m["class_means"])
    assert len(terms["kl_layers"]) == (1 if ladder else 0)
    br = combine(terms, beta=0.3, lam=100.0, recon_weight=1.0)
    n_kl = 1 + len(terms["kl_layers"])
    want = br.recon + 0.3 * (br.kl_latent + sum(br.kl_layers)) / n_kl + 100.0 * br.ce
    assert br.total == pytest.approx(want, rel=1e-12)
    assert br.num_kl_terms == n_kl
    assert br.total == pytest.approx(total_loss(tr, x, y, m["class_means"], 0.3).total, rel=1e-12)
    assert set(br.as_row()) >= {"recon", "kl_latent", "ce", "beta", "total"}
