"""Loss terms and the minimized training objective.

The minimized quantity is::

    recon_weight * L1 + beta * (KL_latent + sum of rung KLs) / L + lam * CE

with every term nonnegative. ``L`` counts the KL terms actually present
(the number of rungs for a ladder model, 1 otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .ladder import ForwardTrace, LayerStats
from .numerics import Tensor

DEFAULT_LAMBDA = 100.0


def _check_var(var: Tensor, what: str) -> None:
    if np.any(var.data <= 0):
        raise ContractError(f"{what}: variances must be strictly positive")


def recon_l1(x, x_hat) -> Tensor:
    """Per-sample sum of absolute differences, averaged over the batch."""
    x, x_hat = nx.as_tensor(x), nx.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"recon_l1: shapes {x.shape} and {x_hat.shape} differ")
    diff = nx.abs_(nx.sub(x_hat, x))
    per_sample = nx.sum_(nx.reshape(diff, (x.shape[0], -1)), axis=1)
    return nx.mean(per_sample)


def kl_conditional(mu, var, mu_k) -> Tensor:
    """KL( N(mu, diag var) || N(mu_k, I) ), summed over latent dims, batch mean."""
    mu, var, mu_k = nx.as_tensor(mu), nx.as_tensor(var), nx.as_tensor(mu_k)
    _check_var(var, "kl_conditional")
    # 0.5 * sum(var + (mu - mu_k)^2 - 1 - log var)
    terms = nx.sub(nx.add(var, nx.square(nx.sub(mu, mu_k))), nx.add(nx.log(var), 1.0))
    per_sample = nx.sum_(terms, axis=-1) if terms.ndim > 1 else nx.sum_(terms)
    return nx.scale(nx.mean(per_sample), 0.5)


def kl_gaussian_pair(p: LayerStats, q: LayerStats) -> Tensor:
    """KL( p || q ) for diagonal Gaussians, summed over dims, batch mean.

    In the ladder objective ``p`` is the merged (inference) rung posterior and
    ``q`` the decoder's top-down prior for the same rung.
    """
    _check_var(p.var, "kl_gaussian_pair")
    _check_var(q.var, "kl_gaussian_pair")
    if p.mu.shape != q.mu.shape:
        raise DimensionError(f"kl_gaussian_pair: shapes {p.mu.shape} and {q.mu.shape} differ")
    log_ratio = nx.sub(nx.log(q.var), nx.log(p.var))
    spread = nx.div(nx.add(p.var, nx.square(nx.sub(p.mu, q.mu))), q.var)
    terms = nx.sub(nx.add(log_ratio, spread), 1.0)
    per_sample = nx.sum_(terms, axis=-1) if terms.ndim > 1 else nx.sum_(terms)
    return nx.scale(nx.mean(per_sample), 0.5)


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` via log-sum-exp.

    Takes raw logits rather than probabilities so saturated rows stay exact.
    """
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: labels must lie in [0, {k})")
    picked = nx.getitem(nx.log_softmax(logits, axis=-1), (np.arange(n), labels))
    return nx.neg(nx.mean(picked))


def beta_schedule(epoch: int, total_epochs: int) -> float:
    """Linear KL warm-up: ``epoch / total_epochs`` clamped to [0, 1]."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    return float(min(1.0, max(0.0, epoch / total_epochs)))


@dataclass
class LossBreakdown:
    recon: float
    kl_latent: float
    kl_layers: list[float]
    ce: float
    beta: float
    lam: float
    total: float
    recon_weight: float = 1.0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def kl_layers_sum(self) -> float:
        return float(sum(self.kl_layers))

    @property
    def num_kl_terms(self) -> int:
        return 1 + len(self.kl_layers)

    @property
    def kl_avg(self) -> float:
        return (self.kl_latent + self.kl_layers_sum) / self.num_kl_terms

    def as_row(self) -> dict[str, float]:
        return {
            "recon": self.recon,
            "kl_latent": self.kl_latent,
            "kl_layers_sum": self.kl_layers_sum,
            "ce": self.ce,
            "beta": self.beta,
            "total": self.total,
        }


def loss_terms(trace: ForwardTrace, x, labels, class_means) -> dict[str, Tensor | list[Tensor]]:
    """Individual (unweighted) loss tensors for one forward trace.

    ``class_means`` is the K x J embedding; rows are selected with a one-hot
    product so each used row receives gradient.
    """
    x = nx.as_tensor(x)
    x_flat = nx.reshape(x, trace.recon.shape)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    class_means = nx.as_tensor(class_means)
    K = class_means.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"labels must lie in [0, {K})")
    onehot = np.zeros((labels.size, K))
    onehot[np.arange(labels.size), labels] = 1.0
    mu_k = nx.matmul(nx.Tensor(onehot), class_means)
    layers = [
        kl_gaussian_pair(trace.merged[l], trace.downward[l])
        for l in range(len(trace.merged))
        if trace.merged[l] is not None and trace.downward[l] is not None
        and trace.merged[l] is not trace.downward[l]
    ]
    return {
        "recon": recon_l1(x_flat, trace.recon),
        "kl_latent": kl_conditional(trace.mu, trace.var, mu_k),
        "kl_layers": layers,
        "ce": cross_entropy(trace.logits, labels),
    }


def combine(terms: dict, beta: float, lam: float, recon_weight: float = 1.0) -> LossBreakdown:
    kl_sum = terms["kl_latent"]
    for t in terms["kl_layers"]:
        kl_sum = nx.add(kl_sum, t)
    n_kl = 1 + len(terms["kl_layers"])
    total = nx.add(
        nx.add(nx.scale(terms["recon"], recon_weight), nx.scale(kl_sum, beta / n_kl)),
        nx.scale(terms["ce"], lam),
    )
    return LossBreakdown(
        recon=terms["recon"].item(),
        kl_latent=terms["kl_latent"].item(),
        kl_layers=[t.item() for t in terms["kl_layers"]],
        ce=terms["ce"].item(),
        beta=float(beta),
        lam=float(lam),
        total=total.item(),
        recon_weight=float(recon_weight),
        tensor=total,
    )


def total_loss(
    trace: ForwardTrace,
    x,
    labels,
    class_means,
    beta: float,
    lam: float = DEFAULT_LAMBDA,
    recon_weight: float = 1.0,
) -> LossBreakdown:
    """Minimized objective for one batch; ``.tensor`` is ready for ``backward``."""
    return combine(loss_terms(trace, x, labels, class_means), beta, lam, recon_weight)
