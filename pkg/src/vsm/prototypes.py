"""Prototype classification, the ProtoNet baseline and the memory-free
variational prototype objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .gaussian import DiagonalGaussian, kl_gaussian
from .tensor import Tensor, _as_tensor, logsumexp


@dataclass
class PrototypeSet:
    """Per-class prototypes as ``samples`` [N, L, d]; L = 1 for ProtoNet."""

    samples: Tensor
    mean: Tensor | None = None  # [N, d], posterior mean when variational

    def __post_init__(self):
        if self.samples.ndim == 2:
            self.samples = self.samples.reshape(self.samples.shape[0], 1, self.samples.shape[1])
        if self.samples.ndim != 3:
            raise ValueError("prototype samples must be [N, L, d]")

    @property
    def way(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def protonet_prototypes(support_features: Tensor) -> PrototypeSet:
    """Class means of support features [N, K, d]."""
    support_features = _as_tensor(support_features)
    if support_features.ndim != 3 or support_features.shape[1] == 0:
        raise ValueError("support features must be [N, K, d] with K >= 1")
    protos = support_features.mean(axis=1)
    return PrototypeSet(protos, protos)


def distances(query_features: Tensor, protos: PrototypeSet, metric: str = "sqeuclidean") -> Tensor:
    """Distances [Q, N, L] from each query to each prototype sample."""
    q, d = query_features.shape
    n, l, d2 = protos.samples.shape
    if d != d2:
        raise ValueError(f"query width {d} != prototype width {d2}")
    a = query_features.reshape(q, 1, 1, d)
    b = protos.samples.reshape(1, n, l, d)
    if metric == "sqeuclidean":
        return F.squared_distance(a, b)
    if metric == "cosine":
        return F.cosine_distance(a, b)
    raise ValueError(f"unknown distance {metric!r}")


def sample_log_likelihoods(query_features: Tensor, protos: PrototypeSet, metric: str = "sqeuclidean") -> Tensor:
    """log p(y = n | x, z^(l)) for every prototype draw -> [Q, N, L]."""
    return F.log_softmax(-distances(query_features, protos, metric), axis=1)


def classify(query_features: Tensor, protos: PrototypeSet, metric: str = "sqeuclidean") -> Tensor:
    """Class log-probabilities [Q, N] of the Monte-Carlo predictive.

    ``log mean_l softmax(-d(x, z^(l)))``; rows exponentiate to 1.
    """
    per_sample = sample_log_likelihoods(_as_tensor(query_features), protos, metric)
    return logsumexp(per_sample, axis=2) - np.log(protos.n_samples)


def expected_log_likelihood(per_sample: Tensor, labels: np.ndarray) -> Tensor:
    """mean_l log p(y_i | x_i, z^(l)) for each query -> [Q]."""
    q = per_sample.shape[0]
    picked = per_sample[np.arange(q), np.asarray(labels)]  # [Q, L]
    return picked.mean(axis=1)


def sample_prototypes(posterior: DiagonalGaussian, n_samples: int, rng: np.random.Generator) -> PrototypeSet:
    """Draw L reparameterized prototypes per class from a [N, d] posterior."""
    n, d = posterior.shape
    eps = rng.standard_normal((n, n_samples, d)).astype(posterior.mean.dtype)
    z = posterior.mean.reshape(n, 1, d) + posterior.std().reshape(n, 1, d) * eps
    return PrototypeSet(z, posterior.mean)


def vpn_posterior(nets, support_features: Tensor) -> DiagonalGaussian:
    """Memory-free posterior: the support mean conditions both posterior inputs."""
    h_bar = support_features.mean(axis=1)
    return nets.posterior_z(h_bar, h_bar)


def vpn_elbo(
    support_features: Tensor,
    query_features: Tensor,
    nets,
    n_samples: int,
    rng: np.random.Generator,
    metric: str = "sqeuclidean",
    posterior: DiagonalGaussian | None = None,
) -> tuple[Tensor, dict]:
    """Negative ELBO of the variational prototype network for one episode.

    ``support_features`` is [N, K, d], ``query_features`` [N, Q, d]. Returns
    the summed loss and a dict with the cross-entropy and KL parts.
    """
    if n_samples < 1:
        raise ValueError("number of prototype samples L must be >= 1")
    n, q, d = query_features.shape
    if posterior is None:
        posterior = vpn_posterior(nets, support_features)
    protos = sample_prototypes(posterior, n_samples, rng)
    flat_q = query_features.reshape(n * q, d)
    labels = np.repeat(np.arange(n), q)
    ll = expected_log_likelihood(sample_log_likelihoods(flat_q, protos, metric), labels)
    prior = nets.prior_z(flat_q)
    # each query is paired with its own class posterior
    post_rows = DiagonalGaussian(posterior.mean[labels], posterior.log_var[labels], posterior.floor)
    kl = kl_gaussian(post_rows, prior)
    ce = -ll.sum()
    kl_sum = kl.sum()
    return ce + kl_sum, {"ce": ce, "kl_z": kl_sum, "protos": protos, "log_lik": ll}
