"""Diagonal Gaussians, finite Gaussian mixtures and their divergences."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, _as_tensor, logsumexp, matmul

VARIANCE_FLOOR = 1e-6
LOG_2PI = math.log(2 * math.pi)

# above this many [n, A, d] elements pairwise densities use the expanded
# quadratic form instead of materialising every difference
_DIRECT_PAIRWISE_LIMIT = 2_000_000


@dataclass
class DiagonalGaussian:
    """Gaussian with diagonal covariance, batched over leading axes.

    ``variance`` is ``exp(log_var)`` clamped below at ``floor``; pass
    ``floor=0`` to disable the clamp.
    """

    mean: Tensor
    log_var: Tensor
    floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.log_var = _as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.mean.shape

    def variance(self) -> Tensor:
        var = self.log_var.exp()
        return var.clamp_min(self.floor) if self.floor > 0 else var

    def log_variance(self) -> Tensor:
        return self.variance().log() if self.floor > 0 else self.log_var

    def std(self) -> Tensor:
        return self.variance().sqrt()

    def rsample(self, rng: np.random.Generator, sample_shape: tuple = ()) -> Tensor:
        """Reparameterized draw ``mean + std * eps`` of shape ``sample_shape + shape``."""
        eps = rng.standard_normal(tuple(sample_shape) + self.shape).astype(self.mean.dtype)
        return self.mean + self.std() * eps

    def log_prob(self, x: Tensor) -> Tensor:
        """Log density summed over the last axis (broadcasts over the rest)."""
        diff = _as_tensor(x) - self.mean
        quad = (diff * diff / self.variance()).sum(axis=-1)
        return -0.5 * (quad + self.log_variance().sum(axis=-1) + self.dim * LOG_2PI)

    def __getitem__(self, index) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean[index], self.log_var[index], self.floor)

    def reshape(self, *shape) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.reshape(*shape), self.log_var.reshape(*shape), self.floor)

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_var.detach(), self.floor)


def rsample(dist: DiagonalGaussian, rng: np.random.Generator) -> Tensor:
    return dist.rsample(rng)


def kl_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Closed-form KL(q || p), summed over the last axis."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    var_q, var_p = q.variance(), p.variance()
    diff = q.mean - p.mean
    terms = p.log_variance() - q.log_variance() + (var_q + diff * diff) / var_p - 1.0
    return 0.5 * terms.sum(axis=-1)


def pairwise_log_density(x: Tensor, components: DiagonalGaussian) -> Tensor:
    """Log density of each row of ``x`` [n, d] under each component [A, d] -> [n, A]."""
    x = _as_tensor(x)
    n, d = x.shape
    a = components.shape[0]
    var = components.variance()
    log_det = components.log_variance().sum(axis=-1)
    if n * a * d <= _DIRECT_PAIRWISE_LIMIT:
        diff = x.reshape(n, 1, d) - components.mean.reshape(1, a, d)
        quad = (diff * diff / var.reshape(1, a, d)).sum(axis=-1)
    else:
        inv = 1.0 / var
        mu_inv = components.mean * inv
        quad = (
            matmul(x * x, inv.T)
            - 2.0 * matmul(x, mu_inv.T)
            + (components.mean * mu_inv).sum(axis=-1).reshape(1, a)
        )
    return -0.5 * (quad + log_det.reshape(1, a) + d * LOG_2PI)


@dataclass
class GaussianMixture:
    """Finite mixture ``sum_a w_a N(mu_a, var_a)``.

    Components are either shared [A, d] or batched [B, A, d]; ``log_weights``
    is [A] or [B, A]. Any batched part describes B mixtures at once.
    """

    log_weights: Tensor
    components: DiagonalGaussian

    def __post_init__(self):
        self.log_weights = _as_tensor(self.log_weights)
        if self.components.mean.ndim not in (2, 3):
            raise ValueError("mixture components must be [A, d] or [B, A, d]")
        if self.n_components == 0:
            raise ValueError("mixture has no components")
        if self.log_weights.shape[-1] != self.n_components:
            raise ValueError(
                f"{self.log_weights.shape[-1]} weights for {self.n_components} components"
            )
        if self.log_weights.ndim == 2 and self.components.mean.ndim == 3:
            if self.log_weights.shape[0] != self.components.shape[0]:
                raise ValueError("batched weights and components disagree on batch size")
        w = np.exp(self.log_weights.data.astype(np.float64))
        if np.any(np.abs(w.sum(axis=-1) - 1) > 1e-6):
            raise ValueError("mixture weights must lie on the simplex")

    @classmethod
    def from_logits(cls, logits: Tensor, components: DiagonalGaussian) -> "GaussianMixture":
        return cls(F.log_softmax(_as_tensor(logits), axis=-1), components)

    @classmethod
    def from_weights(cls, weights, components: DiagonalGaussian) -> "GaussianMixture":
        weights = _as_tensor(weights)
        if np.any(weights.data < 0):
            raise ValueError("mixture weights must be nonnegative")
        return cls(weights.log(), components)

    @classmethod
    def uniform(cls, components: DiagonalGaussian) -> "GaussianMixture":
        a = components.shape[-2]
        return cls(Tensor(np.full(a, -math.log(a))), components)

    @property
    def n_components(self) -> int:
        return self.components.shape[-2]

    @property
    def dim(self) -> int:
        return self.components.dim

    @property
    def batch_size(self) -> int | None:
        if self.log_weights.ndim == 2:
            return self.log_weights.shape[0]
        if self.components.mean.ndim == 3:
            return self.components.shape[0]
        return None

    @property
    def weights(self) -> Tensor:
        return self.log_weights.exp()

    def mean(self) -> Tensor:
        """Mixture mean, [d] or [B, d]."""
        w = self.weights
        mu = self.components.mean
        if mu.ndim == 2:
            if w.ndim == 1:
                return matmul(w.reshape(1, -1), mu).reshape(-1)
            return matmul(w, mu)
        b, a, d = mu.shape
        w = w.reshape(-1, a, 1) if w.ndim == 2 else w.reshape(1, a, 1)
        return (mu * w).sum(axis=1)


def mixture_sample(
    mix: GaussianMixture, rng: np.random.Generator, n: int = 1
) -> tuple[np.ndarray, Tensor]:
    """Ancestral sampling: a ~ Categorical(w), then a reparameterized draw.

    Returns component indices of shape [n] (or [B, n]) and samples
    [n, d] (or [B, n, d]).
    """
    b = mix.batch_size
    w = np.exp(mix.log_weights.data.astype(np.float64))
    if b is not None and w.ndim == 1:
        w = np.broadcast_to(w, (b, w.shape[0]))
    cdf = np.cumsum(w, axis=-1)
    batch = w.shape[:-1]
    u = rng.random(batch + (n,))
    idx = (u[..., None] >= cdf[..., None, :]).sum(axis=-1)
    idx = np.minimum(idx, mix.n_components - 1)
    eps = rng.standard_normal(batch + (n, mix.dim)).astype(mix.components.mean.dtype)
    if mix.components.mean.ndim == 3:
        picked = mix.components[(np.arange(b)[:, None], idx)]
    else:
        picked = mix.components[idx]
    return idx, picked.mean + picked.std() * eps


def component_log_density(mix: GaussianMixture, x: Tensor) -> Tensor:
    """Log density of points under every component.

    ``x`` [n, d] -> [n, A] for an unbatched mixture; [B, n, d] -> [B, n, A]
    for a batched one.
    """
    comps = mix.components
    a = mix.n_components
    if comps.mean.ndim == 2:
        if x.ndim == 2:
            return pairwise_log_density(x, comps)
        b, n, d = x.shape
        return pairwise_log_density(x.reshape(b * n, d), comps).reshape(b, n, a)
    b, n, d = x.shape
    var = comps.variance().reshape(b, 1, a, d)
    diff = x.reshape(b, n, 1, d) - comps.mean.reshape(b, 1, a, d)
    quad = (diff * diff / var).sum(axis=-1)
    log_det = comps.log_variance().sum(axis=-1).reshape(b, 1, a)
    return -0.5 * (quad + log_det + d * LOG_2PI)


def mixture_log_density(mix: GaussianMixture, x: Tensor) -> Tensor:
    """log sum_a w_a N(x; mu_a, var_a) via log-sum-exp.

    ``x`` is [d] or [n, d] for an unbatched mixture and [B, n, d] for a
    batched one; the result drops the feature axis.
    """
    x = _as_tensor(x)
    if x.shape[-1] != mix.dim:
        raise ValueError(f"point dimension {x.shape[-1]} != mixture dimension {mix.dim}")
    a = mix.n_components
    squeeze = x.ndim == 1
    pts = x.reshape(1, -1) if squeeze else x
    comp = component_log_density(mix, pts)
    log_w = mix.log_weights
    log_w = log_w.reshape(-1, 1, a) if log_w.ndim == 2 else log_w.reshape(1, a)
    out = logsumexp(comp + log_w, axis=-1)
    return out.reshape(()) if squeeze else out


def kl_mixture_vs_gaussian_mc(
    mix: GaussianMixture,
    p: DiagonalGaussian,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    samples: Tensor | None = None,
) -> Tensor:
    """Monte-Carlo KL(mix || p) = mean_j [log mix(x_j) - log p(x_j)].

    Samples are drawn from the mixture unless supplied. For a batched
    mixture ``p`` is batched [B, d] and the result is [B].
    """
    if samples is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        _, samples = mixture_sample(mix, rng, n_samples)
    log_q = mixture_log_density(mix, samples)
    if mix.batch_size is not None:
        b = samples.shape[0]
        log_p = DiagonalGaussian(
            p.mean.reshape(b, 1, -1), p.log_var.reshape(b, 1, -1), p.floor
        ).log_prob(samples)
    else:
        log_p = p.log_prob(samples)
    return (log_q - log_p).mean(axis=-1)


def kl_average_components(components: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Equal-weight average of per-component closed-form KLs (an upper bound)."""
    return kl_gaussian(components, p).mean(axis=-1)
