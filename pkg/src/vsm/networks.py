"""Feature encoder and the amortized Gaussian networks.

``VSMNetworks`` bundles the convolutional encoder, the prototype posterior
(conditioned on latent memory and the support mean), the per-query prototype
prior, and the memory network whose single parameter set serves both the
memory-conditional prior and posterior.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .functional import DimensionError
from .gaussian import VARIANCE_FLOOR, DiagonalGaussian
from .tensor import Tensor, _as_tensor, concat, get_dtype

ARCHITECTURES = {
    # image shape, conv blocks, pool padding, appendix dropout value
    "omniglot": ((28, 28, 1), 4, "same", 0.9),
    "cifar": ((32, 32, 3), 4, "same", 0.5),
    "mini": ((84, 84, 3), 5, "valid", 0.5),
}


def truncated_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(get_dtype())


def _fan_in_init(rng, shape, fan_in, gain=2.0) -> Tensor:
    return Tensor(truncated_normal(rng, shape, np.sqrt(gain / fan_in)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=True)


@dataclass
class EncoderConfig:
    image_shape: tuple = (28, 28, 1)
    blocks: int = 4
    channels: int = 64
    pool_padding: str = "same"
    dropout: float = 0.9
    # "keep": dropout value is the keep probability, "drop": the drop rate
    dropout_convention: str = "keep"
    batch_norm: bool = False

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if self.dropout_convention not in ("keep", "drop"):
            raise ValueError("dropout_convention must be 'keep' or 'drop'")
        if len(self.image_shape) != 3:
            raise ValueError("image_shape must be (H, W, C)")
        self.drop_rate  # validates

    @classmethod
    def for_architecture(cls, name: str, **overrides) -> "EncoderConfig":
        if name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}")
        shape, blocks, pool, drop = ARCHITECTURES[name]
        base = dict(image_shape=shape, blocks=blocks, pool_padding=pool, dropout=drop)
        base.update(overrides)
        return cls(**base)

    @property
    def drop_rate(self) -> float:
        rate = 1.0 - self.dropout if self.dropout_convention == "keep" else self.dropout
        if not 0 <= rate < 1:
            raise ValueError(f"dropout {self.dropout} ({self.dropout_convention}) gives invalid rate {rate}")
        return rate

    def feature_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.image_shape
        for _ in range(self.blocks):
            if self.pool_padding == "same":
                h, w = -(-h // 2), -(-w // 2)
            else:
                h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            if h < 1 or w < 1:
                raise DimensionError(f"image shape {self.image_shape} too small for {self.blocks} blocks")
        return h, w, self.channels

    @property
    def output_dim(self) -> int:
        h, w, c = self.feature_shape()
        return h * w * c

    def to_dict(self) -> dict:
        out = asdict(self)
        out["image_shape"] = list(self.image_shape)
        return out


class Module:
    """Named parameter container."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def named_parameters(self, prefix: str = "") -> OrderedDict:
        return OrderedDict((prefix + k, v) for k, v in self.params.items())

    def named_buffers(self, prefix: str = "") -> OrderedDict:
        return OrderedDict((prefix + k, v) for k, v in self.buffers.items())


class Encoder(Module):
    """conv3x3 (ReLU) -> dropout -> 2x2 max-pool blocks, then flatten."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        cin = config.image_shape[2]
        for i in range(config.blocks):
            self.params[f"conv{i}/kernel"] = _fan_in_init(rng, (3, 3, cin, config.channels), 9 * cin)
            self.params[f"conv{i}/bias"] = _zeros(config.channels)
            if config.batch_norm:
                self.params[f"conv{i}/bn_gamma"] = Tensor(np.ones(config.channels, dtype=get_dtype()), requires_grad=True)
                self.params[f"conv{i}/bn_beta"] = _zeros(config.channels)
                self.buffers[f"conv{i}/bn_mean"] = np.zeros(config.channels, dtype=get_dtype())
                self.buffers[f"conv{i}/bn_var"] = np.ones(config.channels, dtype=get_dtype())
            cin = config.channels

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def __call__(self, images, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = _as_tensor(images)
        if x.ndim == 3:
            x = x.reshape(x.shape + (1,))
        if tuple(x.shape[1:]) != self.config.image_shape:
            raise DimensionError(
                f"encoder expects images of shape [B, {', '.join(map(str, self.config.image_shape))}], "
                f"got {list(x.shape)}"
            )
        rate = self.config.drop_rate
        for i in range(self.config.blocks):
            x = F.conv2d(x, self.params[f"conv{i}/kernel"], 1, "same") + self.params[f"conv{i}/bias"]
            if self.config.batch_norm:
                x = F.batch_norm(
                    x,
                    self.params[f"conv{i}/bn_gamma"],
                    self.params[f"conv{i}/bn_beta"],
                    self.buffers[f"conv{i}/bn_mean"],
                    self.buffers[f"conv{i}/bn_var"],
                    training,
                )
            x = F.relu(x)
            x = F.dropout(x, rate, training, rng)
            x = F.maxpool2d(x, 2, 2, self.config.pool_padding)
        return x.reshape(x.shape[0], -1)


class GaussianMLP(Module):
    """in -> hidden (ELU) -> hidden (ELU) -> linear head split into (mean, log_var).

    With ``residual`` the mean is offset by the trailing ``out_dim`` input
    features (the conditioning feature), so a near-zero head starts the
    distribution centred on its input. ``head_gain`` scales the head's
    initial weights and ``log_var_init`` is the initial log-variance bias.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: int,
        rng: np.random.Generator,
        floor: float = VARIANCE_FLOOR,
        residual: bool = False,
        head_gain: float = 1.0,
        log_var_init: float = 0.0,
    ):
        super().__init__()
        if residual and in_dim < out_dim:
            raise ValueError("residual mean needs in_dim >= out_dim")
        self.in_dim, self.out_dim, self.floor, self.residual = in_dim, out_dim, floor, residual
        self.params["fc0/weight"] = _fan_in_init(rng, (in_dim, hidden), in_dim)
        self.params["fc0/bias"] = _zeros(hidden)
        self.params["fc1/weight"] = _fan_in_init(rng, (hidden, hidden), hidden)
        self.params["fc1/bias"] = _zeros(hidden)
        self.params["head/weight"] = _fan_in_init(rng, (hidden, 2 * out_dim), hidden, gain=head_gain)
        self.params["head/bias"] = _zeros(2 * out_dim)
        self.params["head/bias"].data[out_dim:] = log_var_init

    def __call__(self, x: Tensor) -> DiagonalGaussian:
        x = _as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        p = self.params
        h = F.elu(F.linear(x, p["fc0/weight"], p["fc0/bias"]))
        h = F.elu(F.linear(h, p["fc1/weight"], p["fc1/bias"]))
        out = F.linear(h, p["head/weight"], p["head/bias"])
        d = self.out_dim
        mean = out[..., :d]
        if self.residual:
            mean = mean + x[..., self.in_dim - d :]
        return DiagonalGaussian(mean, out[..., d:], self.floor)


class TransformMLP(Module):
    """Deterministic map of addressed memory: linear -> ELU -> linear."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.params["fc0/weight"] = _fan_in_init(rng, (dim, hidden), dim)
        self.params["fc0/bias"] = _zeros(hidden)
        self.params["fc1/weight"] = _fan_in_init(rng, (hidden, dim), hidden, gain=1.0)
        self.params["fc1/bias"] = _zeros(dim)

    def identity_init(self) -> "TransformMLP":
        """Identity weights and zero biases (exact identity on nonnegative inputs)."""
        for name in ("fc0", "fc1"):
            w = self.params[f"{name}/weight"]
            if w.shape[0] != w.shape[1]:
                raise ValueError("identity init needs hidden width equal to the feature width")
            w.data[...] = np.eye(w.shape[0], dtype=w.dtype)
            self.params[f"{name}/bias"].data[...] = 0
        return self

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        h = F.elu(F.linear(_as_tensor(x), p["fc0/weight"], p["fc0/bias"]))
        return F.linear(h, p["fc1/weight"], p["fc1/bias"])


@dataclass
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden: int = 256
    variance_floor: float = VARIANCE_FLOOR
    with_transform: bool = False
    # mean = conditioning feature + head output; False gives the plain linear head
    residual_mean: bool = True
    head_gain: float = 0.01
    log_var_init: float = -3.0

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "hidden": self.hidden,
            "variance_floor": self.variance_floor,
            "with_transform": self.with_transform,
            "residual_mean": self.residual_mean,
            "head_gain": self.head_gain,
            "log_var_init": self.log_var_init,
        }


class VSMNetworks:
    """All learnable networks of the model, sharing one feature width ``d``."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        self.encoder = Encoder(config.encoder, rng)
        d = self.encoder.output_dim
        self.dim = d
        head = dict(
            floor=config.variance_floor,
            residual=config.residual_mean,
            head_gain=config.head_gain,
            log_var_init=config.log_var_init,
        )
        self.posterior = GaussianMLP(2 * d, d, config.hidden, rng, **head)
        self.prior = GaussianMLP(d, d, config.hidden, rng, **head)
        self.memory = GaussianMLP(d, d, config.hidden, rng, **head)
        self.transform = TransformMLP(d, rng) if config.with_transform else None

    def modules(self) -> OrderedDict:
        out = OrderedDict(
            encoder=self.encoder, posterior=self.posterior, prior=self.prior, memory=self.memory
        )
        if self.transform is not None:
            out["transform"] = self.transform
        return out

    def named_parameters(self) -> OrderedDict:
        out = OrderedDict()
        for name, module in self.modules().items():
            out.update(module.named_parameters(f"{name}/"))
        return out

    def named_buffers(self) -> OrderedDict:
        out = OrderedDict()
        for name, module in self.modules().items():
            out.update(module.named_buffers(f"{name}/"))
        return out

    # the four network roles -------------------------------------------------

    def encode(self, images, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.encoder(images, training, rng)

    def posterior_z(self, m: Tensor, h_bar: Tensor) -> DiagonalGaussian:
        """q(z | m, support mean): concatenate along the feature axis."""
        m, h_bar = _as_tensor(m), _as_tensor(h_bar)
        if m.shape[-1] != self.dim or h_bar.shape[-1] != self.dim:
            raise DimensionError(
                f"posterior inputs must both be {self.dim}-d, got {m.shape[-1]} and {h_bar.shape[-1]}"
            )
        return self.posterior(concat([m, h_bar], axis=-1))

    def prior_z(self, h_query: Tensor) -> DiagonalGaussian:
        return self.prior(h_query)

    def memory_net(self, feature: Tensor) -> DiagonalGaussian:
        return self.memory(feature)
