"""Long-term semantic memory: content addressing, latent-memory recall,
hierarchical prototype sampling and attention-based consolidation.

Slots hold one feature summary per seen class. Slot values are constants
once written; the attention vector ``w`` still receives gradients because
slots rewritten in the previous optimizer step re-enter recall through a
zero-valued straight-through term ``f(w) - stop_gradient(f(w))``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .gaussian import DiagonalGaussian, GaussianMixture, mixture_sample
from .networks import truncated_normal
from .prototypes import PrototypeSet
from .tensor import Tensor, _as_tensor, concat, get_dtype, matmul, scatter_rows, stack, where

logger = logging.getLogger(__name__)


class MemoryColdError(LookupError):
    """Raised when addressing an empty store; callers fall back to the memory-free path."""


@dataclass
class AddressWeights:
    weights: Tensor  # [A] or [N, A], on the simplex
    log_weights: Tensor

    def numpy(self) -> np.ndarray:
        return self.weights.data


@dataclass
class _PendingUpdate:
    row: int
    previous: np.ndarray  # slot value before the update
    nodes: np.ndarray  # episode features of the class


class MemoryStore:
    """Ordered per-class slots plus the attention weight vector ``w``.

    ``alpha`` is the retention factor of the consolidation blend; ``cap``
    bounds the number of slots (first-come retention); ``sigma`` is the
    nonlinearity applied to the attention summary ("softmax" over feature
    dimensions or "identity").
    """

    def __init__(
        self,
        dim: int,
        alpha: float = 0.7,
        cap: int | None = None,
        sigma: str = "softmax",
        update: str = "attention",
        leaky_slope: float = 0.2,
        rng: np.random.Generator | None = None,
        w: np.ndarray | None = None,
    ):
        if not 0 <= alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        if sigma not in ("softmax", "identity"):
            raise ValueError(f"sigma must be 'softmax' or 'identity', got {sigma!r}")
        if update not in ("attention", "mean"):
            raise ValueError(f"update must be 'attention' or 'mean', got {update!r}")
        if cap is not None and cap < 0:
            raise ValueError("memory cap must be nonnegative")
        self.dim = dim
        self.alpha = float(alpha)
        self.cap = cap
        self.sigma = sigma
        self.update_mode = update
        self.leaky_slope = leaky_slope
        if w is None:
            rng = rng or np.random.default_rng(0)
            w = truncated_normal(rng, (2 * dim,), np.sqrt(1.0 / (2 * dim)))
        self.w = Tensor(np.asarray(w, dtype=get_dtype()), requires_grad=True)
        self.class_ids: list[int] = []
        self.keys = np.zeros((0, dim), dtype=get_dtype())
        self._rows: dict[int, int] = {}
        self.pending: list[_PendingUpdate] = []
        self.frozen = False

    def __len__(self) -> int:
        return len(self.class_ids)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._rows

    @property
    def is_full(self) -> bool:
        return self.cap is not None and len(self) >= self.cap

    def slot(self, class_id: int) -> np.ndarray:
        return self.keys[self._rows[class_id]]

    def _check_writable(self):
        if self.frozen:
            raise RuntimeError("memory is frozen; writes are not allowed")

    # reading -----------------------------------------------------------------

    def key_tensor(self) -> Tensor:
        """Slots as a [A, d] tensor carrying the straight-through w pathway."""
        keys = Tensor(self.keys)
        if not self.pending or self.update_mode != "attention" or self.frozen:
            return keys
        rows, values = [], []
        for p in self.pending:
            _, summary = attention_summary(
                Tensor(p.previous), Tensor(p.nodes), self.w, self.sigma, self.leaky_slope
            )
            value = self.alpha * Tensor(p.previous) + (1 - self.alpha) * summary
            rows.append(p.row)
            values.append(value - value.detach())
        return keys + scatter_rows(stack(values), rows, len(self))

    # writing -----------------------------------------------------------------

    def append_class(self, class_id: int, mean_feature) -> bool:
        """Append a slot for an unseen class. Returns False when the cap is reached."""
        self._check_writable()
        if class_id in self._rows:
            raise ValueError(f"class {class_id} already has a memory slot")
        if self.is_full:
            return False
        feature = np.asarray(mean_feature, dtype=self.keys.dtype).reshape(1, self.dim)
        self._rows[class_id] = len(self.class_ids)
        self.class_ids.append(int(class_id))
        self.keys = np.concatenate([self.keys, feature])
        return True

    def attention_update(self, class_id: int, features) -> np.ndarray:
        """Consolidate slot ``class_id`` with attention over {slot} U features."""
        self._check_writable()
        row = self._row_for_update(class_id, features)
        previous = self.keys[row].copy()
        nodes = np.asarray(features, dtype=self.keys.dtype)
        _, summary = attention_summary(
            Tensor(previous), Tensor(nodes), self.w.detach(), self.sigma, self.leaky_slope
        )
        self.keys[row] = self.alpha * previous + (1 - self.alpha) * summary.data
        self.pending.append(_PendingUpdate(row, previous, nodes))
        return self.keys[row]

    def mean_update(self, class_id: int, features) -> np.ndarray:
        """Consolidate slot ``class_id`` with the plain mean of the features."""
        self._check_writable()
        row = self._row_for_update(class_id, features)
        summary = np.asarray(features, dtype=self.keys.dtype).mean(axis=0)
        self.keys[row] = self.alpha * self.keys[row] + (1 - self.alpha) * summary
        return self.keys[row]

    def _row_for_update(self, class_id, features) -> int:
        if class_id not in self._rows:
            raise KeyError(f"class {class_id} has no memory slot")
        if len(np.asarray(features)) == 0:
            raise ValueError("memory update needs at least one feature")
        return self._rows[class_id]

    def write(self, class_id: int, features) -> str:
        """Append unseen classes, consolidate seen ones. Returns the action taken."""
        features = np.asarray(features, dtype=self.keys.dtype)
        if class_id not in self:
            return "append" if self.append_class(class_id, features.mean(axis=0)) else "full"
        if self.update_mode == "attention":
            self.attention_update(class_id, features)
        else:
            self.mean_update(class_id, features)
        return "update"

    def clear_pending(self) -> None:
        self.pending = []

    # serialization -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "class_ids": np.asarray(self.class_ids, dtype=np.int64),
            "keys": self.keys,
            "alpha": np.asarray([self.alpha], dtype=np.float64),
            "w": self.w.data,
        }
        if self.pending:
            out["pending_rows"] = np.asarray([p.row for p in self.pending], dtype=np.int64)
            out["pending_previous"] = np.stack([p.previous for p in self.pending])
            out["pending_counts"] = np.asarray([len(p.nodes) for p in self.pending], dtype=np.int64)
            out["pending_nodes"] = np.concatenate([p.nodes for p in self.pending])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.class_ids = [int(c) for c in arrays["class_ids"]]
        self._rows = {c: i for i, c in enumerate(self.class_ids)}
        self.keys = np.array(arrays["keys"], dtype=get_dtype()).reshape(-1, self.dim)
        self.alpha = float(arrays["alpha"][0])
        self.w.data[...] = arrays["w"]
        self.pending = []
        if "pending_rows" in arrays:
            offsets = np.concatenate([[0], np.cumsum(arrays["pending_counts"])])
            for i, row in enumerate(arrays["pending_rows"]):
                self.pending.append(
                    _PendingUpdate(
                        int(row),
                        np.array(arrays["pending_previous"][i], dtype=get_dtype()),
                        np.array(arrays["pending_nodes"][offsets[i] : offsets[i + 1]], dtype=get_dtype()),
                    )
                )


def attention_summary(
    slot: Tensor, nodes: Tensor, w: Tensor, sigma: str = "softmax", slope: float = 0.2
) -> tuple[Tensor, Tensor]:
    """Graph-attention summary of a slot and its class features.

    Node 0 is the slot itself, nodes 1.. are the features. Returns the
    attention coefficients [1 + n] and ``sigma(sum_i beta_i h_i)`` [d].
    """
    d = slot.shape[-1]
    graph = concat([slot.reshape(1, d), nodes], axis=0)  # [1 + n, d]
    scores = (slot * w[:d]).sum() + matmul(graph, w[d:])  # [1 + n]
    beta = F.softmax(F.leaky_relu(scores, slope), axis=0)
    combined = matmul(beta.reshape(1, -1), graph).reshape(d)
    if sigma == "softmax":
        combined = F.softmax(combined, axis=0)
    return beta, combined


# addressing ----------------------------------------------------------------------


def _logits(store: MemoryStore, h_bar: Tensor, keys: Tensor | None = None) -> Tensor:
    if len(store) == 0:
        raise MemoryColdError("memory is empty")
    keys = store.key_tensor() if keys is None else keys
    h_bar = _as_tensor(h_bar)
    if h_bar.ndim == 1:
        return matmul(keys, h_bar)
    return matmul(h_bar, keys.T)


def address(store: MemoryStore, h_bar: Tensor, keys: Tensor | None = None) -> AddressWeights:
    """Softmax over slots of the dot product between each slot and ``h_bar``."""
    log_w = F.log_softmax(_logits(store, h_bar, keys), axis=-1)
    return AddressWeights(log_w.exp(), log_w)


def address_gumbel(
    store: MemoryStore,
    h_bar: Tensor,
    temperature: float,
    rng: np.random.Generator,
    keys: Tensor | None = None,
) -> AddressWeights:
    """Gumbel-softmax relaxation of the categorical address."""
    if temperature <= 0:
        raise ValueError("Gumbel-softmax temperature must be > 0")
    logits = _logits(store, h_bar, keys)
    u = rng.random(logits.shape)
    gumbel = -np.log(-np.log(np.clip(u, 1e-12, 1 - 1e-12))).astype(logits.dtype)
    log_w = F.log_softmax((logits + gumbel) * (1.0 / temperature), axis=-1)
    return AddressWeights(log_w.exp(), log_w)


def gumbel_temperature(step: int, initial: float = 1.0, minimum: float = 0.5, decay: float = 1e-4) -> float:
    """Exponential annealing ``max(minimum, initial * exp(-decay * step))``."""
    return max(minimum, initial * float(np.exp(-decay * step)))


# recall ----------------------------------------------------------------------


@dataclass
class Recall:
    mixture: GaussianMixture  # batched over episode classes: weights [N, A], components [A, d]
    samples: Tensor  # [N, J, d]
    indices: np.ndarray  # [N, J] addressed component per sample
    address: AddressWeights


def recall(
    store: MemoryStore,
    h_bar: Tensor,
    nets,
    n_samples: int,
    rng: np.random.Generator,
    addressing: str = "softmax",
    temperature: float = 1.0,
) -> Recall:
    """Build q(m | M, S) for each support mean and draw J latent memories.

    ``h_bar`` is [N, d]; the mixture has weights [N, A] over the shared
    components ``p(m | M_a)``.
    """
    if n_samples < 1:
        raise ValueError("number of latent memory samples J must be >= 1")
    keys = store.key_tensor()
    h_bar = _as_tensor(h_bar)
    if h_bar.ndim == 1:
        h_bar = h_bar.reshape(1, -1)
    if addressing == "softmax":
        addr = address(store, h_bar, keys)
    elif addressing == "gumbel":
        addr = address_gumbel(store, h_bar, temperature, rng, keys)
    else:
        raise ValueError(f"unknown addressing {addressing!r}")
    components = nets.memory_net(keys)
    mix = GaussianMixture(addr.log_weights, components)
    idx, samples = mixture_sample(mix, rng, n_samples)
    return Recall(mix, samples, idx, addr)


def hierarchical_prototype(
    nets, h_bar: Tensor, recalled: Recall, n_samples: int, rng: np.random.Generator
) -> tuple[PrototypeSet, DiagonalGaussian]:
    """Sample L prototypes per class from (1/J) sum_j q(z | m_j, h_bar).

    Draw ``l`` uses latent memory ``j = l mod J``. Returns the prototype
    set and the J conditional posteriors [N, J, d].
    """
    m = recalled.samples
    n, j, d = m.shape
    h_rep = _as_tensor(h_bar).reshape(n, 1, d) * np.ones((1, j, 1), dtype=m.dtype)
    conditionals = nets.posterior_z(m, h_rep)
    pick = np.arange(n_samples) % j
    eps = rng.standard_normal((n, n_samples, d)).astype(m.dtype)
    z = conditionals.mean[:, pick] + conditionals.std()[:, pick] * eps
    return PrototypeSet(z, conditionals.mean.mean(axis=1)), conditionals


# ablation recall paths -------------------------------------------------------------


def rote_weights(store: MemoryStore, h_bar: Tensor, keys: Tensor | None = None) -> Tensor:
    """lambda_a = g_a / sum_i g_i with raw dot products g; softmax when that is not a distribution."""
    g = _logits(store, h_bar, keys)
    gd = g.data
    valid = np.all(gd >= 0, axis=-1) & (gd.sum(axis=-1) > 0)
    if np.all(valid):
        return g / g.sum(axis=-1, keepdims=True)
    logger.warning("rote addressing: %d row(s) with negative similarity, using softmax", int((~valid).sum()))
    soft = F.softmax(g, axis=-1)
    if not np.any(valid):
        return soft
    ratio = g / g.sum(axis=-1, keepdims=True)
    mask = valid[..., None] if g.ndim == 2 else valid
    return where(np.broadcast_to(mask, g.shape), ratio, soft)


def recall_rote(store: MemoryStore, h_bar: Tensor) -> Tensor:
    """Weighted slot average used directly as the posterior's memory input."""
    keys = store.key_tensor()
    lam = rote_weights(store, h_bar, keys)
    if lam.ndim == 1:
        return matmul(lam.reshape(1, -1), keys).reshape(-1)
    return matmul(lam, keys)


def recall_transformed(store: MemoryStore, h_bar: Tensor, transform) -> Tensor:
    return transform(recall_rote(store, h_bar))
