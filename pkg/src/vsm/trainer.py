"""Episodic meta-training: the hierarchical objective, the Adam loop with
memory consolidation, evaluation and the ablation sweep."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable

import numpy as np

from . import memory as mem
from .data import ClassDataset, DataError, Episode, sample_episode
from .gaussian import DiagonalGaussian, kl_gaussian, kl_mixture_vs_gaussian_mc
from .networks import NetworkConfig, VSMNetworks
from .optim import Adam
from .prototypes import (
    PrototypeSet,
    classify,
    expected_log_likelihood,
    protonet_prototypes,
    sample_log_likelihoods,
    sample_prototypes,
    vpn_elbo,
    vpn_posterior,
)
from .tensor import Tensor, logsumexp, no_grad, set_precision

logger = logging.getLogger(__name__)

MODES = ("protonet", "vpn", "vsm", "rote", "transformed", "mean_update", "gumbel")
MEMORY_MODES = ("vsm", "rote", "transformed", "mean_update", "gumbel")

# RNG stream tags: every episode gets default_rng([seed, tag, index])
_TRAIN_STREAM, _EVAL_STREAM, _INIT_STREAM, _DUMP_STREAM = 0, 1, 2, 3


class NumericError(FloatingPointError):
    """A loss or one of its components became non-finite."""


@dataclass
class TrainConfig:
    way: int = 5
    shot: int = 1
    queries_per_class: int = 15
    tasks_per_batch: int = 8
    iterations: int = 1000
    learning_rate: float = 1e-4
    n_memory_samples: int = 10  # J
    n_prototype_samples: int = 10  # L
    eval_prototype_samples: int | None = None  # L at evaluation, defaults to n_prototype_samples
    eval_memory_samples: int | None = None  # J at evaluation, defaults to n_memory_samples
    alpha: float = 0.7
    memory_cap: int | None = None
    mode: str = "vsm"
    seed: int = 0
    eval_seed: int = 1234
    precision: str = "f32"
    eval_every: int = 0  # optimizer steps between val evaluations, 0 = only at the end
    val_episodes: int = 100
    eval_episodes: int = 600
    eval_queries_per_class: int = 15
    metric: str = "sqeuclidean"
    kl_z_estimator: str = "mc"  # "mc" over prototype draws, or "average" of closed-form KLs
    memory_sigma: str = "softmax"
    gumbel_temperature: float = 1.0
    gumbel_min_temperature: float = 0.5
    gumbel_decay: float = 1e-4
    kl_warmup: int = 0  # optimizer steps over which the KL coefficient ramps from 0 to 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("way", "shot", "queries_per_class", "tasks_per_batch", "eval_queries_per_class"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.way < 2:
            problems.append("way must be >= 2")
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.n_memory_samples < 1:
            problems.append("n_memory_samples (J) must be >= 1")
        if self.n_prototype_samples < 1:
            problems.append("n_prototype_samples (L) must be >= 1")
        for name in ("eval_prototype_samples", "eval_memory_samples"):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0 <= self.alpha <= 1:
            problems.append("alpha must lie in [0, 1]")
        if self.memory_cap is not None and self.memory_cap < 0:
            problems.append("memory_cap must be >= 0")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {', '.join(MODES)}")
        if self.precision not in ("f32", "f64"):
            problems.append("precision must be f32 or f64")
        if self.metric not in ("sqeuclidean", "cosine"):
            problems.append("metric must be sqeuclidean or cosine")
        if self.kl_z_estimator not in ("mc", "average"):
            problems.append("kl_z_estimator must be mc or average")
        if self.memory_sigma not in ("softmax", "identity"):
            problems.append("memory_sigma must be softmax or identity")
        if self.eval_every < 0 or self.val_episodes < 0 or self.eval_episodes < 1:
            problems.append("eval_every and val_episodes must be >= 0, eval_episodes >= 1")
        if self.kl_warmup < 0:
            problems.append("kl_warmup must be >= 0")
        if self.gumbel_temperature <= 0 or self.gumbel_min_temperature <= 0:
            problems.append("Gumbel temperatures must be > 0")
        if problems:
            raise ValueError("; ".join(problems))

    def for_evaluation(self) -> "TrainConfig":
        """Copy with the evaluation-time sample counts swapped in."""
        return replace(
            self,
            n_prototype_samples=self.eval_prototype_samples or self.n_prototype_samples,
            n_memory_samples=self.eval_memory_samples or self.n_memory_samples,
        )

    @property
    def uses_memory(self) -> bool:
        return self.mode in MEMORY_MODES

    def to_dict(self) -> dict:
        return asdict(self)


def paper_settings(shot: int) -> dict:
    """Optimizer and sampling settings reported for full-scale training."""
    if shot == 1:
        lr, iterations = 2.5e-4, 150_000
    else:
        lr, iterations = 1e-4, 100_000
    return {
        "learning_rate": lr,
        "iterations": iterations,
        "tasks_per_batch": 8,
        "n_memory_samples": 150,
        "n_prototype_samples": 100,
    }


@dataclass
class RunMetrics:
    episode: int
    accuracy: float
    ci95: float
    n_episodes: int
    ce: float
    kl_z: float
    kl_m: float
    memory_size: int
    split: str = "val"
    degenerate_interval: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def confidence_interval(accuracies) -> tuple[float, float, bool]:
    """Mean accuracy and 1.96 * std / sqrt(n); a single episode gives width 0, flagged."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no accuracies to summarise")
    if acc.size == 1:
        return float(acc[0]), 0.0, True
    return float(acc.mean()), float(1.96 * acc.std() / math.sqrt(acc.size)), False


# objective ---------------------------------------------------------------------


@dataclass
class EpisodeOutput:
    loss: Tensor
    ce: float
    kl_z: float  # mean per query
    kl_m: float  # mean per class
    accuracy: float
    log_probs: np.ndarray  # [N * Q, N]
    protos: PrototypeSet
    used_memory: bool


def _kl_z_mc(conditionals: DiagonalGaussian, z: Tensor, prior: DiagonalGaussian) -> Tensor:
    """MC estimate of KL(mixture over J conditionals || per-query prior) -> [N, Q].

    ``conditionals`` [N, J, d]; ``z`` [N, L, d] drawn from the mixture;
    ``prior`` [N, Q, d] for the queries of each class.
    """
    n, j, d = conditionals.shape
    l = z.shape[1]
    q = prior.shape[1]
    cond = DiagonalGaussian(
        conditionals.mean.reshape(n, 1, j, d), conditionals.log_var.reshape(n, 1, j, d), conditionals.floor
    )
    log_q = logsumexp(cond.log_prob(z.reshape(n, l, 1, d)), axis=-1) - math.log(j)  # [N, L]
    pri = DiagonalGaussian(prior.mean.reshape(n, q, 1, d), prior.log_var.reshape(n, q, 1, d), prior.floor)
    log_p = pri.log_prob(z.reshape(n, 1, l, d))  # [N, Q, L]
    return (log_q.reshape(n, 1, l) - log_p).mean(axis=-1)


def _kl_z_average(conditionals: DiagonalGaussian, prior: DiagonalGaussian) -> Tensor:
    n, j, d = conditionals.shape
    q = prior.shape[1]
    cond = DiagonalGaussian(
        conditionals.mean.reshape(n, 1, j, d), conditionals.log_var.reshape(n, 1, j, d), conditionals.floor
    )
    pri = DiagonalGaussian(prior.mean.reshape(n, q, 1, d), prior.log_var.reshape(n, q, 1, d), prior.floor)
    return kl_gaussian(cond, pri).mean(axis=-1)


def _check_finite(parts: dict) -> None:
    bad = {k: v for k, v in parts.items() if not np.all(np.isfinite(v))}
    if bad:
        summary = ", ".join(f"{k}={np.asarray(v).ravel()[:4]}" for k, v in parts.items())
        raise NumericError(f"non-finite loss components {sorted(bad)}; magnitudes: {summary}")


def objective(
    support_features: Tensor,
    query_features: Tensor,
    nets: VSMNetworks,
    store: mem.MemoryStore | None,
    config: TrainConfig,
    rng: np.random.Generator,
    temperature: float = 1.0,
    kl_weight: float = 1.0,
) -> EpisodeOutput:
    """Episode loss from encoded features.

    ``support_features`` [N, K, d] and ``query_features`` [N, Q, d]; the
    loss sums over all queries and classes. With a cold store (or a mode
    without memory) the variational modes fall back to the memory-free
    objective and consume the RNG identically.
    """
    n, q, d = query_features.shape
    flat_q = query_features.reshape(n * q, d)
    labels = np.repeat(np.arange(n), q)
    mode = config.mode
    L = config.n_prototype_samples
    kl_m = None
    warm = mode != "protonet" and config.uses_memory and store is not None and len(store) > 0

    if mode == "protonet":
        protos = protonet_prototypes(support_features)
        log_lik = sample_log_likelihoods(flat_q, protos, config.metric)
        ll = expected_log_likelihood(log_lik, labels)
        ce = -ll.sum()
        loss, kl_z = ce, None
    elif not warm:
        _, parts = vpn_elbo(support_features, query_features, nets, L, rng, config.metric)
        protos, ce, kl_z = parts["protos"], parts["ce"], parts["kl_z"]
        loss = ce + kl_weight * kl_z
    else:
        h_bar = support_features.mean(axis=1)
        prior = nets.prior_z(query_features)  # [N, Q, d]
        if mode in ("rote", "transformed"):
            m_bar = mem.recall_rote(store, h_bar)
            if mode == "transformed":
                m_bar = nets.transform(m_bar)
            posterior = nets.posterior_z(m_bar, h_bar)
            protos = sample_prototypes(posterior, L, rng)
            kl_z = kl_gaussian(
                DiagonalGaussian(
                    posterior.mean.reshape(n, 1, d), posterior.log_var.reshape(n, 1, d), posterior.floor
                ),
                prior,
            ).sum()
        else:
            addressing = "gumbel" if mode == "gumbel" else "softmax"
            recalled = mem.recall(store, h_bar, nets, config.n_memory_samples, rng, addressing, temperature)
            protos, conditionals = mem.hierarchical_prototype(nets, h_bar, recalled, L, rng)
            if config.kl_z_estimator == "mc":
                kl_z = _kl_z_mc(conditionals, protos.samples, prior).sum()
            else:
                kl_z = _kl_z_average(conditionals, prior).sum()
            kl_m = kl_mixture_vs_gaussian_mc(
                recalled.mixture, nets.memory_net(h_bar), samples=recalled.samples
            ).sum()
        ll = expected_log_likelihood(sample_log_likelihoods(flat_q, protos, config.metric), labels)
        ce = -ll.sum()
        kl = kl_z if kl_m is None else kl_z + kl_m
        loss = ce + kl_weight * kl

    log_probs = classify(flat_q.detach(), PrototypeSet(protos.samples.detach()), config.metric).data
    parts = {
        "loss": loss.data,
        "ce": ce.data,
        "kl_z": 0.0 if kl_z is None else kl_z.data,
        "kl_m": 0.0 if kl_m is None else kl_m.data,
    }
    _check_finite(parts)
    return EpisodeOutput(
        loss=loss,
        ce=float(ce.data),
        kl_z=0.0 if kl_z is None else float(kl_z.data) / (n * q),
        kl_m=0.0 if kl_m is None else float(kl_m.data) / n,
        accuracy=float(np.mean(log_probs.argmax(axis=1) == labels)),
        log_probs=log_probs,
        protos=protos,
        used_memory=warm,
    )


def infer_prototypes(
    support_features: Tensor,
    nets: VSMNetworks,
    store: mem.MemoryStore | None,
    config: TrainConfig,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> PrototypeSet:
    """Prototypes for a support set alone (prediction without a loss)."""
    L = config.n_prototype_samples
    if config.mode == "protonet":
        return protonet_prototypes(support_features)
    if not config.uses_memory or store is None or len(store) == 0:
        return sample_prototypes(vpn_posterior(nets, support_features), L, rng)
    h_bar = support_features.mean(axis=1)
    if config.mode in ("rote", "transformed"):
        m_bar = mem.recall_rote(store, h_bar)
        if config.mode == "transformed":
            m_bar = nets.transform(m_bar)
        return sample_prototypes(nets.posterior_z(m_bar, h_bar), L, rng)
    addressing = "gumbel" if config.mode == "gumbel" else "softmax"
    recalled = mem.recall(store, h_bar, nets, config.n_memory_samples, rng, addressing, temperature)
    return mem.hierarchical_prototype(nets, h_bar, recalled, L, rng)[0]


def encode_episode(
    nets: VSMNetworks, episode: Episode, training: bool, rng: np.random.Generator | None
) -> tuple[Tensor, Tensor]:
    """Support features [N, K, d] and query features [N, Q, d].

    Both sets share the encoder mode: supports encoded without dropout while
    queries get it would put the two on different feature scales (dropout
    before max-pooling inflates activations).
    """
    n, k = episode.support.shape[:2]
    q = episode.query.shape[1]
    shape = episode.support.shape[2:]
    h_s = nets.encode(episode.support.reshape((n * k,) + shape), training=training, rng=rng)
    h_q = nets.encode(episode.query.reshape((n * q,) + shape), training=training, rng=rng)
    return h_s.reshape(n, k, -1), h_q.reshape(n, q, -1)


def episode_loss(
    episode: Episode,
    nets: VSMNetworks,
    store: mem.MemoryStore | None,
    config: TrainConfig,
    rng: np.random.Generator,
    training: bool = True,
    temperature: float = 1.0,
    kl_weight: float = 1.0,
) -> EpisodeOutput:
    """Encode an episode and evaluate the objective for the configured mode."""
    h_s, h_q = encode_episode(nets, episode, training, rng)
    return objective(h_s, h_q, nets, store, config, rng, temperature, kl_weight)


# learner ---------------------------------------------------------------------------


class Learner:
    """Networks, memory store and optimizer state of one training run."""

    def __init__(self, config: TrainConfig, network_config: NetworkConfig | None = None):
        set_precision(config.precision)
        self.config = config
        network_config = network_config or NetworkConfig()
        if config.mode == "transformed" and not network_config.with_transform:
            network_config = replace(network_config, with_transform=True)
        self.network_config = network_config
        self.nets = VSMNetworks(network_config, np.random.default_rng([config.seed, _INIT_STREAM]))
        self.store = None
        if config.uses_memory:
            self.store = mem.MemoryStore(
                self.nets.dim,
                alpha=config.alpha,
                cap=config.memory_cap,
                sigma=config.memory_sigma,
                update="mean" if config.mode == "mean_update" else "attention",
                rng=np.random.default_rng([config.seed, _INIT_STREAM, 1]),
            )
        self.optimizer = Adam(self.named_parameters(), lr=config.learning_rate)
        self.step = 0
        self.episodes_seen = 0

    def named_parameters(self) -> dict:
        params = self.nets.named_parameters()
        if self.store is not None:
            params["memory/w"] = self.store.w
        return params

    @property
    def memory_size(self) -> int:
        return 0 if self.store is None else len(self.store)

    def temperature(self) -> float:
        c = self.config
        return mem.gumbel_temperature(self.step, c.gumbel_temperature, c.gumbel_min_temperature, c.gumbel_decay)

    def kl_weight(self) -> float:
        warmup = self.config.kl_warmup
        return 1.0 if warmup == 0 else min(1.0, self.step / warmup)

    def train_step(self, dataset: ClassDataset) -> list[EpisodeOutput]:
        """One optimizer step over ``tasks_per_batch`` episodes, then memory writes."""
        c = self.config
        self.optimizer.zero_grad()
        outputs, episodes = [], []
        for _ in range(c.tasks_per_batch):
            rng = np.random.default_rng([c.seed, _TRAIN_STREAM, self.episodes_seen])
            episode = sample_episode(dataset, c.way, c.shot, c.queries_per_class, rng)
            out = episode_loss(episode, self.nets, self.store, c, rng, True, self.temperature(), self.kl_weight())
            out.loss.backward()
            outputs.append(out)
            episodes.append(episode)
            self.episodes_seen += 1
        self.optimizer.step()
        self.step += 1
        if self.store is not None:
            self.write_memory(episodes)
        return outputs

    def write_memory(self, episodes: Iterable[Episode]) -> None:
        """Consolidate every class of every episode, in episode order, with eval-mode features."""
        self.store.clear_pending()
        for episode in episodes:
            images = np.concatenate([episode.support, episode.query], axis=1)
            n, per = images.shape[:2]
            with no_grad():
                feats = self.nets.encode(images.reshape((n * per,) + images.shape[2:]), training=False)
            feats = feats.data.reshape(n, per, -1)
            for i, class_id in enumerate(episode.class_ids):
                self.store.write(class_id, feats[i])

    def evaluate(
        self, dataset: ClassDataset, n_episodes: int, seed: int | None = None, shot: int | None = None
    ) -> tuple[float, float, bool]:
        """Accuracy and 95% half-width over sampled episodes; the memory is frozen."""
        if len(dataset) == 0:
            raise DataError(f"{dataset.split} split is empty")
        c = self.config
        seed = c.eval_seed if seed is None else seed
        shot = c.shot if shot is None else shot
        eval_config = c.for_evaluation()
        accs = []
        frozen = self.store.frozen if self.store is not None else None
        if self.store is not None:
            self.store.frozen = True
        try:
            with no_grad():
                for i in range(n_episodes):
                    rng = np.random.default_rng([seed, _EVAL_STREAM, i])
                    episode = sample_episode(dataset, c.way, shot, c.eval_queries_per_class, rng)
                    out = episode_loss(episode, self.nets, self.store, eval_config, rng, False, self.temperature())
                    accs.append(out.accuracy)
        finally:
            if self.store is not None:
                self.store.frozen = frozen
        return confidence_interval(accs)


def train(
    config: TrainConfig,
    datasets: dict[str, ClassDataset],
    network_config: NetworkConfig | None = None,
    on_metrics: Callable[[RunMetrics], None] | None = None,
    learner: Learner | None = None,
) -> tuple[Learner, list[RunMetrics]]:
    """Meta-train on ``datasets['train']`` with periodic evaluation on ``val``.

    An evaluation row is always emitted after the final step (also for zero
    iterations). Rows carry the training loss components averaged since the
    previous row.
    """
    train_ds = datasets["train"]
    need = config.shot + config.queries_per_class
    if len(train_ds) < config.way or train_ds.min_class_size() < need:
        raise DataError(
            f"train split ({len(train_ds)} classes, smallest {train_ds.min_class_size()} samples) "
            f"cannot form {config.way}-way episodes with {need} samples per class"
        )
    eval_ds = datasets.get("val")
    eval_split = "val"
    if eval_ds is None or len(eval_ds) < config.way:
        eval_ds, eval_split = train_ds, "train"
        logger.warning("val split unusable for %d-way episodes, evaluating on train", config.way)
    learner = learner or Learner(config, network_config)
    rows: list[RunMetrics] = []
    acc_ce, acc_kz, acc_km, count = 0.0, 0.0, 0.0, 0

    def emit():
        nonlocal acc_ce, acc_kz, acc_km, count
        n_eval = config.val_episodes if config.val_episodes > 0 else config.eval_episodes
        acc, ci, degenerate = learner.evaluate(eval_ds, n_eval)
        div = max(count, 1)
        row = RunMetrics(
            episode=learner.episodes_seen,
            accuracy=acc,
            ci95=ci,
            n_episodes=n_eval,
            ce=acc_ce / div,
            kl_z=acc_kz / div,
            kl_m=acc_km / div,
            memory_size=learner.memory_size,
            split=eval_split,
            degenerate_interval=degenerate,
        )
        rows.append(row)
        if on_metrics is not None:
            on_metrics(row)
        logger.info("episode %d: %s accuracy %.4f +- %.4f", row.episode, eval_split, acc, ci)
        acc_ce = acc_kz = acc_km = 0.0
        count = 0

    while learner.step < config.iterations:
        for out in learner.train_step(train_ds):
            acc_ce += out.ce / (config.way * config.queries_per_class)
            acc_kz += out.kl_z
            acc_km += out.kl_m
            count += 1
        if config.eval_every and learner.step % config.eval_every == 0 and learner.step < config.iterations:
            emit()
    emit()
    return learner, rows


def evaluate(learner: Learner, dataset: ClassDataset, n_episodes: int | None = None, seed: int | None = None) -> RunMetrics:
    n_episodes = learner.config.eval_episodes if n_episodes is None else n_episodes
    acc, ci, degenerate = learner.evaluate(dataset, n_episodes, seed)
    return RunMetrics(
        episode=learner.episodes_seen,
        accuracy=acc,
        ci95=ci,
        n_episodes=n_episodes,
        ce=0.0,
        kl_z=0.0,
        kl_m=0.0,
        memory_size=learner.memory_size,
        split=dataset.split,
        degenerate_interval=degenerate,
    )


# ablations --------------------------------------------------------------------------


def alpha_grid(start: float = 0.0, stop: float = 1.0, step: float = 0.1) -> list[float]:
    """Inclusive grid, rounded so that 0.1 steps land on exact decimals."""
    if step <= 0:
        raise ValueError("grid step must be > 0")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def ablation_suite(
    base: TrainConfig,
    datasets: dict[str, ClassDataset],
    grid: list[dict],
    shots: Iterable[int] = (1, 5),
    network_config: NetworkConfig | None = None,
    eval_split: str = "test",
) -> list[dict]:
    """Train and evaluate one run per grid point and shot count.

    Each row holds the grid point's overrides plus ``acc_<K>shot`` and
    ``ci95_<K>shot`` columns.
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    shots = list(shots)
    split = datasets.get(eval_split)
    if split is None or len(split) == 0:
        raise DataError(f"{eval_split} split is empty")
    rows = []
    for point in grid:
        row = {"mode": point.get("mode", base.mode), "alpha": point.get("alpha", base.alpha)}
        row.update({k: v for k, v in point.items() if k not in row})
        for shot in shots:
            cfg = replace(base, shot=shot, **point)
            learner, _ = train(cfg, datasets, network_config)
            acc, ci, _ = learner.evaluate(split, cfg.eval_episodes)
            row[f"acc_{shot}shot"] = acc
            row[f"ci95_{shot}shot"] = ci
        row["memory_size"] = learner.memory_size
        rows.append(row)
        logger.info("ablation row %s", row)
    return rows


# prototype export ---------------------------------------------------------------------


def prototype_rows(learner: Learner, dataset: ClassDataset, n_episodes: int, seed: int = 0):
    """Yield (episode, class_id, kind, sample_index, vector) for sampled and mean prototypes."""
    c = learner.config
    frozen = learner.store.frozen if learner.store is not None else None
    if learner.store is not None:
        learner.store.frozen = True
    try:
        with no_grad():
            for e in range(n_episodes):
                rng = np.random.default_rng([seed, _DUMP_STREAM, e])
                episode = sample_episode(dataset, c.way, c.shot, c.eval_queries_per_class, rng)
                out = episode_loss(
                    episode, learner.nets, learner.store, c.for_evaluation(), rng, False, learner.temperature()
                )
                samples = out.protos.samples.data
                means = out.protos.mean.data if out.protos.mean is not None else samples.mean(axis=1)
                for n, class_id in enumerate(episode.class_ids):
                    for l in range(samples.shape[1]):
                        yield e, class_id, "sample", l, samples[n, l]
                for n, class_id in enumerate(episode.class_ids):
                    yield e, class_id, "mean", 0, means[n]
    finally:
        if learner.store is not None:
            learner.store.frozen = frozen
