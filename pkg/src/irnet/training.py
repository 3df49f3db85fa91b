"""Episodic training, evaluation and the train/validate/test driver."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .encoder import Vocab, random_rotation
from .episodes import Dataset, DomainSplit, Episode, EpisodeSampler, EpisodeSpec
from .exceptions import ContractError, NumericError
from .metrics import AggregateMetrics, EpisodeMetrics, aggregate, episode_metrics
from .model import RelationNetwork
from .optim import AdamW, warmup_lr

log = logging.getLogger(__name__)

STREAMS = ("init", "train", "val", "test")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for initialization, training and each evaluation split."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def episode_spec(config: TrainConfig) -> EpisodeSpec:
    return EpisodeSpec(config.n_way, config.k_shot, config.n_query)


def build_model(dataset: Dataset, config: TrainConfig, rng=None) -> RelationNetwork:
    vocab = Vocab.build(dataset.all_tokens())
    return RelationNetwork(vocab, config, rng if rng is not None else rng_streams(config.seed)["init"])


def make_optimizer(model: RelationNetwork) -> AdamW:
    cfg = model.config
    return AdamW(model.trainable_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)


@dataclass
class EpochReport:
    epoch: int
    steps: int
    loss: float
    support_loss: float
    query_loss: float
    lr: float
    losses: list[float] = field(default_factory=list, repr=False)


def train_step(model: RelationNetwork, optimizer: AdamW, episode: Episode, lr: float,
               rotation: np.ndarray | None = None):
    model.zero_grad()
    with Tape() as tape:
        breakdown = model.forward(episode, rotation=rotation).losses
    tape.backward(breakdown.total)
    optimizer.step(lr)
    return breakdown


def train_epoch(model: RelationNetwork, optimizer: AdamW, sampler: EpisodeSampler,
                config: TrainConfig | None = None, epoch: int = 0, rescue_path=None) -> EpochReport:
    """Sample ``tasks_per_epoch`` episodes and take one optimizer step on each.

    On a numeric failure the last good state is written to ``rescue_path``
    (when given) before the error propagates.
    """
    cfg = config or model.config
    total = cfg.total_steps
    stats = []
    lr = 0.0
    for _ in range(cfg.tasks_per_epoch):
        episode = sampler.sample()
        rotation = random_rotation(cfg.hidden_size, sampler.rng) if cfg.rotate_embeddings else None
        step = min(optimizer.state.step + 1, total)
        lr = warmup_lr(step, total, cfg.lr, cfg.warmup_proportion)
        try:
            breakdown = train_step(model, optimizer, episode, lr, rotation)
        except NumericError:
            if rescue_path is not None:
                save_checkpoint(rescue_path, model, optimizer, sampler.rng.bit_generator.state)
                log.error("numeric failure at step %d; last good state saved to %s", step, rescue_path)
            raise
        stats.append(breakdown.as_floats())
    mean = {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}
    return EpochReport(epoch, len(stats), mean["loss"], mean["support_loss"], mean["query_loss"], lr,
                       [s["loss"] for s in stats])


def evaluate_episodes(model: RelationNetwork, episodes: Sequence[Episode]) -> list[EpisodeMetrics]:
    out = []
    for ep in episodes:
        result = model.forward(ep, compute_loss=False)
        out.append(episode_metrics(result.scores.data, result.predictions, ep.query_labels))
    return out


def evaluate(model: RelationNetwork, dataset: Dataset, domains: Sequence[str],
             config: TrainConfig | None = None, episodes: int | None = None,
             seed=None) -> tuple[AggregateMetrics, list[EpisodeMetrics]]:
    """Metrics over freshly sampled episodes; parameters are not touched."""
    cfg = config or model.config
    n = cfg.eval_episodes if episodes is None else episodes
    if n < 1:
        raise ContractError("evaluation needs at least one episode")
    rng = rng_streams(cfg.seed)["test"] if seed is None else seed
    sampler = EpisodeSampler(dataset, domains, episode_spec(cfg), rng)
    per_episode = evaluate_episodes(model, sampler.take(n))
    return aggregate(per_episode), per_episode


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int | None
    best_val: AggregateMetrics | None
    test: AggregateMetrics | None
    test_episodes: list[EpisodeMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"history": self.history, "best_epoch": self.best_epoch,
                "best_val": asdict(self.best_val) if self.best_val else None,
                "test": asdict(self.test) if self.test else None}


def _selection_key(m: AggregateMetrics) -> tuple[float, float]:
    return (m.macro_f1_mean, m.auc_mean if m.auc_mean is not None else 0.0)


def fit(model: RelationNetwork, dataset: Dataset, split: DomainSplit | None = None,
        optimizer: AdamW | None = None, checkpoint_dir=None, streams=None) -> TrainResult:
    """Train for ``epochs`` epochs, keeping the best-validation parameters.

    After each epoch the validation domains are scored on the same fixed
    set of episodes; the best state is restored at the end and the test
    domains are evaluated once.  Without a split the model trains on every
    domain and the final state is kept.
    """
    cfg = model.config
    streams = streams or rng_streams(cfg.seed)
    optimizer = optimizer or make_optimizer(model)
    train_domains = split.train if split else tuple(dataset.domains)
    sampler = EpisodeSampler(dataset, train_domains, episode_spec(cfg), streams["train"])
    val_episodes = None
    if split is not None:
        val_episodes = EpisodeSampler(dataset, split.val, episode_spec(cfg),
                                      streams["val"]).take(cfg.eval_episodes)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history, best_state, best_val, best_epoch = [], None, None, None
    for epoch in range(1, cfg.epochs + 1):
        report = train_epoch(model, optimizer, sampler, cfg, epoch,
                             rescue_path=ckpt_dir / "rescue.ckpt" if ckpt_dir else None)
        row = {"epoch": epoch, "loss": report.loss, "support_loss": report.support_loss,
               "query_loss": report.query_loss, "lr": report.lr}
        if val_episodes is not None:
            val = aggregate(evaluate_episodes(model, val_episodes))
            row.update(val_auc=val.auc_mean, val_macro_f1=val.macro_f1_mean)
            if best_val is None or _selection_key(val) > _selection_key(best_val):
                best_val, best_epoch, best_state = val, epoch, model.state_arrays()
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "best.ckpt", model, optimizer,
                                    sampler.rng.bit_generator.state, {"epoch": epoch})
        history.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v
                                          for k, v in row.items()})
    if ckpt_dir:
        save_checkpoint(ckpt_dir / "final.ckpt", model, optimizer, sampler.rng.bit_generator.state,
                        {"epoch": cfg.epochs})
    test, test_eps = None, []
    if split is not None:
        model.load_state_arrays(best_state)
        test_eps = evaluate_episodes(model, EpisodeSampler(dataset, split.test, episode_spec(cfg),
                                                           streams["test"]).take(cfg.eval_episodes))
        test = aggregate(test_eps)
    return TrainResult(history, best_epoch, best_val, test, test_eps)
