"""Group-relative advantages, the clipped KL-regularized surrogate and the update loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numkit as nk
from .numkit import ParamVector, Rng
from .policy import PolicyInput, ToyPolicy, answer_prob_sequential_vs_shuffled, outcome_logp
from .records import AnnotationRecord
from .rewards import Completion, RewardBreakdown, RewardConfig, total_reward

log = logging.getLogger(__name__)


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_delta: float = 0.2
    kl_beta: float = 0.001
    epochs: int = 3
    learning_rate: float = 1e-6
    std_epsilon: float = 1e-8
    # "step": the sampling policy is the current policy at every step; "epoch": frozen per epoch
    refresh_old: str = "step"
    n_shuffles: int = 4
    # "linear" decays the step size to zero over the run; still plain gradient descent
    lr_schedule: str = "constant"

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not 0.0 < self.clip_delta < 1.0:
            raise ValueError("clip_delta must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.refresh_old not in ("step", "epoch"):
            raise ValueError("refresh_old must be 'step' or 'epoch'")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError("lr_schedule must be 'constant' or 'linear'")

    def lr_at(self, step: int, total: Optional[int]) -> float:
        if self.lr_schedule == "constant" or not total:
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - step / total)


def advantages(rewards: Sequence[float], std_epsilon: float = 1e-8) -> np.ndarray:
    """(r_i - mean) / population std; an all-zero vector when the group is degenerate."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    centered = r - r.mean()
    std = float(np.sqrt(np.mean(centered * centered)))
    if std < std_epsilon:
        return np.zeros_like(r)
    return centered / std


def ratio(logp_new, logp_old):
    return nk.exp(logp_new - logp_old)


def clipped_term(rho, adv: float, delta: float):
    return nk.minimum(rho * adv, nk.clip(rho, 1.0 - delta, 1.0 + delta) * adv)


def kl_penalty(logp_new, logp_ref):
    """k3 estimator exp(d) - d - 1 with d = logp_ref - logp_new; never negative."""
    d = logp_ref - logp_new
    return nk.exp(d) - d - 1.0


def surrogate_loss(logp_new: Sequence, logp_old: Sequence[float], logp_ref: Sequence[float],
                   adv: Sequence[float], cfg: GrpoConfig):
    """Negated GRPO objective averaged over the group."""
    terms = [
        clipped_term(ratio(new, old), float(a), cfg.clip_delta) - cfg.kl_beta * kl_penalty(new, ref)
        for new, old, ref, a in zip(logp_new, logp_old, logp_ref, adv)
    ]
    return -nk.vsum(terms) * (1.0 / len(terms))


@dataclass
class RolloutGroup:
    query_id: str
    record: AnnotationRecord
    completions: list[Completion]
    rewards: list[float]
    breakdowns: list[RewardBreakdown]
    logp_old: list[float]
    logp_ref: list[float]
    advantages: list[float]
    w_seq: Optional[float] = None
    w_rand: Optional[float] = None

    def __post_init__(self) -> None:
        n = len(self.completions)
        if n < 2 or not all(len(x) == n for x in (self.rewards, self.logp_old, self.logp_ref, self.advantages)):
            raise ValueError("rollout group fields must share a length of at least 2")


def grpo_loss(group: RolloutGroup, policy: ToyPolicy, params: ParamVector, cfg: GrpoConfig):
    """Loss to minimize, rebuilt from the live parameters on the recorded completions."""
    inp = PolicyInput.from_record(group.record)
    hd = policy.heads(inp, params)
    logp_new = [outcome_logp(hd, policy.outcome_of(c, inp.task)) for c in group.completions]
    loss = surrogate_loss(logp_new, group.logp_old, group.logp_ref, group.advantages, cfg)
    if not math.isfinite(nk.value_of(loss)):
        raise nk.NonFiniteError(f"GRPO loss is not finite for query {group.query_id}")
    return loss


def rollout(
    record: AnnotationRecord,
    sampler: ToyPolicy,
    ref: ToyPolicy,
    cfg: GrpoConfig,
    reward_cfg: RewardConfig,
    rng: Rng,
    tmr: bool = False,
) -> RolloutGroup:
    """Sample a group from ``sampler`` and score it."""
    inp = PolicyInput.from_record(record)
    hd = sampler.heads(inp)
    hd_ref = ref.heads(inp)
    sample_rng = rng.spawn("sample")
    completions, logp_old, logp_ref = [], [], []
    for _ in range(cfg.group_size):
        c, lp, outcome = sampler.sample_from(hd, inp.task, sample_rng)
        completions.append(c)
        logp_old.append(lp)
        logp_ref.append(outcome_logp(hd_ref, outcome))
    w_seq = w_rand = None
    if tmr and record.kind.single_video:
        w_seq, w_rand = answer_prob_sequential_vs_shuffled(
            sampler, inp, record.target, rng.spawn("shuffle"), cfg.n_shuffles, reward_cfg.tmr_tolerance
        )
    breakdowns = [total_reward(c, record, w_seq, w_rand, reward_cfg) for c in completions]
    rewards = [b.total for b in breakdowns]
    adv = advantages(rewards, cfg.std_epsilon)
    return RolloutGroup(record.id, record, completions, rewards, breakdowns, logp_old, logp_ref,
                        [float(a) for a in adv], w_seq, w_rand)


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict, path: Optional[Path] = None) -> None:
        self.rows.append(row)
        if path is not None:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")

    def epoch_means(self, key: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.rows:
            by_epoch.setdefault(row["epoch"], []).append(row[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    @classmethod
    def read(cls, path: Path) -> TrainingLog:
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def _epoch_records(dataset, epoch: int, rng: Rng) -> Iterable[AnnotationRecord]:
    if hasattr(dataset, "epoch_stream"):
        return dataset.epoch_stream(epoch, rng)
    order = rng.permutation(len(dataset))
    return [dataset[i] for i in order]


def train_stage(
    dataset,
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    cfg: GrpoConfig,
    reward_cfg: RewardConfig,
    rng: Rng,
    tmr: bool = False,
    log_path: Optional[Path] = None,
    tag: str = "",
    step_offset: int = 0,
) -> tuple[ToyPolicy, TrainingLog]:
    """Run ``cfg.epochs`` passes of single-step GRPO updates over ``dataset``.

    ``dataset`` is a sequence of records (visited in a fresh random order each
    epoch) or an object with ``epoch_stream(epoch, rng)`` yielding records.
    Returns the updated policy; the input policy object is left untouched.
    """
    if hasattr(dataset, "__len__") and len(dataset) == 0:
        raise ValueError("training dataset is empty")
    training_log = TrainingLog()
    step = step_offset
    total = cfg.epochs * len(dataset) if hasattr(dataset, "__len__") else getattr(dataset, "steps_per_epoch", 0) * cfg.epochs
    current = policy
    for epoch in range(cfg.epochs):
        epoch_rng = rng.spawn("epoch", epoch)
        old = current
        for i, record in enumerate(_epoch_records(dataset, epoch, epoch_rng.spawn("order"))):
            if cfg.refresh_old == "step":
                old = current
            group = rollout(record, old, ref_policy, cfg, reward_cfg, epoch_rng.spawn("rollout", i), tmr)
            lr = cfg.lr_at(step - step_offset, total)
            if lr != 0.0:
                loss, g = nk.value_and_grad(lambda p: grpo_loss(group, current, p, cfg), current.params)
                current = current.with_params(current.params.step(g, lr))
            else:
                loss = nk.value_of(grpo_loss(group, current, current.params, cfg))
            n = len(group.completions)
            row = {
                "stage": tag,
                "epoch": epoch,
                "step": step,
                "query_id": record.id,
                "task": record.kind.value,
                "mean_reward": float(np.mean(group.rewards)),
                "loss": float(loss),
                "format_rate": sum(c.parsed is not None for c in group.completions) / n,
                "mean_len": float(np.mean([c.length_tokens for c in group.completions])),
            }
            if group.w_seq is not None:
                row["tmr_gap"] = group.w_seq - group.w_rand
            training_log.append(row, log_path)
            step += 1
        log.info("%s epoch %d: mean reward %.4f", tag or "grpo", epoch, training_log.epoch_means("mean_reward")[-1])
    return current, training_log
