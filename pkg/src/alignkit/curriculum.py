"""Three-stage training pipeline: image warm-up, task-mix GRPO, alternating judge/generator finetuning."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .config import StagePlan
from .data import Decoder, QualityOracle
from .diffusion import DiffusionSchedule, ToyGenerator, generate_batch, pretrain_generator
from .dpo import WinLosePair, dpo_finetune
from .grpo import TrainingLog, train_stage
from .metrics import PairEvalRecord
from .numkit import Rng
from .policy import PolicyInput, ToyPolicy, answer_prob_sequential_vs_shuffled
from .records import TIE, AnnotationRecord, Choice, TaskKind
from .rewards import RewardConfig
from .tournament import CandidatePool, Judge, refresh_pairs, run_tournament

log = logging.getLogger(__name__)


class TaskMix:
    """Weighted per-step sampling over task datasets.

    Each step first draws a task kind with probability proportional to its
    weight, then a record of that kind uniformly.  Tied pair records carry no
    preference signal and are dropped from the stream.
    """

    def __init__(self, datasets: Mapping[TaskKind, Sequence[AnnotationRecord]], weights: Mapping[TaskKind, float],
                 steps_per_epoch: int | None = None) -> None:
        self.datasets: dict[TaskKind, list[AnnotationRecord]] = {}
        self.weights: dict[TaskKind, float] = {}
        for kind, w in weights.items():
            kind = TaskKind(kind)
            if w < 0:
                raise ValueError(f"negative mix weight for {kind.value}")
            if w == 0:
                continue
            if kind not in datasets:
                raise ValueError(f"mix names {kind.value} but no dataset was supplied")
            records = [r for r in datasets[kind] if not (kind is TaskKind.PAIR and r.label == TIE)]
            if not records:
                raise ValueError(f"dataset for {kind.value} is empty")
            self.datasets[kind] = records
            self.weights[kind] = float(w)
        if not self.weights:
            raise ValueError("task mix has no positive weights")
        self.kinds = list(self.weights)
        total = sum(self.weights.values())
        self.probs = [self.weights[k] / total for k in self.kinds]
        self.steps_per_epoch = steps_per_epoch or sum(len(v) for v in self.datasets.values())

    def draw(self, rng: Rng) -> AnnotationRecord:
        kind = self.kinds[rng.categorical(self.probs)]
        records = self.datasets[kind]
        return records[rng.integers(0, len(records))]

    def epoch_stream(self, epoch: int, rng: Rng) -> Iterator[AnnotationRecord]:
        for _ in range(self.steps_per_epoch):
            yield self.draw(rng)


def stage1_reward(plan: StagePlan) -> RewardConfig:
    # the warm-up scores format and accuracy only; temporal and length terms start in stage 2
    return dataclasses.replace(plan.stage1.reward, length_control=False)


def run_stage1(plan: StagePlan, policy_init: ToyPolicy, dataset: Sequence[AnnotationRecord], rng: Rng,
               log_path: Optional[Path] = None) -> tuple[ToyPolicy, TrainingLog]:
    """Image-score warm-up; with the warm-up ablated the input policy is returned as is."""
    if not plan.ablations.warmup:
        return policy_init, TrainingLog()
    if not dataset:
        raise ValueError("stage 1 needs a non-empty image-score dataset")
    if any(r.kind is not TaskKind.IMAGE_SCORE for r in dataset):
        raise ValueError("stage 1 trains on image-score records only")
    return train_stage(dataset, policy_init, policy_init, plan.stage1.grpo, stage1_reward(plan), rng.spawn("stage1"),
                       tmr=False, log_path=log_path, tag="stage1")


def stage2_reward(plan: StagePlan) -> RewardConfig:
    return dataclasses.replace(plan.stage2.reward, length_control=plan.ablations.lcr)


def run_stage2(plan: StagePlan, policy: ToyPolicy, datasets: Mapping[TaskKind, Sequence[AnnotationRecord]],
               rng: Rng, log_path: Optional[Path] = None, step_offset: int = 0) -> tuple[ToyPolicy, TrainingLog]:
    """Interleaved GRPO over the weighted task mix, regularized toward the stage input."""
    weights = {TaskKind(k): w for k, w in plan.stage2.mix.items()}
    mix = TaskMix(datasets, weights, plan.stage2.steps_per_epoch)
    return train_stage(mix, policy, policy, plan.stage2.grpo, stage2_reward(plan), rng.spawn("stage2"),
                       tmr=plan.ablations.tmr, log_path=log_path, tag="stage2", step_offset=step_offset)


def policy_judge(policy: ToyPolicy, decoder: Decoder, prompts: Mapping[str, np.ndarray]) -> Judge:
    """Greedy comparison head on noise-free decodings of two latents."""

    def judge(a, b, prompt_id: str) -> Choice:
        p = prompts[prompt_id]
        inp = PolicyInput(TaskKind.PAIR, (decoder.video(a, p), decoder.video(b, p)))
        return policy.predict_choice(inp)

    return judge


def make_prompts(n: int, prompt_dim: int, rng: Rng) -> dict[str, np.ndarray]:
    return {f"prompt-{i:03d}": rng.spawn("prompt", i).normal(prompt_dim) for i in range(n)}


def generate_pools(gen: ToyGenerator, schedule: DiffusionSchedule, prompts: Mapping[str, np.ndarray], size: int,
                   rng: Rng) -> list[CandidatePool]:
    pools = []
    for pid in prompts:
        xs = generate_batch(gen, schedule, [rng.spawn(pid, k) for k in range(size)])
        pools.append(CandidatePool(pid, [tuple(x) for x in xs]))
    return pools


def pairs_to_records(pairs: Sequence[WinLosePair], decoder: Decoder, prompts: Mapping[str, np.ndarray], rng: Rng,
                     tag: str) -> list[AnnotationRecord]:
    """Judge-training records from mined pairs; the winner's A/B slot is randomized."""
    records = []
    for i, pair in enumerate(pairs):
        r = rng.spawn(i)
        p = prompts[pair.prompt_id]
        flip = r.random() < 0.5
        a, b = (pair.loser, pair.winner) if flip else (pair.winner, pair.loser)
        records.append(AnnotationRecord(
            f"{tag}-{i:05d}", TaskKind.PAIR, decoder.video(a, p, r.spawn("a")),
            video_b=decoder.video(b, p, r.spawn("b")), label="B" if flip else "A",
        ))
    return records


@dataclass
class RoundMetrics:
    round: int
    initial_pairs: int
    refreshed_pairs: int
    refresh_warnings: int
    final_pairs: int
    dpo_loss_first: float
    dpo_loss_last: float
    win_rate_vs_previous: Optional[float] = None
    win_rate_vs_start: Optional[float] = None


@dataclass
class Stage3Result:
    generator: ToyGenerator
    judge: ToyPolicy
    generations: list[ToyGenerator]
    rounds: list[RoundMetrics]
    prompts: dict[str, np.ndarray]
    audit: list[dict] = field(default_factory=list)


WinRate = Callable[[ToyGenerator, ToyGenerator], float]


def run_stage3(plan: StagePlan, judge: ToyPolicy, generator: ToyGenerator, decoder: Decoder,
               pair_records: Sequence[AnnotationRecord], rng: Rng, win_rate: Optional[WinRate] = None,
               log_path: Optional[Path] = None) -> Stage3Result:
    """Alternate pair mining, generator preference finetuning and judge refreshing.

    Per round: pools from G -> tournament pairs C -> DPO gives G'; with unified
    finetuning also: pools from G' -> refreshed pairs C_hat -> judge GRPO on
    C_hat plus the original pair data gives D' -> pairs re-mined by D' from the
    G' pools -> DPO gives G''.  Without it the round ends at G'.  ``win_rate``
    is an evaluation callback and never influences training.
    """
    s3 = plan.stage3
    rng = rng.spawn("stage3")
    prompts = make_prompts(s3.prompts, plan.world.prompt_dim, rng)
    base_pairs = [r for r in pair_records if r.kind is TaskKind.PAIR and r.label != TIE]
    current_gen, current_judge = generator, judge
    generations = [generator]
    rounds, audit = [], []
    step = 0
    for rd in range(s3.rounds):
        rr = rng.spawn("round", rd)
        start_gen = current_gen
        pools = generate_pools(current_gen, s3.schedule, prompts, s3.pool_size, rr.spawn("pools"))
        judge_fn = policy_judge(current_judge, decoder, prompts)
        results = [run_tournament(p, judge_fn) for p in pools]
        initial = [res.pair for res in results]
        for res in results:
            audit.extend(dict(row, round=rd, phase="initial") for row in res.audit)
        next_gen, trace = dpo_finetune(current_gen, current_gen.copy(), initial, s3.schedule, s3.dpo, rr.spawn("dpo1"))
        refreshed: list[WinLosePair] = []
        warnings = 0
        final_pairs = len(initial)
        losses = list(trace.losses)
        if plan.ablations.uf:
            new_pools = generate_pools(next_gen, s3.schedule, prompts, s3.pool_size, rr.spawn("regen"))
            for pool in new_pools:
                pairs, warn = refresh_pairs(pool, initial, judge_fn)
                refreshed.extend(pairs)
                warnings += warn
            judge_data = pairs_to_records(refreshed, decoder, prompts, rr.spawn("present"), f"refresh-{rd}") + base_pairs
            current_judge, _ = train_stage(judge_data, current_judge, current_judge, s3.judge_grpo, s3.judge_reward,
                                           rr.spawn("judge"), tmr=False, log_path=log_path, tag=f"stage3-judge-{rd}",
                                           step_offset=step)
            step += s3.judge_grpo.epochs * len(judge_data)
            judge_fn = policy_judge(current_judge, decoder, prompts)
            remined = []
            for pool in new_pools:
                res = run_tournament(pool, judge_fn)
                remined.append(res.pair)
                audit.extend(dict(row, round=rd, phase="remined") for row in res.audit)
            final_pairs = len(remined)
            next_gen, trace2 = dpo_finetune(next_gen, next_gen.copy(), remined, s3.schedule, s3.dpo, rr.spawn("dpo2"))
            losses += trace2.losses
        current_gen = next_gen
        generations.append(current_gen)
        metrics = RoundMetrics(rd, len(initial), len(refreshed), warnings, final_pairs,
                               losses[0] if losses else float("nan"), losses[-1] if losses else float("nan"))
        if win_rate is not None:
            metrics.win_rate_vs_previous = win_rate(current_gen, start_gen)
            metrics.win_rate_vs_start = win_rate(current_gen, generator)
        rounds.append(metrics)
        log.info("stage3 round %d: %s", rd, metrics)
    return Stage3Result(current_gen, current_judge, generations, rounds, prompts, audit)


def pretrain_for_world(plan: StagePlan, rng: Rng) -> ToyGenerator:
    """Generator fit to the world's standard-normal latent prior."""
    s3 = plan.stage3
    gen = ToyGenerator.initial(s3.generator, rng.spawn("generator-init"))
    gen, _ = pretrain_generator(gen, lambda n, r: r.normal((n, s3.generator.latent_dim)), s3.schedule,
                                rng.spawn("pretrain"), s3.pretrain_steps, s3.pretrain_batch, s3.pretrain_lr)
    return gen


# ---- evaluation helpers (may read hidden quality; never called by the trainers) ----

def oracle_win_rate(gen_new: ToyGenerator, gen_old: ToyGenerator, schedule: DiffusionSchedule,
                    oracle: QualityOracle, prompts: Mapping[str, np.ndarray], rng: Rng, n: int = 1000) -> float:
    """P(new sample beats an independent old sample for the same prompt) under hidden overall quality; ties count 1/2."""
    pids = list(prompts)
    xa = generate_batch(gen_new, schedule, [rng.spawn("new", i) for i in range(n)])
    xb = generate_batch(gen_old, schedule, [rng.spawn("old", i) for i in range(n)])
    score = 0.0
    for i in range(n):
        p = prompts[pids[i % len(pids)]]
        qa, qb = oracle.overall(xa[i], p), oracle.overall(xb[i], p)
        score += 1.0 if qa > qb else 0.5 if qa == qb else 0.0
    return score / n


def tmr_gap(policy: ToyPolicy, records: Sequence[AnnotationRecord], rng: Rng, n_shuffles: int = 4,
            tolerance: float = 0.1) -> float:
    """Mean (w_seq - w_rand) over single-video records with seeded shuffles."""
    gaps = []
    for r in records:
        if not r.kind.single_video:
            continue
        w_seq, w_rand = answer_prob_sequential_vs_shuffled(policy, PolicyInput.from_record(r), r.target,
                                                           rng.spawn(r.id), n_shuffles, tolerance)
        gaps.append(w_seq - w_rand)
    if not gaps:
        raise ValueError("no single-video records to probe")
    return float(np.mean(gaps))


def length_in_range_rate(policy: ToyPolicy, records: Sequence[AnnotationRecord], rng: Rng,
                         reward: Optional[RewardConfig] = None) -> float:
    """Share of sampled completions (one per record) whose proxy length lies strictly inside (l_min, l_max)."""
    reward = reward or RewardConfig()
    hits = 0
    for r in records:
        c, _ = policy.sample(PolicyInput.from_record(r), rng.spawn(r.id))
        hits += reward.l_min < c.length_tokens < reward.l_max
    return hits / len(records)


def format_rate(policy: ToyPolicy, records: Sequence[AnnotationRecord], rng: Rng) -> float:
    ok = 0
    for r in records:
        c, _ = policy.sample(PolicyInput.from_record(r), rng.spawn(r.id))
        ok += c.parsed is not None
    return ok / len(records)


def pair_eval_records(policy: ToyPolicy, records: Sequence[AnnotationRecord]) -> list[PairEvalRecord]:
    """Judge verdicts plus per-video overall scores (mean of the multi-dimension head)."""
    out = []
    for r in records:
        if r.kind is not TaskKind.PAIR:
            continue
        choice = policy.predict_choice(PolicyInput.from_record(r)).value
        sa = float(np.mean(policy.predict_scores(PolicyInput(TaskKind.VIDEO_MULTIDIM, (r.video,)))))
        sb = float(np.mean(policy.predict_scores(PolicyInput(TaskKind.VIDEO_MULTIDIM, (r.video_b,)))))
        out.append(PairEvalRecord(r.label, sa, sb, choice))
    return out
