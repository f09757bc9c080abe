"""Seeded finite-difference checks of every differentiable loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .diffusion import DiffusionSchedule, GeneratorConfig, ToyGenerator, denoising_loss
from .dpo import DpoConfig, WinLosePair, dpo_loss, inner_margin
from .grpo import GrpoConfig, grpo_loss, rollout
from .numkit import ParamVector, Rng
from .policy import PolicyConfig, ToyPolicy
from .records import TIE, AnnotationRecord, SyntheticVideo, TaskKind
from .rewards import RewardConfig

TOLERANCE = 1e-4
SMALL_POLICY = PolicyConfig(frame_dim=3, prompt_dim=2, max_frames=3, hidden=3, bins=5,
                            length_buckets=(64, 384, 640), head_scale=0.5)
SMALL_GENERATOR = GeneratorConfig(latent_dim=3, hidden=4)


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_error: float


def jitter(pv: ParamVector, rng: Rng, scale: float) -> ParamVector:
    return pv.with_values([float(v) + float(e) for v, e in zip(pv.values, rng.normal(len(pv), scale))])


def random_record(rng: Rng, cfg: PolicyConfig = SMALL_POLICY) -> AnnotationRecord:
    kind = list(TaskKind)[rng.integers(0, len(TaskKind))]
    n_frames = rng.integers(2, cfg.max_frames + 1)

    def video():
        return SyntheticVideo.from_lists(rng.normal((n_frames, cfg.frame_dim)), rng.normal(cfg.prompt_dim))

    if kind is TaskKind.IMAGE_SCORE:
        return AnnotationRecord("gc", kind, SyntheticVideo.image(rng.normal(cfg.frame_dim)), mos=float(rng.uniform()))
    if kind is TaskKind.NATURAL_VIDEO_SCORE:
        return AnnotationRecord("gc", kind, video(), mos=float(rng.uniform()))
    if kind is TaskKind.VIDEO_MULTIDIM:
        return AnnotationRecord("gc", kind, video(), mos=tuple(float(v) for v in rng.uniform(size=3)))
    if kind is TaskKind.PAIR:
        return AnnotationRecord("gc", kind, video(), video_b=video(), label=("A", "B", TIE)[rng.integers(0, 3)])
    return AnnotationRecord("gc", kind, video(), label=("yes", "no")[rng.integers(0, 2)],
                            question_id=rng.integers(0, cfg.questions))


def _near_kink(group, policy, params, delta: float, margin: float = 1e-3) -> bool:
    from .policy import PolicyInput, outcome_logp

    inp = PolicyInput.from_record(group.record)
    hd = policy.heads(inp, params)
    for c, old in zip(group.completions, group.logp_old):
        rho = math.exp(nk.value_of(outcome_logp(hd, policy.outcome_of(c, inp.task))) - old)
        if min(abs(rho - (1 - delta)), abs(rho - (1 + delta))) < margin:
            return True
    return False


def grpo_case(seed: int) -> float:
    rng = Rng(seed).spawn("grpo-case")
    cfg = GrpoConfig(group_size=2 + rng.integers(0, 7), kl_beta=float(rng.uniform(0.0, 0.5)))
    for attempt in range(20):
        r = rng.spawn(attempt)
        base = ToyPolicy.initial(SMALL_POLICY, r.spawn("init"))
        policy = base.with_params(jitter(base.params, r.spawn("theta"), 0.3))
        old = base.with_params(jitter(policy.params, r.spawn("old"), 0.05))
        ref = base.with_params(jitter(policy.params, r.spawn("ref"), 0.05))
        record = random_record(r.spawn("record"))
        group = rollout(record, old, ref, cfg, RewardConfig(), r.spawn("rollout"), tmr=bool(r.integers(0, 2)))
        if not _near_kink(group, policy, policy.params, cfg.clip_delta):
            break
    loss = lambda p: grpo_loss(group, policy, p, cfg)
    return nk.relative_error(nk.grad(loss, policy.params), nk.finite_diff(loss, policy.params))


def dpo_case(seed: int, schedule: DiffusionSchedule = DiffusionSchedule()) -> float:
    rng = Rng(seed).spawn("dpo-case")
    d = SMALL_GENERATOR.latent_dim
    for attempt in range(50):
        r = rng.spawn(attempt)
        ref = ToyGenerator.initial(SMALL_GENERATOR, r.spawn("ref"))
        ref = ref.with_params(jitter(ref.params, r.spawn("ref-jitter"), 0.5))
        theta = ref.with_params(jitter(ref.params, r.spawn("theta"), 0.2))
        pair = WinLosePair(tuple(r.normal(d)), tuple(r.normal(d)), "p")
        t = r.integers(0, schedule.steps)
        ew, el = r.normal(d), r.normal(d)
        cfg = DpoConfig(weight_const=float(r.uniform(0.5, 3.0)))
        # a saturated log-sigmoid has gradients below finite-difference resolution
        if abs(cfg.weight_const * inner_margin(theta, ref, pair, schedule, t, ew, el)) < 8.0:
            break
    loss = lambda p: dpo_loss(theta, ref, pair, schedule, t, ew, el, cfg, p)
    return nk.relative_error(nk.grad(loss, theta.params), nk.finite_diff(loss, theta.params))


def denoise_case(seed: int, schedule: DiffusionSchedule = DiffusionSchedule()) -> float:
    rng = Rng(seed).spawn("denoise-case")
    d = SMALL_GENERATOR.latent_dim
    gen = ToyGenerator.initial(SMALL_GENERATOR, rng.spawn("init"))
    gen = gen.with_params(jitter(gen.params, rng.spawn("jitter"), 0.5))
    x0, eps, t = rng.normal(d), rng.normal(d), rng.integers(0, schedule.steps)
    loss = lambda p: denoising_loss(gen, x0, t, eps, schedule, p)
    return nk.relative_error(nk.grad(loss, gen.params), nk.finite_diff(loss, gen.params))


SUITES = {"grpo": grpo_case, "dpo": dpo_case, "denoise": denoise_case}


def run_suite(name: str, seed: int, cases: int) -> SuiteResult:
    fn = SUITES[name]
    errors = [fn(int(Rng(seed).spawn(name, i).integers(0, 2**31))) for i in range(cases)]
    return SuiteResult(name, cases, float(np.max(errors)) if errors else 0.0)


def run_all(seed: int, cases: int = 100) -> list[SuiteResult]:
    return [run_suite(name, seed, cases) for name in SUITES]
