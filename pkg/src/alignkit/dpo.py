"""Diffusion preference loss on noise-prediction errors and the generator finetuning loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import numkit as nk
from .diffusion import DiffusionSchedule, ToyGenerator, predict_noise, q_sample
from .numkit import ParamVector, Rng


class Provenance(str, Enum):
    INITIAL = "initial_C"
    REFRESHED = "refreshed_C_hat"


@dataclass(frozen=True)
class WinLosePair:
    winner: tuple[float, ...]
    loser: tuple[float, ...]
    prompt_id: str
    provenance: Provenance = Provenance.INITIAL

    def __post_init__(self) -> None:
        object.__setattr__(self, "winner", tuple(float(v) for v in self.winner))
        object.__setattr__(self, "loser", tuple(float(v) for v in self.loser))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if len(self.winner) != len(self.loser):
            raise ValueError("winner and loser latents differ in dimension")
        if self.winner == self.loser:
            raise ValueError("winner and loser must be distinct samples")

    def swapped(self) -> WinLosePair:
        return WinLosePair(self.loser, self.winner, self.prompt_id, self.provenance)

    def to_json(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "winner": list(self.winner),
            "loser": list(self.loser),
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> WinLosePair:
        return cls(tuple(obj["winner"]), tuple(obj["loser"]), str(obj["prompt_id"]), Provenance(obj["provenance"]))


def save_pairs(path: Path, pairs: Iterable[WinLosePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_pairs(path: Path) -> list[WinLosePair]:
    with open(path, encoding="utf-8") as fh:
        return [WinLosePair.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class DpoConfig:
    weight_const: float = 1.0
    learning_rate: float = 0.01
    steps: int = 200
    minibatch: int = 8
    # optional timestep weighting hook w(t, schedule); replaces weight_const when set
    weight_fn: Optional[Callable[[int, DiffusionSchedule], float]] = None

    def __post_init__(self) -> None:
        if not self.weight_const > 0:
            raise ValueError("weight_const must be positive")
        if self.minibatch < 1 or self.steps < 0:
            raise ValueError("minibatch must be >= 1 and steps >= 0")

    def weight(self, t: int, schedule: DiffusionSchedule) -> float:
        if self.weight_fn is None:
            return self.weight_const
        w = float(self.weight_fn(t, schedule))
        if not w > 0:
            raise ValueError(f"timestep weight must be positive, got {w}")
        return w


def _sq_err(eps, pred) -> object:
    return nk.vsum([(e - p) * (e - p) for e, p in zip(eps, pred)])


def inner_margin(gen_theta: ToyGenerator, gen_ref: ToyGenerator, pair: WinLosePair, schedule: DiffusionSchedule,
                 t: int, eps_w, eps_l, params: Optional[ParamVector] = None):
    """(err_theta(w) - err_ref(w)) - (err_theta(l) - err_ref(l)); negative when theta favours the winner."""
    d = gen_theta.config.latent_dim
    if len(pair.winner) != d or len(eps_w) != d or len(eps_l) != d:
        raise ValueError(f"pair and noise must have dimension {d}")
    if gen_ref.config.latent_dim != d:
        raise ValueError("reference generator has a different latent dimension")
    xw = q_sample(schedule, pair.winner, t, eps_w)
    xl = q_sample(schedule, pair.loser, t, eps_l)
    ref_w = float(_sq_err(eps_w, predict_noise(gen_ref, xw, t, schedule)))
    ref_l = float(_sq_err(eps_l, predict_noise(gen_ref, xl, t, schedule)))
    th_w = _sq_err(eps_w, predict_noise(gen_theta, xw, t, schedule, params))
    th_l = _sq_err(eps_l, predict_noise(gen_theta, xl, t, schedule, params))
    return (th_w - ref_w) - (th_l - ref_l)


def dpo_loss(gen_theta: ToyGenerator, gen_ref: ToyGenerator, pair: WinLosePair, schedule: DiffusionSchedule,
             t: int, eps_w, eps_l, cfg: DpoConfig, params: Optional[ParamVector] = None):
    """-log sigmoid(-w * inner) = softplus(w * inner)."""
    inner = inner_margin(gen_theta, gen_ref, pair, schedule, t, eps_w, eps_l, params)
    return nk.softplus(cfg.weight(t, schedule) * inner)


@dataclass
class DpoTrace:
    losses: list[float]
    margins: list[float]


def dpo_finetune(gen_theta: ToyGenerator, gen_ref: ToyGenerator, pairs: Sequence[WinLosePair],
                 schedule: DiffusionSchedule, cfg: DpoConfig, rng: Rng) -> tuple[ToyGenerator, DpoTrace]:
    """Minibatch gradient descent on the mean preference loss; ``gen_ref`` is never modified.

    Each pair in a minibatch gets one shared timestep and independent noise
    for its winner and loser branches.
    """
    if not pairs:
        raise ValueError("no preference pairs to train on")
    d = gen_theta.config.latent_dim
    current = gen_theta
    losses, margins = [], []
    for step in range(cfg.steps):
        r = rng.spawn("step", step)
        batch = []
        for k in range(cfg.minibatch):
            rk = r.spawn(k)
            pair = pairs[rk.integers(0, len(pairs))]
            t = rk.integers(0, schedule.steps)
            batch.append((pair, t, rk.spawn("w").normal(d), rk.spawn("l").normal(d)))
        inv = 1.0 / len(batch)
        step_margins: list[float] = []

        def objective(p):
            terms = []
            for pair, t, ew, el in batch:
                inner = inner_margin(current, gen_ref, pair, schedule, t, ew, el, p)
                step_margins.append(nk.value_of(inner))
                terms.append(nk.softplus(cfg.weight(t, schedule) * inner))
            return nk.vsum(terms) * inv

        loss, g = nk.value_and_grad(objective, current.params)
        if not math.isfinite(loss):
            raise nk.NonFiniteError(f"preference loss became non-finite at step {step}")
        if cfg.learning_rate != 0.0:
            current = current.with_params(current.params.step(g, cfg.learning_rate))
        losses.append(float(loss))
        margins.append(float(np.mean(step_margins)))
    return current, DpoTrace(losses, margins)


def mean_implicit_margin(gen_theta: ToyGenerator, gen_ref: ToyGenerator, pairs: Sequence[WinLosePair],
                         schedule: DiffusionSchedule, rng: Rng, draws: int = 4) -> float:
    """Average inner margin over pairs and seeded (t, noise) draws, at fixed parameters.

    Noise is tied to each latent rather than to its role, so exchanging
    winner and loser negates the result exactly.
    """
    d = gen_theta.config.latent_dim
    vals = []
    for i, pair in enumerate(pairs):
        kw, kl = ("lo", "hi") if pair.winner < pair.loser else ("hi", "lo")
        for k in range(draws):
            r = rng.spawn(i, k)
            t = r.integers(0, schedule.steps)
            vals.append(inner_margin(gen_theta, gen_ref, pair, schedule, t, r.spawn(kw).normal(d), r.spawn(kl).normal(d)))
    return float(np.mean(vals))
