"""Toy noise-prediction generator over world latents with a linear-beta diffusion schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import numkit as nk
from .numkit import ParamVector, Rng


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("need at least one diffusion step")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check_t(self, t: int) -> None:
        if not 0 <= t < self.steps:
            raise ValueError(f"timestep {t} outside [0, {self.steps})")


def noise(schedule: DiffusionSchedule, x0, t: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Forward process draw: (x_t, eps) with x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    schedule.check_t(t)
    x0 = np.asarray(x0, dtype=float)
    eps = rng.normal(x0.shape)
    return q_sample(schedule, x0, t, eps), eps


def q_sample(schedule: DiffusionSchedule, x0, t: int, eps) -> np.ndarray:
    schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * np.asarray(x0, dtype=float) + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 4
    hidden: int = 16
    init_scale: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def generator_layout(cfg: GeneratorConfig) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("w1", (cfg.hidden, cfg.latent_dim + 1)),
        ("b1", (cfg.hidden,)),
        ("w2", (cfg.latent_dim, cfg.hidden)),
        ("b2", (cfg.latent_dim,)),
    ]


class ToyGenerator:
    """eps_theta([x_t, t/T]) = W2 tanh(W1 [x_t, t/T] + b1) + b2."""

    def __init__(self, config: GeneratorConfig, params: ParamVector) -> None:
        self.config = config
        self.params = params

    @classmethod
    def initial(cls, config: GeneratorConfig, rng: Optional[Rng] = None) -> ToyGenerator:
        pv = ParamVector.zeros(generator_layout(config))
        if rng is not None and config.init_scale > 0:
            for name in ("w1", "w2"):
                pv.set_segment(name, rng.normal(pv.spec(name).shape, config.init_scale))
        elif rng is not None:
            # hidden weights must be non-zero for training to move the output layer usefully
            pv.set_segment("w1", rng.normal(pv.spec("w1").shape, 1.0 / math.sqrt(config.latent_dim + 1)))
        return cls(config, pv)

    def with_params(self, params: ParamVector) -> ToyGenerator:
        return ToyGenerator(self.config, params)

    def copy(self) -> ToyGenerator:
        return ToyGenerator(self.config, self.params.copy())

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        pv = self.params
        return (pv.array("w1"), pv.array("b1"), pv.array("w2"), pv.array("b2"))


def predict_noise(gen: ToyGenerator, x_t: Sequence, t: int, schedule: DiffusionSchedule,
                  params: Optional[ParamVector] = None) -> list:
    """Differentiable single-sample noise prediction (floats or tape variables)."""
    cfg = gen.config
    if len(x_t) != cfg.latent_dim:
        raise ValueError(f"latent has dimension {len(x_t)}, generator expects {cfg.latent_dim}")
    schedule.check_t(t)
    pv = gen.params if params is None else params
    inp = [float(v) for v in x_t] + [t / schedule.steps]
    hidden = [nk.tanh(nk.dot(w, inp) + b) for w, b in zip(pv.rows("w1"), pv.segment("b1"))]
    return [nk.dot(w, hidden) + b for w, b in zip(pv.rows("w2"), pv.segment("b2"))]


def predict_noise_batch(gen: ToyGenerator, x_t: np.ndarray, t, schedule: DiffusionSchedule) -> np.ndarray:
    """Vectorized float forward pass; ``t`` is a scalar or one timestep per row."""
    w1, b1, w2, b2 = gen.arrays()
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    tt = np.broadcast_to(np.asarray(t, dtype=float), (x_t.shape[0],)) / schedule.steps
    h = np.tanh(np.column_stack([x_t, tt]) @ w1.T + b1)
    return h @ w2.T + b2


def generate_batch(gen: ToyGenerator, schedule: DiffusionSchedule, rngs: Sequence[Rng]) -> np.ndarray:
    """Ancestral sampling, one row per rng; row i depends only on ``rngs[i]``."""
    d = gen.config.latent_dim
    n = len(rngs)
    x = np.array([r.normal(d) for r in rngs]).reshape(n, d)
    betas, alphas, ab = schedule.betas, schedule.alphas, schedule.alpha_bar
    for t in range(schedule.steps - 1, -1, -1):
        eps = predict_noise_batch(gen, x, t, schedule)
        mean = (x - betas[t] / math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(alphas[t])
        if t > 0:
            sigma = math.sqrt(betas[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t]))
            z = np.array([r.normal(d) for r in rngs]).reshape(n, d)
            x = mean + sigma * z
        else:
            x = mean
    return x


def generate(gen: ToyGenerator, schedule: DiffusionSchedule, rng: Rng) -> np.ndarray:
    return generate_batch(gen, schedule, [rng])[0]


def denoising_loss(gen: ToyGenerator, x0, t: int, eps, schedule: DiffusionSchedule,
                   params: Optional[ParamVector] = None):
    """Squared error ||eps - eps_theta(x_t, t)||^2 for one sample (differentiable)."""
    x_t = q_sample(schedule, x0, t, eps)
    pred = predict_noise(gen, x_t, t, schedule, params)
    return nk.vsum([(e - p) * (e - p) for e, p in zip(eps, pred)])


def _mse_grad(gen: ToyGenerator, x_t: np.ndarray, t: np.ndarray, eps: np.ndarray,
              schedule: DiffusionSchedule) -> tuple[float, np.ndarray]:
    """Mean per-sample squared error and its gradient in ParamVector order."""
    w1, b1, w2, b2 = gen.arrays()
    n = x_t.shape[0]
    inp = np.column_stack([x_t, t / schedule.steps])
    h = np.tanh(inp @ w1.T + b1)
    resid = h @ w2.T + b2 - eps
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    g_out = 2.0 * resid / n
    g_w2 = g_out.T @ h
    g_b2 = g_out.sum(axis=0)
    g_pre = (g_out @ w2) * (1.0 - h * h)
    g_w1 = g_pre.T @ inp
    g_b1 = g_pre.sum(axis=0)
    grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}
    flat = np.concatenate([grads[s.name].ravel() for s in gen.params.layout])
    return loss, flat


def pretrain_generator(gen: ToyGenerator, sample_data, schedule: DiffusionSchedule, rng: Rng,
                       steps: int = 2000, batch: int = 64, learning_rate: float = 0.05) -> tuple[ToyGenerator, list[float]]:
    """Plain gradient descent on the denoising objective; ``sample_data(n, rng)`` returns an (n, d) array."""
    trace = []
    current = gen
    for step in range(steps):
        r = rng.spawn("step", step)
        x0 = np.asarray(sample_data(batch, r.spawn("data")), dtype=float)
        tr = r.spawn("t")
        t = np.array([tr.integers(0, schedule.steps) for _ in range(batch)], dtype=float)
        eps = r.spawn("eps").normal(x0.shape)
        ab = schedule.alpha_bar[t.astype(int)][:, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        loss, g = _mse_grad(current, x_t, t, eps, schedule)
        current = current.with_params(current.params.step(g, learning_rate))
        trace.append(loss)
    return current, trace
