"""Completion parsing and rule-based rewards.

A completion is well formed when it is exactly ``<think>…</think>`` followed by
``<answer>…</answer>`` (whitespace allowed between and around the blocks) and
the answer body parses for the task.  Rewards are additive:

    total = format + task + temporal + length
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

from .records import MULTIDIM_DIMS, TIE, AnnotationRecord, Choice, TaskKind, YesNo

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
_TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)


@dataclass(frozen=True)
class Score:
    value: float


@dataclass(frozen=True)
class MultiScore:
    values: tuple[float, ...]


Payload = Union[Score, MultiScore, Choice, YesNo]


class MalformedReason(str, Enum):
    MISSING_TAG = "missing tag"
    ORDER_VIOLATION = "order violation"
    DUPLICATE_TAG = "duplicate tag"
    UNPARSEABLE_PAYLOAD = "unparseable payload"


@dataclass(frozen=True)
class Malformed:
    reason: MalformedReason
    detail: str = ""


@dataclass(frozen=True)
class ParsedAnswer:
    think_text: str
    payload: Payload


@dataclass(frozen=True)
class Completion:
    raw_text: str
    parsed: Optional[ParsedAnswer]
    length_tokens: int
    malformed: Optional[Malformed] = None

    @classmethod
    def from_text(cls, raw_text: str, task: TaskKind, dims: int = MULTIDIM_DIMS) -> Completion:
        result = parse_completion(raw_text, task, dims)
        n = proxy_length(raw_text)
        if isinstance(result, Malformed):
            return cls(raw_text, None, n, result)
        return cls(raw_text, result, n)


def proxy_length(text: str) -> int:
    """Whitespace-token count standing in for a tokenizer."""
    return len(text.split())


def _parse_unit(token: str) -> Optional[float]:
    try:
        v = float(token)
    except ValueError:
        return None
    if not math.isfinite(v) or not 0.0 <= v <= 1.0:
        return None
    return v


def parse_payload(body: str, task: TaskKind, dims: int = MULTIDIM_DIMS) -> Optional[Payload]:
    text = " ".join(body.split())
    if task in (TaskKind.IMAGE_SCORE, TaskKind.NATURAL_VIDEO_SCORE):
        v = _parse_unit(text)
        return None if v is None else Score(v)
    if task is TaskKind.VIDEO_MULTIDIM:
        parts = text.replace(",", " ").split()
        if len(parts) != dims:
            return None
        values = [_parse_unit(p) for p in parts]
        if any(v is None for v in values):
            return None
        return MultiScore(tuple(values))
    low = text.lower()
    if task is TaskKind.PAIR:
        return {"video a": Choice.A, "video b": Choice.B}.get(low)
    if task is TaskKind.VQA:
        return {"yes": YesNo.YES, "no": YesNo.NO}.get(low)
    raise ValueError(f"unknown task {task!r}")


def parse_completion(raw_text: str, task: TaskKind, dims: int = MULTIDIM_DIMS) -> Union[ParsedAnswer, Malformed]:
    counts = {tag: raw_text.count(tag) for tag in _TAGS}
    missing = [t for t, c in counts.items() if c == 0]
    if missing:
        return Malformed(MalformedReason.MISSING_TAG, " ".join(missing))
    dup = [t for t, c in counts.items() if c > 1]
    if dup:
        return Malformed(MalformedReason.DUPLICATE_TAG, " ".join(dup))
    pos = [raw_text.index(t) for t in _TAGS]
    if pos != sorted(pos):
        return Malformed(MalformedReason.ORDER_VIOLATION, "tags out of order")
    t_open, t_close, a_open, a_close = pos
    outside = (
        raw_text[:t_open],
        raw_text[t_close + len(THINK_CLOSE) : a_open],
        raw_text[a_close + len(ANSWER_CLOSE) :],
    )
    if any(part.strip() for part in outside):
        return Malformed(MalformedReason.ORDER_VIOLATION, "text outside the tag blocks")
    think = raw_text[t_open + len(THINK_OPEN) : t_close].strip()
    body = raw_text[a_open + len(ANSWER_OPEN) : a_close]
    payload = parse_payload(body, task, dims)
    if payload is None:
        return Malformed(MalformedReason.UNPARSEABLE_PAYLOAD, body.strip()[:40])
    return ParsedAnswer(think, payload)


def render_payload(payload: Payload) -> str:
    if isinstance(payload, Score):
        return repr(float(payload.value))
    if isinstance(payload, MultiScore):
        return ", ".join(repr(float(v)) for v in payload.values)
    if isinstance(payload, Choice):
        return f"video {payload.value}"
    if isinstance(payload, YesNo):
        return payload.value
    raise TypeError(f"cannot render {payload!r}")


def render_completion(payload: Payload, think_text: str) -> str:
    return f"{THINK_OPEN} {think_text} {THINK_CLOSE} {ANSWER_OPEN} {render_payload(payload)} {ANSWER_CLOSE}"


@dataclass
class RewardConfig:
    alpha: float = 0.3
    mu: float = 0.8
    gamma: float = 0.1
    l_min: int = 320
    l_max: int = 512
    lam: tuple[float, ...] = (1.0, 1.0, 1.0)
    format_weight: float = 1.0
    # score answers within this distance of the label count as correct for the temporal gate
    tmr_tolerance: float = 0.1
    length_control: bool = True

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.l_min < self.l_max:
            raise ValueError("l_min must be below l_max")
        if any(v < 0 for v in self.lam):
            raise ValueError("lambda weights must be non-negative")
        self.lam = tuple(float(v) for v in self.lam)


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    task: float
    temporal: float
    length: float
    total: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "total", self.format + self.task + self.temporal + self.length)


def _check_unit(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name}={v} outside [0, 1]; normalize scores before scoring")


def format_reward(c: Completion, cfg: RewardConfig) -> float:
    return cfg.format_weight if c.parsed is not None else 0.0


def score_reward(s_pred: float, s_gt: float) -> float:
    _check_unit("s_pred", s_pred)
    _check_unit("s_gt", s_gt)
    return 1.0 - abs(s_pred - s_gt)


def multidim_reward(v_pred: Sequence[float], v_gt: Sequence[float], lam: Sequence[float]) -> float:
    if not len(v_pred) == len(v_gt) == len(lam):
        raise ValueError(f"length mismatch: {len(v_pred)}, {len(v_gt)}, {len(lam)}")
    err = 0.0
    for p, g, w in zip(v_pred, v_gt, lam):
        _check_unit("v_pred", p)
        _check_unit("v_gt", g)
        err += w * abs(p - g)
    return 1.0 - err


def preference_reward(c_pred: Union[Choice, YesNo], c_gt: Union[Choice, YesNo]) -> float:
    if type(c_pred) is not type(c_gt):
        raise ValueError(f"cannot compare {type(c_pred).__name__} with {type(c_gt).__name__}")
    return 1.0 if c_pred == c_gt else 0.0


# exact ties such as 0.28 vs 0.8 * 0.35 must not pass through float rounding
TIE_GUARD = 1e-12


def temporal_reward(w_seq: float, w_rand: float, cfg: RewardConfig) -> float:
    return cfg.alpha if w_seq - cfg.mu * w_rand > TIE_GUARD else 0.0


def length_reward(length_tokens: int, cfg: RewardConfig) -> float:
    if length_tokens < 0:
        raise ValueError("length must be non-negative")
    return cfg.gamma if cfg.l_min < length_tokens < cfg.l_max else 0.0


def task_reward(payload: Payload, record: AnnotationRecord, cfg: RewardConfig) -> float:
    gt = record.target
    kind = record.kind
    if kind in (TaskKind.IMAGE_SCORE, TaskKind.NATURAL_VIDEO_SCORE):
        return score_reward(_expect(payload, Score).value, gt)
    if kind is TaskKind.VIDEO_MULTIDIM:
        values = _expect(payload, MultiScore).values
        lam = cfg.lam if len(cfg.lam) == len(values) else (1.0,) * len(values)
        return multidim_reward(values, gt, lam)
    if kind is TaskKind.PAIR:
        if gt == TIE:
            return 0.0
        return preference_reward(_expect(payload, Choice), gt)
    return preference_reward(_expect(payload, YesNo), gt)


def _expect(payload, cls):
    if not isinstance(payload, cls):
        raise ValueError(f"expected a {cls.__name__} answer, got {payload!r}")
    return payload


def is_correct(payload: Payload, record: AnnotationRecord, tolerance: float) -> bool:
    """Whether an answer counts as correct for the temporal gate."""
    gt = record.target
    if isinstance(payload, Score):
        return abs(payload.value - gt) <= tolerance + 1e-12
    if isinstance(payload, MultiScore):
        return all(abs(p - g) <= tolerance + 1e-12 for p, g in zip(payload.values, gt))
    return payload == gt


def total_reward(
    c: Completion,
    record: AnnotationRecord,
    w_seq: Optional[float] = None,
    w_rand: Optional[float] = None,
    cfg: Optional[RewardConfig] = None,
) -> RewardBreakdown:
    """Sum of format, task, temporal and length rewards for one completion.

    The temporal bonus needs both shuffle probabilities, is limited to
    single-video tasks and, as in temporal GRPO, only goes to correct answers;
    otherwise it would be identical across a group and cancel in the advantage.
    """
    cfg = cfg or RewardConfig()
    fmt = format_reward(c, cfg)
    task = temporal = 0.0
    if c.parsed is not None:
        task = task_reward(c.parsed.payload, record, cfg)
        if (
            w_seq is not None
            and w_rand is not None
            and record.kind.single_video
            and is_correct(c.parsed.payload, record, cfg.tmr_tolerance)
        ):
            temporal = temporal_reward(w_seq, w_rand, cfg)
    length = length_reward(c.length_tokens, cfg) if cfg.length_control else 0.0
    return RewardBreakdown(fmt, task, temporal, length)
