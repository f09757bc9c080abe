"""Order-sensitive toy policy standing in for the scoring/judging VLM.

The policy encodes each video by pooling frame features with learned
per-position gains (zero gains make it exactly permutation invariant), passes
the pooled features and prompt through one tanh layer, and reads categorical
heads from the hidden state.  A completion's likelihood factorizes as

    p(valid) * p(answer | valid) * p(length bucket)

where a malformed completion replaces the answer factor by p(malformed).  The
think text is filler that carries no probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import NamedTuple, Optional, Sequence

from . import numkit as nk
from .numkit import ParamVector, Rng
from .records import MULTIDIM_DIMS, AnnotationRecord, Choice, SyntheticVideo, TaskKind, YesNo
from .rewards import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    THINK_CLOSE,
    THINK_OPEN,
    Completion,
    MultiScore,
    Payload,
    Score,
    render_payload,
)

DEFAULT_BUCKETS = (64, 128, 192, 256, 320, 384, 448, 512, 576, 640)

_FILLER = (
    "inspect", "frames", "for", "edge", "sharpness", "noise", "and", "colour",
    "then", "track", "motion", "across", "time", "compare", "texture", "detail",
)


class TemplateMismatch(ValueError):
    """A completion that the policy's renderer could not have produced."""


@dataclass
class PolicyConfig:
    frame_dim: int = 8
    prompt_dim: int = 4
    max_frames: int = 4
    hidden: int = 16
    bins: int = 21
    dims: int = MULTIDIM_DIMS
    questions: int = 2
    length_buckets: tuple[int, ...] = DEFAULT_BUCKETS
    malformed_rate: float = 0.05
    init_gain: float = 1.0
    head_scale: float = 0.01

    def __post_init__(self) -> None:
        self.length_buckets = tuple(int(b) for b in self.length_buckets)
        if self.bins < 2:
            raise ValueError("need at least two score bins")
        if len(set(self.length_buckets)) != len(self.length_buckets):
            raise ValueError("length buckets must be distinct")
        if min(self.length_buckets) < 16:
            raise ValueError("length buckets must leave room for the tag template")
        if not 0.0 < self.malformed_rate < 1.0:
            raise ValueError("malformed_rate must be in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["length_buckets"] = list(self.length_buckets)
        return d

    @property
    def bin_centers(self) -> list[float]:
        return [k / (self.bins - 1) for k in range(self.bins)]


class PolicyInput(NamedTuple):
    task: TaskKind
    videos: tuple[SyntheticVideo, ...]
    question_id: Optional[int] = None

    @classmethod
    def from_record(cls, record: AnnotationRecord) -> PolicyInput:
        return cls(record.kind, record.videos, record.question_id)

    def shuffled(self, orders: Sequence[Sequence[int]]) -> PolicyInput:
        return self._replace(videos=tuple(v.permuted(o) for v, o in zip(self.videos, orders)))


class Outcome(NamedTuple):
    valid: bool
    answer: tuple[int, ...]  # empty when malformed
    bucket: int


class Heads(NamedTuple):
    """Log-probabilities of every categorical head used by one task."""

    answer: list[list]
    length: list
    valid: list  # [log p(valid), log p(malformed)]


def layout(cfg: PolicyConfig) -> list[tuple[str, tuple[int, ...]]]:
    h = cfg.hidden
    return [
        ("pos", (cfg.max_frames, cfg.frame_dim)),
        ("w_in", (h, cfg.frame_dim + cfg.prompt_dim)),
        ("b_in", (h,)),
        ("score_w", (cfg.bins, h)),
        ("score_b", (cfg.bins,)),
        ("multi_w", (cfg.dims * cfg.bins, h)),
        ("multi_b", (cfg.dims * cfg.bins,)),
        ("choice_w", (1, h)),
        ("choice_b", (1,)),
        ("vqa_w", (2 * cfg.questions, h)),
        ("vqa_b", (2 * cfg.questions,)),
        ("length_b", (len(cfg.length_buckets),)),
        ("valid_b", (2,)),
    ]


def init_params(cfg: PolicyConfig, rng: Rng) -> ParamVector:
    """Fresh policy: order-blind pooling, odd hidden layer, near-uniform heads."""
    pv = ParamVector.zeros(layout(cfg))
    fan_in = cfg.frame_dim + cfg.prompt_dim
    pv.set_segment("w_in", rng.normal(pv.spec("w_in").shape, cfg.init_gain / math.sqrt(fan_in)))
    for name in ("score_w", "multi_w", "choice_w", "vqa_w"):
        pv.set_segment(name, rng.normal(pv.spec(name).shape, cfg.head_scale))
    r = cfg.malformed_rate
    pv.set_segment("valid_b", [0.0, math.log(r / (1.0 - r))])
    return pv


def encode(cfg: PolicyConfig, pv: ParamVector, video: SyntheticVideo) -> list:
    frames = video.frames
    if video.is_image:
        pooled = list(frames[0])
    else:
        n = len(frames)
        if n > cfg.max_frames:
            raise ValueError(f"video has {n} frames, policy supports {cfg.max_frames}")
        pos = pv.rows("pos")
        inv = 1.0 / n
        pooled = []
        for j in range(cfg.frame_dim):
            col = [f[j] for f in frames]
            # fsum is exact, so a zero-gain policy is bit-for-bit permutation invariant
            pooled.append((math.fsum(col) + nk.dot(col, [pos[t][j] for t in range(n)])) * inv)
    prompt = list(video.prompt) if video.prompt else [0.0] * cfg.prompt_dim
    if len(prompt) != cfg.prompt_dim or len(pooled) != cfg.frame_dim:
        raise ValueError("input dimensions do not match the policy")
    x = pooled + prompt
    w_in, b_in = pv.rows("w_in"), pv.segment("b_in")
    return [nk.tanh(nk.dot(w, x) + b) for w, b in zip(w_in, b_in)]


def _linear(rows, bias, x) -> list:
    return [nk.dot(w, x) + b for w, b in zip(rows, bias)]


def heads(cfg: PolicyConfig, pv: ParamVector, inp: PolicyInput) -> Heads:
    task = inp.task
    if task is TaskKind.PAIR:
        if len(inp.videos) != 2:
            raise ValueError("pair task needs two videos")
        # logit(A) - logit(B) is a linear read of the feature difference, so the
        # head compares the two encodings instead of learning each slot separately
        diff = [a - b for a, b in zip(encode(cfg, pv, inp.videos[0]), encode(cfg, pv, inp.videos[1]))]
        margin = _linear(pv.rows("choice_w"), pv.segment("choice_b"), diff)[0]
        answer = [nk.log_softmax([margin, 0.0])]
    else:
        h = encode(cfg, pv, inp.videos[0])
        if task in (TaskKind.IMAGE_SCORE, TaskKind.NATURAL_VIDEO_SCORE):
            answer = [nk.log_softmax(_linear(pv.rows("score_w"), pv.segment("score_b"), h))]
        elif task is TaskKind.VIDEO_MULTIDIM:
            rows, bias, b = pv.rows("multi_w"), pv.segment("multi_b"), cfg.bins
            answer = [
                nk.log_softmax(_linear(rows[d * b : (d + 1) * b], bias[d * b : (d + 1) * b], h))
                for d in range(cfg.dims)
            ]
        elif task is TaskKind.VQA:
            q = inp.question_id
            if q is None or not 0 <= q < cfg.questions:
                raise ValueError(f"unknown question id {q!r}")
            rows, bias = pv.rows("vqa_w"), pv.segment("vqa_b")
            answer = [nk.log_softmax(_linear(rows[2 * q : 2 * q + 2], bias[2 * q : 2 * q + 2], h))]
        else:
            raise ValueError(f"unknown task {task!r}")
    return Heads(answer, nk.log_softmax(pv.segment("length_b")), nk.log_softmax(pv.segment("valid_b")))


def outcome_logp(hd: Heads, outcome: Outcome):
    if outcome.valid:
        lp = hd.valid[0]
        for dim, idx in zip(hd.answer, outcome.answer):
            lp = lp + dim[idx]
    else:
        lp = hd.valid[1]
    return lp + hd.length[outcome.bucket]


def answer_payload(cfg: PolicyConfig, task: TaskKind, answer: Sequence[int]) -> Payload:
    centers = cfg.bin_centers
    if task in (TaskKind.IMAGE_SCORE, TaskKind.NATURAL_VIDEO_SCORE):
        return Score(centers[answer[0]])
    if task is TaskKind.VIDEO_MULTIDIM:
        return MultiScore(tuple(centers[i] for i in answer))
    if task is TaskKind.PAIR:
        return (Choice.A, Choice.B)[answer[0]]
    if task is TaskKind.VQA:
        return (YesNo.YES, YesNo.NO)[answer[0]]
    raise ValueError(f"unknown task {task!r}")


def payload_answer(cfg: PolicyConfig, task: TaskKind, payload: Payload) -> tuple[int, ...]:
    def bin_of(v: float) -> int:
        k = round(v * (cfg.bins - 1))
        if k / (cfg.bins - 1) != v:
            raise TemplateMismatch(f"score {v!r} is not a bin center")
        return k

    if task in (TaskKind.IMAGE_SCORE, TaskKind.NATURAL_VIDEO_SCORE) and isinstance(payload, Score):
        return (bin_of(payload.value),)
    if task is TaskKind.VIDEO_MULTIDIM and isinstance(payload, MultiScore):
        return tuple(bin_of(v) for v in payload.values)
    if task is TaskKind.PAIR and isinstance(payload, Choice):
        return (0 if payload is Choice.A else 1,)
    if task is TaskKind.VQA and isinstance(payload, YesNo):
        return (0 if payload is YesNo.YES else 1,)
    raise TemplateMismatch(f"{payload!r} is not an answer for {task.value}")


def _filler(n: int) -> list[str]:
    return [_FILLER[i % len(_FILLER)] for i in range(n)]


def render(cfg: PolicyConfig, task: TaskKind, outcome: Outcome, breakage: int = 0) -> str:
    """Template text with exactly ``length_buckets[bucket]`` whitespace tokens.

    ``breakage`` selects how a malformed completion is broken: 0 drops the
    closing think tag, 1 swaps the blocks, 2 repeats the answer block, 3 puts
    an unparseable answer.
    """
    length = cfg.length_buckets[outcome.bucket]
    if outcome.valid:
        body = render_payload(answer_payload(cfg, task, outcome.answer)).split()
        fill = length - 4 - len(body)
        return " ".join([THINK_OPEN, *_filler(fill), THINK_CLOSE, ANSWER_OPEN, *body, ANSWER_CLOSE])
    body = ["unsure"]
    if breakage == 0:
        tokens = [THINK_OPEN, *_filler(length - 3 - len(body)), ANSWER_OPEN, *body, ANSWER_CLOSE]
    elif breakage == 1:
        tokens = [ANSWER_OPEN, *body, ANSWER_CLOSE, THINK_OPEN, *_filler(length - 4 - len(body)), THINK_CLOSE]
    elif breakage == 2:
        block = [ANSWER_OPEN, *body, ANSWER_CLOSE]
        tokens = [THINK_OPEN, *_filler(length - 2 - 2 * len(block)), THINK_CLOSE, *block, *block]
    else:
        tokens = [THINK_OPEN, *_filler(length - 4 - len(body)), THINK_CLOSE, ANSWER_OPEN, *body, ANSWER_CLOSE]
    return " ".join(tokens)


class ToyPolicy:
    """Configuration plus one immutable parameter snapshot."""

    def __init__(self, config: PolicyConfig, params: ParamVector) -> None:
        self.config = config
        self.params = params

    @classmethod
    def initial(cls, config: PolicyConfig, rng: Rng) -> ToyPolicy:
        return cls(config, init_params(config, rng))

    def with_params(self, params: ParamVector) -> ToyPolicy:
        return ToyPolicy(self.config, params)

    def heads(self, inp: PolicyInput, params: Optional[ParamVector] = None) -> Heads:
        return heads(self.config, self.params if params is None else params, inp)

    def outcome_of(self, completion: Completion, task: TaskKind) -> Outcome:
        try:
            bucket = self.config.length_buckets.index(completion.length_tokens)
        except ValueError:
            raise TemplateMismatch(f"length {completion.length_tokens} is not a length bucket") from None
        if completion.parsed is None:
            return Outcome(False, (), bucket)
        return Outcome(True, payload_answer(self.config, task, completion.parsed.payload), bucket)

    def sample_outcome(self, hd: Heads, rng: Rng) -> Outcome:
        valid = rng.categorical([math.exp(v) for v in hd.valid]) == 0
        answer = tuple(rng.categorical([math.exp(v) for v in dim]) for dim in hd.answer) if valid else ()
        bucket = rng.categorical([math.exp(v) for v in hd.length])
        return Outcome(valid, answer, bucket)

    def sample_from(self, hd: Heads, task: TaskKind, rng: Rng) -> tuple[Completion, float, Outcome]:
        outcome = self.sample_outcome(hd, rng)
        breakage = 0 if outcome.valid else rng.integers(0, 4)
        text = render(self.config, task, outcome, breakage)
        return Completion.from_text(text, task, self.config.dims), outcome_logp(hd, outcome), outcome

    def sample(self, inp: PolicyInput, rng: Rng) -> tuple[Completion, float]:
        completion, logp, _ = self.sample_from(self.heads(inp), inp.task, rng)
        return completion, logp

    def logp(self, inp: PolicyInput, completion: Completion, params: Optional[ParamVector] = None):
        return outcome_logp(self.heads(inp, params), self.outcome_of(completion, inp.task))

    def enumerate_probabilities(self, inp: PolicyInput) -> dict[Outcome, float]:
        """Exact probability of every (validity, answer, bucket) outcome."""
        hd = self.heads(inp)
        answers: list[tuple[int, ...]] = [()]
        for dim in hd.answer:
            answers = [a + (i,) for a in answers for i in range(len(dim))]
        out: dict[Outcome, float] = {}
        for b in range(len(hd.length)):
            out[Outcome(False, (), b)] = math.exp(outcome_logp(hd, Outcome(False, (), b)))
            for a in answers:
                o = Outcome(True, a, b)
                out[o] = math.exp(outcome_logp(hd, o))
        return out

    def answer_probs(self, inp: PolicyInput) -> list[list[float]]:
        return [[math.exp(v) for v in dim] for dim in self.heads(inp).answer]

    def predict_scores(self, inp: PolicyInput) -> list[float]:
        """Probability-weighted bin centre per score dimension."""
        centers = self.config.bin_centers
        return [math.fsum(p * c for p, c in zip(dim, centers)) for dim in self.answer_probs(inp)]

    def predict_choice(self, inp: PolicyInput) -> Choice:
        pa, pb = self.answer_probs(inp)[0]
        return Choice.A if pa >= pb else Choice.B

    def validity_rate(self) -> float:
        return math.exp(nk.log_softmax(self.params.segment("valid_b"))[0])

    def length_distribution(self) -> list[float]:
        return [math.exp(v) for v in nk.log_softmax(self.params.segment("length_b"))]


def correct_mass(policy: ToyPolicy, inp: PolicyInput, gt, tolerance: float) -> float:
    """Probability the answer head puts on answers counted as correct."""
    probs = policy.answer_probs(inp)
    centers = policy.config.bin_centers
    task = inp.task
    if task in (TaskKind.IMAGE_SCORE, TaskKind.NATURAL_VIDEO_SCORE):
        gts = [gt]
    elif task is TaskKind.VIDEO_MULTIDIM:
        gts = list(gt)
    else:
        idx = payload_answer(policy.config, task, gt)[0]
        return probs[0][idx]
    mass = 1.0
    for dim, g in zip(probs, gts):
        mass *= math.fsum(p for p, c in zip(dim, centers) if abs(c - g) <= tolerance + 1e-12)
    return mass


def _non_identity_permutation(n: int, rng: Rng) -> list[int]:
    while True:
        order = rng.permutation(n)
        if order != list(range(n)):
            return order


def answer_prob_sequential_vs_shuffled(
    policy: ToyPolicy,
    inp: PolicyInput,
    gt,
    rng: Rng,
    n_shuffles: int = 4,
    tolerance: float = 0.1,
) -> tuple[float, float]:
    """(w_seq, w_rand): correct-answer mass with frames in order vs. shuffled.

    ``w_rand`` averages over ``n_shuffles`` uniform non-identity frame
    permutations.  Single-frame images cannot be shuffled, so for them the two
    probabilities coincide.
    """
    if n_shuffles < 1:
        raise ValueError("n_shuffles must be at least 1")
    w_seq = correct_mass(policy, inp, gt, tolerance)
    if all(v.is_image for v in inp.videos):
        return w_seq, w_seq
    ws = []
    for _ in range(n_shuffles):
        orders = [
            list(range(v.n_frames)) if v.is_image else _non_identity_permutation(v.n_frames, rng)
            for v in inp.videos
        ]
        ws.append(correct_mass(policy, inp.shuffled(orders), gt, tolerance))
    if max(ws) == min(ws):
        return w_seq, ws[0]
    return w_seq, math.fsum(ws) / len(ws)
