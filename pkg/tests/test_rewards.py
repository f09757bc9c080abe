import itertools
from fractions import Fraction

import numpy as np
import pytest

from alignkit.records import AnnotationRecord, Choice, SyntheticVideo, TaskKind, YesNo
from alignkit.rewards import (
    Completion,
    MalformedReason,
    MultiScore,
    ParsedAnswer,
    RewardConfig,
    Score,
    format_reward,
    length_reward,
    multidim_reward,
    parse_completion,
    preference_reward,
    render_completion,
    score_reward,
    temporal_reward,
    total_reward,
)

GRID = np.round(np.arange(0, 101) / 100.0, 2)
CFG = RewardConfig()
VIDEO = SyntheticVideo.from_lists([[0.0, 1.0], [1.0, 0.0]])


def _text(body, think="look closely"):
    return f"<think>{think}</think><answer>{body}</answer>"


def _completion(body, task, pad_to=None):
    if pad_to is None:
        return Completion.from_text(_text(body), task)
    # four tag tokens plus the one-token body when every piece is space separated
    filler = " ".join(["w"] * (pad_to - 5))
    return Completion.from_text(f"<think> {filler} </think> <answer> {body} </answer>", task)


class TestParse:
    def test_score(self):
        parsed = parse_completion("<think>blurry edges</think><answer>0.62</answer>", TaskKind.IMAGE_SCORE)
        assert parsed == ParsedAnswer("blurry edges", Score(0.62))

    def test_order_violation(self):
        out = parse_completion("<answer>0.5</answer><think>x</think>", TaskKind.IMAGE_SCORE)
        assert out.reason is MalformedReason.ORDER_VIOLATION

    def test_choice(self):
        assert parse_completion("<think>t</think><answer>video B</answer>", TaskKind.PAIR).payload is Choice.B
        assert parse_completion("<think>t</think><answer> VIDEO a </answer>", TaskKind.PAIR).payload is Choice.A

    def test_yes_no_case_insensitive(self):
        assert parse_completion(_text("Yes"), TaskKind.VQA).payload is YesNo.YES

    def test_multidim(self):
        out = parse_completion(_text("0.1, 0.5, 0.9"), TaskKind.VIDEO_MULTIDIM)
        assert out.payload == MultiScore((0.1, 0.5, 0.9))

    @pytest.mark.parametrize(
        "text,reason",
        [
            ("<think>a<answer>0.5</answer>", MalformedReason.MISSING_TAG),
            ("<think>a</think><answer>0.5</answer><answer>0.5</answer>", MalformedReason.DUPLICATE_TAG),
            ("<think>a</think><answer>high</answer>", MalformedReason.UNPARSEABLE_PAYLOAD),
            ("<think>a</think><answer>1.5</answer>", MalformedReason.UNPARSEABLE_PAYLOAD),
            ("<think>a</think>junk<answer>0.5</answer>", MalformedReason.ORDER_VIOLATION),
            ("<think>a</think><answer>0.5</answer>tail", MalformedReason.ORDER_VIOLATION),
        ],
    )
    def test_malformed_reasons(self, text, reason):
        assert parse_completion(text, TaskKind.IMAGE_SCORE).reason is reason

    def test_multidim_wrong_arity(self):
        assert parse_completion(_text("0.1 0.2"), TaskKind.VIDEO_MULTIDIM).reason is MalformedReason.UNPARSEABLE_PAYLOAD

    def test_render_round_trip(self):
        payloads = [
            (Score(0.35), TaskKind.IMAGE_SCORE),
            (MultiScore((0.0, 0.55, 1.0)), TaskKind.VIDEO_MULTIDIM),
            (Choice.A, TaskKind.PAIR),
            (Choice.B, TaskKind.PAIR),
            (YesNo.NO, TaskKind.VQA),
        ]
        for payload, task in payloads:
            assert parse_completion(render_completion(payload, "a b c"), task).payload == payload

    def test_proxy_length(self):
        c = Completion.from_text("<think> a b c </think> <answer> 0.5 </answer>", TaskKind.IMAGE_SCORE)
        assert c.length_tokens == 8


class TestFormat:
    def test_values(self):
        assert format_reward(_completion("0.5", TaskKind.IMAGE_SCORE), CFG) == 1.0
        assert format_reward(Completion.from_text("<think>a<answer>0.5</answer>", TaskKind.IMAGE_SCORE), CFG) == 0.0
        dup = Completion.from_text(_text("0.5") + "<answer>0.5</answer>", TaskKind.IMAGE_SCORE)
        assert format_reward(dup, CFG) == 0.0

    def test_weight(self):
        assert format_reward(_completion("0.5", TaskKind.IMAGE_SCORE), RewardConfig(format_weight=0.5)) == 0.5


class TestScoreRewards:
    def test_examples(self):
        assert score_reward(0.5, 0.5) == 1.0
        assert score_reward(0.2, 0.9) == pytest.approx(0.3, abs=1e-12)
        assert score_reward(0.0, 1.0) == 0.0

    def test_grid_matches_formula(self):
        p, g = np.meshgrid(GRID, GRID)
        got = np.vectorize(score_reward)(p, g)
        np.testing.assert_allclose(got, 1.0 - np.abs(p - g), rtol=0, atol=1e-12)
        np.testing.assert_array_equal(got, got.T)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            score_reward(1.2, 0.5)
        with pytest.raises(ValueError):
            score_reward(0.5, -0.1)

    def test_multidim_examples(self):
        assert multidim_reward([0.3, 0.6, 0.9], [0.3, 0.6, 0.9], [1, 1, 1]) == 1.0
        assert multidim_reward([0.5, 0.5, 0.5], [0.6, 0.4, 0.5], [1, 1, 1]) == pytest.approx(0.8, abs=1e-12)
        assert multidim_reward([0, 0, 0], [1, 1, 1], [1, 1, 1]) == -2.0

    def test_multidim_single_dim_is_score_reward(self):
        for p, g in itertools.product(GRID, GRID):
            assert multidim_reward([p], [g], [1.0]) == score_reward(p, g)

    def test_multidim_grid_matches_formula(self):
        coarse = GRID[::10]
        lam = np.array([1.0, 0.5, 2.0])
        for pred in itertools.product(coarse, repeat=3):
            gt = np.array(pred[::-1])
            expected = 1.0 - float(np.sum(lam * np.abs(np.array(pred) - gt)))
            assert abs(multidim_reward(pred, gt, lam) - expected) <= 1e-12

    def test_multidim_length_mismatch(self):
        with pytest.raises(ValueError):
            multidim_reward([0.1, 0.2], [0.1, 0.2, 0.3], [1, 1, 1])


class TestPreference:
    def test_values(self):
        assert preference_reward(Choice.A, Choice.A) == 1.0
        assert preference_reward(Choice.B, Choice.A) == 0.0
        assert preference_reward(YesNo.YES, YesNo.YES) == 1.0

    def test_kind_mismatch(self):
        with pytest.raises(ValueError):
            preference_reward(Choice.A, YesNo.YES)


class TestTemporal:
    def test_examples(self):
        assert temporal_reward(0.9, 0.5, CFG) == 0.3
        assert temporal_reward(0.4, 0.5, CFG) == 0.0
        assert temporal_reward(0.41, 0.5, CFG) == 0.3

    def test_grid(self):
        # decimal oracle: the grid points are meant as exact hundredths
        for i, j in itertools.product(range(101), range(101)):
            expected = 0.3 if Fraction(i, 100) > Fraction(4, 5) * Fraction(j, 100) else 0.0
            assert temporal_reward(GRID[i], GRID[j], CFG) == expected

    def test_exact_ties_get_nothing(self):
        assert temporal_reward(0.28, 0.35, CFG) == 0.0
        assert temporal_reward(0.56, 0.7, CFG) == 0.0


class TestLength:
    def test_examples(self):
        assert length_reward(400, CFG) == 0.1
        assert length_reward(320, CFG) == 0.0
        assert length_reward(512, CFG) == 0.0

    def test_all_lengths(self):
        for n in range(0, 1001):
            assert length_reward(n, CFG) == (0.1 if 320 < n < 512 else 0.0)

    def test_negative(self):
        with pytest.raises(ValueError):
            length_reward(-1, CFG)


class TestTotal:
    def _score_record(self, mos=0.7):
        return AnnotationRecord("s", TaskKind.NATURAL_VIDEO_SCORE, VIDEO, mos=mos)

    def test_exact_score_with_bonuses(self):
        c = _completion("0.7", TaskKind.NATURAL_VIDEO_SCORE, pad_to=400)
        assert c.length_tokens == 400
        rb = total_reward(c, self._score_record(), 0.9, 0.5, CFG)
        assert (rb.format, rb.task, rb.temporal, rb.length) == (1.0, 1.0, 0.3, 0.1)
        assert rb.total == pytest.approx(2.4, abs=1e-12)

    def test_malformed_short(self):
        c = Completion.from_text("<think>x", TaskKind.NATURAL_VIDEO_SCORE)
        assert total_reward(c, self._score_record(), 0.9, 0.5, CFG).total == 0.0

    def test_wrong_choice_no_temporal_on_pairs(self):
        rec = AnnotationRecord("p", TaskKind.PAIR, VIDEO, video_b=VIDEO, label="A")
        c = Completion.from_text("<think> " + " ".join(["w"] * 394) + " </think> <answer> video B </answer>", TaskKind.PAIR)
        assert c.length_tokens == 400
        rb = total_reward(c, rec, 0.9, 0.5, CFG)
        assert (rb.format, rb.task, rb.temporal, rb.length) == (1.0, 0.0, 0.0, 0.1)
        assert rb.total == pytest.approx(1.1, abs=1e-12)

    def test_temporal_gated_on_correctness(self):
        c = _completion("0.2", TaskKind.NATURAL_VIDEO_SCORE)
        assert total_reward(c, self._score_record(0.7), 0.9, 0.5, CFG).temporal == 0.0
        c = _completion("0.65", TaskKind.NATURAL_VIDEO_SCORE)
        assert total_reward(c, self._score_record(0.7), 0.9, 0.5, CFG).temporal == 0.3

    def test_length_control_switch(self):
        c = _completion("0.7", TaskKind.NATURAL_VIDEO_SCORE, pad_to=400)
        assert total_reward(c, self._score_record(), cfg=RewardConfig(length_control=False)).length == 0.0

    def test_total_is_component_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            mos = float(rng.uniform())
            body = f"{rng.uniform():.3f}"
            c = _completion(body, TaskKind.NATURAL_VIDEO_SCORE, pad_to=int(rng.integers(10, 700)))
            rb = total_reward(c, self._score_record(mos), float(rng.uniform()), float(rng.uniform()), CFG)
            assert rb.total == rb.format + rb.task + rb.temporal + rb.length
            assert rb.temporal in (0.0, 0.3) and rb.length in (0.0, 0.1)


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ValueError):
            RewardConfig(mu=0.0)
        with pytest.raises(ValueError):
            RewardConfig(l_min=512, l_max=320)
        with pytest.raises(ValueError):
            RewardConfig(lam=(1.0, -1.0, 1.0))
