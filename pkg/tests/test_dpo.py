import math

import numpy as np
import pytest

from alignkit import numkit as nk
from alignkit.diffusion import DiffusionSchedule, GeneratorConfig, ToyGenerator
from alignkit.dpo import (
    DpoConfig,
    Provenance,
    WinLosePair,
    dpo_finetune,
    dpo_loss,
    inner_margin,
    load_pairs,
    mean_implicit_margin,
    save_pairs,
)
from alignkit.gradcheck import SMALL_GENERATOR, dpo_case, jitter
from alignkit.numkit import Rng

SCHED = DiffusionSchedule()
LN2 = math.log(2.0)


def _gen(seed, scale=0.5):
    g = ToyGenerator.initial(SMALL_GENERATOR, Rng(seed))
    return g.with_params(jitter(g.params, Rng(seed).spawn("j"), scale))


def _pair(rng, d=3, prompt="p"):
    return WinLosePair(tuple(rng.normal(d)), tuple(rng.normal(d)), prompt)


class TestLoss:
    def test_reference_anchor(self):
        rng = Rng(0)
        for i in range(100):
            ref = _gen(i)
            r = rng.spawn(i)
            loss = dpo_loss(ref, ref, _pair(r), SCHED, r.integers(0, 50), r.normal(3), r.normal(3),
                            DpoConfig(weight_const=float(r.uniform(0.1, 5))))
            assert abs(loss - LN2) < 1e-9

    def test_worked_example(self):
        # reference predicts zero noise, theta predicts (1, 0, 0) everywhere:
        # winner error drops by 1, loser error grows by 1, so inner = -2
        cfg = GeneratorConfig(latent_dim=3, hidden=2)
        ref = ToyGenerator.initial(cfg)
        pv = ref.params.copy()
        pv.set_segment("b2", [1.0, 0.0, 0.0])
        theta = ref.with_params(pv)
        pair = WinLosePair((0.2, 0.1, -0.3), (1.0, 0.5, 0.0), "p")
        eps_w, eps_l = [1.0, 0.3, -0.2], [0.0, 0.7, 0.4]
        assert inner_margin(theta, ref, pair, SCHED, 17, eps_w, eps_l) == pytest.approx(-2.0, abs=1e-12)
        loss = dpo_loss(theta, ref, pair, SCHED, 17, eps_w, eps_l, DpoConfig())
        assert loss == pytest.approx(-math.log(1 / (1 + math.exp(-2))), abs=1e-12)
        assert loss == pytest.approx(0.1269, abs=1e-4)

    def test_swap_antisymmetry(self):
        rng = Rng(1)
        for i in range(50):
            theta, ref = _gen(2 * i), _gen(2 * i + 1)
            r = rng.spawn(i)
            pair, t, ew, el = _pair(r), r.integers(0, 50), r.normal(3), r.normal(3)
            a = inner_margin(theta, ref, pair, SCHED, t, ew, el)
            b = inner_margin(theta, ref, pair.swapped(), SCHED, t, el, ew)
            assert a == -b

    def test_positive(self):
        rng = Rng(2)
        for i in range(50):
            r = rng.spawn(i)
            loss = dpo_loss(_gen(i), _gen(i + 100), _pair(r), SCHED, r.integers(0, 50), r.normal(3), r.normal(3), DpoConfig())
            assert loss > 0

    def test_gradients(self):
        for seed in range(10):
            assert dpo_case(seed) < 1e-4

    def test_reference_gets_no_gradient(self):
        theta, ref = _gen(0), _gen(1)
        r = Rng(3)
        pair, ew, el = _pair(r), r.normal(3), r.normal(3)
        g_ref = nk.grad(lambda p: dpo_loss(theta, ref.with_params(p), pair, SCHED, 5, ew, el, DpoConfig()), ref.params)
        np.testing.assert_array_equal(g_ref, 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dpo_loss(_gen(0), _gen(1), WinLosePair((0.0, 1.0), (1.0, 0.0), "p"), SCHED, 0, [0, 0], [0, 0], DpoConfig())

    def test_weight_hook(self):
        cfg = DpoConfig(weight_fn=lambda t, s: 1.0 + t)
        assert cfg.weight(3, SCHED) == 4.0
        with pytest.raises(ValueError):
            DpoConfig(weight_fn=lambda t, s: 0.0).weight(0, SCHED)
        with pytest.raises(ValueError):
            DpoConfig(weight_const=0.0)


class TestFinetune:
    def test_zero_learning_rate(self):
        ref = _gen(0)
        pairs = [_pair(Rng(1))]
        out, trace = dpo_finetune(ref.copy(), ref, pairs, SCHED, DpoConfig(learning_rate=0.0, steps=5, minibatch=2), Rng(2))
        assert out.params.values == ref.params.values
        np.testing.assert_allclose(trace.losses, LN2, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_single_pair_learns_margin(self, seed):
        ref = _gen(seed, 0.3)
        pair = _pair(Rng(seed).spawn("pair"))
        before = list(ref.params.values)
        out, trace = dpo_finetune(ref.copy(), ref, [pair], SCHED, DpoConfig(learning_rate=0.05, steps=150, minibatch=4),
                                  Rng(seed))
        assert ref.params.values == before
        assert np.mean(trace.losses[-20:]) < LN2
        assert mean_implicit_margin(out, ref, [pair], SCHED, Rng(9), draws=32) < 0

    def test_swap_flips_mean_margin(self):
        theta, ref = _gen(5), _gen(6)
        pairs = [_pair(Rng(7).spawn(i)) for i in range(6)]
        m = mean_implicit_margin(theta, ref, pairs, SCHED, Rng(8))
        m_swapped = mean_implicit_margin(theta, ref, [p.swapped() for p in pairs], SCHED, Rng(8))
        assert m != 0.0
        assert m_swapped == -m

    def test_empty(self):
        with pytest.raises(ValueError):
            dpo_finetune(_gen(0), _gen(0), [], SCHED, DpoConfig(), Rng(0))


class TestPairs:
    def test_validation(self):
        with pytest.raises(ValueError):
            WinLosePair((1.0, 2.0), (1.0, 2.0), "p")
        with pytest.raises(ValueError):
            WinLosePair((1.0, 2.0), (1.0,), "p")

    def test_round_trip(self, tmp_path):
        pairs = [_pair(Rng(i)) for i in range(3)] + [WinLosePair((0.5,) * 3, (0.1,) * 3, "q", Provenance.REFRESHED)]
        save_pairs(tmp_path / "pairs.jsonl", pairs)
        assert load_pairs(tmp_path / "pairs.jsonl") == pairs
        assert pairs[-1].to_json()["provenance"] == "refreshed_C_hat"
