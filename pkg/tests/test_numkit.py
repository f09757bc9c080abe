import math

import numpy as np
import pytest

from alignkit import numkit as nk
from alignkit.numkit import ParamVector, Rng, Tape


def _pv(values):
    pv = ParamVector.zeros([("a", (len(values),))])
    pv.set_segment("a", values)
    return pv


class TestTape:
    def test_polynomial_gradient(self):
        # f = x^2 y + y / x, df/dx = 2xy - y/x^2, df/dy = x^2 + 1/x
        f = lambda p: p.values[0] * p.values[0] * p.values[1] + p.values[1] / p.values[0]
        g = nk.grad(f, _pv([1.5, -2.0]))
        np.testing.assert_allclose(g, [2 * 1.5 * -2.0 + 2.0 / 1.5**2, 1.5**2 + 1 / 1.5], rtol=1e-14)

    def test_elementary_functions(self):
        x0 = 0.37
        cases = [
            (nk.exp, math.exp(x0)),
            (nk.log, 1 / x0),
            (nk.tanh, 1 - math.tanh(x0) ** 2),
            (nk.softplus, 1 / (1 + math.exp(-x0))),
        ]
        for fn, expected in cases:
            g = nk.grad(lambda p: fn(p.values[0]), _pv([x0]))
            assert g[0] == pytest.approx(expected, rel=1e-13)

    def test_fan_out_accumulates(self):
        # the same leaf used three times
        g = nk.grad(lambda p: p.values[0] * p.values[0] * p.values[0], _pv([2.0]))
        assert g[0] == pytest.approx(12.0)

    def test_min_max_select_one_branch(self):
        g = nk.grad(lambda p: nk.minimum(p.values[0], p.values[1]), _pv([1.0, 2.0]))
        np.testing.assert_array_equal(g, [1.0, 0.0])
        g = nk.grad(lambda p: nk.maximum(p.values[0], p.values[1]), _pv([1.0, 2.0]))
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_clip_is_flat_outside(self):
        for x, slope in [(0.5, 0.0), (1.0, 1.0), (1.5, 0.0)]:
            g = nk.grad(lambda p: nk.clip(p.values[0], 0.8, 1.2), _pv([x]))
            assert g[0] == slope

    def test_log_of_nonpositive_raises(self):
        with pytest.raises(nk.NonFiniteError):
            nk.grad(lambda p: nk.log(p.values[0]), _pv([-1.0]))

    def test_constant_loss_has_zero_gradient(self):
        np.testing.assert_array_equal(nk.grad(lambda p: 3.0, _pv([1.0, 2.0])), [0.0, 0.0])

    def test_floats_pass_through(self):
        assert nk.exp(0.0) == 1.0
        assert nk.vsum([1.0, 2.0]) == 3.0
        assert nk.dot([1.0, 2.0], [3.0, 4.0]) == 11.0

    def test_tape_records_nodes(self):
        tape = Tape()
        x = tape.variable(2.0)
        y = x * 3.0 + 1.0
        assert y.value == 7.0
        assert len(tape) >= 3


class TestSoftmax:
    def test_log_softmax_normalizes(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            z = list(rng.normal(size=7) * 20)
            np.testing.assert_allclose(sum(math.exp(v) for v in nk.log_softmax(z)), 1.0, atol=1e-12)
            np.testing.assert_allclose(sum(nk.softmax(z)), 1.0, atol=1e-12)

    def test_log_softmax_gradient_vs_finite_diff(self):
        rng = np.random.default_rng(1)
        pv = _pv(rng.normal(size=5))
        f = lambda p: nk.log_softmax(p.values)[2]
        assert nk.relative_error(nk.grad(f, pv), nk.finite_diff(f, pv)) < 1e-7

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            nk.log_softmax([])


class TestParamVector:
    def test_layout_offsets_and_rows(self):
        pv = ParamVector.zeros([("w", (2, 3)), ("b", (2,))])
        assert len(pv) == 8
        pv.set_segment("w", np.arange(6.0))
        assert pv.rows("w") == [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]
        assert pv.spec("b").offset == 6
        np.testing.assert_array_equal(pv.array("w"), np.arange(6.0).reshape(2, 3))

    def test_set_segment_size_check(self):
        pv = ParamVector.zeros([("w", (2, 2))])
        with pytest.raises(ValueError):
            pv.set_segment("w", [1.0, 2.0, 3.0])

    def test_bad_layout_rejected(self):
        pv = ParamVector.zeros([("w", (2,))])
        with pytest.raises(ValueError):
            ParamVector(pv.layout, [0.0])

    def test_step_is_plain_descent_and_pure(self):
        pv = _pv([1.0, 2.0])
        out = pv.step([0.5, -1.0], 0.1)
        assert out.values == [0.95, 2.1]
        assert pv.values == [1.0, 2.0]


class TestFiniteDiff:
    def test_quadratic_is_exact(self):
        pv = _pv([0.3, -0.7])
        f = lambda p: p.values[0] ** 2 + 3 * p.values[0] * p.values[1]
        fd = nk.finite_diff(f, pv)
        np.testing.assert_allclose(fd, [2 * 0.3 + 3 * -0.7, 3 * 0.3], atol=1e-9)

    def test_relative_error_scale(self):
        assert nk.relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert nk.relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
        assert nk.relative_error([0.0], [0.0]) == 0.0


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = Rng(5), Rng(5)
        np.testing.assert_array_equal(a.normal(10), b.normal(10))

    def test_spawn_is_keyed_not_ordered(self):
        a = Rng(5)
        a.normal(100)  # consuming the parent must not move children
        np.testing.assert_array_equal(a.spawn("x", 3).normal(4), Rng(5).spawn("x", 3).normal(4))
        assert not np.array_equal(Rng(5).spawn("x").normal(4), Rng(5).spawn("y").normal(4))

    def test_categorical_frequencies(self):
        rng = Rng(0)
        probs = [0.2, 0.5, 0.3]
        counts = np.bincount([rng.categorical(probs) for _ in range(20000)], minlength=3)
        np.testing.assert_allclose(counts / 20000, probs, atol=0.015)

    def test_permutation(self):
        assert sorted(Rng(1).permutation(6)) == list(range(6))
