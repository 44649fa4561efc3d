import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drnet.errors import ArgumentError, NumericError, ShapeError
from drnet.tensor import (
    Rng,
    argmax_channel,
    ew_add,
    ew_mul,
    ones,
    rng_normal,
    scale,
    zeros,
)


class TestConstructors:
    def test_zeros(self):
        t = zeros((1, 1, 2, 2))
        assert t.shape == (1, 1, 2, 2)
        assert (t == 0.0).all()

    def test_ones_two_channels(self):
        t = ones((1, 2, 1, 1))
        assert t.shape == (1, 2, 1, 1)
        assert (t == 1.0).all()

    def test_empty_tensor(self):
        t = zeros((0, 1, 1, 1))
        assert t.size == 0

    def test_negative_extent_rejected(self):
        with pytest.raises(ShapeError):
            zeros((1, -1, 2, 2))

    def test_wrong_rank_rejected(self):
        with pytest.raises(ShapeError):
            zeros((1, 2, 3))

    def test_size_overflow(self):
        with pytest.raises(ShapeError):
            zeros((1 << 21, 1 << 21, 1 << 21, 1))


class TestRng:
    def test_determinism_same_seed(self):
        a = rng_normal(Rng(7, 1), (2, 3, 4, 5))
        b = rng_normal(Rng(7, 1), (2, 3, 4, 5))
        assert (a == b).all()

    def test_streams_differ(self):
        a = Rng(7, 1).uniform(100)
        b = Rng(7, 2).uniform(100)
        assert not (a == b).all()

    def test_seeds_differ(self):
        a = Rng(7, 1).uniform(100)
        b = Rng(8, 1).uniform(100)
        assert not (a == b).all()

    def test_sequential_draws_match_block_draws(self):
        r1 = Rng(3, 0)
        first = np.concatenate([r1.raw(3), r1.raw(5)])
        r2 = Rng(3, 0)
        assert (first == r2.raw(8)).all()

    def test_uniform_open_interval(self):
        u = Rng(1, 0).uniform(100000)
        assert (u > 0).all() and (u < 1).all()

    def test_normal_moments(self):
        # one million draws: mean within 0.01, std within 0.01
        z = Rng(12345, 0).normal(1_000_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_normal_zero_std(self):
        t = rng_normal(Rng(1, 0), (2, 1, 3, 3), mean=1.5, std=0.0)
        assert (t == 1.5).all()

    def test_negative_std_rejected(self):
        with pytest.raises(ArgumentError):
            rng_normal(Rng(1, 0), (1, 1, 1, 1), std=-1.0)

    def test_gamma_moments(self):
        g = Rng(99, 0).gamma(4.0, 1_000_000) / 4.0
        assert abs(g.mean() - 1.0) < 0.01
        assert abs(g.var() - 0.25) < 0.025

    def test_gamma_shape_below_one_rejected(self):
        with pytest.raises(ArgumentError):
            Rng(1, 0).gamma(0.5, 10)

    def test_permutation_is_permutation(self):
        p = Rng(5, 0).permutation(257)
        assert sorted(p.tolist()) == list(range(257))


class TestElementwise:
    def test_add_identity(self):
        x = rng_normal(Rng(2, 0), (2, 2, 3, 3))
        assert (ew_add(x, zeros((2, 2, 3, 3))) == x).all()

    def test_mul_identity(self):
        x = rng_normal(Rng(2, 0), (2, 2, 3, 3))
        assert (ew_mul(x, ones((2, 2, 3, 3))) == x).all()

    def test_scale(self):
        out = scale(np.array([[1.0, 2.0], [3.0, 4.0]]), 2.0)
        assert out.tolist() == [[2.0, 4.0], [6.0, 8.0]]

    def test_no_broadcasting(self):
        with pytest.raises(ShapeError):
            ew_add(zeros((1, 1, 2, 2)), zeros((2, 1, 2, 2)))

    def test_nonfinite_result_rejected(self):
        big = np.full((1, 1, 1, 1), 1e308)
        with pytest.raises(NumericError):
            ew_mul(big, big)

    @given(st.integers(0, 2 ** 31 - 1))
    def test_add_commutative(self, seed):
        a = rng_normal(Rng(seed, 1), (1, 2, 3, 2))
        b = rng_normal(Rng(seed, 2), (1, 2, 3, 2))
        assert (ew_add(a, b) == ew_add(b, a)).all()


class TestArgmaxChannel:
    def test_forced_choice(self):
        t = np.array([0.2, 0.9]).reshape(1, 2, 1, 1)
        assert argmax_channel(t).tolist() == [1]

    def test_tie_breaks_to_zero(self):
        t = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
        assert argmax_channel(t).tolist() == [0]

    def test_negative_logit(self):
        t = np.array([3.0, -1.0]).reshape(1, 2, 1, 1)
        assert argmax_channel(t).tolist() == [0]

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeError):
            argmax_channel(np.zeros((1, 3, 1, 1)))

    def test_wrong_spatial(self):
        with pytest.raises(ShapeError):
            argmax_channel(np.zeros((1, 2, 2, 1)))
