"""Tests for the counter-based random stream."""

import numpy as np
import pytest

from sannli.rng import RngStream, derive_seed


class TestDeterminism:
    def test_same_seed_same_draws(self):
        a = RngStream(42).uniform(size=1000)
        b = RngStream(42).uniform(size=1000)
        assert np.array_equal(np.asarray(a), np.asarray(b))

    def test_different_seeds_differ(self):
        a = np.asarray(RngStream(1).uniform(size=100))
        b = np.asarray(RngStream(2).uniform(size=100))
        assert not np.array_equal(a, b)

    def test_draw_order_is_the_state(self):
        """Splitting one bulk draw into two produces the same sequence."""
        whole = np.asarray(RngStream(7).uniform(size=10))
        s = RngStream(7)
        first = np.asarray(s.uniform(size=4))
        second = np.asarray(s.uniform(size=6))
        assert np.array_equal(whole, np.concatenate([first, second]))


class TestUniform:
    def test_range(self):
        u = np.asarray(RngStream(3).uniform(size=10000))
        assert (u >= 0.0).all() and (u < 1.0).all()

    def test_mean_near_half(self):
        u = np.asarray(RngStream(5).uniform(size=100000))
        assert abs(u.mean() - 0.5) < 0.01

    def test_low_high(self):
        u = np.asarray(RngStream(9).uniform(-2.0, 4.0, size=10000))
        assert (u >= -2.0).all() and (u < 4.0).all()
        assert abs(u.mean() - 1.0) < 0.1

    def test_scalar_draw(self):
        x = RngStream(11).uniform()
        assert isinstance(x, float)
        assert 0.0 <= x < 1.0


class TestIntegers:
    def test_range(self):
        k = RngStream(13).integers(7, size=5000)
        assert k.min() >= 0 and k.max() < 7

    def test_all_values_hit(self):
        k = RngStream(17).integers(5, size=2000)
        assert set(np.unique(k)) == {0, 1, 2, 3, 4}


class TestShuffle:
    def test_permutation(self):
        items = list(range(50))
        out = RngStream(23).shuffle(items)
        assert sorted(out) == items
        assert out != items  # astronomically unlikely to be identity

    def test_input_unchanged(self):
        items = [3, 1, 4, 1, 5]
        RngStream(29).shuffle(items)
        assert items == [3, 1, 4, 1, 5]


class TestDerive:
    def test_child_streams_are_independent_of_parent_state(self):
        """Deriving a child does not consume parent draws."""
        a = RngStream(31)
        before = np.asarray(RngStream(31).uniform(size=5))
        a.derive("child")
        after = np.asarray(a.uniform(size=5))
        assert np.array_equal(before, after)

    def test_labels_separate_streams(self):
        a = RngStream(37)
        u = np.asarray(a.derive("dropout").uniform(size=100))
        v = np.asarray(a.derive("init").uniform(size=100))
        assert not np.array_equal(u, v)

    def test_derive_is_stable(self):
        a = np.asarray(RngStream(41).derive("x").uniform(size=10))
        b = np.asarray(RngStream(41).derive("x").uniform(size=10))
        assert np.array_equal(a, b)

    def test_derive_seed_differs_by_label(self):
        assert derive_seed(1, "a") != derive_seed(1, "b")
        assert derive_seed(1, "a") != derive_seed(2, "a")
