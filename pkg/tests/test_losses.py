import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curatedcl import autodiff as ad
from curatedcl.autodiff import Tensor
from curatedcl.errors import ConfigError, DimensionError
from curatedcl.losses import (
    LossConfig,
    cosine_similarity,
    huber_pair,
    nt_xent,
    regularized_loss,
    regularizer_batch,
)


def brute_nt_xent(z1, z2, tau):
    """Scalar evaluation: rows interleaved as (view1_k, view2_k), pairs (2k-1, 2k)."""
    rows = []
    for a, b in zip(z1, z2):
        rows += [list(a), list(b)]

    def sim(u, v):
        dot = sum(x * y for x, y in zip(u, v))
        return dot / (math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(y * y for y in v)))

    def pair_loss(i, j):
        num = math.exp(sim(rows[i], rows[j]) / tau)
        den = sum(math.exp(sim(rows[i], rows[k]) / tau) for k in range(len(rows)) if k != i)
        return -math.log(num / den)

    n = len(z1)
    return sum(pair_loss(2 * k, 2 * k + 1) + pair_loss(2 * k + 1, 2 * k) for k in range(n)) / (2 * n)


def random_orthogonal(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestCosine:
    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_parallel(self):
        assert cosine_similarity([2, 2], [1, 1]) == pytest.approx(1.0, abs=1e-15)

    def test_direct_formula(self):
        expected = 32 / (math.sqrt(14) * math.sqrt(77))
        assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.974631, abs=1e-6)

    def test_zero_vector_is_flagged(self, caplog):
        assert cosine_similarity([0, 0], [1, 0]) == 0.0
        assert "degenerate projection" in caplog.text


class TestNTXent:
    def test_single_pair_is_zero(self):
        z = Tensor([[0.3, -1.0], [2.0, 0.5]])
        assert nt_xent(z, 0.5).item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_derived_orthogonal_pairs(self):
        # each anchor: positive similarity 1, two negatives at similarity 0,
        # so every term is -log(e^2 / (e^2 + 2)) = log(1 + 2 e^-2)
        z1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        z2 = np.array([[1.0, 0.0], [0.0, 1.0]])
        value = nt_xent(Tensor(np.concatenate([z1, z2])), 0.5).item()
        assert value == pytest.approx(math.log(1 + 2 * math.exp(-2)), abs=1e-12)
        assert value == pytest.approx(0.23954, abs=5e-6)
        assert value == pytest.approx(brute_nt_xent(z1, z2, 0.5), abs=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, n, seed):
        rng = np.random.default_rng(seed)
        z1, z2 = rng.normal(size=(n, 5)), rng.normal(size=(n, 5))
        tau = rng.uniform(0.1, 1.0)
        got = nt_xent(Tensor(np.concatenate([z1, z2])), tau).item()
        assert abs(got - brute_nt_xent(z1, z2, tau)) <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 10_000))
    def test_rotation_invariant_and_nonnegative(self, n, d, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2 * n, d))
        q = random_orthogonal(d, rng)
        a = nt_xent(Tensor(z), 0.5).item()
        b = nt_xent(Tensor(z @ q), 0.5).item()
        assert a >= 0
        assert abs(a - b) <= 1e-10


class TestHuber:
    def test_equal_vectors(self):
        assert huber_pair([1.0, 2.0], [1.0, 2.0], 1.0) == 0.0

    def test_quadratic_branch(self):
        assert huber_pair([0.5], [0.0], 1.0) == 0.125

    def test_linear_branch(self):
        assert huber_pair([3.0], [0.0], 1.0) == 2.5

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            huber_pair([1.0, 2.0], [1.0], 1.0)

    @pytest.mark.parametrize("delta", [0.3, 1.0, 2.5])
    def test_c1_continuity_at_delta(self, delta):
        h = 1e-9

        def val(d):
            return huber_pair([d], [0.0], delta)

        assert abs(val(delta - h) - val(delta + h)) <= 1e-6
        x = Tensor([delta - h, delta + h], requires_grad=True)
        ad.sum_(ad.huber(x, delta)).backward()
        assert abs(x.grad[0] - x.grad[1]) <= 1e-6

    def test_linear_growth_slope(self):
        delta = 0.5
        a, b = huber_pair([10.0], [0.0], delta), huber_pair([11.0], [0.0], delta)
        assert b - a == pytest.approx(delta)


class TestRegularizer:
    @pytest.mark.parametrize("kind", ["huber", "l1", "l2", "none"])
    def test_identical_views_zero(self, kind):
        z = np.random.default_rng(0).normal(size=(4, 3))
        assert regularizer_batch(Tensor(z), Tensor(z), LossConfig(regularizer_kind=kind)).item() == 0.0

    def test_mean_over_pairs(self):
        z1 = Tensor([[0.5], [3.0]])
        z2 = Tensor([[0.0], [0.0]])
        assert regularizer_batch(z1, z2, LossConfig()).item() == 1.3125

    def test_l2_unit_diffs(self):
        z1 = Tensor(np.ones((3, 4)))
        z2 = Tensor(np.zeros((3, 4)))
        assert regularizer_batch(z1, z2, LossConfig(regularizer_kind="l2")).item() == 0.5

    def test_huber_equals_l2_inside_delta(self):
        rng = np.random.default_rng(1)
        z1, z2 = rng.uniform(-0.4, 0.4, size=(2, 5, 3))
        h = regularizer_batch(Tensor(z1), Tensor(z2), LossConfig(regularizer_kind="huber"))
        l2 = regularizer_batch(Tensor(z1), Tensor(z2), LossConfig(regularizer_kind="l2"))
        assert h.item() == l2.item()


class TestRegularizedLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.z1, self.z2 = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))

    def test_lambda_zero_is_plain_nt_xent(self):
        total, parts = regularized_loss(self.z1, self.z2, LossConfig(lam=0.0))
        plain = nt_xent(ad.concat_rows([self.z1, self.z2]), 0.5).item()
        assert total.item() == plain and parts.total == plain and parts.nt_xent == plain

    def test_none_kind_is_plain_nt_xent(self):
        _, parts = regularized_loss(self.z1, self.z2, LossConfig(regularizer_kind="none", lam=3.0))
        assert parts.total == parts.nt_xent and parts.regularizer == 0.0

    @pytest.mark.parametrize("kind", ["huber", "l1", "l2"])
    def test_total_is_exact_sum(self, kind):
        cfg = LossConfig(lam=0.7, regularizer_kind=kind)
        _, parts = regularized_loss(self.z1, self.z2, cfg)
        assert parts.total - (parts.nt_xent + cfg.lam * parts.regularizer) == 0.0

    def test_gradient_on_four_pairs(self):
        cfg = LossConfig(lam=1.0, huber_delta=0.2)
        err = ad.grad_check(lambda: regularized_loss(self.z1, self.z2, cfg)[0], [self.z1, self.z2])
        assert err <= 1e-4

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(temperature=0)
        with pytest.raises(ConfigError):
            LossConfig(lam=-1)
        with pytest.raises(ConfigError):
            LossConfig(regularizer_kind="l3")
