"""Synthetic-joint sampling, exact MI values, and bound behavior."""

import math

import numpy as np
import pytest
import torch

from reldistill.errors import UsageError
from reldistill.mi import (SyntheticJointSpec, fit_and_bound, holdout_bound,
                           sample_pairs, true_mi)
from reldistill.relations import Critic

DIAGONAL = SyntheticJointSpec("discrete_joint", table=((0.5, 0.0), (0.0, 0.5)),
                              seed=3)


def histogram_mi(u: np.ndarray, v: np.ndarray, bins: int = 50) -> float:
    """Brute-force plug-in MI estimate from a 2-d histogram, in nats."""
    joint, _, _ = np.histogram2d(u, v, bins=bins)
    joint /= joint.sum()
    pu = joint.sum(axis=1, keepdims=True)
    pv = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (pu @ pv)[mask])).sum())


class TestSamplePairs:
    def test_zero_correlation_joint_matches_marginals(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.0, dim=3, seed=0)
        u_j, v_j = sample_pairs(spec, 20000, from_joint=True)
        u_m, v_m = sample_pairs(spec, 20000, from_joint=False, seed=1)
        for u, v in ((u_j, v_j), (u_m, v_m)):
            corr = np.corrcoef(u[:, 0].numpy(), v[:, 0].numpy())[0, 1]
            assert abs(corr) < 0.03

    def test_correlated_coordinate(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.8, dim=4, seed=0)
        u, v = sample_pairs(spec, 50000, from_joint=True)
        corr0 = np.corrcoef(u[:, 0].numpy(), v[:, 0].numpy())[0, 1]
        assert abs(corr0 - 0.8) < 0.02
        # noise coordinates stay independent
        corr1 = np.corrcoef(u[:, 1].numpy(), v[:, 1].numpy())[0, 1]
        assert abs(corr1) < 0.03

    def test_diagonal_joint_always_equal_pairs(self):
        u, v = sample_pairs(DIAGONAL, 500, from_joint=True)
        assert torch.equal(u, v)

    def test_diagonal_marginals_mix(self):
        u, v = sample_pairs(DIAGONAL, 2000, from_joint=False)
        mismatch = float((u.argmax(dim=1) != v.argmax(dim=1)).float().mean())
        assert 0.4 < mismatch < 0.6

    def test_bit_identical_streams(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.5, dim=2, seed=9)
        a = sample_pairs(spec, 100, from_joint=True)
        b = sample_pairs(spec, 100, from_joint=True)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_invalid_spec_rejected(self):
        with pytest.raises(UsageError):
            SyntheticJointSpec("gaussian_pair", correlation=1.0)
        with pytest.raises(UsageError):
            SyntheticJointSpec("discrete_joint", table=((0.7, 0.0), (0.0, 0.5)))
        with pytest.raises(UsageError):
            SyntheticJointSpec("uniform_pair")


class TestTrueMi:
    def test_independence_gives_zero(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.0, dim=5, seed=0)
        assert true_mi(spec) == pytest.approx(0.0)

    def test_diagonal_table_gives_ln2(self):
        assert true_mi(DIAGONAL) == pytest.approx(math.log(2.0))

    def test_gaussian_09_closed_form_and_histogram_oracle(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.9, dim=1, seed=7)
        exact = true_mi(spec)
        assert exact == pytest.approx(-0.5 * math.log(0.19), rel=1e-9)
        assert exact == pytest.approx(0.8304, abs=1e-4)
        u, v = sample_pairs(spec, 1_000_000, from_joint=True)
        estimate = histogram_mi(u[:, 0].numpy(), v[:, 0].numpy())
        assert abs(estimate - exact) < 0.05

    def test_embedding_preserves_mi_of_informative_pair(self):
        """Noise dims are independent, so coordinate 0 carries all the MI."""
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.9, dim=6, seed=7)
        u, v = sample_pairs(spec, 1_000_000, from_joint=True)
        estimate = histogram_mi(u[:, 0].numpy(), v[:, 0].numpy())
        assert abs(estimate - true_mi(spec)) < 0.05


class TestFitAndBound:
    def test_independence_bound_stays_at_zero(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.0, dim=4, seed=0)
        report = fit_and_bound(spec, negatives=16, train_steps=300,
                               eval_repeats=4, eval_positives=512)
        assert report.final_bound <= 0.05
        assert report.sound

    def test_diagonal_bound_below_ln2(self):
        report = fit_and_bound(DIAGONAL, negatives=1, train_steps=300,
                               eval_repeats=4, eval_positives=512)
        assert report.final_bound <= math.log(2.0) + 0.05
        assert report.sound

    def test_bound_improves_with_training(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.9, dim=8, seed=0)
        report = fit_and_bound(spec, negatives=32, train_steps=600,
                               eval_repeats=4, eval_positives=512)
        assert report.history[-1].posterior_bound > report.history[0].posterior_bound
        assert report.sound

    def test_ceiling_cap(self):
        spec = SyntheticJointSpec("gaussian_pair", correlation=0.5, dim=4, seed=1)
        report = fit_and_bound(spec, negatives=8, train_steps=200,
                               eval_repeats=4, eval_positives=512)
        cap = math.log(9)  # log(N + 1)
        for ck in report.history:
            assert ck.posterior_bound <= cap + 0.05
            assert ck.likelihood_bound <= cap + 0.05

    def test_zero_negatives_rejected(self):
        with pytest.raises(UsageError):
            fit_and_bound(DIAGONAL, negatives=0)


def test_holdout_bound_posterior_at_least_likelihood():
    """The likelihood bound subtracts a non-positive term, so it can't exceed
    the posterior bound on the same data."""
    torch.manual_seed(0)
    spec = SyntheticJointSpec("gaussian_pair", correlation=0.5, dim=4, seed=0)
    critic = Critic(4, proj_dim=8, tau=0.2, mode="linear")
    lik, post = holdout_bound(critic, spec, negatives=16, n_positives=512, seed=5)
    assert lik <= post
