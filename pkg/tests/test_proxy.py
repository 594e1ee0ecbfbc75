import math

import numpy as np
import pytest

from inferevolve.bench_data import DGPSpec, generate_synthetic
from inferevolve.metrics import IntervalEstimate, phi, sqrt_pehe
from inferevolve.model import benchmark_kind
from inferevolve.proxy import (
    DRDIDTarget,
    Z_95,
    acic_proxy_loss,
    dr_pseudo_outcomes,
    dr_transform,
    drdid_targets,
    encode_features,
    ite_proxy_loss,
    proxy_pehe,
    pseudo_outcomes_for,
    r_loss_norm,
)

ITE = benchmark_kind("synthetic-ite")
PANEL = benchmark_kind("synthetic-panel")


def _randomized_data(n=400, tau=2.0, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    T = (rng.random(n) < 0.5).astype(float)
    Y = X @ np.array([1.0, -0.5, 0.25, 0.0]) + T * tau + rng.normal(size=n)
    return X, T, Y


class TestDrTransform:
    def test_zero_residuals_leave_model_contrast(self):
        rng = np.random.default_rng(1)
        n = 50
        mu1, mu0 = rng.normal(size=n), rng.normal(size=n)
        ehat = np.clip(rng.random(n), 0.05, 0.95)
        T = (rng.random(n) < 0.5).astype(float)
        Y = np.where(T == 1, mu1, mu0)  # outcomes exactly on the model
        tt = dr_transform(mu1, mu0, ehat, T, Y)
        assert np.allclose(tt, mu1 - mu0, atol=1e-12)


class TestDrPseudoOutcomes:
    def test_aipw_near_true_ate(self):
        X, T, Y = _randomized_data(n=2000, tau=2.0, seed=2)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=3)
        assert abs(pseudo.ate_aipw - 2.0) <= 0.1

    def test_ate_is_mean_of_pseudo_outcomes(self):
        X, T, Y = _randomized_data(seed=4)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=5)
        assert pseudo.ate_aipw == float(np.mean(pseudo.tau_tilde))

    def test_clipping_bound_on_pseudo_outcomes(self):
        # with one outcome family the clipping arithmetic gives a hard bound
        X, T, Y = _randomized_data(seed=6)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=7, families=("ridge",))
        bound = (
            np.abs(pseudo.mu1 - pseudo.mu0)
            + np.maximum(np.abs(Y - pseudo.mu1), np.abs(Y - pseudo.mu0)) / 0.05
        )
        assert (np.abs(pseudo.tau_tilde) <= bound + 1e-9).all()

    def test_deterministic_given_seed(self):
        X, T, Y = _randomized_data(seed=8)
        a = dr_pseudo_outcomes(X, T, Y, seed=9)
        b = dr_pseudo_outcomes(X, T, Y, seed=9)
        assert np.array_equal(a.tau_tilde, b.tau_tilde)
        assert np.array_equal(a.fold_assignment, b.fold_assignment)

    def test_shared_fold_assignment_two_folds(self):
        X, T, Y = _randomized_data(seed=10)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=11)
        assert set(np.unique(pseudo.fold_assignment)) == {0, 1}

    def test_propensities_clipped(self):
        X, T, Y = _randomized_data(seed=12)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=13)
        assert pseudo.ehat.min() >= 0.05
        assert pseudo.ehat.max() <= 0.95

    def test_single_arm_rejected(self):
        X = np.random.default_rng(14).normal(size=(40, 2))
        with pytest.raises(ValueError, match="arm"):
            dr_pseudo_outcomes(X, np.ones(40), np.zeros(40), seed=0)

    def test_from_replicate_never_touches_truth(self):
        from inferevolve.bench_data import record_truth_access

        (rep,) = generate_synthetic(ITE, 1, 120, seed=15)
        seen = []
        with record_truth_access(seen.append):
            pseudo_outcomes_for(rep, seed=1)
        assert seen == []


class TestProxyPehe:
    def test_zero_when_equal(self):
        X, T, Y = _randomized_data(seed=16)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=17)
        assert proxy_pehe(pseudo.tau_tilde, pseudo) == 0.0

    def test_constant_offset(self):
        X, T, Y = _randomized_data(seed=18)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=19)
        assert proxy_pehe(pseudo.tau_tilde + 1.0, pseudo) == pytest.approx(1.0)

    def test_matches_two_pass_oracle(self):
        X, T, Y = _randomized_data(seed=20)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=21)
        rng = np.random.default_rng(22)
        tau_hat = rng.normal(size=len(Y))
        assert proxy_pehe(tau_hat, pseudo) == pytest.approx(
            sqrt_pehe(tau_hat, pseudo.tau_tilde), abs=1e-12
        )

    def test_length_mismatch(self):
        X, T, Y = _randomized_data(seed=23)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=24)
        with pytest.raises(ValueError):
            proxy_pehe(np.zeros(3), pseudo)


class TestRLoss:
    def test_exact_decomposition_gives_zero(self):
        X, T, Y = _randomized_data(seed=25)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=26)
        tau_hat = np.random.default_rng(27).normal(size=len(Y))
        y_exact = pseudo.mhat + (T - pseudo.ehat) * tau_hat
        assert r_loss_norm(y_exact, pseudo, T, tau_hat) == pytest.approx(0.0, abs=1e-12)

    def test_constant_outcome_guard(self):
        X, T, Y = _randomized_data(seed=28)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=29)
        const = np.full(len(Y), 3.0)
        # force mhat == Y and tau == 0: numerator 0, denominator guarded
        pseudo.mhat = const.copy()
        assert r_loss_norm(const, pseudo, T, np.zeros(len(Y))) == 0.0

    def test_scale_invariance(self):
        X, T, Y = _randomized_data(seed=30)
        pseudo = dr_pseudo_outcomes(X, T, Y, seed=31)
        tau_hat = np.random.default_rng(32).normal(size=len(Y))
        base = r_loss_norm(Y, pseudo, T, tau_hat)
        c = 7.5
        import copy

        scaled = copy.deepcopy(pseudo)
        scaled.mhat = pseudo.mhat * c
        scaled.tau_tilde = pseudo.tau_tilde * c
        scaled.ate_aipw = pseudo.ate_aipw * c
        assert r_loss_norm(Y * c, scaled, T, tau_hat * c) == pytest.approx(
            base, rel=1e-6
        )


class TestIteProxyLoss:
    def test_all_zero(self):
        out = ite_proxy_loss(0.0, 0.0, 0.0, lambda_ate=1.0)
        assert out == {"loss": 0.0, "score": 1.0}

    def test_hand_value(self):
        # phi(e-1) = 0.5 weighted by 0.5 -> loss 0.25, score 0.8
        out = ite_proxy_loss(math.e - 1.0, 0.0, 0.0, lambda_ate=1.0)
        assert out["loss"] == pytest.approx(0.25, abs=1e-12)
        assert out["score"] == pytest.approx(0.8, abs=1e-12)

    def test_score_decreases_in_each_component(self):
        base = ite_proxy_loss(1.0, 1.0, 1.0, lambda_ate=1.0)["score"]
        assert ite_proxy_loss(2.0, 1.0, 1.0, 1.0)["score"] < base
        assert ite_proxy_loss(1.0, 2.0, 1.0, 1.0)["score"] < base
        assert ite_proxy_loss(1.0, 1.0, 2.0, 1.0)["score"] < base

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ite_proxy_loss(-1.0, 0.0, 0.0, 1.0)


class TestDrDidTargets:
    def test_null_effect_targets_near_zero(self):
        reps = generate_synthetic(
            PANEL, 40, 60, seed=33, dgp=DGPSpec(effect_size=0.0, noise_sd=0.5)
        )
        out = drdid_targets(reps)
        y_sd = np.std(np.concatenate([r.rows["Y"].to_numpy() for r in reps]))
        assert np.mean(np.abs(out.per_replicate_target)) <= 0.1 * y_sd

    def test_injected_shift_recovered(self):
        reps = generate_synthetic(
            PANEL, 40, 60, seed=34, dgp=DGPSpec(effect_size=5.0, noise_sd=0.5)
        )
        out = drdid_targets(reps)
        assert abs(np.mean(out.per_replicate_target) - 5.0) <= 0.5

    def test_equivariant_under_treated_post_shift(self):
        reps = generate_synthetic(PANEL, 3, 30, seed=35)
        base = drdid_targets(reps).per_replicate_target
        c = 4.25
        for rep in reps:
            mask = (rep.rows["Z"] == 1) & (rep.rows["post"] == 1)
            rep.rows.loc[mask, "Y"] += c
        shifted = drdid_targets(reps).per_replicate_target
        assert np.allclose(shifted - base, c, atol=1e-8)

    def test_single_replicate_sd_unavailable(self):
        reps = generate_synthetic(PANEL, 1, 30, seed=36)
        out = drdid_targets(reps)
        assert out.sd_targets is None
        assert out.nominal_width is None

    def test_nominal_width_identity(self):
        reps = generate_synthetic(PANEL, 5, 30, seed=37)
        out = drdid_targets(reps)
        assert out.nominal_width == pytest.approx(2 * Z_95 * out.sd_targets, abs=1e-9)


class TestAcicProxyLoss:
    def test_exact_point_estimates_degenerate_intervals(self):
        targets = DRDIDTarget(
            per_replicate_target=np.array([1.0, 2.0, 3.0]),
            sd_targets=1.0,
            nominal_width=2 * Z_95,
        )
        ests = [IntervalEstimate(v, v, v) for v in (1.0, 2.0, 3.0)]
        out = acic_proxy_loss(ests, targets, lambda_cov=1.0)
        # hit rate 1 -> only the coverage-centering term remains
        assert out["components"]["hit_rate"] == 1.0
        assert out["components"]["g_width"] is None  # <= 20 replicates
        assert out["loss"] == pytest.approx(0.25 * phi((1 - 0.9) / 0.9), abs=1e-12)

    def test_centered_hit_rate_and_width_zero_ctilde(self):
        n = 30
        rng = np.random.default_rng(38)
        targets_vals = rng.normal(size=n)
        sd = float(np.std(targets_vals, ddof=1))
        width = 2 * Z_95 * sd
        targets = DRDIDTarget(targets_vals, sd, width)
        ests = []
        for i, v in enumerate(targets_vals):
            if i < 27:  # 27/30 = 0.9 hit rate; every interval has the same width
                ests.append(IntervalEstimate(v, v - width / 2, v + width / 2))
            else:
                eps = width / 100
                ests.append(IntervalEstimate(v, v + eps, v + eps + width))
        out = acic_proxy_loss(ests, targets, lambda_cov=1.0)
        assert out["components"]["hit_rate"] == pytest.approx(0.9)
        assert out["components"]["g_width"] == pytest.approx(0.0, abs=1e-12)
        expected = 0.6 * phi(np.mean([abs(e.tau_hat - t) for e, t in zip(ests, targets_vals)])) + 0.15 * phi(width)
        assert out["loss"] == pytest.approx(expected, abs=1e-12)

    def test_exactly_20_replicates_skips_calibration(self):
        vals = np.linspace(-1, 1, 20)
        sd = float(np.std(vals, ddof=1))
        targets = DRDIDTarget(vals, sd, 2 * Z_95 * sd)
        ests = [IntervalEstimate(v, v - 1, v + 1) for v in vals]
        out = acic_proxy_loss(ests, targets, lambda_cov=1.0)
        assert out["components"]["g_width"] is None

    def test_empty_rejected(self):
        targets = DRDIDTarget(np.array([1.0]), None, None)
        with pytest.raises(ValueError):
            acic_proxy_loss([], targets, 1.0)


class TestProxyRankingFidelity:
    def test_oracle_beats_zero_predictor_on_most_replicates(self):
        reps = generate_synthetic(
            ITE, 20, 300, seed=39, dgp=DGPSpec(effect="heterogeneous")
        )
        wins = 0
        for i, rep in enumerate(reps):
            pseudo = pseudo_outcomes_for(rep, seed=100 + i)
            truth = rep._truth
            oracle = proxy_pehe(truth.ite_true, pseudo)
            zero = proxy_pehe(np.zeros(rep.n_units), pseudo)
            wins += oracle < zero
        assert wins >= 18  # >= 90%


def test_encode_features_one_hot():
    import pandas as pd

    df = pd.DataFrame({"a": [1.0, 2.0], "b": ["x", "y"]})
    X = encode_features(df)
    assert X.shape == (2, 3)
    assert np.array_equal(X[:, 0], [1.0, 2.0])
    assert set(X[:, 1]) <= {0.0, 1.0}
