import numpy as np
import pytest
from scipy.optimize import brentq
from sklearn.base import clone

from hiddenprox import (GLOBAL, CrossfitConfig, DgpSpec, FullData, FullRecord, NuisanceSet,
                        ObservedData, ObservedRecord, ProximalATE, estimate_ate, phi_full,
                        phi_obs, simulate, solve_psi, true_nuisances, true_targets)
from hiddenprox.estimators import fold_ids, influence_values
from hiddenprox.exceptions import EmptySampleError, EstimationError
from hiddenprox.nuisance import OutcomeMean, Propensity, _fit_stratified_mean, identity_basis

from conftest import expit


@pytest.fixture(scope="module")
def truth_nuis():
    return true_nuisances(DgpSpec.binary())


def _hand_nuisance(mu=0.8808, f=0.4):
    return NuisanceSet(Propensity(table=(f, 0.6)),
                       OutcomeMean(table={(1, 0): mu, (0, 0): 0.3, (1, 1): 0.6, (0, 1): 0.1}))


def test_phi_full_hand_example():
    val = phi_full(FullRecord(a=1, y=1, c=0, w=0, z=0, v=0), 1, 0.8033, _hand_nuisance())
    assert val == pytest.approx((1 - 0.8808) / 0.4 + 0.8808 - 0.8033, abs=1e-12)
    assert val == pytest.approx(0.37550, abs=1e-5)


def test_phi_full_other_arm():
    val = phi_full(FullRecord(a=0, y=1, c=0, w=0, z=0, v=0), 1, 0.8033, _hand_nuisance())
    assert val == pytest.approx(0.8808 - 0.8033, abs=1e-12)


def test_phi_obs_example(truth_nuis):
    val = phi_obs(ObservedRecord(a=1, c=0, w=1, z=1, v=1), 1, 0.0, truth_nuis)
    mu = expit(2)
    assert val == pytest.approx((0.94921875 - mu) / 0.4 + mu, abs=1e-12)
    other = phi_obs(ObservedRecord(a=0, c=0, w=1, z=1, v=1), 1, 0.3, truth_nuis)
    assert other == pytest.approx(mu - 0.3, abs=1e-12)


def test_positivity_breach_in_phi():
    nuis = NuisanceSet(Propensity(coef=(50.0, 0.0)), OutcomeMean(table={(1, 0): 0.5}))
    with pytest.raises(ValueError):
        phi_full(FullRecord(1, 1, 0, 0, 0, 0), 0, 0.5, nuis)


@pytest.mark.parametrize("dgp", ["binary", "mixed"])
def test_influence_functions_have_mean_zero(dgp):
    spec = DgpSpec.named(dgp)
    psi = true_targets(spec)
    nuis = true_nuisances(spec)
    data = simulate(spec, 10**6, seed=77)
    for arm, target in ((1, psi[0]), (0, psi[1])):
        for vals in (phi_full(data, arm, target, nuis), phi_obs(data.observed(), arm, target, nuis)):
            se = vals.std(ddof=1) / np.sqrt(len(vals))
            assert abs(vals.mean()) < 3 * se


def test_oracle_solve_with_true_nuisances(truth_nuis):
    data = simulate(DgpSpec.binary(), 10**6, seed=5)
    assert abs(solve_psi(data, 1, "oracle", truth_nuis) - 0.8033) < 0.003


def test_solve_psi_matches_root_finder(binary_big):
    nuis = true_nuisances(DgpSpec.binary())
    for kind in ("oracle", "proposed", "naive"):
        closed = solve_psi(binary_big, 1, kind, nuis)
        root = brentq(lambda p: influence_values(binary_big, 1, p, kind, nuis).mean(), -5, 5,
                      xtol=1e-14)
        assert closed == pytest.approx(root, abs=1e-10)


def test_solve_psi_on_constant_data():
    n = 20
    data = ObservedData(a=np.ones(n, int), c=np.zeros(n), w=np.ones(n), z=np.ones(n), v=np.ones(n))
    nuis = NuisanceSet(Propensity(table=(0.4, 0.6)), OutcomeMean(table=_fit_stratified_mean(data, data.w)))
    assert np.isfinite(solve_psi(data, 1, "naive", nuis))
    assert np.isfinite(solve_psi(data, 0, "naive", nuis))


def test_empty_sample():
    empty = ObservedData(a=[], c=[], w=[], z=[], v=[])
    with pytest.raises(EmptySampleError):
        solve_psi(empty, 1, "naive", None)
    with pytest.raises(EmptySampleError):
        estimate_ate(empty, "naive")


def test_oracle_equals_proposed_with_indicator_weights(binary_spec):
    full = simulate(binary_spec, 3000, seed=8)
    fed = FullData(a=full.a, c=full.c, w=full.y, z=full.y, v=full.y, y=full.y)
    base = true_nuisances(binary_spec)
    m = np.zeros((3, 1, 2))
    m[:, 0, 1] = 1.0
    ind = NuisanceSet(base.propensity, base.outcome, {GLOBAL: m}, identity_basis())
    oracle = estimate_ate(fed, "oracle", ind)
    proposed = estimate_ate(fed.observed(), "proposed", ind)
    assert proposed.psi1 == pytest.approx(oracle.psi1, abs=1e-12)
    assert proposed.psi0 == pytest.approx(oracle.psi0, abs=1e-12)


def test_naive_contrast_is_attenuated(binary_spec):
    ates = [estimate_ate(simulate(binary_spec, 1000, seed=s), "naive").ate for s in range(200)]
    assert np.mean(ates) == pytest.approx(0.474, abs=0.01)


def test_oracle_mixed_replications(mixed_spec):
    ates = np.array([estimate_ate(simulate(mixed_spec, 1000, seed=s), "oracle").ate
                     for s in range(200)])
    assert ates.mean() == pytest.approx(0.447, abs=0.01)
    assert 0.5 < 1000 * ates.var(ddof=1) < 1.1


def test_crossfit_and_full_sample_agree(binary_spec):
    data = simulate(binary_spec, 10**4, seed=9)
    truth = true_targets(binary_spec)[2]
    for folds in (1, 2):
        res = estimate_ate(data, "proposed", cf=CrossfitConfig(folds, 1))
        assert res.folds == folds
        assert abs(res.ate - truth) < 3 * res.se


def test_fold_ids_balanced_and_deterministic():
    for n, k in ((10, 3), (101, 2), (7, 7)):
        ids = fold_ids(n, k, 4)
        sizes = np.bincount(ids, minlength=k)
        assert sizes.max() - sizes.min() <= 1
        assert np.array_equal(ids, fold_ids(n, k, 4))


def test_refolding_gives_up():
    n = 40
    a = np.zeros(n, int)
    a[0] = 1
    data = ObservedData(a=a, c=np.zeros(n), w=np.zeros(n), z=np.zeros(n), v=np.zeros(n))
    with pytest.raises(EstimationError, match="5 shuffles"):
        estimate_ate(data, "naive", cf=CrossfitConfig(2, 0))


def test_crossfit_config_validation():
    with pytest.raises(ValueError):
        CrossfitConfig(0)


def test_variance_and_interval(binary_big):
    res, details = estimate_ate(binary_big, "oracle", return_details=True)
    infl = details["influence"]
    assert res.var_hat == pytest.approx(np.mean(infl**2) / len(infl), rel=1e-12)
    lo, hi = res.confint()
    assert hi - lo == pytest.approx(2 * 1.96 * np.sqrt(res.var_hat))
    assert res.ate == res.psi1 - res.psi0
    doc = res.to_dict()
    assert doc["ciLow"] == lo and doc["kind"] == "oracle"


def test_fixed_nuisance_records_corruption(binary_big):
    from hiddenprox import MisspecSpec, misspecify
    bad = misspecify(true_nuisances(DgpSpec.binary()), MisspecSpec("propensity"))
    res = estimate_ate(binary_big, "proposed", bad)
    assert res.corruption_log == ("propensity:offset=0.75",)


def test_sklearn_estimator(binary_spec):
    data = simulate(binary_spec, 3000, seed=3)
    est = ProximalATE(kind="proposed", folds=2, random_state=1)
    assert clone(est).get_params() == est.get_params()
    est.fit(data.observed())
    assert abs(est.ate_ - 0.592) < 0.1
    lo, hi = est.confint()
    assert lo < est.ate_ < hi
    X = data.observed().to_matrix()
    same = ProximalATE(kind="proposed", folds=2, random_state=1).fit(X)
    assert same.ate_ == pytest.approx(est.ate_, abs=1e-14)
    oracle = ProximalATE(kind="oracle").fit(X, data.y)
    assert abs(oracle.ate_ - 0.592) < 0.1
    assert est.influence_.shape == (3000,)
