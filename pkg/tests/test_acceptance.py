"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (also repeated in the
terminal summary) and then asserts. The replication studies run at full
size (R = 1000 for the two designs, R = 500 for the robustness suite), so
this module takes a few minutes on one core. Run it alone with
``python tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py -s``.
"""
import csv
import itertools
import sys

import numpy as np
import pytest
from scipy import integrate, stats

from hiddenprox import (DgpSpec, ObservedData, StudyConfig, align_labels, omega_matrix,
                        phi_obs, population_tensor, robustness_study, run_study, simulate,
                        spectral_recover, true_nuisances, true_targets)
from hiddenprox.cli import main as cli_main
from hiddenprox.core import binary_strata
from hiddenprox.montecarlo import robustness_config

from conftest import expit

SIZES = (200, 500, 1000)
CELLS = list(itertools.product((0.0, 1.0), repeat=3))
BINARY_ATE = 0.592280
MIXED_ORACLE_MEAN = 0.447


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def binary_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("binary_study")
    assert cli_main(["study", "--dgp", "binary", "--out", str(out)]) == 0
    summary = {(r["method"], int(r["n"])): {k: float(r[k]) for k in ("mean", "bias", "n_var",
                                                                     "coverage")}
               for r in _read(out / "summary.csv")}
    return summary, _read(out / "raw.csv")


@pytest.fixture(scope="module")
def mixed_study():
    return run_study(StudyConfig(dgp="mixed"))


def test_criterion_1_binary_table(acceptance, binary_study):
    s, _ = binary_study
    checks = []
    for n in SIZES:
        b = s["proposed", n]["bias"]
        checks.append((f"proposed |bias|={abs(b):.4f} <= 0.015 at n={n}", abs(b) <= 0.015))
    nv = s["proposed", 1000]["n_var"]
    checks.append((f"proposed nVar={nv:.3f} in [1.4, 2.1] at n=1000", 1.4 <= nv <= 2.1))
    for n in SIZES:
        b = s["naive", n]["bias"]
        checks.append((f"naive bias={b:.4f} in [-0.135, -0.105] at n={n}", -0.135 <= b <= -0.105))
    for n in SIZES:
        b = s["oracle", n]["bias"]
        checks.append((f"oracle |bias|={abs(b):.4f} <= 0.01 at n={n}", abs(b) <= 0.01))
    nv = s["oracle", 1000]["n_var"]
    checks.append((f"oracle nVar={nv:.3f} in [0.45, 0.75] at n=1000", 0.45 <= nv <= 0.75))
    assert acceptance("C1", "binary design replication table", checks)


def test_criterion_2_mixed_table(acceptance, mixed_study):
    res = mixed_study
    checks = []
    for n in SIZES:
        b = res.row("naive", n).bias
        checks.append((f"naive bias={b:.4f} in [0.19, 0.26] at n={n}", 0.19 <= b <= 0.26))
    for n in (500, 1000):
        bp, bn = res.row("proposed", n).bias, res.row("naive", n).bias
        checks.append((f"proposed |bias|={abs(bp):.4f} <= 0.04 at n={n}", abs(bp) <= 0.04))
        checks.append((f"proposed |bias| < naive |bias| at n={n}", abs(bp) < abs(bn)))
    m = res.row("oracle", 1000).mean
    checks.append((f"oracle mean={m:.4f} within 0.01 of 0.447 at n=1000",
                   abs(m - MIXED_ORACLE_MEAN) <= 0.01))
    assert acceptance("C2", "mixed design replication table", checks)


def test_criterion_3_ground_truth(acceptance):
    closed = (0.7 * expit(2) + 0.3 * expit(0.5)) - (0.7 * expit(-1) + 0.3 * expit(-2.5))
    ate_b = true_targets(DgpSpec.binary())[2]
    psi1, psi0, ate_m = true_targets(DgpSpec.mixed())
    x, w = np.polynomial.hermite.hermgauss(96)

    def gh(arm):
        return np.sum(w * expit(-3 + 3 * arm + 0.5 * np.sqrt(2) * x)) / np.sqrt(np.pi)

    gh1, gh0 = gh(1), gh(0)
    quad0 = integrate.quad(lambda c: expit(-3 + 0.5 * c) * stats.norm.pdf(c), -np.inf, np.inf,
                           epsabs=1e-13)[0]
    checks = [
        (f"binary ate={ate_b:.7f} is 0.592280 +/- 1e-6", abs(ate_b - BINARY_ATE) <= 1e-6),
        ("binary ate matches closed form", abs(ate_b - closed) <= 1e-12),
        ("mixed psi1 matches 96-node Gauss-Hermite", abs(psi1 - gh1) <= 1e-6),
        ("mixed psi0 matches 96-node Gauss-Hermite", abs(psi0 - gh0) <= 1e-6),
        ("mixed psi0 matches adaptive quadrature", abs(psi0 - quad0) <= 1e-6),
        (f"mixed ate={ate_m:.5f} within 0.003 of 0.447", abs(ate_m - MIXED_ORACLE_MEAN) <= 0.003),
    ]
    assert acceptance("C3", "ground-truth targets", checks)


def _sample(rows):
    rows = np.asarray(rows, dtype=float)
    n = len(rows)
    return ObservedData(a=np.zeros(n, int), c=np.zeros(n), w=rows[:, 0], z=rows[:, 1],
                        v=rows[:, 2])


def _cell_probs(y):
    p = (0.1, 0.9)[y]
    return np.array([np.prod([p if x else 1 - p for x in cell]) for cell in CELLS])


def test_criterion_4_weight_calibration(acceptance):
    nuis = true_nuisances(DgpSpec.binary())
    om = omega_matrix(_sample(CELLS), nuis)
    checks = []
    for yp in (0, 1):
        err = np.abs(_cell_probs(yp) @ om - np.eye(2)[yp]).max()
        checks.append((f"E[omega | Y={yp}] error {err:.1e}", err <= 1e-12))
        for proxy, x in itertools.product(range(3), (0.0, 1.0)):
            p = _cell_probs(yp) * np.array([cell[proxy] == x for cell in CELLS])
            err = np.abs((p / p.sum()) @ om - np.eye(2)[yp]).max()
            checks.append((f"E[omega | Y={yp}, {'wzv'[proxy]}={x:g}] error {err:.1e}",
                           err <= 1e-12))
    err = np.abs(om.sum(axis=1) - 1).max()
    checks.append((f"sum rule on binary cells error {err:.1e}", err <= 1e-12))
    rows = np.random.default_rng(0).normal(0, 3, size=(10_000, 3))
    om_m = omega_matrix(_sample(rows), true_nuisances(DgpSpec.mixed()))
    err = np.abs(om_m.sum(axis=1) - 1).max()
    checks.append((f"sum rule on continuous inputs error {err:.1e}", err <= 1e-12))
    assert acceptance("C4", "weight calibration", checks)


def test_criterion_5_exact_recovery(acceptance):
    spec = DgpSpec.binary()
    checks = []
    for s in binary_strata():
        T = population_tensor(spec, s)
        law = spectral_recover(T, s)
        p1 = float(expit(spec.outcome_coef[0] + spec.outcome_coef[1] * s.a
                         + spec.outcome_coef[2] * s.c))
        truth = np.array([1 - p1, p1])

        def err(cand):
            e = np.abs(cand.class_probs - truth).max()
            return max([e] + [np.abs(cand.proxies[k].success_prob() - [0.1, 0.9]).max()
                              for k in "wzv"])

        best = min(err(law.permute(o)) for o in ([0, 1], [1, 0]))
        checks.append((f"{s.label()} recovery error {best:.1e}", best <= 1e-10))
        aligned = err(align_labels(law))
        checks.append((f"{s.label()} aligned labels error {aligned:.1e}", aligned <= 1e-10))
    assert acceptance("C5", "exact latent recovery", checks)


def test_criterion_6_mean_zero(acceptance):
    checks = []
    for name, seed in (("binary", 601), ("mixed", 602)):
        spec = DgpSpec.named(name)
        truth = true_targets(spec)
        nuis = true_nuisances(spec)
        obs = simulate(spec, 10**6, seed=seed).observed()
        for arm, target in ((1, truth[0]), (0, truth[1])):
            vals = phi_obs(obs, arm, target, nuis)
            z = vals.mean() / (vals.std(ddof=1) / np.sqrt(len(vals)))
            checks.append((f"{name} arm {arm}: |mean|/se={abs(z):.2f} < 3", abs(z) < 3))
    assert acceptance("C6", "observed-data influence function has mean zero", checks)


def test_criterion_7_robustness(acceptance):
    rows, _ = robustness_study(robustness_config())
    checks = []
    for r in rows:
        if r.case == "doubly-violated":
            checks.append((f"doubly-violated |bias|={abs(r.bias):.4f} > 0.05", abs(r.bias) > 0.05))
        elif r.case != "all-correct":
            checks.append((f"case {r.case} |bias|={abs(r.bias):.4f} < 0.015", abs(r.bias) < 0.015))
    assert len(checks) == 7
    assert acceptance("C7", "multiple robustness under corrupted nuisances", checks)


def test_criterion_8_rate_and_normality(acceptance, binary_study):
    s, raw = binary_study
    truth = true_targets(DgpSpec.binary())[2]
    nv = [s["proposed", n]["n_var"] for n in SIZES]
    ratio = max(nv) / min(nv)
    checks = [(f"nVar ratio across n={ratio:.3f} <= 1.35", ratio <= 1.35)]
    for n in SIZES:
        rows = [r for r in raw if r["method"] == "proposed" and int(r["n"]) == n
                and not r["error_flag"]]
        z = np.array([(float(r["ate"]) - truth) / np.sqrt(float(r["varHat"])) for r in rows])
        p = stats.kstest(z, "norm").pvalue
        checks.append((f"KS p-value={p:.3f} >= 0.01 at n={n}", p >= 0.01))
    cov = s["proposed", 1000]["coverage"]
    checks.append((f"coverage={cov:.3f} in [0.93, 0.97] at n=1000", 0.93 <= cov <= 0.97))
    checks.append(("R >= 1000", sum(1 for r in raw if r["method"] == "proposed"
                                     and int(r["n"]) == 1000) >= 1000))
    assert acceptance("C8", "root-n rate, normality and coverage", checks)


def test_criterion_9_determinism(acceptance, tmp_path):
    configs = {"binary": dict(dgp="binary", sizes=(200,), reps=40),
               "mixed": dict(dgp="mixed", sizes=(300,), reps=8)}
    checks = []
    for name, kw in configs.items():
        blobs = []
        for jobs in (1, 2, 3):
            out = tmp_path / f"{name}{jobs}"
            run_study(StudyConfig(jobs=jobs, out_dir=str(out), **kw))
            blobs.append((out / "summary.csv").read_bytes())
        checks.append((f"{name} summary identical for jobs 1, 2, 3",
                       blobs[0] == blobs[1] == blobs[2]))
    assert acceptance("C9", "byte-identical summaries across worker counts", checks)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
