"""One test per acceptance criterion; each prints a PASS/FAIL line before asserting.

Run directly with ``python tests/test_acceptance.py`` or through pytest.
"""
import sys
import time
import warnings

import numpy as np
import pytest

from conftest import record_criterion
from fuselage import make_fuselage
from pocal import (
    DomainBounds,
    KernelConfig,
    PhysicalDataset,
    SingularProjectionError,
    classify_variables,
    compute_path,
    project_kernel,
    solve_po,
)
from pocal.benchmark import (
    THETA0,
    BenchmarkConfig,
    integrated_error,
    optimal_theta_oracle,
    replicate_problem,
    sobol_screening,
)
from pocal.kernels import quadrature_nodes
from pocal.pipeline import RunConfig, read_physical, run_calibration, write_physical_csv
from pocal.selection import INSENSITIVE
from test_estimators import dense_quadratic, grid_oracle, kkt_ok, random_instance
from test_kernels import _poly_gradient, _residual_oracle


def _fmt(v):
    return np.array2string(np.asarray(v), precision=4, separator=", ")


def test_criterion_1_integrated_error_targets():
    t0 = time.perf_counter()
    ie0 = integrated_error(THETA0, nodes=2**16)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        star = optimal_theta_oracle(nodes=2**16)
    elapsed = time.perf_counter() - t0
    ok = abs(ie0 - 35.177) <= 0.01 * 35.177 and abs(star.ie - 22.581) <= 0.01 * 22.581 and elapsed < 10
    record_criterion(1, "IE(theta0) = 35.177 and IE(theta*) = 22.581 within 1%", ok,
                     f"IE(theta0) = {ie0:.4f}, IE(theta*) = {star.ie:.4f}, {elapsed:.1f} s")
    assert ok


def test_criterion_2_oracle_optimum():
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        th = optimal_theta_oracle().theta
    elapsed = time.perf_counter() - t0
    ok = (abs(th[2] - 0.300) <= 0.02 and abs(th[3] + 0.557) <= 0.02 and abs(th[9] - 6.849) <= 0.02
          and np.all(np.abs(th[[0, 1, 4, 5]]) <= 0.02) and elapsed < 60)
    record_criterion(2, "theta* = (.., 0.300, -0.557, .., 6.849) with theta_1,2,5,6 near 0", ok,
                     f"theta* = {_fmt(th)}, {elapsed:.1f} s")
    assert ok


@pytest.mark.slow
def test_criterion_3_study_ie_ordering(default_study):
    ie = default_study.mean_ie
    order = ie["PO"] < ie["OLS"] < ie["theta0"] and ie["PO"] < ie["PK"]
    band = 22.0 <= ie["PO"] <= 26.0
    ok = order and band
    record_criterion(3, "mean IE ordering PO < OLS < theta0, PO < PK, IE(PO) in [22, 26]", ok,
                     f"ordering {'holds' if order else 'violated'}; " +
                     ", ".join(f"{k} {v:.4f}" for k, v in ie.items()) +
                     f"; {len(default_study.replicates)} replicates in {default_study.runtime_s:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_4_relative_error_dominance(default_study):
    re = default_study.mean_re
    dominance = all(re["PO"][i] < re["PK"][i] and re["PO"][i] < re["OLS"][i] for i in (2, 3, 9))
    ok = dominance and re["PO"][9] < 0.05
    detail = "; ".join(f"theta_{i + 1}: OLS {re['OLS'][i]:.3f} PK {re['PK'][i]:.3f} PO {re['PO'][i]:.3f}"
                       for i in (2, 3, 9))
    record_criterion(4, "mean RE_PO below RE_PK and RE_OLS on theta_3,4,10; RE_PO(theta_10) < 0.05", ok,
                     f"dominance {'holds' if dominance else 'violated'}; {detail}")
    assert ok


@pytest.mark.slow
def test_criterion_5_selection_consistency(default_study):
    exact = default_study.exact_sensible_fraction
    zero = default_study.zero_at_lambda_fraction[0.1]
    ok = exact >= 0.7 and zero >= 0.7
    record_criterion(5, "BIC selects exactly {theta_3, theta_4, theta_10} and insensible deltas vanish "
                        "at lambda 0.1, each in >= 70% of replicates", ok,
                     f"exact set {exact:.2f}, zero at 0.1 {zero:.2f}, selection frequency "
                     f"{_fmt(default_study.selection_frequency)}")
    assert ok


def test_criterion_6_sobol_screening():
    s = sobol_screening()
    cfg = BenchmarkConfig(mc_samples=1024)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        problem = replicate_problem(cfg, np.random.SeedSequence(0))
        labels = classify_variables(compute_path(problem), s).labels
    ok = bool(np.all(s.total[6:9] < 0.01)) and all(labels[i] == INSENSITIVE for i in (6, 7, 8))
    record_criterion(6, "Sobol totals of theta_7,8,9 below 0.01 and labelled insensitive", ok,
                     f"totals {_fmt(s.total)}, labels 7-9 {labels[6:9]}")
    assert ok


def test_criterion_7_solver_properties():
    kkt = all(_kkt_holds(seed) for seed in range(50))
    gls = True
    for seed in range(20):
        p, _, _ = random_instance(seed, box=(50.0, 60.0))
        A, b = dense_quadratic(p)
        gls &= np.max(np.abs(solve_po(p, 0.0).theta_hat - (p.theta0 + np.linalg.solve(A, b)))) <= 1e-8
    grid_cases = 0
    grid = True
    for seed in range(24):
        m = 1 + seed % 3
        p, w, lam = random_instance(1000 + seed, m=m, n=m + 4, well_conditioned=True)
        u = solve_po(p, lam, weights=w).theta_hat - p.theta0
        u_grid, _, steps = grid_oracle(p, w, lam)
        grid &= bool(np.all(np.abs(u - u_grid) <= steps * (1 + 1e-9)))
        grid_cases += 1
    exact = True
    for seed in range(10):
        p, w, _ = random_instance(seed)
        exact &= solve_po(p, 1e12, weights=w).theta_hat.tobytes() == p.theta0.tobytes()
    ok = kkt and gls and grid and exact and grid_cases >= 20
    record_criterion(7, "KKT certificate, lambda=0 equals GLS, grid-search oracle, lambda=1e12 gives theta0",
                     ok, f"KKT {kkt}, GLS {gls}, grid {grid} on {grid_cases} cases, exact {exact}")
    assert ok


def _kkt_holds(seed):
    p, w, lam = random_instance(seed)
    try:
        return kkt_ok(p, solve_po(p, lam, weights=w), w, lam)
    except AssertionError:
        return False


def test_criterion_8_kernel_properties():
    annihilation, cases, seed = 0.0, 0, 0
    while cases < 20:
        r = np.random.default_rng(seed)
        seed += 1
        d, m, n = 1 + cases % 2, int(r.integers(1, 4)), int(r.integers(2, 9))
        exps = [np.zeros(d)] + [np.eye(d)[k] for k in range(d)] + [2 * np.eye(d)[k] for k in range(d)]
        g = _poly_gradient(r.normal(size=(m, len(exps))), exps)
        lo = r.uniform(-2, 0, d)
        bounds = DomainBounds(lo, lo + r.uniform(0.5, 3, d))
        design = bounds.from_unit(r.random((n, d)))
        cfg = KernelConfig(phi=float(r.uniform(0.2, 10)), eta2=1e-4, mc_samples=4096, seed=int(r.integers(1000)))
        try:
            pk = project_kernel(g, design, bounds, cfg)
        except SingularProjectionError:
            continue
        nodes = bounds.from_unit(quadrature_nodes(d, 4 * 4096, seed=cfg.seed + 7919))
        scale = np.sqrt(np.mean(g(nodes) ** 2, axis=0))[:, None]
        annihilation = max(annihilation, float(np.max(np.abs(_residual_oracle(pk, g, design, nodes)) / scale)))
        cases += 1
    psd_cases, worst, seed = 0, np.inf, 0
    while psd_cases < 50:
        r = np.random.default_rng(10_000 + seed)
        seed += 1
        d, m, n = int(r.integers(1, 4)), int(r.integers(1, 5)), int(r.integers(1, 41))
        exps = [np.zeros(d)] + [np.eye(d)[k] for k in range(d)] + [
            np.eye(d)[i] + np.eye(d)[j] for i in range(d) for j in range(i, d)]
        try:
            pk = project_kernel(_poly_gradient(r.normal(size=(m, len(exps))), exps), r.random((n, d)),
                                DomainBounds.unit(d), KernelConfig(phi=float(r.uniform(0.05, 30)), eta2=1e-3,
                                                                   mc_samples=512))
        except SingularProjectionError:
            continue
        ev = np.linalg.eigvalsh(pk.matrix)
        worst = min(worst, ev[0] / max(ev[-1], 1e-300) if ev[-1] > 0 else 0.0)
        psd_cases += 1
    ok = annihilation <= 1e-3 and worst >= -1e-8
    record_criterion(8, "annihilation residual <= 1e-3 on 20 cases, PSD within -1e-8 lambda_max on 50 cases", ok,
                     f"max relative residual {annihilation:.2e}, min eigenvalue ratio {worst:.2e}")
    assert ok


def test_criterion_9_pipeline(tmp_path):
    r = np.random.default_rng(3)
    data = PhysicalDataset(r.normal(size=(20, 2)) * 10.0 ** r.integers(-8, 8, (20, 1)), r.normal(size=(20, 3)))
    write_physical_csv(data, str(tmp_path / "rt.csv"))
    back = read_physical(str(tmp_path / "rt.csv"))
    lossless = back.x.tobytes() == data.x.tobytes() and back.y.tobytes() == data.y.tobytes()
    cfg, _ = make_fuselage(tmp_path / "fz")
    run = run_calibration(RunConfig.from_file(cfg))
    deltas, lams = run.path.deltas, run.path.lambdas
    last = [lams[deltas[:, i] > 0].max(initial=0.0) for i in range(5)]
    survivors = set(np.flatnonzero(run.path.selected.delta > 0).tolist())
    last_to_vanish = min(last[1], last[3]) > max(last[0], last[2], last[4])
    s = run.summary
    ok = lossless and survivors == {1, 3} and last_to_vanish and s["loss_theta_hat"] <= s["loss_theta0"]
    record_criterion(9, "lossless CSV round trip; fuselage run keeps theta_2, theta_4 and lowers the loss", ok,
                     f"round trip {lossless}, surviving {sorted(i + 1 for i in survivors)}, support "
                     f"{s['support']}, loss {s['loss_theta0']:.4g} -> {s['loss_theta_hat']:.4g}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
