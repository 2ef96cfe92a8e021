"""Acceptance suite: one reported PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the summary section lists
every criterion. The chain-based criteria (7 to 9) share two session-scoped
chains and take a few minutes.
"""
import itertools
import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from msurv import io, kernels
from msurv.estimators import aalen_johansen, posterior_survival, predictive_survival
from msurv.measure import ModelParams, enumerate_transitions, quadrature_oracle
from msurv.mcmc import init_latent, resample_unit, run_chain
from msurv.predictive import (ConditionalHazard, atomic_transition_distribution, cumulative_hazard,
                              harmonic_cumulative_hazard, sample_conditional_unit)
from msurv.statespace import build_graph, validate
from msurv.trajectory import (PanelData, PanelRecord, PopulationTrajectory, UnitPath, log_density,
                              observe_panel, simulate_population)

from helpers import CAV_PARTITION, STUDY_PARTITION, beta_value, graph_params, random_dislocation_cases, report


def test_criterion_1_special_functions():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_lam = worst_zeta = 0.0
    for r, d, g, rho in random_dislocation_cases(rng, 200):
        want = quadrature_oracle(r, d, g, rho)
        got = math.exp(kernels.log_dislocation_integral(r, d, g, rho))
        worst_lam = max(worst_lam, abs(got / want - 1))
        S = float(np.dot(g, r))
        if S > 0:
            zw = quadrature_oracle(r, [0] * len(r), g, rho)
            worst_zeta = max(worst_zeta, abs(kernels.digamma_diff(rho, S) / zw - 1))
    worst_beta = 0.0
    for r, d, _, rho in random_dislocation_cases(rng, 200):
        got = math.exp(kernels.log_dislocation_integral(r, d, [1.0] * len(r), rho))
        worst_beta = max(worst_beta, abs(got / beta_value(r, d, rho) - 1))
    elapsed = time.perf_counter() - t0
    ok = worst_lam < 1e-8 and worst_zeta < 1e-8 and worst_beta < 1e-12 and elapsed < 10
    report(1, ok, f"lambda {worst_lam:.1e}, zeta {worst_zeta:.1e}, beta {worst_beta:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_normalization():
    t0 = time.perf_counter()
    worst = 0.0
    for name, part in (("survival", None), ("bidirectional_illness_death", STUDY_PARTITION), ("cav", CAV_PARTITION)):
        p = graph_params(name, part, seed=3)
        s = p.structure.s
        for n in range(1, 5):
            # configurations: sorted state vectors suffice by exchangeability
            for y in itertools.combinations_with_replacement(range(1, s + 1), n):
                if all(p.structure.graph.is_absorbing(i) for i in y):
                    continue
                total = sum(q for _, q in enumerate_transitions(np.array(y), p))
                worst = max(worst, abs(total - 1))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    report(2, ok, f"max |sum q - 1| = {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_exchangeability(study_params):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(10):
        n = int(rng.integers(2, 11))
        tr = simulate_population(n, rng.integers(1, 3, size=n), study_params, horizon=float(rng.uniform(1, 8)),
                                 seed=int(rng.integers(1 << 30)))
        base = log_density(tr, study_params)
        for _ in range(5):
            worst = max(worst, abs(log_density(tr.permuted(rng.permutation(n)), study_params) - base))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    report(3, ok, f"50 permutations, max diff {worst:.1e}, {elapsed:.1f}s")
    assert ok


def _first_jump(path):
    return float(path.times[1]), int(path.states[1])


def test_criterion_4_consistency(study_params):
    t0 = time.perf_counter()
    reps = 20_000
    rng = np.random.default_rng(4)
    pvals = []
    for n in (1, 3):
        init = [1, 2, 1, 2][: n + 1]
        joint = [_first_jump(simulate_population(n + 1, init, study_params, seed=rng).units[n]) for _ in range(reps)]
        seq = []
        for _ in range(reps):
            others = simulate_population(n, init[:n], study_params, seed=rng)
            seq.append(_first_jump(sample_conditional_unit(others, init[n], study_params, seed=rng)))
        ks = stats.ks_2samp([t for t, _ in joint], [t for t, _ in seq]).pvalue
        labels = sorted({y for _, y in joint} | {y for _, y in seq})
        table = np.array([[sum(1 for _, y in sample if y == lab) for lab in labels] for sample in (joint, seq)])
        chi = stats.chi2_contingency(table)[1] if len(labels) > 1 else 1.0
        pvals += [ks, chi]
    elapsed = time.perf_counter() - t0
    ok = min(pvals) > 0.01 and elapsed < 180
    report(4, ok, "p-values " + ", ".join(f"{p:.3f}" for p in pvals) + f", {elapsed:.0f}s")
    assert ok


def test_criterion_5_harmonic_reduction():
    st = validate(build_graph("illness_death"))
    rho, nu = 0.8, 1.4
    p = ModelParams.create(st, nu=nu, rho=rho)
    units = [UnitPath(np.array([0.0, 1.0]), np.array([1, 3]), math.inf),
             UnitPath(np.array([0.0, 1.0]), np.array([1, 3]), math.inf),
             UnitPath(np.array([0.0, 2.0]), np.array([1, 2]), math.inf),
             UnitPath(np.array([0.0]), np.array([1]), 2.5),
             UnitPath(np.array([0.0, 3.0]), np.array([1, 3]), math.inf)]
    others = PopulationTrajectory(units, 3)
    # at-risk counts in state 1: 5 on [0,1), 3 on [1,2), 2 on [2,2.5), 1 on [2.5,3), 0 after
    worst_h = 0.0
    for t in (0.5, 1.0, 1.7, 2.2, 2.8, 4.0):
        got = cumulative_hazard(1, 3, 0.0, t, others, p)
        want = harmonic_cumulative_hazard([0, 1, 2, 2.5, 3], [5, 3, 2, 1, 0], nu, rho, t)
        worst_h = max(worst_h, abs(got / want - 1))
    worst_a = 0.0
    for t, before, after in ((1.0, 5, 3), (2.0, 3, 2), (3.0, 1, 0)):
        got = atomic_transition_distribution(t, 1, others, p)[1]
        worst_a = max(worst_a, abs(got - (after + rho) / (before + rho)))

    # rho -> 0: atomic stay factors reproduce the Aalen-Johansen occupancy ratios of state 1
    tiny = ModelParams.create(st, nu=nu, rho=1e-6)
    occ = aalen_johansen(others)
    worst_aj = 0.0
    prod = 1.0
    for t in (1.0, 2.0, 3.0):
        stay = atomic_transition_distribution(t, 1, others, tiny)[1]
        prod *= stay
        ratio = occ.at(t)[0] / occ.at(t - 1e-9)[0]
        worst_aj = max(worst_aj, abs(stay - ratio), abs(prod - occ.at(t)[0]))
    ok = worst_h < 1e-10 and worst_a < 1e-10 and worst_aj < 1e-4
    report(5, ok, f"hazard {worst_h:.1e}, atoms {worst_a:.1e}, AJ {worst_aj:.1e}")
    assert ok


def _bridge_tv(others, rec, mid, params, structure, draws, seed):
    """TV between resample_unit and a rejection oracle for the state at ``mid``."""
    rng = np.random.default_rng(seed)
    ch = ConditionalHazard.from_others(others, params)
    t_end, y_end = float(rec.times[-1]), int(rec.states[-1])
    oracle = np.zeros(structure.s)
    accepted = 0
    while accepted < draws:
        path = sample_conditional_unit(ch, int(rec.states[0]), params, seed=rng, horizon=t_end)
        if path.end == t_end and path.state_at(t_end) == y_end:
            oracle[path.state_at(mid) - 1] += 1
            accepted += 1
    start = init_latent(PanelData([rec], structure.s), structure).units[0]
    units = list(others.units) + [start]
    u = len(units) - 1
    got = np.zeros(structure.s)
    for it in range(200 + draws):
        units[u] = resample_unit(u, PopulationTrajectory(units, structure.s), rec, params, rng)
        if it >= 200:
            got[units[u].state_at(mid) - 1] += 1
    return 0.5 * np.abs(got / got.sum() - oracle / oracle.sum()).sum()


def test_criterion_6_ffbs_bridge(study_params, study_structure):
    # the two live states 1 <-> 2 form the bidirectional chain; state 3 is unreachable by the conditioning
    t0 = time.perf_counter()
    alone = _bridge_tv(PopulationTrajectory([], 3), PanelRecord("x", [0.0, 1.0], [1, 1], 1.0, 1), 0.5,
                       study_params, study_structure, 20_000, seed=60)
    others = simulate_population(4, [1, 2, 1, 2], study_params, horizon=2.0, seed=6)
    crowd = _bridge_tv(others, PanelRecord("x", [0.0, 2.0], [1, 2], 2.0, 1), 1.0,
                       study_params, study_structure, 20_000, seed=61)
    elapsed = time.perf_counter() - t0
    ok = alone < 0.05 and crowd < 0.05 and elapsed < 120
    report(6, ok, f"TV {alone:.4f} alone, {crowd:.4f} with 4 others, {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="session")
def study():
    cfg = io.builtin_config("simulation_study")
    params = cfg.model_params()
    traj = simulate_population(250, cfg.initial_states(250), params, seed=cfg.seed)
    panel = observe_panel(traj, cfg.structure, 1.0)
    return cfg, params, traj, panel


@pytest.fixture(scope="session")
def chain_l25(study):
    cfg, _, _, panel = study
    t0 = time.perf_counter()
    draws = run_chain(panel, cfg.structure, cfg.prior, cfg.mcmc_config(latent_period=25, seed=1), cfg.rho)
    return draws, time.perf_counter() - t0


@pytest.fixture(scope="session")
def chain_l5(study):
    cfg, _, _, panel = study
    return run_chain(panel, cfg.structure, cfg.prior, cfg.mcmc_config(latent_period=5, seed=1), cfg.rho)


def test_criterion_7_simulation_study(chain_l25):
    draws, elapsed = chain_l25
    m = draws.mean()
    nu12, g21 = m["nu[1,2]"], m["gamma[2,1]"]
    ok = 0.15 <= nu12 <= 0.25 and 0.67 <= g21 <= 1.07 and elapsed <= 1200
    report(7, ok, f"nu12 {nu12:.3f} in [0.15, 0.25], gamma21 {g21:.3f} in [0.67, 1.07], {elapsed:.0f}s")
    assert ok


def test_criterion_7b_nu11_downward_bias(chain_l25):
    nu11 = chain_l25[0].mean()["nu[1,1]"]
    ok = nu11 < 0.35
    report("7b", ok, f"mean nu11 {nu11:.3f}, required < 0.35")
    assert ok


def test_criterion_8_approximate_sampler(chain_l25, chain_l5):
    a, b = chain_l25[0].mean(), chain_l5.mean()
    rel = {k: abs(a[k] - b[k]) / abs(b[k]) for k in ("nu[1,2]", "gamma[2,1]", "gamma[2,2]")}
    ok = max(rel.values()) <= 0.10
    report(8, ok, ", ".join(f"{k} {v:.3f}" for k, v in rel.items()))
    assert ok


def test_criterion_9_posterior_survival(study, chain_l25):
    _, params, traj, _ = study
    grid = np.linspace(0.0, 10.0, 201)
    worst = {}
    for b in (1, 2):
        curve = posterior_survival(chain_l25[0], b, grid, thin=10)
        true = predictive_survival(traj, params, b, grid)
        worst[b] = float(np.max(np.abs(curve.survival - true)))
    ok = max(worst.values()) <= 0.05
    report(9, ok, ", ".join(f"baseline {b}: {w:.4f}" for b, w in worst.items()))
    assert ok


@pytest.mark.skipif(not os.environ.get("MSURV_CAV_DATA"), reason="set MSURV_CAV_DATA to the cav CSV to run")
def test_criterion_10_cav_smoke(tmp_path):
    from msurv.cli import main
    out = tmp_path / "cav_draws.csv"
    code = main(["fit", "--data", os.environ["MSURV_CAV_DATA"], "--format", "cav", "--config", "builtin:cav",
                 "--seed", "1", "--out", str(out)])
    assert code == 0
    assert main(["predict", "--draws", str(out), "--baseline-state", "1", "--out", str(tmp_path / "c.csv")]) == 0
    m = io.read_draws(out).mean()
    diffs = {"nu[1,1]": m["nu[1,1]"] - 0.75, "nu[1,2]": m["nu[1,2]"] - 0.52, "alpha[2,1]": m["alpha[2,1]"] - 0.38}
    ok = all(abs(v) <= 0.20 for v in diffs.values())
    report(10, ok, "diagnostic; " + ", ".join(f"{k} {v:+.3f}" for k, v in diffs.items()))
    assert ok
