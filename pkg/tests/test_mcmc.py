import math

import numpy as np
import pytest
from scipy import integrate, stats

from msurv.mcmc import (ImpossibleDataError, McmcConfig, PriorSpec, chain_workers, init_latent,
                        pair_log_likelihood, resample_unit, run_chain, update_alpha, update_gamma_mh,
                        update_lambda)
from msurv.measure import ModelParams
from msurv.predictive import continuous_hazard
from msurv.statespace import build_graph, validate
from msurv.trajectory import (PanelData, PanelRecord, PopulationTrajectory, UnitPath, build_timeline,
                              observe_panel, simulate_population)

from helpers import CAV_PARTITION


@pytest.fixture
def illness_death():
    return validate(build_graph("illness_death"))


@pytest.fixture
def cav():
    return validate(build_graph("cav"), CAV_PARTITION)


def _panel(records, s):
    return PanelData([PanelRecord(*r) for r in records], s)


def test_init_midpoint(survival):
    st = validate(build_graph("illness_death"))
    panel = _panel([("a", [0.0, 2.0], [1, 2], 2.0, 1)], 3)
    path = init_latent(panel, st, jitter=False).units[0]
    np.testing.assert_array_equal(path.times, [0.0, 1.0])
    np.testing.assert_array_equal(path.states, [1, 2])
    assert path.end == 2.0


def test_init_two_steps_at_thirds(cav):
    panel = _panel([("a", [0.0, 3.0], [1, 3], 3.0, 1)], 4)
    path = init_latent(panel, cav, jitter=False).units[0]
    np.testing.assert_allclose(path.times, [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(path.states, [1, 2, 3])


def test_init_repeated_state_no_jumps(cav):
    panel = _panel([("a", [0.0, 1.0, 2.0], [2, 2, 2], 2.5, 1)], 4)
    path = init_latent(panel, cav, jitter=False).units[0]
    assert path.jumps() == []


def test_init_failure_at_V(illness_death):
    panel = _panel([("a", [0.0, 1.0], [1, 2], 3.0, 0)], 3)
    path = init_latent(panel, illness_death, jitter=False).units[0]
    assert path.times[-1] == 3.0 and path.final_state == 3


def test_init_impossible(illness_death):
    panel = _panel([("a", [0.0, 1.0], [2, 1], 2.0, 1)], 3)
    with pytest.raises(ImpossibleDataError):
        init_latent(panel, illness_death)


def _lone_rates(params, s):
    zero = [0] * s
    return {e: continuous_hazard(e[0], e[1], zero, params) for e in params.structure.graph.edges}


def _iterate(rec, params, structure, n, seed, thin=5):
    # the latent update is a Markov kernel; draws come from a thinned run
    traj = init_latent(PanelData([rec], structure.s), structure)
    rng = np.random.default_rng(seed)
    out = []
    for it in range(100 + n * thin):
        traj = PopulationTrajectory([resample_unit(0, traj, rec, params, rng)], structure.s)
        if it >= 100 and it % thin == 0:
            out.append(traj.units[0])
    return out


def test_failure_bridge_route_probability(illness_death):
    p = ModelParams.create(illness_death, nu={(1, 2): 0.8, (1, 3): 0.5, (2, 3): 1.4})
    q = _lone_rates(p, 3)
    V = 1.5
    q1, q2 = q[(1, 2)] + q[(1, 3)], q[(2, 3)]
    direct = q[(1, 3)] * math.exp(-q1 * V)
    via = integrate.quad(lambda u: q[(1, 2)] * math.exp(-q1 * u - q2 * (V - u)) * q[(2, 3)], 0, V)[0]
    want = via / (direct + via)
    rec = PanelRecord("a", [0.0], [1], V, 0)
    n = 4000
    hits = 0
    taus = []
    for path in _iterate(rec, p, illness_death, n, seed=4):
        if 2 in path.states:
            hits += 1
            taus.append(path.times[1])
    assert abs(hits / n - want) < 4 * math.sqrt(want * (1 - want) / n)
    # jump time given the detour has density proportional to exp(-(q1 - q2) u)
    k = q1 - q2
    cdf = (lambda u: np.expm1(-k * u) / math.expm1(-k * V)) if k else (lambda u: u / V)
    assert stats.kstest(taus, cdf).pvalue > 0.01


def test_censored_bridge_vs_rejection(illness_death):
    p = ModelParams.create(illness_death, nu={(1, 2): 0.9, (1, 3): 0.4, (2, 3): 0.6})
    rec = PanelRecord("a", [0.0, 1.0], [1, 2], 1.0, 1)
    got = [u.times[1] for u in _iterate(rec, p, illness_death, 3000, seed=5)]
    oracle = []
    seed = 0
    while len(oracle) < 3000:
        u = simulate_population(1, [1], p, horizon=1.0, seed=seed).units[0]
        seed += 1
        if u.end == 1.0 and u.state_at(1.0) == 2:
            oracle.append(u.times[1])
    assert stats.ks_2samp(got, oracle).pvalue > 0.01


def test_resample_keeps_records(study_params, study_structure):
    traj = simulate_population(12, [1, 2] * 6, study_params, seed=2)
    panel = observe_panel(traj, study_structure, 1.0)
    cur = init_latent(panel, study_structure)
    rng = np.random.default_rng(0)
    units = list(cur.units)
    for u in range(cur.n):
        units[u] = resample_unit(u, PopulationTrajectory(units, 3), panel.records[u], study_params, rng)
    assert len(units) == 12


def _deaths(times):
    return PopulationTrajectory([UnitPath(np.array([0.0, t]), np.array([1, 2]), math.inf) for t in times], 2)


def test_update_lambda_hand_case(survival):
    # at-risk counts 3, 2, 1 on unit intervals give an integral of 11/6 + 3/2 + 1
    tl = build_timeline(_deaths([1.0, 2.0, 3.0]), survival)
    p = ModelParams.create(survival, nu=1.0, rho=1.0)
    prior = PriorSpec()
    rng = np.random.default_rng(0)
    draws = np.array([update_lambda((1, 2), tl, p, prior, rng).nu[(1, 2)] for _ in range(20000)])
    a, b = 4.0, 1.0 + 13 / 3
    assert draws.mean() == pytest.approx(a / b, rel=0.02)
    assert draws.var() == pytest.approx(a / b ** 2, rel=0.05)
    assert stats.kstest(draws[:3000], stats.gamma(a, scale=1 / b).cdf).pvalue > 0.01


def test_update_lambda_rho_scaling(survival):
    tl = build_timeline(_deaths([1.0, 2.0, 3.0]), survival)
    rho = 2.5
    p = ModelParams.create(survival, nu=1.0, rho=rho)
    rng = np.random.default_rng(1)
    lam = np.array([update_lambda((1, 2), tl, p, PriorSpec(), rng).lam((1, 2)) for _ in range(20000)])
    from scipy.special import digamma
    integral = sum(digamma(rho + k) - digamma(rho) for k in (3, 2, 1))
    assert lam.mean() == pytest.approx(4.0 / (1.0 + integral / rho), rel=0.02)


def test_update_alpha_dirichlet(cav):
    paths = [UnitPath(np.array([0.0, t]), np.array([2, 1]), 10.0) for t in (1.0, 2.0, 3.0)]
    paths.append(UnitPath(np.array([0.0, 4.0]), np.array([2, 3]), 10.0))
    tl = build_timeline(PopulationTrajectory(paths, 4), cav)
    p = ModelParams.create(cav)
    prior = PriorSpec(dirichlet={(2, 1): {1: 2.0, 3: 8.0}})
    rng = np.random.default_rng(3)
    w = np.array([update_alpha(2, 1, tl, p, prior, rng).alpha[(2, 1)] for _ in range(20000)])
    a, b = 5.0, 9.0
    assert w.mean() == pytest.approx(a / (a + b), rel=0.02)
    assert w.var() == pytest.approx(a * b / ((a + b) ** 2 * (a + b + 1)), rel=0.06)


def test_gamma_zero_step_accepts(study_params, study_structure):
    tl = build_timeline(simulate_population(10, [1, 2] * 5, study_params, seed=1), study_structure)
    rng = np.random.default_rng(0)
    for key, l in study_params.free_gammas():
        for _ in range(20):
            new, ok = update_gamma_mh(key, l, tl, study_params, PriorSpec(), rng, step=0.0)
            assert ok and new.gamma[key][l] == study_params.gamma[key][l]


def test_gamma_reference_fixed(study_params, study_structure):
    tl = build_timeline(simulate_population(4, [1, 2, 1, 2], study_params, seed=1), study_structure)
    pair = study_structure.pairs[0]
    with pytest.raises(ValueError):
        update_gamma_mh(pair.key, pair.reference, tl, study_params, PriorSpec(), np.random.default_rng())


def test_gamma_chain_targets_posterior(study_params, study_structure):
    tl = build_timeline(simulate_population(6, [1, 2] * 3, study_params, seed=8), study_structure)
    key, l = study_params.free_gammas()[0]
    prior = PriorSpec()
    k = study_structure.pair_index(key)
    edges = np.linspace(-4, 4, 41)
    fine = np.linspace(-4, 4, 4001)
    logt = np.array([pair_log_likelihood(tl, study_params.with_gamma(key, l, math.exp(z)), k) - z * z / 2
                     for z in fine])
    dens = np.exp(logt - logt.max())
    cdf = np.r_[0, np.cumsum((dens[1:] + dens[:-1]) / 2 * np.diff(fine))]
    cdf /= cdf[-1]
    target = np.diff(np.interp(edges, fine, cdf))
    rng = np.random.default_rng(11)
    p = study_params
    zs = []
    for it in range(30000):
        p, _ = update_gamma_mh(key, l, tl, p, prior, rng, step=1.0)
        if it >= 1000:
            zs.append(math.log(p.gamma[key][l]))
    hist = np.histogram(zs, bins=edges)[0] / len(zs)
    assert 0.5 * np.abs(hist - target).sum() < 0.05


def test_complete_data_chain_skips_latents(study_params, study_structure):
    traj = simulate_population(10, [1, 2] * 5, study_params, seed=3)
    draws = run_chain(traj, study_structure, PriorSpec(), McmcConfig(iterations=30, burn_in=10, seed=1))
    assert draws.n_draws == 20
    assert len(draws.latents) == 1 and set(draws.latent_index) == {0}


def test_chain_deterministic(study_params, study_structure):
    panel = observe_panel(simulate_population(8, [1, 2] * 4, study_params, seed=3), study_structure)
    cfg = McmcConfig(iterations=12, burn_in=2, latent_period=2, seed=7)
    a = run_chain(panel, study_structure, PriorSpec(), cfg)
    b = run_chain(panel, study_structure, PriorSpec(), cfg)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.names == b.names and a.n_draws == 10


def test_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(iterations=100, burn_in=100)
    with pytest.raises(ValueError):
        McmcConfig(latent_period=0)
    with pytest.raises(ValueError):
        PriorSpec(gamma_shape=0.0)


def test_chain_workers_cap(monkeypatch):
    monkeypatch.setenv("MSURV_THREADS", "2")
    assert chain_workers(5) == 2
    assert chain_workers(1) == 1
    monkeypatch.setenv("MSURV_THREADS", "junk")
    assert chain_workers(3) >= 1


def test_update_lambda_example_gamma_4_3(survival):
    # harmonic integrals 11/6 * 0.6 + 3/2 * 0.2 + 1 * 0.6 = 2 with three deaths
    tl = build_timeline(_deaths([0.6, 0.8, 1.4]), survival)
    p = ModelParams.create(survival, nu=1.0, rho=1.0)
    rng = np.random.default_rng(2)
    draws = np.array([update_lambda((1, 2), tl, p, PriorSpec(), rng).nu[(1, 2)] for _ in range(4000)])
    assert stats.kstest(draws, stats.gamma(4.0, scale=1 / 3.0).cdf).pvalue > 0.01


def test_update_lambda_empty_is_prior(survival):
    tl = build_timeline(PopulationTrajectory([], 2), survival)
    p = ModelParams.create(survival, nu=1.0, rho=1.0)
    rng = np.random.default_rng(3)
    prior = PriorSpec(gamma_shape=2.0, gamma_rate=5.0)
    draws = np.array([update_lambda((1, 2), tl, p, prior, rng).nu[(1, 2)] for _ in range(4000)])
    assert stats.kstest(draws, stats.gamma(2.0, scale=1 / 5.0).cdf).pvalue > 0.01


def test_update_alpha_single_destination(illness_death):
    tl = build_timeline(PopulationTrajectory([], 3), illness_death)
    p = ModelParams.create(illness_death)
    assert update_alpha(1, 2, tl, p, PriorSpec(), np.random.default_rng()).alpha == p.alpha


def test_gamma_rejects_zero_rate_proposal(study_params, study_structure, monkeypatch):
    import msurv.mcmc as mcmc
    tl = build_timeline(simulate_population(6, [1, 2] * 3, study_params, seed=2), study_structure)
    key, l = study_params.free_gammas()[0]
    real = mcmc.pair_log_likelihood
    # any proposal makes some latent transition impossible
    monkeypatch.setattr(mcmc, "pair_log_likelihood",
                        lambda t, p, k: real(t, p, k) if p is study_params else -math.inf)
    rng = np.random.default_rng(0)
    for _ in range(20):
        new, ok = update_gamma_mh(key, l, tl, study_params, PriorSpec(), rng, step=0.5)
        assert not ok and new is study_params


def test_survival_bridge_stays_alive(survival, harmonic):
    rec = PanelRecord("a", [0.0, 1.0, 2.0], [1, 1, 1], 2.0, 1)
    traj = init_latent(PanelData([rec], 2), survival)
    rng = np.random.default_rng(0)
    for _ in range(50):
        path = resample_unit(0, traj, rec, harmonic, rng)
        assert path.jumps() == [] and path.end == 2.0
