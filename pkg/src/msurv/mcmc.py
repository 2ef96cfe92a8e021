"""Posterior sampling for intermittently observed panels.

Each latent update resamples one unit's path given all others with
uniformization and forward filtering, backward sampling. Parameters are then
updated from the complete-data likelihood: random-walk Metropolis on log
``gamma``, conjugate Gamma draws for ``lambda = nu * rho`` and Dirichlet draws
for the destination weights.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import digamma as _psi

from . import kernels
from .measure import ModelParams
from .predictive import ConditionalHazard, DislocationCache
from .statespace import BlockStructure
from .trajectory import (PanelData, PanelRecord, PopulationTrajectory, Timeline, UnitPath, build_timeline,
                         event_log_lambda)

log = logging.getLogger(__name__)


class ImpossibleDataError(ValueError):
    """A panel record that no path on the graph can satisfy."""


@dataclass
class PriorSpec:
    """Priors: Gamma(shape, rate) on each pair's ``lambda``, Dirichlet weights
    per destination group keyed ``(l, j')``, normal on every free log ``gamma``."""

    gamma_shape: Mapping | float = 1.0
    gamma_rate: Mapping | float = 1.0
    dirichlet: Mapping = field(default_factory=dict)
    log_gamma_mean: float = 0.0
    log_gamma_sd: float = 1.0

    def __post_init__(self):
        for v in _values(self.gamma_shape) + _values(self.gamma_rate):
            if not v > 0:
                raise ValueError("Gamma hyperparameters must be positive")
        for w in self.dirichlet.values():
            if any(not float(x) > 0 for x in w.values()):
                raise ValueError("Dirichlet weights must be positive")
        if not self.log_gamma_sd > 0:
            raise ValueError("log-gamma prior sd must be positive")

    def shape(self, key) -> float:
        return float(self.gamma_shape if np.isscalar(self.gamma_shape) else self.gamma_shape[tuple(key)])

    def rate(self, key) -> float:
        return float(self.gamma_rate if np.isscalar(self.gamma_rate) else self.gamma_rate[tuple(key)])

    def weights(self, l: int, jp: int, dests) -> np.ndarray:
        w = self.dirichlet.get((l, jp), {})
        return np.array([float(w.get(m, 1.0)) for m in dests])


def _values(x):
    return [float(x)] if np.isscalar(x) else [float(v) for v in x.values()]


@dataclass
class McmcConfig:
    iterations: int = 1000
    burn_in: int = 100
    latent_period: int = 1
    step: float = 0.1
    uniformization: float = 2.0
    seed: int | None = None
    adapt: bool = True
    keep_latents: bool = True
    init_jitter: bool = False

    def __post_init__(self):
        if self.iterations <= self.burn_in or self.burn_in < 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.latent_period < 1:
            raise ValueError("latent period must be at least 1")
        if not self.uniformization > 1:
            raise ValueError("uniformization multiplier must exceed 1")
        if self.step < 0:
            raise ValueError("step must be non-negative")


@dataclass
class PosteriorDraws:
    names: list
    iterations: np.ndarray
    values: np.ndarray  # (draws, parameters)
    acceptance: dict = field(default_factory=dict)
    params: list = field(default_factory=list)
    latents: list = field(default_factory=list)
    latent_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    steps: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(self.values.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def mean(self) -> dict:
        return {n: float(self.values[:, k].mean()) for k, n in enumerate(self.names)} if self.n_draws else {}

    def summary(self, probs=(0.05, 0.95)) -> list:
        rows = []
        for k, n in enumerate(self.names):
            col = self.values[:, k]
            rows.append((n, float(col.mean()), *[float(np.quantile(col, p)) for p in probs]))
        return rows


# ---------------------------------------------------------------- initialisation


def _spread(t0: float, t1: float, k: int, jitter: float) -> np.ndarray:
    return t0 + (t1 - t0) * np.arange(1, k + 1) / (k + 1) + jitter


def init_latent(panel: PanelData, structure: BlockStructure, jitter: bool = True) -> PopulationTrajectory:
    """A feasible starting trajectory from a panel.

    Each change between consecutive observations is bridged along a
    shortest directed path with evenly spaced jumps. Failures happen exactly
    at ``V``. With ``jitter`` the inserted times get a tiny per-unit offset so
    that unrelated units never jump at the same instant.
    """
    g = structure.graph
    absorbing = set(g.absorbing)
    units = []
    for u, rec in enumerate(panel.records):
        times = [rec.entry]
        states = [int(rec.states[0])]
        stops = list(zip(rec.times[1:], rec.states[1:]))
        for (ta, ya), (tb, yb) in zip(zip(rec.times, rec.states), stops):
            units_path = g.shortest_path(int(ya), int(yb))
            if units_path is None:
                raise ImpossibleDataError(f"unit {rec.unit_id}: no path from state {ya} to {yb}")
            eps = (tb - ta) * 1e-7 * (u + 1) / (panel.n + 1) if jitter else 0.0
            jt = _spread(ta, tb, len(units_path) - 1, eps)
            times += list(jt)
            states += units_path[1:]
        last_t, last_y = float(rec.times[-1]), int(rec.states[-1])
        if rec.delta == 0:
            targets = [rec.final_state] if rec.final_state is not None else sorted(absorbing)
            best = None
            for b in targets:
                pth = g.shortest_path(last_y, b)
                if pth is not None and (best is None or len(pth) < len(best)):
                    best = pth
            if best is None:
                raise ImpossibleDataError(f"unit {rec.unit_id}: cannot reach an absorbing state from {last_y}")
            eps = (rec.V - last_t) * 1e-7 * (u + 1) / (panel.n + 1) if jitter else 0.0
            mids = _spread(last_t, rec.V, len(best) - 2, eps) if len(best) > 2 else []
            times += list(mids) + [rec.V]
            states += best[1:]
            end = math.inf
        else:
            end = rec.V
            if rec.final_state is not None and rec.final_state != last_y:
                pth = g.shortest_path(last_y, rec.final_state)
                if pth is None:
                    raise ImpossibleDataError(f"unit {rec.unit_id}: no path to final state {rec.final_state}")
                eps = (rec.V - last_t) * 1e-7 * (u + 1) / (panel.n + 1) if jitter else 0.0
                jt = _spread(last_t, rec.V, len(pth) - 1, eps) if rec.V > last_t else []
                times += list(jt)
                states += pth[1:]
        units.append(UnitPath(np.array(times), np.array(states), end))
    return PopulationTrajectory(units, structure.s, [r.unit_id for r in panel.records])


def check_record(path: UnitPath, rec: PanelRecord, structure: BlockStructure) -> None:
    """Assert that a path honours every observation and the terminal record."""
    absorbing = set(structure.graph.absorbing)
    for t, y in zip(rec.times, rec.states):
        if path.state_at(t) != y:
            raise AssertionError(f"unit {rec.unit_id}: path in state {path.state_at(t)} at t={t}, observed {y}")
    if any(int(v) in absorbing for v in path.states[:-1]):
        raise AssertionError(f"unit {rec.unit_id}: path leaves an absorbing state")
    if rec.delta == 0:
        if path.final_state not in absorbing or path.times[-1] != rec.V:
            raise AssertionError(f"unit {rec.unit_id}: failure not at V={rec.V}")
        if rec.final_state is not None and path.final_state != rec.final_state:
            raise AssertionError(f"unit {rec.unit_id}: wrong absorbing state")
    else:
        if path.end != rec.V or path.state_at(rec.V) in absorbing:
            raise AssertionError(f"unit {rec.unit_id}: censored record violated")
        if rec.final_state is not None and path.state_at(rec.V) != rec.final_state:
            raise AssertionError(f"unit {rec.unit_id}: wrong state at censoring")


# ---------------------------------------------------------------- latent update


def resample_unit(u: int, traj: PopulationTrajectory, rec: PanelRecord, params: ModelParams,
                  rng: np.random.Generator, C: float = 2.0, cache: DislocationCache | None = None) -> UnitPath:
    """Draw unit ``u``'s path given every other unit and its panel record.

    The dominating rate on each stretch is ``C`` times the largest total exit
    rate of any live state. Virtual jumps come from a Poisson process with
    rate ``Omega - q(previous state)``; the grid also holds the previous
    jump times and the others' event times, where the atom kernels apply.
    """
    st = params.structure
    absorbing = np.array([st.graph.is_absorbing(i) for i in st.graph.states])
    s = st.s
    ch = ConditionalHazard.from_others(traj, params, exclude=u, cache=cache)
    prev = traj.units[u]
    entry, V = rec.entry, float(rec.V)
    failed = rec.delta == 0

    exit_rates = -np.diagonal(ch.rates, axis1=1, axis2=2)
    omega = C * np.max(np.where(absorbing[None, :], 0.0, exit_rates), axis=1)

    # others' events that can carry this unit along
    atoms = []
    terminal_events = []
    stay_only = []
    for ev in ch.events:
        if not (entry < ev.time <= V):
            continue
        if failed and ev.time == V:
            dest_block = st.pairs[ev.pair].key[1]
            if all(absorbing[i - 1] for i in st.partition.blocks[dest_block - 1]):
                terminal_events.append(ev)
            else:
                stay_only.append(ev)
            continue
        atoms.append(ev)
    atom_times = {ev.time for ev in atoms}

    # virtual jump times on each constant-rate stretch of the previous path
    prev_jumps = [t for t, _, _ in prev.jumps() if t < V or not failed]
    prev_jumps = [t for t in prev_jumps if t not in atom_times and not (failed and t == V)]
    cuts = np.unique(np.r_[entry, ch.bounds[(ch.bounds > entry) & (ch.bounds < V)], prev_jumps, V])
    virtual = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        k = ch.segment(a)
        y = prev.state_at(a)
        rate = omega[k] - exit_rates[k, y - 1]
        if rate > 0:
            m = rng.poisson(rate * (b - a))
            if m:
                virtual.extend(a + (b - a) * rng.random(m))
    grid = sorted(set(virtual) | set(prev_jumps))
    grid = [t for t in grid if entry < t < V or (not failed and t == V)]

    # steps: (time, order, kernel, mask); kernels act before observations at equal times
    steps = []
    eye = np.eye(s)
    uniformized = {}
    for t in grid:
        k = ch.segment(t)
        if omega[k] > 0:
            B = uniformized.get(k)
            if B is None:
                B = uniformized[k] = eye + ch.rates[k] / omega[k]
            steps.append((t, 0, B, None))
    for ev in atoms:
        steps.append((ev.time, 1, ch.kernel(ev), None))
    for t, y in zip(rec.times[1:], rec.states[1:]):
        mask = np.zeros(s)
        mask[int(y) - 1] = 1.0
        steps.append((float(t), 2, None, mask))
    final = np.zeros(s)
    death_w = None
    if failed:
        for ev in stay_only:
            final_k = ch.kernel(ev)
            steps.append((V, 2, None, np.diagonal(final_k).copy()))
        Qv = ch.rates[int(np.searchsorted(ch.bounds, V, side="left"))]
        allowed = [rec.final_state] if rec.final_state is not None else [i for i in st.graph.states if absorbing[i - 1]]
        death_w = np.zeros((s, s))
        for i in st.graph.states:
            for b in allowed:
                e = (i, b)
                if e not in st.edge_pair:
                    continue
                p_idx = st.edge_pair[e]
                evs = [ev for ev in terminal_events if ev.pair == p_idx]
                if evs:
                    death_w[i - 1, b - 1] = ch.kernel(evs[0])[i - 1, b - 1]
                else:
                    death_w[i - 1, b - 1] = Qv[i - 1, b - 1]
        final = death_w.sum(axis=1)
    else:
        if rec.final_state is not None:
            final[rec.final_state - 1] = 1.0
        else:
            final[~absorbing] = 1.0
    steps.append((V, 3, None, final))
    steps.sort(key=lambda x: (x[0], x[1]))

    K = len(steps)
    mats = np.empty((K, s, s))
    masks = np.ones((K, s))
    for n, (_, _, ker, mask) in enumerate(steps):
        mats[n] = eye if ker is None else ker
        if mask is not None:
            masks[n] = mask
    init = np.zeros(s)
    init[int(rec.states[0]) - 1] = 1.0
    alphas, logz = kernels.forward_filter(init, mats, masks)
    if not np.isfinite(logz):
        raise ImpossibleDataError(f"unit {rec.unit_id}: the panel record has zero probability under the model")
    path_states = kernels.backward_sample(alphas, mats, rng.random(K + 1))
    times = [entry]
    states = [int(path_states[0]) + 1]
    for n in range(K):
        y = int(path_states[n + 1]) + 1
        if y != states[-1]:
            times.append(steps[n][0])
            states.append(y)
    if failed:
        w = death_w[states[-1] - 1]
        b = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
        times.append(V)
        states.append(min(b, s - 1) + 1)
        end = math.inf
    else:
        end = V
    path = UnitPath(np.array(times), np.array(states), end)
    check_record(path, rec, st)
    return path


# ---------------------------------------------------------------- parameter updates


def _pair_events(tl: Timeline, k: int) -> list:
    return [ev for ev in tl.events if ev.pair == k]


def pair_log_likelihood(tl: Timeline, params: ModelParams, k: int) -> float:
    """Terms of the complete-data log density that involve pair ``k``."""
    view = params.views[k]
    out = 0.0
    if len(tl.config):
        S = tl.config[:, view.src] @ view.gamma
        live = S > 0
        out -= view.nu * float(np.dot(tl.durations[live], _psi(view.rho + S[live]) - _psi(view.rho)))
    for ev in _pair_events(tl, k):
        out += event_log_lambda(ev, params)
        if out == -math.inf:
            break
    return out


def normalized_integral(tl: Timeline, params: ModelParams, k: int) -> float:
    view = params.views[k]
    if not len(tl.config):
        return 0.0
    S = tl.config[:, view.src] @ view.gamma
    live = S > 0
    return float(np.dot(tl.durations[live], _psi(view.rho + S[live]) - _psi(view.rho)))


def update_lambda(key, tl: Timeline, params: ModelParams, prior: PriorSpec, rng: np.random.Generator,
                  step: float = 0.1) -> ModelParams:
    """Draw ``lambda = nu * rho`` for one pair and return the updated parameters.

    The rate increment is the nu-free event-rate integral divided by ``rho``;
    the shape increment is the number of the pair's events. Pairs with
    erosion constants use a Metropolis step on ``log lambda`` instead.
    """
    st = params.structure
    k = st.pair_index(key)
    view = params.views[k]
    a, b = prior.shape(key), prior.rate(key)
    if any(c > 0 for c in view.erosion.values()):
        cur = params.lam(key)
        prop = cur * math.exp(step * rng.standard_normal())
        new = params.with_nu(key, prop / view.rho)
        log_r = (pair_log_likelihood(tl, new, k) - pair_log_likelihood(tl, params, k)
                 + a * (math.log(prop) - math.log(cur)) - b * (prop - cur))
        return new if math.log(rng.random()) < log_r else params
    n_events = len(_pair_events(tl, k))
    integral = normalized_integral(tl, params, k)
    lam = rng.gamma(a + n_events, 1.0 / (b + integral / view.rho))
    return params.with_nu(key, lam / view.rho)


def transition_counts(tl: Timeline) -> dict:
    counts: dict = {}
    for ev in tl.events:
        for e, c in ev.moves:
            counts[e] = counts.get(e, 0) + c
    return counts


def update_alpha(l: int, jp: int, tl: Timeline, params: ModelParams, prior: PriorSpec,
                 rng: np.random.Generator, counts: dict | None = None) -> ModelParams:
    """Dirichlet draw of the destination weights of source ``l`` into block ``jp``."""
    st = params.structure
    j = st.partition.block_of(l)
    dests = st.pair((j, jp)).dests[l]
    if len(dests) == 1:
        return params
    counts = transition_counts(tl) if counts is None else counts
    conc = prior.weights(l, jp, dests) + np.array([counts.get((l, m), 0) for m in dests])
    w = rng.dirichlet(conc)
    w = w / w.sum()
    return params.with_alpha({(l, m): float(x) for m, x in zip(dests, w)})


def update_gamma_mh(key, state: int, tl: Timeline, params: ModelParams, prior: PriorSpec,
                    rng: np.random.Generator, step: float = 0.1):
    """Random-walk Metropolis on ``log gamma``; returns ``(params, accepted)``."""
    st = params.structure
    k = st.pair_index(key)
    if state == st.pairs[k].reference:
        raise ValueError(f"gamma of reference state {state} is fixed at 1")
    cur = params.gamma[tuple(key)][state]
    z = math.log(cur)
    z_new = z + step * rng.standard_normal()
    new = params.with_gamma(key, state, math.exp(z_new))
    m, sd = prior.log_gamma_mean, prior.log_gamma_sd
    log_prior = (-(z_new - m) ** 2 + (z - m) ** 2) / (2 * sd * sd)
    ll_new = pair_log_likelihood(tl, new, k)
    if ll_new == -math.inf:
        return params, False
    log_r = ll_new - pair_log_likelihood(tl, params, k) + log_prior
    if math.log(rng.random()) < log_r:
        return new, True
    return params, False


# ---------------------------------------------------------------- driver


def initial_params(structure: BlockStructure, prior: PriorSpec, rho=1.0, init: Mapping | None = None) -> ModelParams:
    """Prior-mean starting values unless ``init`` supplies them."""
    init = dict(init or {})
    base = ModelParams.create(structure, rho=rho)
    nu = {p.key: prior.shape(p.key) / prior.rate(p.key) / base.rho[p.key] for p in structure.pairs}
    nu.update({tuple(k): float(v) for k, v in init.get("nu", {}).items()})
    alpha = {}
    for p in structure.pairs:
        for l in p.sources:
            w = prior.weights(l, p.key[1], p.dests[l])
            for m, x in zip(p.dests[l], w / w.sum()):
                alpha[(l, m)] = float(x)
    alpha.update({tuple(k): float(v) for k, v in init.get("alpha", {}).items()})
    return ModelParams.create(structure, nu=nu, rho=rho, gamma=init.get("gamma"), alpha=alpha, c=init.get("c"))


def run_chain(data, structure: BlockStructure, prior: PriorSpec, config: McmcConfig, rho=1.0,
              init: Mapping | None = None, progress=None) -> PosteriorDraws:
    """Run one chain. ``data`` is a :class:`PanelData` or a complete trajectory.

    With a complete trajectory the latent step is skipped.
    """
    rng = np.random.default_rng(config.seed)
    params = initial_params(structure, prior, rho, init)
    if isinstance(data, PopulationTrajectory):
        traj, panel = data, None
    else:
        data.validate(structure)
        traj, panel = init_latent(data, structure, config.init_jitter), data
    tl = build_timeline(traj, structure)
    free = params.free_gammas()
    groups = params.alpha_groups()
    names = list(params.flat())
    steps = {f"gamma[{l},{key[1]}]": config.step for key, l in free}
    tries = {n: 0 for n in steps}
    accepts = {n: 0 for n in steps}
    window = {n: [0, 0] for n in steps}
    rows, iters, kept_params, latent_index = [], [], [], []
    latents = [traj] if config.keep_latents else []
    for it in range(config.iterations):
        if panel is not None and it % config.latent_period == 0:
            cache = DislocationCache(params)
            units = list(traj.units)
            for u in range(traj.n):
                cur = PopulationTrajectory(units, traj.s, traj.ids)
                units[u] = resample_unit(u, cur, panel.records[u], params, rng, config.uniformization, cache)
            traj = PopulationTrajectory(units, traj.s, traj.ids)
            tl = build_timeline(traj, structure)
            if config.keep_latents:
                latents.append(traj)
        for key, l in free:
            name = f"gamma[{l},{key[1]}]"
            params, ok = update_gamma_mh(key, l, tl, params, prior, rng, steps[name])
            window[name][0] += ok
            window[name][1] += 1
            if it >= config.burn_in:
                tries[name] += 1
                accepts[name] += ok
            if config.adapt and it < config.burn_in and window[name][1] == 50:
                rate = window[name][0] / 50
                if rate < 0.2:
                    steps[name] /= 2
                elif rate > 0.4:
                    steps[name] *= 2
                window[name] = [0, 0]
        for p in structure.pairs:
            params = update_lambda(p.key, tl, params, prior, rng, config.step)
        counts = transition_counts(tl)
        for l, jp, _ in groups:
            params = update_alpha(l, jp, tl, params, prior, rng, counts)
        if it >= config.burn_in:
            flat = params.flat()
            rows.append([flat[n] for n in names])
            iters.append(it)
            kept_params.append(params)
            latent_index.append(len(latents) - 1)
        if progress is not None:
            progress(it, params)
    acceptance = {n: (accepts[n] / tries[n] if tries[n] else float("nan")) for n in steps}
    return PosteriorDraws(names, np.array(iters, dtype=np.int64),
                          np.array(rows, dtype=float).reshape(len(rows), len(names)), acceptance,
                          kept_params, latents, np.array(latent_index, dtype=np.int64), steps)


def _chain_job(args):
    data, structure, prior, config, rho, init = args
    return run_chain(data, structure, prior, config, rho, init)


def chain_workers(n_chains: int) -> int:
    cap = os.environ.get("MSURV_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(n_chains, limit))


def run_chains(data, structure: BlockStructure, prior: PriorSpec, config: McmcConfig, n_chains: int = 1,
               rho=1.0, init: Mapping | None = None) -> list:
    """Independent chains with seeds spawned from ``config.seed``.

    Chains run in worker processes, capped by ``MSURV_THREADS``.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(n_chains)
    jobs = []
    for sq in seeds:
        cfg = McmcConfig(**{**config.__dict__, "seed": int(sq.generate_state(1)[0])})
        jobs.append((data, structure, prior, cfg, rho, init))
    workers = chain_workers(n_chains)
    if workers == 1:
        return [_chain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_chain_job, jobs))
