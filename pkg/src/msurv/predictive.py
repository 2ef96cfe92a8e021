"""Sequential description: the law of one extra unit given the others.

Between the others' event times the extra unit moves with piecewise-constant
hazards. At each of the others' events it may join the co-transition, with
probabilities given by ratios of event rates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import kernels
from .measure import ModelParams, pair_load
from .trajectory import PopulationTrajectory, Timeline, UnitPath, build_timeline


def continuous_hazard(i: int, i2: int, x, params: ModelParams) -> float:
    """Rate of the move ``i -> i2`` for a unit joining configuration ``x`` of others."""
    st = params.structure
    e = (int(i), int(i2))
    if e not in st.edge_pair:
        raise ValueError(f"{e} is not an edge of the graph")
    view = params.views[st.edge_pair[e]]
    pos = int(np.nonzero(view.src == i - 1)[0][0])
    S = pair_load(x, view)
    base = view.nu * kernels.digamma_diff(view.rho + S, float(view.gamma[pos]))
    return math.exp(view.log_alpha[e]) * base + view.erosion.get(e, 0.0)


class DislocationCache:
    """Memo of ``log I(r, d)`` per pair for fixed ``gamma`` and ``rho``."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.table: dict = {}
        self.kernels: dict = {}

    def log_integral(self, pair: int, r, d) -> float:
        key = (pair, tuple(r), tuple(d))
        v = self.table.get(key)
        if v is None:
            view = self.params.views[pair]
            v = kernels.log_dislocation_integral(key[1], key[2], view.gamma, view.rho)
            self.table[key] = v
        return v


def atom_kernel(ev, params: ModelParams, cache: DislocationCache | None = None) -> np.ndarray:
    """Transition matrix of the extra unit at one of the others' events.

    Rows of states that are not sources of the event's pair are identity
    rows. Masses are not renormalised, so row sums expose rounding error.
    """
    cache = cache or DislocationCache(params)
    s = params.structure.s
    view = params.views[ev.pair]
    K = np.eye(s)
    r = list(ev.r)
    d = list(ev.d)
    D = sum(d)
    erosion = 0.0
    if D == 1:
        erosion = view.erosion.get(ev.moves[0][0], 0.0)
    log_w = math.log(view.nu) + sum(c * view.log_alpha[e] for e, c in ev.moves)
    lam0 = math.exp(log_w + cache.log_integral(ev.pair, r, d)) + erosion
    for pos, l0 in enumerate(view.src):
        l = int(l0) + 1
        r[pos] += 1
        stay = math.exp(log_w + cache.log_integral(ev.pair, r, d)) + erosion
        r[pos] -= 1
        d[pos] += 1
        move = math.exp(log_w + cache.log_integral(ev.pair, r, d))
        d[pos] -= 1
        K[l - 1, l - 1] = stay / lam0
        for m in view.dests[l]:
            K[l - 1, m - 1] = move * math.exp(view.log_alpha[(l, m)]) / lam0
    return K


@dataclass
class ConditionalHazard:
    """Hazards for an extra unit given a fixed set of other units.

    ``bounds`` are the times where the others' configuration changes;
    ``rates[k]`` is the generator on ``[bounds[k-1], bounds[k])`` (with
    open ends), and ``events`` are the others' grouped events.
    """

    params: ModelParams
    bounds: np.ndarray
    configs: np.ndarray
    rates: np.ndarray
    events: list
    cache: DislocationCache

    @classmethod
    def from_timeline(cls, tl: Timeline, params: ModelParams, cache: DislocationCache | None = None):
        s = params.structure.s
        if len(tl.config):
            configs = np.vstack([np.zeros((1, s), dtype=np.int64), tl.config, tl.final_config[None, :]])
            bounds = tl.times
        else:
            configs = np.zeros((1, s), dtype=np.int64)
            bounds = np.zeros(0)
        rates = generators(configs, params)
        return cls(params, bounds, configs, rates, tl.events, cache or DislocationCache(params))

    @classmethod
    def from_others(cls, others: PopulationTrajectory, params: ModelParams, exclude: int | None = None,
                    cache: DislocationCache | None = None):
        return cls.from_timeline(build_timeline(others, params.structure, exclude), params, cache)

    def segment(self, t: float) -> int:
        """Index of the rate segment in force just after ``t``."""
        return int(np.searchsorted(self.bounds, t, side="right"))

    def generator_at(self, t: float) -> np.ndarray:
        return self.rates[self.segment(t)]

    def events_between(self, t1: float, t2: float) -> list:
        """Others' events in the half-open interval ``(t1, t2]``."""
        return [ev for ev in self.events if t1 < ev.time <= t2]

    def kernel(self, ev) -> np.ndarray:
        key = (ev.pair, ev.r, ev.d, ev.moves)
        K = self.cache.kernels.get(key)
        if K is None:
            K = atom_kernel(ev, self.params, self.cache)
            K.setflags(write=False)
            self.cache.kernels[key] = K
        return K

    def breakpoints(self, t1: float, t2: float) -> np.ndarray:
        inner = self.bounds[(self.bounds > t1) & (self.bounds < t2)]
        return np.r_[t1, inner, t2]


def generators(configs: np.ndarray, params: ModelParams) -> np.ndarray:
    """Continuous generator for the extra unit under each configuration row."""
    s = params.structure.s
    out = np.zeros((len(configs), s, s))
    for view in params.views:
        S_all = configs[:, view.src] @ view.gamma
        for pos, l0 in enumerate(view.src):
            l = int(l0) + 1
            g = float(view.gamma[pos])
            base = np.array([view.nu * kernels.digamma_diff(view.rho + S, g) for S in S_all])
            for m in view.dests[l]:
                out[:, l - 1, m - 1] += math.exp(view.log_alpha[(l, m)]) * base + view.erosion.get((l, m), 0.0)
    idx = np.arange(s)
    out[:, idx, idx] = -out.sum(axis=2)
    return out


def cumulative_hazard(i: int, i2: int, t1: float, t2: float, others, params: ModelParams) -> float:
    """Integral of the continuous hazard of ``i -> i2`` over ``[t1, t2]``."""
    if t2 < t1:
        raise ValueError("need t1 <= t2")
    ch = others if isinstance(others, ConditionalHazard) else ConditionalHazard.from_others(others, params)
    if (i, i2) not in params.structure.edge_pair:
        raise ValueError(f"{(i, i2)} is not an edge of the graph")
    pts = ch.breakpoints(t1, t2)
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        total += ch.rates[ch.segment(a)][i - 1, i2 - 1] * (b - a)
    return total


def atomic_transition_distribution(t: float, i: int, others, params: ModelParams) -> dict:
    """Destination law of an extra unit in state ``i`` at the others' event(s) at ``t``.

    Returns ``{state: probability}``; staying maps to ``i``. Several pairs
    firing at ``t`` are composed in pair order.
    """
    ch = others if isinstance(others, ConditionalHazard) else ConditionalHazard.from_others(others, params)
    evs = [ev for ev in ch.events if ev.time == t]
    if not evs:
        raise ValueError(f"the other units have no event at t={t}")
    dist = np.zeros(params.structure.s)
    dist[i - 1] = 1.0
    for ev in evs:
        dist = dist @ ch.kernel(ev)
    return {k + 1: float(v) for k, v in enumerate(dist) if v > 0}


def stay_probability(i: int, t1: float, t2: float, others, params: ModelParams) -> float:
    """Probability of remaining in ``i`` throughout ``(t1, t2]``."""
    if t2 < t1:
        raise ValueError("need t1 <= t2")
    ch = others if isinstance(others, ConditionalHazard) else ConditionalHazard.from_others(others, params)
    pts = ch.breakpoints(t1, t2)
    log_p = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        log_p += ch.rates[ch.segment(a)][i - 1, i - 1] * (b - a)
    out = math.exp(log_p)
    for ev in ch.events_between(t1, t2):
        out *= ch.kernel(ev)[i - 1, i - 1]
    return out


def sample_conditional_unit(others, initial_state: int, params: ModelParams, seed=None,
                            horizon: float = math.inf, entry: float = 0.0) -> UnitPath:
    """Simulate the extra unit forward given the others' full paths."""
    absorbing = set(params.structure.graph.absorbing)
    if initial_state in absorbing:
        raise ValueError(f"initial state {initial_state} is absorbing")
    ch = others if isinstance(others, ConditionalHazard) else ConditionalHazard.from_others(others, params)
    rng = np.random.default_rng(seed)
    times = [entry]
    states = [initial_state]
    state = initial_state
    t = entry
    ev_times = np.array([ev.time for ev in ch.events])
    cuts = np.unique(np.r_[ch.bounds, ev_times])
    cuts = cuts[cuts > entry]
    k = 0
    while state not in absorbing and t < horizon:
        nxt = cuts[k] if k < cuts.size else math.inf
        Q = ch.rates[ch.segment(t)]
        q = -Q[state - 1, state - 1]
        wait = rng.exponential(1.0 / q) if q > 0 else math.inf
        if t + wait < min(nxt, horizon):
            t += wait
            w = Q[state - 1].copy()
            w[state - 1] = 0.0
            state = int(rng.choice(w.size, p=w / w.sum())) + 1
            times.append(t)
            states.append(state)
            continue
        if nxt > horizon:
            break
        t = float(nxt)
        k += 1
        for ev in ch.events:
            if ev.time == t and state not in absorbing:
                row = ch.kernel(ev)[state - 1]
                new = int(rng.choice(row.size, p=row / row.sum())) + 1
                if new != state:
                    state = new
                    times.append(t)
                    states.append(state)
    end = math.inf if state in absorbing else float(horizon)
    return UnitPath(np.array(times), np.array(states), end)


def state_distribution(ch: ConditionalHazard, initial_state: int, grid, entry: float = 0.0) -> np.ndarray:
    """Exact law of the extra unit's state at each grid time (rows sum to 1).

    Propagates through each constant-rate segment with a matrix exponential
    and through each of the others' events with its atom kernel.
    """
    grid = np.asarray(grid, dtype=float)
    s = ch.params.structure.s
    out = np.zeros((grid.size, s))
    order = np.argsort(grid)
    dist = np.zeros(s)
    dist[initial_state - 1] = 1.0
    t = entry
    ev_iter = iter([ev for ev in ch.events if ev.time > entry])
    ev = next(ev_iter, None)
    for gi in order:
        target = grid[gi]
        if target < entry:
            raise ValueError("grid times must not precede entry")
        while True:
            nxt_ev = ev.time if ev is not None else math.inf
            nxt_b = ch.bounds[ch.bounds > t]
            nxt_b = nxt_b[0] if nxt_b.size else math.inf
            stop = min(nxt_ev, nxt_b, target)
            if stop > t:
                dist = dist @ expm(ch.rates[ch.segment(t)] * (stop - t))
                t = stop
            if ev is not None and ev.time == t and t <= target:
                dist = dist @ ch.kernel(ev)
                ev = next(ev_iter, None)
                continue
            if t >= target:
                break
        out[gi] = dist
    return out


def harmonic_cumulative_hazard(counts_times, counts, nu: float, rho: float, t: float) -> float:
    """Closed-form cumulative hazard for the self-similar harmonic process.

    ``counts[k]`` is the number of other units at risk on
    ``[counts_times[k], counts_times[k+1])``; the increment over each
    stretch is ``nu * dt / (count + rho)``.
    """
    total = 0.0
    edges = list(counts_times) + [math.inf]
    for k, m in enumerate(counts):
        a = edges[k]
        b = min(edges[k + 1], t)
        if b > a:
            total += nu * (b - a) / (m + rho)
    return total
