"""Population trajectories: representation, exact simulation and joint density.

A unit path is a right-continuous step function given by its entry time,
its jump times and the states entered. ``end`` is the censoring time (``inf``
when the unit is followed until absorption). A unit is at risk of taking
part in an event at time ``t`` when ``entry < t <= end``, and contributes to
the event-rate integral on ``[entry, end)``.

Co-transitions are grouped by ``(time, block pair)``. When two pairs fire at
the same instant they are applied one after the other in pair order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import digamma as _psi

from . import kernels
from .measure import ModelParams, log_lambda_counts, pair_load
from .statespace import BlockStructure

log = logging.getLogger(__name__)


@dataclass
class UnitPath:
    times: np.ndarray
    states: np.ndarray
    end: float = math.inf

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.times.ndim != 1 or self.times.shape != self.states.shape or self.times.size == 0:
            raise ValueError("a path needs matching, non-empty times and states")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if np.any(np.diff(self.states) == 0):
            raise ValueError("consecutive states must differ")
        if self.times[-1] > self.end:
            raise ValueError("path jumps after its censoring time")

    @classmethod
    def constant(cls, state: int, entry: float = 0.0, end: float = math.inf) -> "UnitPath":
        return cls(np.array([entry]), np.array([state]), end)

    @property
    def entry(self) -> float:
        return float(self.times[0])

    @property
    def initial_state(self) -> int:
        return int(self.states[0])

    @property
    def final_state(self) -> int:
        return int(self.states[-1])

    @property
    def n_jumps(self) -> int:
        return self.times.size - 1

    def state_at(self, t: float) -> int:
        """State at time ``t`` (right-continuous)."""
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if k < 0:
            raise ValueError(f"time {t} precedes entry at {self.entry}")
        return int(self.states[k])

    def state_before(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t, side="left")) - 1
        return int(self.states[max(k, 0)])

    def jumps(self):
        """``(time, from, to)`` for every jump."""
        return [(float(self.times[k]), int(self.states[k - 1]), int(self.states[k])) for k in range(1, self.times.size)]

    def truncated(self, c: float) -> "UnitPath":
        """The path observed up to (and including) time ``c``."""
        if c >= self.end:
            return self
        if c < self.entry:
            raise ValueError("censoring before entry")
        keep = self.times <= c
        return UnitPath(self.times[keep], self.states[keep], float(c))

    def failure_time(self, absorbing) -> float:
        return float(self.times[-1]) if self.final_state in absorbing and self.n_jumps else math.inf


@dataclass
class PopulationTrajectory:
    units: list
    s: int
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [str(u + 1) for u in range(len(self.units))]
        if len(self.ids) != len(self.units):
            raise ValueError("one id per unit")

    @property
    def n(self) -> int:
        return len(self.units)

    def permuted(self, order: Sequence[int]) -> "PopulationTrajectory":
        return PopulationTrajectory([self.units[i] for i in order], self.s, [self.ids[i] for i in order])

    def event_list(self):
        """Time-ordered ``(time, {unit: (from, to)})`` records."""
        grouped: dict = {}
        for u, path in enumerate(self.units):
            for t, a, b in path.jumps():
                grouped.setdefault(t, {})[u] = (a, b)
        return [(t, grouped[t]) for t in sorted(grouped)]

    def last_time(self) -> float:
        out = 0.0
        for p in self.units:
            out = max(out, float(p.times[-1]))
            if math.isfinite(p.end):
                out = max(out, p.end)
        return out


@dataclass(frozen=True)
class GroupedEvent:
    time: float
    pair: int  # index into structure.pairs
    r: tuple  # stay counts per pair source
    d: tuple  # move counts per pair source
    moves: tuple  # ((l, m), count) pairs
    units: tuple  # movers

    @property
    def total_moved(self) -> int:
        return sum(self.d)


@dataclass
class Timeline:
    """Piecewise-constant configuration path plus grouped events.

    Segment ``k`` covers ``[times[k], times[k+1])`` with configuration
    ``config[k]``; the configuration after ``times[-1]`` must carry no rate.
    """

    times: np.ndarray
    config: np.ndarray
    events: list
    final_config: np.ndarray

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.times)

    def config_at(self, t: float) -> np.ndarray:
        """Configuration in force just before ``t``."""
        k = int(np.searchsorted(self.times, t, side="left")) - 1
        if k < 0:
            return np.zeros(self.config.shape[1] if self.config.size else self.final_config.size, dtype=np.int64)
        if k >= len(self.config):
            return self.final_config
        return self.config[k]


def _unit_records(path: UnitPath, structure: BlockStructure, n_pairs: int):
    """Sweep records of one path: ``(time, key, state, delta, dest)``.

    Keys order records at equal times: jumps by pair index, then the
    censoring record, then entries.
    """
    cached = getattr(path, "_records", None)
    if cached is not None and cached[0] is structure:
        return cached[1]
    edge_pair = structure.edge_pair
    nj = path.n_jumps
    t = np.empty(2 * nj + 2)
    key = np.empty(2 * nj + 2, dtype=np.int64)
    state = np.empty(2 * nj + 2, dtype=np.int64)
    delta = np.empty(2 * nj + 2, dtype=np.int64)
    dest = np.zeros(2 * nj + 2, dtype=np.int64)
    t[0], key[0], state[0], delta[0] = path.entry, n_pairs + 1, path.initial_state, 1
    for k in range(1, nj + 1):
        a, b = int(path.states[k - 1]), int(path.states[k])
        p = edge_pair.get((a, b))
        if p is None:
            raise ValueError(f"jump along non-edge {(a, b)} at t={path.times[k]}")
        t[2 * k - 1: 2 * k + 1] = path.times[k]
        key[2 * k - 1: 2 * k + 1] = p
        state[2 * k - 1], state[2 * k] = a, b
        delta[2 * k - 1], delta[2 * k] = -1, 1
        dest[2 * k - 1] = b
    n = 2 * nj + 1
    if math.isfinite(path.end):
        t[n], key[n], state[n], delta[n] = path.end, n_pairs, path.final_state, -1
        n += 1
    out = (t[:n], key[:n], state[:n], delta[:n], dest[:n])
    object.__setattr__(path, "_records", (structure, out))
    return out


def build_timeline(traj: PopulationTrajectory, structure: BlockStructure, exclude: int | None = None) -> Timeline:
    """Sweep all entries, jumps and censorings in time order.

    ``exclude`` drops one unit, giving the view seen by that unit.
    Raises ``ValueError`` on a jump that is not an edge of the graph.
    """
    s = structure.s
    n_pairs = len(structure.pairs)
    parts = []
    owners = []
    for u, path in enumerate(traj.units):
        if u == exclude:
            continue
        try:
            parts.append(_unit_records(path, structure, n_pairs))
        except ValueError as exc:
            raise ValueError(f"unit {traj.ids[u]}: {exc}") from None
        owners.append(u)
    if not parts:
        return Timeline(np.zeros(1), np.zeros((0, s), dtype=np.int64), [], np.zeros(s, dtype=np.int64))
    t, key, state, delta, dest = (np.concatenate(c) for c in zip(*parts))
    unit = np.repeat(np.asarray(owners, dtype=np.int64), [p[0].size for p in parts])
    order = np.lexsort((key, t))
    t, key, state, delta, dest, unit = t[order], key[order], state[order], delta[order], dest[order], unit[order]
    onehot = np.zeros((t.size, s), dtype=np.int64)
    onehot[np.arange(t.size), state - 1] = delta
    cum = np.cumsum(onehot, axis=0)
    last = np.nonzero(np.r_[t[1:] != t[:-1], True])[0]
    times = t[last]
    config = cum[last[:-1]]
    final = cum[-1]
    events = []
    jr = np.nonzero(key < n_pairs)[0]
    if jr.size:
        # first record of each (time, pair) group, including arrival records
        jt, jk = t[jr], key[jr]
        new_group = np.r_[True, (jt[1:] != jt[:-1]) | (jk[1:] != jk[:-1])]
        gid = np.cumsum(new_group) - 1
        first = jr[new_group]
        before = np.where((first > 0)[:, None], cum[np.maximum(first - 1, 0)], 0)
        movers = delta[jr] < 0
        mg, mfrom, mto, mu = gid[movers], state[jr][movers], dest[jr][movers], unit[jr][movers]
        G = first.size
        dmat = np.zeros((G, s), dtype=np.int64)
        np.add.at(dmat, (mg, mfrom - 1), 1)
        rmat = before - dmat
        code = (mg * (s + 1) + mfrom) * (s + 1) + mto
        ucode, ucount = np.unique(code, return_counts=True)
        moves_of = [[] for _ in range(G)]
        for c, k in zip(ucode.tolist(), ucount.tolist()):
            g, rest = divmod(c, (s + 1) * (s + 1))
            a, b = divmod(rest, s + 1)
            moves_of[g].append(((a, b), k))
        split = np.r_[0, np.cumsum(np.bincount(mg, minlength=G))]
        order_m = np.argsort(mg, kind="stable")
        mu = mu[order_m]
        srcs = [[l - 1 for l in p.sources] for p in structure.pairs]
        gt = t[first].tolist()
        gk = key[first].tolist()
        rl = rmat.tolist()
        dl = dmat.tolist()
        ml = mu.tolist()
        sl = split.tolist()
        for g in range(G):
            src = srcs[gk[g]]
            rg, dg = rl[g], dl[g]
            events.append(GroupedEvent(gt[g], gk[g], tuple([rg[i] for i in src]), tuple([dg[i] for i in src]),
                                       tuple(moves_of[g]), tuple(ml[sl[g]:sl[g + 1]])))
    return Timeline(times, config, events, final)


def _check_flatlining(traj: PopulationTrajectory, structure: BlockStructure) -> str | None:
    absorbing = set(structure.graph.absorbing)
    for u, path in enumerate(traj.units):
        if any(int(st) in absorbing for st in path.states[:-1]):
            return f"unit {traj.ids[u]} leaves an absorbing state"
    return None


def pair_integrals(tl: Timeline, params: ModelParams) -> np.ndarray:
    """``int psi(rho + S(t)) - psi(rho) dt`` for every pair (nu divided out)."""
    out = np.zeros(len(params.views))
    if not len(tl.config):
        return out
    dt = tl.durations
    for k, view in enumerate(params.views):
        S = tl.config[:, view.src] @ view.gamma
        live = S > 0
        if np.any(live):
            out[k] = float(np.dot(dt[live], _psi(view.rho + S[live]) - _psi(view.rho)))
    return out


def erosion_integral(tl: Timeline, params: ModelParams) -> float:
    rates = np.zeros(params.structure.s)
    for (l, _), c in params.c.items():
        rates[l - 1] += c
    if not len(tl.config) or not np.any(rates):
        return 0.0
    return float(np.dot(tl.durations, tl.config @ rates))


def event_log_lambda(ev: GroupedEvent, params: ModelParams, cache: dict | None = None) -> float:
    view = params.views[ev.pair]
    if cache is not None:
        key = (ev.pair, ev.r, ev.d)
        logI = cache.get(key)
        if logI is None:
            logI = kernels.log_dislocation_integral(ev.r, ev.d, view.gamma, view.rho)
            cache[key] = logI
        lw = 0.0
        for e, c in ev.moves:
            la = view.log_alpha.get(e, -math.inf)
            lw += c * la
        out = math.log(view.nu) + logI + lw
        if ev.total_moved == 1:
            c = view.erosion.get(ev.moves[0][0], 0.0)
            if c > 0:
                out = float(np.logaddexp(out, math.log(c)))
        return out
    return log_lambda_counts(view, ev.r, ev.d, dict(ev.moves))


def log_density(traj: PopulationTrajectory, params: ModelParams) -> float:
    """Complete-data log density: minus the integrated event rate plus the log event rates.

    Returns ``-inf`` (and logs the reason) for paths the model cannot produce.
    """
    st = params.structure
    reason = _check_flatlining(traj, st)
    if reason is None:
        try:
            tl = build_timeline(traj, st)
        except ValueError as exc:
            reason = str(exc)
    if reason is not None:
        log.debug("impossible trajectory: %s", reason)
        return -math.inf
    if np.any(tl.final_config[[i - 1 for p in st.pairs for i in p.sources]] > 0):
        raise ValueError("trajectory ends with units still at risk; censor them explicitly")
    nus = np.array([v.nu for v in params.views])
    out = -float(np.dot(nus, pair_integrals(tl, params))) - erosion_integral(tl, params)
    for ev in tl.events:
        out += event_log_lambda(ev, params)
        if out == -math.inf:
            log.debug("zero-rate event at t=%g", ev.time)
            return out
    return out


def integrate_zeta_component(traj: PopulationTrajectory, params: ModelParams, pair, normalized: bool = False) -> float:
    """Time integral of one pair's event rate; ``normalized`` divides out ``nu``."""
    tl = build_timeline(traj, params.structure)
    k = params.structure.pair_index(pair)
    val = float(pair_integrals(tl, params)[k])
    return val if normalized else params.views[k].nu * val


def apply_censoring(traj: PopulationTrajectory, censor_times) -> PopulationTrajectory:
    """Truncate each unit at its censoring time (scalar or per-unit)."""
    c = np.broadcast_to(np.asarray(censor_times, dtype=float), (traj.n,))
    if np.any(c <= 0):
        raise ValueError("censoring times must be positive")
    return PopulationTrajectory([p.truncated(float(ci)) for p, ci in zip(traj.units, c)], traj.s, list(traj.ids))


# ---------------------------------------------------------------- sampling


def sample_tilted_p(S: float, rho: float, rng: np.random.Generator, method: str = "exact", grid: int = 4096) -> float:
    """Draw ``p`` with density proportional to ``(1 - p^S) p^(rho-1) / (1 - p)``.

    For integer ``S`` the density is a finite Beta(rho + j, 1) mixture with
    weights proportional to ``1 / (rho + j)``. Otherwise ``method="exact"``
    thins the mixture for ``ceil(S)`` and ``method="grid"`` inverts a
    trapezoidal CDF on ``grid`` points in ``w = p^rho``.
    """
    if not S > 0:
        raise ValueError(f"S must be positive, got {S}")
    if method == "grid" and float(S) != round(S):
        return _tilted_grid(float(S), float(rho), grid)(rng.random())
    n = math.ceil(S - 1e-12)
    j = np.arange(n)
    w = 1.0 / (rho + j)
    cw = np.cumsum(w)
    while True:
        k = int(np.searchsorted(cw, rng.random() * cw[-1], side="right"))
        k = min(k, n - 1)
        p = rng.random() ** (1.0 / (rho + k))
        if n == S:
            return p
        # accept with (1 - p^S) / (1 - p^n)
        if rng.random() * (-math.expm1(n * math.log(p))) <= -math.expm1(S * math.log(p)):
            return p


_GRID_CACHE: dict = {}


def _tilted_grid(S: float, rho: float, size: int):
    key = (S, rho, size)
    inv = _GRID_CACHE.get(key)
    if inv is None:
        w = np.linspace(0.0, 1.0, size + 1)
        p = w ** (1.0 / rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = -np.expm1(S * np.log(p)) / (-np.expm1(np.log(p)))
        dens[0] = 1.0
        dens[-1] = S
        cdf = np.r_[0.0, np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(w))]
        cdf /= cdf[-1]

        def inv(u, cdf=cdf, w=w, rho=rho):
            return float(np.interp(u, cdf, w)) ** (1.0 / rho)

        if len(_GRID_CACHE) > 256:
            _GRID_CACHE.clear()
        _GRID_CACHE[key] = inv
    return inv


def _first_success_movers(q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(1 - q) moves conditioned on at least one success.

    The first success is drawn from its exact conditional law and later
    units move independently, so there is no rejection loop.
    """
    q = np.clip(q, 0.0, 1.0)
    log_q = np.log(np.where(q > 0, q, 1e-300))
    prefix = np.r_[0.0, np.cumsum(log_q)[:-1]]
    weights = np.exp(prefix) * (1.0 - q)
    cw = np.cumsum(weights)
    k = int(np.searchsorted(cw, rng.random() * cw[-1], side="right"))
    k = min(k, q.size - 1)
    while weights[k] <= 0:
        k -= 1
    moved = np.zeros(q.size, dtype=bool)
    moved[k] = True
    if k + 1 < q.size:
        moved[k + 1:] = rng.random(q.size - k - 1) >= q[k + 1:]
    return moved


def simulate_population(n: int, initial_states, params: ModelParams, horizon: float = math.inf,
                        seed=None, tilted_method: str = "exact") -> PopulationTrajectory:
    """Exact event-driven simulation of ``n`` exchangeable units.

    Units still alive at a finite ``horizon`` are censored there.
    """
    st = params.structure
    rng = np.random.default_rng(seed)
    y = np.broadcast_to(np.asarray(initial_states, dtype=np.int64), (n,)).copy()
    if n and (y.min() < 1 or y.max() > st.s):
        raise ValueError("initial states out of range")
    absorbing = set(st.graph.absorbing)
    if n and all(int(v) in absorbing for v in y):
        raise ValueError("every unit starts in an absorbing state")
    if not (horizon >= 0):
        raise ValueError("horizon must be non-negative")
    times = [[0.0] for _ in range(n)]
    states = [[int(v)] for v in y]
    x = np.bincount(y - 1, minlength=st.s).astype(float) if n else np.zeros(st.s)
    erosion = [(e, c) for e, c in sorted(params.c.items()) if c > 0]
    t = 0.0
    while True:
        rates = []
        for view in params.views:
            S = pair_load(x, view)
            rates.append(view.nu * kernels.digamma_diff(view.rho, S) if S > 0 else 0.0)
        for (l, _), c in erosion:
            rates.append(x[l - 1] * c)
        rates = np.asarray(rates)
        total = rates.sum()
        if not np.isfinite(total):
            raise FloatingPointError("non-finite event rate")
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        k = int(np.searchsorted(np.cumsum(rates), rng.random() * total, side="right"))
        k = min(k, rates.size - 1)
        moves = []
        if k < len(params.views):
            view = params.views[k]
            S = pair_load(x, view)
            p = sample_tilted_p(S, view.rho, rng, method=tilted_method)
            g_of = {int(l) + 1: g for l, g in zip(view.src, view.gamma)}
            cand = np.nonzero(np.isin(y, list(g_of)))[0]
            q = np.array([p ** g_of[int(y[u])] for u in cand])
            moved = cand[_first_success_movers(q, rng)]
            for u in moved:
                l = int(y[u])
                dests = view.dests[l]
                w = np.exp([view.log_alpha[(l, m)] for m in dests])
                m = dests[int(rng.choice(len(dests), p=w / w.sum()))] if len(dests) > 1 else dests[0]
                moves.append((int(u), m))
        else:
            (l, m), _ = erosion[k - len(params.views)]
            cand = np.nonzero(y == l)[0]
            moves.append((int(cand[rng.integers(cand.size)]), m))
        for u, m in moves:
            x[y[u] - 1] -= 1
            x[m - 1] += 1
            y[u] = m
            times[u].append(t)
            states[u].append(m)
    end = math.inf if not math.isfinite(horizon) else float(horizon)
    units = []
    for u in range(n):
        alive = states[u][-1] not in absorbing
        units.append(UnitPath(np.array(times[u]), np.array(states[u]), end if alive else math.inf))
    return PopulationTrajectory(units, st.s)


# ---------------------------------------------------------------- panel data


@dataclass
class PanelRecord:
    """Intermittent observations of one unit.

    ``delta = 1`` marks a censored record (alive at ``V``); ``delta = 0`` a
    failure at ``V``. ``final_state`` is the state recorded on the terminal
    row, if any.
    """

    unit_id: str
    times: np.ndarray
    states: np.ndarray
    V: float
    delta: int
    final_state: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.times.size == 0:
            raise ValueError(f"unit {self.unit_id}: at least one observation is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"unit {self.unit_id}: observation times must be strictly increasing")
        if self.V < self.times[-1] or (self.delta == 0 and self.V <= self.times[-1]):
            raise ValueError(f"unit {self.unit_id}: terminal time precedes an observation")
        if self.delta not in (0, 1):
            raise ValueError("delta must be 0 or 1")

    @property
    def entry(self) -> float:
        return float(self.times[0])


@dataclass
class PanelData:
    records: list
    s: int

    @property
    def n(self) -> int:
        return len(self.records)

    def validate(self, structure: BlockStructure) -> None:
        absorbing = set(structure.graph.absorbing)
        for rec in self.records:
            if np.any((rec.states < 1) | (rec.states > structure.s)):
                raise ValueError(f"unit {rec.unit_id}: state out of range")
            bad = [int(v) for v in rec.states if int(v) in absorbing]
            if bad:
                raise ValueError(f"unit {rec.unit_id}: absorbing state {bad[0]} in an intermittent observation")
            if rec.final_state is not None:
                fs = rec.final_state
                if rec.delta == 0 and fs not in absorbing:
                    raise ValueError(f"unit {rec.unit_id}: failure row names non-absorbing state {fs}")
                if rec.delta == 1 and fs in absorbing:
                    raise ValueError(f"unit {rec.unit_id}: censored row names absorbing state {fs}")


def observe_panel(traj: PopulationTrajectory, structure: BlockStructure, every: float = 1.0) -> PanelData:
    """Observe each unit on the grid ``entry + k * every``; failures are exact.

    Appointments run strictly before the failure time. A censored unit gets
    a final row at its censoring time with the state occupied there.
    """
    if not every > 0:
        raise ValueError("observation spacing must be positive")
    absorbing = set(structure.graph.absorbing)
    records = []
    for uid, path in zip(traj.ids, traj.units):
        T = path.failure_time(absorbing)
        stop = T if math.isfinite(T) else path.end
        if not math.isfinite(stop):
            raise ValueError(f"unit {uid} is neither absorbed nor censored")
        grid = path.entry + every * np.arange(int(math.floor((stop - path.entry) / every)) + 1)
        grid = grid[grid < stop] if math.isfinite(T) else grid[grid <= stop]
        obs = np.array([path.state_at(g) for g in grid])
        if math.isfinite(T):
            records.append(PanelRecord(uid, grid, obs, T, 0, path.final_state))
        else:
            records.append(PanelRecord(uid, grid, obs, float(stop), 1, path.state_at(stop)))
    return PanelData(records, traj.s)
