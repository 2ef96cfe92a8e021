"""Nonparametric estimators and posterior survival summaries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .measure import ModelParams
from .predictive import ConditionalHazard, sample_conditional_unit, state_distribution
from .trajectory import PanelData, PopulationTrajectory


@dataclass
class SurvivalCurve:
    """Survival on a time grid, with optional pointwise bands.

    ``step=True`` marks a right-continuous step function (product-limit
    estimators); otherwise values are read as samples of a continuous curve.
    """

    times: np.ndarray
    survival: np.ndarray
    q05: np.ndarray | None = None
    q95: np.ndarray | None = None
    baseline_state: int | None = None
    step: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.survival = np.asarray(self.survival, dtype=float)
        if self.times.shape != self.survival.shape:
            raise ValueError("times and survival must align")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("grid must be sorted")
        if np.any((self.survival < -1e-12) | (self.survival > 1 + 1e-12)):
            raise ValueError("survival values must lie in [0, 1]")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.step:
            k = np.searchsorted(self.times, t, side="right") - 1
            vals = np.where(k >= 0, self.survival[np.maximum(k, 0)], 1.0)
            return vals
        return np.interp(t, self.times, self.survival)


def kaplan_meier(times, died) -> SurvivalCurve:
    """Product-limit estimator from follow-up times and failure indicators.

    The curve starts at time 0 with value 1 and steps at each failure time.
    """
    times = np.asarray(times, dtype=float)
    died = np.asarray(died, dtype=bool)
    if times.size == 0:
        raise ValueError("no records")
    if np.any(times <= 0):
        raise ValueError("follow-up times must be positive")
    fail_t = np.unique(times[died])
    grid = [0.0]
    surv = [1.0]
    s = 1.0
    for t in fail_t:
        at_risk = np.count_nonzero(times >= t)
        d = np.count_nonzero((times == t) & died)
        s *= 1.0 - d / at_risk
        grid.append(float(t))
        surv.append(s)
    return SurvivalCurve(np.array(grid), np.array(surv), step=True)


def kaplan_meier_panel(panel: PanelData) -> SurvivalCurve:
    """KM curve of time to failure from panel terminal rows."""
    return kaplan_meier([r.V - r.entry for r in panel.records], [r.delta == 0 for r in panel.records])


@dataclass
class OccupancyCurves:
    times: np.ndarray
    probs: np.ndarray  # (len(times), s): state occupancy after each time
    transitions: np.ndarray  # (len(times), s, s): product-integral factor at each time

    def at(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.probs[max(k, 0)]


def aalen_johansen(traj, s: int | None = None, initial=None) -> OccupancyCurves:
    """Aalen-Johansen occupancy estimator from completely observed paths.

    Intermittent panels are refused: carrying the last observation forward
    would bias the transition counts.
    """
    if isinstance(traj, PanelData):
        raise TypeError("Aalen-Johansen needs complete transition records, not a panel")
    if not isinstance(traj, PopulationTrajectory):
        raise TypeError("expected a PopulationTrajectory")
    s = s or traj.s
    jumps: dict = {}
    for u, path in enumerate(traj.units):
        for t, a, b in path.jumps():
            jumps.setdefault(t, []).append((u, a, b))
    if initial is None:
        init = np.bincount([p.initial_state - 1 for p in traj.units], minlength=s).astype(float)
        init /= init.sum()
    else:
        init = np.asarray(initial, dtype=float)
    times = [0.0]
    probs = [init]
    factors = [np.eye(s)]
    cur = init.copy()
    for t in sorted(jumps):
        at_risk = np.zeros(s)
        for p in traj.units:
            if p.entry < t <= p.end:
                at_risk[p.state_before(t) - 1] += 1
        dA = np.zeros((s, s))
        for _, a, b in jumps[t]:
            dA[a - 1, b - 1] += 1.0 / at_risk[a - 1]
        P = np.eye(s) + dA - np.diag(dA.sum(axis=1))
        cur = cur @ P
        times.append(t)
        probs.append(cur.copy())
        factors.append(P)
    return OccupancyCurves(np.array(times), np.array(probs), np.array(factors))


def predictive_survival(others, params: ModelParams, baseline_state: int, grid, entry: float = 0.0) -> np.ndarray:
    """Probability that a new unit starting in ``baseline_state`` is not absorbed by each grid time."""
    ch = others if isinstance(others, ConditionalHazard) else ConditionalHazard.from_others(others, params)
    dist = state_distribution(ch, baseline_state, grid, entry)
    absorbing = [i - 1 for i in params.structure.graph.absorbing]
    return np.clip(1.0 - dist[:, absorbing].sum(axis=1), 0.0, 1.0)


def _mc_survival(ch, params, baseline_state, grid, n_paths, rng):
    absorbing = set(params.structure.graph.absorbing)
    hits = np.zeros(len(grid))
    for _ in range(n_paths):
        path = sample_conditional_unit(ch, baseline_state, params, seed=rng, horizon=float(grid[-1]))
        hits += np.array([path.state_at(t) not in absorbing for t in grid])
    return hits / n_paths


def posterior_survival(draws, baseline_state: int, grid=None, at_time: float = 0.0, thin: int = 1,
                       method: str = "exact", n_paths: int = 200, seed=None) -> SurvivalCurve:
    """Pointwise median and 5%/95% bands of the predictive survival curve.

    Every retained draw contributes the survival of a new unit given that
    draw's latent paths and parameters. ``at_time`` conditions on being
    alive then. ``method="mc"`` replaces exact propagation by ``n_paths``
    simulated paths per draw.
    """
    if not draws.latents or not draws.params:
        raise ValueError("posterior survival needs draws with latent snapshots")
    structure = draws.params[0].structure
    if structure.graph.is_absorbing(baseline_state):
        raise ValueError(f"baseline state {baseline_state} is absorbing")
    if grid is None:
        last = max(t.last_time() for t in draws.latents)
        grid = np.linspace(0.0, last, 200)
    grid = np.asarray(grid, dtype=float)
    full = np.unique(np.r_[at_time, grid])
    rng = np.random.default_rng(seed)
    curves = []
    for k in range(0, draws.n_draws, thin):
        params = draws.params[k]
        latent = draws.latents[int(draws.latent_index[k])]
        ch = ConditionalHazard.from_others(latent, params)
        if method == "exact":
            surv = predictive_survival(ch, params, baseline_state, full)
        elif method == "mc":
            surv = _mc_survival(ch, params, baseline_state, full, n_paths, rng)
        else:
            raise ValueError(f"unknown method {method!r}")
        base = surv[np.searchsorted(full, at_time)]
        vals = np.interp(grid, full, surv)
        if at_time > 0:
            vals = np.where(grid >= at_time, vals / base if base > 0 else 0.0, 1.0)
        curves.append(vals)
    curves = np.array(curves)
    q05, med, q95 = np.quantile(curves, [0.05, 0.5, 0.95], axis=0)
    return SurvivalCurve(grid, med, q05, q95, baseline_state)


def expected_survival(curve: SurvivalCurve, horizon: float) -> float:
    """Area under the survival curve on ``[0, horizon]`` (restricted mean)."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if horizon > curve.times[-1] and not curve.step:
        raise ValueError("horizon lies beyond the grid")
    if curve.step:
        knots = np.r_[curve.times[curve.times < horizon], horizon]
        vals = curve(knots[:-1])
        return float(np.dot(np.diff(knots), vals))
    inside = curve.times <= horizon
    t = np.r_[curve.times[inside], horizon]
    v = np.r_[curve.survival[inside], curve(horizon)]
    return float(trapezoid(v, t))
