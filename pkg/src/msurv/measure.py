"""The composable harmonic family of dislocation measures.

Each ordered block pair ``(j, j')`` carries a rate ``nu``, a shape ``rho``,
relative log-risks ``gamma`` for its source states and destination weights
``alpha``. Optional erosion constants ``c`` add independent single-unit
moves. The characteristic index (total event rate) and the non-normalised
transition rates reduce to digamma sums, or to a one-dimensional integral
when the alternating sum is ill conditioned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Mapping

import numpy as np
from scipy import integrate, optimize

from . import kernels
from .statespace import BlockStructure, configuration_of

digamma = kernels.digamma


def _key(k) -> tuple:
    return (int(k[0]), int(k[1]))


@dataclass(frozen=True)
class _PairView:
    key: tuple
    src: np.ndarray  # 0-based source states
    gamma: np.ndarray
    nu: float
    rho: float
    log_alpha: dict  # (l, m) 1-based -> log weight
    erosion: dict  # (l, m) -> c
    dests: dict  # l -> tuple of m


@dataclass(frozen=True)
class ModelParams:
    """All measure parameters for one block structure.

    ``nu`` and ``rho`` are keyed by block pair ``(j, j')``; ``gamma`` by pair,
    then source state; ``alpha`` and ``c`` by edge ``(l, m)``.
    """

    structure: BlockStructure
    nu: Mapping
    rho: Mapping
    gamma: Mapping
    alpha: Mapping
    c: Mapping
    _views: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        st = self.structure
        views = []
        for p in st.pairs:
            key = p.key
            nu = float(self.nu[key])
            rho = float(self.rho[key])
            if not (nu > 0 and math.isfinite(nu)):
                raise ValueError(f"nu{list(key)} must be positive and finite, got {nu}")
            if not (rho > 0 and math.isfinite(rho)):
                raise ValueError(f"rho{list(key)} must be positive and finite, got {rho}")
            g = self.gamma[key]
            gam = np.array([float(g[l]) for l in p.sources])
            if not np.all((gam > 0) & np.isfinite(gam)):
                raise ValueError(f"gamma for pair {key} must be positive")
            if g[p.reference] != 1.0:
                raise ValueError(f"gamma of reference state {p.reference} in pair {key} must be 1")
            log_alpha = {}
            erosion = {}
            for l in p.sources:
                w = np.array([float(self.alpha[(l, m)]) for m in p.dests[l]])
                if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                    raise ValueError(f"alpha weights from state {l} into block {key[1]} must sum to 1")
                for m, wm in zip(p.dests[l], w):
                    log_alpha[(l, m)] = math.log(wm) if wm > 0 else -math.inf
                    cm = float(self.c.get((l, m), 0.0))
                    if cm < 0 or not math.isfinite(cm):
                        raise ValueError(f"erosion constant for edge {(l, m)} must be >= 0")
                    erosion[(l, m)] = cm
            views.append(_PairView(key, np.array(p.sources) - 1, gam, nu, rho, log_alpha, erosion, dict(p.dests)))
        object.__setattr__(self, "_views", tuple(views))

    @classmethod
    def create(cls, structure: BlockStructure, nu=1.0, rho=1.0, gamma=None, alpha=None, c=None) -> "ModelParams":
        """Fill defaults: shared ``nu``/``rho`` scalars, unit ``gamma``, uniform ``alpha``, zero ``c``.

        ``gamma`` may be keyed ``{(j, j'): {l: value}}`` or ``{(l, j'): value}``.
        """
        keys = [p.key for p in structure.pairs]
        nu_d = {k: float(nu) for k in keys} if np.isscalar(nu) else {_key(k): float(v) for k, v in nu.items()}
        rho_d = {k: float(rho) for k in keys} if np.isscalar(rho) else {_key(k): float(v) for k, v in rho.items()}
        gam_d = {p.key: {l: 1.0 for l in p.sources} for p in structure.pairs}
        for k, v in (gamma or {}).items():
            k = _key(k)
            if isinstance(v, Mapping):
                gam_d[k].update({int(l): float(x) for l, x in v.items()})
            else:
                l, jp = k
                j = structure.partition.block_of(l)
                gam_d[(j, jp)][l] = float(v)
        alpha_d = {}
        for p in structure.pairs:
            for l in p.sources:
                for m in p.dests[l]:
                    alpha_d[(l, m)] = 1.0 / len(p.dests[l])
        for k, v in (alpha or {}).items():
            alpha_d[_key(k)] = float(v)
        c_d = {e: 0.0 for e in structure.graph.edges}
        for k, v in (c or {}).items():
            c_d[_key(k)] = float(v)
        return cls(structure, nu_d, rho_d, gam_d, alpha_d, c_d)

    def replace(self, **changes) -> "ModelParams":
        kw = dict(nu=self.nu, rho=self.rho, gamma=self.gamma, alpha=self.alpha, c=self.c)
        kw.update(changes)
        return ModelParams(self.structure, **kw)

    def with_nu(self, key, value: float) -> "ModelParams":
        nu = dict(self.nu)
        nu[_key(key)] = float(value)
        return self.replace(nu=nu)

    def with_gamma(self, key, state: int, value: float) -> "ModelParams":
        gam = {k: dict(v) for k, v in self.gamma.items()}
        gam[_key(key)][int(state)] = float(value)
        return self.replace(gamma=gam)

    def with_alpha(self, weights: Mapping) -> "ModelParams":
        alpha = dict(self.alpha)
        alpha.update({_key(k): float(v) for k, v in weights.items()})
        return self.replace(alpha=alpha)

    @property
    def views(self) -> tuple:
        return self._views

    def view(self, key) -> _PairView:
        return self._views[self.structure.pair_index(key)]

    def lam(self, key) -> float:
        """The rate on the scale that is updated conjugately, ``nu * rho``."""
        key = _key(key)
        return self.nu[key] * self.rho[key]

    def free_gammas(self) -> list:
        """``(pair_key, state)`` for every log-risk not pinned at 1."""
        return [(p.key, l) for p in self.structure.pairs for l in p.sources if l != p.reference]

    def alpha_groups(self) -> list:
        """``(l, j', destinations)`` for every source with two or more destinations."""
        out = []
        for p in self.structure.pairs:
            for l in p.sources:
                if len(p.dests[l]) > 1:
                    out.append((l, p.key[1], p.dests[l]))
        return out

    def flat(self) -> dict:
        """Named scalar parameters in a stable order."""
        out = {}
        for p in self.structure.pairs:
            j, jp = p.key
            out[f"nu[{j},{jp}]"] = self.nu[p.key]
        for p in self.structure.pairs:
            for l in p.sources:
                if l != p.reference:
                    out[f"gamma[{l},{p.key[1]}]"] = self.gamma[p.key][l]
        for l, _, dests in self.alpha_groups():
            for m in dests:
                out[f"alpha[{l},{m}]"] = self.alpha[(l, m)]
        for e in sorted(self.c):
            if self.c[e] > 0:
                out[f"c[{e[0]},{e[1]}]"] = self.c[e]
        return out


def pair_load(x, view: _PairView) -> float:
    """Weighted count ``S = sum_l gamma_l x_l`` over the pair's sources."""
    return float(np.dot(view.gamma, np.asarray(x, dtype=float)[view.src]))


def zeta_component(x, params: ModelParams, pair) -> float:
    """Event rate of one block pair for configuration ``x``."""
    view = params.view(pair)
    return view.nu * kernels.digamma_diff(view.rho, pair_load(x, view))


def erosion_rate(x, params: ModelParams) -> float:
    x = np.asarray(x)
    return float(sum(x[l - 1] * c for (l, _), c in params.c.items() if c > 0))


def characteristic_index(x, params: ModelParams) -> float:
    """Total event rate: all pair components plus erosion terms."""
    total = 0.0
    for view in params.views:
        S = pair_load(x, view)
        if S > 0:
            total += view.nu * kernels.digamma_diff(view.rho, S)
    return total + erosion_rate(x, params)


@dataclass(frozen=True)
class TransitionEvent:
    """Grouped counts for one co-transition within a block pair.

    ``stay`` maps each source state to the number of units that remained;
    ``moves`` maps edges ``(l, m)`` to the number of units that took them.
    """

    pair: tuple
    stay: Mapping
    moves: Mapping

    @property
    def total_moved(self) -> int:
        return int(sum(self.moves.values()))

    def counts(self, view: _PairView):
        src = [int(i) + 1 for i in view.src]
        r = [int(self.stay.get(l, 0)) for l in src]
        d = [0] * len(src)
        for (l, m), k in self.moves.items():
            d[src.index(l)] += int(k)
        return r, d


def log_dislocation(view: _PairView, r, d) -> float:
    """Log of the integral ``I(r, d; gamma, rho)`` for one pair."""
    return kernels.log_dislocation_integral(r, d, view.gamma, view.rho)


def log_lambda_counts(view: _PairView, r, d, moves: Mapping) -> float:
    """Log rate of an event given stay counts ``r``, per-source moves ``d`` and edge moves."""
    D = sum(d)
    if D < 1:
        raise ValueError("an event must move at least one unit")
    log_w = 0.0
    for e, k in moves.items():
        if k:
            la = view.log_alpha.get(e)
            if la is None:
                return -math.inf
            log_w += k * la
    out = math.log(view.nu) + log_dislocation(view, r, d) + log_w if log_w > -math.inf else -math.inf
    if D == 1:
        (e,) = [e for e, k in moves.items() if k]
        c = view.erosion.get(e, 0.0)
        if c > 0:
            out = np.logaddexp(out, math.log(c))
    return float(out)


def log_lambda_transition(event: TransitionEvent, params: ModelParams) -> float:
    view = params.view(event.pair)
    for (l, m) in event.moves:
        if (l, m) not in view.log_alpha:
            return -math.inf
    r, d = event.counts(view)
    return log_lambda_counts(view, r, d, event.moves)


def lambda_transition(event: TransitionEvent, params: ModelParams) -> float:
    """Non-normalised rate of a grouped co-transition."""
    return math.exp(log_lambda_transition(event, params))


def event_from_states(y, y_next, params: ModelParams) -> TransitionEvent:
    """Group the change ``y -> y_next`` into a single block-pair event."""
    y = np.asarray(y, dtype=np.int64)
    y_next = np.asarray(y_next, dtype=np.int64)
    if y.shape != y_next.shape:
        raise ValueError("state vectors must have equal length")
    changed = np.nonzero(y != y_next)[0]
    if changed.size == 0:
        raise ValueError("no unit changes state")
    st = params.structure
    moves: dict = {}
    pair = None
    for u in changed:
        e = (int(y[u]), int(y_next[u]))
        if e not in st.edge_pair:
            raise ValueError(f"move {e} is not an edge of the graph")
        p = st.pairs[st.edge_pair[e]].key
        if pair is None:
            pair = p
        elif p != pair:
            raise ValueError("all moves of one event must lie in one block pair")
        moves[e] = moves.get(e, 0) + 1
    spec = st.pair(pair)
    movers = set(int(u) for u in changed)
    stay = {l: 0 for l in spec.sources}
    for u, state in enumerate(y):
        if u not in movers and int(state) in stay:
            stay[int(state)] += 1
    return TransitionEvent(pair, stay, moves)


def transition_prob(y, y_next, params: ModelParams) -> float:
    """Probability that the jump out of ``y`` lands on ``y_next``."""
    zeta = characteristic_index(configuration_of(y, params.structure.s), params)
    if zeta <= 0:
        raise ValueError("population is fully absorbed; no transition is possible")
    return lambda_transition(event_from_states(y, y_next, params), params) / zeta


def enumerate_transitions(y, params: ModelParams):
    """All admissible successor state vectors of ``y`` with their probabilities."""
    y = np.asarray(y, dtype=np.int64)
    zeta = characteristic_index(configuration_of(y, params.structure.s), params)
    if zeta <= 0:
        raise ValueError("population is fully absorbed; no transition is possible")
    out = []
    for p in params.structure.pairs:
        units = [u for u, st in enumerate(y) if int(st) in p.dests]
        options = [(int(y[u]),) + p.dests[int(y[u])] for u in units]
        for choice in product(*options):
            if all(a == int(y[u]) for a, u in zip(choice, units)):
                continue
            y2 = y.copy()
            y2[units] = choice
            out.append((y2, transition_prob(y, y2, params)))
    return out


def quadrature_oracle(r, d, gamma, rho: float, rtol: float = 1e-10) -> float:
    """Adaptive quadrature of the dislocation integral in ``u = -log p``.

    With ``d`` all zero the integrand is the characteristic-index form
    ``(1 - p^S) p^(rho-1) / (1 - p)`` with ``S = sum gamma r``. Raises
    ``ArithmeticError`` when the integrator cannot reach ``rtol``.
    """
    r = np.asarray(r, dtype=float)
    d = np.asarray(d, dtype=float)
    g = np.asarray(gamma, dtype=float)
    A = float(np.dot(g, r))
    zeta_form = not np.any(d > 0)

    def logf(u):
        if zeta_form:
            return math.log(-math.expm1(-A * u)) - rho * u - math.log(-math.expm1(-u))
        out = -(rho + A) * u - math.log(-math.expm1(-u))
        for gl, dl in zip(g, d):
            if dl:
                out += dl * math.log(-math.expm1(-gl * u))
        return out

    if zeta_form and A == 0:
        return 0.0
    res = optimize.minimize_scalar(lambda v: -logf(math.exp(v)), bounds=(-40.0, 8.0), method="bounded",
                                   options={"xatol": 1e-8})
    u_star = math.exp(res.x)
    fmax = logf(u_star)

    def f(u):
        return math.exp(logf(u) - fmax) if u > 0 else 0.0

    cuts = {u_star * k for k in (1e-4, 1e-2, 0.1, 0.3, 0.6, 1.0, 1.5, 2.5, 5.0, 10.0, 30.0)}
    cuts |= {1e-3, 1e-2, 0.1, 1.0, 10.0, 50.0}
    cuts = sorted(u for u in cuts if 1e-12 < u < 200.0)
    edges = [0.0] + cuts
    total = 0.0
    err = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        v, e = integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-13, limit=200)
        total += v
        err += e
    v, e = integrate.quad(f, edges[-1], np.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    total += v
    err += e
    if not err <= rtol * total:
        raise ArithmeticError(f"quadrature did not converge: estimate {total:g}, error {err:g}")
    return total * math.exp(fmax)
