"""File formats: JSON configuration, panel/trajectory/draws/curve CSVs."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import SurvivalCurve
from .mcmc import McmcConfig, PosteriorDraws, PriorSpec
from .measure import ModelParams
from .statespace import BlockStructure, Partition, TransitionGraph, build_graph, validate
from .trajectory import PanelData, PanelRecord, PopulationTrajectory, UnitPath


class FormatError(ValueError):
    """A malformed input file; the message carries the location."""


def fmt(x) -> str:
    """Float with 17 significant digits (exact round trip)."""
    return format(float(x), ".17g")


def _pair_key(text, where: str) -> tuple:
    if isinstance(text, (list, tuple)) and len(text) == 2:
        return int(text[0]), int(text[1])
    m = re.fullmatch(r"\s*\(?\s*(\d+)\s*,\s*(\d+)\s*\)?\s*", str(text))
    if not m:
        raise FormatError(f"{where}: key {text!r} is not of the form 'a,b'")
    return int(m.group(1)), int(m.group(2))


def _key_text(k) -> str:
    return f"{k[0]},{k[1]}"


# ---------------------------------------------------------------- config

_TOP_KEYS = {"graph", "partition", "rho", "params", "initial_states", "priors", "mcmc", "seed", "horizon",
             "observe_every", "name"}
_MCMC_KEYS = {"iterations", "burn_in", "latent_period", "step", "uniformization", "adapt", "init_jitter"}
_PRIOR_KEYS = {"gamma_shape", "gamma_rate", "dirichlet", "log_gamma_mean", "log_gamma_sd"}
_PARAM_KEYS = {"nu", "gamma", "alpha", "c"}


@dataclass
class ConfigDocument:
    """Parsed configuration. ``raw`` keeps the JSON form for lossless writes."""

    raw: dict
    structure: BlockStructure
    rho: float = 1.0
    prior: PriorSpec = field(default_factory=PriorSpec)
    mcmc: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def graph(self) -> TransitionGraph:
        return self.structure.graph

    def model_params(self) -> ModelParams:
        """Parameters from the ``params`` section (defaults fill the rest)."""
        p = self.raw.get("params", {})
        try:
            nu = p.get("nu", 1.0)
            if isinstance(nu, dict):
                nu = {_pair_key(k, "params.nu"): float(v) for k, v in nu.items()}
            gamma = {_pair_key(k, "params.gamma"): float(v) for k, v in p.get("gamma", {}).items()}
            alpha = {_pair_key(k, "params.alpha"): float(v) for k, v in p.get("alpha", {}).items()}
            c = {_pair_key(k, "params.c"): float(v) for k, v in p.get("c", {}).items()}
            return ModelParams.create(self.structure, nu=nu, rho=self.rho, gamma=gamma, alpha=alpha, c=c)
        except FormatError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"params: {exc}") from exc

    def initial_states(self, n: int) -> np.ndarray:
        """Initial states for ``n`` units, split in proportion to ``initial_states`` counts."""
        spec = self.raw.get("initial_states", {"1": 1})
        states = sorted(int(k) for k in spec)
        w = np.array([float(spec[str(k)] if str(k) in spec else spec[k]) for k in states])
        counts = np.floor(n * w / w.sum()).astype(int)
        counts[0] += n - counts.sum()
        return np.repeat(states, counts)

    def mcmc_config(self, **overrides) -> McmcConfig:
        kw = dict(self.mcmc)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return McmcConfig(**kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw))


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise FormatError(f"{where}: expected an object")
    for k in d:
        if k not in allowed:
            raise FormatError(f"{where}.{k}: unknown key" if where else f"{k}: unknown key")


def parse_config(raw: dict) -> ConfigDocument:
    """Validate a config mapping; errors name the offending key."""
    _check_keys(raw, _TOP_KEYS, "")
    if "graph" not in raw:
        raise FormatError("graph: required key missing")
    g = raw["graph"]
    try:
        if isinstance(g, str):
            graph = build_graph(g)
        elif isinstance(g, dict):
            _check_keys(g, {"s", "edges", "labels", "name"}, "graph")
            graph = build_graph([tuple(e) for e in g.get("edges", [])], g.get("s"), g.get("labels", ()))
        else:
            raise FormatError("graph: expected a builtin name or an object with edges")
    except FormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise FormatError(f"graph: {exc}") from exc
    part = None
    if "partition" in raw:
        pr = raw["partition"]
        _check_keys(pr, {"blocks", "representatives"}, "partition")
        try:
            part = Partition(tuple(tuple(b) for b in pr["blocks"]), tuple(pr.get("representatives", ())))
        except KeyError:
            raise FormatError("partition.blocks: required key missing") from None
        except (ValueError, TypeError) as exc:
            raise FormatError(f"partition: {exc}") from exc
    try:
        structure = validate(graph, part)
    except ValueError as exc:
        raise FormatError(f"partition: {exc}") from exc
    rho = raw.get("rho", 1.0)
    if not isinstance(rho, (int, float)) or not rho > 0:
        raise FormatError("rho: must be a positive number")
    pri = raw.get("priors", {})
    _check_keys(pri, _PRIOR_KEYS, "priors")
    try:
        kw = {}
        for name in ("gamma_shape", "gamma_rate"):
            if name in pri:
                v = pri[name]
                kw[name] = {_pair_key(k, f"priors.{name}"): float(x) for k, x in v.items()} if isinstance(v, dict) else float(v)
        if "dirichlet" in pri:
            kw["dirichlet"] = {_pair_key(k, "priors.dirichlet"): {int(m): float(w) for m, w in v.items()}
                               for k, v in pri["dirichlet"].items()}
        for name in ("log_gamma_mean", "log_gamma_sd"):
            if name in pri:
                kw[name] = float(pri[name])
        prior = PriorSpec(**kw)
    except FormatError:
        raise
    except (ValueError, TypeError, AttributeError) as exc:
        raise FormatError(f"priors: {exc}") from exc
    mc = raw.get("mcmc", {})
    _check_keys(mc, _MCMC_KEYS, "mcmc")
    for k in ("iterations", "burn_in", "latent_period"):
        if k in mc and (not isinstance(mc[k], int) or isinstance(mc[k], bool) or mc[k] < 0):
            raise FormatError(f"mcmc.{k}: must be a non-negative integer")
    _check_keys(raw.get("params", {}), _PARAM_KEYS, "params")
    if "initial_states" in raw:
        ini = raw["initial_states"]
        if not isinstance(ini, dict) or not ini:
            raise FormatError("initial_states: expected an object of state: count")
        for k, v in ini.items():
            if not str(k).isdigit() or not 1 <= int(k) <= graph.s or graph.is_absorbing(int(k)):
                raise FormatError(f"initial_states.{k}: not a live state")
            if not isinstance(v, (int, float)) or v < 0:
                raise FormatError(f"initial_states.{k}: count must be non-negative")
    seed = raw.get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise FormatError("seed: must be a non-negative integer")
    doc = ConfigDocument(raw, structure, float(rho), prior, dict(mc), seed)
    doc.model_params()
    return doc


def read_config(path) -> ConfigDocument:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(raw)


def write_config(path, doc: ConfigDocument | dict) -> None:
    raw = doc.raw if isinstance(doc, ConfigDocument) else doc
    Path(path).write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def builtin_config(name: str) -> ConfigDocument:
    """Shipped configs: ``simulation_study`` and ``cav``."""
    from importlib import resources

    text = resources.files("msurv").joinpath("data", f"{name}.json").read_text(encoding="utf-8")
    return parse_config(json.loads(text))


# ---------------------------------------------------------------- panels

PANEL_COLUMNS = ("unit_id", "time", "state", "event")
_EVENTS = ("obs", "death", "censor")


def _open_csv(path, required):
    f = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(f)
    if reader.fieldnames is None:
        f.close()
        raise FormatError(f"{path}: empty file")
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        f.close()
        raise FormatError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
    return f, reader


def _blank(v) -> bool:
    return v is None or v.strip() in ("", "-", "NA")


def read_panel_csv(path, graph: TransitionGraph | None = None) -> PanelData:
    """Read a panel CSV (unit_id, time, state, event).

    Rows are grouped per unit in file order and must be time-sorted. Each
    unit needs exactly one terminal row (``death`` or ``censor``) and nothing
    after it. A censor row with a state doubles as the last observation.
    """
    f, reader = _open_csv(path, PANEL_COLUMNS)
    rows: dict = {}
    order = []
    absorbing = set(graph.absorbing) if graph is not None else set()
    s_max = 0
    with f:
        for line, row in enumerate(reader, start=2):
            where = f"{path}: line {line}"
            uid = (row["unit_id"] or "").strip()
            if not uid:
                raise FormatError(f"{where}: empty unit_id")
            try:
                t = float(row["time"])
            except (TypeError, ValueError):
                raise FormatError(f"{where}: time {row['time']!r} is not a number") from None
            if not math.isfinite(t):
                raise FormatError(f"{where}: time must be finite")
            ev = (row["event"] or "").strip().lower()
            if ev not in _EVENTS:
                raise FormatError(f"{where}: event {row['event']!r} is not one of obs, death, censor")
            state = None
            if not _blank(row["state"]):
                try:
                    state = int(row["state"])
                except ValueError:
                    raise FormatError(f"{where}: state {row['state']!r} is not an integer") from None
                if state < 1 or (graph is not None and state > graph.s):
                    raise FormatError(f"{where}: state {state} out of range")
                s_max = max(s_max, state)
            if ev == "obs" and state is None:
                raise FormatError(f"{where}: obs row needs a state")
            if ev == "obs" and state in absorbing:
                raise FormatError(f"{where}: absorbing state {state} in an obs row")
            if uid not in rows:
                rows[uid] = []
                order.append(uid)
            prev = rows[uid]
            if prev and prev[-1][2] != "obs":
                raise FormatError(f"{where}: unit {uid} has a row after its terminal row")
            if prev and t < prev[-1][0]:
                raise FormatError(f"{where}: unit {uid} times are not sorted")
            if prev and t == prev[-1][0]:
                raise FormatError(f"{where}: unit {uid} has a duplicate time {t}")
            prev.append((t, state, ev, line))
    records = []
    for uid in order:
        rs = rows[uid]
        last = rs[-1]
        if last[2] == "obs":
            raise FormatError(f"{path}: line {last[3]}: unit {uid} has no terminal death or censor row")
        obs = [(t, y) for t, y, ev, _ in rs if ev == "obs"]
        V, fs, ev = last[0], last[1], last[2]
        if ev == "censor" and fs is not None:
            obs.append((V, fs))
        if not obs:
            raise FormatError(f"{path}: line {last[3]}: unit {uid} has no observed state")
        if ev == "death" and fs is not None and graph is not None and fs not in absorbing:
            raise FormatError(f"{path}: line {last[3]}: death row names live state {fs}")
        if ev == "censor" and fs is not None and fs in absorbing:
            raise FormatError(f"{path}: line {last[3]}: censor row names absorbing state {fs}")
        try:
            records.append(PanelRecord(uid, [t for t, _ in obs], [y for _, y in obs], V,
                                       0 if ev == "death" else 1, fs))
        except ValueError as exc:
            raise FormatError(f"{path}: line {last[3]}: {exc}") from exc
    s = graph.s if graph is not None else s_max
    return PanelData(records, s)


def write_panel_csv(path, panel: PanelData) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PANEL_COLUMNS)
        for rec in panel.records:
            for t, y in zip(rec.times, rec.states):
                if rec.delta == 1 and t == rec.V:
                    continue
                w.writerow([rec.unit_id, fmt(t), int(y), "obs"])
            fs = "" if rec.final_state is None else int(rec.final_state)
            if rec.delta == 1 and fs == "" and rec.times[-1] == rec.V:
                fs = int(rec.states[-1])
            w.writerow([rec.unit_id, fmt(rec.V), fs, "death" if rec.delta == 0 else "censor"])


def read_cav_csv(path, graph: TransitionGraph | None = None) -> PanelData:
    """Convert the msm ``cav`` export (PTNUM, years, state; 4 = death).

    The last appointment of a surviving patient becomes its censor row.
    Other columns are ignored.
    """
    f, reader = _open_csv(path, ("PTNUM", "years", "state"))
    per: dict = {}
    with f:
        for line, row in enumerate(reader, start=2):
            try:
                per.setdefault(row["PTNUM"].strip(), []).append((float(row["years"]), int(float(row["state"])), line))
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {line}: non-numeric years or state") from None
    graph = graph or build_graph("cav")
    records = []
    for uid, rs in per.items():
        rs.sort(key=lambda r: r[0])
        for a, b in zip(rs[:-1], rs[1:]):
            if a[0] == b[0]:
                raise FormatError(f"{path}: line {b[2]}: unit {uid} has a duplicate time {b[0]}")
            if a[1] == 4:
                raise FormatError(f"{path}: line {b[2]}: unit {uid} has a row after death")
        t, y, line = rs[-1]
        try:
            if y == 4:
                obs = rs[:-1]
                if not obs:
                    raise FormatError(f"{path}: line {line}: unit {uid} dies without an observation")
                records.append(PanelRecord(uid, [r[0] for r in obs], [r[1] for r in obs], t, 0, 4))
            else:
                records.append(PanelRecord(uid, [r[0] for r in rs], [r[1] for r in rs], t, 1, y))
        except ValueError as exc:
            raise FormatError(f"{path}: line {line}: {exc}") from exc
    return PanelData(records, graph.s)


# ---------------------------------------------------------------- trajectories

TRAJECTORY_COLUMNS = ("unit_id", "time", "from_state", "to_state", "censored")


def write_trajectory_csv(path, traj: PopulationTrajectory) -> None:
    """One entry row per unit (empty ``from_state``), one row per jump, and a
    ``censored=1`` row at the censoring time of units not absorbed."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for uid, p in zip(traj.ids, traj.units):
            w.writerow([uid, fmt(p.entry), "", int(p.initial_state), 0])
            for t, a, b in p.jumps():
                w.writerow([uid, fmt(t), a, b, 0])
            if math.isfinite(p.end):
                y = int(p.final_state)
                w.writerow([uid, fmt(p.end), y, y, 1])


def read_trajectory_csv(path, s: int | None = None) -> PopulationTrajectory:
    f, reader = _open_csv(path, TRAJECTORY_COLUMNS[:4])
    per: dict = {}
    order = []
    with f:
        for line, row in enumerate(reader, start=2):
            uid = row["unit_id"].strip()
            try:
                t = float(row["time"])
                to = int(row["to_state"])
                fr = None if _blank(row["from_state"]) else int(row["from_state"])
                cens = not _blank(row.get("censored")) and int(row["censored"]) == 1
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {line}: malformed row") from None
            if uid not in per:
                if fr is not None:
                    raise FormatError(f"{path}: line {line}: unit {uid} must start with an entry row")
                per[uid] = {"times": [t], "states": [to], "end": math.inf}
                order.append(uid)
                continue
            u = per[uid]
            if math.isfinite(u["end"]):
                raise FormatError(f"{path}: line {line}: unit {uid} has a row after censoring")
            if fr != u["states"][-1]:
                raise FormatError(f"{path}: line {line}: unit {uid} from_state {fr} does not match {u['states'][-1]}")
            if cens:
                u["end"] = t
            else:
                u["times"].append(t)
                u["states"].append(to)
    units = []
    for uid in order:
        u = per[uid]
        try:
            units.append(UnitPath(np.array(u["times"]), np.array(u["states"]), u["end"]))
        except ValueError as exc:
            raise FormatError(f"{path}: unit {uid}: {exc}") from exc
    smax = max((int(p.states.max()) for p in units), default=0)
    return PopulationTrajectory(units, s or smax, order)


def is_trajectory_csv(path) -> bool:
    with open(path, newline="", encoding="utf-8") as f:
        header = next(csv.reader(f), [])
    return "from_state" in header and "to_state" in header


# ---------------------------------------------------------------- draws and curves

DRAW_COLUMNS = ("iteration", "parameter", "value")
CURVE_COLUMNS = ("time", "median", "q05", "q95", "baseline_state")


def write_draws(path, draws: PosteriorDraws) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DRAW_COLUMNS)
        for k, it in enumerate(draws.iterations):
            for j, name in enumerate(draws.names):
                w.writerow([int(it), name, fmt(draws.values[k, j])])


def read_draws(path) -> PosteriorDraws:
    """Values only; latents and parameter objects are not stored in the CSV."""
    f, reader = _open_csv(path, DRAW_COLUMNS)
    names: list = []
    table: dict = {}
    with f:
        for line, row in enumerate(reader, start=2):
            try:
                it = int(row["iteration"])
                v = float(row["value"])
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {line}: malformed iteration or value") from None
            name = row["parameter"].strip()
            if name not in names:
                names.append(name)
            table.setdefault(it, {})[name] = v
    iters = sorted(table)
    for it in iters:
        if len(table[it]) != len(names):
            raise FormatError(f"{path}: iteration {it} lacks some parameters")
    values = np.array([[table[it][n] for n in names] for it in iters], dtype=float).reshape(len(iters), len(names))
    return PosteriorDraws(names, np.array(iters, dtype=np.int64), values)


def write_acceptance(path, draws: PosteriorDraws) -> None:
    doc = {"acceptance": draws.acceptance, "steps": draws.steps, "draws": draws.n_draws}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def write_curve(path, curve: SurvivalCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        base = "" if curve.baseline_state is None else int(curve.baseline_state)
        for k, t in enumerate(curve.times):
            lo = "" if curve.q05 is None else fmt(curve.q05[k])
            hi = "" if curve.q95 is None else fmt(curve.q95[k])
            w.writerow([fmt(t), fmt(curve.survival[k]), lo, hi, base])


def read_curve(path) -> SurvivalCurve:
    f, reader = _open_csv(path, CURVE_COLUMNS)
    t, m, lo, hi, base = [], [], [], [], None
    with f:
        for line, row in enumerate(reader, start=2):
            try:
                t.append(float(row["time"]))
                m.append(float(row["median"]))
                lo.append(float("nan") if _blank(row["q05"]) else float(row["q05"]))
                hi.append(float("nan") if _blank(row["q95"]) else float(row["q95"]))
                base = None if _blank(row["baseline_state"]) else int(row["baseline_state"])
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {line}: malformed curve row") from None
    lo_a, hi_a = np.array(lo), np.array(hi)
    return SurvivalCurve(np.array(t), np.array(m), None if np.all(np.isnan(lo_a)) else lo_a,
                         None if np.all(np.isnan(hi_a)) else hi_a, base)


# ---------------------------------------------------------------- latent snapshots

def params_from_flat(structure: BlockStructure, flat: dict, rho: float = 1.0) -> ModelParams:
    """Rebuild parameters from ``nu[j,j']``/``gamma[l,j']``/``alpha[l,m]``/``c[l,m]`` names."""
    parts = {"nu": {}, "gamma": {}, "alpha": {}, "c": {}}
    for name, v in flat.items():
        m = re.fullmatch(r"(nu|gamma|alpha|c)\[(\d+),(\d+)\]", name)
        if not m:
            raise FormatError(f"unknown parameter name {name!r}")
        parts[m.group(1)][(int(m.group(2)), int(m.group(3)))] = float(v)
    return ModelParams.create(structure, nu=parts["nu"], rho=rho, gamma=parts["gamma"],
                              alpha=parts["alpha"], c=parts["c"])


def latents_path(draws_path) -> Path:
    p = Path(draws_path)
    return p.with_name(p.stem + ".latents.npz")


def save_latents(path, draws: PosteriorDraws, config: ConfigDocument) -> None:
    """Store latent snapshots, their draw index and the config next to a draws CSV."""
    offsets, times, states, ends, snap = [0], [], [], [], []
    for k, traj in enumerate(draws.latents):
        for p in traj.units:
            times.append(p.times)
            states.append(p.states)
            ends.append(p.end)
            offsets.append(offsets[-1] + p.times.size)
        snap.append(traj.n)
    ids = draws.latents[0].ids if draws.latents else []
    np.savez_compressed(
        path,
        times=np.concatenate(times) if times else np.zeros(0),
        states=np.concatenate(states) if states else np.zeros(0, dtype=np.int64),
        offsets=np.array(offsets, dtype=np.int64),
        ends=np.array(ends, dtype=float),
        snapshot_sizes=np.array(snap, dtype=np.int64),
        latent_index=draws.latent_index,
        iterations=draws.iterations,
        ids=np.array(ids, dtype=str),
        config=np.array(json.dumps(config.raw)),
    )


def load_latents(path, draws: PosteriorDraws) -> tuple:
    """Attach latents and parameter objects to ``draws``; returns ``(draws, config)``."""
    z = np.load(path, allow_pickle=False)
    config = parse_config(json.loads(str(z["config"])))
    s = config.structure.s
    ids = [str(x) for x in z["ids"]]
    offs = z["offsets"]
    latents = []
    u = 0
    for size in z["snapshot_sizes"]:
        units = [UnitPath(z["times"][offs[i]:offs[i + 1]], z["states"][offs[i]:offs[i + 1]], float(z["ends"][i]))
                 for i in range(u, u + int(size))]
        u += int(size)
        latents.append(PopulationTrajectory(units, s, list(ids)))
    if not np.array_equal(z["iterations"], draws.iterations):
        raise FormatError(f"{path}: latent snapshots do not match the draws file")
    draws.latents = latents
    draws.latent_index = z["latent_index"]
    draws.params = [params_from_flat(config.structure, dict(zip(draws.names, row)), config.rho)
                    for row in draws.values]
    return draws, config
