"""Experiment drivers, norms, ensembles and reporting.

The drivers reproduce the validation studies at desk scale: deterministic
diffusion convergence, stochastic diffusion against analytic and FEM
references, a bistable switch on a disk, and a hybrid accuracy/runtime
benchmark.
"""
from __future__ import annotations

import csv
import json
import math
import time as _time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from importlib import resources
from pathlib import Path

import numpy as np

from .fem import DiffusionOperator, operator_from_mesh
from .hybrid import HybridConfig, HybridSolver, PhaseTimes, macro_integrate
from .mesh import Mesh, build_1d_mesh, build_disk, build_structured_unit_square, disk_ring_counts
from .model import Mode, ReactionModel, make_state, parse_model
from .ssa import NSMEngine

AVOGADRO = 6.02214076e23


# -- norms and reference solutions ------------------------------------------

@dataclass(frozen=True)
class NormPair:
    l2: float
    linf: float


def weighted_norms(u, areas) -> NormPair:
    """``||u||_2 = sqrt(sum u_j^2 |C_j|)`` and ``||u||_inf = max |u_j|``."""
    u = np.asarray(u, dtype=float)
    a = np.asarray(areas, dtype=float)
    if u.shape != a.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {a.shape}")
    if u.size == 0:
        return NormPair(0.0, 0.0)
    return NormPair(float(np.sqrt(np.sum(u * u * a))), float(np.max(np.abs(u))))


def analytic_solution(x, y, t, gamma):
    """``100 (1 - cos(2 pi x) exp(-4 gamma pi^2 t))``; independent of ``y``."""
    x = np.asarray(x, dtype=float)
    return 100.0 * (1.0 - np.cos(2 * np.pi * x) * np.exp(-4.0 * gamma * np.pi**2 * t))


def square_mesh(n: int) -> Mesh:
    """Structured mesh of ``[-0.5, 0.5]^2``."""
    return build_structured_unit_square(n, origin_offset=(-0.5, -0.5))


# -- ensembles ---------------------------------------------------------------

@dataclass
class Accumulator:
    """Associative running sums for per-component means and standard errors."""

    n: int = 0
    s: np.ndarray | float = 0.0
    ss: np.ndarray | float = 0.0

    def add(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.n += 1
        self.s = self.s + x
        self.ss = self.ss + x * x

    def merge(self, other: "Accumulator") -> "Accumulator":
        return Accumulator(self.n + other.n, self.s + other.s, self.ss + other.ss)

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.s) / self.n

    @property
    def var(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(np.asarray(self.s, dtype=float))
        m = self.mean
        return np.maximum(np.asarray(self.ss) / self.n - m * m, 0.0) * self.n / (self.n - 1)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(self.var / self.n)


def _run_chunk(task, seed, lo, hi) -> Accumulator:
    acc = Accumulator()
    for k in range(lo, hi):
        acc.add(task(seed, k))
    return acc


def run_ensemble(task, M: int, seed: int, workers: int = 1, chunks: int | None = None) -> Accumulator:
    """Run ``task(seed, trajectory)`` for ``trajectory < M`` and reduce.

    The reduction uses sums and sums of squares only, so the result does
    not depend on how trajectories are scheduled over workers.
    """
    if M < 1:
        raise ValueError("ensemble size must be >= 1")
    if workers <= 1:
        return _run_chunk(task, seed, 0, M)
    chunks = chunks or 4 * workers
    bounds = np.linspace(0, M, min(chunks, M) + 1).astype(int)
    total = Accumulator()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(_run_chunk, [task] * (len(bounds) - 1), [seed] * (len(bounds) - 1),
                         bounds[:-1].tolist(), bounds[1:].tolist())
        for p in parts:
            total = total.merge(p)
    return total


def placement_rng(seed: int, trajectory: int) -> np.random.Generator:
    """Stream for initial conditions, disjoint from the sampler substream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trajectory, 1)))


def place_molecules(weights, total: int, rng: np.random.Generator | None = None,
                    method: str = "multinomial") -> np.ndarray:
    """Distribute ``total`` molecules over cells proportionally to ``weights``.

    ``multinomial`` samples; ``round`` is deterministic largest-remainder
    rounding.
    """
    w = np.clip(np.asarray(weights, dtype=float), 0, None)
    if w.sum() <= 0:
        raise ValueError("placement weights must have positive sum")
    p = w / w.sum()
    if method == "multinomial":
        if rng is None:
            raise ValueError("multinomial placement needs a generator")
        return rng.multinomial(int(total), p).astype(float)
    if method == "round":
        raw = p * total
        out = np.floor(raw)
        short = int(round(total - out.sum()))
        out[np.argsort(-(raw - out), kind="stable")[:short]] += 1
        return out
    raise ValueError(f"unknown placement method {method!r}")


# -- configuration and output ------------------------------------------------

@dataclass
class ExperimentConfig:
    experiment: str
    mesh: dict = field(default_factory=dict)
    model: str | None = None
    gamma: float | None = None
    ensemble: int = 1
    t_end: float = 1.0
    dts: tuple = ()
    seed: int = 0
    out: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ensemble < 1:
            raise ValueError("ensemble size M must be >= 1")
        if self.model is not None and not Path(self.model).exists():
            raise FileNotFoundError(self.model)


def write_csv(path, rows: list) -> None:
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def builtin_model(name: str, constants=None) -> ReactionModel:
    text = resources.files("rdmesh").joinpath("models", f"{name}.rdm").read_text()
    return parse_model(text, constants)


# -- deterministic convergence -----------------------------------------------

def concentration_integrate(op: DiffusionOperator, u0, t_end: float, dt: float, scheme: str = "trap"):
    """Trapezoidal FEM solution ``u' = D u`` via copy numbers ``x = A u``."""
    return macro_integrate(op, np.asarray(op.A) * u0, t_end, dt, scheme) / np.asarray(op.A)


def run_diffusion_convergence(ns=(3, 6, 8, 16, 32), gamma: float = 1e-3, t_end: float = 1.0,
                              dt: float = 1e-2) -> list:
    """Macroscopic FEM error against the analytic solution at the vertices.

    ``rate`` compares each row with the previous one:
    ``log(e_prev / e) / log(h_prev / h)``, i.e. ``log2`` of the error
    ratio when ``h_max`` halves.  ``l2_scaled`` divides by the system size
    100, the scale used for the stochastic comparisons.
    """
    rows = []
    prev = None
    for n in ns:
        mesh = square_mesh(n)
        op = operator_from_mesh(mesh, gamma)
        x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
        u0 = analytic_solution(x, y, 0.0, gamma)
        ud = concentration_integrate(op, u0, t_end, dt) if t_end > 0 else u0
        err = weighted_norms(ud - analytic_solution(x, y, t_end, gamma), op.A)
        h = mesh.h_max()
        rate = math.nan
        if prev is not None and err.l2 > 0:
            rate = math.log(prev[1] / err.l2) / math.log(prev[0] / h)
        rows.append(dict(n=n, K=mesh.num_vertices, h_max=h, l2_error=err.l2, linf_error=err.linf,
                         l2_scaled=err.l2 / 100.0, rate=rate))
        prev = (h, err.l2)
    return rows


# -- stochastic diffusion table ----------------------------------------------

def _diffusion_traj(engine: NSMEngine, model, weights, t_end, placement, seed, k):
    rng = placement_rng(seed, k)
    x0 = place_molecules(weights, 100, rng, placement)
    s = engine.start(make_state(model, x0[None, :]), seed, k)
    s.simulate_until(t_end)
    return np.asarray(s.x[0], dtype=float)


def diffusion_reference(mesh: Mesh, op: DiffusionOperator, gamma: float, t_end: float, dt: float = 1e-2):
    """Analytic values and the FEM solution from mass-normalized initial data.

    The FEM initial vector is the interpolant scaled so that
    ``sum |C_j| u_j = 100``, the mass the molecules carry.
    """
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    u0 = analytic_solution(x, y, 0.0, gamma)
    u0 = u0 * 100.0 / float(np.sum(u0 * op.A))
    ud = concentration_integrate(op, u0, t_end, dt)
    return analytic_solution(x, y, t_end, gamma), ud


def run_stochastic_diffusion_table(ns=(3, 6), ms=(10**2, 10**3, 10**4, 10**5, 10**6), gamma: float = 1e-3,
                                   t_end: float = 1.0, seed: int = 0, placement: str = "multinomial",
                                   workers: int = 1) -> list:
    """Stochastic cell concentrations vs analytic and FEM references.

    ``m`` molecules in total are split into ``M = m / 100`` trajectories of
    100 molecules.  ``u_m = counts / (M |C_j|)`` and every difference is
    divided by 100.  ``se_*`` are the norms of the per-cell Monte-Carlo
    standard errors of ``u_m`` (divided by 100), the noise floor of ``delta_d``.
    """
    model = parse_model("species A\n")
    rows = []
    for n in ns:
        mesh = square_mesh(n)
        op = operator_from_mesh(mesh, gamma)
        engine = NSMEngine(model, op)
        ua, ud = diffusion_reference(mesh, op, gamma, t_end)
        x = mesh.vertices[:, 0]
        weights = op.A * analytic_solution(x, 0 * x, 0.0, gamma)
        for m in ms:
            M = max(1, int(m) // 100)
            task = partial(_diffusion_traj, engine, model, weights, t_end, placement)
            t0 = _time.perf_counter()
            acc = run_ensemble(task, M, seed + int(m), workers)
            wall = _time.perf_counter() - t0
            um = acc.mean / op.A
            se = acc.stderr / op.A
            da, dd, sn = (weighted_norms(um - ua, op.A), weighted_norms(um - ud, op.A), weighted_norms(se, op.A))
            rows.append(dict(n=n, K=mesh.num_vertices, h_max=mesh.h_max(), m=int(m), M=M,
                             delta_a_l2=da.l2 / 100, delta_d_l2=dd.l2 / 100,
                             delta_a_linf=da.linf / 100, delta_d_linf=dd.linf / 100,
                             se_l2=sn.l2 / 100, se_linf=sn.linf / 100, wall_time=wall))
    return rows


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


# -- first exit from a 1D node -----------------------------------------------

def first_exit_samples(h_left: float, h_right: float, gamma: float, n: int, seed: int = 0):
    """Exit times and exit-left indicators of one molecule at the middle node."""
    mesh = build_1d_mesh([0.0, h_left, h_left + h_right])
    op = operator_from_mesh(mesh, gamma)
    model = parse_model("species A\n")
    engine = NSMEngine(model, op)
    x0 = make_state(model, np.array([[0.0, 1.0, 0.0]]))
    times = np.empty(n)
    left = np.empty(n, dtype=bool)
    for k in range(n):
        ev = engine.start(x0, seed, k).step()
        times[k] = ev.t
        left[k] = ev.target == 0
    return times, left


# -- bistable switch on a disk -----------------------------------------------

def bistable_ka_2d(ka_molar: float = 1.2e8, thickness: float = 1e-6) -> float:
    """Convert ``M^-1 s^-1`` to a per-molecule 2D constant in ``m^2/s``."""
    return ka_molar / (AVOGADRO * 1e3 * thickness)


def run_bistable(gammas=(2e-13, 1e-12), radius: float = 3e-6, n_rings: int = 18, t_end: float = 2.0,
                 enzymes: int = 100, snapshot_times=None, seed: int = 0) -> dict:
    """One trajectory per diffusion constant; concentration snapshots of A and B.

    The separation index is the Pearson correlation of the A and B
    concentration fields at the final time (negative when the disk splits
    into opposite phases).
    """
    mesh = build_disk(radius, n_rings)
    model = builtin_model("bistable", {"ka": bistable_ka_2d()})
    snaps_at = sorted(set(snapshot_times or (0.0, t_end / 2, t_end)) | {t_end})
    iA, iB, iEA, iEB = (model.index[s] for s in ("A", "B", "EA", "EB"))
    out = {}
    for g in gammas:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            op = operator_from_mesh(mesh, g)
        rng = placement_rng(seed, 0)
        x0 = np.zeros((len(model.species), mesh.num_vertices))
        x0[iEA] = place_molecules(op.A, enzymes, rng)
        x0[iEB] = place_molecules(op.A, enzymes, rng)
        s = NSMEngine(model, op).start(make_state(model, x0), seed, 0)
        snaps = {}
        for ts in snaps_at:
            s.simulate_until(ts)
            c = s.counts()
            snaps[ts] = dict(A=c[iA] / op.A, B=c[iB] / op.A)
        final = s.counts()
        a, b = snaps[t_end]["A"], snaps[t_end]["B"]
        corr = float(np.corrcoef(a, b)[0, 1]) if a.std() > 0 and b.std() > 0 else math.nan
        out[g] = dict(gamma=g, K=mesh.num_vertices, events=s.stats.events,
                      reaction_events=s.stats.reaction_events, diffusion_events=s.stats.diffusion_events,
                      wall_time=s.stats.wall_time, totals=final.sum(axis=1), snapshots=snaps,
                      separation_index=corr, var_A=float(np.var(a)), finite=bool(np.all(np.isfinite(final))),
                      nonneg=bool(np.all(final >= 0)))
    return out


# -- hybrid benchmark ----------------------------------------------------------

def metabolite_setup(K: int = 80, n_rings: int = 4, metabolites: float = 1500.0, gamma: float | None = None):
    """Disk of radius pi^-1/2 with ``K`` cells, the metabolite-enzyme model and its initial state.

    Initial metabolite concentrations are uniform: ``metabolites``
    molecules of A and of B are spread proportionally to cell areas by
    largest-remainder rounding.  Enzymes start at zero.
    """
    mesh = build_disk(math.pi**-0.5, n_rings, ring_counts=disk_ring_counts(K, n_rings))
    zeta = mesh.measure() / mesh.num_vertices
    model = builtin_model("metabolites", {"zeta": zeta})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        op = operator_from_mesh(mesh, gamma if gamma is not None else model.gamma)
    x0 = np.zeros((4, mesh.num_vertices))
    x0[model.index["A"]] = place_molecules(op.A, metabolites, method="round")
    x0[model.index["B"]] = place_molecules(op.A, metabolites, method="round")
    return mesh, model, op, make_state(model, x0)


def _concentrations(values, A):
    return np.asarray(values, dtype=float) / np.asarray(A)[None, :]


def _ssa_traj(engine, x0, t_end, A, seed, k):
    s = engine.start(x0, seed, k)
    s.simulate_until(t_end)
    return _concentrations(s.x, A)


def _hybrid_traj(solver, x0, t_end, cfg, A, times, seed, k):
    r = solver.run(x0, t_end, cfg, seed, k)
    times.stochastic += r.times.stochastic
    times.deterministic += r.times.deterministic
    return _concentrations(r.state.values, A)


def table_delta(ref: np.ndarray, other: np.ndarray, A) -> float:
    """``max_i ||ref_i - other_i||_2 / (max_j ref_ij - min_j ref_ij)``.

    A species with a flat reference contributes 0 when it matches exactly
    and ``inf`` otherwise.
    """
    vals = []
    for i in range(ref.shape[0]):
        spread = float(ref[i].max() - ref[i].min())
        diff = weighted_norms(ref[i] - other[i], A).l2
        vals.append(diff / spread if spread > 0 else (0.0 if diff == 0 else math.inf))
    return max(vals)


def run_hybrid_benchmark(dts=(0.1, 1.0, 5.0, 10.0), M: int = 200, t_end: float = 10.0, seed: int = 0,
                         runtime_dt: float = 5.0, gammas=(), runtime_M: int | None = None) -> dict:
    """Hybrid vs full-SSA accuracy and runtime on the metabolite-enzyme model.

    Returns the reference statistics, a ``delta`` row per dt (with the
    deterministic/stochastic phase times and a Monte-Carlo noise level),
    and optional total runtimes per diffusion constant.
    """
    mesh, model, op, x0 = metabolite_setup()
    A = op.A
    stoch_model = model.with_modes({s.name: Mode.STOCHASTIC for s in model.species})
    ssa_engine = NSMEngine(stoch_model, op)
    t0 = _time.perf_counter()
    ref = run_ensemble(partial(_ssa_traj, ssa_engine, x0, t_end, A), M, seed)
    ssa_wall = _time.perf_counter() - t0
    # Trajectories of the different dt are interleaved so that drifting
    # machine load affects every dt alike in the timing comparison.
    solvers = [HybridSolver(model, op, "trap") for _ in dts]
    cfgs = [HybridConfig(dt=dt) for dt in dts]
    for solver, cfg in zip(solvers, cfgs):
        solver.stepper(cfg.dt, 1.0)
    accs = [Accumulator() for _ in dts]
    phase = [PhaseTimes() for _ in dts]
    walls = [0.0 for _ in dts]
    for k in range(M):
        for n, (solver, cfg) in enumerate(zip(solvers, cfgs)):
            t0 = _time.perf_counter()
            accs[n].add(_hybrid_traj(solver, x0, t_end, cfg, A, phase[n], seed + 1 + n, k))
            walls[n] += _time.perf_counter() - t0
    rows = []
    for n, dt in enumerate(dts):
        acc = accs[n]
        noise = table_delta(ref.mean, ref.mean + np.sqrt(ref.stderr**2 + acc.stderr**2), A)
        rows.append(dict(dt=dt, delta_t=table_delta(ref.mean, acc.mean, A), noise_level=noise,
                         wall_time=walls[n], stochastic_time=phase[n].stochastic,
                         deterministic_time=phase[n].deterministic, factor_time=solvers[n].factor_time))
    runtime = []
    for g in gammas:
        Mg = runtime_M or M
        mesh_g, model_g, op_g, x0_g = metabolite_setup(gamma=g)
        sm = model_g.with_modes({s.name: Mode.STOCHASTIC for s in model_g.species})
        t0 = _time.perf_counter()
        run_ensemble(partial(_ssa_traj, NSMEngine(sm, op_g), x0_g, t_end, op_g.A), Mg, seed)
        t_ssa = _time.perf_counter() - t0
        cfg = HybridConfig(dt=runtime_dt)
        solver = HybridSolver(model_g, op_g, cfg.scheme)
        t0 = _time.perf_counter()
        run_ensemble(partial(_hybrid_traj, solver, x0_g, t_end, cfg, op_g.A, PhaseTimes()), Mg, seed + 1)
        runtime.append(dict(gamma=g, M=Mg, ssa_time=t_ssa, hybrid_time=_time.perf_counter() - t0))
    return dict(K=mesh.num_vertices, M=M, t_end=t_end, ssa_wall_time=ssa_wall, reference_mean=ref.mean,
                reference_stderr=ref.stderr, rows=rows, runtime=runtime)


# -- dispatcher ------------------------------------------------------------

EXPERIMENTS = ("convergence", "table1", "bistable", "hybrid")


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one experiment, write CSV/JSON into ``cfg.out`` and return the summary."""
    t0 = _time.perf_counter()
    p = dict(cfg.params)
    if cfg.experiment == "convergence":
        rows = run_diffusion_convergence(gamma=cfg.gamma or 1e-3, t_end=cfg.t_end, **p)
        tables = {"convergence": rows}
    elif cfg.experiment == "table1":
        rows = run_stochastic_diffusion_table(gamma=cfg.gamma or 1e-3, t_end=cfg.t_end, seed=cfg.seed, **p)
        tables = {"table1": rows}
    elif cfg.experiment == "bistable":
        res = run_bistable(t_end=cfg.t_end, seed=cfg.seed, **p)
        tables = {"bistable": [{k: v for k, v in r.items() if k not in ("snapshots", "totals")} for r in res.values()]}
        for g, r in res.items():
            tables[f"bistable_snapshots_{g:g}"] = [
                dict(t=t, cell=j, A=snap["A"][j], B=snap["B"][j])
                for t, snap in r["snapshots"].items() for j in range(len(snap["A"]))
            ]
    elif cfg.experiment == "hybrid":
        res = run_hybrid_benchmark(M=cfg.ensemble, t_end=cfg.t_end, seed=cfg.seed,
                                   dts=tuple(cfg.dts) or (0.1, 1.0, 5.0, 10.0), **p)
        tables = {"hybrid_accuracy": res["rows"], "hybrid_runtime": res["runtime"]}
    else:
        raise ValueError(f"unknown experiment {cfg.experiment!r}; choose from {EXPERIMENTS}")
    summary = dict(config=asdict(cfg), wall_time=_time.perf_counter() - t0,
                   tables={k: v for k, v in tables.items() if not k.startswith("bistable_snapshots")})
    if cfg.out:
        for name, rows in tables.items():
            write_csv(Path(cfg.out) / f"{name}.csv", rows)
        write_json(Path(cfg.out) / f"{cfg.experiment}.json", summary)
    return summary
