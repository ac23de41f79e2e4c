"""Strang splitting of macroscopic diffusion and mesoscopic sampling.

Species flagged deterministic diffuse by an implicit scheme applied in
two half steps around an exact SSA step.  The SSA step handles every
reaction and the jumps of the stochastic species.  Deterministic species
hold real values, and reactions change them by real increments.

The linear systems are solved in the symmetrized variables
``y = A^{-1/2} x``, where ``I - c A^{-1/2} Q A^{1/2}`` is symmetric
positive definite.  Each system is factored once per (dt, diffusion
scale) and reused.
"""
from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import DiffusionOperator
from .model import ReactionModel, SystemState
from .ssa import NSMEngine, NSMSampler

SCHEMES = ("trap", "be")
GUARDS = ("check", "clamp", "off")
GUARD_TOL = 1e-9


class NegativeStateError(ArithmeticError):
    pass


class MacroStepper:
    """Implicit half step of length ``dt / 2`` for ``x' = s Q x``.

    ``trap`` solves ``(I - dt/4 sQ) x+ = (I + dt/4 sQ) x`` and ``be``
    solves ``(I - dt/2 sQ) x+ = x``.  Dirichlet cells keep their values,
    which enter the interior equations through the right-hand side.
    """

    def __init__(self, op: DiffusionOperator, dt: float, scheme: str = "trap", diffscale: float = 1.0):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.dt, self.scheme, self.diffscale = float(dt), scheme, float(diffscale)
        half = 0.5 * self.dt
        self.c = 0.5 * half if scheme == "trap" else half
        K = op.num_cells
        r = np.sqrt(np.asarray(op.A, dtype=float))
        self.r = r
        Qs = sp.diags(1.0 / r) @ op.Q @ sp.diags(r) * self.diffscale
        self.Qs = (0.5 * (Qs + Qs.T)).tocsr()
        fixed = np.zeros(K, dtype=bool)
        fixed[list(op.fixed_cells)] = True
        self.fixed = fixed
        self.free = np.flatnonzero(~fixed)
        self.fixed_idx = np.flatnonzero(fixed)
        t0 = _time.perf_counter()
        lhs = (sp.identity(K, format="csr") - self.c * self.Qs)[self.free][:, self.free]
        self.lu = splu(lhs.tocsc())
        self.coupling = (self.c * self.Qs)[self.free][:, self.fixed_idx].tocsr()
        self.factor_time = _time.perf_counter() - t0

    def solve(self, x) -> np.ndarray:
        """One raw half step; no sign guard."""
        x = np.asarray(x, dtype=float)
        y = x / self.r
        rhs = y + self.c * (self.Qs @ y) if self.scheme == "trap" else y
        if not self.fixed_idx.size:
            return self.r * self.lu.solve(rhs)
        b = rhs[self.free] + self.coupling @ y[self.fixed_idx]
        out = x.copy()
        out[self.free] = self.r[self.free] * self.lu.solve(b)
        return out

    def dense_matrix(self) -> np.ndarray:
        """The half-step map as a dense matrix (Neumann only), for checks."""
        if self.fixed_idx.size:
            raise ValueError("dense_matrix is defined for Neumann operators")
        K = self.r.size
        return np.column_stack([self.solve(e) for e in np.eye(K)])


def apply_guard(x: np.ndarray, guard: str) -> tuple:
    """Return ``(x, clamped_mass)`` after the non-negativity guard.

    ``check`` raises below ``-1e-9 * max|x|`` and zeroes the rounding-level
    negatives above it; ``clamp`` zeroes every negative entry.
    """
    if guard == "off":
        return x, 0.0
    neg = x < 0
    if not neg.any():
        return x, 0.0
    scale = max(float(np.abs(x).max()), 1e-300)
    if guard == "check" and float(x.min()) < -GUARD_TOL * scale:
        raise NegativeStateError(f"macro step produced {x.min():.3g} (max magnitude {scale:.3g})")
    mass = float(-x[neg].sum())
    x = x.copy()
    x[neg] = 0.0
    return x, mass


@dataclass
class HybridConfig:
    dt: float
    scheme: str = "trap"
    guard: str = "check"
    snapshots: tuple = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.guard not in GUARDS:
            raise ValueError(f"unknown guard {self.guard!r}")
        self.snapshots = tuple(sorted(float(s) for s in self.snapshots))


@dataclass
class PhaseTimes:
    stochastic: float = 0.0
    deterministic: float = 0.0
    factorization: float = 0.0


@dataclass
class HybridResult:
    state: SystemState
    snapshots: dict = field(default_factory=dict)
    times: PhaseTimes = field(default_factory=PhaseTimes)
    steps: int = 0
    clamped_mass: float = 0.0
    sampler: NSMSampler | None = None


class HybridSolver:
    """Shared, read-only setup for hybrid trajectories of one model/operator."""

    def __init__(self, model: ReactionModel, op: DiffusionOperator, scheme: str = "trap"):
        self.model, self.op, self.scheme = model, op, scheme
        self.det = model.deterministic_mask()
        self.scales = model.diffusion_scales()
        self.engine = NSMEngine(model, op, meso_species=~self.det)
        self._steppers: dict = {}
        self.factor_time = 0.0

    def stepper(self, dt: float, scale: float) -> MacroStepper:
        key = (float(dt), float(scale))
        st = self._steppers.get(key)
        if st is None:
            st = MacroStepper(self.op, dt, self.scheme, scale)
            self._steppers[key] = st
            self.factor_time += st.factor_time
        return st

    def macro_rows(self):
        return [i for i in range(len(self.det)) if self.det[i] and self.scales[i] > 0]

    def half_step(self, sampler: NSMSampler, dt: float, guard: str, result: HybridResult) -> None:
        rows = self.macro_rows()
        if not rows:
            return
        steppers = [self.stepper(dt, self.scales[i]) for i in rows]  # factorization is timed separately
        t0 = _time.perf_counter()
        for i, st in zip(rows, steppers):
            new, mass = apply_guard(st.solve(sampler.x[i]), guard)
            result.clamped_mass += mass
            sampler.x[i] = new.tolist()
        result.times.deterministic += _time.perf_counter() - t0
        t1 = _time.perf_counter()
        sampler.refresh_cells(range(self.op.num_cells))
        result.times.stochastic += _time.perf_counter() - t1

    def strang_step(self, sampler: NSMSampler, dt: float, guard: str, result: HybridResult) -> None:
        t_next = sampler.t + dt
        self.half_step(sampler, dt, guard, result)
        t0 = _time.perf_counter()
        sampler.simulate_until(t_next)
        result.times.stochastic += _time.perf_counter() - t0
        self.half_step(sampler, dt, guard, result)
        result.steps += 1

    def run(self, x0: SystemState, t_end: float, cfg: HybridConfig, seed: int = 0, trajectory: int = 0,
            record: bool = False) -> HybridResult:
        if cfg.scheme != self.scheme:
            raise ValueError("config scheme differs from the solver's scheme")
        if t_end < x0.t:
            raise ValueError("t_end is before the initial time")
        sampler = self.engine.start(x0, seed, trajectory, record)
        result = HybridResult(state=x0, sampler=sampler)
        f0 = self.factor_time
        grid = _time_grid(x0.t, t_end, cfg.dt, cfg.snapshots)
        if x0.t in cfg.snapshots:
            result.snapshots[x0.t] = sampler.state()
        for a, b in zip(grid[:-1], grid[1:]):
            self.strang_step(sampler, b - a, cfg.guard, result)
            sampler.t = b
            if b in cfg.snapshots:
                result.snapshots[b] = sampler.state()
        result.times.factorization = self.factor_time - f0
        result.state = sampler.state()
        return result


def _time_grid(t0: float, t_end: float, dt: float, snapshots=()) -> list:
    """Step boundaries ``t0 + k dt`` plus snapshot times, ending at ``t_end``."""
    n = int(math.floor((t_end - t0) / dt + 1e-9))
    pts = {t0 + k * dt for k in range(n + 1)}
    pts.add(t_end)
    pts.update(s for s in snapshots if t0 < s < t_end)
    pts = sorted(p for p in pts if p <= t_end)
    # merge boundaries closer than rounding noise
    out = [pts[0]]
    for p in pts[1:]:
        if p - out[-1] > 1e-12 * max(1.0, abs(p)):
            out.append(p)
        else:
            out[-1] = p
    return out


def macro_half_step(state: SystemState, model: ReactionModel, op: DiffusionOperator, dt: float,
                    scheme: str = "trap", guard: str = "check") -> SystemState:
    """Half macro step of every deterministic species of ``state``."""
    vals = np.array(state.values, dtype=float)
    det = model.deterministic_mask()
    scales = model.diffusion_scales()
    cache: dict = {}
    for i in range(len(det)):
        if not det[i] or scales[i] == 0:
            continue
        st = cache.get(scales[i])
        if st is None:
            st = cache[scales[i]] = MacroStepper(op, dt, scheme, scales[i])
        vals[i], _ = apply_guard(st.solve(vals[i]), guard)
    return SystemState(vals, state.t)


def simulate_hybrid(model: ReactionModel, op: DiffusionOperator, x0: SystemState, t_end: float,
                    cfg: HybridConfig, seed: int = 0, trajectory: int = 0, record: bool = False) -> HybridResult:
    return HybridSolver(model, op, cfg.scheme).run(x0, t_end, cfg, seed, trajectory, record)


def macro_integrate(op: DiffusionOperator, x0, t_end: float, dt: float, scheme: str = "trap",
                    diffscale: float = 1.0) -> np.ndarray:
    """Unsplit macroscopic integration of ``x' = Q x`` with full steps ``dt``.

    A full step of ``dt`` is a :class:`MacroStepper` half step of a
    splitting step ``2 dt``.  A shorter final step reaches ``t_end``.
    """
    n = int(math.floor(t_end / dt + 1e-9))
    x = np.asarray(x0, dtype=float).copy()
    if n:
        st = MacroStepper(op, 2.0 * dt, scheme, diffscale)
        for _ in range(n):
            x = st.solve(x)
    rest = t_end - n * dt
    if rest > 1e-12 * max(1.0, t_end):
        x = MacroStepper(op, 2.0 * rest, scheme, diffscale).solve(x)
    return x
