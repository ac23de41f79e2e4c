"""Exact RDME sampling with the next subvolume method.

Each cell keeps an aggregated rate (reactions + outgoing diffusion) and
one pending event time in an indexed binary min-heap.  When a cell's
rate changes its pending time is redrawn from a fresh exponential,
which is exact by memorylessness (no Gibson-Bruck time rescaling).

Dirichlet cells hold reservoir copy numbers: molecules jumping out of a
reservoir are emitted without decrementing it, molecules jumping into
it are absorbed, and no reactions happen there.
"""
from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .fem import DiffusionOperator
from .model import InfeasibleReaction, ReactionModel, SystemState

INF = math.inf
REBUILD_EVERY = 1_000_000


class Event(NamedTuple):
    t: float
    kind: str  # "R" reaction, "D" diffusion
    cell: int
    index: int  # reaction index or species index
    target: int  # destination cell for diffusion, -1 for reactions


class IndexedMinHeap:
    """Binary min-heap of keys ``0..n-1`` ordered by ``(time[key], key)``.

    ``pos[key]`` tracks the heap slot so that a key's time can be raised
    or lowered in ``O(log n)``.
    """

    __slots__ = ("time", "heap", "pos")

    def __init__(self, times):
        self.time = [float(t) for t in times]
        n = len(self.time)
        self.heap = sorted(range(n), key=lambda k: (self.time[k], k))
        self.pos = [0] * n
        for i, k in enumerate(self.heap):
            self.pos[k] = i

    def __len__(self):
        return len(self.heap)

    def top(self):
        k = self.heap[0]
        return self.time[k], k

    def update(self, key: int, t: float) -> None:
        time, heap, pos = self.time, self.heap, self.pos
        old = time[key]
        time[key] = t
        i = pos[key]
        if t < old or (t == old):
            # sift up
            while i > 0:
                p = (i - 1) >> 1
                pk = heap[p]
                pt = time[pk]
                if pt < t or (pt == t and pk < key):
                    break
                heap[i] = pk
                pos[pk] = i
                i = p
        else:
            n = len(heap)
            while True:
                c = 2 * i + 1
                if c >= n:
                    break
                ck = heap[c]
                ct = time[ck]
                if c + 1 < n:
                    dk = heap[c + 1]
                    dt = time[dk]
                    if dt < ct or (dt == ct and dk < ck):
                        c, ck, ct = c + 1, dk, dt
                if t < ct or (t == ct and key < ck):
                    break
                heap[i] = ck
                pos[ck] = i
                i = c
        heap[i] = key
        pos[key] = i

    def check(self) -> bool:
        """Heap property and position map consistency."""
        h, t = self.heap, self.time
        for i in range(1, len(h)):
            p = (i - 1) >> 1
            if (t[h[p]], h[p]) > (t[h[i]], h[i]):
                return False
        return all(self.pos[k] == i for i, k in enumerate(h)) and sorted(h) == list(range(len(h)))


def substream(seed: int, trajectory: int) -> np.random.Generator:
    """Independent generator for one trajectory of an ensemble."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trajectory,)))


class NSMEngine:
    """Static, shareable part of the sampler: compiled propensities and jump tables.

    ``meso_species`` selects which species diffuse by jumps; by default
    all do.  Negative couplings in ``Q`` (meshes violating the angle
    condition, ``keep`` policy) are sampled as rate 0 and counted in
    ``dropped_couplings``.
    """

    def __init__(self, model: ReactionModel, op: DiffusionOperator, meso_species=None):
        K = op.num_cells
        N = len(model.species)
        self.model, self.op = model, op
        self.K, self.N, self.R = K, N, len(model.reactions)
        coords = op.coords if op.coords is not None else np.zeros((K, 2))
        self.props = model.compile(op.A, coords)
        if meso_species is None:
            meso = np.ones(N, dtype=bool)
        else:
            meso = np.asarray(meso_species, dtype=bool)
        scales = model.diffusion_scales() * meso
        self.dscale = [float(s) for s in scales]
        self.diff_species = [i for i in range(N) if self.dscale[i] > 0]
        self.fixed = frozenset(op.fixed_cells)
        is_fixed = [k in self.fixed for k in range(K)]
        self.is_fixed = is_fixed

        Q = op.Q.tocsc()
        nbrs, outs = [], []
        dropped = 0
        for k in range(K):
            lo, hi = Q.indptr[k], Q.indptr[k + 1]
            row = []
            for j, q in zip(Q.indices[lo:hi].tolist(), Q.data[lo:hi].tolist()):
                if j == k:
                    continue
                if q < 0:
                    dropped += 1
                    continue
                if q == 0 or (is_fixed[k] and is_fixed[j]):
                    continue
                row.append((j, q))
            nbrs.append(row)
            outs.append(math.fsum(q for _, q in row))
        self.nbrs, self.out = nbrs, outs
        self.dropped_couplings = dropped

        stoich = model.stoich_matrix
        self.changes = [
            [(i, int(stoich[r, i]) if float(stoich[r, i]).is_integer() else float(stoich[r, i]))
             for i in range(N) if stoich[r, i] != 0]
            for r in range(self.R)
        ]
        self.consumed = [[(i, c) for i, c in ch if c > 0] for ch in self.changes]
        deps = model.dependencies()
        self.deps = deps
        self.react_deps = []
        for r in range(self.R):
            touched = set()
            for i, _ in self.changes[r]:
                touched.update(deps[i])
            self.react_deps.append(sorted(touched))
        self.det_mask = model.deterministic_mask()

    def start(self, x0: SystemState, seed: int = 0, trajectory: int = 0, record: bool = False) -> "NSMSampler":
        return NSMSampler(self, x0, seed, trajectory, record)


@dataclass
class RunStats:
    reaction_events: int = 0
    diffusion_events: int = 0
    wall_time: float = 0.0

    @property
    def events(self) -> int:
        return self.reaction_events + self.diffusion_events


class NSMSampler:
    """Mutable state of one trajectory."""

    def __init__(self, engine: NSMEngine, x0: SystemState, seed: int = 0, trajectory: int = 0, record: bool = False):
        eng = engine
        vals = np.asarray(x0.values)
        if vals.shape != (eng.N, eng.K):
            raise ValueError(f"state shape {vals.shape} does not match model/mesh ({eng.N}, {eng.K})")
        if np.any(vals < 0):
            raise ValueError("initial state has negative copy numbers")
        self.engine = eng
        self.t = float(x0.t)
        det = eng.det_mask
        self.x = [
            (vals[i].astype(float).tolist() if det[i] else [int(v) for v in np.rint(vals[i])])
            for i in range(eng.N)
        ]
        if np.any(~det) and not np.array_equal(np.rint(vals[~det]), vals[~det]):
            raise ValueError("stochastic species need integer copy numbers")
        self.rng = substream(seed, trajectory)
        self._buf: list = []
        self._bi = 0
        self._chunk = 64
        self.events: list | None = [] if record else None
        self.stats = RunStats()
        self._updates = 0
        self.prop = [[0.0] * eng.R for _ in range(eng.K)]
        self.rtot = [0.0] * eng.K
        self.dtot = [0.0] * eng.K
        for k in range(eng.K):
            self._cell_rates(k)
        times = [INF] * eng.K
        for k in range(eng.K):
            lam = self.rtot[k] + self.dtot[k]
            if lam > 0:
                times[k] = self.t + self._exp() / lam
        self.heap = IndexedMinHeap(times)

    # -- random numbers -------------------------------------------------
    def _uniform(self) -> float:
        """Uniform on the open interval (0, 1)."""
        while True:
            if self._bi >= len(self._buf):
                self._buf = self.rng.random(self._chunk).tolist()
                self._bi = 0
                if self._chunk < 8192:
                    self._chunk *= 2
            u = self._buf[self._bi]
            self._bi += 1
            if u > 0.0:
                return u

    def _exp(self) -> float:
        return -math.log(self._uniform())

    # -- rates ------------------------------------------------------------
    def _cell_rates(self, k: int) -> None:
        eng = self.engine
        x = self.x
        if eng.is_fixed[k]:
            self.rtot[k] = 0.0
        else:
            p = self.prop[k]
            for r in range(eng.R):
                p[r] = self._propensity(r, k)
            self.rtot[k] = math.fsum(p)
        w = 0.0
        for i in eng.diff_species:
            w += eng.dscale[i] * x[i][k]
        self.dtot[k] = w * eng.out[k]

    def _propensity(self, r: int, k: int) -> float:
        x = self.x
        for i, c in self.engine.consumed[r]:
            if x[i][k] < c:
                return 0.0
        v = self.engine.props[r](x, k)
        if not v >= 0.0 or v == INF:
            raise FloatingPointError(f"reaction {r} has invalid propensity {v} in cell {k}")
        return v

    def _refresh_reactions(self, k: int, reactions) -> None:
        if self.engine.is_fixed[k]:
            return
        p = self.prop[k]
        for r in reactions:
            p[r] = self._propensity(r, k)
        self.rtot[k] = math.fsum(p)

    def _refresh_diffusion(self, k: int) -> None:
        eng = self.engine
        x = self.x
        w = 0.0
        for i in eng.diff_species:
            w += eng.dscale[i] * x[i][k]
        self.dtot[k] = w * eng.out[k]

    def rebuild(self) -> None:
        """Recompute every cached rate from scratch."""
        for k in range(self.engine.K):
            self._cell_rates(k)
        self._updates = 0

    def rate(self, k: int) -> float:
        return self.rtot[k] + self.dtot[k]

    def refresh_cells(self, cells) -> None:
        """Recompute rates after the state changed externally.

        Cells whose total rate changed get a fresh exponential time from
        the current clock; the others keep their pending time.
        """
        heap = self.heap
        for k in cells:
            old = self.rtot[k] + self.dtot[k]
            self._cell_rates(k)
            lam = self.rtot[k] + self.dtot[k]
            if lam != old:
                heap.update(k, self.t + self._exp() / lam if lam > 0 else INF)

    # -- stepping -------------------------------------------------------
    def next_time(self) -> float:
        return self.heap.top()[0]

    def step(self) -> Event:
        """Execute the next event and return it."""
        t, k = self.heap.top()
        if t == INF:
            raise RuntimeError("no further events: all cell rates are zero")
        return self._fire(t, k)

    def _fire(self, t: float, k: int) -> Event:
        eng = self.engine
        x = self.x
        heap = self.heap
        self.t = t
        rt = self.rtot[k]
        lam = rt + self.dtot[k]
        target = self._uniform() * lam
        if target < rt:
            p = self.prop[k]
            r = eng.R - 1
            acc = 0.0
            for ri in range(eng.R):
                acc += p[ri]
                if target < acc:
                    r = ri
                    break
            while p[r] == 0.0:  # rounding pushed past the last positive entry
                r -= 1
            for i, c in eng.consumed[r]:
                if x[i][k] < c:
                    raise InfeasibleReaction(f"reaction {eng.model.reactions[r].name} infeasible in cell {k}")
            for i, c in eng.changes[r]:
                x[i][k] -= c
            self._refresh_reactions(k, eng.react_deps[r])
            self._refresh_diffusion(k)
            lam = self.rtot[k] + self.dtot[k]
            heap.update(k, t - math.log(self._uniform()) / lam if lam > 0 else INF)
            self.stats.reaction_events += 1
            ev = Event(t, "R", k, r, -1)
        else:
            target -= rt
            out = eng.out[k]
            i = eng.diff_species[-1]
            for si in eng.diff_species:
                w = eng.dscale[si] * x[si][k] * out
                if target < w:
                    i = si
                    break
                target -= w
            while x[i][k] <= 0:
                i = eng.diff_species[eng.diff_species.index(i) - 1]
            row = eng.nbrs[k]
            target /= eng.dscale[i] * x[i][k]
            j = row[-1][0]
            for jj, q in row:
                if target < q:
                    j = jj
                    break
                target -= q
            fixed = eng.is_fixed
            if not fixed[k]:
                x[i][k] -= 1
                self._refresh_reactions(k, eng.deps[i])
                self._refresh_diffusion(k)
            lam = self.rtot[k] + self.dtot[k]
            heap.update(k, t - math.log(self._uniform()) / lam if lam > 0 else INF)
            if not fixed[j]:
                old = self.rtot[j] + self.dtot[j]
                x[i][j] += 1
                self._refresh_reactions(j, eng.deps[i])
                self._refresh_diffusion(j)
                lam = self.rtot[j] + self.dtot[j]
                if lam != old:
                    heap.update(j, t - math.log(self._uniform()) / lam if lam > 0 else INF)
            self.stats.diffusion_events += 1
            ev = Event(t, "D", k, i, j)
        if self.events is not None:
            self.events.append(ev)
        self._updates += 1
        if self._updates >= REBUILD_EVERY:
            self.rebuild()
        return ev

    def simulate_until(self, t_end: float) -> SystemState:
        """Fire every event with time ``< t_end`` and set the clock to ``t_end``."""
        if t_end < self.t:
            raise ValueError("t_end is before the current time")
        start = _time.perf_counter()
        heap = self.heap
        while True:
            t, k = heap.top()
            if t >= t_end:
                break
            self._fire(t, k)
        self.t = float(t_end)
        self.stats.wall_time += _time.perf_counter() - start
        return self.state()

    def state(self) -> SystemState:
        return SystemState(np.array(self.x, dtype=float), self.t)

    def counts(self) -> np.ndarray:
        return np.array(self.x, dtype=float)


def init(model: ReactionModel, op: DiffusionOperator, x0: SystemState, seed: int = 0, trajectory: int = 0,
         record: bool = False) -> NSMSampler:
    return NSMEngine(model, op).start(x0, seed, trajectory, record)


def simulate(model: ReactionModel, op: DiffusionOperator, x0: SystemState, t_end: float, seed: int = 0,
             trajectory: int = 0, record: bool = False) -> NSMSampler:
    s = init(model, op, x0, seed, trajectory, record)
    s.simulate_until(t_end)
    return s


def write_event_log(events, path) -> None:
    """CSV ``t,kind,cell,species_or_reaction,target_cell``."""
    with open(path, "w") as fh:
        fh.write("t,kind,cell,species_or_reaction,target_cell\n")
        for e in events:
            fh.write(f"{e.t!r},{e.kind},{e.cell},{e.index},{e.target}\n")
