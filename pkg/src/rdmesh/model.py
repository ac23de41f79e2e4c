"""Reaction models: species, reactions, propensities and the model file format.

Stoichiometry follows the convention where firing reaction ``r`` in cell
``j`` maps ``x[:, j]`` to ``x[:, j] - n_r``: consumed species carry
positive entries and produced species negative ones.

Model file (one statement per line, ``#`` comments)::

    gamma = 1e-3
    const k1 = 150
    let a = A / vol
    species A
    species B deterministic diffscale=0.5
    reaction R1: A + B -> C : massaction(k1, A, B)
    0 -> A : heaviside(0.2 - rho) * k1 / (1 + a)
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex
from .expr import ExprError


class ModelError(ValueError):
    """Invalid model text or definition."""


class InfeasibleReaction(RuntimeError):
    """A reaction update would make a copy number negative."""


class Mode(str, Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class Species:
    name: str
    mode: Mode = Mode.STOCHASTIC
    diffusion_scale: float = 1.0

    def __post_init__(self):
        if not self.diffusion_scale >= 0:
            raise ModelError(f"species {self.name}: diffusion scale must be >= 0")


@dataclass(frozen=True)
class Reaction:
    name: str
    reactants: tuple  # ((species, coeff), ...)
    products: tuple
    propensity: object  # expression tree
    stoich: tuple  # n_r over the model species; fire: x <- x - n_r


@dataclass(frozen=True)
class ReactionModel:
    species: tuple
    reactions: tuple
    constants: Mapping[str, float] = field(default_factory=dict)
    lets: Mapping[str, object] = field(default_factory=dict)
    gamma: float | None = None

    @property
    def species_names(self) -> list:
        return [s.name for s in self.species]

    @property
    def index(self) -> dict:
        return {s.name: i for i, s in enumerate(self.species)}

    @property
    def scope(self) -> ex.Scope:
        return ex.Scope(self.index, dict(self.constants), dict(self.lets))

    @property
    def stoich_matrix(self) -> np.ndarray:
        """R x N array of ``n_r``."""
        return np.array([r.stoich for r in self.reactions], dtype=float).reshape(len(self.reactions), len(self.species))

    def deterministic_mask(self) -> np.ndarray:
        return np.array([s.mode is Mode.DETERMINISTIC for s in self.species])

    def diffusion_scales(self) -> np.ndarray:
        return np.array([s.diffusion_scale for s in self.species], dtype=float)

    def with_modes(self, modes: Mapping[str, Mode]) -> "ReactionModel":
        """Copy with some species switched between stochastic and deterministic."""
        sp = tuple(
            Species(s.name, Mode(modes.get(s.name, s.mode)), s.diffusion_scale) for s in self.species
        )
        return ReactionModel(sp, self.reactions, self.constants, self.lets, self.gamma)

    def compile(self, vol: Sequence[float], coords=None) -> list:
        """Propensity callables ``f(x, k)`` for every reaction on the given cells."""
        vol = [float(v) for v in vol]
        K = len(vol)
        if coords is None:
            cx = cy = [0.0] * K
        else:
            c = np.asarray(coords, dtype=float)
            c = c.reshape(K, -1)
            cx = c[:, 0].tolist()
            cy = c[:, 1].tolist() if c.shape[1] > 1 else [0.0] * K
        rho = [float(np.hypot(a, b)) for a, b in zip(cx, cy)]
        scope = self.scope
        return [ex.compile_propensity(r.propensity, scope, vol, cx, cy, rho) for r in self.reactions]

    def dependencies(self) -> list:
        """For each species index, the reactions whose propensity reads it."""
        scope = self.scope
        idx = self.index
        deps = [[] for _ in self.species]
        for ri, r in enumerate(self.reactions):
            for name in ex.species_used(r.propensity, scope):
                deps[idx[name]].append(ri)
        return deps

    def to_text(self) -> str:
        lines = []
        if self.gamma is not None:
            lines.append(f"gamma = {self.gamma!r}")
        for k, v in self.constants.items():
            lines.append(f"const {k} = {float(v)!r}")
        for s in self.species:
            parts = ["species", s.name]
            if s.mode is Mode.DETERMINISTIC:
                parts.append("deterministic")
            if s.diffusion_scale != 1.0:
                parts.append(f"diffscale={s.diffusion_scale!r}")
            lines.append(" ".join(parts))
        for k, v in self.lets.items():
            lines.append(f"let {k} = {ex.to_text(v)}")
        for r in self.reactions:
            lines.append(
                f"reaction {r.name}: {_side_text(r.reactants)} -> {_side_text(r.products)} : {ex.to_text(r.propensity)}"
            )
        return "\n".join(lines) + "\n"


def _side_text(side) -> str:
    if not side:
        return "0"
    return " + ".join(name if c == 1 else f"{c} {name}" for name, c in side)


_TERM = re.compile(r"^(?:(\d+)\s*\*?\s*)?([A-Za-z_][A-Za-z_0-9]*)$")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z_0-9]*$")
_RESERVED = set(ex.GEOMETRY_NAMES) | set(ex.FUNCTIONS) | {"species", "const", "let", "reaction", "gamma"}


def _parse_side(text: str, lineno: int) -> tuple:
    text = text.strip()
    if text in ("", "0", "∅"):
        return ()
    out: dict = {}
    for term in text.split("+"):
        m = _TERM.match(term.strip())
        if not m:
            raise ModelError(f"line {lineno}: bad reaction term {term.strip()!r}")
        coeff = int(m.group(1) or 1)
        if coeff < 1:
            raise ModelError(f"line {lineno}: coefficient must be positive")
        out[m.group(2)] = out.get(m.group(2), 0) + coeff
    return tuple(out.items())


def parse_model(text: str, constants: Mapping[str, float] | None = None) -> ReactionModel:
    """Parse and validate a model description.

    ``constants`` are bound before the file is read (e.g. a mesh-derived
    scale); the file may not redefine them.
    """
    consts: dict = {k: float(v) for k, v in (constants or {}).items()}
    lets: dict = {}
    species: list = []
    raw_reactions: list = []
    gamma = None

    def check_new(name, lineno):
        if not _NAME.match(name):
            raise ModelError(f"line {lineno}: invalid name {name!r}")
        if name in _RESERVED:
            raise ModelError(f"line {lineno}: {name!r} is reserved")
        if name in consts or name in lets or any(s.name == name for s in species):
            raise ModelError(f"line {lineno}: {name!r} already defined")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.split(None, 1)[0]
        try:
            if head == "species":
                toks = line.split()[1:]
                if not toks:
                    raise ModelError(f"line {lineno}: species needs a name")
                name = toks[0]
                check_new(name, lineno)
                mode, scale = Mode.STOCHASTIC, 1.0
                for t in toks[1:]:
                    if t == "deterministic":
                        mode = Mode.DETERMINISTIC
                    elif t == "stochastic":
                        mode = Mode.STOCHASTIC
                    elif t.startswith("diffscale="):
                        scale = float(t.split("=", 1)[1])
                    else:
                        raise ModelError(f"line {lineno}: unknown species option {t!r}")
                species.append(Species(name, mode, scale))
            elif head in ("const", "let"):
                m = re.match(rf"^{head}\s+(\S+)\s*=\s*(.+)$", line)
                if not m:
                    raise ModelError(f"line {lineno}: expected '{head} NAME = ...'")
                name = m.group(1)
                check_new(name, lineno)
                node = ex.parse_expr(m.group(2))
                scope = ex.Scope({s.name: i for i, s in enumerate(species)}, consts, lets)
                if head == "const":
                    v = ex.const_value(node, scope)
                    if v is None:
                        raise ModelError(f"line {lineno}: constant {name} depends on the state")
                    consts[name] = float(v)
                else:
                    ex.species_used(node, scope)  # resolves every identifier
                    lets[name] = node
            elif re.match(r"^gamma\s*=", line):
                gamma = float(line.split("=", 1)[1])
                if not gamma > 0:
                    raise ModelError(f"line {lineno}: gamma must be positive")
            else:
                m = re.match(r"^reaction\s+([A-Za-z_][A-Za-z_0-9]*)\s*:\s*(.*)$", line)
                name, body = (m.group(1), m.group(2)) if m else (None, line)
                if "->" not in body:
                    raise ModelError(f"line {lineno}: unrecognised statement")
                lhs, rest = body.split("->", 1)
                if ":" not in rest:
                    raise ModelError(f"line {lineno}: reaction needs ': propensity'")
                rhs, prop = rest.split(":", 1)
                raw_reactions.append((lineno, name, lhs, rhs, prop.strip()))
        except ExprError as e:
            raise ModelError(f"line {lineno}: {e}") from None
        except ValueError as e:
            if isinstance(e, ModelError):
                raise
            raise ModelError(f"line {lineno}: {e}") from None

    if not species:
        raise ModelError("model declares no species")
    index = {s.name: i for i, s in enumerate(species)}
    scope = ex.Scope(index, consts, lets)
    reactions = []
    names = set()
    for n, (lineno, name, lhs, rhs, prop) in enumerate(raw_reactions):
        name = name or f"R{n + 1}"
        if name in names:
            raise ModelError(f"line {lineno}: duplicate reaction name {name}")
        names.add(name)
        reac = _parse_side(lhs, lineno)
        prod = _parse_side(rhs, lineno)
        stoich = [0] * len(species)
        for sname, c in reac:
            if sname not in index:
                raise ModelError(f"line {lineno}: unknown species {sname!r}")
            stoich[index[sname]] += c
        for sname, c in prod:
            if sname not in index:
                raise ModelError(f"line {lineno}: unknown species {sname!r}")
            stoich[index[sname]] -= c
        if not any(stoich):
            raise ModelError(f"line {lineno}: reaction {name} changes nothing")
        try:
            node = ex.parse_expr(prop)
            ex.check_propensity(node, scope)
        except ExprError as e:
            raise ModelError(f"line {lineno}: {e}") from None
        reactions.append(Reaction(name, reac, prod, node, tuple(stoich)))
    return ReactionModel(tuple(species), tuple(reactions), consts, lets, gamma)


def load_model(path, constants=None) -> ReactionModel:
    with open(path) as fh:
        return parse_model(fh.read(), constants)


def propensity_eval(model: ReactionModel, reaction: int | str, cell_state, vol: float, centroid=(0.0, 0.0)) -> float:
    """Propensity of one reaction in a single cell."""
    if not vol > 0:
        raise ValueError("vol must be positive")
    ri = reaction if isinstance(reaction, int) else [r.name for r in model.reactions].index(reaction)
    c = list(centroid) + [0.0] * (2 - len(centroid))
    scope = model.scope
    fn = ex.compile_propensity(
        model.reactions[ri].propensity, scope, [float(vol)], [c[0]], [c[1]], [float(np.hypot(c[0], c[1]))]
    )
    x = [[float(v)] for v in cell_state]
    return float(fn(x, 0))


@dataclass
class SystemState:
    """Copy numbers ``values[i, j]`` of species ``i`` in cell ``j`` at time ``t``."""

    values: np.ndarray
    t: float = 0.0

    def copy(self) -> "SystemState":
        return SystemState(self.values.copy(), self.t)

    def totals(self) -> np.ndarray:
        return self.values.sum(axis=1)


def make_state(model: ReactionModel, values, t: float = 0.0) -> SystemState:
    """Validated state: integer counts for stochastic species, reals otherwise."""
    v = np.array(values, dtype=float)
    if v.shape[0] != len(model.species) or v.ndim != 2:
        raise ModelError(f"state must be {len(model.species)} x K")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ModelError("copy numbers must be finite and non-negative")
    det = model.deterministic_mask()
    stoch = v[~det]
    if np.any(stoch != np.round(stoch)):
        raise ModelError("stochastic species need integer copy numbers")
    return SystemState(v, t)


def apply_reaction(state: SystemState, model: ReactionModel, reaction: int, cell: int) -> SystemState:
    """Fire ``reaction`` once in ``cell``: ``x[:, cell] -= n_r``."""
    n = np.array(model.reactions[reaction].stoich, dtype=float)
    new = state.values[:, cell] - n
    if np.any(new < 0):
        raise InfeasibleReaction(
            f"reaction {model.reactions[reaction].name} infeasible in cell {cell}: {state.values[:, cell]}"
        )
    out = state.copy()
    out.values[:, cell] = new
    return out
