"""Command line interface: ``rdmesh <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time as _time
from pathlib import Path

import numpy as np

from . import harness as H
from .fem import Dirichlet, operator_from_mesh, sign_report
from .hybrid import GUARDS, SCHEMES, HybridConfig, HybridSolver
from .mesh import build_1d_mesh, build_disk, build_structured_unit_square, load_mesh, quality_report
from .model import load_model, make_state
from .moments import covariance_evolve
from .ssa import NSMEngine, write_event_log


def resolve_mesh(spec: str):
    """A mesh file path or a generator spec.

    Generator specs: ``square:N[:ox,oy]``, ``disk:RADIUS:RINGS`` and
    ``line:x0,x1,...``.
    """
    if Path(spec).exists():
        return load_mesh(spec)
    kind, _, rest = spec.partition(":")
    parts = rest.split(":") if rest else []
    if kind == "square" and parts:
        off = tuple(float(v) for v in parts[1].split(",")) if len(parts) > 1 else (0.0, 0.0)
        return build_structured_unit_square(int(parts[0]), origin_offset=off)
    if kind == "disk" and len(parts) == 2:
        return build_disk(float(parts[0]), int(parts[1]))
    if kind == "line" and parts:
        return build_1d_mesh([float(v) for v in parts[0].split(",")])
    raise SystemExit(f"cannot interpret mesh {spec!r}: not a file or generator spec")


def _operator(args, mesh, gamma):
    bc = Dirichlet(mesh.boundary_vertices) if getattr(args, "dirichlet", False) else None
    return operator_from_mesh(mesh, gamma, bc=bc, policy=getattr(args, "policy", "keep"))


def _initial_state(args, model, op, trajectory: int):
    """``--init FILE`` (N x K whitespace table) or ``--place NAME=COUNT`` entries."""
    K = op.num_cells
    if args.init:
        vals = np.loadtxt(args.init, ndmin=2)
        return make_state(model, vals.reshape(len(model.species), K))
    vals = np.zeros((len(model.species), K))
    rng = H.placement_rng(args.seed, trajectory)
    for item in args.place or []:
        name, _, count = item.partition("=")
        if name not in model.index:
            raise SystemExit(f"unknown species {name!r} in --place")
        vals[model.index[name]] = H.place_molecules(op.A, int(count), rng, args.placement)
    return make_state(model, vals)


def _load_model(args):
    consts = {}
    for item in args.const or []:
        name, _, value = item.partition("=")
        try:
            consts[name.strip()] = float(value)
        except ValueError:
            raise SystemExit(f"bad --const {item!r}: expected NAME=NUMBER") from None
    return load_model(args.model, consts or None)


def _parse_times(text):
    return tuple(float(v) for v in text.split(",") if v.strip()) if text else ()


def _write_means(out: Path, model, acc, prefix: str):
    mean, se = acc.mean, acc.stderr
    rows = [
        dict(species=s.name, cell=j, mean=mean[i, j], stderr=se[i, j])
        for i, s in enumerate(model.species) for j in range(mean.shape[1])
    ]
    H.write_csv(out / f"{prefix}_means.csv", rows)


def cmd_assemble(args):
    mesh = resolve_mesh(args.mesh)
    op = _operator(args, mesh, args.gamma)
    files = op.export_triplets(args.out)
    rep = sign_report(op)
    print(f"K={op.num_cells} nnz(S)={op.S.nnz} negative couplings={len(rep.negative)}")
    for f in files:
        print(f)


def cmd_quality(args):
    mesh = resolve_mesh(args.mesh)
    rep = quality_report(mesh)
    print(f"vertices={mesh.num_vertices} elements={mesh.num_elements}")
    print(f"h_min={rep.h_min:.6g} h_max={rep.h_max:.6g}")
    print(f"min_angle={np.degrees(rep.min_angle):.3f} deg max_angle={np.degrees(rep.max_angle):.3f} deg")
    print(f"violating edges: {len(rep.violations)}")
    for e in rep.violations:
        print(f"  {e[0]} {e[1]}")


def _ensemble(args, model, op, runner, prefix):
    out = Path(args.out) if args.out else None
    t0 = _time.perf_counter()
    acc = H.Accumulator()
    for k in range(args.ensemble):
        acc.add(runner(k))
    wall = _time.perf_counter() - t0
    summary = dict(command=prefix, mesh=args.mesh, model=args.model, seed=args.seed, ensemble=args.ensemble,
                   t_end=args.t_end, wall_time=wall, totals_mean=acc.mean.sum(axis=1).tolist())
    if out:
        _write_means(out, model, acc, prefix)
        H.write_json(out / f"{prefix}.json", summary)
    print(json.dumps(summary, indent=2))


def cmd_simulate(args):
    mesh = resolve_mesh(args.mesh)
    model = _load_model(args)
    op = _operator(args, mesh, args.gamma or model.gamma or 1.0)
    engine = NSMEngine(model, op)

    def run(k):
        s = engine.start(_initial_state(args, model, op, k), args.seed, k, record=bool(args.events and k == 0))
        s.simulate_until(args.t_end)
        if s.events is not None:
            write_event_log(s.events, args.events)
        return s.counts()

    _ensemble(args, model, op, run, "simulate")


def cmd_hybrid(args):
    mesh = resolve_mesh(args.mesh)
    model = _load_model(args)
    op = _operator(args, mesh, args.gamma or model.gamma or 1.0)
    cfg = HybridConfig(dt=args.dt, scheme=args.scheme, guard=args.guard, snapshots=_parse_times(args.snapshots))
    solver = HybridSolver(model, op, cfg.scheme)
    out = Path(args.out) if args.out else None
    snaps: dict = {}

    def run(k):
        r = solver.run(_initial_state(args, model, op, k), args.t_end, cfg, args.seed, k)
        for t, st in r.snapshots.items():
            snaps.setdefault(t, H.Accumulator()).add(st.values)
        return r.state.values

    _ensemble(args, model, op, run, "hybrid")
    if out:
        for t, acc in sorted(snaps.items()):
            _write_means(out, model, acc, f"hybrid_t{t:g}")


def cmd_moments(args):
    mesh = resolve_mesh(args.mesh)
    op = operator_from_mesh(mesh, args.gamma)
    K = op.num_cells
    if args.init:
        x0 = np.loadtxt(args.init).ravel()
    else:
        x0 = np.zeros(K)
        x0[args.cell] = args.count
    rows_x, rows_c = [], []
    for t in _parse_times(args.times) or (1.0,):
        ms = covariance_evolve(op, x0, np.zeros((K, K)), t)
        rows_x += [dict(t=t, cell=j, xbar=ms.xbar[j]) for j in range(K)]
        rows_c += [dict(t=t, j=j, k=k, C=ms.C[j, k]) for j in range(K) for k in range(K)]
    out = Path(args.out or ".")
    H.write_csv(out / "moments_mean.csv", rows_x)
    H.write_csv(out / "moments_cov.csv", rows_c)
    print(f"wrote {out / 'moments_mean.csv'} and {out / 'moments_cov.csv'}")


def cmd_experiment(args):
    params = json.loads(args.params) if args.params else {}
    cfg = H.ExperimentConfig(experiment=args.id, gamma=args.gamma, ensemble=args.ensemble,
                             t_end=args.t_end if args.t_end is not None else _default_t_end(args.id),
                             dts=_parse_times(args.dts), seed=args.seed, out=args.out, params=params)
    summary = H.run_experiment(cfg)
    print(json.dumps(summary["tables"], indent=2, default=H._jsonable))


def _default_t_end(exp_id: str) -> float:
    return {"convergence": 1.0, "table1": 1.0, "bistable": 2.0, "hybrid": 10.0}.get(exp_id, 1.0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdmesh", description="Stochastic reaction-diffusion on unstructured meshes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--mesh", required=True, help="mesh file or generator spec (square:N, disk:R:RINGS, line:x,...)")
        if model:
            sp.add_argument("--model", required=True)
            sp.add_argument("--const", action="append", metavar="NAME=VALUE", help="bind a constant the model leaves free")
        sp.add_argument("--gamma", type=float, default=None)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--ensemble", type=int, default=1, metavar="M")
        sp.add_argument("--out", default=None, metavar="DIR")

    a = sub.add_parser("assemble", help="export S, A, D, Q triplets")
    a.add_argument("mesh")
    a.add_argument("--gamma", type=float, default=1.0)
    a.add_argument("--dirichlet", action="store_true", help="fix the boundary cells")
    a.add_argument("--policy", choices=("keep", "clamp"), default="keep")
    a.add_argument("--out", default="operator")
    a.set_defaults(func=cmd_assemble)

    q = sub.add_parser("quality", help="mesh angle report")
    q.add_argument("mesh")
    q.set_defaults(func=cmd_quality)

    runs = (("simulate", cmd_simulate, "stochastic ensemble with the NSM sampler"),
            ("hybrid", cmd_hybrid, "split stochastic/deterministic ensemble"))
    for name, func, text in runs:
        s = sub.add_parser(name, help=text)
        common(s)
        s.add_argument("--t-end", type=float, required=True)
        s.add_argument("--init", default=None, help="N x K table of initial values")
        s.add_argument("--place", action="append", help="NAME=COUNT placed proportionally to cell areas")
        s.add_argument("--placement", choices=("multinomial", "round"), default="multinomial")
        s.add_argument("--dirichlet", action="store_true")
        s.add_argument("--policy", choices=("keep", "clamp"), default="keep")
        s.set_defaults(func=func)
        if name == "simulate":
            s.add_argument("--events", default=None, help="CSV event log of trajectory 0")
        else:
            s.add_argument("--dt", type=float, required=True)
            s.add_argument("--scheme", choices=SCHEMES, default="trap")
            s.add_argument("--guard", choices=GUARDS, default="check")
            s.add_argument("--snapshots", default="", help="comma separated times")

    m = sub.add_parser("moments", help="mean and covariance of pure diffusion")
    m.add_argument("--mesh", required=True)
    m.add_argument("--gamma", type=float, default=1.0)
    m.add_argument("--init", default=None, help="K initial mean copy numbers")
    m.add_argument("--cell", type=int, default=0)
    m.add_argument("--count", type=float, default=100.0)
    m.add_argument("--times", default="1")
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_moments)

    e = sub.add_parser("experiment", help="run a validation study")
    e.add_argument("id", choices=H.EXPERIMENTS)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ensemble", type=int, default=200, metavar="M")
    e.add_argument("--gamma", type=float, default=None)
    e.add_argument("--t-end", type=float, default=None)
    e.add_argument("--dts", default="")
    e.add_argument("--params", default=None, help="JSON keyword arguments for the driver")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
