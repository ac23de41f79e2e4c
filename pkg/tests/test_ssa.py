import csv
import math

import numpy as np
import pytest
from conftest import obtuse_pair
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rdmesh.fem import Dirichlet, operator_from_mesh
from rdmesh.harness import first_exit_samples
from rdmesh.mesh import build_1d_mesh, build_structured_unit_square
from rdmesh.model import make_state, parse_model
from rdmesh.moments import mean_evolve
from rdmesh.ssa import INF, IndexedMinHeap, NSMEngine, init, simulate, substream, write_event_log

DIFFUSION = parse_model("species X")


def line_op(xs, gamma=1.0, bc=None):
    return operator_from_mesh(build_1d_mesh(xs), gamma, bc=bc)


def single(K, cell, n=1):
    v = np.zeros((1, K))
    v[0, cell] = n
    return make_state(DIFFUSION, v)


def test_heap_orders_by_time_then_key():
    h = IndexedMinHeap([3.0, 1.0, INF, 1.0])
    assert h.top() == (1.0, 1)
    h.update(1, 5.0)
    assert h.top() == (1.0, 3)
    h.update(2, 0.5)
    assert h.top() == (0.5, 2)
    assert h.check()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30),
       st.lists(st.tuples(st.integers(0, 29), st.floats(0, 100)), max_size=60))
def test_heap_property_under_updates(times, updates):
    h = IndexedMinHeap(times)
    ref = list(times)
    for key, t in updates:
        key %= len(ref)
        h.update(key, t)
        ref[key] = t
        assert h.check()
        assert h.top() == min((v, k) for k, v in enumerate(ref))


def test_single_molecule_rate_at_uniform_interior_node():
    s = init(DIFFUSION, line_op([0, 0.5, 1.0]), single(3, 1))
    assert s.rate(1) == pytest.approx(2 / 0.5**2)
    assert s.rate(0) == 0.0 and s.heap.time[0] == INF


def test_empty_state_has_no_events():
    s = init(DIFFUSION, line_op([0, 0.5, 1.0]), single(3, 1, 0))
    assert s.next_time() == INF
    with pytest.raises(RuntimeError):
        s.step()
    s.simulate_until(10.0)
    assert s.t == 10.0 and s.stats.events == 0


def test_dirichlet_reservoir_emits_without_decrement():
    op = line_op([0.0, 1.0], bc=Dirichlet([0]))
    s = init(DIFFUSION, op, make_state(DIFFUSION, [[5, 0]]))
    q = op.Q[1, 0]
    assert s.rate(0) == pytest.approx(q * 5)
    ev = s.step()
    assert (ev.kind, ev.cell, ev.target) == ("D", 0, 1)
    assert s.counts()[0].tolist() == [5, 1]
    # jumps into the reservoir are absorbed
    while True:
        ev = s.step()
        if ev.cell == 1:
            break
    assert s.counts()[0, 0] == 5


def test_reactions_skip_fixed_cells():
    m = parse_model("species X\nreaction make: 0 -> X : 10")
    op = operator_from_mesh(build_1d_mesh([0.0, 1.0, 2.0]), 1e-9, bc=Dirichlet([0]))
    s = NSMEngine(m, op).start(make_state(m, [[0, 0, 0]]), seed=3)
    s.simulate_until(5.0)
    assert s.counts()[0, 0] == 0
    assert s.counts()[0, 1:].sum() > 0


def test_exit_left_probability_nonuniform():
    times, left = first_exit_samples(0.1, 0.2, 1.0, 4000, seed=11)
    p = 2 / 3
    se = math.sqrt(p * (1 - p) / left.size)
    assert abs(left.mean() - p) < 3 * se
    assert abs(times.mean() - 0.1 * 0.2 / 2) < 3 * times.std(ddof=1) / math.sqrt(times.size)


def test_uniform_node_exits_symmetrically():
    _, left = first_exit_samples(0.25, 0.25, 1.0, 4000, seed=5)
    assert abs(left.mean() - 0.5) < 3 * math.sqrt(0.25 / left.size)


def test_same_seed_same_event_log():
    op = operator_from_mesh(build_structured_unit_square(3), 0.1)
    x0 = single(op.num_cells, 4, 30)
    a = simulate(DIFFUSION, op, x0, 1.0, seed=9, trajectory=2, record=True)
    b = simulate(DIFFUSION, op, x0, 1.0, seed=9, trajectory=2, record=True)
    c = simulate(DIFFUSION, op, x0, 1.0, seed=9, trajectory=3, record=True)
    assert a.events == b.events and len(a.events) > 10
    assert a.events != c.events


def test_substreams_differ():
    assert substream(1, 0).random() != substream(1, 1).random()
    assert substream(1, 0).random() == substream(1, 0).random()


def test_pure_diffusion_conserves_totals_exactly():
    op = operator_from_mesh(build_structured_unit_square(4), 1.0)
    v = np.zeros((2, op.num_cells))
    v[0, 0], v[1, -1] = 57, 13
    m = parse_model("species X\nspecies Y diffscale=0.5")
    s = NSMEngine(m, op).start(make_state(m, v), seed=1)
    for _ in range(20000):
        s.step()
    assert s.counts().sum(axis=1).tolist() == [57, 13]


def test_reactions_never_go_negative():
    m = parse_model("""
    species A
    species B
    species C
    reaction bind: A + B -> C : massaction(5, A, B)
    reaction split: C -> A + B : massaction(1, C)
    reaction decay: A -> : massaction(0.5, A)
    reaction make: -> A : 2
    """)
    op = operator_from_mesh(build_structured_unit_square(2), 0.2)
    v = np.zeros((3, op.num_cells))
    v[:2, 4] = 20
    s = NSMEngine(m, op).start(make_state(m, v), seed=2)
    for _ in range(5000):
        s.step()
        assert min(min(row) for row in s.x) >= 0
    # bind and split exchange B for C one to one
    c = s.counts()
    assert c[1].sum() + c[2].sum() == 20


def test_simulate_until_current_time_is_identity():
    op = line_op([0, 0.5, 1.0])
    s = init(DIFFUSION, op, single(3, 1, 4))
    before = s.counts()
    s.simulate_until(0.0)
    assert np.array_equal(s.counts(), before) and s.stats.events == 0
    with pytest.raises(ValueError):
        s.simulate_until(-1.0)


def test_waiting_times_are_exponential():
    # constant creation: cell 0 fires at rate 3 regardless of state
    m = parse_model("species X diffscale=0\nreaction make: 0 -> X : 3")
    s = NSMEngine(m, line_op([0.0, 1.0])).start(make_state(m, [[0, 0]]), seed=4, record=True)
    s.simulate_until(7000.0)
    t = np.array([e.t for e in s.events if e.cell == 0])
    gaps = np.diff(np.concatenate([[0.0], t]))[:10000]
    assert gaps.size == 10000
    assert stats.kstest(gaps, "expon", args=(0, 1 / 3)).pvalue > 0.01


def test_two_cell_distribution_matches_binomial():
    op = line_op([0.0, 1.0], gamma=0.5)  # per-molecule jump rate 2 * gamma = 1
    eng = NSMEngine(DIFFUSION, op)
    x0 = make_state(DIFFUSION, [[3, 0]])
    M = 4000
    counts = np.zeros(4)
    for k in range(M):
        s = eng.start(x0, seed=21, trajectory=k)
        s.simulate_until(1.0)
        counts[int(s.x[0][0])] += 1
    p = 0.5 * (1 + math.exp(-2.0))
    ref = stats.binom.pmf(np.arange(4), 3, p)
    se = np.sqrt(ref * (1 - ref) / M)
    assert np.all(np.abs(counts / M - ref) < 3 * se)


def test_ensemble_mean_matches_mean_equation():
    op = line_op([0.0, 0.5, 1.0])
    eng = NSMEngine(DIFFUSION, op)
    x0 = single(3, 0, 10)
    M, t = 2000, 0.1
    samples = np.array([eng.start(x0, 8, k).simulate_until(t).values[0] for k in range(M)])
    ref = mean_evolve(op, x0.values[0], t)
    se = samples.std(axis=0, ddof=1) / math.sqrt(M)
    assert np.all(np.abs(samples.mean(axis=0) - ref) < 4 * se)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        init(DIFFUSION, line_op([0, 0.5, 1.0]), make_state(DIFFUSION, [[1, 0]]))


def test_negative_couplings_are_dropped(quiet):
    op = operator_from_mesh(obtuse_pair(), 1.0)
    eng = NSMEngine(DIFFUSION, op)
    assert eng.dropped_couplings == 2
    assert all(q > 0 for row in eng.nbrs for _, q in row)


def test_event_log_csv(tmp_path):
    s = simulate(DIFFUSION, line_op([0, 0.5, 1.0]), single(3, 1, 3), 0.5, seed=1, record=True)
    path = tmp_path / "events.csv"
    write_event_log(s.events, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "kind", "cell", "species_or_reaction", "target_cell"]
    assert len(rows) == len(s.events) + 1
    assert float(rows[1][0]) == s.events[0].t
