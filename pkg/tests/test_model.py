import numpy as np
import pytest

from rdmesh.harness import builtin_model
from rdmesh.model import (
    InfeasibleReaction,
    Mode,
    ModelError,
    apply_reaction,
    make_state,
    parse_model,
    propensity_eval,
)

ABC = """
species A
species B
species C
reaction bind: A + B -> C : massaction(2, A, B)
reaction make: 0 -> A : 1.5
reaction decay: A -> 0 : massaction(0.3, A)
reaction dimer: 2 A -> C : massaction(4, A, A)
"""


@pytest.fixture
def abc():
    return parse_model(ABC)


def test_bimolecular_stoichiometry_uses_consumption_sign():
    m = parse_model("species A\nspecies B\nreaction ann: A + B -> 0 : massaction(0.0005*zeta^2, A, B)",
                    {"zeta": 2.0})
    assert m.reactions[0].stoich == (1, 1)
    assert propensity_eval(m, 0, [3, 5], vol=1.0) == pytest.approx(0.0005 * 4 * 15)


def test_localized_creation_is_gated_by_rho():
    text = """
    const kEA = 0.5
    const kR = 30
    species A deterministic
    species EA
    let a = A/vol
    reaction prodEA: 0 -> EA : heaviside(0.2 - rho) * kEA / (1 + a/kR)
    """
    m = parse_model(text)
    assert m.reactions[0].stoich == (0, -1)
    assert propensity_eval(m, 0, [30, 0], vol=2.0, centroid=(0.3, 0.0)) == 0.0
    assert propensity_eval(m, 0, [30, 0], vol=2.0, centroid=(0.1, 0.0)) == pytest.approx(0.5 / 1.5)


def test_table3_w3_closed_outside_center():
    zeta = 0.05
    m = builtin_model("metabolites", {"zeta": zeta})
    r = [x.name for x in m.reactions].index("prodEA")
    state = [10.0, 10.0, 0, 0]
    assert propensity_eval(m, r, state, vol=zeta, centroid=(0.3, 0.0)) == 0.0
    assert propensity_eval(m, r, state, vol=zeta, centroid=(0.0, 0.0)) > 0.0


@pytest.mark.parametrize("prop", ["1/(A - 3)", "A/(B - 1)", "1/A", "-A", "2 - A", "1/(1 - A/2)"])
def test_unprovable_denominators_and_signs_rejected(prop):
    with pytest.raises(ModelError):
        parse_model(f"species A\nspecies B\nreaction r: A -> : {prop}")


@pytest.mark.parametrize("text", [
    "species A\nreaction r: A -> Z : 1",
    "species A\nreaction r: A -> : foo*A",
    "species A\nreaction r: A -> : (A",
    "species A\nreaction r: A -> A : A",
    "species A\nspecies A",
    "species vol",
    "reaction r: A -> : 1",
])
def test_malformed_models_rejected(text):
    with pytest.raises(ModelError):
        parse_model(text)


def test_error_carries_line_number():
    with pytest.raises(ModelError, match="line 3"):
        parse_model("species A\n\nreaction r: A -> : 1/(A-3)")


def test_massaction_examples(abc):
    assert propensity_eval(abc, "bind", [3, 5, 0], vol=4.0) == pytest.approx(7.5)
    assert propensity_eval(abc, "decay", [3, 5, 0], vol=4.0) == pytest.approx(0.9)
    # dimerization: (c/vol) x (x - 1) / 2
    assert propensity_eval(abc, "dimer", [3, 0, 0], vol=2.0) == pytest.approx(2.0 * 3 * 2 / 2)
    assert propensity_eval(abc, "dimer", [1, 0, 0], vol=2.0) == 0.0


def test_zero_reactant_gives_zero_rate(abc):
    for r, rx in enumerate(abc.reactions):
        consumed = [i for i, n in enumerate(rx.stoich) if n > 0]
        for i in consumed:
            state = [4, 4, 4]
            state[i] = 0
            assert propensity_eval(abc, r, state, vol=1.3) == 0.0


def test_order_two_rate_halves_with_volume(abc):
    a = propensity_eval(abc, "bind", [7, 9, 0], vol=1.0)
    b = propensity_eval(abc, "bind", [7, 9, 0], vol=2.0)
    assert b == pytest.approx(a / 2)


def test_apply_reaction_examples(abc):
    s = make_state(abc, np.array([[0, 0, 1], [0, 0, 1], [0, 0, 0]]))
    out = apply_reaction(s, abc, 0, 2)
    assert out.values[:, 2].tolist() == [0, 0, 1]
    assert out.values[:, :2].tolist() == s.values[:, :2].tolist()
    out = apply_reaction(s, abc, 1, 0)
    assert out.values[0, 0] == 1
    with pytest.raises(InfeasibleReaction):
        apply_reaction(s, abc, 2, 1)


def test_make_state_validation(abc):
    with pytest.raises(ModelError):
        make_state(abc, [[1.5], [0], [0]])
    with pytest.raises(ModelError):
        make_state(abc, [[-1], [0], [0]])
    with pytest.raises(ModelError):
        make_state(abc, [[1], [0]])
    det = abc.with_modes({"A": Mode.DETERMINISTIC})
    assert make_state(det, [[1.5], [0], [0]]).values[0, 0] == 1.5


def test_round_trip_is_identical(abc):
    again = parse_model(abc.to_text())
    assert again == abc
    m = builtin_model("metabolites", {"zeta": 0.04})
    assert parse_model(m.to_text()) == m


def test_species_options_and_gamma():
    m = parse_model("gamma = 2.5\nspecies A deterministic diffscale=0.5\nspecies B")
    assert m.gamma == 2.5
    assert m.deterministic_mask().tolist() == [True, False]
    assert m.diffusion_scales().tolist() == [0.5, 1.0]
    with pytest.raises(ModelError):
        parse_model("species A diffscale=-1")


def test_constant_expressions_and_bound_constants():
    m = parse_model("const k = 3*z + 1\nspecies A\nreaction r: A -> : k*A", {"z": 2})
    assert m.constants["k"] == 7.0
    assert propensity_eval(m, 0, [2], vol=1.0) == 14.0
    with pytest.raises(ModelError):
        parse_model("const z = 1\nspecies A", {"z": 2})


def test_bistable_model_loads():
    m = builtin_model("bistable", {"ka": 2e-13})
    assert len(m.species) == 8 and len(m.reactions) == 12
    S = m.stoich_matrix
    assert S.shape == (12, 8)  # reactions x species
