import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drbsde import (AssumptionPError, ConfigurationError, DefaultLaw, Measure, PreconditionError, UndefinedNodeError,
                    build_azema, build_model, conditional_expectation, martingale_decompose, operator_T)
from drbsde.filtration import (F_TREE, G_TREE, AdaptedProcess, assemble_gprocess, azema_defects, fprocess,
                               girsanov_defect, martingale_defect, prefix_label, stopped_walk)
from helpers import random_setup


def flat(proc):
    return np.concatenate([np.ravel(v) for v in proc.values])


# ---------------------------------------------------------------------------
# lattice


def test_smallest_tree():
    m = build_model(1, 1.0)
    assert m.n_paths == 2
    np.testing.assert_allclose(m.moves, [-1.0, 1.0])
    np.testing.assert_allclose(m.node_B(1), [-1.0, 1.0])


def test_increment_is_root_dt():
    m = build_model(3, 0.25)
    assert m.n_paths == 8
    assert m.increment == 0.5
    np.testing.assert_allclose(m.times, [0.0, 0.25, 0.5, 0.75])


@pytest.mark.parametrize("kwargs", [dict(n_steps=0, dt=1.0), dict(n_steps=2, dt=0.0), dict(n_steps=2, dt=1.0, up_prob=1.0),
                                    dict(n_steps=2.5, dt=1.0), dict(n_steps=30, dt=1.0)])
def test_bad_lattice_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        build_model(**kwargs)


def test_skewed_walk_is_centred():
    m = build_model(3, 0.5, up_prob=0.3)
    p = m.move_probs
    assert abs(p @ m.moves) < 1e-15
    assert abs(p @ m.moves ** 2 - m.increment ** 2) < 1e-15


def test_prefix_labels():
    assert prefix_label(0, 0) == "root"
    assert prefix_label(2, 1) == "UD"
    assert prefix_label(3, 6) == "DUU"


# ---------------------------------------------------------------------------
# default laws and survival factors


def test_no_default_identities():
    m = build_model(3, 0.25)
    b = build_azema(m, DefaultLaw.none(m))
    for name, target in [("G", 1.0), ("Gtilde", 1.0), ("q", 0.0), ("m", 1.0), ("E", 1.0), ("Etilde", 1.0)]:
        np.testing.assert_array_equal(flat(getattr(b, name)), target)
    np.testing.assert_array_equal(flat(b.Psi), 1.0)


def test_one_step_half_default():
    m = build_model(1, 1.0)
    b = build_azema(m, DefaultLaw.deterministic(m, [0.5]))
    np.testing.assert_allclose(b.G[1], 0.5)
    np.testing.assert_allclose(b.Gtilde[1], 1.0)
    np.testing.assert_allclose(b.q[1], 0.5)
    np.testing.assert_allclose(b.Etilde[1], 0.5)
    np.testing.assert_allclose(b.E[1], 1.0)


def test_affine_terminal_hazard_two_steps():
    # hazards by path (DD, UD, DU, UU): 0, 0.2, 0.2, 0.4; values summed by hand over the atoms
    m = build_model(2, 1.0)
    b = build_azema(m, DefaultLaw.affine_hazard(m, 0.2, 0.1, "terminal"))
    np.testing.assert_allclose(b.G[1], [0.9, 0.7], atol=1e-15)
    np.testing.assert_allclose(b.q[1], [0.1, 0.3], atol=1e-15)
    np.testing.assert_allclose(b.Etilde[1], [0.9, 0.7], atol=1e-15)
    np.testing.assert_allclose(b.G[2], [1.0, 0.64, 0.64, 0.36], atol=1e-15)
    np.testing.assert_allclose(b.Gtilde[2], [1.0, 0.8, 0.8, 0.6], atol=1e-15)
    np.testing.assert_allclose(b.q[2], [0.0, 0.16, 0.16, 0.24], atol=1e-15)
    np.testing.assert_allclose(b.Etilde[2], [0.9, 0.56, 0.72, 0.42], atol=1e-15)
    np.testing.assert_allclose(b.E[2], [1 / 0.9, 0.8 / 0.7, 0.8 / 0.9, 0.6 / 0.7], atol=1e-15)
    np.testing.assert_allclose(b.dV[2], [0.0, 0.14, 0.18, 0.28], atol=1e-15)


def test_current_state_hazard_is_immersed():
    m = build_model(3, 0.25)
    assert DefaultLaw.affine_hazard(m, 0.2, 0.3, "current").immersion_flags().all()
    assert not DefaultLaw.affine_hazard(m, 0.2, 0.3, "terminal").immersion_flags()[0]


@pytest.mark.parametrize("make", [
    lambda m: DefaultLaw(m, np.ones((m.n_paths, m.n_steps + 1))),
    lambda m: DefaultLaw.deterministic(m, [0.7, 0.7]),
    lambda m: DefaultLaw.deterministic(m, [0.1]),
    lambda m: DefaultLaw.from_hazards(m, np.ones((m.n_paths, m.n_steps))),
    lambda m: DefaultLaw.affine_hazard(m, 0.1, 0.1, "sideways"),
])
def test_bad_laws_rejected(make):
    with pytest.raises(ConfigurationError):
        make(build_model(2, 0.5))


def test_sure_default_breaks_positivity():
    m = build_model(1, 1.0)
    mass = np.array([[1.0, 0.0], [0.5, 0.5]])
    with pytest.raises(AssumptionPError, match="node D"):
        build_azema(m, DefaultLaw(m, mass))


def test_interval_rule_splits_mass():
    m = build_model(4, 0.25)
    law = DefaultLaw.from_interval_rule(m, 2, lambda t, Bc: np.full((Bc.shape[0], 2), 0.2))
    np.testing.assert_allclose(law.mass[0], [0.1, 0.1, 0.1, 0.1, 0.6])
    with pytest.raises(ConfigurationError):
        DefaultLaw.from_interval_rule(m, 3, lambda t, Bc: np.zeros((Bc.shape[0], 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), p=st.sampled_from([0.5, 0.3, 0.65]))
def test_azema_identities_random(seed, n, p):
    _, _, b, Q = random_setup(seed, n, 0.5, "path", p)
    d = azema_defects(b, Q)
    assert max(d.values()) <= 1e-12, d
    et = flat(b.Etilde)
    assert et.min() > 0 and et.max() <= 1.0


# ---------------------------------------------------------------------------
# conditional expectations and measures


def test_conditional_expectation_of_walk_is_walk():
    m = build_model(4, 0.25)
    P = Measure.reference(m, DefaultLaw.none(m))
    BN = m.B[m.atom_path, -1]
    for k in range(5):
        np.testing.assert_allclose(conditional_expectation(m, BN, P, k), m.node_B(k), atol=1e-15)


def test_conditional_survival_matches_bundle():
    m, law, b, _ = random_setup(3, 4)
    P = b.reference
    for k in range(5):
        alive = (m.atom_tau > k).astype(float)
        np.testing.assert_allclose(conditional_expectation(m, alive, P, k), b.G[k], atol=1e-14)


def test_constant_has_constant_conditional_expectation():
    m, _, b, Q = random_setup(5, 3)
    c = np.full(m.n_atoms, 2.5)
    for k in range(4):
        np.testing.assert_allclose(conditional_expectation(m, c, Q, k, G_TREE), 2.5)


def test_zero_mass_node_raises_for_single_node():
    m = build_model(2, 1.0)
    P = Measure.reference(m, DefaultLaw.none(m))
    x = np.zeros(m.n_atoms)
    # defaults cannot happen without mass, so the step-1 default node of path D is empty
    with pytest.raises(UndefinedNodeError):
        conditional_expectation(m, x, P, 1, G_TREE, node=0)
    assert np.isnan(conditional_expectation(m, x, P, 1, G_TREE)[0])


def test_bad_atom_vector_rejected():
    m = build_model(2, 1.0)
    P = Measure.reference(m, DefaultLaw.none(m))
    with pytest.raises(PreconditionError):
        conditional_expectation(m, np.zeros(3), P, 0)


def test_no_default_gives_reference_measure():
    m, law, b, Q = random_setup(0, 3, law="none")
    np.testing.assert_array_equal(Q.weights, b.reference.weights)


def test_deterministic_hazard_gives_reference_measure():
    m, law, b, Q = random_setup(2, 4, law="deterministic")
    np.testing.assert_allclose(flat(b.E), 1.0, atol=1e-15)
    np.testing.assert_allclose(Q.weights, b.reference.weights, atol=1e-16)


def test_stopped_walk_is_martingale_under_reweighted_measure():
    m, law, b, Q = random_setup(11, 2)
    assert girsanov_defect(m, Q) <= 1e-12
    # path dependence breaks it under the reference measure
    assert girsanov_defect(m, b.reference) > 1e-3


def test_reweighted_measure_is_probability():
    m, law, b, Q = random_setup(8, 5)
    assert abs(Q.total - 1.0) <= 1e-12
    assert np.all(Q.weights[b.reference.weights > 0] > 0)


# ---------------------------------------------------------------------------
# martingale transform and decomposition


def walk(m):
    return fprocess(m, [m.node_B(k) for k in range(m.n_steps + 1)])


def test_transform_of_constant_is_constant():
    m, _, b, _ = random_setup(1, 3)
    T = operator_T(fprocess(m, 1.5), b)
    np.testing.assert_allclose(flat(T), 1.5)


def test_transform_without_default_is_identity():
    m, _, b, _ = random_setup(1, 3, law="none")
    T = operator_T(walk(m), b)
    live = b.reference.weights > 0
    np.testing.assert_allclose(T.atom_matrix(m)[live], walk(m).atom_matrix(m)[live], atol=1e-15)


def test_transform_of_walk_is_enlarged_martingale():
    m, _, b, _ = random_setup(4, 2)
    T, C = operator_T(walk(m), b, return_correction=True)
    assert martingale_defect(m, T, b.reference) <= 1e-12
    stopped = stopped_walk(m).atom_matrix(m)
    np.testing.assert_allclose(T.atom_matrix(m) + C.atom_matrix(m), stopped, atol=1e-14)


def test_transform_rejects_non_martingale():
    m, _, b, _ = random_setup(4, 2)
    with pytest.raises(PreconditionError):
        operator_T(fprocess(m, lambda t, x: x * x), b)


def test_decomposition_of_stopped_walk():
    m, _, b, Q = random_setup(6, 3)
    Z, M = martingale_decompose(m, stopped_walk(m), Q)
    for k in range(m.n_steps):
        np.testing.assert_allclose(Z[k][m.alive_gnodes(k)], 1.0, atol=1e-12)
    np.testing.assert_allclose(M.atom_matrix(m), 0.0, atol=1e-12)


def test_decomposition_of_constant():
    m, _, b, Q = random_setup(6, 3)
    Z, M = martingale_decompose(m, assemble_gprocess(m, [np.full(1 << k, 3.0) for k in range(4)],
                                                     [None] + [np.full(1 << k, 3.0) for k in range(1, 4)]), Q)
    np.testing.assert_allclose(np.nan_to_num(Z.atom_matrix(m)), 0.0, atol=1e-14)
    np.testing.assert_allclose(M.atom_matrix(m), 0.0, atol=1e-14)


def test_default_indicator_has_no_walk_part_under_independence():
    m, _, b, Q = random_setup(9, 3, law="deterministic")
    x = (m.atom_tau <= m.n_steps).astype(float)
    X = AdaptedProcess(G_TREE, tuple(conditional_expectation(m, x, Q, k, G_TREE) for k in range(4)))
    Z, M = martingale_decompose(m, X, Q)
    for k in range(3):
        np.testing.assert_allclose(Z[k][m.alive_gnodes(k)], 0.0, atol=1e-12)
    # the orthogonal part carries the default jump
    assert np.max(np.abs(M.atom_matrix(m))) > 0.1


def test_decomposition_rejects_base_process():
    m, _, b, Q = random_setup(6, 2)
    with pytest.raises(PreconditionError):
        martingale_decompose(m, walk(m), Q)


def test_fprocess_inputs():
    m = build_model(2, 1.0)
    assert fprocess(m, 2.0)[2].tolist() == [2.0] * 4
    np.testing.assert_allclose(fprocess(m, lambda t, b: t + b)[1], [0.0, 2.0])
    with pytest.raises(ConfigurationError):
        fprocess(m, [np.zeros(1), np.zeros(3), np.zeros(4)])
    assert fprocess(m, walk(m)).tree == F_TREE
