import numpy as np
import pytest

from stochastic_l2_gain.behavior import (
    BehaviorBasis,
    SignalLayout,
    TrajectorySet,
    exact_basis_from_kernel,
    hankel,
    is_persistently_exciting,
    learn_basis,
    noise_compensated_gram,
    state_map,
    window_at,
)
from stochastic_l2_gain.errors import (
    InconsistentLayoutError,
    InvalidDepthError,
    InvalidInputError,
    NotExcitingError,
)
from stochastic_l2_gain.numerics import chordal_distance
from stochastic_l2_gain.simulator import generate_dataset


def test_layout_dimensions() -> None:
    layout = SignalLayout(p=2, m=2, q=2, L=4, n_state=2)
    assert layout.w_dim == 6
    assert layout.window_dim == 30
    assert layout.g_dim == 22
    assert layout.min_length == 10
    assert layout.channel_names() == ["y1", "y2", "u1", "u2", "d1", "d2"]
    assert layout.with_state(3).g_dim == 23


def test_hankel_columns_are_windows() -> None:
    traj = np.arange(12, dtype=float).reshape(6, 2)
    H = hankel(traj, 3)
    assert H.shape == (6, 4)
    np.testing.assert_array_equal(H[:, 1], traj[1:4].ravel())
    np.testing.assert_array_equal(H[:, 0], window_at(traj, 2, 2))


def test_hankel_rejects_excess_depth() -> None:
    with pytest.raises(InvalidDepthError):
        hankel(np.zeros((3, 1)), 4)


def test_persistent_excitation() -> None:
    rng = np.random.default_rng(0)
    assert is_persistently_exciting(rng.standard_normal((50, 2)), 4)
    assert not is_persistently_exciting(np.ones((50, 2)), 2)
    # too few columns for full row rank
    assert not is_persistently_exciting(rng.standard_normal((8, 2)), 4)


def test_trajectory_set_validation(example_layout: SignalLayout) -> None:
    short = np.zeros((example_layout.min_length, example_layout.w_dim))
    with pytest.raises(InvalidInputError):
        TrajectorySet([short], example_layout)

    a = np.zeros((20, 6))
    b = np.zeros((21, 6))
    with pytest.raises(InvalidInputError):
        TrajectorySet([a, b], example_layout)

    with pytest.raises(InconsistentLayoutError):
        TrajectorySet([np.zeros((20, 5))], example_layout)


def test_exact_basis_spans_the_behavior(example_model, exact_basis: BehaviorBasis) -> None:
    F = exact_basis.F
    assert F.shape == (30, 22)
    np.testing.assert_allclose(F.T @ F, np.eye(22), atol=1e-10)
    np.testing.assert_allclose(example_model.window_constraints(4) @ F, 0.0, atol=1e-10)


def test_exact_basis_rejects_wrong_state_count(example_model, example_layout) -> None:
    with pytest.raises(InconsistentLayoutError):
        exact_basis_from_kernel(example_model, example_layout.with_state(3))


def test_state_map_inverts_window(exact_basis: BehaviorBasis) -> None:
    rng = np.random.default_rng(1)
    g = rng.standard_normal(22)
    np.testing.assert_allclose(state_map(exact_basis, exact_basis.window(g)), g, atol=1e-12)
    with pytest.raises(InconsistentLayoutError):
        state_map(exact_basis, np.zeros(29))


def test_selectors_pick_the_current_step(exact_basis: BehaviorBasis) -> None:
    window = np.arange(30, dtype=float)
    np.testing.assert_array_equal(exact_basis.Pi_f @ window, window[24:])
    np.testing.assert_array_equal(exact_basis.Pi_y @ window, window[24:26])
    np.testing.assert_array_equal(exact_basis.Pi_u @ window, window[26:28])
    np.testing.assert_array_equal(exact_basis.Pi_d @ window, window[28:])
    np.testing.assert_array_equal(exact_basis.Pi_p @ window, window[6:])


def test_noise_free_data_recovers_the_behavior(clean_data, example_layout, exact_basis) -> None:
    data = clean_data(example_layout, N=20, T=40, seed=2)
    learned = learn_basis(data, np.zeros((6, 6)))
    assert learned.g_dim == 22
    assert chordal_distance(learned.F, exact_basis.F) < 1e-6
    assert not learned.gap_warning


def test_auto_state_detects_state_cardinality(clean_data, example_layout) -> None:
    data = clean_data(example_layout.with_state(0), N=20, T=40, seed=3)
    learned = learn_basis(data, np.zeros((6, 6)), auto_state=True)
    assert learned.layout.n_state == 2


def test_gram_is_symmetric_and_compensated(clean_data, example_layout) -> None:
    data = clean_data(example_layout, N=5, T=30, seed=4)
    raw = noise_compensated_gram(data, np.zeros((6, 6)))
    S_n = 0.1 * np.eye(6)
    compensated = noise_compensated_gram(data, S_n)
    np.testing.assert_allclose(compensated, compensated.T)
    np.testing.assert_allclose(raw - compensated, (30 - 4 + 1) * np.kron(np.eye(5), S_n), atol=1e-9)


def test_learning_rejects_constant_inputs(example_layout) -> None:
    traj = np.ones((30, 6))
    data = TrajectorySet([traj, traj.copy()], example_layout)
    with pytest.raises(NotExcitingError) as excinfo:
        learn_basis(data, np.zeros((6, 6)))
    assert excinfo.value.trajectory_index == 0


@pytest.mark.slow
def test_learned_basis_converges_with_more_data(example_model, example_layout, example_noise, exact_basis) -> None:
    distances = []
    for N in (50, 500):
        dataset = generate_dataset(example_model, example_layout, example_noise, N=N, T=60, seed=11)
        learned = learn_basis(dataset.data, example_noise.S_n)
        distances.append(chordal_distance(learned.F, exact_basis.F))
    assert distances[1] < distances[0]
    assert distances[1] < 0.1
