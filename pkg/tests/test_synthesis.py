import math

import numpy as np
import pytest

from stochastic_l2_gain import sdp
from stochastic_l2_gain.backends.base import BackendResult, ConicBackend
from stochastic_l2_gain.behavior import learn_basis
from stochastic_l2_gain.errors import CertificateError, InvalidInputError, UndefinedRhoError
from stochastic_l2_gain.estimator import solve_are
from stochastic_l2_gain.models import DesignMode, SolveStatus
from stochastic_l2_gain.paramdyn import decompose
from stochastic_l2_gain.simulator import generate_dataset
from stochastic_l2_gain.synthesis import (
    GAMMA_ROUND_UP,
    ChanceConstraint,
    GainProfile,
    PiecewiseDesign,
    assemble_controller,
    bisect_gamma2,
    build_theorem1,
    build_theorem2,
    build_zero_mean,
    compute_rho,
    corollary1_gammas,
    design,
    expected_dissipation_step,
    gamma2_floor,
    nominal_dissipation_margin,
    offset_margin,
    optimize_gammas,
    output_error_floor,
)


def _linear_names(prog: sdp.ConicProgram) -> list[str]:
    return [name for name, _ in prog.linear_constraints]


def _block_names(prog: sdp.ConicProgram) -> list[str]:
    return [b.name for b in prog.psd_blocks]


def test_gain_profile_bound() -> None:
    profile = GainProfile(gamma1_sq=2.0, gamma2_sq=4.0, rho=0.25)
    assert profile.weighted_sq == pytest.approx(3.5)
    assert profile.effective_bound(2.0) == pytest.approx(3.5 / 4.0)
    assert profile.critical_gamma() == pytest.approx(math.sqrt(3.5))
    with pytest.raises(InvalidInputError):
        profile.effective_bound(0.0)


@pytest.mark.parametrize("kwargs", [{"gamma1_sq": -1.0}, {"gamma2_sq": -0.5}, {"rho": 1.5}])
def test_gain_profile_validation(kwargs) -> None:
    values = {"gamma1_sq": 1.0, "gamma2_sq": 1.0, "rho": 0.5}
    values.update(kwargs)
    with pytest.raises(InvalidInputError):
        GainProfile(**values)


def test_compute_rho_for_constant_and_forecast_means() -> None:
    assert compute_rho(np.array([1.0, 0.0]), np.eye(2)) == pytest.approx(1.0 / 3.0)
    assert compute_rho(np.zeros(2), np.eye(2)) == 0.0
    assert compute_rho(np.ones((4, 1)), np.eye(1)) == pytest.approx(0.5)
    # no uncertainty: all weight on the mean
    assert compute_rho(np.array([2.0]), np.zeros((1, 1))) == pytest.approx(1.0)


def test_compute_rho_undefined_without_energy() -> None:
    with pytest.raises(UndefinedRhoError):
        compute_rho(np.zeros(2), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        compute_rho(np.array([np.nan, 0.0]), np.eye(2))


def test_corollary_gammas_make_the_bound_equal_p() -> None:
    g1, g2 = corollary1_gammas(2.0, 0.1)
    assert g1 == g2 == pytest.approx(0.4)
    for rho in (0.0, 0.3, 1.0):
        assert GainProfile(g1, g2, rho).effective_bound(2.0) == pytest.approx(0.1)
    with pytest.raises(InvalidInputError):
        corollary1_gammas(1.0, 0.0)
    with pytest.raises(InvalidInputError):
        corollary1_gammas(-1.0, 0.5)


def test_general_program_structure(example_dyn, exact_basis, example_steady_state, example_noise) -> None:
    prog = build_theorem1(example_dyn, exact_basis, example_steady_state, example_noise, None, None)
    assert set(prog.variables) == {"W", "X", "Y", "K_d", "gamma1_sq", "gamma2_sq"}
    assert _block_names(prog) == ["positive_definite", "offset", "dissipation"]
    assert set(_linear_names(prog)) == {"trace_budget", "gamma1_sq_nonnegative", "gamma2_sq_nonnegative"}
    assert prog.block("dissipation").sizes == (22, 2, 2, 22)
    assert prog.block("offset").sizes == (22, 22, 2)

    fixed = build_theorem1(example_dyn, exact_basis, example_steady_state, example_noise, 1.0, 2.0)
    assert "gamma1_sq" not in fixed.variables
    assert _linear_names(fixed) == ["trace_budget"]


def test_constant_program_structure(example_dyn, exact_basis, example_steady_state, example_noise) -> None:
    prog = build_theorem2(
        example_dyn, exact_basis, example_steady_state, example_noise, np.array([0.5, -0.2]), 1.0, 1.0
    )
    assert set(prog.variables) == {"W", "X", "Y", "xi"}
    assert prog.variables["xi"].shape == (2, 1)
    # the trace budget lives inside the dissipation block here
    assert _linear_names(prog) == []
    assert prog.block("dissipation").sizes == (1, 22, 2, 22)

    with pytest.raises(InvalidInputError):
        build_theorem2(example_dyn, exact_basis, example_steady_state, example_noise, np.zeros(3), 1.0, 1.0)


def test_zero_mean_program_structure(example_dyn, exact_basis, example_steady_state, example_noise) -> None:
    prog = build_zero_mean(example_dyn, exact_basis, example_steady_state, example_noise, 5.0)
    assert set(prog.variables) == {"W", "X", "Y"}
    assert prog.block("dissipation").sizes == (22, 2, 22)
    with pytest.raises(InvalidInputError):
        build_zero_mean(example_dyn, exact_basis, example_steady_state, example_noise, -1.0)


def test_design_argument_checks(example_dyn, exact_basis, example_steady_state, example_noise, fake_backend) -> None:
    args = (example_dyn, exact_basis, example_steady_state, example_noise)
    with pytest.raises(InvalidInputError):
        design(DesignMode.ZERO, *args, gamma2_sq=1.0, optimize=True, backend=fake_backend)
    with pytest.raises(InvalidInputError):
        design(DesignMode.ZERO, *args, backend=fake_backend)
    with pytest.raises(InvalidInputError):
        design(DesignMode.GENERAL, *args, gamma2_sq=1.0, backend=fake_backend)
    with pytest.raises(InvalidInputError):
        design(DesignMode.CONSTANT, *args, gamma1_sq=1.0, gamma2_sq=1.0, backend=fake_backend)
    assert fake_backend.programs == []


def test_infeasible_solve_yields_no_design(
    example_dyn, exact_basis, example_steady_state, example_noise, fake_backend
) -> None:
    result = design(
        DesignMode.GENERAL,
        example_dyn,
        exact_basis,
        example_steady_state,
        example_noise,
        gamma1_sq=1.0,
        gamma2_sq=1.0,
        backend=fake_backend,
    )
    assert result.status == SolveStatus.INFEASIBLE
    assert result.design is None
    assert not result.feasible
    assert len(fake_backend.programs) == 1 and fake_backend.programs[0] is result.program

    with pytest.raises(CertificateError):
        assemble_controller(
            result.solution, DesignMode.GENERAL, example_dyn, exact_basis, example_steady_state, example_noise
        )


def test_optimize_sets_weighted_objective(
    example_dyn, exact_basis, example_steady_state, example_noise, fake_backend
) -> None:
    result = optimize_gammas(
        example_dyn, exact_basis, example_steady_state, example_noise, np.array([1.0, 0.0]), backend=fake_backend
    )
    prog = result.program
    assert prog.objective is not None
    assert prog.objective.variables() == {"gamma1_sq", "gamma2_sq"}
    rho = compute_rho(np.array([1.0, 0.0]), example_noise.S_d)
    value = prog.objective.evaluate({"gamma1_sq": np.array([[1.0]]), "gamma2_sq": np.array([[0.0]])})
    assert value[0, 0] == pytest.approx(rho)


class _ScriptedBackend(ConicBackend):
    """Hands out preset results in order."""

    name = "scripted"

    def __init__(self, *results: BackendResult) -> None:
        self.results = list(results)
        self.programs: list = []

    def solve(self, program, feas_tol: float, max_iterations: int) -> BackendResult:
        self.programs.append(program)
        return self.results.pop(0)


def test_boundary_optimum_is_re_solved_at_raised_gammas(
    example_dyn, exact_basis, example_steady_state, example_noise
) -> None:
    d_bar = np.array([0.3, -0.2])
    boundary = BackendResult(
        status=SolveStatus.FEASIBLE,
        assignments={"gamma1_sq": np.array([[0.2]]), "gamma2_sq": np.array([[0.5]])},
    )
    backend = _ScriptedBackend(boundary, BackendResult(status=SolveStatus.INFEASIBLE))
    result = optimize_gammas(example_dyn, exact_basis, example_steady_state, example_noise, d_bar, backend=backend)

    # the boundary point fails verification, so only the interior re-solve decides
    assert not result.feasible
    assert len(backend.programs) == 2
    pinned = backend.programs[1]
    assert pinned.objective is None
    assert "gamma1_sq" not in pinned.variables and "gamma2_sq" not in pinned.variables
    assert result.program is pinned

    zeros = {"X": np.zeros((22, 22))}
    phi = pinned.block("dissipation").entry(0, 0).evaluate(zeros)[0, 0]
    raised1 = 0.2 * (1.0 + GAMMA_ROUND_UP) + GAMMA_ROUND_UP**2
    raised2 = 0.5 * (1.0 + GAMMA_ROUND_UP) + GAMMA_ROUND_UP**2
    assert phi == pytest.approx(raised1 * float(d_bar @ d_bar) + raised2 * float(np.trace(example_noise.S_d)))


def test_output_error_floor_bounds_the_trace_budget(exact_basis, example_steady_state, example_noise) -> None:
    ss = example_steady_state
    # 𝒫 + 𝒩 is the prior covariance at the fixed point
    np.testing.assert_allclose(ss.P + ss.N_term, ss.P_prior, atol=1e-8 * max(1.0, np.abs(ss.P_prior).max()))
    floor = output_error_floor(exact_basis, ss)
    direct = np.trace(exact_basis.Pi_y_F @ (ss.P + ss.N_term) @ exact_basis.Pi_y_F.T)
    assert floor == pytest.approx(direct, rel=1e-6)
    assert floor > 0.0
    assert gamma2_floor(exact_basis, ss, example_noise) == pytest.approx(floor / 0.75)


def test_design_below_the_floor_warns(
    exact_basis, example_dyn, example_steady_state, example_noise, fake_backend, caplog
) -> None:
    floor = gamma2_floor(exact_basis, example_steady_state, example_noise)
    design(
        DesignMode.ZERO,
        example_dyn,
        exact_basis,
        example_steady_state,
        example_noise,
        gamma2_sq=0.5 * floor,
        backend=fake_backend,
    )
    assert "below the output error floor" in caplog.text


def test_chance_constraint_block() -> None:
    W = np.eye(2)
    F_z = np.array([[1.0], [0.0]])
    ok = ChanceConstraint(psi=1.0, offset=np.array([0.5, 0.0]), F_z=F_z, W=W, z_hat=np.array([-0.5]))
    assert ok.admissible
    assert ok.feasible()
    np.testing.assert_allclose(ok.matrix, np.eye(3))

    # ψ − ‖v‖²_{W⁻¹} < 0 for v = (2, 0)
    far = ChanceConstraint(psi=1.0, offset=np.array([2.0, 0.0]), F_z=F_z, W=W, z_hat=np.zeros(1))
    assert not far.feasible()

    negative = ChanceConstraint(psi=-0.1, offset=np.zeros(2), F_z=F_z, W=W, z_hat=np.zeros(1))
    assert not negative.admissible
    assert not negative.feasible()

    prog = sdp.ConicProgram()
    z = far.as_affine(prog)
    assert z.shape == (1, 1)
    assert prog.block("chance_constraint").sizes == (1, 2)
    # ẑ = −2 cancels the offset
    assert sdp.verify(prog, {"z_hat": np.array([[-2.0]])}).passes(1e-12)


def test_piecewise_design_selects_by_level() -> None:
    low, high = object(), object()
    pw = PiecewiseDesign(designs={(0.0, 0.0): low, (1.0, -1.0): high})
    assert pw.select(np.array([1.0, -1.0])) is high
    assert pw.select(np.zeros(2)) is low
    with pytest.raises(InvalidInputError):
        pw.select(np.array([0.5, 0.0]))


# -----------------------------------------------------------------------------
# Solver-backed designs
# -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def zero_mean_design(example_dyn, exact_basis, example_steady_state, example_noise):
    result = design(
        DesignMode.ZERO, example_dyn, exact_basis, example_steady_state, example_noise, gamma2_sq=1e4
    )
    assert result.feasible, result.status
    return result.design


@pytest.mark.solver
def test_zero_gamma_budget_is_infeasible(example_dyn, exact_basis, example_steady_state, example_noise) -> None:
    result = design(
        DesignMode.ZERO, example_dyn, exact_basis, example_steady_state, example_noise, gamma2_sq=0.0
    )
    assert not result.feasible
    assert result.status != SolveStatus.FEASIBLE


@pytest.mark.solver
def test_zero_mean_design_certificates(zero_mean_design, exact_basis, example_steady_state) -> None:
    d = zero_mean_design
    assert d.mode == DesignMode.ZERO
    assert d.profile.gamma2_sq == pytest.approx(1e4)
    assert d.profile.rho == 0.0
    assert d.spectral_radius < 1.0 + 1e-6

    scale = max(1.0, float(np.linalg.norm(d.M, 2)))
    assert d.storage_margin >= -1e-6 * scale
    assert offset_margin(d, exact_basis, example_steady_state) >= -1e-6 * scale

    rng = np.random.default_rng(0)
    g = rng.standard_normal(22)
    for _ in range(5):
        tol = 1e-6 * scale * float(g @ g)
        assert nominal_dissipation_margin(d, exact_basis, g) >= -tol
        g, step_margin = expected_dissipation_step(d, exact_basis, g)
        assert step_margin >= -tol


@pytest.mark.solver
def test_zero_mean_controller_drives_prior_to_zero(zero_mean_design, example_dyn) -> None:
    g = np.ones(22)
    for _ in range(200):
        g = zero_mean_design.prior(example_dyn, g)
    assert np.linalg.norm(g) < np.linalg.norm(np.ones(22))
    np.testing.assert_allclose(zero_mean_design.prior(example_dyn, np.zeros(22)), 0.0, atol=1e-12)


@pytest.mark.solver
@pytest.mark.slow
def test_optimized_constant_design(example_dyn, exact_basis, example_steady_state, example_noise) -> None:
    d_bar = np.array([0.3, -0.2])
    result = optimize_gammas(example_dyn, exact_basis, example_steady_state, example_noise, d_bar)
    assert result.feasible
    d = result.design
    assert d.mode == DesignMode.CONSTANT
    assert d.profile.rho == pytest.approx(compute_rho(d_bar, example_noise.S_d))
    assert d.objective == pytest.approx(d.profile.weighted_sq)
    # the γ's enter only through the budget γ1²‖d̄‖² + γ2²·tr(S_d), which the floor bounds
    energy = float(d_bar @ d_bar) + float(np.trace(example_noise.S_d))
    budget = d.objective * energy
    assert budget >= output_error_floor(exact_basis, example_steady_state) * (1.0 - 1e-6)
    fixed = GainProfile(gamma1_sq=4.0, gamma2_sq=4.0, rho=d.profile.rho)
    assert d.objective < fixed.weighted_sq

    # any split of the same budget certifies equally
    shifted = design(
        DesignMode.CONSTANT,
        example_dyn,
        exact_basis,
        example_steady_state,
        example_noise,
        gamma1_sq=0.0,
        gamma2_sq=budget / float(np.trace(example_noise.S_d)),
        d_bar=d_bar,
    )
    assert shifted.feasible
    np.testing.assert_allclose(d.B_cl, example_dyn.F_f @ d_bar + example_dyn.F_z @ d.xi)

    pinned = design(
        DesignMode.CONSTANT,
        example_dyn,
        exact_basis,
        example_steady_state,
        example_noise,
        gamma1_sq=d.profile.gamma1_sq * 1.1 + 1e-3,
        gamma2_sq=d.profile.gamma2_sq * 1.1 + 1e-3,
        d_bar=d_bar,
    )
    assert pinned.feasible


@pytest.mark.solver
@pytest.mark.slow
def test_bisection_brackets_the_smallest_budget(example_dyn, exact_basis, example_steady_state, example_noise) -> None:
    gamma2_sq, result = bisect_gamma2(
        example_dyn, exact_basis, example_steady_state, example_noise, rel_tol=1e-2
    )
    assert math.isfinite(gamma2_sq)
    assert result is not None and result.feasible
    assert gamma2_sq >= gamma2_floor(exact_basis, example_steady_state, example_noise) * (1.0 - 1e-6)
    below = design(
        DesignMode.ZERO, example_dyn, exact_basis, example_steady_state, example_noise, gamma2_sq=0.5 * gamma2_sq
    )
    assert not below.feasible


EXAMPLE_GAMMA_SQ = 4.0
CONSTANT_D_BAR = np.array([1.0, 1.0])


def _sampled_dissipation_margins(d, basis, rng, with_mean: bool) -> np.ndarray:
    """Nominal dissipation margin over 1000 random (ĝ, 𝔼d) pairs, relative to their size."""
    margins = []
    for _ in range(1000):
        g = rng.standard_normal(22) * rng.uniform(0.1, 10.0)
        mean = rng.standard_normal(2) * rng.uniform(0.1, 10.0) if with_mean else None
        size = 1.0 + float(g @ g) + (float(mean @ mean) if with_mean else 0.0)
        margins.append(nominal_dissipation_margin(d, basis, g, mean) / size)
    return np.array(margins)


@pytest.mark.solver
@pytest.mark.slow
def test_general_design_certifies_at_the_example_gammas(
    example_dyn, exact_basis, example_steady_state, example_noise
) -> None:
    result = design(
        DesignMode.GENERAL,
        example_dyn,
        exact_basis,
        example_steady_state,
        example_noise,
        gamma1_sq=EXAMPLE_GAMMA_SQ,
        gamma2_sq=EXAMPLE_GAMMA_SQ,
    )
    assert result.feasible, result.status
    d = result.design
    assert min(result.solution.block_margins.values()) >= -1e-8
    assert d.storage_margin >= -1e-8
    assert d.spectral_radius < 1.0

    scale = max(1.0, float(np.linalg.norm(d.M, 2)))
    margins = _sampled_dissipation_margins(d, exact_basis, np.random.default_rng(30), with_mean=True)
    assert margins.min() >= -1e-7 * scale


@pytest.mark.solver
@pytest.mark.slow
def test_constant_design_certifies_at_the_example_gammas(
    example_dyn, exact_basis, example_steady_state, example_noise
) -> None:
    result = design(
        DesignMode.CONSTANT,
        example_dyn,
        exact_basis,
        example_steady_state,
        example_noise,
        gamma1_sq=EXAMPLE_GAMMA_SQ,
        gamma2_sq=EXAMPLE_GAMMA_SQ,
        d_bar=CONSTANT_D_BAR,
    )
    assert result.feasible, result.status
    d = result.design
    assert d.storage_margin >= -1e-8
    assert d.spectral_radius < 1.0

    scale = max(1.0, float(np.linalg.norm(d.M, 2)))
    margins = _sampled_dissipation_margins(d, exact_basis, np.random.default_rng(31), with_mean=False)
    assert margins.min() >= -1e-7 * scale


@pytest.mark.solver
def test_general_design_below_the_floor_is_infeasible(
    example_dyn, exact_basis, example_steady_state, example_noise, caplog
) -> None:
    floor = gamma2_floor(exact_basis, example_steady_state, example_noise)
    result = design(
        DesignMode.GENERAL,
        example_dyn,
        exact_basis,
        example_steady_state,
        example_noise,
        gamma1_sq=100.0,
        gamma2_sq=0.95 * floor,
    )
    assert not result.feasible
    assert "below the output error floor" in caplog.text


@pytest.mark.solver
@pytest.mark.slow
def test_learned_bases_certify_across_dataset_seeds(example_model, example_layout, example_noise) -> None:
    general_feasible = 0
    for seed in range(20):
        data = generate_dataset(example_model, example_layout, example_noise, N=500, T=60, seed=seed).data
        basis = learn_basis(data, example_noise.S_n, example_layout)
        dyn = decompose(basis)
        ss = solve_are(dyn, basis, example_noise)

        general = design(
            DesignMode.GENERAL, dyn, basis, ss, example_noise, gamma1_sq=EXAMPLE_GAMMA_SQ, gamma2_sq=EXAMPLE_GAMMA_SQ
        )
        if general.feasible:
            general_feasible += 1
            assert general.design.spectral_radius < 1.0

        zero = design(DesignMode.ZERO, dyn, basis, ss, example_noise, gamma2_sq=EXAMPLE_GAMMA_SQ)
        assert zero.feasible, f"seed {seed}: {zero.status}"
        assert zero.design.spectral_radius < 1.0
    assert general_feasible >= 18
