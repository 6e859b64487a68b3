"""Galerkin baseline: bases, operators, deterministic and stochastic integration."""

import numpy as np
import pytest

from burgers_rom.burgers import GridSpec, analytic_u, initial_condition
from burgers_rom.errors import ConfigError, NumericsError
from burgers_rom.galerkin import (
    GalerkinOperators,
    assemble_operators,
    fourier_sine_basis,
    integrate_rom,
    pod_basis,
    quad_weights,
    simulate_sde,
)

GRID = GridSpec()


# sine basis -----------------------------------------------------------------


def test_sine_basis_orthonormal():
    basis = fourier_sine_basis(12, GRID)
    assert np.abs(basis.gram() - np.eye(12)).max() <= 1e-6


def test_sine_basis_vanishes_at_walls():
    basis = fourier_sine_basis(6, GRID)
    assert np.allclose(basis.values[:, 0], 0.0, atol=1e-14)
    assert np.allclose(basis.values[:, -1], 0.0, atol=1e-12)


def test_sine_derivative_inner_products():
    # (phi_k', phi_l') = (k pi / l)^2 delta_kl under the quadrature rule
    d = 8
    basis = fourier_sine_basis(d, GRID)
    w = quad_weights(GRID)
    gram = (basis.derivatives * w) @ basis.derivatives.T
    expect = np.diag((np.arange(1, d + 1) * np.pi / GRID.l) ** 2)
    assert np.abs(gram - expect).max() <= 1e-4


def test_sine_basis_dimension_guard():
    with pytest.raises(ConfigError):
        fourier_sine_basis(128, GRID)
    with pytest.raises(ConfigError):
        fourier_sine_basis(0, GRID)


# POD basis ------------------------------------------------------------------


def _rank2_snapshots(n=40):
    # snapshots spanned by two fixed boundary-vanishing modes
    rng = np.random.default_rng(5)
    x = GRID.x
    m1 = np.sin(np.pi * x)
    m2 = np.sin(3 * np.pi * x)
    coeffs = rng.normal(size=(n, 2))
    return coeffs[:, :1] * m1 + coeffs[:, 1:] * m2


def test_pod_exact_low_rank_reconstruction():
    snaps = _rank2_snapshots()
    basis = pod_basis(snaps, 2, GRID)
    rec = basis.reconstruct(basis.project(snaps))
    assert np.abs(rec - snaps).max() <= 1e-10


def test_pod_orthonormality():
    rng = np.random.default_rng(6)
    snaps = rng.normal(size=(30, GRID.K))
    snaps[:, 0] = 0.0
    basis = pod_basis(snaps, 10, GRID)
    assert np.abs(basis.gram() - np.eye(10)).max() <= 1e-8


def test_pod_projection_error_matches_svd_tail():
    rng = np.random.default_rng(7)
    snaps = rng.normal(size=(25, GRID.K))
    snaps[:, 0] = 0.0
    from burgers_rom.galerkin import extend_field

    sig = np.linalg.svd(extend_field(snaps).T, compute_uv=False)
    for d in (3, 8, 15):
        basis = pod_basis(snaps, d, GRID)
        rec = basis.reconstruct(basis.project(snaps))
        err = np.linalg.norm(rec - snaps) / np.linalg.norm(snaps)
        expect = np.sqrt(np.sum(sig[d:] ** 2)) / np.linalg.norm(snaps)
        assert abs(err - expect) <= 1e-8


def test_pod_error_nonincreasing_in_d():
    snaps = np.stack([analytic_u(GRID.x, t, 300.0) for t in GRID.times])
    errs = []
    for d in (1, 2, 4, 8):
        basis = pod_basis(snaps, d, GRID)
        rec = basis.reconstruct(basis.project(snaps))
        errs.append(np.linalg.norm(rec - snaps))
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_pod_rank_guard():
    snaps = _rank2_snapshots()
    with pytest.raises(ConfigError):
        pod_basis(snaps, 3, GRID)  # numerical rank is 2


# operators ------------------------------------------------------------------


def test_sine_operators_diagonal():
    d, nu = 8, 0.01
    basis = fourier_sine_basis(d, GRID)
    ops = assemble_operators(basis, nu)
    expect = -nu * np.diag((np.arange(1, d + 1) * np.pi / GRID.l) ** 2)
    assert np.abs(ops.linear - expect).max() <= 1e-6
    # symmetric negative semi-definite
    assert np.abs(ops.linear - ops.linear.T).max() <= 1e-12
    assert np.all(np.linalg.eigvalsh(ops.linear) <= 1e-12)


def test_zero_viscosity_zeroes_linear_part():
    basis = fourier_sine_basis(4, GRID)
    ops = assemble_operators(basis, 0.0)
    assert np.array_equal(ops.linear, np.zeros((4, 4)))


def test_quadratic_tensor_conserves_cubic_energy():
    # integral of w^2 w' vanishes for boundary-vanishing w, so the cubic form
    # contracts to ~0 on the sine span
    basis = fourier_sine_basis(6, GRID)
    ops = assemble_operators(basis, 0.01)
    rng = np.random.default_rng(8)
    for _ in range(5):
        y = rng.normal(size=6)
        total = np.einsum("lmk,l,m,k->", ops.quadratic, y, y, y)
        assert abs(total) <= 1e-6


# integration ----------------------------------------------------------------


def _linear_ops(lams):
    d = len(lams)
    return GalerkinOperators(
        linear=-np.diag(np.asarray(lams, dtype=float)),
        quadratic=np.zeros((d, d, d)),
        nu=0.0,
    )


def test_rk4_matches_exponential_decay():
    ops = _linear_ops([1.0, 3.0])
    y0 = np.array([2.0, -1.0])
    traj = integrate_rom(ops, y0, dt=0.01, steps=100)
    expect = y0 * np.exp(-np.array([1.0, 3.0]) * traj.times[-1])
    assert np.abs(traj.coefficients[-1] - expect).max() <= 1e-8  # O(dt^4) regime


def test_rk4_convergence_order():
    ops = _linear_ops([2.0])
    y0 = np.array([1.0])
    errs = []
    for dt in (0.02, 0.01, 0.005):
        steps = int(round(1.0 / dt))
        traj = integrate_rom(ops, y0, dt=dt, steps=steps)
        errs.append(abs(traj.coefficients[-1, 0] - np.exp(-2.0)))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 3.9


def test_zero_start_stays_zero():
    basis = fourier_sine_basis(4, GRID)
    ops = assemble_operators(basis, 0.01)
    traj = integrate_rom(ops, np.zeros(4), dt=0.02, steps=50)
    assert np.array_equal(traj.coefficients, np.zeros((51, 4)))


def test_blowup_guard():
    ops = _linear_ops([-80.0])  # growing mode
    with pytest.raises(NumericsError):
        integrate_rom(ops, np.array([1.0]), dt=0.5, steps=200)


def test_d8_sine_rom_tracks_analytic_solution():
    # convergence study (documented in the README): L2 error at t=1 for
    # d=4/8/16 is about 9.6e-3 / 1.0e-3 / 1.2e-4, far below the 0.05 budget
    re = 100.0
    basis = fourier_sine_basis(8, GRID)
    ops = assemble_operators(basis, 1.0 / re)
    y0 = basis.project(initial_condition(GRID.x, re))
    steps = 500
    traj = integrate_rom(ops, y0, dt=1.0 / steps, steps=steps)
    rec = basis.reconstruct(traj.coefficients[-1])
    exact = analytic_u(GRID.x, 1.0, re)
    w = quad_weights(GRID)[: GRID.K]
    err = np.sqrt(np.sum(w * (rec - exact) ** 2))
    assert err <= 0.05


# stochastic form -------------------------------------------------------------


def test_sde_zero_noise_matches_euler():
    basis = fourier_sine_basis(4, GRID)
    ops = assemble_operators(basis, 0.01)
    y0 = basis.project(initial_condition(GRID.x, 100.0))
    traj = simulate_sde(ops, 0.0, y0, dt=0.02, steps=50, seed=1)
    y = y0.copy()
    for _ in range(50):
        y = y + 0.02 * ops.drift(y)
    assert np.array_equal(traj.coefficients[-1], y)


def test_sde_increment_variance():
    # drift-free: increments are sigma norm(0, dt) per dimension
    ops = GalerkinOperators(linear=np.zeros((2, 2)), quadratic=np.zeros((2, 2, 2)), nu=0.0)
    sigma, dt, steps = 0.3, 0.01, 100_000
    traj = simulate_sde(ops, sigma, np.zeros(2), dt=dt, steps=steps, seed=42)
    incs = np.diff(traj.coefficients, axis=0)
    var = incs.var(axis=0)
    assert np.all(np.abs(var / (sigma**2 * dt) - 1.0) <= 0.02)


def test_sde_same_seed_same_path():
    ops = _linear_ops([1.0, 2.0])
    a = simulate_sde(ops, [0.1, 0.2], np.ones(2), dt=0.01, steps=200, seed=7)
    b = simulate_sde(ops, [0.1, 0.2], np.ones(2), dt=0.01, steps=200, seed=7)
    assert np.array_equal(a.coefficients, b.coefficients)


def test_sde_rejects_negative_amplitude():
    ops = _linear_ops([1.0])
    with pytest.raises(ConfigError):
        simulate_sde(ops, [-0.1], np.zeros(1), dt=0.01, steps=10, seed=0)


def test_trajectory_csv_header():
    ops = _linear_ops([1.0, 2.0, 3.0])
    traj = integrate_rom(ops, np.ones(3), dt=0.1, steps=4)
    csv = traj.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "t,y1,y2,y3"
    assert len(lines) == 6
