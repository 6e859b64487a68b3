"""Classical Galerkin projection baseline for the Burgers problem.

Bases live on the closed grid (the K data points plus the x = l endpoint):
the composite trapezoid rule on that grid integrates the sine products and
their derivative products exactly, which is what makes the assembled linear
operator diagonal to machine precision. Data fields, which vanish at both
walls, are extended by zero before projection.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .burgers import GridSpec
from .errors import ConfigError, NumericsError

BLOWUP_LIMIT = 1e6


def quad_weights(grid: GridSpec) -> np.ndarray:
    """Trapezoid weights on the closed grid [0, l]."""
    w = np.full(grid.K + 1, grid.dx)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def extend_field(values: np.ndarray) -> np.ndarray:
    """Append the x = l boundary zero so K-point data matches the closed grid."""
    values = np.asarray(values, dtype=np.float64)
    pad = np.zeros(values.shape[:-1] + (1,))
    return np.concatenate([values, pad], axis=-1)


@dataclass(frozen=True)
class BasisSet:
    """Orthonormal spatial modes sampled on the closed grid."""

    d: int
    kind: str  # "fourier-sine" | "pod"
    values: np.ndarray  # (d, K+1)
    derivatives: np.ndarray  # (d, K+1)
    grid: GridSpec

    def gram(self) -> np.ndarray:
        w = quad_weights(self.grid)
        return (self.values * w) @ self.values.T

    def project(self, field_values: np.ndarray) -> np.ndarray:
        """Expansion coefficients of K-point data rows."""
        w = quad_weights(self.grid)
        return extend_field(field_values) @ (self.values * w).T

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        """Sampled reconstruction on the K data points."""
        return (np.asarray(coeffs) @ self.values)[..., : self.grid.K]


@dataclass(frozen=True)
class GalerkinOperators:
    """Reduced operators: linear (d x d) and quadratic (d x d x d) with viscosity."""

    linear: np.ndarray
    quadratic: np.ndarray
    nu: float

    @property
    def d(self) -> int:
        return self.linear.shape[0]

    def drift(self, y: np.ndarray) -> np.ndarray:
        return self.linear @ y + np.einsum("lmk,l,m->k", self.quadratic, y, y)


@dataclass(frozen=True)
class RomTrajectory:
    """Reduced coefficients over time, with the noise amplitude that produced them."""

    times: np.ndarray
    coefficients: np.ndarray  # (steps+1, d)
    noise_amplitude: np.ndarray | None = None
    seed: int | None = None

    def to_csv(self) -> str:
        d = self.coefficients.shape[1]
        buf = io.StringIO()
        buf.write("t," + ",".join(f"y{i}" for i in range(1, d + 1)) + "\n")
        for t, row in zip(self.times, self.coefficients):
            buf.write(f"{float(t)!r}," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def fourier_sine_basis(d: int, grid: GridSpec) -> BasisSet:
    """sqrt(2/l) sin(k pi x / l) modes with analytic derivatives."""
    if d < 1:
        raise ConfigError("basis dimension must be >= 1")
    if d >= grid.K:
        raise ConfigError(f"basis dimension {d} must be smaller than K={grid.K}")
    x = grid.x_closed
    ks = np.arange(1, d + 1)[:, None]
    amp = np.sqrt(2.0 / grid.l)
    values = amp * np.sin(ks * np.pi * x / grid.l)
    derivatives = amp * (ks * np.pi / grid.l) * np.cos(ks * np.pi * x / grid.l)
    return BasisSet(d=d, kind="fourier-sine", values=values, derivatives=derivatives, grid=grid)


def pod_basis(snapshots: np.ndarray, d: int, grid: GridSpec) -> BasisSet:
    """First d left singular vectors of the mean-retained snapshot matrix.

    Snapshots are rows of K samples; they are extended by the boundary zero
    and orthonormalized under the trapezoid inner product. Derivatives come
    from centered finite differences.
    """
    snaps = extend_field(np.asarray(snapshots, dtype=np.float64))
    if snaps.ndim != 2:
        raise ConfigError("snapshots must be a 2-D array (snapshots x space)")
    u, s, _ = np.linalg.svd(snaps.T, full_matrices=False)
    if d < 1 or d > s.size:
        raise ConfigError(f"cannot extract {d} modes from {s.size} snapshots")
    if s[d - 1] < 1e-12 * s[0]:
        raise ConfigError(
            f"requested {d} modes but numerical rank is lower "
            f"(sigma_{d} = {s[d - 1]:.3e} vs sigma_1 = {s[0]:.3e})"
        )
    modes = u[:, :d].T / np.sqrt(grid.dx)  # unit norm under the quadrature rule
    derivatives = np.gradient(modes, grid.dx, axis=-1)
    return BasisSet(d=d, kind="pod", values=modes, derivatives=derivatives, grid=grid)


def assemble_operators(basis: BasisSet, nu: float) -> GalerkinOperators:
    """Reduced linear and quadratic operators by trapezoid quadrature."""
    if nu < 0:
        raise ConfigError("viscosity must be nonnegative")
    w = quad_weights(basis.grid)
    linear = -nu * (basis.derivatives * w) @ basis.derivatives.T
    quadratic = -np.einsum("lk,mk,nk,k->lmn", basis.values, basis.derivatives, basis.values, w)
    return GalerkinOperators(linear=linear, quadratic=quadratic, nu=nu)


def integrate_rom(ops: GalerkinOperators, y0: np.ndarray, dt: float, steps: int) -> RomTrajectory:
    """Classical RK4 integration of the reduced quadratic ODE."""
    if dt <= 0:
        raise ConfigError("time step must be positive")
    y = np.asarray(y0, dtype=np.float64).copy()
    if not np.all(np.isfinite(y)):
        raise NumericsError("non-finite initial coefficients")
    out = np.zeros((steps + 1, y.size))
    out[0] = y
    for n in range(steps):
        k1 = ops.drift(y)
        k2 = ops.drift(y + 0.5 * dt * k1)
        k3 = ops.drift(y + 0.5 * dt * k2)
        k4 = ops.drift(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if np.linalg.norm(y) > BLOWUP_LIMIT:
            raise NumericsError(f"reduced-order trajectory blew up at step {n + 1}")
        out[n + 1] = y
    times = np.arange(steps + 1) * dt
    return RomTrajectory(times=times, coefficients=out)


def simulate_sde(ops: GalerkinOperators, g, y0: np.ndarray, dt: float, steps: int,
                 seed: int) -> RomTrajectory:
    """Euler-Maruyama path of the reduced dynamics with diagonal additive noise."""
    if dt <= 0:
        raise ConfigError("time step must be positive")
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 0:
        g = np.full(np.asarray(y0).size, float(g))
    if np.any(g < 0):
        raise ConfigError("noise amplitudes must be nonnegative")
    y = np.asarray(y0, dtype=np.float64).copy()
    rng = np.random.default_rng(seed)
    out = np.zeros((steps + 1, y.size))
    out[0] = y
    sqdt = np.sqrt(dt)
    for n in range(steps):
        xi = rng.standard_normal(y.size)
        y = y + dt * ops.drift(y) + sqdt * g * xi
        if np.linalg.norm(y) > BLOWUP_LIMIT:
            raise NumericsError(f"stochastic trajectory blew up at step {n + 1}")
        out[n + 1] = y
    times = np.arange(steps + 1) * dt
    return RomTrajectory(times=times, coefficients=out, noise_amplitude=g, seed=seed)
