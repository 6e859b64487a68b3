"""Viscous Burgers problem: exact solution, finite-difference oracle, datasets.

The exact solution of u_t + u u_x = nu u_xx with the self-similar initial
profile is evaluated in log space so large Reynolds numbers cannot overflow.
The finite-difference path is an independent check: conservative Godunov
flux with minmod-limited reconstruction for advection, Crank-Nicolson for
diffusion, on a refined grid that extends past x = l so the hard Dirichlet
wall does not contaminate the comparison region at low Reynolds numbers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConfigError, FormatError, NumericsError, UsageError

# Training and test parameter grids. The test grid stops below 2450 so that
# it holds exactly 12 values, none shared with the training grid.
TRAIN_RE = tuple(range(100, 2001, 100))
TEST_RE = tuple(range(50, 2450, 200))

_EXP_CUTOFF = 700.0  # exponents beyond this would overflow exp(); u is 0 there


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time sampling grid.

    Space is sampled at x_k = k * (l/K) for k = 0..K-1, which places the left
    boundary on the grid and stops one cell short of x = l. Time is sampled
    at t_j = j * (t_max/T) for j = 1..T, keeping the final time and dropping
    t = 0.
    """

    l: float = 1.0
    K: int = 128
    t_max: float = 2.0
    T: int = 100

    def __post_init__(self):
        if self.l <= 0 or self.t_max <= 0:
            raise ConfigError("domain length and final time must be positive")
        if self.K < 2 or self.T < 2:
            raise ConfigError("grid extents must be at least 2")

    @property
    def dx(self) -> float:
        return self.l / self.K

    @property
    def dt(self) -> float:
        return self.t_max / self.T

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.K) * self.dx

    @property
    def x_closed(self) -> np.ndarray:
        """The K+1 points including x = l, used by quadrature rules."""
        return np.arange(self.K + 1) * self.dx

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.T + 1) * self.dt


@dataclass(frozen=True)
class SolutionField:
    """Velocity samples u(x_k, t_j) for one Reynolds number."""

    reynolds: float
    grid: GridSpec
    values: np.ndarray  # (T, K)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.T, self.grid.K):
            raise ConfigError(
                f"field shape {v.shape} does not match grid ({self.grid.T}, {self.grid.K})"
            )
        if not np.all(np.isfinite(v)):
            raise NumericsError("non-finite values in solution field")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ParametricDataset:
    """Stack of solution fields over increasing Reynolds numbers."""

    fields: tuple[SolutionField, ...]
    role: str = "unspecified"

    def __post_init__(self):
        if not self.fields:
            raise ConfigError("dataset needs at least one field")
        grid = self.fields[0].grid
        if any(f.grid != grid for f in self.fields):
            raise ConfigError("all fields must share one grid")
        res = [f.reynolds for f in self.fields]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ConfigError("Reynolds numbers must be strictly increasing and unique")
        object.__setattr__(self, "fields", tuple(self.fields))

    @property
    def grid(self) -> GridSpec:
        return self.fields[0].grid

    @property
    def reynolds(self) -> np.ndarray:
        return np.array([f.reynolds for f in self.fields])

    def values(self) -> np.ndarray:
        """The M x T x K data cube."""
        return np.stack([f.values for f in self.fields])

    def __eq__(self, other):
        # role is carried in memory only (the file format has no role field),
        # so equality is over the numeric content
        if not isinstance(other, ParametricDataset):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.reynolds, other.reynolds)
            and all(np.array_equal(a.values, b.values) for a, b in zip(self.fields, other.fields))
        )

    __hash__ = None


def analytic_u(x, t: float, re: float):
    """Exact solution; accepts a scalar or array of positions.

    The denominator term sqrt((t+1)/t0) * exp(Re x^2 / (4t+4)) is evaluated
    through its logarithm; when that exceeds the float64 exponent range the
    value is 0 to machine precision and is returned directly.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    scalar = x_arr.ndim == 0
    x_arr = np.atleast_1d(x_arr)
    if re <= 0:
        raise UsageError("Reynolds number must be positive")
    if t < 0:
        raise UsageError("time must be nonnegative")
    if np.any(x_arr < 0):
        raise UsageError("position must be nonnegative")
    # log of sqrt((t+1)/t0) * exp(Re x^2/(4t+4)) with t0 = exp(Re/8)
    log_term = 0.5 * np.log(t + 1.0) - re / 16.0 + re * x_arr * x_arr / (4.0 * t + 4.0)
    out = np.zeros_like(x_arr)
    ok = log_term <= _EXP_CUTOFF
    out[ok] = (x_arr[ok] / (t + 1.0)) / (1.0 + np.exp(log_term[ok]))
    return float(out[0]) if scalar else out


def initial_condition(x, re: float):
    """The t = 0 profile of the exact solution."""
    return analytic_u(x, 0.0, re)


def analytic_field(re: float, grid: GridSpec) -> SolutionField:
    values = np.stack([analytic_u(grid.x, t, re) for t in grid.times])
    return SolutionField(reynolds=re, grid=grid, values=values)


def _godunov_flux(ul: np.ndarray, ur: np.ndarray) -> np.ndarray:
    # exact Riemann flux for f(u) = u^2/2
    fl = 0.5 * ul * ul
    fr = 0.5 * ur * ur
    flux = np.where(ul > ur, np.maximum(fl, fr), np.minimum(fl, fr))
    return np.where((ul <= 0.0) & (0.0 <= ur), 0.0, flux)


def _minmod_faces(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # limited left/right interface states for second-order upwinding
    slope = np.zeros_like(u)
    du = np.diff(u)
    s = np.sign(du[:-1])
    slope[1:-1] = s * np.maximum(0.0, np.minimum(np.abs(du[:-1]), s * du[1:]))
    return (u + 0.5 * slope)[:-1], (u - 0.5 * slope)[1:]


def fd_solve(re: float, grid: GridSpec, refine: int = 8, initial=None,
             extend: float = 1.6, cfl_target: float = 0.4) -> SolutionField:
    """Finite-difference solution subsampled onto ``grid``.

    Advection uses a conservative flux-form upwind scheme (Godunov flux on
    minmod-limited states); diffusion is Crank-Nicolson. Space is refined
    ``refine`` times; the number of substeps per output interval is raised
    beyond ``refine`` whenever the advective CFL limit demands it. The
    computational domain runs to ``extend * l`` with zero Dirichlet ends,
    keeping the outflow wall away from the sampled region.
    """
    if refine < 1:
        raise ConfigError("refine must be >= 1")
    if extend < 1.0:
        raise ConfigError("extend must be >= 1")
    nu = 1.0 / re
    dxf = grid.l / (grid.K * refine)
    n = int(round(grid.K * refine * extend))
    xf = np.arange(n + 1) * dxf
    ic = initial if initial is not None else (lambda xs: initial_condition(xs, re))
    u = np.asarray(ic(xf), dtype=np.float64).copy()
    u[0] = 0.0
    u[-1] = 0.0
    umax0 = float(np.abs(u).max())
    nsub = refine
    if umax0 > 0.0:
        nsub = max(refine, int(np.ceil(grid.dt * umax0 / (cfl_target * dxf))))
    dtf = grid.dt / nsub
    mu = nu * dtf / dxf**2

    m = n - 1
    ab = np.zeros((3, m))
    ab[0, 1:] = -0.5 * mu
    ab[1, :] = 1.0 + mu
    ab[2, :-1] = -0.5 * mu

    guard = 10.0 * umax0 if umax0 > 0 else 1.0
    out = np.zeros((grid.T, grid.K))
    for j in range(grid.T):
        for _ in range(nsub):
            ul, ur = _minmod_faces(u)
            flux = _godunov_flux(ul, ur)
            rhs = (
                u[1:-1]
                - dtf * (flux[1:] - flux[:-1]) / dxf
                + 0.5 * mu * (u[2:] - 2.0 * u[1:-1] + u[:-2])
            )
            u[1:-1] = solve_banded((1, 1), ab, rhs)
            u[0] = 0.0
            u[-1] = 0.0
            if np.abs(u).max() > guard:
                raise NumericsError(
                    f"finite-difference instability at output step {j + 1}: "
                    f"max |u| exceeded {guard:.3g}"
                )
        out[j] = u[: grid.K * refine : refine][: grid.K]
    return SolutionField(reynolds=re, grid=grid, values=out)


def build_dataset(re_values, grid: GridSpec, role: str = "unspecified") -> ParametricDataset:
    """Exact-solution dataset over a sorted list of Reynolds numbers."""
    re_values = list(re_values)
    if not re_values:
        raise ConfigError("re_values must be nonempty")
    if any(r <= 0 for r in re_values):
        raise ConfigError("Reynolds numbers must be positive")
    if any(b <= a for a, b in zip(re_values, re_values[1:])):
        if len(set(re_values)) != len(re_values):
            raise ConfigError("duplicate Reynolds numbers")
        raise ConfigError("Reynolds numbers must be sorted ascending")
    fields = tuple(analytic_field(float(r), grid) for r in re_values)
    return ParametricDataset(fields=fields, role=role)


def train_dataset(grid: GridSpec | None = None) -> ParametricDataset:
    return build_dataset(TRAIN_RE, grid or GridSpec(), role="train")


def test_dataset(grid: GridSpec | None = None) -> ParametricDataset:
    return build_dataset(TEST_RE, grid or GridSpec(), role="test")


# file format ---------------------------------------------------------------

_MAGIC = b"BROM"
_VERSION = 1


def write_dataset(ds: ParametricDataset) -> bytes:
    grid = ds.grid
    m = len(ds.fields)
    head = _MAGIC + struct.pack("<IIII", _VERSION, m, grid.K, grid.T)
    head += struct.pack("<dd", grid.l, grid.t_max)
    body = [
        ds.reynolds.astype("<f8").tobytes(),
        grid.x.astype("<f8").tobytes(),
        grid.times.astype("<f8").tobytes(),
        np.ascontiguousarray(ds.values(), dtype="<f8").tobytes(),  # m -> t -> k
    ]
    return head + b"".join(body)


def read_dataset(blob: bytes) -> ParametricDataset:
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad dataset magic {blob[:4]!r}, expected {_MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated dataset payload")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, m, k, t = struct.unpack("<IIII", take(16))
    if version != _VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    l, t_max = struct.unpack("<dd", take(16))
    grid = GridSpec(l=l, K=k, t_max=t_max, T=t)
    reynolds = np.frombuffer(take(8 * m), dtype="<f8")
    x = np.frombuffer(take(8 * k), dtype="<f8")
    times = np.frombuffer(take(8 * t), dtype="<f8")
    if not (np.array_equal(x, grid.x) and np.array_equal(times, grid.times)):
        raise FormatError("stored coordinates do not match the uniform grid convention")
    data = np.frombuffer(take(8 * m * t * k), dtype="<f8").reshape(m, t, k)
    if pos != len(blob):
        raise FormatError("trailing bytes after dataset payload")
    fields = tuple(
        SolutionField(reynolds=float(r), grid=grid, values=data[i].copy())
        for i, r in enumerate(reynolds)
    )
    return ParametricDataset(fields=fields)


def save_dataset(path, ds: ParametricDataset) -> None:
    Path(path).write_bytes(write_dataset(ds))


def load_dataset(path, role: str = "unspecified") -> ParametricDataset:
    ds = read_dataset(Path(path).read_bytes())
    return replace(ds, role=role) if role != "unspecified" else ds
