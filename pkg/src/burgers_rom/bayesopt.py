"""Gaussian-process Bayesian optimization for the reservoir hyperparameters.

A Matern-5/2 GP with per-dimension length scales is fit to the observed
(log) validation errors on the unit cube; candidates are scored by expected
improvement over 2048 seeded draws and polished with a bounded local search.
The first block of evaluations is a Latin hypercube. Failed evaluations are
kept in the history and imputed at ten times the worst observed error so the
surrogate stays defined.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import ndtr

from .errors import ConfigError, UsageError

JITTER = 1e-6


@dataclass(frozen=True)
class SearchDimension:
    name: str
    low: float
    high: float
    log_scale: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ConfigError(f"dimension {self.name}: min must be below max")
        if self.log_scale and self.low <= 0:
            raise ConfigError(f"dimension {self.name}: log scale needs positive bounds")


@dataclass(frozen=True)
class SearchBox:
    dims: tuple[SearchDimension, ...]

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def to_unit(self, point: dict) -> np.ndarray:
        out = np.zeros(len(self.dims))
        for i, d in enumerate(self.dims):
            v = point[d.name]
            if not (d.low <= v <= d.high):
                raise UsageError(f"{d.name}={v} lies outside [{d.low}, {d.high}]")
            if d.log_scale:
                out[i] = (np.log(v) - np.log(d.low)) / (np.log(d.high) - np.log(d.low))
            else:
                out[i] = (v - d.low) / (d.high - d.low)
        return out

    def from_unit(self, u: np.ndarray) -> dict:
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
        point = {}
        for i, d in enumerate(self.dims):
            if d.log_scale:
                point[d.name] = float(np.exp(np.log(d.low) + u[i] * (np.log(d.high) - np.log(d.low))))
            else:
                point[d.name] = float(d.low + u[i] * (d.high - d.low))
            point[d.name] = min(max(point[d.name], d.low), d.high)
        return point

    def contains(self, point: dict) -> bool:
        return all(d.low <= point[d.name] <= d.high for d in self.dims)


def default_search_box() -> SearchBox:
    """The six-dimensional reservoir box, regularization searched on log scale."""
    return SearchBox(dims=(
        SearchDimension("spectral_radius", 0.3, 1.5),
        SearchDimension("input_scale", 0.3, 1.5),
        SearchDimension("leakage", 0.05, 1.0),
        SearchDimension("regularization", 1e-10, 1.0, log_scale=True),
        SearchDimension("adjacency_density", 0.0, 1.0),
        SearchDimension("input_density", 0.0, 1.0),
    ))


@dataclass
class EvalRecord:
    point: dict
    mse: float
    seed: int
    wall_time: float = 0.0
    failed: bool = False

    def __post_init__(self):
        if not self.failed and not (np.isfinite(self.mse) and self.mse >= 0):
            raise ConfigError("a non-failed record needs a finite nonnegative MSE")


# Gaussian process -----------------------------------------------------------


def _matern52(x1: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray,
              signal_var: float) -> np.ndarray:
    diff = x1[:, None, :] - x2[None, :, :]
    r = np.sqrt(np.maximum(np.sum((diff / lengthscales) ** 2, axis=-1), 0.0))
    sq5r = np.sqrt(5.0) * r
    return signal_var * (1.0 + sq5r + 5.0 * r * r / 3.0) * np.exp(-sq5r)


class GaussianProcess:
    """Zero-mean Matern-5/2 GP on the unit cube with a fixed diagonal jitter."""

    def __init__(self, lengthscales=None, signal_var: float = 1.0, jitter: float = JITTER):
        self.lengthscales = lengthscales
        self.signal_var = signal_var
        self.jitter = jitter
        self._x = None
        self._center = 0.0
        self._scale = 1.0
        self._factor = None
        self._alpha = None

    def _nlml(self, log_params: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        d = x.shape[1]
        ls = np.exp(log_params[:d])
        sv = np.exp(log_params[d])
        k = _matern52(x, x, ls, sv)
        k[np.diag_indices_from(k)] += self.jitter
        try:
            factor = cho_factor(k)
        except np.linalg.LinAlgError:
            return 1e12
        alpha = cho_solve(factor, y)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        return float(0.5 * y @ alpha + 0.5 * logdet + 0.5 * y.size * np.log(2 * np.pi))

    def fit(self, x: np.ndarray, y: np.ndarray, optimize_hyper: bool = True,
            rng: np.random.Generator | None = None) -> "GaussianProcess":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self._center = float(y.mean())
        self._scale = float(y.std()) or 1.0
        yc = (y - self._center) / self._scale
        d = x.shape[1]
        if optimize_hyper:
            rng = rng or np.random.default_rng(0)
            starts = [np.zeros(d + 1)]
            for _ in range(2):
                starts.append(np.concatenate([
                    rng.uniform(np.log(0.1), np.log(2.0), size=d),
                    rng.uniform(np.log(0.5), np.log(2.0), size=1),
                ]))
            bounds = [(np.log(0.03), np.log(30.0))] * d + [(np.log(1e-3), np.log(1e3))]
            best = None
            for s in starts:
                res = minimize(self._nlml, s, args=(x, yc), method="L-BFGS-B", bounds=bounds)
                if best is None or res.fun < best.fun:
                    best = res
            self.lengthscales = np.exp(best.x[:d])
            self.signal_var = float(np.exp(best.x[d]))
        elif self.lengthscales is None:
            self.lengthscales = np.ones(d)
        k = _matern52(x, x, self.lengthscales, self.signal_var)
        k[np.diag_indices_from(k)] += self.jitter
        self._factor = cho_factor(k)
        self._alpha = cho_solve(self._factor, yc)
        self._x = x
        return self

    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        ks = _matern52(xs, self._x, self.lengthscales, self.signal_var)
        mean = ks @ self._alpha
        v = cho_solve(self._factor, ks.T)
        var = np.maximum(self.signal_var + self.jitter - np.sum(ks * v.T, axis=1), 1e-15)
        return mean * self._scale + self._center, var * self._scale**2


def expected_improvement(mean: np.ndarray, var: np.ndarray, best: float) -> np.ndarray:
    """EI for minimization; nonnegative by construction."""
    sd = np.sqrt(var)
    z = (best - mean) / sd
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    return np.maximum((best - mean) * ndtr(z) + sd * pdf, 0.0)


def latin_hypercube(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """n stratified points in the unit cube."""
    u = np.zeros((n, d))
    for j in range(d):
        strata = (np.arange(n) + rng.random(n)) / n
        u[:, j] = rng.permutation(strata)
    return u


def _surrogate_data(history, box: SearchBox):
    """Unit-cube inputs and log-MSE targets, with failures imputed."""
    ok = [r.mse for r in history if not r.failed]
    if not ok:
        return None, None
    impute = max(ok) * 10.0 if max(ok) > 0 else 1.0
    x = np.stack([box.to_unit(r.point) for r in history])
    y = np.array([np.log(max(r.mse, 1e-300)) if not r.failed else np.log(impute)
                  for r in history])
    return x, y


def propose_next(history, box: SearchBox, rng: np.random.Generator,
                 n_seed_points: int = 10, n_candidates: int = 2048) -> dict:
    """Next point to evaluate: random while seeding, then EI on the GP surrogate."""
    history = list(history)
    x, y = _surrogate_data(history, box)
    if len(history) < n_seed_points or x is None:
        # seeding phase (the stratified block is owned by optimize); a plain
        # uniform draw keeps the standalone call usable and inside the box
        return box.from_unit(rng.random(len(box.dims)))
    gp = GaussianProcess().fit(x, y, rng=rng)
    best = float(y.min())
    cands = rng.random((n_candidates, len(box.dims)))
    mean, var = gp.predict(cands)
    ei = expected_improvement(mean, var, best)
    start = cands[int(np.argmax(ei))]

    def neg_ei(u):
        m, v = gp.predict(u[None])
        return -float(expected_improvement(m, v, best)[0])

    res = minimize(neg_ei, start, method="L-BFGS-B",
                   bounds=[(0.0, 1.0)] * len(box.dims))
    u = res.x if res.fun <= neg_ei(start) else start
    return box.from_unit(u)


def optimize(objective, box: SearchBox, budget: int = 100, seed: int = 0,
             n_seed_points: int = 10) -> tuple[EvalRecord, list[EvalRecord]]:
    """Run the full loop: seeded Latin hypercube, then GP/EI proposals.

    The objective is evaluated exactly ``budget`` times; exceptions mark the
    record failed and the loop continues. Fully reproducible for a fixed seed
    and deterministic objective.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    d = len(box.dims)
    lhs = latin_hypercube(rng, min(n_seed_points, budget), d)
    history: list[EvalRecord] = []
    for k in range(budget):
        if k < lhs.shape[0]:
            point = box.from_unit(lhs[k])
        else:
            point = propose_next(history, box, rng, n_seed_points=n_seed_points)
        t0 = time.perf_counter()
        try:
            mse = float(objective(point))
            if not np.isfinite(mse):
                raise ValueError(f"objective returned {mse}")
            record = EvalRecord(point=point, mse=mse, seed=seed,
                                wall_time=time.perf_counter() - t0)
        except Exception:
            record = EvalRecord(point=point, mse=float("nan"), seed=seed,
                                wall_time=time.perf_counter() - t0, failed=True)
        history.append(record)
    usable = [r for r in history if not r.failed]
    if not usable:
        return history[0], history
    best = min(usable, key=lambda r: r.mse)
    return best, history


def history_to_csv(history, box: SearchBox) -> str:
    buf = io.StringIO()
    buf.write("iteration," + ",".join(box.names) + ",mse,seed\n")
    for i, r in enumerate(history):
        vals = ",".join(repr(r.point[n]) for n in box.names)
        mse = "nan" if r.failed else repr(r.mse)
        buf.write(f"{i},{vals},{mse},{r.seed}\n")
    return buf.getvalue()
