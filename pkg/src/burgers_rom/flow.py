"""Spline-flow density model of the reservoir's single-step latent error.

Two autoregressive rational-quadratic spline transforms with opposite
variable orderings are composed over a standard-normal base. Each transform
gives its first coordinate a free parameter vector and produces the second
coordinate's spline parameters with a small fully connected conditioner
(two hidden layers of 8). Outside the tail bound every map is the identity.
Errors are standardized per dimension before entering the spline box; the
model stores the affine and undoes it when sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_params, write_params
from .errors import ConfigError, NumericsError, UsageError
from .optim import AdamState

MIN_BIN_FRACTION = 1e-4
MIN_DERIVATIVE = 1e-4
# softplus(raw + shift) + MIN_DERIVATIVE equals 1 at raw = 0, so zeroed
# conditioner outputs give an identity spline
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FlowConfig:
    bins: int = 8
    bound: float = 3.0
    hidden: int = 8
    learning_rate: float = 0.005
    iterations: int = 500

    def __post_init__(self):
        if self.bins < 2 or self.hidden < 1 or self.iterations < 1:
            raise ConfigError("flow configuration values out of range")
        if self.bound <= 0:
            raise ConfigError("tail bound must be positive")

    @property
    def param_count(self) -> int:
        return 3 * self.bins + 1


@dataclass(frozen=True)
class RqSplineParams:
    """Concrete strictly-positive spline quantities for one coordinate."""

    widths: np.ndarray  # (B,), sums to 2*bound
    heights: np.ndarray  # (B,), sums to 2*bound
    derivatives: np.ndarray  # (B+1,), positive
    bound: float

    def __post_init__(self):
        w = np.asarray(self.widths, dtype=np.float64)
        h = np.asarray(self.heights, dtype=np.float64)
        d = np.asarray(self.derivatives, dtype=np.float64)
        if w.shape != h.shape or d.shape != (w.shape[-1] + 1,):
            raise ConfigError("inconsistent spline parameter shapes")
        if np.any(w <= 0) or np.any(h <= 0) or np.any(d <= 0):
            raise ConfigError("spline widths, heights, and derivatives must be positive")
        span = 2.0 * self.bound
        if abs(w.sum() - span) > 1e-8 * span or abs(h.sum() - span) > 1e-8 * span:
            raise ConfigError("spline widths and heights must each sum to 2*bound")


def identity_spline_params(bins: int = 8, bound: float = 3.0) -> RqSplineParams:
    """Uniform bins with unit derivatives: the identity map."""
    w = np.full(bins, 2.0 * bound / bins)
    return RqSplineParams(widths=w, heights=w.copy(),
                          derivatives=np.ones(bins + 1), bound=bound)


# numpy spline core ----------------------------------------------------------


def _prep(params_or_arrays, x_len):
    """Normalize (widths, heights, derivs) to per-row (n, ...) arrays."""
    w, h, d = params_or_arrays
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    if w.shape[0] == 1:
        w = np.broadcast_to(w, (x_len, w.shape[1]))
        h = np.broadcast_to(h, (x_len, h.shape[1]))
        d = np.broadcast_to(d, (x_len, d.shape[1]))
    return w, h, d


def _knots(widths: np.ndarray, bound: float) -> np.ndarray:
    k = np.concatenate([np.zeros((widths.shape[0], 1)), np.cumsum(widths, axis=1)], axis=1)
    return k - bound


def _bin_index(points: np.ndarray, knots: np.ndarray) -> np.ndarray:
    idx = (points[:, None] >= knots[:, :-1]).sum(axis=1) - 1
    return np.clip(idx, 0, knots.shape[1] - 2)


def _gather(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(a, idx[:, None], axis=1)[:, 0]


def _spline_forward_np(x, widths, heights, derivs, bound):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    w, h, d = _prep((widths, heights, derivs), x.size)
    inside = np.abs(x) <= bound
    xc = np.clip(x, -bound, bound)
    kx = _knots(w, bound)
    ky = _knots(h, bound)
    idx = _bin_index(xc, kx)
    xk, wk = _gather(kx, idx), _gather(w, idx)
    yk, hk = _gather(ky, idx), _gather(h, idx)
    dk, dk1 = _gather(d, idx), _gather(d, idx + 1)
    s = hk / wk
    xi = (xc - xk) / wk
    ximix = xi * (1.0 - xi)
    denom = s + (dk1 + dk - 2.0 * s) * ximix
    y_in = yk + hk * (s * xi * xi + dk * ximix) / denom
    dy = s * s * (dk1 * xi * xi + 2.0 * s * ximix + dk * (1.0 - xi) ** 2) / (denom * denom)
    y = np.where(inside, y_in, x)
    logdet = np.where(inside, np.log(dy), 0.0)
    return y, logdet


def _spline_inverse_np(y, widths, heights, derivs, bound):
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    w, h, d = _prep((widths, heights, derivs), y.size)
    inside = np.abs(y) <= bound
    yc = np.clip(y, -bound, bound)
    kx = _knots(w, bound)
    ky = _knots(h, bound)
    idx = _bin_index(yc, ky)
    xk, wk = _gather(kx, idx), _gather(w, idx)
    yk, hk = _gather(ky, idx), _gather(h, idx)
    dk, dk1 = _gather(d, idx), _gather(d, idx + 1)
    s = hk / wk
    dy_rel = yc - yk
    sigma = dk1 + dk - 2.0 * s
    a = hk * (s - dk) + dy_rel * sigma
    b = hk * dk - dy_rel * sigma
    c = -s * dy_rel
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    xi = np.where(dy_rel == 0.0, 0.0, 2.0 * c / (-b - disc))
    xi = np.clip(xi, 0.0, 1.0)
    x_in = xk + wk * xi
    ximix = xi * (1.0 - xi)
    denom = s + sigma * ximix
    dy = s * s * (dk1 * xi * xi + 2.0 * s * ximix + dk * (1.0 - xi) ** 2) / (denom * denom)
    x = np.where(inside, x_in, y)
    logdet = np.where(inside, -np.log(dy), 0.0)
    return x, logdet


def rq_spline_forward(x, params: RqSplineParams):
    """Monotone spline map and its log-derivative; identity outside the bound."""
    y, ld = _spline_forward_np(x, params.widths, params.heights,
                               params.derivatives, params.bound)
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return float(y[0]), float(ld[0])
    return y, ld


def rq_spline_inverse(y, params: RqSplineParams):
    """Inverse of the forward map; log-determinants negate."""
    x, ld = _spline_inverse_np(y, params.widths, params.heights,
                               params.derivatives, params.bound)
    if np.isscalar(y) or np.asarray(y).ndim == 0:
        return float(x[0]), float(ld[0])
    return x, ld


# raw-parameter decoding -----------------------------------------------------


def _raw_to_arrays_np(raw: np.ndarray, bins: int, bound: float):
    """Mirror of the differentiable decoding, for the sampling path."""
    raw = np.atleast_2d(raw)
    rw, rh, rd = raw[:, :bins], raw[:, bins : 2 * bins], raw[:, 2 * bins :]

    def smax(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    widths = 2.0 * bound * (MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * bins) * smax(rw))
    heights = 2.0 * bound * (MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * bins) * smax(rh))
    derivs = MIN_DERIVATIVE + np.logaddexp(0.0, rd + _DERIV_SHIFT)
    return widths, heights, derivs


def _raw_to_tensors(raw_t: Tensor, bins: int, bound: float):
    rw = ad.slice_cols(raw_t, 0, bins)
    rh = ad.slice_cols(raw_t, bins, 2 * bins)
    rd = ad.slice_cols(raw_t, 2 * bins, 3 * bins + 1)
    scale = 2.0 * bound * (1.0 - MIN_BIN_FRACTION * bins)
    widths = ad.add(ad.mul(ad.softmax(rw), scale), 2.0 * bound * MIN_BIN_FRACTION)
    heights = ad.add(ad.mul(ad.softmax(rh), scale), 2.0 * bound * MIN_BIN_FRACTION)
    derivs = ad.add(ad.softplus(ad.add(rd, _DERIV_SHIFT)), MIN_DERIVATIVE)
    return widths, heights, derivs


def _spline_forward_t(x_t: Tensor, raw_t: Tensor, bins: int, bound: float):
    """Differentiable spline pass: gradients flow to the input and raw params."""
    n = x_t.data.shape[0]
    widths, heights, derivs = _raw_to_tensors(raw_t, bins, bound)
    neg = Tensor(np.full((n, 1), -bound))
    kx = ad.concat([neg, ad.add(ad.cumsum(widths, axis=-1), -bound)], axis=-1)
    ky = ad.concat([neg, ad.add(ad.cumsum(heights, axis=-1), -bound)], axis=-1)

    inside = (np.abs(x_t.data) <= bound).astype(np.float64)
    idx = _bin_index(np.clip(x_t.data, -bound, bound), kx.data)

    xc = ad.clip_box(x_t, -bound, bound)
    xk = ad.gather_rows(kx, idx)
    wk = ad.gather_rows(widths, idx)
    yk = ad.gather_rows(ky, idx)
    hk = ad.gather_rows(heights, idx)
    dk = ad.gather_rows(derivs, idx)
    dk1 = ad.gather_rows(derivs, idx + 1)

    s = ad.div(hk, wk)
    xi = ad.div(ad.sub(xc, xk), wk)
    one_m = ad.sub(1.0, xi)
    ximix = ad.mul(xi, one_m)
    sigma = ad.sub(ad.add(dk1, dk), ad.mul(2.0, s))
    denom = ad.add(s, ad.mul(sigma, ximix))
    y_in = ad.add(yk, ad.div(ad.mul(hk, ad.add(ad.mul(s, ad.square(xi)), ad.mul(dk, ximix))), denom))
    num = ad.add(ad.add(ad.mul(dk1, ad.square(xi)), ad.mul(ad.mul(2.0, s), ximix)),
                 ad.mul(dk, ad.square(one_m)))
    ld_in = ad.sub(ad.add(ad.mul(2.0, ad.log(s)), ad.log(num)), ad.mul(2.0, ad.log(denom)))

    mask = Tensor(inside)
    inv_mask = Tensor(1.0 - inside)
    y = ad.add(ad.mul(mask, y_in), ad.mul(inv_mask, x_t))
    logdet = ad.mul(mask, ld_in)
    return y, logdet


# autoregressive transform ---------------------------------------------------


class _ArTransform:
    """One masked-ordering spline transform over two coordinates.

    The leading coordinate (order[0]) uses a free parameter vector; the
    trailing coordinate's parameters come from the conditioner applied to
    the leading coordinate's input value.
    """

    def __init__(self, order: tuple[int, int], config: FlowConfig, rng: np.random.Generator,
                 tag: str):
        self.order = order
        self.config = config
        self.tag = tag
        npar = config.param_count
        h = config.hidden
        self.free = Tensor(np.zeros(npar), requires_grad=True, name=f"{tag}.free")
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(2.0), size=(1, h)),
                         requires_grad=True, name=f"{tag}.w1")
        self.b1 = Tensor(np.zeros(h), requires_grad=True, name=f"{tag}.b1")
        self.w2 = Tensor(rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h)),
                         requires_grad=True, name=f"{tag}.w2")
        self.b2 = Tensor(np.zeros(h), requires_grad=True, name=f"{tag}.b2")
        # zero output layer: the flow starts as the identity map
        self.w3 = Tensor(np.zeros((h, npar)), requires_grad=True, name=f"{tag}.w3")
        self.b3 = Tensor(np.zeros(npar), requires_grad=True, name=f"{tag}.b3")

    def params(self) -> list[Tensor]:
        return [self.free, self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def _conditioner_t(self, lead: Tensor) -> Tensor:
        h = ad.relu(ad.dense(ad.reshape(lead, (lead.data.shape[0], 1)), self.w1, self.b1))
        h = ad.relu(ad.dense(h, self.w2, self.b2))
        return ad.dense(h, self.w3, self.b3)

    def _conditioner_np(self, lead: np.ndarray) -> np.ndarray:
        h = np.maximum(lead[:, None] @ self.w1.data + self.b1.data, 0.0)
        h = np.maximum(h @ self.w2.data + self.b2.data, 0.0)
        return h @ self.w3.data + self.b3.data

    def normalize_t(self, cols: list[Tensor]):
        """Data-to-base direction on column tensors; returns (cols, logdet)."""
        i0, i1 = self.order
        n = cols[0].data.shape[0]
        cfg = self.config
        free_row = ad.matmul(Tensor(np.ones((n, 1))), ad.reshape(self.free, (1, -1)))
        z0, ld0 = _spline_forward_t(cols[i0], free_row, cfg.bins, cfg.bound)
        raw1 = self._conditioner_t(cols[i0])
        z1, ld1 = _spline_forward_t(cols[i1], raw1, cfg.bins, cfg.bound)
        out = [None, None]
        out[i0], out[i1] = z0, z1
        return out, ad.add(ld0, ld1)

    def invert_np(self, z: np.ndarray) -> np.ndarray:
        """Base-to-data direction (sampling); no gradients needed."""
        i0, i1 = self.order
        cfg = self.config
        w0, h0, d0 = _raw_to_arrays_np(self.free.data[None, :], cfg.bins, cfg.bound)
        x0, _ = _spline_inverse_np(z[:, i0], w0, h0, d0, cfg.bound)
        raw1 = self._conditioner_np(x0)
        w1, h1, d1 = _raw_to_arrays_np(raw1, cfg.bins, cfg.bound)
        x1, _ = _spline_inverse_np(z[:, i1], w1, h1, d1, cfg.bound)
        out = np.empty_like(z)
        out[:, i0], out[:, i1] = x0, x1
        return out


class FlowModel:
    """Two composed spline transforms plus the standardization affine."""

    def __init__(self, transforms: list[_ArTransform], mean: np.ndarray, std: np.ndarray,
                 config: FlowConfig, loss_history: list | None = None):
        self.transforms = transforms
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.config = config
        self.loss_history = loss_history or []

    @property
    def dim(self) -> int:
        return self.mean.size

    def params(self) -> list[Tensor]:
        out = []
        for t in self.transforms:
            out.extend(t.params())
        return out

    def _log_prob_std_t(self, cols: list[Tensor]) -> Tensor:
        """Log density in the standardized space, as a (n,) tensor."""
        total_ld = None
        for t in self.transforms:
            cols, ld = t.normalize_t(cols)
            total_ld = ld if total_ld is None else ad.add(total_ld, ld)
        base = None
        for c in cols:
            term = ad.mul(ad.square(c), -0.5)
            base = term if base is None else ad.add(base, term)
        base = ad.add(base, -0.5 * _LOG_2PI * len(cols))
        return ad.add(base, total_ld)

    def transform_std(self, std_eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Standardized data to base-space points, with the total log-det."""
        std_eps = np.atleast_2d(np.asarray(std_eps, dtype=np.float64))
        cols = [Tensor(std_eps[:, i]) for i in range(self.dim)]
        total = None
        for t in self.transforms:
            cols, ld = t.normalize_t(cols)
            total = ld if total is None else ad.add(total, ld)
        z = np.stack([c.data for c in cols], axis=1)
        return z, total.data

    def log_prob(self, eps) -> np.ndarray | float:
        eps = np.asarray(eps, dtype=np.float64)
        single = eps.ndim == 1
        e = np.atleast_2d(eps)
        if e.shape[1] != self.dim:
            raise UsageError(f"expected {self.dim}-dimensional errors")
        std = (e - self.mean) / self.std
        cols = [Tensor(std[:, i]) for i in range(self.dim)]
        lp = self._log_prob_std_t(cols).data - np.log(self.std).sum()
        return float(lp[0]) if single else lp

    def sample_with(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n errors using the caller's generator stream."""
        if n < 0:
            raise UsageError("sample count must be nonnegative")
        z = rng.standard_normal((n, self.dim))
        for t in reversed(self.transforms):
            z = t.invert_np(z)
        return z * self.std + self.mean

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        return self.sample_with(np.random.default_rng(seed), n)

    # persistence -----------------------------------------------------------

    def to_checkpoint(self) -> bytes:
        params = {p.name: p.data for t in self.transforms for p in t.params()}
        params["standardize.mean"] = self.mean
        params["standardize.std"] = self.std
        params["meta"] = np.array([
            float(self.config.bins), self.config.bound, float(self.config.hidden),
            self.config.learning_rate, float(self.config.iterations),
        ])
        return write_params(params)

    @classmethod
    def from_checkpoint(cls, blob: bytes) -> "FlowModel":
        raw = read_params(blob)
        meta = raw["meta"]
        config = FlowConfig(bins=int(meta[0]), bound=float(meta[1]), hidden=int(meta[2]),
                            learning_rate=float(meta[3]), iterations=int(meta[4]))
        rng = np.random.default_rng(0)
        transforms = [_ArTransform((0, 1), config, rng, "t0"),
                      _ArTransform((1, 0), config, rng, "t1")]
        model = cls(transforms, raw["standardize.mean"], raw["standardize.std"], config)
        for p in model.params():
            if p.name not in raw:
                raise ConfigError(f"flow checkpoint is missing parameter {p.name}")
            if raw[p.name].shape != p.data.shape:
                raise ConfigError(f"flow checkpoint parameter {p.name} has the wrong shape")
            p.data = raw[p.name].copy()
        return model


def flow_log_prob(model: FlowModel, eps):
    return model.log_prob(eps)


def flow_sample(model: FlowModel, n: int, seed: int = 0) -> np.ndarray:
    return model.sample(n, seed)


def initialize_flow(dim: int, config: FlowConfig, seed: int,
                    mean=None, std=None) -> FlowModel:
    """Identity-initialized flow over a standard-normal base."""
    if dim != 2:
        raise ConfigError("the autoregressive flow is built for 2-D errors")
    rng = np.random.default_rng(seed)
    transforms = [_ArTransform((0, 1), config, rng, "t0"),
                  _ArTransform((1, 0), config, rng, "t1")]
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
    std = np.ones(dim) if std is None else np.asarray(std, dtype=np.float64)
    return FlowModel(transforms, mean, std, config)


def train_flow(errors: np.ndarray, config: FlowConfig | None = None,
               seed: int = 0) -> FlowModel:
    """Maximum-likelihood fit with full-batch Adam; returns the final model.

    Degenerate inputs (a dimension with zero spread) are handled by flooring
    the standardization scale, which trains toward a sharply peaked density
    instead of crashing.
    """
    config = config or FlowConfig()
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or errors.shape[1] != 2:
        raise ConfigError("errors must be an (n, 2) array")
    if errors.shape[0] < 10:
        raise ConfigError("need at least 10 error samples to fit the flow")
    mean = errors.mean(axis=0)
    std = np.maximum(errors.std(axis=0), 1e-12)
    model = initialize_flow(2, config, seed, mean=mean, std=std)
    params = model.params()
    opt = AdamState(params, lr=config.learning_rate)
    std_errors = (errors - mean) / std
    cols = [Tensor(std_errors[:, i]) for i in range(2)]
    for it in range(config.iterations):
        try:
            nll = ad.mul(ad.mean_(model._log_prob_std_t(cols)), -1.0)
            grads = ad.backward(nll, params=params)
            opt.step(grads)
        except NumericsError as err:
            raise NumericsError(f"flow training failed at iteration {it}: {err}") from err
        model.loss_history.append(nll.item())
    return model
