"""Convolutional autoencoder: 128-point snapshots to a 2-D latent space and back.

The reference stack keeps every stated constraint: width-3 filters with zero
padding, max pooling that halves each stage, ReLU everywhere except the two
bottleneck-facing output layers, and a latent width of exactly 2. Training
is plain mean-squared reconstruction with Adam, a random held-out split, and
early stopping on validation error.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_params, write_params
from .errors import ConfigError, NumericsError, UsageError


@dataclass(frozen=True)
class Conv:
    out_channels: int
    width: int = 3
    stride: int = 1
    activation: str = "relu"  # "relu" | "linear"


@dataclass(frozen=True)
class Pool:
    window: int = 2


@dataclass(frozen=True)
class Upsample:
    factor: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Reshape:
    channels: int
    length: int


@dataclass(frozen=True)
class Dense:
    out_features: int
    activation: str = "linear"


@dataclass(frozen=True)
class CaeArchitecture:
    """Encoder and decoder stacks plus the latent width."""

    encoder: tuple = ()
    decoder: tuple = ()
    input_size: int = 128
    latent_dim: int = 2

    def __post_init__(self):
        enc_out = _propagate(self.encoder, (1, self.input_size))
        if enc_out != (self.latent_dim,):
            raise ConfigError(f"encoder produces {enc_out}, expected ({self.latent_dim},)")
        dec_out = _propagate(self.decoder, (self.latent_dim,))
        if dec_out != (1, self.input_size):
            raise ConfigError(f"decoder produces {dec_out}, expected (1, {self.input_size})")
        for layer in self.encoder + self.decoder:
            if isinstance(layer, Conv) and layer.width != 3:
                raise ConfigError("all convolution filters must have width 3")


def _propagate(layers, shape):
    """Shape-check a stack; shape is (channels, length) or (features,)."""
    for layer in layers:
        if isinstance(layer, Conv):
            if len(shape) != 2:
                raise ConfigError("conv layer needs a (channels, length) input")
            c, k = shape
            pad = (layer.width - 1) // 2
            span = k + 2 * pad - layer.width
            if span < 0 or span % layer.stride:
                raise ConfigError("conv geometry does not divide evenly")
            shape = (layer.out_channels, span // layer.stride + 1)
        elif isinstance(layer, Pool):
            c, k = shape
            if k % layer.window:
                raise ConfigError(f"pool window {layer.window} does not divide length {k}")
            shape = (c, k // layer.window)
        elif isinstance(layer, Upsample):
            c, k = shape
            shape = (c, k * layer.factor)
        elif isinstance(layer, Flatten):
            c, k = shape
            shape = (c * k,)
        elif isinstance(layer, Reshape):
            (n,) = shape
            if n != layer.channels * layer.length:
                raise ConfigError("reshape does not preserve element count")
            shape = (layer.channels, layer.length)
        elif isinstance(layer, Dense):
            (n,) = shape
            shape = (layer.out_features,)
        else:
            raise ConfigError(f"unknown layer {layer!r}")
    return shape


def reference_architecture() -> CaeArchitecture:
    """The documented stack: four conv/pool stages down to 4x8, then dense to 2."""
    encoder = (
        Conv(8), Pool(),
        Conv(16), Pool(),
        Conv(32), Pool(),
        Conv(4), Pool(),
        Flatten(),
        Dense(2, activation="linear"),
    )
    decoder = (
        Dense(32, activation="relu"),
        Reshape(4, 8),
        Upsample(), Conv(32),
        Upsample(), Conv(16),
        Upsample(), Conv(8),
        Upsample(), Conv(1, activation="linear"),
    )
    return CaeArchitecture(encoder=encoder, decoder=decoder)


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ad.relu(x)
    if kind == "linear":
        return x
    raise ConfigError(f"unknown activation {kind!r}")


class CaeModel:
    """Trained (or freshly initialized) autoencoder parameters plus the stack."""

    def __init__(self, arch: CaeArchitecture, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params

    @classmethod
    def initialize(cls, arch: CaeArchitecture, seed: int) -> "CaeModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for side, layers, start in (("encoder", arch.encoder, (1, arch.input_size)),
                                    ("decoder", arch.decoder, (arch.latent_dim,))):
            shape = start
            for i, layer in enumerate(layers):
                if isinstance(layer, Conv):
                    c_in = shape[0]
                    fan_in = c_in * layer.width
                    w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                   size=(layer.out_channels, c_in, layer.width))
                    params[f"{side}.{i}.weight"] = Tensor(w, requires_grad=True,
                                                          name=f"{side}.{i}.weight")
                    params[f"{side}.{i}.bias"] = Tensor(np.zeros(layer.out_channels),
                                                        requires_grad=True,
                                                        name=f"{side}.{i}.bias")
                elif isinstance(layer, Dense):
                    (n_in,) = shape
                    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, layer.out_features))
                    params[f"{side}.{i}.weight"] = Tensor(w, requires_grad=True,
                                                          name=f"{side}.{i}.weight")
                    params[f"{side}.{i}.bias"] = Tensor(np.zeros(layer.out_features),
                                                        requires_grad=True,
                                                        name=f"{side}.{i}.bias")
                shape = _propagate((layer,), shape)
        return cls(arch, params)

    def param_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def _run(self, side: str, layers, x: Tensor) -> Tensor:
        for i, layer in enumerate(layers):
            if isinstance(layer, Conv):
                x = ad.conv1d(x, self.params[f"{side}.{i}.weight"],
                              self.params[f"{side}.{i}.bias"],
                              stride=layer.stride, zero_pad=True)
                x = _activate(x, layer.activation)
            elif isinstance(layer, Pool):
                x = ad.maxpool1d(x, layer.window)
            elif isinstance(layer, Upsample):
                x = ad.upsample_nearest(x, layer.factor)
            elif isinstance(layer, Flatten):
                b = x.data.shape[0]
                x = ad.reshape(x, (b, -1))
            elif isinstance(layer, Reshape):
                b = x.data.shape[0]
                x = ad.reshape(x, (b, layer.channels, layer.length))
            elif isinstance(layer, Dense):
                x = ad.dense(x, self.params[f"{side}.{i}.weight"],
                             self.params[f"{side}.{i}.bias"])
                x = _activate(x, layer.activation)
        return x

    def encode_t(self, x: Tensor) -> Tensor:
        """Batched training-path encoder: (B, 1, K) -> (B, d)."""
        return self._run("encoder", self.arch.encoder, x)

    def decode_t(self, y: Tensor) -> Tensor:
        """Batched training-path decoder: (B, d) -> (B, 1, K)."""
        return self._run("decoder", self.arch.decoder, y)

    def encode(self, u: np.ndarray) -> np.ndarray:
        """Map one snapshot (K,) or a batch (B, K) to latent coordinates."""
        u = np.asarray(u, dtype=np.float64)
        single = u.ndim == 1
        batch = u[None] if single else u
        if batch.ndim != 2 or batch.shape[1] != self.arch.input_size:
            raise UsageError(f"encode expects length-{self.arch.input_size} snapshots")
        out = self.encode_t(Tensor(batch[:, None, :])).data
        return out[0] if single else out

    def decode(self, y: np.ndarray) -> np.ndarray:
        """Map latent coordinates (d,) or (B, d) back to snapshots."""
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        batch = y[None] if single else y
        if batch.ndim != 2 or batch.shape[1] != self.arch.latent_dim:
            raise UsageError(f"decode expects length-{self.arch.latent_dim} latents")
        out = self.decode_t(Tensor(batch)).data[:, 0, :]
        return out[0] if single else out

    def reconstruct(self, u: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(u))

    # persistence -----------------------------------------------------------

    def to_checkpoint(self) -> bytes:
        return write_params({k: v.data for k, v in self.params.items()})

    def arch_descriptor(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {
            "input_size": str(self.arch.input_size),
            "latent_dim": str(self.arch.latent_dim),
        }
        for side, layers in (("encoder", self.arch.encoder), ("decoder", self.arch.decoder)):
            for i, layer in enumerate(layers):
                sec = f"{side}.{i}"
                cp[sec] = {"kind": type(layer).__name__.lower()}
                for f_ in layer.__dataclass_fields__:
                    cp[sec][f_] = str(getattr(layer, f_))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_checkpoint(cls, blob: bytes, descriptor: str) -> "CaeModel":
        arch = parse_arch_descriptor(descriptor)
        raw = read_params(blob)
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        model = cls(arch, params)
        # shape-check against a fresh initialization
        fresh = cls.initialize(arch, seed=0)
        if set(fresh.params) != set(params):
            raise ConfigError("checkpoint parameters do not match the architecture")
        for k in params:
            if params[k].data.shape != fresh.params[k].data.shape:
                raise ConfigError(f"checkpoint parameter {k} has the wrong shape")
        return model


_LAYER_KINDS = {
    "conv": (Conv, {"out_channels": int, "width": int, "stride": int, "activation": str}),
    "pool": (Pool, {"window": int}),
    "upsample": (Upsample, {"factor": int}),
    "flatten": (Flatten, {}),
    "reshape": (Reshape, {"channels": int, "length": int}),
    "dense": (Dense, {"out_features": int, "activation": str}),
}


def parse_arch_descriptor(text: str) -> CaeArchitecture:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if "model" not in cp:
        raise ConfigError("architecture descriptor is missing its [model] section")
    sides = {"encoder": [], "decoder": []}
    for sec in cp.sections():
        if sec == "model":
            continue
        side, _, idx = sec.partition(".")
        if side not in sides:
            raise ConfigError(f"unknown section {sec!r} in architecture descriptor")
        kind = cp[sec]["kind"]
        if kind not in _LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {kind!r}")
        klass, fields_ = _LAYER_KINDS[kind]
        kwargs = {f_: conv(cp[sec][f_]) for f_, conv in fields_.items() if f_ in cp[sec]}
        sides[side].append((int(idx), klass(**kwargs)))
    encoder = tuple(layer for _, layer in sorted(sides["encoder"]))
    decoder = tuple(layer for _, layer in sorted(sides["decoder"]))
    return CaeArchitecture(
        encoder=encoder,
        decoder=decoder,
        input_size=int(cp["model"]["input_size"]),
        latent_dim=int(cp["model"]["latent_dim"]),
    )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 0.001
    validation_fraction: float = 0.10
    patience: int = 50
    max_epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.validation_fraction < 1.0):
            raise ConfigError("validation fraction must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = np.inf
    stopped_epoch: int = -1


def _mse_batch(model: CaeModel, batch: np.ndarray) -> Tensor:
    x = Tensor(batch[:, None, :])
    recon = model.decode_t(model.encode_t(x))
    return ad.mean_(ad.square(ad.sub(recon, x)))


def _eval_mse(model: CaeModel, snaps: np.ndarray, chunk: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, snaps.shape[0], chunk):
        part = snaps[i : i + chunk]
        rec = model.decode(model.encode(part))
        total += float(np.sum((rec - part) ** 2))
        count += part.size
    return total / count


def train_cae(dataset, arch: CaeArchitecture | None = None,
              config: TrainConfig | None = None) -> tuple[CaeModel, TrainHistory]:
    """Fit the autoencoder on all snapshots of a parametric dataset.

    Snapshots are treated as independent samples; about 10% are held out
    (seeded) for early stopping, and the best-validation parameters are
    restored before returning. No weight regularization is applied.
    """
    arch = arch or reference_architecture()
    config = config or TrainConfig()
    snaps = dataset.values().reshape(-1, dataset.grid.K)
    if snaps.shape[0] < 2:
        raise ConfigError("dataset too small to split for validation")
    if snaps.shape[1] != arch.input_size:
        raise ConfigError("dataset resolution does not match the architecture input")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(snaps.shape[0])
    n_val = max(1, int(round(config.validation_fraction * snaps.shape[0])))
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_snaps, val_snaps = snaps[train_idx], snaps[val_idx]

    model = CaeModel.initialize(arch, seed=int(rng.integers(2**31)))
    params = model.param_list()
    from .optim import AdamState

    opt = AdamState(params, lr=config.learning_rate)
    history = TrainHistory()
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(config.max_epochs):
        perm = rng.permutation(train_snaps.shape[0])
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, perm.size, config.batch_size):
            batch = train_snaps[perm[start : start + config.batch_size]]
            try:
                loss = _mse_batch(model, batch)
                grads = ad.backward(loss, params=params)
            except NumericsError as err:
                raise NumericsError(f"training diverged at epoch {epoch}: {err}") from err
            opt.step(grads)
            epoch_loss += loss.item()
            n_batches += 1
        val = _eval_mse(model, val_snaps)
        history.epochs.append(epoch)
        history.train_loss.append(epoch_loss / max(n_batches, 1))
        history.val_loss.append(val)
        if val < history.best_val_loss:
            history.best_val_loss = val
            history.best_epoch = epoch
            best_params = {k: v.data.copy() for k, v in model.params.items()}
        if epoch - history.best_epoch > config.patience:
            break
    history.stopped_epoch = history.epochs[-1] if history.epochs else -1

    if best_params is not None:
        for k, v in best_params.items():
            model.params[k].data = v
    return model, history
