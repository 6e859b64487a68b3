"""Autoencoder architecture contracts and training behavior on small problems."""

import numpy as np
import pytest

from burgers_rom.burgers import GridSpec, build_dataset
from burgers_rom.cae import (
    CaeArchitecture,
    CaeModel,
    Conv,
    Dense,
    Flatten,
    Pool,
    Reshape,
    TrainConfig,
    Upsample,
    parse_arch_descriptor,
    reference_architecture,
    train_cae,
)
from burgers_rom.errors import ConfigError, UsageError


def small_architecture(k=16):
    # two-stage stack for fast tests: 16 -> 4 latent=2
    encoder = (Conv(4), Pool(), Conv(2), Pool(), Flatten(), Dense(2, activation="linear"))
    decoder = (Dense(8, activation="relu"), Reshape(2, 4),
               Upsample(), Conv(4), Upsample(), Conv(1, activation="linear"))
    return CaeArchitecture(encoder=encoder, decoder=decoder, input_size=k, latent_dim=2)


def test_reference_architecture_shapes():
    arch = reference_architecture()
    model = CaeModel.initialize(arch, seed=0)
    u = np.random.default_rng(0).random(128)
    y = model.encode(u)
    assert y.shape == (2,)
    back = model.decode(y)
    assert back.shape == (128,)


def test_reference_architecture_constraints():
    arch = reference_architecture()
    for layer in arch.encoder + arch.decoder:
        if isinstance(layer, Conv):
            assert layer.width == 3
        if isinstance(layer, Pool):
            assert layer.window == 2
    assert arch.latent_dim == 2


def test_architecture_validation_rejects_bad_stacks():
    with pytest.raises(ConfigError):
        CaeArchitecture(encoder=(Flatten(), Dense(3)), decoder=(), input_size=8, latent_dim=2)
    with pytest.raises(ConfigError):
        # width-5 filters violate the stated constraint
        CaeArchitecture(
            encoder=(Conv(1, width=5), Flatten(), Dense(2)),
            decoder=(Dense(8, activation="relu"), Reshape(1, 8)),
            input_size=8,
            latent_dim=2,
        )


def test_encode_is_deterministic():
    model = CaeModel.initialize(small_architecture(), seed=3)
    u = np.random.default_rng(1).random(16)
    assert np.array_equal(model.encode(u), model.encode(u))


def test_zero_input_zero_bias_linear_bottleneck_gives_zero_latent():
    model = CaeModel.initialize(small_architecture(), seed=4)
    y = model.encode(np.zeros(16))
    assert np.allclose(y, 0.0)


def test_encode_decode_shape_errors():
    model = CaeModel.initialize(small_architecture(), seed=5)
    with pytest.raises(UsageError):
        model.encode(np.zeros(17))
    with pytest.raises(UsageError):
        model.decode(np.zeros(3))


def test_batched_encode_matches_single():
    model = CaeModel.initialize(small_architecture(), seed=6)
    batch = np.random.default_rng(2).random((4, 16))
    ys = model.encode(batch)
    for i in range(4):
        assert np.allclose(ys[i], model.encode(batch[i]))


def test_decode_local_lipschitz_probe():
    model = CaeModel.initialize(small_architecture(), seed=7)
    rng = np.random.default_rng(3)
    y = rng.normal(size=2)
    base = model.decode(y)
    ratios = []
    for _ in range(20):
        delta = rng.normal(size=2) * 1e-4
        moved = model.decode(y + delta)
        ratios.append(np.linalg.norm(moved - base) / np.linalg.norm(delta))
    lip = max(ratios)
    assert np.isfinite(lip)


def _tiny_dataset():
    grid = GridSpec(K=16, T=20)
    return build_dataset([100.0, 400.0, 900.0], grid)


def test_training_descends_and_is_reproducible():
    ds = _tiny_dataset()
    cfg = TrainConfig(batch_size=10, max_epochs=40, patience=40, seed=11)
    model_a, hist_a = train_cae(ds, small_architecture(), cfg)
    model_b, hist_b = train_cae(ds, small_architecture(), cfg)
    assert hist_a.train_loss[0] > hist_a.train_loss[-1]
    assert hist_a.best_val_loss <= min(hist_a.val_loss) + 1e-15
    assert abs(hist_a.best_val_loss - hist_b.best_val_loss) <= 1e-12
    for k in model_a.params:
        assert np.array_equal(model_a.params[k].data, model_b.params[k].data)


def test_early_stopping_restores_best_checkpoint():
    ds = _tiny_dataset()
    cfg = TrainConfig(batch_size=10, max_epochs=30, patience=5, seed=12)
    model, hist = train_cae(ds, small_architecture(), cfg)
    snaps = ds.values().reshape(-1, 16)
    # returned model scores exactly the recorded best validation loss
    rng = np.random.default_rng(12)
    order = rng.permutation(snaps.shape[0])
    n_val = max(1, int(round(0.10 * snaps.shape[0])))
    val = snaps[order[:n_val]]
    rec = model.decode(model.encode(val))
    assert np.mean((rec - val) ** 2) == pytest.approx(hist.best_val_loss, rel=1e-12)
    assert hist.best_val_loss <= hist.val_loss[0]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(validation_fraction=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_checkpoint_round_trip():
    model = CaeModel.initialize(small_architecture(), seed=8)
    blob = model.to_checkpoint()
    desc = model.arch_descriptor()
    back = CaeModel.from_checkpoint(blob, desc)
    u = np.random.default_rng(4).random(16)
    assert np.array_equal(model.encode(u), back.encode(u))
    assert np.array_equal(model.decode(model.encode(u)), back.decode(back.encode(u)))


def test_arch_descriptor_round_trip():
    arch = reference_architecture()
    model = CaeModel.initialize(arch, seed=9)
    parsed = parse_arch_descriptor(model.arch_descriptor())
    assert parsed == arch


def test_checkpoint_shape_mismatch_rejected():
    model = CaeModel.initialize(small_architecture(), seed=10)
    other = CaeModel.initialize(reference_architecture(), seed=10)
    with pytest.raises(ConfigError):
        CaeModel.from_checkpoint(other.to_checkpoint(), model.arch_descriptor())
