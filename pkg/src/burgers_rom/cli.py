"""Command-line interface: stagewise runs of the surrogate pipeline.

Each subcommand reads one INI config, performs its stage against the output
directory, and writes a manifest for that stage. Exit codes: 0 on success,
2 for configuration/usage/format problems, 3 for numerical failures.
"""

from __future__ import annotations

import configparser
import sys
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from .bayesopt import default_search_box, history_to_csv
from .burgers import build_dataset, load_dataset, write_dataset
from .cae import CaeModel, TrainConfig, train_cae
from .checkpoint import write_params
from .config import (
    ExperimentConfig,
    RunManifest,
    atomic_write_bytes,
    atomic_write_text,
    dump_config,
    load_config,
    sha256_bytes,
)
from .errors import ConfigError, FormatError, NumericsError, UsageError
from .flow import FlowConfig, train_flow
from .plots import MetricSeries, plot_metric_lines
from .reservoir import NuRecord, RcHyperparams, ReservoirModel, one_step_errors, train_rc


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, FormatError, UsageError) as err:
            _fail(2, str(err))
        except NumericsError as err:
            _fail(3, str(err))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load_cfg(config_path, out_override) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    out = Path(out_override) if out_override else Path(cfg.output_dir)
    return cfg, out


def _stage_manifest(cfg: ExperimentConfig, out: Path, stage: str) -> RunManifest:
    manifest = RunManifest()
    manifest.record("stages", stage, "ok")
    atomic_write_text(out / "config.ini", dump_config(cfg))
    return manifest


_CONFIG_OPT = click.option("--config", "-c", "config_path", type=click.Path(exists=True),
                           default=None, help="INI config file (defaults when omitted).")
_OUT_OPT = click.option("--out", "-o", "out_override", type=click.Path(), default=None,
                        help="Output directory (overrides the config).")


@click.group()
def main():
    """Reduced-order surrogate toolkit for the viscous Burgers equation."""


@main.command("gen-data")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def gen_data_cmd(config_path, out_override):
    """Generate the train/test datasets and write them in the binary format."""
    cfg, out = _load_cfg(config_path, out_override)
    grid = pl._grid_from_config(cfg)
    manifest = _stage_manifest(cfg, out, "gen-data")
    for name, re_values in (("train", cfg.data.train_re), ("test", cfg.data.test_re)):
        ds = build_dataset(re_values, grid, role=name)
        blob = write_dataset(ds)
        atomic_write_bytes(out / "data" / f"{name}.brom", blob)
        manifest.record("datasets", name, sha256_bytes(blob))
        click.echo(f"wrote {out / 'data' / (name + '.brom')} ({len(ds.fields)} fields)")
    manifest.save(out / "manifest_gen-data.ini")


@main.command("train-cae")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def train_cae_cmd(config_path, out_override):
    """Train the autoencoder on the generated training dataset."""
    cfg, out = _load_cfg(config_path, out_override)
    ds = load_dataset(out / "data" / "train.brom", role="train")
    c = cfg.cae
    model, history = train_cae(ds, config=TrainConfig(
        batch_size=c.batch_size, learning_rate=c.learning_rate,
        validation_fraction=c.validation_fraction, patience=c.patience,
        max_epochs=c.max_epochs, seed=c.seed,
    ))
    atomic_write_bytes(out / "checkpoints" / "cae.rfw1", model.to_checkpoint())
    atomic_write_text(out / "checkpoints" / "cae_arch.ini", model.arch_descriptor())
    manifest = _stage_manifest(cfg, out, "train-cae")
    manifest.record("hyperparameters", "cae_best_epoch", history.best_epoch)
    manifest.record("hyperparameters", "cae_best_val_mse", f"{history.best_val_loss:.6e}")
    manifest.record("checkpoints", "cae", str(out / "checkpoints" / "cae.rfw1"))
    manifest.save(out / "manifest_train-cae.ini")
    click.echo(f"best validation MSE {history.best_val_loss:.3e} at epoch {history.best_epoch}")


def _load_cae(out: Path) -> CaeModel:
    ck = out / "checkpoints"
    return CaeModel.from_checkpoint((ck / "cae.rfw1").read_bytes(),
                                    (ck / "cae_arch.ini").read_text())


def _encode_both(cfg: ExperimentConfig, out: Path):
    cae = _load_cae(out)
    train = load_dataset(out / "data" / "train.brom", role="train")
    latents = pl.encode_dataset(cae, train)
    mean, std = pl.latent_affine(latents)
    return cae, train, latents, mean, std


@main.command("encode")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def encode_cmd(config_path, out_override):
    """Encode both datasets into latent trajectories and store the affine."""
    cfg, out = _load_cfg(config_path, out_override)
    cae, _, _, mean, std = _encode_both(cfg, out)
    manifest = _stage_manifest(cfg, out, "encode")
    for name in ("train", "test"):
        ds = load_dataset(out / "data" / f"{name}.brom", role=name)
        rows = ["re,t,y1,y2"]
        for traj in pl.encode_dataset(cae, ds):
            rows += [f"{traj.reynolds!r},{float(t)!r},{float(v[0])!r},{float(v[1])!r}"
                     for t, v in zip(traj.times, traj.values)]
        atomic_write_text(out / "latents" / f"{name}.csv", "\n".join(rows) + "\n")
    atomic_write_bytes(out / "checkpoints" / "latent_affine.rfw1",
                       write_params({"mean": mean, "std": std}))
    manifest.record("hyperparameters", "latent_mean", ",".join(f"{v:.9e}" for v in mean))
    manifest.record("hyperparameters", "latent_std", ",".join(f"{v:.9e}" for v in std))
    manifest.save(out / "manifest_encode.ini")
    click.echo(f"latent affine: mean {mean}, std {std}")


def _hyper_path(out: Path) -> Path:
    return out / "checkpoints" / "rc_hyper.ini"


def _save_hyper(path: Path, hyper: RcHyperparams) -> None:
    cp = configparser.ConfigParser()
    cp["reservoir_hyperparameters"] = {
        **{k: repr(v) for k, v in hyper.as_dict().items()},
        "relaxed": str(hyper.relaxed),
    }
    import io

    buf = io.StringIO()
    cp.write(buf)
    atomic_write_text(path, buf.getvalue())


def _load_hyper(path: Path) -> RcHyperparams:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read reservoir hyperparameters from {path}")
    sec = cp["reservoir_hyperparameters"]
    return RcHyperparams(
        spectral_radius=float(sec["spectral_radius"]),
        input_scale=float(sec["input_scale"]),
        leakage=float(sec["leakage"]),
        regularization=float(sec["regularization"]),
        adjacency_density=float(sec["adjacency_density"]),
        input_density=float(sec["input_density"]),
        relaxed=sec.get("relaxed", "False") == "True",
    )


@main.command("tune-rc")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def tune_rc_cmd(config_path, out_override):
    """Select reservoir hyperparameters (Bayesian optimization or Table-2 mode)."""
    cfg, out = _load_cfg(config_path, out_override)
    cae, _, latents, mean, std = _encode_both(cfg, out)
    nu_record = NuRecord(mode=cfg.reservoir.nu_mode, re_max=cfg.reservoir.re_max)
    latents_std = pl.standardize_trajectories(latents, mean, std)
    hyper, history = pl.select_hyperparameters(cfg, latents_std, nu_record)
    if history is not None:
        atomic_write_text(out / "bayesopt" / "history.csv",
                          history_to_csv(history, default_search_box()))
    _save_hyper(_hyper_path(out), hyper)
    manifest = _stage_manifest(cfg, out, "tune-rc")
    for k, v in hyper.as_dict().items():
        manifest.record("hyperparameters", f"rc_{k}", f"{v:.6g}")
    manifest.save(out / "manifest_tune-rc.ini")
    click.echo(f"selected hyperparameters: {hyper.as_dict()}")


@main.command("train-rc")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def train_rc_cmd(config_path, out_override):
    """Fit the reservoir readout on the standardized training latents."""
    cfg, out = _load_cfg(config_path, out_override)
    cae, _, latents, mean, std = _encode_both(cfg, out)
    hyper = _load_hyper(_hyper_path(out))
    nu_record = NuRecord(mode=cfg.reservoir.nu_mode, re_max=cfg.reservoir.re_max)
    latents_std = pl.standardize_trajectories(latents, mean, std)
    rc = train_rc(latents_std, hyper, seed=cfg.reservoir.seed,
                  n_nodes=cfg.reservoir.n_nodes, washout=cfg.reservoir.washout,
                  nu_record=nu_record)
    atomic_write_bytes(out / "checkpoints" / "reservoir.rfw1", rc.to_checkpoint())
    errs = one_step_errors(rc, latents_std, washout=cfg.reservoir.washout)
    mse_raw = (errs**2).mean(axis=0) * std**2
    manifest = _stage_manifest(cfg, out, "train-rc")
    manifest.record("hyperparameters", "rc_one_step_mse",
                    ",".join(f"{v:.6e}" for v in mse_raw))
    manifest.record("checkpoints", "reservoir", str(out / "checkpoints" / "reservoir.rfw1"))
    manifest.save(out / "manifest_train-rc.ini")
    click.echo(f"one-step latent MSE (encoder units): {mse_raw}")


@main.command("train-nf")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def train_nf_cmd(config_path, out_override):
    """Fit the error-density flow on the reservoir's single-step errors."""
    cfg, out = _load_cfg(config_path, out_override)
    cae, _, latents, mean, std = _encode_both(cfg, out)
    rc = ReservoirModel.from_checkpoint((out / "checkpoints" / "reservoir.rfw1").read_bytes())
    latents_std = pl.standardize_trajectories(latents, mean, std)
    errs = one_step_errors(rc, latents_std, washout=cfg.reservoir.washout)
    f = cfg.flow
    model = train_flow(errs, FlowConfig(bins=f.bins, bound=f.bound, hidden=f.hidden,
                                        learning_rate=f.learning_rate,
                                        iterations=f.iterations), seed=f.seed)
    atomic_write_bytes(out / "checkpoints" / "flow.rfw1", model.to_checkpoint())
    lines = ["iteration,nll"] + [f"{i},{v!r}" for i, v in enumerate(model.loss_history)]
    atomic_write_text(out / "flow" / "loss_history.csv", "\n".join(lines) + "\n")
    manifest = _stage_manifest(cfg, out, "train-nf")
    manifest.record("checkpoints", "flow", str(out / "checkpoints" / "flow.rfw1"))
    manifest.save(out / "manifest_train-nf.ini")
    click.echo(f"final NLL {model.loss_history[-1]:.4f} after {len(model.loss_history)} iterations")


@main.command("evaluate")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def evaluate_cmd(config_path, out_override):
    """Compute all metric series on both datasets and render the figures."""
    cfg, out = _load_cfg(config_path, out_override)
    grid = pl._grid_from_config(cfg)
    model = pl.load_surrogate(out, grid)
    seeds = list(cfg.evaluate.rollout_seeds)
    manifest = _stage_manifest(cfg, out, "evaluate")
    results = {}
    for name in ("train", "test"):
        ds = load_dataset(out / "data" / f"{name}.brom", role=name)
        results[name] = pl.evaluate_dataset(model, ds, seeds, role=name)
        pl._emit_evaluation(results[name], out, cfg.evaluate.heatmap_style)
    gdir = out / "figures"
    plot_metric_lines(
        [results["train"].series_by_kind("L_CAE"),
         results["train"].series_by_kind("L_CAE-RC-NF"),
         results["test"].series_by_kind("L_CAE"),
         results["test"].series_by_kind("L_CAE-RC-NF")],
        gdir / "reconstruction_error.svg", "Reconstruction error")
    plot_metric_lines(
        [results["train"].series_by_kind("L_RC-NF_1"),
         results["train"].series_by_kind("L_RC-NF_2"),
         results["test"].series_by_kind("L_RC-NF_1"),
         results["test"].series_by_kind("L_RC-NF_2")],
        gdir / "latent_prediction_error.svg", "Latent prediction error")
    for role, result in results.items():
        avg = result.series_by_kind("L_CAE").values.mean()
        manifest.record("hyperparameters", f"l_cae_time_avg_{role}", f"{avg:.6e}")
    manifest.save(out / "manifest_evaluate.ini")
    click.echo(f"metrics written under {out / 'metrics'}")


@main.command("experiment")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def experiment_cmd(config_path, out_override):
    """Run the full pipeline end to end, including the generalization runs."""
    cfg, out = _load_cfg(config_path, out_override)
    result = pl.run_experiment(cfg, out_dir=out)
    click.echo(f"experiment complete; manifest at {out / 'manifest.ini'}")
    for stage, status in result.manifest.sections["stages"].items():
        click.echo(f"  {stage}: {status}")


def _parse_series_csv(path: Path) -> MetricSeries:
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    if header[:2] != ["t", "value"]:
        raise FormatError(f"{path} is not a metric series CSV")
    times, values, flags = [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        times.append(float(parts[0]))
        values.append(float(parts[1]))
        flags.append(bool(int(parts[2])) if len(parts) > 2 else False)
    stem = path.stem
    seed = None
    if "_seed" in stem:
        stem, _, seed_part = stem.rpartition("_seed")
        seed = int(seed_part)
    kind, _, role = stem.rpartition("_")
    return MetricSeries(kind=kind, role=role, times=np.array(times),
                        values=np.array(values),
                        reconstruction_only=np.array(flags), seed=seed)


@main.command("plot")
@_CONFIG_OPT
@_OUT_OPT
@_guarded
def plot_cmd(config_path, out_override):
    """Re-render the SVG figures from the metric CSV files."""
    cfg, out = _load_cfg(config_path, out_override)
    mdir = out / "metrics"
    paths = sorted(mdir.glob("*.csv")) if mdir.exists() else []
    series = [_parse_series_csv(p) for p in paths if "_seed" not in p.stem]
    if not series:
        raise UsageError(f"no metric series found under {mdir}")
    gdir = out / "figures"
    recon = [s for s in series if s.kind in ("L_CAE", "L_CAE-RC-NF")
             and s.role in ("train", "test")]
    latent = [s for s in series if s.kind.startswith("L_RC-NF")
              and s.role in ("train", "test")]
    if recon:
        plot_metric_lines(recon, gdir / "reconstruction_error.svg", "Reconstruction error")
    if latent:
        plot_metric_lines(latent, gdir / "latent_prediction_error.svg",
                          "Latent prediction error")
    manifest = _stage_manifest(cfg, out, "plot")
    manifest.save(out / "manifest_plot.ini")
    click.echo(f"figures written under {gdir}")


if __name__ == "__main__":
    main()
