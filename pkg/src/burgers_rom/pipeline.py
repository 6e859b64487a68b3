"""Composed surrogate (encoder, parametric reservoir, flow, decoder) and metrics.

The latent space the reservoir sees is an affine standardization of the
encoder outputs (per-dimension mean and scale from the training latents);
the affine is stored on the surrogate and undone before decoding, so all
reported metrics live in the encoder's own latent units. Components are
trained independently: no gradient crosses the encoder/reservoir boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .bayesopt import default_search_box, history_to_csv, optimize
from .burgers import GridSpec, ParametricDataset, SolutionField, analytic_field, build_dataset
from .cae import CaeModel, TrainConfig, train_cae
from .checkpoint import read_params, write_params
from .config import (
    ExperimentConfig,
    RunManifest,
    atomic_write_bytes,
    atomic_write_text,
    dump_config,
    sha256_bytes,
)
from .errors import ConfigError, UsageError
from .flow import FlowConfig, FlowModel, train_flow
from .plots import (
    MetricSeries,
    field_to_csv,
    latents_to_csv,
    plot_field_heatmaps,
    plot_latent_trajectories,
    plot_metric_lines,
    plot_profiles,
    series_to_csv,
)
from .reservoir import (
    TABLE2_HYPERPARAMS,
    LatentTrajectory,
    NuRecord,
    RcHyperparams,
    ReservoirModel,
    collect_states,
    fit_readout,
    init_reservoir,
    one_step_errors,
    predict_closed_loop,
    train_rc,
)

T_WARM = 10


@dataclass
class SurrogateModel:
    """Everything needed to roll the learned surrogate forward at a given Re."""

    cae: CaeModel
    reservoir: ReservoirModel
    flow: FlowModel | None
    grid: GridSpec
    latent_mean: np.ndarray
    latent_std: np.ndarray

    def __post_init__(self):
        if self.cae.arch.latent_dim != 2:
            raise ConfigError("the pipeline requires a latent dimension of exactly 2")
        if self.reservoir.latent_dim != self.cae.arch.latent_dim:
            raise ConfigError("encoder and reservoir latent dimensions disagree")
        if self.flow is not None and self.flow.dim != self.cae.arch.latent_dim:
            raise ConfigError("flow dimension does not match the latent dimension")
        if self.grid.K != self.cae.arch.input_size:
            raise ConfigError("grid resolution does not match the encoder input size")

    def standardize(self, latents: np.ndarray) -> np.ndarray:
        return (latents - self.latent_mean) / self.latent_std

    def unstandardize(self, latents: np.ndarray) -> np.ndarray:
        return latents * self.latent_std + self.latent_mean


@dataclass(frozen=True)
class RolloutFields:
    """Decoded closed-loop prediction for one trajectory."""

    reynolds: float
    seed: int
    values: np.ndarray  # (steps, K) decoded predictions
    latents: np.ndarray  # (steps, d) predicted latents, encoder units
    warmup_recon: np.ndarray  # (T_warm, K) decoded warm-up reconstruction
    warmup_latents: np.ndarray  # (T_warm, d)


class MetricPoint(NamedTuple):
    value: float
    reconstruction_only: bool


def encode_dataset(cae: CaeModel, dataset: ParametricDataset) -> list[LatentTrajectory]:
    grid = dataset.grid
    return [
        LatentTrajectory(reynolds=f.reynolds, times=grid.times, values=cae.encode(f.values))
        for f in dataset.fields
    ]


def latent_affine(latents: list[LatentTrajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and scale of the pooled training latents."""
    pooled = np.concatenate([t.values for t in latents])
    return pooled.mean(axis=0), np.maximum(pooled.std(axis=0), 1e-12)


def standardize_trajectories(latents, mean, std) -> list[LatentTrajectory]:
    return [
        LatentTrajectory(t.reynolds, t.times, (t.values - mean) / std) for t in latents
    ]


def rollout(model: SurrogateModel, warmup_field: np.ndarray, reynolds: float,
            steps: int, seed: int = 0, use_flow: bool = True) -> RolloutFields:
    """Encode the warm-up, drive the reservoir closed loop, decode every latent."""
    warmup_field = np.asarray(warmup_field, dtype=np.float64)
    if warmup_field.shape != (T_WARM, model.grid.K):
        raise UsageError(
            f"warm-up must be ({T_WARM}, {model.grid.K}) snapshots, got {warmup_field.shape}"
        )
    warm_raw = model.cae.encode(warmup_field)
    warm_std = model.standardize(warm_raw)
    nu_norm = model.reservoir.nu_record.normalize(reynolds)
    noise = model.flow if (use_flow and model.flow is not None) else None
    roll = predict_closed_loop(model.reservoir, warm_std, nu_norm, steps,
                               noise_source=noise, seed=seed, reynolds=reynolds)
    lat_raw = model.unstandardize(roll.predictions) if steps else np.zeros((0, 2))
    values = model.cae.decode(lat_raw) if steps else np.zeros((0, model.grid.K))
    return RolloutFields(
        reynolds=reynolds,
        seed=seed,
        values=values,
        latents=lat_raw,
        warmup_recon=model.cae.decode(warm_raw),
        warmup_latents=warm_raw,
    )


def _time_index(grid: GridSpec, t: float) -> int:
    j = int(round(t / grid.dt)) - 1
    if j < 0 or j >= grid.T or abs(grid.times[j] - t) > 1e-9:
        raise UsageError(f"t={t} is not on the sampling grid")
    return j


def _reconstruction_sq_errors(model: SurrogateModel, dataset: ParametricDataset) -> np.ndarray:
    """(T,) mean-square reconstruction error of the autoencoder per time."""
    cube = dataset.values()
    m, t_len, k = cube.shape
    flat = cube.reshape(m * t_len, k)
    recon = model.cae.decode(model.cae.encode(flat)).reshape(m, t_len, k)
    return ((recon - cube) ** 2).mean(axis=(0, 2))


def metric_cae(model: SurrogateModel, dataset: ParametricDataset, t: float) -> float:
    """Mean-square autoencoder reconstruction error at one time."""
    j = _time_index(dataset.grid, t)
    snaps = dataset.values()[:, j, :]
    recon = model.cae.decode(model.cae.encode(snaps))
    return float(((recon - snaps) ** 2).mean())


def _dataset_rollouts(model: SurrogateModel, dataset: ParametricDataset, seed: int,
                      use_flow: bool = True) -> list[RolloutFields]:
    steps = dataset.grid.T - T_WARM
    return [
        rollout(model, f.values[:T_WARM], f.reynolds, steps, seed=seed, use_flow=use_flow)
        for f in dataset.fields
    ]


def metric_caercnf(model: SurrogateModel, dataset: ParametricDataset, t: float,
                   seed: int = 0, rollouts: list[RolloutFields] | None = None,
                   use_flow: bool = True) -> MetricPoint:
    """Mean-square error of the decoded closed-loop prediction at one time.

    Inside the warm-up window there is no prediction yet; the value falls
    back to the reconstruction error and is flagged as such.
    """
    j = _time_index(dataset.grid, t)
    if j < T_WARM:
        return MetricPoint(metric_cae(model, dataset, t), True)
    rolls = rollouts if rollouts is not None else _dataset_rollouts(model, dataset, seed, use_flow)
    truth = dataset.values()[:, j, :]
    preds = np.stack([r.values[j - T_WARM] for r in rolls])
    return MetricPoint(float(((preds - truth) ** 2).mean()), False)


def metric_rcnf(model: SurrogateModel, dataset: ParametricDataset, t: float, dim: int,
                seed: int = 0, rollouts: list[RolloutFields] | None = None,
                use_flow: bool = True) -> float:
    """Latent-space mean-square prediction error at one time, per dimension."""
    if dim not in (1, 2):
        raise UsageError("latent dimension index must be 1 or 2")
    j = _time_index(dataset.grid, t)
    if j < T_WARM:
        raise UsageError("t lies inside the warm-up window; no prediction exists there")
    rolls = rollouts if rollouts is not None else _dataset_rollouts(model, dataset, seed, use_flow)
    truth = np.stack([model.cae.encode(f.values[j]) for f in dataset.fields])
    preds = np.stack([r.latents[j - T_WARM] for r in rolls])
    return float(((preds[:, dim - 1] - truth[:, dim - 1]) ** 2).mean())


@dataclass
class EvaluationResult:
    role: str
    mean_series: list[MetricSeries] = field(default_factory=list)
    seed_series: list[MetricSeries] = field(default_factory=list)
    rollouts: dict = field(default_factory=dict)  # (reynolds, seed) -> RolloutFields

    def series_by_kind(self, kind: str) -> MetricSeries:
        for s in self.mean_series:
            if s.kind == kind:
                return s
        raise KeyError(kind)


def evaluate_dataset(model: SurrogateModel, dataset: ParametricDataset, seeds,
                     role: str, use_flow: bool = True) -> EvaluationResult:
    """All three metric series over the time grid, averaged over rollout seeds.

    Warm-up times of the composed metric carry the reconstruction value and a
    flag; latent prediction errors are only defined after the warm-up window.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one rollout seed")
    grid = dataset.grid
    times = grid.times
    result = EvaluationResult(role=role)

    cae_vals = _reconstruction_sq_errors(model, dataset)
    result.mean_series.append(MetricSeries("L_CAE", role, times, cae_vals))

    truth_cube = dataset.values()
    latent_truth = np.stack([model.cae.encode(f.values) for f in dataset.fields])

    warm_flags = np.arange(grid.T) < T_WARM
    per_seed_caercnf = []
    per_seed_rcnf = {1: [], 2: []}
    for seed in seeds:
        rolls = _dataset_rollouts(model, dataset, seed, use_flow)
        for r in rolls:
            result.rollouts[(r.reynolds, seed)] = r
        preds = np.stack([r.values for r in rolls])  # (M, T-T_WARM, K)
        lat_preds = np.stack([r.latents for r in rolls])  # (M, T-T_WARM, d)

        vals = np.empty(grid.T)
        vals[:T_WARM] = cae_vals[:T_WARM]
        vals[T_WARM:] = ((preds - truth_cube[:, T_WARM:, :]) ** 2).mean(axis=(0, 2))
        per_seed_caercnf.append(vals)
        result.seed_series.append(
            MetricSeries("L_CAE-RC-NF", role, times, vals, warm_flags.copy(), seed=seed)
        )
        for dim in (1, 2):
            lv = ((lat_preds[:, :, dim - 1] - latent_truth[:, T_WARM:, dim - 1]) ** 2).mean(axis=0)
            per_seed_rcnf[dim].append(lv)
            result.seed_series.append(
                MetricSeries(f"L_RC-NF_{dim}", role, times[T_WARM:], lv, seed=seed)
            )

    result.mean_series.append(
        MetricSeries("L_CAE-RC-NF", role, times,
                     np.mean(per_seed_caercnf, axis=0), warm_flags.copy())
    )
    for dim in (1, 2):
        result.mean_series.append(
            MetricSeries(f"L_RC-NF_{dim}", role, times[T_WARM:],
                         np.mean(per_seed_rcnf[dim], axis=0))
        )
    return result


# hyperparameter selection ----------------------------------------------------


def _point_seed(point: dict) -> int:
    """Stable per-point seed so the objective is deterministic."""
    key = ",".join(f"{k}={point[k]:.12e}" for k in sorted(point))
    return int(sha256_bytes(key.encode())[:8], 16) % (2**31)


def make_rc_objective(latents_std: list[LatentTrajectory], nu_record: NuRecord,
                      n_nodes: int, washout: int, validation_fraction: float,
                      split_seed: int):
    """One-step validation MSE over a fixed held-out slice of state/target pairs.

    The reservoir is redrawn per point from a seed derived from the point
    itself, the readout is fit on the retained pairs, and the mean squared
    one-step error on the held-out pairs is returned.
    """

    def objective(point: dict) -> float:
        # relaxed so reference points outside the search box (the published
        # optimum sits below it) can be scored by the same objective
        hyper = RcHyperparams(**point, relaxed=True)
        model = init_reservoir(hyper, n_nodes, latents_std[0].values.shape[1],
                               seed=_point_seed(point), nu_record=nu_record)
        matrix = collect_states(model, latents_std, washout=washout)
        n_cols = matrix.states.shape[1]
        rng = np.random.default_rng(split_seed)
        perm = rng.permutation(n_cols)
        n_val = max(1, int(round(validation_fraction * n_cols)))
        val_idx, fit_idx = perm[:n_val], perm[n_val:]
        from .reservoir import StateMatrix

        w = fit_readout(StateMatrix(states=matrix.states[:, fit_idx],
                                    targets=matrix.targets[:, fit_idx]),
                        lam=hyper.regularization)
        resid = w @ matrix.states[:, val_idx] - matrix.targets[:, val_idx]
        return float((resid**2).mean())

    return objective


def select_hyperparameters(cfg: ExperimentConfig, latents_std, nu_record: NuRecord):
    """Resolve the reservoir hyperparameters per the configured mode."""
    mode = cfg.reservoir.hyper_mode
    if mode == "table2":
        return TABLE2_HYPERPARAMS, None
    if mode == "explicit":
        rc = cfg.reservoir
        return RcHyperparams(
            spectral_radius=rc.spectral_radius, input_scale=rc.input_scale,
            leakage=rc.leakage, regularization=rc.regularization,
            adjacency_density=rc.adjacency_density, input_density=rc.input_density,
            relaxed=True,
        ), None
    if mode == "bayesopt":
        objective = make_rc_objective(
            latents_std, nu_record, cfg.reservoir.n_nodes, cfg.reservoir.washout,
            cfg.bayesopt.validation_fraction, split_seed=cfg.bayesopt.seed,
        )
        box = default_search_box()
        best, history = optimize(objective, box, budget=cfg.bayesopt.budget,
                                 seed=cfg.bayesopt.seed)
        return RcHyperparams(**best.point), history
    raise ConfigError(f"unknown hyperparameter mode {mode!r}")


# experiment driver -------------------------------------------------------------


def _grid_from_config(cfg: ExperimentConfig) -> GridSpec:
    d = cfg.data
    return GridSpec(l=d.domain_length, K=d.grid_k, t_max=d.t_max, T=d.grid_t)


def save_surrogate(model: SurrogateModel, out: Path) -> dict[str, Path]:
    paths = {
        "cae": out / "checkpoints" / "cae.rfw1",
        "cae_arch": out / "checkpoints" / "cae_arch.ini",
        "reservoir": out / "checkpoints" / "reservoir.rfw1",
        "latent_affine": out / "checkpoints" / "latent_affine.rfw1",
    }
    atomic_write_bytes(paths["cae"], model.cae.to_checkpoint())
    atomic_write_text(paths["cae_arch"], model.cae.arch_descriptor())
    atomic_write_bytes(paths["reservoir"], model.reservoir.to_checkpoint())
    atomic_write_bytes(paths["latent_affine"], write_params({
        "mean": model.latent_mean, "std": model.latent_std,
    }))
    if model.flow is not None:
        paths["flow"] = out / "checkpoints" / "flow.rfw1"
        atomic_write_bytes(paths["flow"], model.flow.to_checkpoint())
    return paths


def load_surrogate(out: Path, grid: GridSpec) -> SurrogateModel:
    ck = out / "checkpoints"
    cae = CaeModel.from_checkpoint((ck / "cae.rfw1").read_bytes(),
                                   (ck / "cae_arch.ini").read_text())
    reservoir = ReservoirModel.from_checkpoint((ck / "reservoir.rfw1").read_bytes())
    affine = read_params((ck / "latent_affine.rfw1").read_bytes())
    flow_path = ck / "flow.rfw1"
    flow = FlowModel.from_checkpoint(flow_path.read_bytes()) if flow_path.exists() else None
    return SurrogateModel(cae=cae, reservoir=reservoir, flow=flow, grid=grid,
                          latent_mean=affine["mean"], latent_std=affine["std"])


def _emit_evaluation(result: EvaluationResult, out: Path, heatmap_style: str) -> None:
    mdir = out / "metrics"
    for s in result.mean_series + result.seed_series:
        atomic_write_text(mdir / f"{s.label()}.csv", series_to_csv(s))


def _emit_experiment_exports(model: SurrogateModel, ref: SolutionField,
                             result: EvaluationResult, out: Path, seeds,
                             heatmap_style: str) -> None:
    grid = model.grid
    re_tag = f"re{ref.reynolds:g}"
    fdir = out / "fields"
    atomic_write_text(fdir / f"{re_tag}_reference.csv",
                      field_to_csv(grid.times, grid.x, ref.values))
    enc = model.cae.encode(ref.values)
    atomic_write_text(fdir / f"{re_tag}_latents_encoder.csv",
                      latents_to_csv(grid.times, enc))
    first = result.rollouts[(ref.reynolds, seeds[0])]
    pred_full = np.vstack([first.warmup_recon, first.values])
    atomic_write_text(fdir / f"{re_tag}_predicted_seed{seeds[0]}.csv",
                      field_to_csv(grid.times, grid.x, pred_full))
    atomic_write_text(fdir / f"{re_tag}_latents_predicted_seed{seeds[0]}.csv",
                      latents_to_csv(grid.times[T_WARM:], first.latents))

    gdir = out / "figures"
    plot_field_heatmaps(grid.times, grid.x, ref.values, pred_full,
                        gdir / f"{re_tag}_field.svg",
                        f"Re={ref.reynolds:g} reference vs prediction",
                        style=heatmap_style)
    plot_profiles(grid.x, ref.values[-1], pred_full[-1],
                  gdir / f"{re_tag}_profile_t2.svg",
                  f"Re={ref.reynolds:g} at t={grid.t_max:g}")
    plot_latent_trajectories(grid.times, enc, first.latents, T_WARM,
                             gdir / f"{re_tag}_latents.svg",
                             f"Re={ref.reynolds:g} latent trajectories")


@dataclass
class ExperimentResult:
    manifest: RunManifest
    surrogate: SurrogateModel
    evaluations: dict  # role -> EvaluationResult
    datasets: dict  # "train"/"test" -> ParametricDataset
    timings: dict  # stage -> seconds


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """End-to-end: data, training, hyperparameters, flow, evaluation, artifacts.

    Every stage is recorded in the manifest; on failure the manifest is saved
    with the partial progress before the error propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest()
    manifest.record("seeds", "cae", cfg.cae.seed)
    manifest.record("seeds", "reservoir", cfg.reservoir.seed)
    manifest.record("seeds", "bayesopt", cfg.bayesopt.seed)
    manifest.record("seeds", "flow", cfg.flow.seed)
    manifest.record("seeds", "rollouts", ",".join(str(s) for s in cfg.evaluate.rollout_seeds))
    atomic_write_text(out / "config.ini", dump_config(cfg))
    manifest_path = out / "manifest.ini"

    state: dict = {}
    timings: dict = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            fn()
        except BaseException as err:
            manifest.record_stage(name, f"failed: {err}")
            manifest.save(manifest_path)
            raise
        timings[name] = time.perf_counter() - t0
        manifest.record_stage(name, f"ok ({timings[name]:.1f}s)")
        manifest.save(manifest_path)

    def gen_data():
        grid = _grid_from_config(cfg)
        state["train"] = build_dataset(cfg.data.train_re, grid, role="train")
        state["test"] = build_dataset(cfg.data.test_re, grid, role="test")
        from .burgers import write_dataset

        for name in ("train", "test"):
            blob = write_dataset(state[name])
            atomic_write_bytes(out / "data" / f"{name}.brom", blob)
            manifest.record("datasets", name, sha256_bytes(blob))

    def fit_cae():
        c = cfg.cae
        model, history = train_cae(state["train"], config=TrainConfig(
            batch_size=c.batch_size, learning_rate=c.learning_rate,
            validation_fraction=c.validation_fraction, patience=c.patience,
            max_epochs=c.max_epochs, seed=c.seed,
        ))
        state["cae"] = model
        state["cae_history"] = history
        manifest.record("hyperparameters", "cae_best_epoch", history.best_epoch)
        manifest.record("hyperparameters", "cae_best_val_mse", f"{history.best_val_loss:.6e}")
        lines = ["epoch,train_mse,val_mse"]
        lines += [f"{e},{float(tr)!r},{float(vl)!r}" for e, tr, vl in
                  zip(history.epochs, history.train_loss, history.val_loss)]
        atomic_write_text(out / "cae" / "training_history.csv", "\n".join(lines) + "\n")

    def encode():
        state["latents_train"] = encode_dataset(state["cae"], state["train"])
        state["latents_test"] = encode_dataset(state["cae"], state["test"])
        mean, std = latent_affine(state["latents_train"])
        state["latent_mean"], state["latent_std"] = mean, std
        manifest.record("hyperparameters", "latent_mean", ",".join(f"{v:.9e}" for v in mean))
        manifest.record("hyperparameters", "latent_std", ",".join(f"{v:.9e}" for v in std))
        for name in ("train", "test"):
            rows = ["re,t,y1,y2"]
            for traj in state[f"latents_{name}"]:
                rows += [f"{traj.reynolds!r},{float(t)!r},{float(v[0])!r},{float(v[1])!r}"
                         for t, v in zip(traj.times, traj.values)]
            atomic_write_text(out / "latents" / f"{name}.csv", "\n".join(rows) + "\n")

    def tune():
        nu_record = NuRecord(mode=cfg.reservoir.nu_mode, re_max=cfg.reservoir.re_max)
        state["nu_record"] = nu_record
        state["latents_train_std"] = standardize_trajectories(
            state["latents_train"], state["latent_mean"], state["latent_std"])
        hyper, history = select_hyperparameters(cfg, state["latents_train_std"], nu_record)
        state["hyper"] = hyper
        if history is not None:
            atomic_write_text(out / "bayesopt" / "history.csv",
                              history_to_csv(history, default_search_box()))
        for k, v in hyper.as_dict().items():
            manifest.record("hyperparameters", f"rc_{k}", f"{v:.6g}")

    def fit_rc():
        state["rc"] = train_rc(
            state["latents_train_std"], state["hyper"], seed=cfg.reservoir.seed,
            n_nodes=cfg.reservoir.n_nodes, washout=cfg.reservoir.washout,
            nu_record=state["nu_record"],
        )
        errs = one_step_errors(state["rc"], state["latents_train_std"],
                               washout=cfg.reservoir.washout)
        state["rc_errors_std"] = errs
        mse_raw = (errs**2).mean(axis=0) * state["latent_std"] ** 2
        manifest.record("hyperparameters", "rc_one_step_mse",
                        ",".join(f"{v:.6e}" for v in mse_raw))

    def fit_flow():
        if not cfg.flow.enabled:
            state["flow"] = None
            return
        f = cfg.flow
        model = train_flow(state["rc_errors_std"], FlowConfig(
            bins=f.bins, bound=f.bound, hidden=f.hidden,
            learning_rate=f.learning_rate, iterations=f.iterations,
        ), seed=f.seed)
        state["flow"] = model
        lines = ["iteration,nll"] + [f"{i},{v!r}" for i, v in enumerate(model.loss_history)]
        atomic_write_text(out / "flow" / "loss_history.csv", "\n".join(lines) + "\n")

    def assemble():
        state["surrogate"] = SurrogateModel(
            cae=state["cae"], reservoir=state["rc"], flow=state["flow"],
            grid=_grid_from_config(cfg), latent_mean=state["latent_mean"],
            latent_std=state["latent_std"],
        )
        paths = save_surrogate(state["surrogate"], out)
        for name, p in paths.items():
            manifest.record("checkpoints", name, str(p))

    def evaluate():
        seeds = list(cfg.evaluate.rollout_seeds)
        model = state["surrogate"]
        for role in ("train", "test"):
            result = evaluate_dataset(model, state[role], seeds, role=role)
            state[f"eval_{role}"] = result
            _emit_evaluation(result, out, cfg.evaluate.heatmap_style)
        gdir = out / "figures"
        plot_metric_lines(
            [state["eval_train"].series_by_kind("L_CAE"),
             state["eval_train"].series_by_kind("L_CAE-RC-NF"),
             state["eval_test"].series_by_kind("L_CAE"),
             state["eval_test"].series_by_kind("L_CAE-RC-NF")],
            gdir / "reconstruction_error.svg", "Reconstruction error",
        )
        plot_metric_lines(
            [state["eval_train"].series_by_kind("L_RC-NF_1"),
             state["eval_train"].series_by_kind("L_RC-NF_2"),
             state["eval_test"].series_by_kind("L_RC-NF_1"),
             state["eval_test"].series_by_kind("L_RC-NF_2")],
            gdir / "latent_prediction_error.svg", "Latent prediction error",
        )

    def experiments():
        model = state["surrogate"]
        seeds = list(cfg.evaluate.rollout_seeds)
        grid = model.grid
        for re_value in cfg.evaluate.experiment_re:
            matches = [f for f in state["test"].fields if f.reynolds == re_value]
            ref = matches[0] if matches else analytic_field(re_value, grid)
            mini = ParametricDataset(fields=(ref,), role=f"re{re_value:g}")
            result = evaluate_dataset(model, mini, seeds, role=f"re{re_value:g}")
            state[f"eval_re{re_value:g}"] = result
            _emit_evaluation(result, out, cfg.evaluate.heatmap_style)
            _emit_experiment_exports(model, ref, result, out, seeds,
                                     cfg.evaluate.heatmap_style)
            composed = result.series_by_kind("L_CAE-RC-NF")
            post = composed.values[T_WARM:]
            manifest.record("hyperparameters", f"caercnf_time_avg_re{re_value:g}",
                            f"{post.mean():.6e}")

    stage("gen-data", gen_data)
    stage("train-cae", fit_cae)
    stage("encode", encode)
    stage("tune-rc", tune)
    stage("train-rc", fit_rc)
    stage("train-nf", fit_flow)
    stage("assemble", assemble)
    stage("evaluate", evaluate)
    stage("experiments", experiments)
    manifest.save(manifest_path)
    evaluations = {k.removeprefix("eval_"): v for k, v in state.items()
                   if k.startswith("eval_")}
    return ExperimentResult(
        manifest=manifest,
        surrogate=state["surrogate"],
        evaluations=evaluations,
        datasets={"train": state["train"], "test": state["test"]},
        timings=timings,
    )
