"""Experiment orchestration: configuration, the full training pipeline, artifacts.

A run executes, in order: head-stage training with trajectory snapshots, the
instant-performance mode search, the sensitivity pass, and the main loop with
per-step moving-average sampling plus embedded-parameter reconstruction and
per-epoch coefficient updates and embedding events. Every artifact a run
produces is derived from the config and the single global seed.
"""

from __future__ import annotations

import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, cmd, sensitivity, sma, stdet, toymodel, trainer
from .paramstore import (
    FlatParams,
    TrajectorySnapshotLog,
    record_snapshot,
    write_mask_file,
    write_snapshot_file,
)
from .seeds import child_seed
from .stdet import EmbedConfig, EmbedLog
from .toymodel import ToyCodecConfig
from .trainer import TrainConfig, TrainHooks

METHOD_SGD = "sgd"
METHOD_PROPOSED = "proposed"
METHOD_SGD_EMA = "sgd+ema"
METHOD_SGD_SMA = "sgd+sma"
METHOD_STDET_ONLY = "stdet-only"
METHODS = (METHOD_SGD, METHOD_PROPOSED, METHOD_SGD_EMA, METHOD_SGD_SMA, METHOD_STDET_ONLY)

STAGE_SETUP = "setup"
STAGE_TRAINING = "training"
STAGE_MODE_SEARCH = "mode_search"
STAGE_SENSITIVITY = "sensitivity"
STAGE_ARTIFACTS = "artifacts"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    """Flat key-value run configuration; defaults mirror the reference protocol."""

    method: str = METHOD_PROPOSED
    seed: int = 0
    workers: int = 1
    # model
    input_dim: int = 64
    hidden_dim: int = 32
    latent_dim: int = 16
    hyper_dim: int = 8
    rd_lambda: float = 0.0018
    distortion_scale: float = 255.0**2
    # training
    epochs: int = 70
    steps_per_epoch: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_factor: float = 0.5
    lr_patience: int = 5
    grad_clip: float = 2.0
    update_rule: str = trainer.RULE_ADAM
    eval_batch_size: int = 64
    # mode decomposition
    mode_candidates: list[int] = field(default_factory=lambda: [8, 16, 24, 32])
    sample_factor: int = 200
    saturation_threshold: float = 0.001
    # sensitivity
    sensitivity_samples: int = 64
    sigma_frac: float = 0.05
    nonembeddable_fraction: float = 0.25
    sensitivity_mode: str = sensitivity.MODE_HALF_HALF
    # embedding schedule
    head_epochs: int = 20
    embed_period: int = 1
    embed_percent: float = 0.01
    dummy_cap: float = 0.25
    p_schedule: str = stdet.SCHEDULE_CONSTANT
    # moving average
    sma_alpha: float = 0.8
    sma_interval: int = 5
    # diagnostics
    hist_interval: int = 10
    init_snapshot: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f for f in RunConfig.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**data)

    def model_config(self) -> ToyCodecConfig:
        return ToyCodecConfig(
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            latent_dim=self.latent_dim,
            hyper_dim=self.hyper_dim,
            rd_lambda=self.rd_lambda,
            distortion_scale=self.distortion_scale,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_factor=self.lr_factor,
            lr_patience=self.lr_patience,
            grad_clip=self.grad_clip,
            update_rule=self.update_rule,
            eval_batch_size=self.eval_batch_size,
            seed=self.seed,
        )

    def embed_config(self) -> EmbedConfig:
        return EmbedConfig(
            head_epochs=self.head_epochs,
            period=self.embed_period,
            percent=self.embed_percent,
            dummy_cap=self.dummy_cap,
            p_schedule=self.p_schedule,
            total_epochs=self.epochs,
        )


def _versions() -> dict:
    import scipy

    return {
        "modetrain": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


class _Pipeline:
    """Mutable state threaded through the trainer hooks for one run."""

    def __init__(self, config: RunConfig, out_dir: Path):
        self.config = config
        self.out = out_dir
        self.model_cfg = config.model_config()
        self.uses_sma = config.method in (METHOD_PROPOSED, METHOD_SGD_SMA)
        self.uses_ema = config.method == METHOD_SGD_EMA
        self.uses_stdet = config.method in (METHOD_PROPOSED, METHOD_STDET_ONLY)
        self.degenerate = self.uses_stdet and config.head_epochs >= config.epochs
        self.sma_state: sma.SmaState | None = None
        self.decomp: cmd.ModeDecomposition | None = None
        self.emb_state: stdet.EmbeddingState | None = None
        self.search: cmd.CmdSearchResult | None = None
        self.sens_report: sensitivity.SensitivityReport | None = None
        self.traj_log = TrajectorySnapshotLog()
        self.embed_log = EmbedLog()
        self.coef_snapshots: dict[int, np.ndarray] = {}
        self.stage = STAGE_SETUP

    # hook bodies -----------------------------------------------------------

    def trainable_mask(self):
        return self.emb_state.trainable_mask() if self.emb_state is not None else None

    def post_step(self, params: FlatParams, epoch: int, step: int) -> None:
        if self.sma_state is not None:
            sma.sma_maybe_update(self.sma_state, params)
        if self.emb_state is not None and self.decomp is not None:
            stdet.apply_embedded(params, self.emb_state, self.decomp)

    def post_epoch(self, params: FlatParams, epoch: int) -> None:
        cfg = self.config
        if self.uses_stdet and not self.degenerate:
            if epoch <= cfg.head_epochs:
                record_snapshot(self.traj_log, params, epoch)
            if epoch == cfg.head_epochs:
                self._decompose_and_mask(params)
            elif epoch > cfg.head_epochs and self.decomp is not None:
                self._stdet_epoch(params, epoch)

    def eval_params(self, params: FlatParams) -> FlatParams:
        if self.uses_ema and self.sma_state is not None:
            return FlatParams(self.sma_state.w_sma.copy(), list(params.layers))
        return params

    # stage bodies ----------------------------------------------------------

    def _decompose_and_mask(self, params: FlatParams) -> None:
        cfg = self.config
        self.stage = STAGE_MODE_SEARCH
        trajectories = self.traj_log.param_trajectories()
        samples = toymodel.generate_batch(cfg.sensitivity_samples, cfg.input_dim,
                                          child_seed(cfg.seed, "sens-samples"))
        self.search = cmd.select_hyperparams(
            cfg.mode_candidates, trajectories, params, self.model_cfg, samples,
            seed=cfg.seed, sample_factor=cfg.sample_factor,
            threshold=cfg.saturation_threshold)
        self.decomp = self.search.decomposition
        self.stage = STAGE_SENSITIVITY
        mask, report = sensitivity.compute_embeddable_mask(
            self.model_cfg, params, samples,
            mode=cfg.sensitivity_mode, sigma_frac=cfg.sigma_frac,
            nonembeddable_fraction=cfg.nonembeddable_fraction,
            seed=child_seed(cfg.seed, "sensitivity"))
        self.sens_report = report
        self.emb_state = stdet.init_state(self.decomp, mask, cfg.embed_config())
        self.coef_snapshots[cfg.head_epochs] = self.decomp.coef_k.copy()
        self.stage = STAGE_TRAINING

    def _stdet_epoch(self, params: FlatParams, epoch: int) -> None:
        cfg = self.config
        frozen = self.emb_state.status == stdet.STATUS_TRUE_EMBEDDED
        cmd.update_coefficients(self.decomp, params.values, frozen=frozen)
        if (epoch - cfg.head_epochs) % cfg.embed_period == 0:
            change = stdet.long_term_change(self.decomp.coef_k, self.decomp.coef_d,
                                            self.emb_state)
            new_true = stdet.true_embed_step(self.emb_state, change, epoch, self.decomp)
            stdet.apply_embedded(params, self.emb_state, self.decomp)
            new_dummy = stdet.dummy_embed_step(self.emb_state, change, epoch,
                                               self.decomp, params)
            trainable = int(self.emb_state.trainable_mask().sum())
            self.embed_log.append(epoch, new_true.size, new_dummy.size, trainable)
        if (epoch - cfg.head_epochs) % cfg.hist_interval == 0 or epoch == cfg.epochs:
            self.coef_snapshots[epoch] = self.decomp.coef_k.copy()


def run_experiment(config: RunConfig, out_dir, plot: bool = False) -> dict:
    """Execute one run and write its artifacts; returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipe = _Pipeline(config, out)
    manifest_path = out / "manifest.json"

    def fail(stage: str, exc: BaseException):
        _write_manifest(manifest_path, config, status="failed", failure_stage=stage,
                        degenerate=pipe.degenerate)
        raise StageError(stage, exc)

    try:
        model_cfg = config.model_config()
        train_cfg = config.train_config()
        initial = None
        if config.init_snapshot:
            from .paramstore import read_snapshot_file

            loaded = read_snapshot_file(config.init_snapshot)
            initial = FlatParams(loaded.rows[-1].copy(), toymodel.build_layers(model_cfg))
        params0 = initial if initial is not None else toymodel.init_params(
            model_cfg, child_seed(config.seed, "init"))
        if config.method in (METHOD_PROPOSED, METHOD_SGD_SMA, METHOD_SGD_EMA):
            pipe.sma_state = sma.sma_init(params0, config.sma_alpha, config.sma_interval,
                                          sync=not pipe.uses_ema)
    except StageError:
        raise
    except Exception as exc:
        fail(STAGE_SETUP, exc)

    pipe.stage = STAGE_TRAINING
    hooks = TrainHooks(
        trainable_mask=pipe.trainable_mask,
        post_step=pipe.post_step,
        post_epoch=pipe.post_epoch,
        eval_params=pipe.eval_params,
    )
    try:
        metrics, final_params = trainer.train(model_cfg, train_cfg, hooks,
                                              initial_params=params0)
    except StageError:
        raise
    except Exception as exc:
        fail(pipe.stage, exc)

    try:
        summary = _write_artifacts(pipe, metrics, final_params, plot)
    except Exception as exc:
        fail(STAGE_ARTIFACTS, exc)
    return summary


def _write_artifacts(pipe: _Pipeline, metrics, final_params: FlatParams,
                     plot: bool) -> dict:
    cfg = pipe.config
    out = pipe.out
    metrics.write_csv(out / "metrics.csv")

    final_log = TrajectorySnapshotLog()
    record_snapshot(final_log, pipe.eval_params(final_params), cfg.epochs)
    write_snapshot_file(final_log, out / "final_params.trj")

    search_info = None
    if pipe.uses_stdet and not pipe.degenerate and pipe.search is not None:
        diag = out / "diagnostics"
        diag.mkdir(exist_ok=True)
        write_snapshot_file(pipe.traj_log, out / "trajectories.trj")
        pipe.embed_log.write_csv(out / "embedding_log.csv")
        cmd.write_clustered_correlation_csv(diag / "clustered_correlation.csv", pipe.decomp)
        if pipe.coef_snapshots:
            cmd.write_coefficient_change_histogram(
                diag / "coefficient_change_hist.csv", pipe.coef_snapshots,
                pipe.decomp.coef_k)
        sensitivity.write_layer_deltas_csv(
            diag / "layer_deltas.csv", final_params, pipe.sens_report.layer_deltas,
            pipe.sens_report.selected_layers)
        write_mask_file(pipe.sens_report.embeddable_mask, diag / "embeddable_mask.bits")
        _write_mode_search_csv(diag / "mode_search.csv", pipe.search, cfg.sample_factor)
        search_info = {
            "chosen_m": pipe.search.chosen_m,
            "chosen_s": pipe.search.chosen_s,
            "candidate_m": pipe.search.candidate_m,
            "candidate_losses": pipe.search.candidate_losses,
            "stop_reason": pipe.search.stop_reason,
        }

    _write_manifest(out / "manifest.json", cfg, status="ok", failure_stage=None,
                    degenerate=pipe.degenerate, search=search_info)
    if plot:
        from .report import render_loss_curve

        render_loss_curve(metrics, out / "loss_curve.svg")

    embedded_final = (pipe.emb_state.embedded_fraction()
                      if pipe.emb_state is not None else 0.0)
    return {
        "out_dir": str(out),
        "final_eval_loss": metrics.rows[-1]["eval_loss"],
        "final_train_loss": metrics.rows[-1]["train_loss"],
        "embedded_fraction": embedded_final,
        "degenerate_no_embedding": pipe.degenerate,
        "search": search_info,
    }


def _write_mode_search_csv(path, search: cmd.CmdSearchResult, sample_factor: int) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "s", "instant_loss", "chosen"])
        for m, loss in zip(search.candidate_m, search.candidate_losses):
            w.writerow([m, sample_factor * m, repr(loss), int(m == search.chosen_m)])


def _write_manifest(path, config: RunConfig, status: str, failure_stage: str | None,
                    degenerate: bool, search: dict | None = None) -> None:
    manifest = {
        "status": status,
        "failure_stage": failure_stage,
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": _versions(),
        "degenerate_no_embedding": degenerate,
        "search": search,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
