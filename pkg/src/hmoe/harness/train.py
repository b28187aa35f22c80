"""Training loop, run configuration and metrics logging."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import config as cfgio
from .. import numkernel as nk
from ..checkpoint import save_checkpoint
from ..errors import ConfigError, NumericError
from ..losses import LossBreakdown, LossWeights, layer_losses, total_loss
from ..model import ForwardOutput, Model, ModelConfig, modality_dropout
from ..routing import Modality, Strategy
from ..synthdata import SNR_GRID, SampleBatch, TaskConfig, batch_rng, generate_batch, training_noise
from .optim import Adam

log = logging.getLogger(__name__)

CONDITIONS = {"A": Modality.AUDIO, "V": Modality.VIDEO, "AV": Modality.AV}


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossWeights = field(default_factory=LossWeights)
    z_routers: str = "all"  # comma-separated router names, or "all"
    noise_fraction: float = 0.25
    noise_snr_mean: float = 0.0
    noise_snr_std: float = 5.0
    eval_snrs: tuple[float, ...] = SNR_GRID
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")
        for name in ("c_B", "c_S", "c_Z"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.model.__post_init__()
        self.model.d_audio = self.task.d_audio
        self.model.d_video = self.task.d_video
        self.model.vocab_size = self.task.vocab_size

    def with_seed(self, seed: int) -> RunConfig:
        """Copy with every seed set to ``seed``."""
        values = cfgio.flatten(self)
        values.update({"model.seed": str(seed), "task.seed": str(seed), "train.seed": str(seed)})
        return cfgio.apply(RunConfig(), values)

    def copy(self, **overrides: str) -> RunConfig:
        values = cfgio.flatten(self)
        values.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return cfgio.apply(RunConfig(), values)


def z_router_names(spec: str) -> list[str] | None:
    return None if spec.strip() == "all" else [s.strip() for s in spec.split(",") if s.strip()]


@dataclass
class StepResult:
    loss: LossBreakdown
    out: ForwardOutput


def batch_loss(
    model: Model,
    batch: SampleBatch,
    tags: np.ndarray,
    masks: np.ndarray,
    weights: LossWeights,
    z_routers: list[str] | None = None,
) -> StepResult:
    """Forward pass plus total objective; call inside an active tape to train."""
    enc = model.encode(batch.audio, batch.video, masks)
    out = model.forward(enc, model.teacher_inputs(batch.tokens), tags)
    ce = nk.cross_entropy(out.logits, batch.tokens.ravel())
    lbs, lss, lzs = [], [], []
    for sel in out.selections:
        if sel is None:
            continue
        lb, ls, lz = layer_losses(sel, out.token_tags, z_routers)
        lbs.append(lb)
        lss.append(ls)
        lzs.append(lz)
    return StepResult(loss=total_loss(ce, lbs, lss, lzs, weights), out=out)


def group_shares(out: ForwardOutput) -> dict[str, float]:
    """Mean group mass per (layer, condition) over the tokens present."""
    row = {}
    for i, sel in enumerate(out.selections):
        if sel is None or sel.group_weight is None:
            continue
        for cname, mod in CONDITIONS.items():
            hit = out.token_tags == mod
            for g in range(sel.group_weight.shape[1]):
                key = f"layer{i}_{cname}_g{g}"
                row[key] = float(sel.group_weight[hit, g].mean()) if hit.any() else math.nan
    return row


def training_batch(run: RunConfig, step: int) -> tuple[SampleBatch, np.ndarray, np.ndarray]:
    tr, task = run.train, run.task
    rng = batch_rng(tr.seed, step, stream=1)
    sigma = training_noise(
        rng, tr.batch_size, task.audio_rms, tr.noise_fraction, tr.noise_snr_mean, tr.noise_snr_std
    )
    batch = generate_batch(task, tr.batch_size, rng, audio_sigma=sigma)
    masks, tags = modality_dropout(tr.batch_size, rng, run.model.dropout_prob, run.model.audio_only_share)
    return batch, masks, tags


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict[str, float]]
    out_dir: Path | None


def train(run: RunConfig, write: bool = True, log_every: int = 0) -> TrainResult:
    """Train from scratch; writes config, metrics.csv and checkpoint.hmoe under ``out_dir``."""
    run.train.validate()
    run.task.validate()
    tr = run.train
    model = Model(run.model)
    opt = Adam(model.parameters(), tr.lr, tr.beta1, tr.beta2, tr.adam_eps)
    zr = z_router_names(tr.z_routers)
    out_dir = Path(tr.out_dir) if write else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(cfgio.dumps(run), encoding="utf-8")

    metrics: list[dict[str, float]] = []
    for step in range(tr.steps):
        batch, masks, tags = training_batch(run, step)
        with nk.Tape(check_finite=False) as tape:
            try:
                res = batch_loss(model, batch, tags, masks, tr.loss, zr)
            except NumericError:
                _abort(model, opt, out_dir, step)
                raise
        model.zero_grad()
        tape.backward(res.loss.total)
        try:
            opt.step()
        except NumericError:
            _abort(model, opt, out_dir, step)
            raise
        row = {
            "step": step,
            "L_CE": res.loss.ce,
            "L_B": res.loss.lb,
            "L_S": res.loss.ls,
            "L_Z": res.loss.lz,
            "L_tot": res.loss.tot,
        }
        row.update(group_shares(res.out))
        metrics.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d  L_tot %.4f  L_CE %.4f  L_S %.4f", step, res.loss.tot, res.loss.ce, res.loss.ls)

    if out_dir is not None:
        write_metrics(out_dir / "metrics.csv", metrics)
        save_checkpoint(model, out_dir / "checkpoint.hmoe", optimizer=opt.state(), meta={"steps": str(tr.steps)})
    return TrainResult(model=model, metrics=metrics, out_dir=out_dir)


def _abort(model: Model, opt: Adam, out_dir: Path | None, step: int) -> None:
    log.error("divergence at step %d; keeping last good parameters", step)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.hmoe", optimizer=opt.state(), meta={"aborted_at": str(step)})


def write_metrics(path: Path, rows: list[dict[str, float]]) -> None:
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys or ["step"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def is_grouped(strategy: Strategy) -> bool:
    return strategy in (Strategy.HARD, Strategy.HIERARCHICAL)
