"""Greedy-decoding token error over an SNR grid."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numkernel as nk
from ..errors import ConfigError
from ..model import Model, masks_for
from ..routing import Modality
from ..synthdata import SNR_GRID, SampleBatch, TaskConfig, batch_rng, generate_batch, snr_to_sigma

EVAL_STREAM = 2

CONDITION_TAGS = {"A": Modality.AUDIO, "V": Modality.VIDEO, "AV": Modality.AV}


def eval_batch(task: TaskConfig, snr_db: float | None, n_sequences: int, seed: int, cell: int = 0) -> SampleBatch:
    """Held-out batch for one grid cell; ``snr_db=None`` means clean audio."""
    rng = batch_rng(seed, cell, stream=EVAL_STREAM)
    sigma = 0.0 if snr_db is None else snr_to_sigma(snr_db, task.audio_rms)
    if snr_db is not None and math.isinf(snr_db) and snr_db < 0:
        raise ConfigError("use a large finite negative SNR instead of -inf")
    return generate_batch(task, n_sequences, rng, audio_sigma=sigma)


def condition_tags(condition: str, n: int) -> np.ndarray:
    if condition not in CONDITION_TAGS:
        raise ConfigError(f"unknown condition {condition!r}; expected one of {sorted(CONDITION_TAGS)}")
    return np.full(n, int(CONDITION_TAGS[condition]))


@dataclass
class DecodeResult:
    error: float
    nll: float  # teacher-forced mean negative log-likelihood, used to break ties
    predictions: np.ndarray


def decode(model: Model, batch: SampleBatch, condition: str = "AV", **route_kw) -> DecodeResult:
    """Greedy decode ``batch`` under ``condition`` and score it against the targets."""
    tags = condition_tags(condition, len(batch))
    enc = model.encode(batch.audio, batch.video, masks_for(tags))
    pred = model.greedy_decode(enc, tags, batch.tokens.shape[1], **route_kw)
    out = model.forward(enc, model.teacher_inputs(batch.tokens), tags, **route_kw)
    nll = nk.cross_entropy(out.logits, batch.tokens.ravel()).item()
    return DecodeResult(error=float((pred != batch.tokens).mean()), nll=nll, predictions=pred)


@dataclass
class EvalRow:
    snr_db: float | None
    condition: str
    seed: int
    error: float
    nll: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def errors(self, condition: str = "AV") -> dict[float | None, list[float]]:
        out: dict[float | None, list[float]] = {}
        for r in self.rows:
            if r.condition == condition:
                out.setdefault(r.snr_db, []).append(r.error)
        return out

    def summary(self, condition: str = "AV") -> dict[float | None, tuple[float, float]]:
        """(mean, seed standard deviation) of the error per SNR."""
        out = {}
        for snr, errs in self.errors(condition).items():
            e = np.asarray(errs)
            out[snr] = (float(e.mean()), float(e.std(ddof=1)) if e.size > 1 else 0.0)
        return out

    def mean_error(self, condition: str = "AV") -> float:
        return float(np.mean([r.error for r in self.rows if r.condition == condition]))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["snr_db", "condition", "seed", "token_error", "nll"])
            for r in self.rows:
                w.writerow([_snr_text(r.snr_db), r.condition, r.seed, repr(r.error), repr(r.nll)])
            for cond in sorted({r.condition for r in self.rows}):
                for snr, (mean, std) in self.summary(cond).items():
                    w.writerow([_snr_text(snr), cond, "mean", repr(mean), ""])
                    w.writerow([_snr_text(snr), cond, "std", repr(std), ""])


def _distinct(tasks: list[TaskConfig]) -> list[TaskConfig]:
    out: list[TaskConfig] = []
    for t in tasks:
        if t not in out:
            out.append(t)
    return out


def _snr_text(snr: float | None) -> str:
    return "clean" if snr is None else repr(float(snr))


def evaluate(
    models: Model | Sequence[Model],
    task: TaskConfig | Sequence[TaskConfig],
    snrs: Sequence[float | None] = SNR_GRID,
    conditions: Sequence[str] = ("AV",),
    n_sequences: int = 128,
    eval_seed: int = 12345,
    seeds: Sequence[int] | None = None,
    **route_kw,
) -> EvalReport:
    """Token error per (SNR, condition) for one or more trained models (one per seed).

    ``task`` is one config shared by all models or one per model; each model must
    be scored on the codebook it was trained on. Batches draw from the same
    held-out stream per grid cell, so seed variance reflects training only.
    """
    models = [models] if isinstance(models, Model) else list(models)
    tasks = [task] * len(models) if isinstance(task, TaskConfig) else list(task)
    if len(tasks) != len(models):
        raise ConfigError(f"{len(tasks)} task configs for {len(models)} models")
    seeds = list(seeds) if seeds is not None else [m.cfg.seed for m in models]
    uniq = _distinct(tasks)
    which = [uniq.index(t) for t in tasks]
    report = EvalReport()
    for cell, snr in enumerate(snrs):
        batches = [eval_batch(t, snr, n_sequences, eval_seed, cell) for t in uniq]
        for cond in conditions:
            for seed, model, i in zip(seeds, models, which):
                res = decode(model, batches[i], cond, **route_kw)
                report.rows.append(EvalRow(snr, cond, seed, res.error, res.nll))
    return report
