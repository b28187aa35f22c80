"""Routing analytics: inter-weighted expert load, group mass per condition and SNR, hard-weight sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..model import Model, masks_for
from ..routing import ExpertSelection, Strategy
from ..synthdata import SNR_GRID, TaskConfig
from .evaluate import condition_tags, decode, eval_batch


def expert_frequency(sel: ExpertSelection, n_experts: int) -> np.ndarray:
    """Selection frequency per expert, each hit weighted by its group's mass.

    For grouped strategies a token selecting expert j of group g contributes
    ``group_weight[t, g] / (experts picked in g)``; flat selections count
    ``1/k`` each. Either way every token contributes 1 in total.
    """
    freq = np.zeros(n_experts)
    counts = sel.counts()
    if sel.group_weight is None:
        np.add.at(freq, sel.expert, 1.0 / counts[sel.token])
    else:
        grp = sel.expert // sel.experts_per_group
        per_group = np.zeros(sel.group_weight.shape)
        np.add.at(per_group, (sel.token, grp), 1.0)
        w = sel.group_weight[sel.token, grp] / per_group[sel.token, grp]
        # renormalize per token so groups with zero mass but a selection don't leak
        tot = np.zeros(sel.n_tokens)
        np.add.at(tot, sel.token, w)
        np.add.at(freq, sel.expert, w / tot[sel.token])
    return freq / sel.n_tokens


@dataclass
class LoadRow:
    layer: int
    kind: str  # "expert" or "group"
    index: int
    condition: str
    snr_db: float | None
    value: float


@dataclass
class LoadReport:
    strategy: Strategy
    rows: list[LoadRow] = field(default_factory=list)

    def select(self, kind: str, condition: str, snr_db: float | None = None, layer: int | None = None) -> list[LoadRow]:
        return [
            r
            for r in self.rows
            if r.kind == kind
            and r.condition == condition
            and r.snr_db == snr_db
            and (layer is None or r.layer == layer)
        ]

    def group_mass(self, condition: str, group: int, snr_db: float | None = None) -> dict[int, float]:
        """Mass on ``group`` per layer."""
        return {r.layer: r.value for r in self.select("group", condition, snr_db) if r.index == group}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "kind", "index", "condition", "snr_db", "value"])
            for r in self.rows:
                snr = "clean" if r.snr_db is None else repr(float(r.snr_db))
                w.writerow([r.layer, r.kind, r.index, r.condition, snr, repr(r.value)])


def analyze_load(
    model: Model,
    task: TaskConfig,
    conditions: Sequence[str] = ("A", "V", "AV"),
    snrs: Sequence[float | None] = (None, *SNR_GRID),
    n_sequences: int = 128,
    eval_seed: int = 12345,
    **route_kw,
) -> LoadReport:
    """Expert frequencies and group mass per layer, condition and SNR on held-out batches.

    Flat checkpoints get expert frequencies only.
    """
    moe = model.cfg.moe
    report = LoadReport(strategy=moe.strategy)
    if moe.strategy is Strategy.DENSE:
        raise ConfigError("a dense model has no routing to analyze")
    for cell, snr in enumerate(snrs):
        batch = eval_batch(task, snr, n_sequences, eval_seed, cell)
        for cond in conditions:
            tags = condition_tags(cond, len(batch))
            enc = model.encode(batch.audio, batch.video, masks_for(tags))
            out = model.forward(enc, model.teacher_inputs(batch.tokens), tags, **route_kw)
            for layer, sel in enumerate(out.selections):
                freq = expert_frequency(sel, moe.n_experts)
                for e, v in enumerate(freq):
                    report.rows.append(LoadRow(layer, "expert", e, cond, snr, float(v)))
                if sel.group_weight is not None:
                    for g, v in enumerate(sel.group_weight.mean(axis=0)):
                        report.rows.append(LoadRow(layer, "group", g, cond, snr, float(v)))
    return report


@dataclass
class SweepRow:
    p_audio: float
    snr_db: float | None
    error: float
    nll: float


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)

    def argmin(self, snr_db: float | None) -> float:
        """Best audio weight at one noise level; error ties go to the lower NLL."""
        cands = [r for r in self.rows if r.snr_db == snr_db]
        if not cands:
            raise KeyError(f"no sweep rows at snr {snr_db}")
        return min(cands, key=lambda r: (r.error, r.nll)).p_audio

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["p_audio", "snr_db", "token_error", "nll"])
            for r in self.rows:
                snr = "clean" if r.snr_db is None else repr(float(r.snr_db))
                w.writerow([repr(r.p_audio), snr, repr(r.error), repr(r.nll)])


P_AUDIO_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


def hard_weight_sweep(
    model: Model,
    task: TaskConfig,
    grid: Sequence[float] = P_AUDIO_GRID,
    snrs: Sequence[float | None] = SNR_GRID,
    n_sequences: int = 128,
    eval_seed: int = 12345,
) -> SweepReport:
    """AV token error with audio-group weight ``p`` and visual-group weight ``1 - p``."""
    if model.cfg.moe.strategy is not Strategy.HARD:
        raise ConfigError(f"hard-weight sweep needs a hard-routing model, got {model.cfg.moe.strategy.value}")
    report = SweepReport()
    for cell, snr in enumerate(snrs):
        batch = eval_batch(task, snr, n_sequences, eval_seed, cell)
        for p in grid:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"audio weight {p} outside [0, 1]")
            res = decode(model, batch, "AV", audio_weight=float(p))
            report.rows.append(SweepRow(float(p), snr, res.error, res.nll))
    return report
