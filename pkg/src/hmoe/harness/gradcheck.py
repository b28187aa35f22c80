"""Central-difference check of the full training objective for each routing strategy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..losses import LossWeights
from ..model import Model, ModelConfig, masks_for
from ..numkernel import GradCheckReport, finite_diff_check
from ..routing import Modality, MoEConfig, Strategy
from ..synthdata import TaskConfig, batch_rng, generate_batch
from .train import batch_loss

# Sequence tags per strategy: hierarchical sees one audio-only and one
# video-only sequence so the load-biasing term is live; hard routing mixes an
# AV sequence (split top-k) with a unimodal one.
CHECK_TAGS = {
    Strategy.FLAT: (Modality.AV, Modality.VIDEO),
    Strategy.HARD: (Modality.AV, Modality.AUDIO),
    Strategy.HIERARCHICAL: (Modality.AUDIO, Modality.VIDEO),
    Strategy.DENSE: (Modality.AV, Modality.AUDIO),
}


def small_config(strategy: Strategy | str, seed: int = 0, init_std: float = 0.3) -> tuple[ModelConfig, TaskConfig]:
    """A model of a few thousand parameters on 2 sequences x 2 tokens."""
    strategy = Strategy(strategy)
    task = TaskConfig(vocab_size=6, n_clusters=2, seq_len=2, d_audio=4, d_video=4, sigma_video=0.1, seed=seed)
    moe = MoEConfig(n_groups=2, experts_per_group=2, k_flat=2, m_groups=2, k_within=(1, 1), strategy=strategy)
    cfg = ModelConfig(
        d_model=8,
        d_ff=16,
        n_layers=2,
        vocab_size=task.vocab_size,
        max_len=8,
        d_audio=task.d_audio,
        d_video=task.d_video,
        init_std=init_std,
        proj_init="fixed",
        seed=seed,
        moe=moe,
    )
    return cfg, task


@dataclass
class StrategyCheck:
    strategy: Strategy
    n_parameters: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        r = self.report
        status = "PASS" if self.passed else "FAIL"
        worst = f"{r.worst[0]}[{r.worst[1]}]" if r.worst else "-"
        return (
            f"{status} {self.strategy.value:<12} params={self.n_parameters} checked={r.n_checked} "
            f"skipped={len(r.skipped)} max_rel_err={r.max_rel_error:.3e} worst={worst}"
        )


def gradcheck(
    strategy: Strategy | str,
    seed: int = 0,
    tolerance: float = 1e-5,
    eps: float = 1e-5,
    weights: LossWeights | None = None,
) -> StrategyCheck:
    """Check d L_tot / d theta for every parameter of a small model."""
    cfg, task = small_config(strategy, seed)
    model = Model(cfg)
    rng = batch_rng(seed, 0, stream=3)
    batch = generate_batch(task, 2, rng, audio_sigma=np.array([0.0, 0.2]))
    tags = np.array([int(t) for t in CHECK_TAGS[cfg.moe.strategy]])
    masks = masks_for(tags)
    w = weights or LossWeights()

    def objective():
        res = batch_loss(model, batch, tags, masks, w)
        return res.loss.total, res.out.signature()

    report = finite_diff_check(objective, model.parameters(), eps=eps, tolerance=tolerance)
    return StrategyCheck(strategy=cfg.moe.strategy, n_parameters=model.n_parameters(), report=report)


def gradcheck_all(seed: int = 0, tolerance: float = 1e-5) -> list[StrategyCheck]:
    return [gradcheck(s, seed, tolerance) for s in (Strategy.FLAT, Strategy.HARD, Strategy.HIERARCHICAL)]
