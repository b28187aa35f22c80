"""Analytic FLOP counts for the decoder FFN (dense vs MoE) with one MAC = 2 FLOPs."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..model import ModelConfig
from ..routing import MoEConfig, Strategy

MAC = 2


def dense_ffn_flops(d_model: int, d_ff: int, tokens: int) -> int:
    """One FFN (two linear layers) over ``tokens`` tokens."""
    return MAC * 2 * d_model * d_ff * tokens


def router_logits(moe: MoEConfig) -> int:
    """Router outputs computed per token.

    Flat: one logit per expert. Hierarchical: the inter-group logits plus the
    intra logits of the m groups a token visits. Hard: an AV token runs both
    group routers, which is the worst case counted here.
    """
    if moe.strategy is Strategy.FLAT:
        return moe.n_experts
    if moe.strategy is Strategy.HIERARCHICAL:
        return moe.n_groups + moe.m_groups * moe.experts_per_group
    if moe.strategy is Strategy.HARD:
        return moe.n_experts
    return 0


def router_flops(d_model: int, n_logits: int, tokens: int) -> int:
    return MAC * d_model * n_logits * tokens


def attention_flops(d_model: int, frames: int, tokens: int) -> int:
    """Single-head cross-attention: q/o projections on tokens, k/v on frames, scores and mixing."""
    proj = MAC * d_model * d_model * (2 * tokens + 2 * frames)
    return proj + MAC * 2 * tokens * frames * d_model


@dataclass
class FlopsReport:
    dense_ffn: float  # MFLOPs, one decoder layer, one sequence
    moe_ffn: float  # MFLOPs including router
    router: float
    activated_experts: int
    attention: float  # informational
    n_layers: int
    assumptions: dict[str, str] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.moe_ffn / self.dense_ffn

    @property
    def total_dense(self) -> float:
        return self.n_layers * (self.attention + self.dense_ffn)

    @property
    def total_moe(self) -> float:
        return self.n_layers * (self.attention + self.moe_ffn)

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("dense_ffn_mflops", self.dense_ffn),
            ("moe_ffn_mflops", self.moe_ffn),
            ("router_mflops", self.router),
            ("activated_experts", float(self.activated_experts)),
            ("moe_over_dense", self.ratio),
            ("attention_mflops", self.attention),
            ("decoder_total_dense_mflops", self.total_dense),
            ("decoder_total_moe_mflops", self.total_moe),
        ]


def flops(cfg: ModelConfig | MoEConfig, frames: int = 500, text_tokens: int = 50) -> FlopsReport:
    """Per-sequence FLOPs in MFLOPs. ``cfg`` may be a full model config or just its MoE block."""
    moe = cfg.moe if isinstance(cfg, ModelConfig) else cfg
    n_layers = cfg.n_layers if isinstance(cfg, ModelConfig) else 1
    d, d_ff = moe.d_model, moe.d_ff
    if min(d, d_ff, frames, text_tokens) < 1:
        raise ValueError("dimensions, frames and tokens must be positive")
    dense = dense_ffn_flops(d, d_ff, text_tokens)
    k = moe.activated_experts()
    router = router_flops(d, router_logits(moe), text_tokens)
    moe_total = k * dense + router
    return FlopsReport(
        dense_ffn=dense / 1e6,
        moe_ffn=moe_total / 1e6,
        router=router / 1e6,
        activated_experts=k,
        attention=attention_flops(d, frames, text_tokens) / 1e6,
        n_layers=n_layers,
        assumptions={
            "frames": str(frames),
            "text_tokens": str(text_tokens),
            "flops_per_mac": str(MAC),
            "strategy": moe.strategy.value,
        },
    )
