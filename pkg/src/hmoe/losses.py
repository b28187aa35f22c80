"""Auxiliary routing losses and the total training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .errors import NumericError, StatError
from .numkernel import Tensor
from .routing import AUDIO_GROUP, VISUAL_GROUP, ExpertSelection, Modality


@dataclass
class LoadStats:
    f: np.ndarray  # top-1 frequency per expert (detached)
    P: Tensor  # mean router probability per expert
    n_tokens: int

    @property
    def n_experts(self) -> int:
        return self.f.shape[0]


@dataclass
class GroupLoadStats:
    """Inter-router group frequency ``g`` and mean probability ``Q`` per unimodal subset."""

    g: dict[Modality, np.ndarray | None]
    Q: dict[Modality, Tensor | None]
    sizes: dict[Modality, int]

    def empty(self, modality: Modality) -> bool:
        return self.sizes.get(modality, 0) == 0


@dataclass
class LossWeights:
    c_B: float = 1e-2
    c_S: float = 1e-2
    c_Z: float = 1e-3


@dataclass
class LossBreakdown:
    ce: float
    lb: float
    ls: float
    lz: float
    tot: float
    total: Tensor
    weights: LossWeights
    per_layer: dict[str, list[float]] = field(default_factory=dict)


def expert_stats(probs: Tensor) -> LoadStats:
    if probs.shape[0] == 0:
        raise StatError("expert statistics over an empty batch")
    T, n = probs.shape
    f = np.bincount(probs.data.argmax(axis=-1), minlength=n) / T
    return LoadStats(f=f, P=nk.mean(probs, axis=0), n_tokens=T)


def load_balance_loss(stats: LoadStats | Sequence[LoadStats]) -> Tensor:
    """``n_experts * sum(f * P)``, summed over groups when given several."""
    if isinstance(stats, LoadStats):
        stats = [stats]
    terms = [nk.mul(nk.sum(nk.mul(s.P, s.f)), float(s.n_experts)) for s in stats]
    return _add_all(terms)


def z_loss(logits: Tensor | Sequence[Tensor]) -> Tensor:
    """Mean squared logsumexp of router logits, summed over routers."""
    if isinstance(logits, Tensor):
        logits = [logits]
    terms = []
    for h in logits:
        if h.shape[0] == 0:
            raise StatError("z-loss over an empty batch")
        lse = nk.logsumexp(h, axis=-1)
        terms.append(nk.mean(nk.mul(lse, lse)))
    return _add_all(terms)


def group_stats(q: Tensor, tags: np.ndarray) -> GroupLoadStats:
    """Group statistics over audio-only and video-only tokens; AV tokens excluded."""
    tags = np.asarray(tags)
    g, Q, sizes = {}, {}, {}
    n_groups = q.shape[1]
    for mod in (Modality.AUDIO, Modality.VIDEO):
        rows = np.flatnonzero(tags == mod)
        sizes[mod] = rows.size
        if rows.size == 0:
            g[mod], Q[mod] = None, None
            continue
        sub = nk.gather(q, rows)
        g[mod] = np.bincount(sub.data.argmax(axis=-1), minlength=n_groups) / rows.size
        Q[mod] = nk.mean(sub, axis=0)
    return GroupLoadStats(g=g, Q=Q, sizes=sizes)


def load_bias_loss(gs: GroupLoadStats, audio_group: int = AUDIO_GROUP, visual_group: int = VISUAL_GROUP) -> Tensor:
    """``(1 - g^A_audio Q^A_audio) + (1 - g^V_visual Q^V_visual)``; empty subsets add 0."""
    terms = []
    for mod, grp in ((Modality.AUDIO, audio_group), (Modality.VIDEO, visual_group)):
        if gs.empty(mod):
            continue
        q_hit = nk.sum(nk.gather(gs.Q[mod], [grp]))
        terms.append(nk.add(1.0, nk.mul(q_hit, -float(gs.g[mod][grp]))))
    return _add_all(terms)


def _add_all(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = nk.add(out, t)
    return out


def layer_losses(
    sel: ExpertSelection,
    tags: np.ndarray,
    z_routers: Sequence[str] | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """(L_B, L_S, L_Z) for one MoE layer.

    L_B covers every expert-level router (the flat router, or each intra-group
    router over the tokens it routed). L_S needs an inter-modal router and is
    0 otherwise. ``z_routers`` limits which routers the z-loss sees (default:
    all of them).
    """
    tags = np.asarray(tags)
    expert_routers = [name for name in sel.routers if name != "inter"]
    lb = load_balance_loss([expert_stats(sel.routers[n].probs) for n in sorted(expert_routers)])
    if "inter" in sel.routers:
        ls = load_bias_loss(group_stats(sel.routers["inter"].probs, tags))
    else:
        ls = Tensor(0.0)
    names = sorted(sel.routers) if z_routers is None else [n for n in sorted(sel.routers) if n in z_routers]
    lz = z_loss([sel.routers[n].logits for n in names])
    return lb, ls, lz


def _layer_mean(x: Tensor | float | Sequence[Tensor | float]) -> Tensor:
    if isinstance(x, (Tensor, float, int)):
        return x if isinstance(x, Tensor) else Tensor(float(x))
    xs = [t if isinstance(t, Tensor) else Tensor(float(t)) for t in x]
    if not xs:
        return Tensor(0.0)
    return nk.mul(_add_all(xs), 1.0 / len(xs))


def _values(x) -> list[float]:
    if isinstance(x, (Tensor, float, int)):
        return [x.item() if isinstance(x, Tensor) else float(x)]
    return [t.item() if isinstance(t, Tensor) else float(t) for t in x]


def total_loss(ce, lb, ls, lz, w: LossWeights | None = None) -> LossBreakdown:
    """``L_CE + c_B L_B + c_S L_S + c_Z L_Z``; auxiliary inputs may be per-layer lists."""
    w = w or LossWeights()
    ce_t = _layer_mean(ce)
    terms = {"L_B": _layer_mean(lb), "L_S": _layer_mean(ls), "L_Z": _layer_mean(lz)}
    for name, t in (("L_CE", ce_t), *terms.items()):
        if not math.isfinite(t.item()):
            raise NumericError(f"{name} is not finite")
    total = ce_t
    for t, c in zip(terms.values(), (w.c_B, w.c_S, w.c_Z)):
        if c != 0.0:
            total = nk.add(total, nk.mul(t, c))
    return LossBreakdown(
        ce=ce_t.item(),
        lb=terms["L_B"].item(),
        ls=terms["L_S"].item(),
        lz=terms["L_Z"].item(),
        tot=total.item(),
        total=total,
        weights=w,
        per_layer={"L_B": _values(lb), "L_S": _values(ls), "L_Z": _values(lz)},
    )
