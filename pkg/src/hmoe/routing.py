"""
Token routing for sparse MoE layers: flat top-k, modality-hard routing and
two-level (group, then expert) hierarchical gating, plus the dispatch that
runs the selected experts and mixes their outputs.

Selections are stored sparsely as parallel arrays of (token, expert) entries
with a differentiable weight per entry. Selection indices are constants; the
router parameters receive gradient only through the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Sequence

import numpy as np

from . import numkernel as nk
from .errors import ConfigError
from .numkernel import Param, Tensor


class Modality(IntEnum):
    AUDIO = 0
    VIDEO = 1
    AV = 2


class Strategy(str, Enum):
    FLAT = "flat"
    HARD = "hard"
    HIERARCHICAL = "hierarchical"
    DENSE = "dense"  # single FFN baseline, no routing


AUDIO_GROUP = 0
VISUAL_GROUP = 1


@dataclass
class MoEConfig:
    n_groups: int = 2
    experts_per_group: int = 4
    k_flat: int = 2
    m_groups: int = 2
    k_within: tuple[int, ...] = (1, 1)
    d_model: int = 64
    d_ff: int = 256
    strategy: Strategy = Strategy.HIERARCHICAL

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.k_within = tuple(int(k) for k in self.k_within)

    @property
    def n_experts(self) -> int:
        return self.n_groups * self.experts_per_group

    def activated_experts(self) -> int:
        """Experts run per token (for the hierarchical case, with all top-m groups)."""
        if self.strategy in (Strategy.FLAT, Strategy.HARD):
            return self.k_flat
        if self.strategy is Strategy.HIERARCHICAL:
            return int(sum(sorted(self.k_within, reverse=True)[: self.m_groups]))
        return 1

    def validate(self) -> None:
        if self.n_groups < 1 or self.experts_per_group < 1:
            raise ConfigError("need at least one group and one expert per group")
        if not 1 <= self.k_flat <= self.n_experts:
            raise ConfigError(f"k_flat={self.k_flat} outside [1, {self.n_experts}]")
        if not 1 <= self.m_groups <= self.n_groups:
            raise ConfigError(f"m_groups={self.m_groups} outside [1, {self.n_groups}]")
        if len(self.k_within) != self.n_groups:
            raise ConfigError("k_within needs one entry per group")
        if any(not 1 <= k <= self.experts_per_group for k in self.k_within):
            raise ConfigError(f"k_within {self.k_within} exceeds experts_per_group")
        if self.strategy is Strategy.HARD:
            if self.n_groups != 2:
                raise ConfigError("hard routing needs exactly an audio and a visual group")
            if self.k_flat > self.experts_per_group:
                raise ConfigError("hard routing k exceeds group size")


@dataclass
class RouterOutput:
    """Logits and softmax probabilities of one router over the tokens it saw."""

    logits: Tensor
    probs: Tensor
    rows: np.ndarray  # token indices (into the layer batch) the router was applied to


@dataclass
class ExpertSelection:
    n_tokens: int
    experts_per_group: int
    token: np.ndarray
    expert: np.ndarray
    weight: Tensor
    routers: dict[str, RouterOutput] = field(default_factory=dict)
    group_weight: np.ndarray | None = None  # [T, G] detached group mass per token

    def combine_matrix(self, n_experts: int) -> np.ndarray:
        """Detached dense [T, n_experts] combine weights."""
        out = np.zeros((self.n_tokens, n_experts))
        np.add.at(out, (self.token, self.expert), self.weight.data)
        return out

    def counts(self) -> np.ndarray:
        return np.bincount(self.token, minlength=self.n_tokens)

    def signature(self) -> tuple:
        """Hashable record of every discrete decision (selection and argmaxes)."""
        parts = [self.token.tobytes(), self.expert.tobytes()]
        for name in sorted(self.routers):
            parts.append(name.encode())
            parts.append(self.routers[name].probs.data.argmax(-1).tobytes())
        return tuple(parts)


def topk_indices(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, descending, lowest index on ties."""
    p = np.atleast_2d(p)
    if not 1 <= k <= p.shape[-1]:
        raise ConfigError(f"k={k} outside [1, {p.shape[-1]}]")
    return np.argsort(-p, axis=-1, kind="stable")[:, :k]


def topk_oracle(p: Sequence[float], k: int) -> tuple[int, ...]:
    """Brute-force top-k by full sort; reference for tests."""
    if k > len(p):
        raise ValueError("k larger than vector")
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    return tuple(order[:k])


def _renormalized_topk(logits: Tensor, local_rows: np.ndarray, idx: np.ndarray) -> Tensor:
    """Softmax over the selected logits, i.e. the top-k probabilities renormalized."""
    n, k = idx.shape
    picked = nk.take(logits, np.repeat(local_rows, k), idx.ravel())
    return nk.softmax(nk.reshape(picked, (n, k)), axis=-1)


def _router(x: Tensor, w: Param, rows: np.ndarray | None = None) -> RouterOutput:
    if rows is None:
        rows = np.arange(x.shape[0])
        xs = x
    else:
        xs = nk.gather(x, rows)
    logits = nk.matmul(xs, w)
    return RouterOutput(logits=logits, probs=nk.softmax(logits, axis=-1), rows=rows)


def route_flat(x: Tensor, router: Param, k: int) -> ExpertSelection:
    n_experts = router.shape[1]
    if not 1 <= k <= n_experts:
        raise ConfigError(f"k={k} outside [1, {n_experts}]")
    T = x.shape[0]
    r = _router(x, router)
    idx = topk_indices(r.probs.data, k)
    weight = nk.reshape(_renormalized_topk(r.logits, np.arange(T), idx), (T * k,))
    return ExpertSelection(
        n_tokens=T,
        experts_per_group=n_experts,
        token=np.repeat(np.arange(T), k),
        expert=idx.ravel(),
        weight=weight,
        routers={"flat": r},
    )


def route_hard(
    x: Tensor,
    tags: np.ndarray,
    routers: Sequence[Param],
    k: int,
    audio_weight: float = 0.5,
) -> ExpertSelection:
    """Modality-gated routing over an audio group (0) and a visual group (1).

    Unimodal tokens use top-k of their own group. Audio-visual tokens take
    top-(k/2) from each group, scaled by ``audio_weight`` / ``1 - audio_weight``.
    """
    tags = np.asarray(tags)
    T = x.shape[0]
    epg = routers[0].shape[1]
    is_av = tags == Modality.AV
    if is_av.any() and k % 2:
        raise ConfigError(f"hard routing needs even k for audio-visual tokens, got {k}")
    if not 1 <= k <= epg:
        raise ConfigError(f"k={k} outside [1, {epg}]")
    if not 0.0 <= audio_weight <= 1.0:
        raise ConfigError("audio_weight must lie in [0, 1]")

    own = (Modality.AUDIO, Modality.VIDEO)
    group_scale = (audio_weight, 1.0 - audio_weight)
    tokens, experts, weights, outs = [], [], [], {}
    for g in (AUDIO_GROUP, VISUAL_GROUP):
        rows = np.flatnonzero((tags == own[g]) | is_av)
        if rows.size == 0:
            continue
        r = _router(x, routers[g], rows)
        outs[f"intra{g}"] = r
        local_av = is_av[rows]
        for subset, kk, scale in ((~local_av, k, 1.0), (local_av, k // 2, group_scale[g])):
            local = np.flatnonzero(subset)
            if local.size == 0:
                continue
            idx = topk_indices(r.probs.data[local], kk)
            w = nk.reshape(_renormalized_topk(r.logits, local, idx), (local.size * kk,))
            if scale != 1.0:
                w = nk.mul(w, scale)
            tokens.append(np.repeat(rows[local], kk))
            experts.append(idx.ravel() + g * epg)
            weights.append(w)

    gw = np.zeros((T, 2))
    gw[tags == Modality.AUDIO, AUDIO_GROUP] = 1.0
    gw[tags == Modality.VIDEO, VISUAL_GROUP] = 1.0
    gw[is_av] = group_scale
    return ExpertSelection(
        n_tokens=T,
        experts_per_group=epg,
        token=np.concatenate(tokens),
        expert=np.concatenate(experts),
        weight=nk.concat(weights) if len(weights) > 1 else weights[0],
        routers=outs,
        group_weight=gw,
    )


def route_hierarchical(
    x: Tensor,
    inter: Param,
    intras: Sequence[Param],
    m: int,
    k_within: Sequence[int],
    forced_q: np.ndarray | None = None,
) -> ExpertSelection:
    """Inter-modal router picks top-m groups; intra routers pick top-k within each.

    The per-entry weight is ``q~_i * p~_ij``. With one expert per group the
    intra factor is exactly 1 (the Kronecker-delta case). ``forced_q``
    replaces the inter router's probabilities with constants, for analysis.
    """
    T = x.shape[0]
    G = inter.shape[1]
    if not 1 <= m <= G:
        raise ConfigError(f"m={m} outside [1, {G}]")
    if len(intras) != G or len(k_within) != G:
        raise ConfigError("need one intra router and one k per group")
    epg = intras[0].shape[1]
    rows = np.arange(T)

    r_inter = _router(x, inter)
    if forced_q is None:
        gidx = topk_indices(r_inter.probs.data, m)
        q_sel = _renormalized_topk(r_inter.logits, rows, gidx)
    else:
        fq = np.broadcast_to(np.asarray(forced_q, dtype=np.float64), (T, G))
        gidx = topk_indices(fq, m)
        picked = np.take_along_axis(fq, gidx, axis=1)
        q_sel = Tensor(picked / picked.sum(axis=1, keepdims=True))
    outs = {"inter": r_inter}

    tokens, experts, weights = [], [], []
    gw = np.zeros((T, G))
    np.put_along_axis(gw, gidx, q_sel.data, axis=1)
    for g in range(G):
        r = _router(x, intras[g])
        outs[f"intra{g}"] = r
        hit = gidx == g
        sel = np.flatnonzero(hit.any(axis=1))
        if sel.size == 0:
            continue
        slot = hit[sel].argmax(axis=1)
        kg = k_within[g]
        idx = topk_indices(r.probs.data[sel], kg)
        qw = nk.take(q_sel, sel, slot)
        if kg == 1:
            w = qw
        else:
            pw = _renormalized_topk(r.logits, sel, idx)
            w = nk.reshape(nk.mul(pw, nk.reshape(qw, (sel.size, 1))), (sel.size * kg,))
        tokens.append(np.repeat(sel, kg))
        experts.append(idx.ravel() + g * epg)
        weights.append(w)

    return ExpertSelection(
        n_tokens=T,
        experts_per_group=epg,
        token=np.concatenate(tokens),
        expert=np.concatenate(experts),
        weight=nk.concat(weights) if len(weights) > 1 else weights[0],
        routers=outs,
        group_weight=gw,
    )


def dispatch(x: Tensor, experts: Sequence[Callable[[Tensor], Tensor]], sel: ExpertSelection) -> Tensor:
    """``y_t = sum of weight * expert(x_t)`` over each token's selected experts."""
    T = x.shape[0]
    if sel.expert.size and (sel.expert.min() < 0 or sel.expert.max() >= len(experts)):
        raise IndexError("selection refers to an expert outside the bank")
    outs, idx = [], []
    for e in np.unique(sel.expert):
        entries = np.flatnonzero(sel.expert == e)
        tok = sel.token[entries]
        y = experts[e](nk.gather(x, tok))
        w = nk.reshape(nk.gather(sel.weight, entries), (entries.size, 1))
        outs.append(nk.mul(y, w))
        idx.append(tok)
    if not outs:
        return Tensor(np.zeros(x.shape))
    return nk.scatter_rows(nk.concat(outs) if len(outs) > 1 else outs[0], np.concatenate(idx), T)
