"""
Toy audio-visual encoder/decoder whose decoder FFNs are MoE layers.

Encoder: per-frame fusion ``act(audio @ A * mask_a + video @ V * mask_v)``.
Decoder block: single-head cross-attention over the encoded frames, then a
routed FFN; both sublayers are residual. The residual stream starts from the
token embedding alone. Sinusoidal positions enter only the attention queries
and keys, so whatever the routers see about a token comes from its content
and the frames it attends to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DimensionError
from .numkernel import Param, Tensor
from .routing import (
    ExpertSelection,
    Modality,
    MoEConfig,
    Strategy,
    dispatch,
    route_flat,
    route_hard,
    route_hierarchical,
)


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ff: int = 256
    n_layers: int = 2
    vocab_size: int = 32
    max_len: int = 64
    d_audio: int = 16
    d_video: int = 16
    n_heads: int = 1
    self_attention: bool = False
    activation: str = "gelu"
    init_std: float = 0.02
    proj_init: str = "fan_in"  # "fan_in" or "fixed" (init_std) for encoder/attention projections
    dropout_prob: float = 0.25
    audio_only_share: float = 0.5
    seed: int = 0
    moe: MoEConfig = field(default_factory=MoEConfig)

    def __post_init__(self):
        # The MoE layer width always follows the model width.
        self.moe.d_model = self.d_model
        self.moe.d_ff = self.d_ff

    @property
    def bos(self) -> int:
        return self.vocab_size

    def validate(self) -> None:
        if self.n_heads != 1:
            raise ConfigError("only single-head attention is supported")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError("dropout_prob must lie in [0, 1)")
        if not 0.0 <= self.audio_only_share <= 1.0:
            raise ConfigError("audio_only_share must lie in [0, 1]")
        if self.proj_init not in ("fan_in", "fixed"):
            raise ConfigError(f"unknown proj_init {self.proj_init!r}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.moe.validate()


@dataclass
class EncodedSequence:
    emb: Tensor  # [B, F, d_model]
    mask: np.ndarray  # [B, 2] (audio kept, video kept)

    @property
    def n_frames(self) -> int:
        return self.emb.shape[1]


@dataclass
class ForwardOutput:
    logits: Tensor  # [B * L, V]
    selections: list[ExpertSelection | None]
    token_tags: np.ndarray  # [B * L]

    def signature(self) -> tuple:
        return tuple(s.signature() for s in self.selections if s is not None)


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


class FFN:
    """Two linear layers with an activation in between."""

    def __init__(self, w1: Param, b1: Param, w2: Param, b2: Param, activation: str):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.act = nk.activation(activation)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.act(nk.add(nk.matmul(x, self.w1), self.b1))
        return nk.add(nk.matmul(h, self.w2), self.b2)


class MoELayer:
    def __init__(self, cfg: MoEConfig, params: dict[str, Param], prefix: str, activation: str):
        self.cfg = cfg
        self.prefix = prefix
        n = 1 if cfg.strategy is Strategy.DENSE else cfg.n_experts
        self.experts = [
            FFN(*(params[f"{prefix}.expert{e}.{w}"] for w in ("w1", "b1", "w2", "b2")), activation)
            for e in range(n)
        ]
        self.params = params

    def _p(self, name: str) -> Param:
        return self.params[f"{self.prefix}.router.{name}"]

    def route(
        self,
        x: Tensor,
        tags: np.ndarray,
        forced_q: np.ndarray | None = None,
        audio_weight: float = 0.5,
    ) -> ExpertSelection | None:
        cfg = self.cfg
        if cfg.strategy is Strategy.DENSE:
            return None
        if cfg.strategy is Strategy.FLAT:
            return route_flat(x, self._p("flat"), cfg.k_flat)
        intras = [self._p(f"intra{g}") for g in range(cfg.n_groups)]
        if cfg.strategy is Strategy.HARD:
            return route_hard(x, tags, intras, cfg.k_flat, audio_weight=audio_weight)
        if cfg.strategy is Strategy.HIERARCHICAL:
            return route_hierarchical(x, self._p("inter"), intras, cfg.m_groups, cfg.k_within, forced_q=forced_q)
        return None

    def __call__(self, x: Tensor, tags: np.ndarray, **route_kw) -> tuple[Tensor, ExpertSelection | None]:
        sel = self.route(x, tags, **route_kw)
        if sel is None:
            return self.experts[0](x), None
        return dispatch(x, self.experts, sel), sel


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.d_model, cfg.moe
    shapes: dict[str, tuple[int, ...]] = {
        "enc.audio": (cfg.d_audio, d),
        "enc.video": (cfg.d_video, d),
        "enc.audio_bias": (d,),
        "enc.video_bias": (d,),
        "dec.embed": (cfg.vocab_size + 1, d),
    }
    for layer in range(cfg.n_layers):
        p = f"layer{layer}"
        blocks = ["attn", "self"] if cfg.self_attention else ["attn"]
        for blk in blocks:
            for w in ("q", "k", "v", "o"):
                shapes[f"{p}.{blk}.{w}"] = (d, d)
        if m.strategy is Strategy.FLAT:
            shapes[f"{p}.moe.router.flat"] = (d, m.n_experts)
        if m.strategy in (Strategy.HARD, Strategy.HIERARCHICAL):
            for g in range(m.n_groups):
                shapes[f"{p}.moe.router.intra{g}"] = (d, m.experts_per_group)
        if m.strategy is Strategy.HIERARCHICAL:
            shapes[f"{p}.moe.router.inter"] = (d, m.n_groups)
        n_exp = 1 if m.strategy is Strategy.DENSE else m.n_experts
        for e in range(n_exp):
            q = f"{p}.moe.expert{e}"
            shapes[f"{q}.w1"] = (d, cfg.d_ff)
            shapes[f"{q}.b1"] = (cfg.d_ff,)
            shapes[f"{q}.w2"] = (cfg.d_ff, d)
            shapes[f"{q}.b2"] = (d,)
    shapes["out.w"] = (d, cfg.vocab_size)
    shapes["out.b"] = (cfg.vocab_size,)
    return shapes


def _init_std(cfg: ModelConfig, name: str, shape: tuple[int, ...]) -> float:
    # Encoder and attention projection matrices get fan-in scaling so the
    # attended frame content, which carries the modality, reaches the routers
    # from the first step. Everything else, biases included, draws from
    # N(0, init_std^2); the small random encoder biases give each modality a
    # distinct offset that a linear router can pick up.
    is_proj = name.startswith("enc.") or ".attn." in name or ".self." in name
    if cfg.proj_init == "fan_in" and is_proj and len(shape) == 2:
        return 1.0 / np.sqrt(shape[0])
    return cfg.init_std


class Model:
    def __init__(self, cfg: ModelConfig, init: bool = True):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0x1417])
        self.params: dict[str, Param] = {}
        for name, shape in _param_shapes(cfg).items():
            data = rng.normal(0.0, _init_std(cfg, name, shape), size=shape) if init else np.zeros(shape)
            self.params[name] = Param(data, name)
        self.pos = sinusoid_table(cfg.max_len, cfg.d_model)
        self.moe = [MoELayer(cfg.moe, self.params, f"layer{i}.moe", cfg.activation) for i in range(cfg.n_layers)]
        self.act = nk.activation(cfg.activation)

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def encode(self, audio, video, mask=None) -> EncodedSequence:
        """Fuse per-frame audio and video features; ``mask[b] = (keep_audio, keep_video)``."""
        audio = np.asarray(audio, dtype=np.float64)
        video = np.asarray(video, dtype=np.float64)
        if audio.ndim == 2:
            audio, video = audio[None], video[None]
        if audio.shape[:2] != video.shape[:2]:
            raise DimensionError(f"audio frames {audio.shape[:2]} != video frames {video.shape[:2]}")
        B = audio.shape[0]
        mask = np.ones((B, 2)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(B, 2)
        P = self.params
        a = nk.mul(nk.add(nk.matmul(audio, P["enc.audio"]), P["enc.audio_bias"]), mask[:, 0, None, None])
        v = nk.mul(nk.add(nk.matmul(video, P["enc.video"]), P["enc.video_bias"]), mask[:, 1, None, None])
        return EncodedSequence(emb=self.act(nk.add(a, v)), mask=mask)

    def forward(
        self,
        enc: EncodedSequence,
        inputs: np.ndarray,
        tags: np.ndarray,
        positions: np.ndarray | None = None,
        forced_q: np.ndarray | None = None,
        audio_weight: float = 0.5,
    ) -> ForwardOutput:
        """Decoder pass. ``inputs[b, t]`` is the token fed at position ``positions[t]``."""
        inputs = np.asarray(inputs)
        B, L = inputs.shape
        F = enc.n_frames
        d = self.cfg.d_model
        positions = np.arange(L) if positions is None else np.asarray(positions)
        if F > self.cfg.max_len or positions.max() >= self.cfg.max_len:
            raise DimensionError("sequence longer than max_len")
        token_tags = np.repeat(np.asarray(tags), L)
        P = self.params

        h = nk.gather(P["dec.embed"], inputs.ravel())
        pos_q = np.tile(self.pos[positions], (B, 1))
        keys_in = nk.add(enc.emb, self.pos[:F])
        selections = []
        for i, moe in enumerate(self.moe):
            pre = f"layer{i}"
            if self.cfg.self_attention:
                h3 = nk.reshape(h, (B, L, d))
                hp3 = nk.reshape(nk.add(h, pos_q), (B, L, d))
                sa = nk.attention(
                    nk.matmul(hp3, P[f"{pre}.self.q"]),
                    nk.matmul(hp3, P[f"{pre}.self.k"]),
                    nk.matmul(h3, P[f"{pre}.self.v"]),
                    causal=True,
                )
                h = nk.add(h, nk.matmul(nk.reshape(sa, (B * L, d)), P[f"{pre}.self.o"]))
            q = nk.reshape(nk.matmul(nk.add(h, pos_q), P[f"{pre}.attn.q"]), (B, L, d))
            k = nk.matmul(keys_in, P[f"{pre}.attn.k"])
            v = nk.matmul(enc.emb, P[f"{pre}.attn.v"])
            a = nk.reshape(nk.attention(q, k, v), (B * L, d))
            h = nk.add(h, nk.matmul(a, P[f"{pre}.attn.o"]))
            y, sel = moe(h, token_tags, forced_q=forced_q, audio_weight=audio_weight)
            h = nk.add(h, y)
            selections.append(sel)
        logits = nk.add(nk.matmul(h, P["out.w"]), P["out.b"])
        return ForwardOutput(logits=logits, selections=selections, token_tags=token_tags)

    def teacher_inputs(self, targets: np.ndarray) -> np.ndarray:
        """Shift targets right, starting each sequence with the begin token."""
        targets = np.asarray(targets)
        bos = np.full((targets.shape[0], 1), self.cfg.bos)
        return np.concatenate([bos, targets[:, :-1]], axis=1)

    def greedy_decode(self, enc: EncodedSequence, tags: np.ndarray, n_steps: int, **route_kw) -> np.ndarray:
        B = enc.emb.shape[0]
        out = np.zeros((B, n_steps), dtype=np.int64)
        prev = np.full((B, 1), self.cfg.bos)
        for t in range(n_steps):
            if self.cfg.self_attention:
                inputs = np.concatenate([np.full((B, 1), self.cfg.bos), out[:, :t]], axis=1)
                res = self.forward(enc, inputs, tags, **route_kw)
                step_logits = res.logits.data.reshape(B, t + 1, -1)[:, -1]
            else:
                res = self.forward(enc, prev, tags, positions=np.array([t]), **route_kw)
                step_logits = res.logits.data
            out[:, t] = step_logits.argmax(-1)
            prev = out[:, t : t + 1]
        return out


def modality_dropout(
    n_sequences: int,
    rng: np.random.Generator,
    p: float = 0.25,
    audio_only_share: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence masks ``[B, 2]`` and tags.

    With probability ``p`` a sequence loses one modality; the kept one is
    audio with probability ``audio_only_share``.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("dropout probability must lie in [0, 1]")
    drop = rng.random(n_sequences) < p
    keep_audio = rng.random(n_sequences) < audio_only_share
    tags = np.full(n_sequences, int(Modality.AV))
    tags[drop & keep_audio] = Modality.AUDIO
    tags[drop & ~keep_audio] = Modality.VIDEO
    return masks_for(tags), tags


def masks_for(tags: np.ndarray) -> np.ndarray:
    tags = np.asarray(tags)
    mask = np.ones((tags.shape[0], 2))
    mask[tags == Modality.AUDIO, 1] = 0.0
    mask[tags == Modality.VIDEO, 0] = 0.0
    return mask
