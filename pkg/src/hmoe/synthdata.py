"""
Synthetic audio/video transcription task.

Every frame carries one token. The audio stream encodes the token itself, the
video stream only the token's cluster (``token % n_clusters``), so video alone
can never resolve more than the cluster while clean audio resolves the token.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError

SNR_GRID = (-10.0, -5.0, 0.0, 5.0, 10.0)


@dataclass
class TaskConfig:
    vocab_size: int = 32
    n_clusters: int = 8
    seq_len: int = 24
    d_audio: int = 16
    d_video: int = 16
    sigma_audio: float = 0.0
    sigma_video: float = 0.1
    snr_db: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 1 <= self.n_clusters < self.vocab_size:
            raise ConfigError("n_clusters must satisfy 1 <= C < V")
        if self.vocab_size % self.n_clusters:
            raise ConfigError(f"vocab_size {self.vocab_size} not divisible by n_clusters {self.n_clusters}")
        if self.sigma_audio < 0 or self.sigma_video < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")

    @property
    def audio_rms(self) -> float:
        """Per-element RMS of a unit-norm audio code."""
        return 1.0 / np.sqrt(self.d_audio)

    def audio_sigma(self) -> float:
        if self.snr_db is not None:
            return snr_to_sigma(self.snr_db, self.audio_rms)
        return self.sigma_audio


@dataclass
class SampleBatch:
    tokens: np.ndarray  # [B, F] int
    audio: np.ndarray  # [B, F, d_audio]
    video: np.ndarray  # [B, F, d_video]
    audio_sigma: np.ndarray  # [B]
    video_sigma: float

    def __len__(self) -> int:
        return self.tokens.shape[0]


def snr_to_sigma(snr_db: float, signal_rms: float) -> float:
    return float(signal_rms * 10.0 ** (-snr_db / 20.0))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@lru_cache(maxsize=32)
def _codes(seed: int, vocab_size: int, n_clusters: int, d_audio: int, d_video: int):
    rng = np.random.default_rng([seed, 0xC0DE])
    audio = _unit_rows(rng, vocab_size, d_audio)
    video = _unit_rows(rng, n_clusters, d_video)
    audio.setflags(write=False)
    video.setflags(write=False)
    return audio, video


def codes(cfg: TaskConfig) -> tuple[np.ndarray, np.ndarray]:
    """Frozen (audio codes [V, d_a], video codes [C, d_v]) for ``cfg.seed``."""
    return _codes(cfg.seed, cfg.vocab_size, cfg.n_clusters, cfg.d_audio, cfg.d_video)


def batch_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def generate_batch(
    cfg: TaskConfig,
    n_sequences: int,
    rng: np.random.Generator,
    audio_sigma: float | np.ndarray | None = None,
) -> SampleBatch:
    """Draw ``n_sequences`` sequences; ``audio_sigma`` may be per sequence."""
    cfg.validate()
    audio_codes, video_codes = codes(cfg)
    B, F = n_sequences, cfg.seq_len
    tokens = rng.integers(0, cfg.vocab_size, size=(B, F))
    if audio_sigma is None:
        audio_sigma = cfg.audio_sigma()
    sig = np.broadcast_to(np.asarray(audio_sigma, dtype=np.float64), (B,)).copy()
    audio = audio_codes[tokens] + sig[:, None, None] * rng.standard_normal((B, F, cfg.d_audio))
    video = video_codes[tokens % cfg.n_clusters] + cfg.sigma_video * rng.standard_normal(
        (B, F, cfg.d_video)
    )
    return SampleBatch(tokens=tokens, audio=audio, video=video, audio_sigma=sig, video_sigma=cfg.sigma_video)


def nearest_code(features: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the closest code row for every feature vector."""
    d2 = ((features[..., None, :] - table) ** 2).sum(-1)
    return d2.argmin(-1)


def training_noise(
    rng: np.random.Generator,
    n_sequences: int,
    signal_rms: float,
    fraction: float = 0.25,
    snr_mean: float = 0.0,
    snr_std: float = 5.0,
) -> np.ndarray:
    """Per-sequence audio sigma: ``fraction`` of sequences get SNR ~ N(mean, std) dB."""
    noisy = rng.random(n_sequences) < fraction
    snr = rng.normal(snr_mean, snr_std, size=n_sequences)
    return np.where(noisy, signal_rms * 10.0 ** (-snr / 20.0), 0.0)
