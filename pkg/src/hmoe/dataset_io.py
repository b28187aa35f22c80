"""Dump and reload generated batches for exact experiment replay.

Uses the checkpoint container: the text block holds the ``TaskConfig`` fields
(plus ``video_sigma``), the tensors hold tokens, features and per-sequence
audio noise levels.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from . import config as cfgio
from .checkpoint import read_container, write_container
from .errors import CheckpointError
from .synthdata import SampleBatch, TaskConfig

FIELDS = ("tokens", "audio", "video", "audio_sigma")


def dump_batch(path: str | Path, cfg: TaskConfig, batch: SampleBatch) -> None:
    text = cfgio.dumps(cfg) + f"meta.video_sigma={batch.video_sigma!r}\n"
    tensors = {name: np.asarray(getattr(batch, name), dtype=np.float64) for name in FIELDS}
    buf = io.BytesIO()
    write_container(buf, text, tensors)
    Path(path).write_bytes(buf.getvalue())


def load_batch(path: str | Path) -> tuple[TaskConfig, SampleBatch]:
    with open(path, "rb") as fh:
        text, tensors = read_container(fh)
    values = cfgio.parse_lines(text)
    video_sigma = float(values.pop("meta.video_sigma", "nan"))
    try:
        cfg = cfgio.apply(TaskConfig(), values)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad task header: {exc}") from None
    missing = [name for name in FIELDS if name not in tensors]
    if missing:
        raise CheckpointError(f"dataset file lacks {missing}")
    tokens = tensors["tokens"].astype(np.int64)
    if not np.array_equal(tokens, tensors["tokens"]):
        raise CheckpointError("token tensor holds non-integer values")
    batch = SampleBatch(
        tokens=tokens,
        audio=tensors["audio"],
        video=tensors["video"],
        audio_sigma=tensors["audio_sigma"],
        video_sigma=video_sigma,
    )
    return cfg, batch
