"""
Binary checkpoint container (little-endian)::

    b"HMOE" | u32 version | u32 len + config text | u32 n_tensors |
    n_tensors * (u32 len + name | u32 rank | rank * u64 dim | float64 data)

The config text is ``key=value`` lines; lines prefixed ``meta.`` carry
non-config state such as the RNG state.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .errors import CheckpointError
from .model import Model, ModelConfig

MAGIC = b"HMOE"
VERSION = 1
_OPT_PREFIX = "opt."


@dataclass
class Checkpoint:
    model: Model
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)


def write_container(fh, text: str, tensors: dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    blob = text.encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated file: wanted {n} bytes, got {len(b)}")
    return b


def read_container(fh) -> tuple[str, dict[str, np.ndarray]]:
    if _read(fh, 4) != MAGIC:
        raise CheckpointError("bad magic bytes: not an HMOE file")
    (version,) = struct.unpack("<I", _read(fh, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {VERSION})")
    (n,) = struct.unpack("<I", _read(fh, 4))
    text = _read(fh, n).decode("utf-8")
    (count,) = struct.unpack("<I", _read(fh, 4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read(fh, 4))
        name = _read(fh, n).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    if fh.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return text, tensors


def save_checkpoint(
    model: Model,
    path: str | Path,
    optimizer: dict[str, np.ndarray] | None = None,
    meta: dict[str, str] | None = None,
) -> None:
    text = cfgio.dumps(model.cfg)
    for k, v in (meta or {}).items():
        text += f"meta.{k}={v}\n"
    tensors = {name: p.data for name, p in model.params.items()}
    for k, v in (optimizer or {}).items():
        tensors[_OPT_PREFIX + k] = np.asarray(v, dtype=np.float64)
    buf = io.BytesIO()
    write_container(buf, text, tensors)
    Path(path).write_bytes(buf.getvalue())


def _split_text(text: str) -> tuple[dict[str, str], dict[str, str]]:
    values = cfgio.parse_lines(text)
    meta = {k[5:]: v for k, v in values.items() if k.startswith("meta.")}
    conf = {k: v for k, v in values.items() if not k.startswith("meta.")}
    return conf, meta


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Rebuild a model from ``path``; with ``expect`` the stored config must match it."""
    with open(path, "rb") as fh:
        text, tensors = read_container(fh)
    conf, meta = _split_text(text)
    try:
        cfg = cfgio.apply(ModelConfig(), conf)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    if expect is not None and cfgio.flatten(expect) != cfgio.flatten(cfg):
        diff = {
            k: (v, cfgio.flatten(cfg).get(k))
            for k, v in cfgio.flatten(expect).items()
            if cfgio.flatten(cfg).get(k) != v
        }
        raise CheckpointError(f"checkpoint config does not match expected model: {diff}")
    model = Model(cfg, init=False)
    load_params(model, {k: v for k, v in tensors.items() if not k.startswith(_OPT_PREFIX)})
    opt = {k[len(_OPT_PREFIX) :]: v for k, v in tensors.items() if k.startswith(_OPT_PREFIX)}
    return Checkpoint(model=model, optimizer=opt, meta=meta)


def load_params(model: Model, tensors: dict[str, np.ndarray]) -> None:
    unknown = sorted(set(tensors) - set(model.params))
    if unknown:
        raise CheckpointError(f"unknown parameter names: {unknown[:5]}")
    missing = sorted(set(model.params) - set(tensors))
    if missing:
        raise CheckpointError(f"missing parameters: {missing[:5]}")
    for name, arr in tensors.items():
        p = model.params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: file {arr.shape}, model {p.shape}")
        p.data[...] = arr


def rng_state_text(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def rng_from_text(text: str) -> np.random.Generator:
    state = json.loads(text)
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
