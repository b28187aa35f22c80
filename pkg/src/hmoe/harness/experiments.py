"""Multi-seed experiment driver with an on-disk cache of trained runs.

A cached run is keyed by its full config text plus a digest of the modules
that shape training, so a change to any of them retrains. The training wall
time is stored with the run, which keeps runtime budgets measurable on cache
hits.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from .. import config as cfgio
from ..checkpoint import load_checkpoint
from ..model import Model
from .train import RunConfig, train

log = logging.getLogger(__name__)

PACKAGE_ROOT = Path(__file__).resolve().parents[1]


# Modules that determine a trained model; evaluation and analytics code is not listed.
TRAINING_SOURCES = (
    "numkernel.py",
    "routing.py",
    "losses.py",
    "model.py",
    "synthdata.py",
    "config.py",
    "checkpoint.py",
    "harness/train.py",
    "harness/optim.py",
)


@lru_cache(maxsize=1)
def source_digest() -> str:
    h = hashlib.sha256()
    for path in (PACKAGE_ROOT / name for name in TRAINING_SOURCES):
        h.update(path.relative_to(PACKAGE_ROOT).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_key(run: RunConfig) -> str:
    values = cfgio.flatten(run)
    values.pop("train.out_dir", None)
    text = "".join(f"{k}={v}\n" for k, v in sorted(values.items()))
    return hashlib.sha256((text + source_digest()).encode()).hexdigest()[:20]


def default_cache_dir() -> Path:
    return Path(os.environ.get("HMOE_CACHE_DIR", Path.cwd() / ".cache" / "runs"))


@dataclass
class CachedRun:
    run: RunConfig
    model: Model
    train_seconds: float
    directory: Path
    cached: bool


def trained(run: RunConfig, cache_dir: str | Path | None = None) -> CachedRun:
    """Train ``run`` unless an identical run (same config and source) is cached."""
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    directory = root / run_key(run)
    ckpt_path = directory / "checkpoint.hmoe"
    if ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path, expect=run.model)
        seconds = float((directory / "train_seconds.txt").read_text())
        return CachedRun(run, ckpt.model, seconds, directory, cached=True)
    run = run.copy(train__out_dir=str(directory))
    log.info("training %s seed %d -> %s", run.model.moe.strategy.value, run.train.seed, directory)
    t0 = time.perf_counter()
    res = train(run)
    seconds = time.perf_counter() - t0
    (directory / "train_seconds.txt").write_text(repr(seconds))
    return CachedRun(run, res.model, seconds, directory, cached=False)


def seed_runs(base: RunConfig, seeds, cache_dir: str | Path | None = None) -> list[CachedRun]:
    return [trained(base.with_seed(s), cache_dir) for s in seeds]
