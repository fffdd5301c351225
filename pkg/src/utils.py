# src/utils.py
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from config.settings import DEFAULT_LOG_LEVEL, LOG_LEVEL_ENV

_CONFIGURED = False


def configure_logging(level: str | None = None) -> None:
    """Configure root logging once; level comes from EXNET_LOG_LEVEL unless given."""

    global _CONFIGURED
    if _CONFIGURED and level is None:
        return

    name = (level or os.environ.get(LOG_LEVEL_ENV, DEFAULT_LOG_LEVEL)).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    _CONFIGURED = True


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def seed_sequence(seed: int | Sequence[int], *extra: int) -> list[int]:
    """
    Flatten a seed (int or tuple of ints) plus counters into entropy for
    numpy's SeedSequence. Same inputs always give the same stream.
    """
    base = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    return base + [int(e) for e in extra]


def make_rng(seed: int | Sequence[int], *extra: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *extra))


def stable_hash(text: str) -> int:
    """32-bit hash of a string, stable across interpreter runs."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def ensure_dir(path: str | Path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def relative_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)
