"""Deterministic seed fan-out.

A stage seed is the first eight bytes (little-endian, masked to 63 bits) of
``sha256(f"{master}:{stage}:{index}")``.  Every random draw in the pipeline
goes through a generator built from one of these seeds, so results never
depend on scheduling or on how many draws another stage made.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stage_seed(master: int, stage: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{int(master)}:{stage}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def rng_for(master: int, stage: str, *index: int) -> np.random.Generator:
    key = ":".join(str(int(i)) for i in index) if index else "0"
    digest = hashlib.sha256(f"{int(master)}:{stage}:{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
