"""Counter-based random streams.

All randomness in a run flows through Philox generators keyed by a SHA-256
digest of a (domain tag, seed, ...) path, so every consumer owns an isolated,
reproducible stream.  The construction is deliberately simple enough to
re-derive outside this codebase: key = first 16 bytes of
sha256("/".join(str(part) for part in parts)), interpreted as two little-endian
uint64 words feeding Philox4x64.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*parts: object) -> np.ndarray:
    """Derive a 128-bit Philox key from a path of hashable components."""
    path = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def stream(*parts: object) -> np.random.Generator:
    """Create an independent generator for the given stream path."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))


def noise_stream(seed: int, client_id: int, round_num: int) -> np.random.Generator:
    """The per-(client, round) stream feeding output-perturbation noise."""
    return stream("dp-noise", seed, client_id, round_num)


def shuffle_stream(seed: int, client_id: int, round_num: int, epoch: int) -> np.random.Generator:
    """The per-(client, round, epoch) stream ordering mini-batches."""
    return stream("batch-shuffle", seed, client_id, round_num, epoch)
