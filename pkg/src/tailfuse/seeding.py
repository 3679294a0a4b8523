import hashlib

import numpy as np

MAX_SEED = 2**64 - 1


def derive_seed(master: int, *tags) -> int:
    """Deterministic 64-bit sub-seed from a master seed and any number of tags."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(master).to_bytes(8, "little", signed=False))
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng_for(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
