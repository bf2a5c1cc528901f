"""Counter-based random streams keyed by (seed, purpose tag, index)."""

import zlib

import numpy as np

# Samples per generation block; block b always uses stream (seed, tag, b),
# so a dataset of n samples is a prefix of one with n + m samples.
BLOCK_SIZE = 1 << 16


def tag_id(tag):
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed, tag, index=0):
    """Return an independent Philox generator for ``(seed, tag, index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag_id(tag), int(index)))
    return np.random.Generator(np.random.Philox(ss))
