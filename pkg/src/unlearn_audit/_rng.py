"""Keyed random streams.

Every random draw in the package comes from a generator keyed on the user
seed plus a purpose tag (and optionally step indices), so that any single
draw can be reproduced without replaying the draws that preceded it.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag):
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        tag = tag.encode("utf-8")
    return int.from_bytes(hashlib.sha256(tag).digest()[:8], "little")


def keyed_rng(seed, *tags):
    """Return a fresh Generator for ``(seed, *tags)``.

    Tags may be ints, strings or bytes; strings and bytes are folded to a
    64-bit word through SHA-256.
    """
    entropy = [int(seed) & _MASK64] + [_tag_word(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
