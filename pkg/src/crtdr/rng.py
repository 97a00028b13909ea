"""Deterministic random streams built on the Philox counter-based generator.

Every random draw in the package comes from a stream identified by
(seed, replicate, cluster, tag). Stream identity is packed into the
128-bit Philox key, so distinct identifiers give provably disjoint
streams regardless of draw counts, thread schedules, or the total
number of replicates requested.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# field widths inside the second key word
_REPLICATE_BITS = 40
_CLUSTER_BITS = 16
_TAG_BITS = 8

# stream tags
TAG_LATENT = 0       # cluster-level data generation
TAG_SAMPLING = 1     # within-cluster enrollment draws
TAG_FOLDS = 2        # cross-fitting partition
TAG_LEARNER = 3      # learner-internal randomness (bootstrap, feature subsets)
TAG_GENERIC = 4      # miscellaneous analysis-level draws


def substream(seed: int, replicate: int = 0, cluster: int = 0, tag: int = 0) -> np.random.Generator:
    """Return the generator for one (seed, replicate, cluster, tag) stream.

    Arguments
    ---------
    seed : base seed, any 64-bit integer
    replicate : replicate index, < 2**40
    cluster : cluster index, < 2**16
    tag : stream tag, < 2**8
    """
    if not 0 <= replicate < (1 << _REPLICATE_BITS):
        raise ValueError(f"replicate index {replicate} out of range [0, 2**{_REPLICATE_BITS})")
    if not 0 <= cluster < (1 << _CLUSTER_BITS):
        raise ValueError(f"cluster index {cluster} out of range [0, 2**{_CLUSTER_BITS})")
    if not 0 <= tag < (1 << _TAG_BITS):
        raise ValueError(f"stream tag {tag} out of range [0, 2**{_TAG_BITS})")
    word2 = (replicate << (_CLUSTER_BITS + _TAG_BITS)) | (cluster << _TAG_BITS) | tag
    key = np.array([seed & _MASK64, word2], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
