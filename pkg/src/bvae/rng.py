"""Deterministic random-stream derivation.

Every consumer of randomness gets its own named substream derived from the
single master seed, so adding draws in one place never shifts another.
A stream is identified by (master_seed, STREAM_IDS[name], *extra) fed into
numpy's SeedSequence; ``extra`` indexes per-epoch / per-step / per-restart
substreams.  The scheme is stateless: (seed, name, extra) fully determines
the stream, which is what makes checkpoint resume bit-exact.
"""

import numpy as np

STREAM_IDS = {
    "init": 0,        # weight initialization (encoder, decoder, branch, probe)
    "shuffle": 1,     # per-epoch batch shuffling
    "epsilon": 2,     # reparameterization noise, per (epoch, step)
    "rotation": 3,    # per-sample rotation angles
    "kmeans": 4,      # k-means++ seeding, per restart
    "forest": 5,      # random-forest bootstrap/feature draws, per tree
    "probe": 6,       # probe classifier init + shuffling
    "target": 7,      # target-set synthesis
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for the named stream of a master seed."""
    if name not in STREAM_IDS:
        raise KeyError(f"unknown stream name {name!r}")
    entropy = [int(seed), STREAM_IDS[name], *[int(e) for e in extra]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
