"""
Named random sub-streams.

Every source of randomness derives from one experiment seed plus a stream
name ("init", "batches", "dropout", "sampling", "subsample", ...) and any
integer keys (fold, member, draw). Two calls with the same arguments return
generators that produce identical sequences, which is what makes every
backend replayable.
"""

import hashlib

import numpy as np

INIT = "init"
BATCHES = "batches"
ADVERSARY_BATCHES = "adversary-batches"
DROPOUT = "dropout"
DROPOUT_TRAIN = "dropout-train"
ZPRED_BATCHES = "zpred-batches"
WEIGHT_NOISE = "weight-noise"
SAMPLING = "sampling"
SUBSAMPLE = "subsample"
GENERATOR = "generator"
PROBES = "probes"
FOLDS = "folds"


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(seed: int, name: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), _name_key(name), *(int(k) for k in keys)])


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return a fresh generator for ``(seed, name, *keys)``."""
    return np.random.default_rng(seed_sequence(seed, name, *keys))


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """Derive a plain integer seed (for APIs that take ``random_state``)."""
    return int(seed_sequence(seed, name, *keys).generate_state(1)[0])
