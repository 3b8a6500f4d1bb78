import numpy as np

# stream purposes, mixed into every derived seed
FIT = 0
BOOTSTRAP = 1
SWEEP = 2
SYNTH = 3


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    """
    Seed sequence for the stream identified by `seed` and an ordered tuple of
    integer keys, e.g. (BOOTSTRAP, tau, replicate). Keys are folded to 32 bits
    so negative time indices are accepted.
    """
    entropy = [int(seed) % 2**32] + [int(k) % 2**32 for k in keys]
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: int) -> int:
    return int(seed_sequence(seed, *keys).generate_state(1)[0])
