"""Seeded substreams.

Each simulation component draws from its own Philox stream derived from the
master seed, so e.g. the noise of a trial can be redrawn without touching the
pooling matrix or the signal.
"""
import numpy as np

COMPONENTS = {
    "matrix": 1,
    "signal": 2,
    "mme": 3,
    "noise": 4,
    "shuffle": 5,
    "solver": 6,
    "lilliefors": 7,
    "cv": 8,
}


def stream(seed, component, *keys):
    """Return a ``numpy.random.Generator`` for ``(seed, component, *keys)``.

    ``keys`` are extra non-negative integers (trial index, stage, ...) that
    further split the component stream.
    """
    if component not in COMPONENTS:
        raise KeyError(f"unknown RNG component {component!r}")
    seq = np.random.SeedSequence(
        int(seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(COMPONENTS[component],) + tuple(int(k) for k in keys),
    )
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed, *keys):
    """Derive a 64-bit child seed from ``seed`` and integer ``keys``."""
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
