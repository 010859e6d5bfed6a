"""Labelled random streams derived from a base seed.

Every replicate gets its own family of generators, addressed by
``(base_seed, replicate, role)``. Streams are built with numpy's
``SeedSequence`` spawn keys, so they are independent of the order in which
replicates are executed and of the number of worker processes.
"""

import numpy as np

ROLES = ("init", "kernel", "design", "data", "pilot")


def role_id(role):
    if isinstance(role, int):
        return role
    try:
        return ROLES.index(role)
    except ValueError:
        raise ValueError(f"unknown stream role {role!r}; expected one of {ROLES}") from None


def derive_seed_sequence(base_seed, replicate=0, role="kernel"):
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(replicate), role_id(role)))


def derive_rng(base_seed, replicate=0, role="kernel"):
    """Generator for stream ``role`` of replicate ``replicate``."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(base_seed, replicate, role)))


def replicate_seed(base_seed, replicate):
    """A single integer identifying a replicate, reported in output rows."""
    ss = derive_seed_sequence(base_seed, replicate, "kernel")
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def uniform_open(rng, size=None):
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(size)
    if size is None:
        while u == 0.0:
            u = rng.random()
        return u
    bad = u == 0.0
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum()))
        bad = u == 0.0
    return u
