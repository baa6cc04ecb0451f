"""Keyed random streams.

Every draw is addressed by ``(seed, step, role)``; row ``i`` of a block
belongs to particle lane ``i``. Changing evaluation order therefore never
changes the numbers a particle sees.
"""

import numpy as np

ROLES = {
    "truth_init": 0,
    "truth_proc": 1,
    "truth_obs": 2,
    "init": 3,
    "proc": 4,
    "obs": 5,
    "perm": 6,
    "resample": 7,
    "ref_proc": 8,
    "ref_obs": 9,
    "net_T": 10,
    "net_psi": 11,
    "pairs": 12,
    "mc": 13,
}


def stream(seed, step=0, role="proc"):
    """Independent generator for one ``(seed, step, role)`` address."""
    code = ROLES[role] if isinstance(role, str) else int(role)
    return np.random.default_rng([int(seed), int(step), code])


def normals(seed, step, role, shape, lanes=None):
    """Standard normal block; ``lanes`` reorders rows (particle lanes)."""
    block = stream(seed, step, role).standard_normal(shape)
    return block if lanes is None else block[np.asarray(lanes)]
