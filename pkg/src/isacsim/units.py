"""Physical constants, dB helpers and seeded random streams."""

from __future__ import annotations

import numpy as np
from scipy import constants

C0 = constants.c
K_B = constants.k

# Fixed stream identifiers so every consumer of a seed draws from its own
# independent generator; the numbers must never be reused or renumbered.
STREAMS = {
    "data": 1,
    "pilots": 2,
    "preamble": 3,
    "path_phase": 4,
    "awgn": 5,
    "pn_tx": 6,
    "pn_rx": 7,
    "sj_dac": 8,
    "sj_adc": 9,
    "misc": 10,
}


def db10(x):
    return 10.0 * np.log10(x)


def db20(x):
    return 20.0 * np.log10(x)


def from_db(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def dbm_to_w(p_dbm):
    return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)


def w_to_dbm(p_w):
    return 10.0 * np.log10(p_w) + 30.0


def rng_for(seed: int, stream: str, run: int = 0) -> np.random.Generator:
    """Return a generator for ``(seed, stream, run)``.

    Runs and streams are keyed into the seed sequence rather than drawn
    sequentially, so results do not depend on evaluation order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[stream], int(run)]))
