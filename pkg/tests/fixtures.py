"""Shared hand-built inputs for the decoding tests.

``fig2_grid`` is the nine-frame posterior fragment used throughout the ESA
tests: letters C/A/T/S map to ids 1/2/3/4, blank is 0. Its top-1 row is
C C _ A _ T T S _ and the four frames below the 0.7 confidence line are
3, 5, 6, 7 (1-based).
"""

import numpy as np

from alignat.lattice import PosteriorGrid

C, A, T, S = 1, 2, 3, 4

FIG2_ROWS = np.array(
    [
        #  _     C     A     T     S
        [0.04, 0.90, 0.02, 0.02, 0.02],
        [0.04, 0.88, 0.03, 0.03, 0.02],
        [0.51, 0.44, 0.03, 0.01, 0.01],
        [0.04, 0.02, 0.89, 0.03, 0.02],
        [0.65, 0.02, 0.02, 0.30, 0.01],
        [0.34, 0.02, 0.02, 0.61, 0.01],
        [0.43, 0.02, 0.01, 0.52, 0.02],
        [0.02, 0.01, 0.01, 0.01, 0.95],
        [0.90, 0.03, 0.03, 0.02, 0.02],
    ]
)


def fig2_grid() -> PosteriorGrid:
    return PosteriorGrid(FIG2_ROWS.copy())


def random_grid(rng: np.random.Generator, n_frames: int, vocab: int) -> PosteriorGrid:
    return PosteriorGrid(rng.dirichlet(np.ones(vocab), size=n_frames))
