"""
Copyright (C) 2026    NestedCATE contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

Random number streams. All randomness of a run derives from one top-level seed:
stream (seed, STREAM_x, i, j, ...) is numpy's PCG64 seeded by
SeedSequence(seed, spawn_key=(STREAM_x, i, j, ...)). Different stream ids never
share state, so dataset draws, fold splits and bootstrap weights are independent
and replicate b of a bootstrap is reproducible on its own (parallel == serial).
"""

import numpy as np

STREAM_DATA      = 1                                                                     # simulated datasets
STREAM_FOLDS     = 2                                                                     # cross-fitting fold assignment
STREAM_BOOTSTRAP = 3                                                                     # multiplier bootstrap weights, one sub-stream per replicate
STREAM_RESAMPLE  = 4                                                                     # nonparametric bootstrap row resampling
STREAM_REPLICATE = 5                                                                     # per-replicate seeds in validation runs

def make_rng(seed, stream, *ids):
    """Generator for stream (seed, stream, *ids)"""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),) + tuple(int(i) for i in ids))
    return np.random.Generator(np.random.PCG64(seq))

def derive_seed(seed, stream, *ids):
    """Integer seed for a child run (used to hand each validation replicate its own top-level seed)"""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),) + tuple(int(i) for i in ids))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
