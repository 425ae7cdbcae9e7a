"""Counter-based random streams keyed by (seed, purpose, stratum, trial).

Each (seed, tag, stratum) triple owns an independent Philox stream; a
trial occupies a fixed, block-aligned window of that stream's counter
space. Draws for any trial can therefore be produced in isolation or in
bulk (a 2D matrix of trials x draws) with byte-identical results, which
makes Monte Carlo studies order-independent and embarrassingly parallel.

Philox advances its counter in native blocks of 4 64-bit outputs, so a
trial's window is padded up to a whole number of blocks.
"""

from __future__ import annotations

import hashlib

import numpy as np

_PHILOX_BLOCK = 4  # native outputs per counter increment


def _stream_key(seed: int, tag: str, stratum_id: int) -> np.ndarray:
    """Derive a 128-bit Philox key from the (seed, tag, stratum) triple."""
    material = f"{int(seed)}|{tag}|{int(stratum_id)}".encode()
    digest = hashlib.sha256(material).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def _blocks_for(draws: int) -> int:
    return -(-int(draws) // _PHILOX_BLOCK)


class TrialStream:
    """Uniform draws for one (seed, tag, stratum) stream, windowed by trial.

    ``draws_per_trial`` fixes the window width; trial t consumes counter
    blocks [t * blocks, (t + 1) * blocks).
    """

    def __init__(self, seed: int, tag: str, stratum_id: int, draws_per_trial: int):
        if draws_per_trial < 0:
            raise ValueError("draws_per_trial must be >= 0")
        self.seed = int(seed)
        self.tag = str(tag)
        self.stratum_id = int(stratum_id)
        self.draws_per_trial = int(draws_per_trial)
        self._key = _stream_key(seed, tag, stratum_id)
        self._blocks = _blocks_for(draws_per_trial)

    def _bit_generator(self, trial: int) -> np.random.Philox:
        ph = np.random.Philox(key=self._key)
        if trial:
            ph.advance(int(trial) * self._blocks)
        return ph

    def uniforms(self, trial: int) -> np.ndarray:
        """The ``draws_per_trial`` uniforms of one trial window."""
        if self.draws_per_trial == 0:
            return np.empty(0)
        gen = np.random.Generator(self._bit_generator(trial))
        return gen.random(self._blocks * _PHILOX_BLOCK)[: self.draws_per_trial]

    def uniform_matrix(self, trial_start: int, trial_count: int) -> np.ndarray:
        """Rows ``trial_start .. trial_start + trial_count - 1`` at once.

        Row i is byte-identical to ``uniforms(trial_start + i)``.
        """
        if self.draws_per_trial == 0:
            return np.empty((trial_count, 0))
        gen = np.random.Generator(self._bit_generator(trial_start))
        flat = gen.random((int(trial_count), self._blocks * _PHILOX_BLOCK))
        return flat[:, : self.draws_per_trial]


def uniforms_to_indices(u: np.ndarray, size: int) -> np.ndarray:
    """Map U[0,1) draws to integer indices in [0, size) by floor(u * size).

    The clip guards the measure-zero float case where u * size rounds up
    to ``size``.
    """
    idx = np.floor(u * size).astype(np.int64)
    return np.minimum(idx, size - 1)
