"""Counter-based Gaussian substreams.

Every standard normal is a pure function of ``(seed, lane, step, index)``.
Indices are grouped in fixed blocks of :data:`BLOCK`; each block is drawn
from a Philox generator whose 256-bit counter is set to
``[0, block, lane, step]`` and whose key is the seed.  Because the
block layout never depends on the number of worker threads, results are
bitwise identical for any degree of parallelism, and index ``m`` receives
the same normal for every ensemble size ``M > m``.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 4096
_MAX_SEED = 2**128

_default_threads = 1


def set_default_threads(n):
    """Set the worker count used when ``threads`` is not given explicitly."""
    global _default_threads
    if int(n) < 1:
        raise ValueError("threads must be >= 1")
    _default_threads = int(n)


def get_default_threads():
    return _default_threads


def _check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"seed must lie in [0, 2**128), got {seed}")
    return seed


class NoiseStream:
    """Deterministic source of standard normals addressed by counters.

    ``lane`` separates independent families (e.g. players in a game) and
    ``step`` is the global time-step index.
    """

    def __init__(self, seed, threads=None):
        self.seed = _check_seed(seed)
        self.threads = threads

    def __repr__(self):
        return f"NoiseStream(seed={self.seed})"

    def _block(self, job):
        step, lane, block = job
        bitgen = np.random.Philox(key=self.seed, counter=[0, block, lane, step])
        return np.random.Generator(bitgen).standard_normal(BLOCK)

    def _run(self, jobs):
        threads = self.threads or _default_threads
        if threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(self._block, jobs))
        return [self._block(j) for j in jobs]

    def normals(self, step, n, lane=0):
        """Normals for indices ``0..n-1`` at one step, shape ``(n,)``."""
        return self.normals_steps([step], n, lane)[0]

    def normals_steps(self, steps, n, lane=0):
        """Normals for several steps at once, shape ``(len(steps), n)``."""
        steps = [int(s) for s in steps]
        n_blocks = -(-int(n) // BLOCK)
        jobs = [(s, int(lane), b) for s in steps for b in range(n_blocks)]
        blocks = self._run(jobs)
        out = np.empty((len(steps), n_blocks * BLOCK))
        for idx, arr in enumerate(blocks):
            i, b = divmod(idx, n_blocks)
            out[i, b * BLOCK:(b + 1) * BLOCK] = arr
        return out[:, :n]

    def normals_lanes(self, step, n, lanes):
        """Normals for several lanes at one step, shape ``(n, len(lanes))``."""
        lanes = [int(l) for l in lanes]
        n_blocks = -(-int(n) // BLOCK)
        jobs = [(int(step), l, b) for l in lanes for b in range(n_blocks)]
        blocks = self._run(jobs)
        out = np.empty((len(lanes), n_blocks * BLOCK))
        for idx, arr in enumerate(blocks):
            i, b = divmod(idx, n_blocks)
            out[i, b * BLOCK:(b + 1) * BLOCK] = arr
        return out[:, :n].T
