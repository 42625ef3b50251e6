"""Counter-based normal variates and per-path seed derivation.

Every standard normal is addressed by its flat index ``k`` in a stream keyed
by a 64-bit seed: it is built by Box-Muller from raw Philox outputs ``2k`` and
``2k + 1``.  The value at a given index therefore never depends on how many
other variates were drawn, on batch sizes, or on thread scheduling.
"""
import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One SplitMix64 output for the 64-bit state ``x``."""
    z = (int(x) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def path_seed(master_seed, index):
    """Seed of path ``index`` in a batch: SplitMix64(master_seed XOR index)."""
    return splitmix64((int(master_seed) & _MASK64) ^ int(index))


def counter_normals(seed, count, offset=0):
    """Return ``count`` standard normals starting at stream index ``offset``."""
    if count == 0:
        return np.zeros(0)
    bitgen = np.random.Philox(key=int(seed) & _MASK64)
    if offset:
        # each Philox block yields four 64-bit words
        words = 2 * offset
        bitgen.advance(words // 4)
        skip = words % 4
    else:
        skip = 0
    raw = bitgen.random_raw(2 * count + skip)[skip:]
    raw = raw.reshape(count, 2)
    # 53-bit uniforms; u1 in (0, 1] keeps the logarithm finite
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
