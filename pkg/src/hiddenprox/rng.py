"""Counter-based random streams.

Draw ``s`` of record ``i`` under seed ``seed`` is a pure function of the
triple, so any partition of the records across workers reproduces the serial
output exactly.  The mixer is SplitMix64; record keys are
``splitmix64(seed XOR splitmix64(i))``.
"""
import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SLOT = np.uint64(0xD1B54A32D192ED03)


def splitmix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def record_keys(seed, index):
    seed = np.uint64(int(seed) & _MASK)
    return splitmix64(seed ^ splitmix64(np.asarray(index, dtype=np.uint64)))


def uniforms(keys, slot):
    """Uniforms on the open interval (0, 1), one per key."""
    with np.errstate(over="ignore"):
        bits = splitmix64(keys ^ (np.uint64(slot + 1) * _SLOT))
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(keys, slot):
    """Standard normals by Box-Muller on slots ``slot`` and ``slot + 1``."""
    u1 = uniforms(keys, slot)
    u2 = uniforms(keys, slot + 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
