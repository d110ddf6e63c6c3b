"""Counter-based deterministic random stream.

Every stochastic choice in the package (parameter init, dropout masks,
shuffling, synthetic data) draws from an RngStream so that a run is a pure
function of its seed, independent of evaluation order or platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15  # golden-ratio increment (splitmix64)


def _mix64(x: int) -> int:
    """splitmix64 finalizer on a 64-bit integer."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix64_arr(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def derive_seed(seed: int, label: str) -> int:
    """Child seed for an independent sub-stream, stable in (seed, label)."""
    h = 0xCBF29CE484222325  # FNV-1a over the label bytes
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return _mix64(seed ^ h)


class RngStream:
    """Deterministic stream: draw i is a pure function of (seed, i)."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def _bulk(self, n: int) -> np.ndarray:
        """Next n raw 64-bit values, advancing the counter by n."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        state = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
        return _mix64_arr(state)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        """Uniform floats in [low, high); scalar when size is None."""
        n = 1 if size is None else int(np.prod(size))
        # 53 significant bits, same construction as the standard double trick
        u = (self._bulk(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def integers(self, n: int, size=None) -> np.ndarray | int:
        """Uniform integers in [0, n) via rejection-free modulo on 64 bits.

        The modulo bias is < n / 2**64, far below anything observable here.
        """
        if n <= 0:
            raise ValueError("integers: n must be positive")
        count = 1 if size is None else int(np.prod(size))
        vals = self._bulk(count) % np.uint64(n)
        if size is None:
            return int(vals[0])
        return vals.astype(np.int64).reshape(size)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle of a copy; the input list is left untouched."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integers(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def derive(self, label: str) -> "RngStream":
        """Independent child stream; does not consume from this stream."""
        return RngStream(derive_seed(self.seed, label))
