import numpy as np

MASK64 = (1 << 64) - 1


class RngStream:
    """
    Counter-based random stream keyed by (seed, stream_id).

    Backed by Philox4x64: the n-th draw depends only on the key and n, so a
    chain that owns stream_id = c sees the same numbers on any thread.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= MASK64 and 0 <= stream_id <= MASK64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64))
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    @property
    def counter(self) -> int:
        """128-bit Philox block counter (number of 4x64-bit blocks produced)."""
        words = self._bitgen.state["state"]["counter"]
        return int(words[0]) | (int(words[1]) << 64)

    def spawn(self, stream_id: int) -> "RngStream":
        """Sibling stream with the same seed."""
        return RngStream(self.seed, stream_id)

    def child(self, index: int) -> "RngStream":
        """Derived stream for sub-blocks (path blocks, tube samples, bootstrap)."""
        seq = np.random.SeedSequence([self.seed, self.stream_id, int(index)])
        derived = int(seq.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.seed, derived)

    def fresh(self) -> "RngStream":
        """Same key, counter rewound to zero."""
        return RngStream(self.seed, self.stream_id)

    # --- DRAWS ---

    def standard_normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def gaussian_matrix(self, rows: int, cols: int, stddev: float = 1.0) -> np.ndarray:
        return gaussian_matrix(self, rows, cols, stddev)


def gaussian_matrix(rng: RngStream, rows: int, cols: int, stddev: float = 1.0) -> np.ndarray:
    """rows x cols matrix of i.i.d. N(0, stddev^2) entries."""
    if stddev <= 0:
        raise ValueError("stddev must be positive")
    return stddev * rng.standard_normal((rows, cols))


def haar_orthonormal(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """Haar-distributed rows x cols matrix with orthonormal columns (QR of a Gaussian)."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs
