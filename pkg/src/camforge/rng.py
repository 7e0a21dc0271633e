"""SplitMix64, the only random source in the package.

Every seeded quantity (toy weights, synthetic images, probe units, beta
fields) comes from this generator so results are reproducible bit for bit.
"""

_MASK = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & _MASK
        z = ((z ^ (z >> 27)) * MIX2) & _MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniforms(self, n: int, low: float = 0.0, high: float = 1.0) -> list[float]:
        span = high - low
        return [low + span * self.uniform() for _ in range(n)]

    def below(self, n: int) -> int:
        """Integer in [0, n); modulo bias is negligible for the small n used here."""
        return self.next_u64() % n
