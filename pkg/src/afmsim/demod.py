"""Sample-and-hold amplitude demodulation and position-noise injection."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np


class OutOfOrderSample(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = False
    std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be non-negative")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def add_noise(x1: float, n: NoiseConfig, rng: np.random.Generator) -> float:
    if not n.enabled or n.std == 0.0:
        return x1
    return x1 + n.std * float(rng.standard_normal())


class NoiseSource:
    """Buffered Gaussian stream; draws in blocks to keep per-sample cost low.

    Produces the same sequence as repeated ``add_noise`` calls on a generator
    seeded identically.
    """

    def __init__(self, n: NoiseConfig, block: int = 4096):
        self.cfg = n
        self.active = n.enabled and n.std > 0.0
        self._rng = n.make_rng()
        self._block = block
        self._buf = np.empty(0)
        self._i = 0

    def __call__(self, x1: float) -> float:
        if not self.active:
            return x1
        if self._i >= len(self._buf):
            self._buf = self._rng.standard_normal(self._block)
            self._i = 0
        v = self._buf[self._i]
        self._i += 1
        return x1 + self.cfg.std * float(v)


class Demodulator:
    """Peak-hold demodulator updating once per half drive period.

    Half-period windows are aligned to ``k * pi / omega_d``. At each window
    boundary the held amplitude becomes the largest ``|x1|`` seen in the
    window just closed; the amplitude rate is the mean of the last
    ``smoothing`` backward differences.
    """

    def __init__(self, omega_d: float, A0: float = 0.0, t0: float = 0.0, smoothing: int = 4):
        self.omega_d = omega_d
        self.half_period = math.pi / omega_d
        self.current_A = A0
        self.dA_dt = 0.0
        self.smoothing = smoothing
        self.history: deque[tuple[float, float]] = deque(maxlen=smoothing + 1)
        self._k = math.floor(t0 / self.half_period)
        self._next_boundary = (self._k + 1) * self.half_period
        self.half_period_extreme = 0.0
        self.last_update_t = t0
        self._last_t = -math.inf
        self.n_updates = 0

    def ingest(self, t: float, x1: float) -> bool:
        """Feed one sample; returns True if the held amplitude was updated."""
        if t < self._last_t:
            raise OutOfOrderSample(f"sample at t={t!r} after t={self._last_t!r}")
        self._last_t = t
        updated = False
        if t >= self._next_boundary:
            self._close_window()
            updated = True
            # skip windows with no samples at all (long solver steps)
            if t >= self._next_boundary:
                self._k = math.floor(t / self.half_period)
                self._next_boundary = (self._k + 1) * self.half_period
        a = abs(x1)
        if a > self.half_period_extreme:
            self.half_period_extreme = a
        return updated

    def _close_window(self) -> None:
        t_b = self._next_boundary
        A = self.half_period_extreme
        self.current_A = A
        self.history.append((t_b, A))
        if len(self.history) >= 2:
            t_old, A_old = self.history[0]
            self.dA_dt = (A - A_old) / (t_b - t_old)
        self.last_update_t = t_b
        self.half_period_extreme = 0.0
        self._k += 1
        self._next_boundary = (self._k + 1) * self.half_period
        self.n_updates += 1
