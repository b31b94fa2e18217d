"""Continuous dynamics of the tapping-mode cantilever and the z-axis piezo.

Everything here is a pure function of its arguments. Units are SI throughout;
forces entering the cantilever equation are expressed per unit mass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field


class ModelError(ValueError):
    """Invalid physical parameters."""


@dataclass(frozen=True)
class CantileverParams:
    omega_n: float = 2.85e5 * 2 * math.pi
    Q: float = 100.0
    r: float = 0.9
    k: float = 42.0
    m: float = field(init=False)
    c: float = field(init=False)

    def __post_init__(self):
        if not (self.omega_n > 0 and self.Q > 0 and self.k > 0):
            raise ModelError("omega_n, Q and k must be positive")
        if not 0.0 <= self.r <= 1.0:
            raise ModelError(f"restitution coefficient {self.r} outside [0, 1]")
        m = self.k / self.omega_n**2
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "c", m * self.omega_n / self.Q)

    @property
    def tau_A(self) -> float:
        """Amplitude time constant 2Q/omega_n of the undamped-by-control cantilever."""
        return 2.0 * self.Q / self.omega_n


@dataclass(frozen=True)
class InteractionParams:
    H: float = 1.4e-19
    r_t: float = 2e-9
    l_m: float = 0.42e-9
    E_t: float = 1.65e11
    E_s: float = 1.65e11
    V_t: float = 0.27
    V_s: float = 0.27

    def __post_init__(self):
        for name in ("H", "r_t", "l_m", "E_t", "E_s"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        for name in ("V_t", "V_s"):
            if not 0.0 < getattr(self, name) < 0.5:
                raise ModelError(f"Poisson ratio {name} must lie in (0, 0.5)")

    @property
    def reduced_modulus(self) -> float:
        return 1.0 / ((1 - self.V_t**2) / self.E_t + (1 - self.V_s**2) / self.E_s)


@dataclass(frozen=True)
class DitherDrive:
    D: float
    omega_d: float
    K_Q: float = 0.0

    def __post_init__(self):
        if self.D < 0 or not self.omega_d > 0:
            raise ModelError("drive needs D >= 0 and omega_d > 0")


@dataclass(frozen=True)
class ZPiezoParams:
    omega_zp: float = 1.5e6 * 2 * math.pi
    Q_zp: float = 18.0
    # Unity DC gain; see README "Modelling choices".
    K_zp: float = 1.0

    def __post_init__(self):
        if not (self.omega_zp > 0 and self.Q_zp > 0):
            raise ModelError("omega_zp and Q_zp must be positive")


@dataclass(frozen=True)
class TipState:
    x1: float
    x2: float


def interaction_accel(l: float, p: InteractionParams, m_cant: float) -> float:
    """DMT tip-sample force at separation ``l``, divided by the cantilever mass."""
    attract = p.H * p.r_t / 6.0
    if l > p.l_m:
        return -attract / (l * l) / m_cant
    d = p.l_m - l
    repel = 4.0 / 3.0 * p.reduced_modulus * math.sqrt(p.r_t * d * d * d)
    return (-attract / (p.l_m * p.l_m) + repel) / m_cant


def dither_accel(drive: DitherDrive, t: float, x2: float) -> float:
    return drive.D * math.sin(drive.omega_d * t) - drive.K_Q * x2


def _transfer_magnitude(omega_d: float, c: CantileverParams, Q_eff: float) -> float:
    return abs(complex(c.omega_n**2 - omega_d**2, c.omega_n / Q_eff * omega_d))


def free_amplitude(D: float, omega_d: float, c: CantileverParams, Q_eff: float) -> float:
    """Steady-state amplitude of the force-free oscillator driven with amplitude ``D``."""
    den = _transfer_magnitude(omega_d, c, Q_eff)
    if den == 0.0:
        raise ModelError("degenerate resonance: zero transfer denominator")
    return D / den


def drive_for_amplitude(A_f: float, Q_eff: float, omega_d: float, c: CantileverParams) -> float:
    """Drive amplitude that yields free amplitude ``A_f`` at effective quality factor ``Q_eff``."""
    if A_f < 0:
        raise ModelError("A_f must be non-negative")
    return A_f * _transfer_magnitude(omega_d, c, Q_eff)


def qcontrol_gain(Q_target: float, c: CantileverParams) -> float:
    """Velocity feedback gain that brings the effective quality factor to ``Q_target``."""
    if not Q_target > 0:
        raise ModelError("Q_target must be positive")
    return c.omega_n * (1.0 / Q_target - 1.0 / c.Q)


def cantilever_rhs(
    s: TipState,
    t: float,
    drive: DitherDrive,
    b: float,
    sigma: float,
    c: CantileverParams,
    p: InteractionParams,
) -> tuple[float, float]:
    u = dither_accel(drive, t, s.x2)
    F = interaction_accel(b + s.x1 - sigma, p, c.m)
    return s.x2, -c.omega_n**2 * s.x1 - c.omega_n / c.Q * s.x2 + u + F


def impact_reset(s: TipState, r: float, sigma: float, b: float) -> TipState:
    return TipState(sigma - b, -r * s.x2)


def zpiezo_rhs(z: tuple[float, float], b_cmd: float, zp: ZPiezoParams) -> tuple[float, float]:
    b, w = z
    return w, zp.omega_zp**2 * (zp.K_zp * b_cmd - b) - zp.omega_zp / zp.Q_zp * w


def steady_free_state(A_f: float, omega_d: float, c: CantileverParams, Q_eff: float, t: float) -> TipState:
    """Tip state on the force-free periodic orbit at time ``t``.

    The drive is ``D sin(omega_d t)``; the response lags it by the phase of the
    second-order transfer function at ``Q_eff``.
    """
    phase = -math.atan2(c.omega_n / Q_eff * omega_d, c.omega_n**2 - omega_d**2)
    arg = omega_d * t + phase
    return TipState(A_f * math.sin(arg), A_f * omega_d * math.cos(arg))
