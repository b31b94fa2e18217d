"""Controllers acting on the z-axis piezo, the dither piezo and the scan speed.

The pieces are pure functions plus small state records; ``ControllerStack``
wires them together for one scan line and is sampled by the simulator at a
fixed control period.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .model import CantileverParams, drive_for_amplitude, qcontrol_gain


class ControlError(ValueError):
    pass


class EffectiveQNonPositive(ControlError):
    pass


class WindowTooLarge(ControlError):
    pass


class InsufficientHistory(ControlError):
    pass


# ---------------------------------------------------------------- PID


@dataclass(frozen=True)
class PidConfig:
    A_f: float
    A_r: float
    K_P: float = 0.0
    K_I: float = 10000.0
    K_D: float = 0.0
    integrator_limit: float | None = None

    def __post_init__(self):
        if not self.A_r < self.A_f:
            raise ControlError("reference amplitude must be below the free amplitude")
        if not all(math.isfinite(g) for g in (self.K_P, self.K_I, self.K_D)):
            raise ControlError("PID gains must be finite")


def pid_update(integral: float, e: float, de_dt: float, cfg: PidConfig, dt: float) -> tuple[float, float]:
    """Advance the integrator by one rectangle and return ``(integral, output)``."""
    integral += e * dt
    lim = cfg.integrator_limit
    if lim is not None:
        integral = min(max(integral, -lim), lim)
    return integral, cfg.K_P * e + cfg.K_I * integral + cfg.K_D * de_dt


def dynamic_pid_error(A: float, A_r: float, A_t: float, K_s: float) -> float:
    """Amplitude error with the part beyond ``A_t`` amplified by ``K_s``.

    Continuous at ``A == A_t``.
    """
    if A <= A_t:
        return A_r - A
    return (A_r - A_t) + K_s * (A_t - A)


# ---------------------------------------------------------------- hybrid PID


class Mode(IntEnum):
    REGULAR = 1
    PROBE_LOSS = 2
    RECOVERY = 3
    RECOIL = 4


@dataclass(frozen=True)
class HybridConfig:
    A_r: float
    K_s: float = 15.0
    A_t_plus: float = 0.0
    A_t_minus: float = 0.0
    A_t_RL: float = 0.0
    alpha_t: float = 0.0
    dQ_PL: float = 25.0
    dQ_RL: float = 25.0
    Q_prime: float = 30.0
    K_tau: float = 5.0
    guards_enabled: bool = True
    recoil_mode: bool = True

    def __post_init__(self):
        if not self.A_t_minus < self.A_t_plus:
            raise ControlError("A_t_minus must be below A_t_plus")
        if not self.A_t_plus > self.A_r:
            raise ControlError("A_t_plus must exceed A_r")
        if not self.A_t_RL < self.A_r:
            raise ControlError("A_t_RL must be below A_r")
        if self.dQ_PL < 0 or self.dQ_RL < 0:
            raise ControlError("damping increments must be non-negative")

    @classmethod
    def table_defaults(cls, A_f: float, A_r: float | None = None, **kw) -> "HybridConfig":
        A_r = 0.9 * A_f if A_r is None else A_r
        base = dict(
            A_r=A_r,
            A_t_plus=0.95 * A_f,
            A_t_minus=0.94 * A_f,
            A_t_RL=0.5 * A_r,
            alpha_t=-400.0 * A_f,
        )
        base.update(kw)
        return cls(**base)


@dataclass
class HybridState:
    q: Mode = Mode.REGULAR
    rho: bool = False
    t0: float = 0.0


def hybrid_transition(h: HybridState, A: float, dA_dt: float, t: float, cfg: HybridConfig, tau_A: float) -> HybridState:
    """Apply at most one guard of the four-mode automaton and return the new state."""
    q, rho, t0 = h.q, h.rho, h.t0
    if not cfg.guards_enabled:
        return HybridState(q, rho, t0)
    timeout = t - t0 >= cfg.K_tau * tau_A
    if q == Mode.REGULAR:
        if A >= cfg.A_t_plus:
            return HybridState(Mode.PROBE_LOSS, rho, t0)
        if cfg.recoil_mode and A <= cfg.A_t_RL:
            return HybridState(Mode.RECOIL, False, t)
    elif q == Mode.PROBE_LOSS:
        # the impact guard outranks the threshold exit
        if dA_dt < cfg.alpha_t:
            return HybridState(Mode.RECOVERY, False, t)
        if A <= cfg.A_t_minus:
            return HybridState(Mode.REGULAR, rho, t0)
    elif q == Mode.RECOVERY:
        if (dA_dt < 0 and rho) or timeout:
            return HybridState(Mode.REGULAR, rho, t0)
        if dA_dt > 0 and not rho:
            return HybridState(q, True, t0)
    elif q == Mode.RECOIL:
        if (dA_dt < cfg.alpha_t and rho) or timeout:
            return HybridState(Mode.REGULAR, rho, t0)
        if dA_dt > 0 and not rho:
            return HybridState(q, True, t0)
    return HybridState(q, rho, t0)


def probe_loss_q(A: float, A_r: float, A_f: float, cfg: HybridConfig) -> float:
    return cfg.Q_prime - cfg.dQ_PL * min(abs((A_r - A) / (A_r - A_f)), 1.0)


def recoil_q(A: float, A_r: float, cfg: HybridConfig) -> float:
    return cfg.Q_prime - cfg.dQ_RL * min(abs((A_r - A) / A_r), 1.0)


def hybrid_outputs(
    q: Mode, A: float, cfg: HybridConfig, c: CantileverParams, A_f: float, omega_d: float
) -> tuple[float, float, float]:
    """Mode-dependent ``(K_s, D, K_Q)``."""
    K_s = cfg.K_s if q == Mode.PROBE_LOSS else 1.0
    if q == Mode.RECOVERY:
        Q_eff = probe_loss_q(A, cfg.A_r, A_f, cfg)
    elif q == Mode.RECOIL:
        Q_eff = recoil_q(A, cfg.A_r, cfg)
    else:
        Q_eff = cfg.Q_prime
    if not Q_eff > 0:
        raise EffectiveQNonPositive(f"effective Q {Q_eff} in mode {int(q)}")
    return K_s, drive_for_amplitude(A_f, Q_eff, omega_d, c), qcontrol_gain(Q_eff, c)


# ---------------------------------------------------------------- scan speed


def _below(a: float, b: float) -> bool:
    return a < b or (a == b and math.isinf(a))


@dataclass(frozen=True)
class SpeedConfig:
    tau_v: float
    V_x0: float
    V_xm: float
    V_xM: float
    b_Ma: float
    b_Md: float
    b_La: float
    b_Ld: float
    b_ra: float
    b_rd: float

    def __post_init__(self):
        chain = (self.b_Md, self.b_Ld, self.b_rd, 0.0, self.b_ra, self.b_La, self.b_Ma)
        if not all(_below(a, b) for a, b in zip(chain, chain[1:])):
            raise ControlError(f"db/dt limits out of order: {chain}")
        if not self.V_xm <= self.V_x0 <= self.V_xM:
            raise ControlError("need V_xm <= V_x0 <= V_xM")
        if not self.tau_v > 0:
            raise ControlError("tau_v must be positive")

    @classmethod
    def table_defaults(cls, V_x0: float, K_I: float, A_r: float, A_t_RL: float, A_t_plus: float, **kw) -> "SpeedConfig":
        b_Ma = K_I * (A_r - A_t_RL)
        b_Md = K_I * (A_r - A_t_plus)
        base = dict(
            tau_v=0.12e-3,
            V_x0=V_x0,
            V_xm=0.1 * V_x0,
            V_xM=V_x0,
            b_Ma=b_Ma,
            b_Md=b_Md,
            b_La=0.9 * b_Ma,
            b_Ld=0.9 * b_Md,
            b_ra=0.8 * b_Ma,
            b_rd=0.8 * b_Md,
        )
        base.update(kw)
        return cls(**base)

    @property
    def K_va(self) -> float:
        return self.V_xM / abs(self.b_La - self.b_ra)

    @property
    def K_vd(self) -> float:
        return self.V_xM / abs(self.b_Ld - self.b_rd)


def speed_target(db_dt: float, cfg: SpeedConfig) -> float:
    """Input of the first-order speed law for a given base-height rate."""
    if db_dt > cfg.b_ra:
        return cfg.V_xM - cfg.K_va * abs(db_dt - cfg.b_ra)
    if db_dt < cfg.b_rd:
        return cfg.V_xM - cfg.K_vd * abs(db_dt - cfg.b_rd)
    return cfg.V_xM


def speed_update(v_x: float, db_dt: float, cfg: SpeedConfig, dt: float) -> float:
    """Advance ``v_x`` over ``dt`` with the input held, then clamp to the speed limits.

    The held-input first-order law is integrated exactly.
    """
    target = speed_target(db_dt, cfg)
    v = target + (v_x - target) * math.exp(-dt / cfg.tau_v)
    return min(max(v, cfg.V_xm), cfg.V_xM)


# ---------------------------------------------------------------- predictive


@dataclass(frozen=True)
class PredictiveConfig:
    M_PC: int
    E_sigma: float
    N_W: float
    n_grid: int = 1001

    def __post_init__(self):
        if self.M_PC < 1:
            raise ControlError("M_PC must be at least 1")
        if not self.E_sigma > 0:
            raise ControlError("E_sigma must be positive")
        if not self.N_W > 0:
            raise ControlError("N_W must be positive")

    @classmethod
    def table_defaults(cls, A_f: float, I_x: float, **kw) -> "PredictiveConfig":
        base = dict(M_PC=3, E_sigma=0.1 * A_f * I_x, N_W=0.01 * I_x)
        base.update(kw)
        return cls(**base)


def _segment_integral(values: np.ndarray, dx: float, pos: np.ndarray) -> np.ndarray:
    """Integral from 0 to ``pos`` of the piecewise-linear interpolant of ``values``."""
    n = len(values)
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (values[1:] + values[:-1]) * dx)))
    u = pos / dx
    j = np.clip(np.floor(u).astype(int), 0, n - 2)
    s = pos - j * dx
    slope = (values[j + 1] - values[j]) / dx
    return cum[j] + values[j] * s + 0.5 * slope * s * s


def window_filter(line, dx: float, N_W: float) -> np.ndarray:
    """Moving average of half-width ``N_W`` of a uniformly sampled line.

    The line is treated as piecewise linear and extended by its end values
    beyond ``[0, I_x]``.
    """
    v = np.asarray(line, dtype=float)
    I_x = (len(v) - 1) * dx
    if N_W >= I_x / 2:
        raise WindowTooLarge(f"N_W={N_W} >= I_x/2={I_x / 2}")
    x = np.arange(len(v)) * dx
    lo = x - N_W
    hi = x + N_W

    def primitive(p):
        inner = np.clip(p, 0.0, I_x)
        out = _segment_integral(v, dx, inner)
        out = out + np.where(p < 0.0, p * v[0], 0.0)
        out = out + np.where(p > I_x, (p - I_x) * v[-1], 0.0)
        return out

    return (primitive(hi) - primitive(lo)) / (2.0 * N_W)


def line_difference(a, b, dx: float) -> float:
    """Trapezoidal integral of ``|a - b|`` over the line."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return float(np.sum(0.5 * (d[1:] + d[:-1])) * dx)


def adaptive_gains(history, E_sigma: float, dx: float) -> list[float]:
    """Gains for the previous ``M_PC`` lines.

    ``history`` lists filtered lines newest first and must hold ``M_PC + 1``
    of them. Line ``j`` (1-based) weighs ``2**-j`` (``2**-(j-1)`` for the
    oldest) scaled down by how much it differs from the line before it.
    """
    hist = list(history)
    M = len(hist) - 1
    if M < 1:
        raise InsufficientHistory("need at least two filtered lines")
    gains = []
    for j in range(1, M + 1):
        e_j = line_difference(hist[j - 1], hist[j], dx)
        norm = 2.0 ** -(j - 1) if j == M else 2.0**-j
        gains.append(norm * max((E_sigma - e_j) / E_sigma, 0.0))
    return gains


def predictive_feedforward(lines, gains, dx: float, i_x: float) -> float:
    """Gain-weighted sum of stored lines at ``i_x`` (linear interpolation)."""
    total = 0.0
    for g, ln in zip(gains, lines):
        if g == 0.0:
            continue
        total += g * float(np.interp(i_x, np.arange(len(ln)) * dx, ln))
    return total


class PredictiveHistory:
    """Filtered estimates of completed lines, used to feed forward into later lines."""

    def __init__(self, cfg: PredictiveConfig, I_x: float):
        self.cfg = cfg
        self.I_x = I_x
        self.grid = np.linspace(0.0, I_x, cfg.n_grid)
        self.dx = self.grid[1] - self.grid[0]
        self.lines: list[np.ndarray] = []

    def append(self, i_x, sigma_hat) -> np.ndarray:
        """Resample one line's estimate onto the common grid, filter and store it."""
        i_x = np.asarray(i_x, dtype=float)
        sh = np.asarray(sigma_hat, dtype=float)
        order = np.argsort(i_x, kind="stable")
        resampled = np.interp(self.grid, i_x[order], sh[order])
        filtered = window_filter(resampled, self.dx, self.cfg.N_W)
        self.lines.append(filtered)
        return filtered

    def ready(self) -> bool:
        return len(self.lines) >= self.cfg.M_PC + 1

    def gains(self) -> list[float]:
        if not self.ready():
            return [0.0] * self.cfg.M_PC
        recent = self.lines[::-1][: self.cfg.M_PC + 1]
        return adaptive_gains(recent, self.cfg.E_sigma, self.dx)

    def feedforward_profile(self) -> tuple[list[float], np.ndarray]:
        """Gains for the next line and the combined feedforward profile on the grid."""
        gains = self.gains()
        prof = np.zeros_like(self.grid)
        if self.ready():
            recent = self.lines[::-1][: self.cfg.M_PC]
            for g, ln in zip(gains, recent):
                prof = prof + g * ln
        return gains, prof


# ---------------------------------------------------------------- the stack


@dataclass(frozen=True)
class ControllerFlags:
    q_control: bool = True
    dynamic_pid: bool = True
    hybrid_pid: bool = False
    speed_regulator: bool = False
    predictive: bool = False

    def __post_init__(self):
        if self.hybrid_pid and not self.q_control:
            raise ControlError("hybrid PID requires Q control")


@dataclass
class ControlOutput:
    b_cmd: float
    D: float
    K_Q: float
    v_x: float


@dataclass
class ControllerState:
    integral: float = 0.0
    b_pid: float = 0.0
    e_prev: float = 0.0
    hybrid: HybridState = field(default_factory=HybridState)
    v_x: float = 0.0
    feedforward: float = 0.0


class OpenLoop:
    """Constant base height and drive; stands in for the controllers in open-loop runs."""

    def __init__(self, b: float, D: float, K_Q: float = 0.0):
        self.out = ControlOutput(b, D, K_Q, 0.0)
        self.q = int(Mode.REGULAR)

    def update(self, t: float, A: float, dA_dt: float, i_x: float, dt: float) -> ControlOutput:
        return self.out


class ControllerStack:
    """All controllers for one scan line, sampled every ``dt`` seconds."""

    def __init__(
        self,
        flags: ControllerFlags,
        cant: CantileverParams,
        omega_d: float,
        pid: PidConfig,
        hybrid: HybridConfig,
        speed: SpeedConfig | None = None,
        v_x_fixed: float = 0.0,
        feedforward: tuple[np.ndarray, np.ndarray] | None = None,
    ):
        self.flags = flags
        self.cant = cant
        self.omega_d = omega_d
        self.pid = pid
        self.hybrid = hybrid
        self.speed = speed
        self.v_x_fixed = v_x_fixed
        if flags.speed_regulator and speed is None:
            raise ControlError("speed regulator enabled without a SpeedConfig")
        self._ff_grid, self._ff_prof = feedforward if feedforward is not None else (None, None)
        if self._ff_grid is not None:
            self._ff_dx = float(self._ff_grid[1] - self._ff_grid[0])
            self._ff_list = self._ff_prof.tolist()
        A_f = pid.A_f
        if flags.q_control:
            self.Q_eff = hybrid.Q_prime
        else:
            self.Q_eff = cant.Q
        self.D_base = drive_for_amplitude(A_f, self.Q_eff, omega_d, cant)
        self.K_Q_base = qcontrol_gain(self.Q_eff, cant) if flags.q_control else 0.0
        self.tau_A = 2.0 * self.Q_eff / cant.omega_n
        self.state = ControllerState()
        self.scanning = False

    def reset(self, b0: float, i_x: float = 0.0) -> ControlOutput:
        """Bumpless start with the commanded height equal to ``b0``."""
        ff = self.feedforward_at(i_x)
        st = self.state
        st.feedforward = ff
        st.b_pid = b0 - ff
        st.integral = st.b_pid / self.pid.K_I if self.pid.K_I else 0.0
        st.e_prev = 0.0
        st.hybrid = HybridState()
        st.v_x = 0.0
        return ControlOutput(b0, self.D_base, self.K_Q_base, 0.0)

    def start_scan(self) -> None:
        self.scanning = True
        if self.flags.speed_regulator:
            self.state.v_x = self.speed.V_x0
        else:
            self.state.v_x = self.v_x_fixed

    def feedforward_at(self, i_x: float) -> float:
        if self._ff_grid is None:
            return 0.0
        prof = self._ff_list
        u = i_x / self._ff_dx
        j = int(u)
        last = len(prof) - 1
        if j >= last:
            return prof[last]
        if j < 0:
            return prof[0]
        f = u - j
        return prof[j] + f * (prof[j + 1] - prof[j])

    def update(self, t: float, A: float, dA_dt: float, i_x: float, dt: float) -> ControlOutput:
        st = self.state
        flags = self.flags
        hy = self.hybrid
        D, K_Q = self.D_base, self.K_Q_base
        if flags.hybrid_pid:
            st.hybrid = hybrid_transition(st.hybrid, A, dA_dt, t, hy, self.tau_A)
            K_s, D, K_Q = hybrid_outputs(st.hybrid.q, A, hy, self.cant, self.pid.A_f, self.omega_d)
            e = dynamic_pid_error(A, self.pid.A_r, hy.A_t_plus, K_s)
        elif flags.dynamic_pid:
            e = dynamic_pid_error(A, self.pid.A_r, hy.A_t_plus, hy.K_s)
        else:
            e = self.pid.A_r - A
        prev = st.b_pid
        de_dt = (e - st.e_prev) / dt if self.pid.K_D else 0.0
        st.e_prev = e
        st.integral, st.b_pid = pid_update(st.integral, e, de_dt, self.pid, dt)
        db_dt = (st.b_pid - prev) / dt
        if self.scanning and flags.speed_regulator:
            st.v_x = speed_update(st.v_x, db_dt, self.speed, dt)
        st.feedforward = self.feedforward_at(i_x) if flags.predictive else 0.0
        return ControlOutput(st.b_pid + st.feedforward, D, K_Q, st.v_x if self.scanning else 0.0)

    @property
    def q(self) -> int:
        return int(self.state.hybrid.q)
