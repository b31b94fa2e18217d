"""Event-locating Dormand-Prince integration of the cantilever, z-piezo and scan stage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .demod import Demodulator, NoiseSource
from .model import CantileverParams, InteractionParams, TipState, ZPiezoParams


class SimError(RuntimeError):
    pass


class StepUnderflow(SimError):
    pass


class RootNotConverged(SimError):
    pass


class SimDiverged(SimError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_step: float = 1e-7
    min_step: float = 1e-13
    rel_tol: float = 1e-4
    abs_tol: float = 1e-12
    abs_tol_vel: float = 1e-6
    penetration_tol: float = 1e-13
    refractory: float = 1e-9
    control_divisions: int = 20

    def __post_init__(self):
        if not 0 < self.min_step < self.max_step:
            raise ValueError("need 0 < min_step < max_step")
        if min(self.rel_tol, self.abs_tol, self.abs_tol_vel, self.penetration_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.refractory < 0 or self.control_divisions < 1:
            raise ValueError("bad refractory window or control cadence")


# Dormand-Prince 5(4) tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = 71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40


def dp_step(f: Callable, t: float, y: Sequence[float], h: float, k1: Sequence[float] | None = None):
    """One Dormand-Prince step.

    Returns ``(y_new, err, k7)``: the fifth-order solution, the difference to
    the embedded fourth-order one, and the derivative at the new point (FSAL).
    """
    n = len(y)
    r = range(n)
    if k1 is None:
        k1 = f(t, y)
    k2 = f(t + C2 * h, [y[i] + h * A21 * k1[i] for i in r])
    k3 = f(t + C3 * h, [y[i] + h * (A31 * k1[i] + A32 * k2[i]) for i in r])
    k4 = f(t + C4 * h, [y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]) for i in r])
    k5 = f(t + C5 * h, [y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]) for i in r])
    k6 = f(t + h, [y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]) for i in r])
    y_new = [y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]) for i in r]
    k7 = f(t + h, y_new)
    err = [h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]) for i in r]
    return y_new, err, k7


def error_norm(err, y0, y1, rel_tol: float, abs_tol: Sequence[float]) -> float:
    """Max over components of ``|err| / max(rel_tol * |y|, abs_tol)``."""
    worst = 0.0
    for e, a, b, at in zip(err, y0, y1, abs_tol):
        sc = max(rel_tol * max(abs(a), abs(b)), at)
        v = abs(e) / sc
        if v > worst:
            worst = v
    return worst


def next_step_size(h: float, err: float) -> float:
    if err == 0.0:
        return 5.0 * h
    return h * min(5.0, max(0.2, 0.9 * err**-0.2))


@dataclass
class StepResult:
    t: float
    y: list
    accepted: bool
    error: float
    h_next: float
    k_last: list | None = None


def step(
    f: Callable,
    t: float,
    y: Sequence[float],
    h: float,
    cfg: SolverConfig,
    abs_tol: Sequence[float] | None = None,
    k1: Sequence[float] | None = None,
) -> StepResult:
    """Attempt one adaptive step of size ``h`` (clamped to the solver limits)."""
    h = min(max(h, cfg.min_step), cfg.max_step)
    atol = abs_tol if abs_tol is not None else [cfg.abs_tol] * len(y)
    y_new, err, k7 = dp_step(f, t, y, h, k1)
    en = error_norm(err, y, y_new, cfg.rel_tol, atol)
    h_next = min(next_step_size(h, en), cfg.max_step)
    if en <= 1.0:
        return StepResult(t + h, y_new, True, en, h_next, k7)
    if h <= cfg.min_step:
        raise StepUnderflow(f"step size below {cfg.min_step} at t={t}")
    return StepResult(t, list(y), False, en, max(h_next, cfg.min_step), None)


def integrate(f: Callable, t0: float, y0: Sequence[float], t1: float, cfg: SolverConfig, abs_tol=None, h0=None):
    """Integrate from ``t0`` to ``t1``; returns lists of accepted times and states."""
    t, y = t0, list(y0)
    h = h0 if h0 is not None else cfg.max_step
    ts, ys = [t], [list(y)]
    k1 = None
    while t < t1:
        h_try = min(h, t1 - t)
        if h_try < cfg.min_step:
            h_try = cfg.min_step
        res = step(f, t, y, h_try, cfg, abs_tol, k1)
        h = res.h_next
        if res.accepted:
            t = t1 if t1 - res.t < 1e-15 * max(1.0, abs(t1)) else res.t
            y, k1 = res.y, res.k_last
            ts.append(t)
            ys.append(list(y))
    return ts, ys


def hermite(t0: float, y0: float, d0: float, t1: float, y1: float, d1: float, t: float) -> float:
    """Cubic Hermite interpolant through two points with given slopes."""
    h = t1 - t0
    s = (t - t0) / h
    s2 = s * s
    s3 = s2 * s
    return (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * d0 + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * d1


def hermite_extremum(t0: float, y0: float, d0: float, t1: float, y1: float, d1: float):
    """Time and value of the interior stationary point of the Hermite cubic, if any."""
    h = t1 - t0
    # p'(s)/h = a s^2 + b s + c
    a = 6 * (y0 - y1) / h + 3 * (d0 + d1)
    b = 6 * (y1 - y0) / h - 4 * d0 - 2 * d1
    c = d0
    roots = []
    if abs(a) < 1e-300:
        if b != 0:
            roots.append(-c / b)
    else:
        disc = b * b - 4 * a * c
        if disc >= 0:
            sq = math.sqrt(disc)
            q = -0.5 * (b + math.copysign(sq, b))
            if q != 0:
                roots.append(q / a)
                roots.append(c / q)
            else:
                roots.append(0.0)
    for s in sorted(roots):
        if 0.0 < s < 1.0:
            t = t0 + s * h
            return t, hermite(t0, y0, d0, t1, y1, d1, t)
    return None


def find_root(g: Callable[[float], float], a: float, b: float, ga: float, gb: float, tol: float, max_iter: int = 100) -> float:
    """Illinois (modified regula falsi) root of ``g`` bracketed by ``[a, b]``."""
    if ga == 0.0:
        return a
    if gb == 0.0:
        return b
    if (ga > 0) == (gb > 0):
        raise RootNotConverged("root not bracketed")
    side = 0
    for _ in range(max_iter):
        c = (a * gb - b * ga) / (gb - ga)
        if not a < c < b:
            c = 0.5 * (a + b)
        gc = g(c)
        if abs(gc) < tol or b - a < 1e-18:
            return c
        if (gc > 0) == (gb > 0):
            b, gb = c, gc
            if side == -1:
                ga *= 0.5
            side = -1
        else:
            a, ga = c, gc
            if side == 1:
                gb *= 0.5
            side = 1
    raise RootNotConverged(f"no convergence in {max_iter} iterations")


def locate_impact(t0, y0, k0, t1, y1, k1, sigma: float, tol: float):
    """Time at which the tip-sample gap first reaches zero inside a step, or ``None``.

    ``y = (x1, x2, b, w)`` and ``k`` the matching derivatives; the gap
    ``b + x1 - sigma`` is evaluated on the cubic Hermite interpolant.
    """
    g0 = y0[2] + y0[0] - sigma
    g1 = y1[2] + y1[0] - sigma
    if not g0 > 0.0:
        return None
    d0 = k0[0] + k0[2]
    d1 = k1[0] + k1[2]
    t_hi, g_hi = t1, g1
    if g1 > 0.0:
        # a grazing dip can enter and leave the surface within one step
        if not (d0 < 0.0 < d1):
            return None
        ext = hermite_extremum(t0, g0, d0, t1, g1, d1)
        if ext is None or ext[1] > 0.0:
            return None
        t_hi, g_hi = ext

    def gap(t):
        return hermite(t0, g0, d0, t1, g1, d1, t)

    return find_root(gap, t0, t_hi, g0, g_hi, tol)


# ---------------------------------------------------------------- line simulation


@dataclass
class ImpactEvent:
    t: float
    i_x: float
    v_i: float


@dataclass
class TraceRecorder:
    """Columns of a line trace, one entry per recorded drive period."""

    t: list = field(default_factory=list)
    i_x: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    sigma_hat: list = field(default_factory=list)
    b: list = field(default_factory=list)
    b_cmd: list = field(default_factory=list)
    A: list = field(default_factory=list)
    v_x: list = field(default_factory=list)
    q: list = field(default_factory=list)
    impacts: list = field(default_factory=list)


class LineSimulator:
    """Hybrid simulation of one scan line.

    Continuous state ``(x1, x2, b, w)`` plus the lateral position ``i_x``.
    The controller, the surface height under the tip and the scan speed are
    sampled and held over each control period. With ``contact=False`` the
    tip-sample force and the impact reset are switched off.
    """

    def __init__(
        self,
        cant: CantileverParams,
        inter: InteractionParams,
        zp: ZPiezoParams,
        omega_d: float,
        controller,
        sigma_of: Callable[[float], float],
        cfg: SolverConfig,
        A_f: float,
        noise: NoiseSource | None = None,
        t0: float = 0.0,
        contact: bool = True,
    ):
        self.cant = cant
        self.inter = inter
        self.zp = zp
        self.omega_d = omega_d
        self.controller = controller
        self.sigma_of = sigma_of
        self.cfg = cfg
        self.A_f = A_f
        self.noise = noise
        self.contact = contact
        self.t = t0
        self.i_x = 0.0
        self.x1 = self.x2 = self.b = self.w = 0.0
        self.sigma = 0.0
        self.b_cmd = 0.0
        self.D = 0.0
        self.K_Q = 0.0
        self.v_x = 0.0
        self.T_ctrl = 2 * math.pi / omega_d / cfg.control_divisions
        self.n_ctrl = math.floor(t0 / self.T_ctrl)
        self.t_ctrl_next = t0
        self.refractory_end = -math.inf
        self.h = cfg.max_step
        self.demod = Demodulator(omega_d, A0=A_f, t0=t0)
        self.trace = TraceRecorder()
        self.recording = False
        self.record_every = 2
        self.i_x_end = math.inf
        self.n_steps = 0
        self.n_rejected = 0
        self.n_impacts = 0
        self._k1 = None
        self._atol = (cfg.abs_tol, cfg.abs_tol_vel, cfg.abs_tol, cfg.abs_tol_vel)
        self._build_rhs()

    # -- state setup

    def set_state(self, tip: TipState, b: float, w: float = 0.0, i_x: float = 0.0) -> None:
        self.x1, self.x2 = tip.x1, tip.x2
        self.b, self.w = b, w
        self.i_x = i_x
        self.sigma = self.sigma_of(i_x)
        self._k1 = None

    def apply_output(self, out) -> None:
        self.b_cmd, self.D, self.K_Q, self.v_x = out.b_cmd, out.D, out.K_Q, out.v_x
        self._build_rhs()

    @property
    def gap(self) -> float:
        return self.b + self.x1 - self.sigma

    @property
    def y(self) -> tuple:
        return (self.x1, self.x2, self.b, self.w)

    # -- dynamics

    def _build_rhs(self) -> None:
        c, p, zp = self.cant, self.inter, self.zp
        m = c.m
        wn2 = c.omega_n**2
        damp = c.omega_n / c.Q + self.K_Q
        D = self.D
        wd = self.omega_d
        lm = p.l_m
        attract = p.H * p.r_t / 6.0 / m
        attract_lm = attract / (lm * lm)
        rep = 4.0 / 3.0 * p.reduced_modulus / m
        rt = p.r_t
        sig = self.sigma
        wz2 = zp.omega_zp**2
        wzq = zp.omega_zp / zp.Q_zp
        target = zp.K_zp * self.b_cmd
        sin = math.sin
        sqrt = math.sqrt

        def rhs(t, y):
            x1, x2, b, w = y
            l = b + x1 - sig
            if l > lm:
                F = -attract / (l * l)
            else:
                d = lm - l
                F = -attract_lm + rep * sqrt(rt * d * d * d)
            return (x2, -wn2 * x1 - damp * x2 + D * sin(wd * t) + F, w, wz2 * (target - b) - wzq * w)

        def free_rhs(t, y):
            x1, x2, b, w = y
            return (x2, -wn2 * x1 - damp * x2 + D * sin(wd * t), w, wz2 * (target - b) - wzq * w)

        self.rhs = rhs if self.contact else free_rhs
        self._k1 = None

    # -- main loop

    def _control_update(self) -> None:
        self.sigma = self.sigma_of(min(self.i_x, self.i_x_end))
        out = self.controller.update(self.t, self.demod.current_A, self.demod.dA_dt, self.i_x, self.T_ctrl)
        self.apply_output(out)
        self.n_ctrl += 1
        self.t_ctrl_next = (self.n_ctrl + 1) * self.T_ctrl

    def _impact(self, t: float, y, i_x: float) -> None:
        x1, x2, b, w = y
        x1 = self.sigma - b
        self.trace.impacts.append(ImpactEvent(t, i_x, x2))
        self.n_impacts += 1
        self.t, self.i_x = t, i_x
        self.x1, self.x2, self.b, self.w = x1, -self.cant.r * x2, b, w
        self.refractory_end = t + self.cfg.refractory
        self._ingest(t, x1)
        self._k1 = None

    def _ingest(self, t: float, x1: float) -> None:
        if self.noise is not None:
            x1 = self.noise(x1)
        if self.demod.ingest(t, x1) and self.recording and self.demod.n_updates % self.record_every == 0:
            self.record()

    def record(self) -> None:
        tr = self.trace
        A = self.demod.current_A
        tr.t.append(self.t)
        tr.i_x.append(self.i_x)
        tr.sigma.append(self.sigma_of(min(self.i_x, self.i_x_end)))
        tr.sigma_hat.append(self.b - A)
        tr.b.append(self.b)
        tr.b_cmd.append(self.b_cmd)
        tr.A.append(A)
        tr.v_x.append(self.v_x)
        tr.q.append(self.controller.q)

    def _pre_step_contact(self) -> None:
        if not self.contact:
            return
        g = self.b + self.x1 - self.sigma
        if g >= 0.0:
            return
        # penetrated: the surface rose under the tip or the tip sank in during the refractory window
        self.x1 = self.sigma - self.b
        self._k1 = None
        if self.x2 < 0.0 and self.t >= self.refractory_end:
            self._impact(self.t, self.y, self.i_x)

    def run_segment(self, until: Callable[["LineSimulator"], bool], max_time: float = math.inf) -> None:
        cfg = self.cfg
        A_lim = 100.0 * self.A_f
        atol = self._atol
        rel_tol = cfg.rel_tol
        while not until(self):
            if self.t >= max_time:
                raise SimError(f"segment did not finish before t={max_time}")
            if self.t >= self.t_ctrl_next - 1e-18:
                self._control_update()
            self._pre_step_contact()
            t0 = self.t
            h_lim = self.t_ctrl_next - t0
            clipped = False
            h = self.h
            if h >= h_lim:
                h, clipped = h_lim, True
            v = self.v_x
            if v > 0.0 and self.i_x + v * h > self.i_x_end:
                h = max((self.i_x_end - self.i_x) / v, cfg.min_step)
                clipped = False
            if h < cfg.min_step:
                h = cfg.min_step
            y0 = (self.x1, self.x2, self.b, self.w)
            k0 = self._k1 if self._k1 is not None else self.rhs(t0, y0)
            y1, err, k7 = dp_step(self.rhs, t0, y0, h, k0)
            en = error_norm(err, y0, y1, rel_tol, atol)
            if en > 1.0:
                self.n_rejected += 1
                if h <= cfg.min_step:
                    raise StepUnderflow(f"step below {cfg.min_step} s at t={t0}")
                self.h = max(next_step_size(h, en), cfg.min_step)
                self._k1 = k0
                continue
            self.n_steps += 1
            self.h = min(next_step_size(h, en), cfg.max_step)
            t1 = self.t_ctrl_next if clipped else t0 + h
            i_x1 = self.i_x + v * h
            # impact inside the step
            if self.contact and t0 >= self.refractory_end:
                ts = locate_impact(t0, y0, k0, t1, y1, k7, self.sigma, cfg.penetration_tol)
                if ts is not None:
                    hs = ts - t0
                    if hs > 0.0:
                        ys, _, _ = dp_step(self.rhs, t0, y0, hs, k0)
                    else:
                        ys = y0
                    self._impact(ts, ys, self.i_x + v * hs)
                    continue
            # tip turning point inside the step feeds the peak detector
            if (y0[1] > 0.0) != (y1[1] > 0.0):
                ext = hermite_extremum(t0, y0[0], k0[0], t1, y1[0], k7[0])
                if ext is not None:
                    self._ingest(ext[0], ext[1])
            self.t, self.i_x = t1, i_x1
            self.x1, self.x2, self.b, self.w = y1
            self._k1 = k7 if not clipped else None
            if abs(y1[0]) > A_lim or not math.isfinite(y1[0]):
                raise SimDiverged(f"|x1|={abs(y1[0]):.3g} m exceeds 100 A_f at t={t1}")
            self._ingest(t1, y1[0])
