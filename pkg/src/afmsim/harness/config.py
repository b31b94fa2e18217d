"""Experiment configuration: a JSON document with one section per parameter group.

Values left as ``null`` are derived from the free amplitude, the scan length
and the PID gains using the standard parameter table.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from ..control import ControllerFlags, HybridConfig, PidConfig, PredictiveConfig, SpeedConfig
from ..demod import NoiseConfig
from ..model import CantileverParams, InteractionParams, ZPiezoParams
from ..sample import (
    GeneratorSurface,
    RasterPlan,
    SampleSurface,
    ideal_calibration_grid,
    load_heightmap,
    quasi_sinusoid,
)
from ..sim import SolverConfig


class ConfigError(ValueError):
    pass


@dataclass
class CantileverSection:
    omega_n: float = 2.85e5 * 2 * math.pi
    Q: float = 100.0
    r: float = 0.9
    k: float = 42.0


@dataclass
class InteractionSection:
    H: float = 1.4e-19
    r_t: float = 2e-9
    l_m: float = 0.42e-9
    E_t: float = 1.65e11
    E_s: float = 1.65e11
    V_t: float = 0.27
    V_s: float = 0.27


@dataclass
class ZPiezoSection:
    omega_zp: float = 1.5e6 * 2 * math.pi
    Q_zp: float = 18.0
    K_zp: float = 1.0


@dataclass
class ControllerSection:
    A_f: float = 50e-9
    A_r: float | None = None
    K_P: float = 0.0
    K_I: float = 10000.0
    K_D: float = 0.0
    integrator_limit: float | None = None
    v_x: float = 1e-3
    omega_d: float | None = None


@dataclass
class FlagsSection:
    plain_pid: bool = False
    q_control: bool = True
    dynamic_pid: bool = True
    hybrid_pid: bool = False
    speed_regulator: bool = False
    predictive: bool = False


@dataclass
class HybridSection:
    K_s: float = 15.0
    A_t_plus: float | None = None
    A_t_minus: float | None = None
    A_t_RL: float | None = None
    alpha_t: float | None = None
    dQ_PL: float = 25.0
    dQ_RL: float = 25.0
    Q_prime: float = 30.0
    K_tau: float = 5.0
    guards_enabled: bool = True
    recoil_mode: bool = True


@dataclass
class SpeedSection:
    tau_v: float = 0.12e-3
    V_x0: float | None = None
    V_xm: float | None = None
    V_xM: float | None = None
    b_Ma: float | None = None
    b_Md: float | None = None
    b_La: float | None = None
    b_Ld: float | None = None
    b_ra: float | None = None
    b_rd: float | None = None


@dataclass
class PredictiveSection:
    M_PC: int = 3
    E_sigma: float | None = None
    N_W: float | None = None
    n_grid: int = 1001


@dataclass
class SolverSection:
    max_step: float = 1e-7
    min_step: float = 1e-13
    rel_tol: float = 1e-4
    abs_tol: float = 1e-12
    abs_tol_vel: float = 1e-6
    penetration_tol: float = 1e-13
    refractory: float = 1e-9
    control_divisions: int = 20


@dataclass
class NoiseSection:
    enabled: bool = False
    std: float | None = None


@dataclass
class SampleSection:
    kind: str = "grid"
    step_height: float = 28e-9
    period: float = 1e-6
    periods: int = 10
    A_sin: float = 80e-9
    P_sin: float = 4e-6
    height: float = 0.0
    I_x: float | None = None
    path: str | None = None


@dataclass
class RasterSection:
    lines: int = 1
    y0: float = 0.0
    dy: float = 4.6e-9
    line_ys: list | None = None


@dataclass
class EngageSection:
    tolerance: float = 0.01
    hold_periods: int = 20
    start_margin: float = 0.05
    max_time: float = 5e-3


@dataclass
class ExperimentConfig:
    cantilever: CantileverSection = field(default_factory=CantileverSection)
    interaction: InteractionSection = field(default_factory=InteractionSection)
    z_piezo: ZPiezoSection = field(default_factory=ZPiezoSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    flags: FlagsSection = field(default_factory=FlagsSection)
    hybrid: HybridSection = field(default_factory=HybridSection)
    speed: SpeedSection = field(default_factory=SpeedSection)
    predictive: PredictiveSection = field(default_factory=PredictiveSection)
    solver: SolverSection = field(default_factory=SolverSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    sample: SampleSection = field(default_factory=SampleSection)
    raster: RasterSection = field(default_factory=RasterSection)
    engage: EngageSection = field(default_factory=EngageSection)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config section {key!r}")
            if key == "seed":
                kwargs[key] = int(value)
                continue
            section_cls = type(getattr(cls(), key))
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            names = {f.name for f in fields(section_cls)}
            bad = set(value) - names
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            kwargs[key] = section_cls(**value)
        cfg = cls(**kwargs)
        cfg.build()  # validate eagerly
        return cfg

    # -- derived model objects

    def build(self) -> "Resolved":
        try:
            return _resolve(self)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a value")
        node[parts[-1]] = value
    return out


@dataclass
class Resolved:
    cant: CantileverParams
    inter: InteractionParams
    zp: ZPiezoParams
    omega_d: float
    flags: ControllerFlags
    pid: PidConfig
    hybrid: HybridConfig
    speed: SpeedConfig | None
    predictive: PredictiveConfig | None
    solver: SolverConfig
    noise: NoiseConfig
    surface: SampleSurface
    raster: RasterPlan
    A_f: float
    v_x: float
    tau_A: float


def _pick(value, default):
    return default if value is None else value


def make_surface(s: SampleSection) -> SampleSurface:
    if s.kind == "grid":
        I_x = _pick(s.I_x, s.periods * s.period)
        return GeneratorSurface(ideal_calibration_grid(s.step_height, s.period), I_x, name="grid",
                                params=dict(step_height=s.step_height, period=s.period))
    if s.kind == "sinusoid":
        I_x = _pick(s.I_x, s.P_sin)
        return GeneratorSurface(quasi_sinusoid(s.A_sin, s.P_sin), I_x, name="sinusoid",
                                params=dict(A_sin=s.A_sin, P_sin=s.P_sin))
    if s.kind == "flat":
        if s.I_x is None:
            raise ConfigError("flat sample needs I_x")
        h = s.height
        return GeneratorSurface(lambda x: h, s.I_x, name="flat", params=dict(height=h))
    if s.kind == "file":
        if not s.path:
            raise ConfigError("file sample needs a path")
        return load_heightmap(s.path)
    raise ConfigError(f"unknown sample kind {s.kind!r}")


def _resolve(cfg: ExperimentConfig) -> Resolved:
    cant = CantileverParams(**asdict(cfg.cantilever))
    inter = InteractionParams(**asdict(cfg.interaction))
    zp = ZPiezoParams(**asdict(cfg.z_piezo))
    ctl = cfg.controller
    A_f = ctl.A_f
    if not A_f > 0:
        raise ConfigError("A_f must be positive")
    A_r = _pick(ctl.A_r, 0.9 * A_f)
    omega_d = _pick(ctl.omega_d, cant.omega_n)
    fl = cfg.flags
    if fl.plain_pid and (fl.dynamic_pid or fl.hybrid_pid):
        raise ConfigError("plain_pid excludes dynamic_pid and hybrid_pid")
    flags = ControllerFlags(
        q_control=fl.q_control,
        dynamic_pid=fl.dynamic_pid,
        hybrid_pid=fl.hybrid_pid,
        speed_regulator=fl.speed_regulator,
        predictive=fl.predictive,
    )
    pid = PidConfig(A_f=A_f, A_r=A_r, K_P=ctl.K_P, K_I=ctl.K_I, K_D=ctl.K_D, integrator_limit=ctl.integrator_limit)
    h = cfg.hybrid
    hybrid = HybridConfig(
        A_r=A_r,
        K_s=h.K_s,
        A_t_plus=_pick(h.A_t_plus, 0.95 * A_f),
        A_t_minus=_pick(h.A_t_minus, 0.94 * A_f),
        A_t_RL=_pick(h.A_t_RL, 0.5 * A_r),
        alpha_t=_pick(h.alpha_t, -400.0 * A_f),
        dQ_PL=h.dQ_PL,
        dQ_RL=h.dQ_RL,
        Q_prime=h.Q_prime,
        K_tau=h.K_tau,
        guards_enabled=h.guards_enabled,
        recoil_mode=h.recoil_mode,
    )
    surface = make_surface(cfg.sample)
    r = cfg.raster
    if r.line_ys is not None:
        ys = tuple(float(y) for y in r.line_ys)
    else:
        ys = tuple(r.y0 + k * r.dy for k in range(r.lines))
    raster = RasterPlan(ys, surface.I_x)
    if flags.predictive and len(raster) < 2:
        raise ConfigError("predictive controller needs at least two scan lines")

    sp = cfg.speed
    speed = None
    if flags.speed_regulator:
        V0 = _pick(sp.V_x0, ctl.v_x)
        overrides = {k: v for k, v in asdict(sp).items() if v is not None and k not in ("V_x0",)}
        speed = SpeedConfig.table_defaults(V0, ctl.K_I, A_r, hybrid.A_t_RL, hybrid.A_t_plus, **overrides)
    pr = cfg.predictive
    predictive = None
    if flags.predictive:
        predictive = PredictiveConfig(
            M_PC=pr.M_PC,
            E_sigma=_pick(pr.E_sigma, 0.1 * A_f * surface.I_x),
            N_W=_pick(pr.N_W, 0.01 * surface.I_x),
            n_grid=pr.n_grid,
        )
    solver = SolverConfig(**asdict(cfg.solver))
    nz = cfg.noise
    noise = NoiseConfig(enabled=nz.enabled, std=_pick(nz.std, 0.01 * A_f), seed=cfg.seed)
    Q_eff = hybrid.Q_prime if flags.q_control else cant.Q
    return Resolved(
        cant=cant,
        inter=inter,
        zp=zp,
        omega_d=omega_d,
        flags=flags,
        pid=pid,
        hybrid=hybrid,
        speed=speed,
        predictive=predictive,
        solver=solver,
        noise=noise,
        surface=surface,
        raster=raster,
        A_f=A_f,
        v_x=ctl.v_x,
        tau_A=2.0 * Q_eff / cant.omega_n,
    )
