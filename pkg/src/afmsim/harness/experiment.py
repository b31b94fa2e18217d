"""Run a full raster experiment: engage, scan each line, collect traces."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..control import ControllerStack, PredictiveHistory
from ..demod import NoiseSource
from ..model import steady_free_state
from ..sim import LineSimulator, SimError
from .config import ExperimentConfig, Resolved

TRACE_COLUMNS = ("t", "i_x", "sigma", "sigma_hat", "b", "b_cmd", "A", "v_x", "q")


class EngageFailed(SimError):
    pass


@dataclass
class LineTrace:
    index: int
    i_y: float
    columns: dict
    impacts: np.ndarray  # rows of (t, i_x, v_i)
    t_scan_start: float
    t_scan_end: float
    gains: list = field(default_factory=list)
    n_steps: int = 0
    n_rejected: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def T_s(self) -> float:
        return self.t_scan_end - self.t_scan_start

    @property
    def e_sigma(self) -> np.ndarray:
        return self.columns["sigma_hat"] - self.columns["sigma"]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    lines: list
    metrics: object = None


def _line_noise(res: Resolved, k: int) -> NoiseSource | None:
    n = res.noise
    if not n.enabled:
        return None
    seed = int(np.random.SeedSequence(entropy=n.seed, spawn_key=(k,)).generate_state(1)[0])
    return NoiseSource(replace(n, seed=seed))


def run_line(cfg: ExperimentConfig, res: Resolved, k: int, feedforward=None, gains=None) -> LineTrace:
    """Engage from free oscillation at the start of line ``k``, then scan it."""
    i_y = res.raster.line_ys[k]
    sigma_of = res.surface.line(i_y)
    ctl = ControllerStack(
        res.flags, res.cant, res.omega_d, res.pid, res.hybrid,
        speed=res.speed, v_x_fixed=res.v_x, feedforward=feedforward,
    )
    sim = LineSimulator(res.cant, res.inter, res.zp, res.omega_d, ctl, sigma_of, res.solver, res.A_f,
                        noise=_line_noise(res, k))
    eg = cfg.engage
    b0 = sigma_of(0.0) + (1.0 + eg.start_margin) * res.A_f
    sim.set_state(steady_free_state(res.A_f, res.omega_d, res.cant, ctl.Q_eff, 0.0), b0)
    sim.apply_output(ctl.reset(b0))

    A_r = res.pid.A_r
    need = 2 * eg.hold_periods
    # noise on x1 jitters the peak-hold reading, so widen the band by 3 sigma
    band = eg.tolerance * A_r + (3.0 * res.noise.std if res.noise.enabled else 0.0)
    state = {"n": 0, "seen": 0}

    def engaged(s: LineSimulator) -> bool:
        d = s.demod
        if d.n_updates != state["seen"]:
            state["seen"] = d.n_updates
            state["n"] = state["n"] + 1 if abs(d.current_A - A_r) <= band else 0
        return state["n"] >= need

    try:
        sim.run_segment(engaged, max_time=eg.max_time)
    except SimError as exc:
        if "did not finish" in str(exc):
            raise EngageFailed(f"line {k}: amplitude did not settle within {eg.max_time} s") from None
        raise type(exc)(f"line {k} (engaging), t={sim.t:.9g} s: {exc}") from exc

    I_x = res.surface.I_x
    ctl.start_scan()
    sim.i_x_end = I_x
    sim.recording = True
    t_start = sim.t
    sim.record()
    try:
        sim.run_segment(lambda s: s.i_x >= I_x)
    except SimError as exc:
        raise type(exc)(f"line {k}, t={sim.t:.9g} s, i_x={sim.i_x:.6g} m: {exc}") from exc
    sim.record()
    t_end = sim.t

    tr = sim.trace
    cols = {name: np.asarray(getattr(tr, name), dtype=float) for name in TRACE_COLUMNS}
    imp = np.array([(ev.t, ev.i_x, ev.v_i) for ev in tr.impacts if ev.t >= t_start], dtype=float).reshape(-1, 3)
    return LineTrace(k, i_y, cols, imp, t_start, t_end, list(gains or []), sim.n_steps, sim.n_rejected)


def _worker(args):
    data, k = args
    cfg = ExperimentConfig.from_dict(data)
    return run_line(cfg, cfg.build(), k)


def worker_count() -> int:
    raw = os.environ.get("AFM_SIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, lines: range | None = None) -> ExperimentResult:
    """Scan the requested lines (all by default) and compute metrics.

    With the predictive controller each line depends on the ones before it,
    so lines run in order. Otherwise they are independent and may run in
    ``AFM_SIM_THREADS`` worker processes; results do not depend on the count.
    """
    from .metrics import compute_metrics

    res = cfg.build()
    idx = list(lines) if lines is not None else list(range(len(res.raster)))
    if any(k < 0 or k >= len(res.raster) for k in idx):
        raise ValueError(f"line range outside 0..{len(res.raster) - 1}")
    traces: list[LineTrace] = []
    if not idx:
        pass
    elif res.flags.predictive:
        hist = PredictiveHistory(res.predictive, res.surface.I_x)
        # earlier lines shape the feedforward, so run from line 0
        for k in range(max(idx) + 1):
            gains, prof = hist.feedforward_profile()
            ff = (hist.grid, prof) if hist.ready() else None
            lt = run_line(cfg, res, k, feedforward=ff, gains=gains)
            hist.append(lt["i_x"], lt["sigma_hat"])
            if k in idx:
                traces.append(lt)
    else:
        n = min(worker_count(), len(idx))
        if n > 1:
            data = cfg.to_dict()
            with ProcessPoolExecutor(max_workers=n) as pool:
                traces = list(pool.map(_worker, [(data, k) for k in idx]))
        else:
            traces = [run_line(cfg, res, k) for k in idx]
    result = ExperimentResult(cfg, traces)
    result.metrics = compute_metrics(traces, res)
    return result


def line_range(spec: str, n_lines: int) -> range:
    """Parse ``a..b`` (inclusive) or a single index."""
    if ".." in spec:
        a, b = spec.split("..", 1)
        lo = int(a) if a else 0
        hi = int(b) if b else n_lines - 1
    else:
        lo = hi = int(spec)
    if lo < 0 or hi >= n_lines or lo > hi:
        raise ValueError(f"line range {spec!r} outside 0..{n_lines - 1}")
    return range(lo, hi + 1)


__all__ = [
    "EngageFailed",
    "ExperimentResult",
    "LineTrace",
    "TRACE_COLUMNS",
    "line_range",
    "run_experiment",
    "run_line",
    "worker_count",
]
