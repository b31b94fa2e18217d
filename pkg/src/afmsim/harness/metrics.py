"""Scan-quality metrics and artefact-episode detection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..control import HybridConfig, Mode

EPISODE_TYPES = ("probe_loss", "recovery", "recoil")
RECOVERY_WINDOW = 10.0  # in units of tau_A


class EmptyTrace(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    kind: str
    t_start: float
    t_end: float


def _stats(x: np.ndarray) -> tuple[float, float, float]:
    """RMS, population SD and the signed value of largest magnitude."""
    if x.size == 0:
        return 0.0, 0.0, 0.0
    rms = float(np.sqrt(np.mean(x * x)))
    sd = float(np.std(x))
    mx = float(x[int(np.argmax(np.abs(x)))])
    return rms, sd, mx


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges [i, j] of consecutive True entries."""
    if mask.size == 0:
        return []
    d = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def detect_artefact_episodes(trace, cfg: HybridConfig, tau_A: float, use_modes: bool = False) -> list[Episode]:
    """Probe-loss, recovery and recoil intervals in a line trace.

    With ``use_modes`` the hybrid automaton's mode column defines the
    episodes. Otherwise they come from amplitude thresholds: probe loss while
    ``A >= A_t_plus``, recoil while ``A <= A_t_RL`` and recovery for a fixed
    window after each probe loss ends.
    """
    t = np.asarray(trace["t"])
    out: list[Episode] = []
    if use_modes:
        q = np.asarray(trace["q"])
        for kind, mode in (("probe_loss", Mode.PROBE_LOSS), ("recovery", Mode.RECOVERY), ("recoil", Mode.RECOIL)):
            for i, j in _runs(q == int(mode)):
                out.append(Episode(kind, float(t[i]), float(t[j])))
    else:
        A = np.asarray(trace["A"])
        for i, j in _runs(A >= cfg.A_t_plus):
            out.append(Episode("probe_loss", float(t[i]), float(t[j])))
            out.append(Episode("recovery", float(t[j]), float(t[j] + RECOVERY_WINDOW * tau_A)))
        for i, j in _runs(A <= cfg.A_t_RL):
            out.append(Episode("recoil", float(t[i]), float(t[j])))
    out.sort(key=lambda e: (e.t_start, EPISODE_TYPES.index(e.kind)))
    return out


def _probe_loss_groups(t: np.ndarray, A: np.ndarray, A_t_plus: float, window: float) -> list[list[tuple[int, int]]]:
    """Threshold probe-loss runs, merging a run into the previous group when it
    starts inside that group's recovery window."""
    groups: list[list[tuple[int, int]]] = []
    for i, j in _runs(A >= A_t_plus):
        if groups and t[i] <= t[groups[-1][-1][1]] + window:
            groups[-1].append((i, j))
        else:
            groups.append([(i, j)])
    return groups


def recovery_bumps(trace, A_t_plus: float, tau_A: float) -> list[float]:
    """Largest ``sigma_hat - sigma`` during the recovery after each probe loss.

    The recovery is the window of ``10 tau_A`` after a probe loss ends,
    excluding samples that are themselves above the probe-loss threshold.
    Probe loss is detected by threshold for every controller, so the bumps
    of different controllers are measured the same way.
    """
    t = np.asarray(trace["t"])
    A = np.asarray(trace["A"])
    e = np.asarray(trace["sigma_hat"]) - np.asarray(trace["sigma"])
    window = RECOVERY_WINDOW * tau_A
    lost = A >= A_t_plus
    bumps = []
    for group in _probe_loss_groups(t, A, A_t_plus, window):
        w = np.zeros(t.shape, dtype=bool)
        for _, j in group:
            w |= (t > t[j]) & (t <= t[j] + window)
        w &= ~lost
        if np.any(w):
            bumps.append(float(np.max(e[w])))
    return bumps


@dataclass
class Metrics:
    """Per-line scan quality. Lengths in m, speeds in m/s, times in s."""

    line: int
    n_samples: int
    rms_e_sigma: float
    sd_e_sigma: float
    max_e_sigma: float
    n_impacts: int
    rms_v_i: float
    sd_v_i: float
    max_v_i: float
    recovery_bumps: list
    rms_recovery_bump: float
    sd_recovery_bump: float
    max_recovery_bump: float
    T_s: float
    K_sigma: list
    K_sigma_sum: float
    K_sigma_mean: float


@dataclass
class AggregateMetrics:
    n_lines: int
    T_s_tot: float
    mean_rms_e_sigma: float
    max_rms_e_sigma: float
    mean_sd_e_sigma: float
    max_sd_e_sigma: float
    mean_K_sigma_sum: float
    rms_e_sigma: float
    rms_v_i: float
    rms_recovery_bump: float
    lines: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def line_metrics(trace, A_t_plus: float, tau_A: float, truth=None) -> Metrics:
    """Metrics for one scanned line.

    ``truth`` optionally gives the surface profile along the line; by
    default the ground truth recorded in the trace is used.
    """
    if len(trace["t"]) == 0:
        raise EmptyTrace("trace has no samples")
    sigma = np.asarray(trace["sigma"]) if truth is None else np.array([truth(x) for x in trace["i_x"]])
    e = np.asarray(trace["sigma_hat"]) - sigma
    vi = np.asarray(trace.impacts)[:, 2] if len(trace.impacts) else np.empty(0)
    bumps = recovery_bumps(trace, A_t_plus, tau_A)
    er, es, em = _stats(e)
    vr, vs, vm = _stats(vi)
    br, bs, bm = _stats(np.asarray(bumps))
    gains = [float(g) for g in trace.gains]
    return Metrics(
        line=trace.index,
        n_samples=int(e.size),
        rms_e_sigma=er,
        sd_e_sigma=es,
        max_e_sigma=em,
        n_impacts=int(vi.size),
        rms_v_i=vr,
        sd_v_i=vs,
        max_v_i=vm,
        recovery_bumps=bumps,
        rms_recovery_bump=br,
        sd_recovery_bump=bs,
        max_recovery_bump=bm,
        T_s=trace.T_s,
        K_sigma=gains,
        K_sigma_sum=float(sum(gains)),
        K_sigma_mean=float(np.mean(gains)) if gains else 0.0,
    )


def aggregate(per_line: list[Metrics], pooled_e, pooled_v, pooled_b) -> AggregateMetrics:
    def mean(v):
        return float(np.mean(v)) if len(v) else 0.0

    def mx(v):
        return float(np.max(v)) if len(v) else 0.0

    rms = [m.rms_e_sigma for m in per_line]
    sd = [m.sd_e_sigma for m in per_line]
    return AggregateMetrics(
        n_lines=len(per_line),
        T_s_tot=math.fsum(m.T_s for m in per_line),
        mean_rms_e_sigma=mean(rms),
        max_rms_e_sigma=mx(rms),
        mean_sd_e_sigma=mean(sd),
        max_sd_e_sigma=mx(sd),
        mean_K_sigma_sum=mean([m.K_sigma_sum for m in per_line]),
        rms_e_sigma=_stats(np.asarray(pooled_e, dtype=float))[0],
        rms_v_i=_stats(np.asarray(pooled_v, dtype=float))[0],
        rms_recovery_bump=_stats(np.asarray(pooled_b, dtype=float))[0],
        lines=[asdict(m) for m in per_line],
    )


def compute_metrics(traces, res=None, *, A_t_plus: float | None = None, tau_A: float | None = None) -> AggregateMetrics:
    """Per-line and pooled metrics for a set of line traces.

    Thresholds come from the resolved config ``res`` unless given explicitly.
    """
    if res is not None:
        A_t_plus = res.hybrid.A_t_plus if A_t_plus is None else A_t_plus
        tau_A = res.tau_A if tau_A is None else tau_A
    if A_t_plus is None or tau_A is None:
        raise ValueError("A_t_plus and tau_A are required")
    per_line = [line_metrics(tr, A_t_plus, tau_A) for tr in traces]
    pooled_e = np.concatenate([tr.e_sigma for tr in traces]) if traces else np.empty(0)
    pooled_v = np.concatenate([np.asarray(tr.impacts)[:, 2] for tr in traces]) if traces else np.empty(0)
    pooled_b = [b for m in per_line for b in m.recovery_bumps]
    return aggregate(per_line, pooled_e, pooled_v, pooled_b)
