"""Command-line entry point ``afm-sim``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 simulation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    IoError,
    apply_overrides,
    compute_metrics,
    line_range,
    read_traces,
    run_experiment,
    write_outputs,
)
from .harness.config import SampleSection, make_surface
from .sample import SampleError, sample_to_grid, write_heightmap
from .sim import SimError

log = logging.getLogger("afmsim")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SIM = 0, 1, 2, 3


def _cmd_run(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text()) if args.config else {}
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    data = apply_overrides(data, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(data)
    n_lines = len(cfg.build().raster)
    lines = None
    if args.lines:
        try:
            lines = line_range(args.lines, n_lines)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    result = run_experiment(cfg, lines)
    write_outputs(result.lines, result.metrics, args.out, config=cfg.to_dict())
    m = result.metrics
    print(f"lines={m.n_lines} T_s_tot={m.T_s_tot:.6g} s rms_e_sigma={m.rms_e_sigma:.6g} m rms_v_i={m.rms_v_i:.6g} m/s")
    return EXIT_OK


def _cmd_sample_gen(args) -> int:
    sec = SampleSection(kind=args.kind)
    for name in ("step_height", "period", "periods", "A_sin", "P_sin", "I_x"):
        v = getattr(args, name)
        if v is not None:
            setattr(sec, name, v)
    surface = make_surface(sec)
    ys = [k * args.dy for k in range(args.ny)]
    if args.ny < 2:
        ys = [0.0, args.dy]  # a height map needs a row spacing
    grid = sample_to_grid(surface, args.nx, ys)
    write_heightmap(grid, args.out)
    print(f"wrote {args.out}: {len(ys)} x {args.nx}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    d = Path(args.trace_dir)
    cfg_path = d / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"{cfg_path} not found")
    cfg = ExperimentConfig.from_dict(json.loads(cfg_path.read_text()))
    traces = read_traces(d)
    m = compute_metrics(traces, cfg.build())
    print(json.dumps(m.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afm-sim", description="Tapping-mode AFM scan simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scan experiment")
    r.add_argument("--config", help="JSON config file (defaults used when omitted)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--lines", help="line range a..b (inclusive)")
    r.add_argument("--seed", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. flags.hybrid_pid=true")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sample", help="sample utilities")
    ssub = s.add_subparsers(dest="sample_cmd", required=True)
    g = ssub.add_parser("gen", help="write a generated surface as a height map")
    g.add_argument("kind", choices=["grid", "sinusoid"])
    g.add_argument("--out", required=True)
    g.add_argument("--nx", type=int, default=2001)
    g.add_argument("--ny", type=int, default=2)
    g.add_argument("--dy", type=float, default=4.6e-9)
    g.add_argument("--step-height", dest="step_height", type=float)
    g.add_argument("--period", type=float)
    g.add_argument("--periods", type=int)
    g.add_argument("--A-sin", dest="A_sin", type=float)
    g.add_argument("--P-sin", dest="P_sin", type=float)
    g.add_argument("--I-x", dest="I_x", type=float)
    g.set_defaults(func=_cmd_sample_gen)

    m = sub.add_parser("metrics", help="recompute metrics from a trace directory")
    m.add_argument("trace_dir")
    m.set_defaults(func=_cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SampleError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except SimError as exc:
        log.error("simulation error: %s", exc)
        return EXIT_SIM
    except IoError as exc:
        log.error("%s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
