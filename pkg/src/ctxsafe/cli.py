"""Command line: ``ctxsafe {simulate,certify,report,scenarios}``.

Option values resolve as: command line, then ``CORE_SIM_<OPTION>`` environment
variables, then the ``--config`` file (YAML or JSON, flat or sectioned by
command), then built-in defaults. Exit status reports tool health only: an
unsafe episode or an infeasible certificate is still exit 0.
"""

from __future__ import annotations

import argparse
import difflib
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import certificate as cert
from .grounding import write_sdf_csv
from .sensor import DetectionModel
from .sim import MODES, EpisodeConfig, RunMetrics, format_table, run_episode, run_suite, summarize
from .world import ScenarioError, builtin_names, builtin_scenarios, get_builtin, load_scenario, scenario_to_dict

ENV_PREFIX = "CORE_SIM_"


class UsageError(Exception):
    pass


# name -> (default, type, help); help strings carry units
SIM_OPTIONS = {
    "scenario": (None, str, "built-in scenario name"),
    "scenario_file": (None, str, "path to a scenario YAML file (overrides --scenario)"),
    "mode": ("core", str, f"constraint source, one of {', '.join(MODES)}"),
    "modes": (",".join(MODES), str, "comma-separated modes for --suite"),
    "seed": (0, int, "episode seed (integer)"),
    "base_seed": (0, int, "suite base seed (integer); episode seeds derive from it"),
    "repeats": (5, int, "episodes per scenario and mode in a suite (count)"),
    "jobs": (1, int, "worker processes for a suite (count)"),
    "out": ("ctxsafe_out", str, "output directory"),
    "p0": (0.75, float, "detection probability at zero range (probability)"),
    "epsilon": (1e-3, float, "detection decay over the sensing radius (probability)"),
    "sensing_radius": (7.0, float, "detection model sensing radius D (m)"),
    "min_range": (3.0, float, "near edge of the depth band kept by grounding (m)"),
    "max_range": (7.0, float, "far edge of the depth band kept by grounding (m)"),
    "frame_period": (3.0, float, "time between captures (s)"),
    "latency": (3.0, float, "perception latency from capture to delivery (s)"),
    "horizon": (None, float, "episode length (s); default scales with the path length"),
    "dt": (0.1, float, "control period (s)"),
    "resolution": (0.2, float, "grid cell size (m)"),
    "tau": (0.5, float, "safety probability threshold (probability)"),
    "treat_unknown": ("safe", str, "unobserved cells are 'safe' or 'unsafe'"),
    "slope": (0.25, float, "class-K slope alpha (1/s)"),
    "clearance": (0.2, float, "barrier margin kept by the filter (m)"),
    "v_max": (0.35, float, "planar speed bound (m/s)"),
    "omega_max": (1.0, float, "yaw-rate bound (rad/s)"),
    "kernel": (50, int, "AROUND dilation kernel side (px)"),
}

CERT_OPTIONS = {
    "D": (4.0, float, "sensing radius D (m)"),
    "R": (None, float, "safe initial radius R (m); default D"),
    "speed": (0.35, float, "traversal speed (m/s)"),
    "latency": (3.0, float, "perception latency per measurement (s)"),
    "p0": (0.75, float, "detection probability at zero range (probability)"),
    "epsilon": (None, float, "detection decay over D (probability); default 1e-3, or 0 when p0 = 1"),
    "delta": (None, float, "total risk delta (probability); default 0.1, or gamma for a perfect detector"),
    "gamma": (0.0, float, "context-failure risk gamma (probability)"),
    "c": (1.0, float, "inverse-distance scale c (m)"),
    "ell": (0.1, float, "inverse-distance regularizer l (m)"),
    "prior": ("uniform", str, "initial-distance prior: uniform or point_mass"),
    "k_max": (cert.K_MAX, int, "largest measurement count scanned (count)"),
    "validate": (0, int, "Monte Carlo beeline trials, 0 to skip (count)"),
    "seed": (0, int, "Monte Carlo seed (integer)"),
    "out": (None, str, "also write the report to this file"),
}

REPORT_OPTIONS = {
    "input": ("ctxsafe_out", str, "directory holding episode outputs"),
    "out": (None, str, "directory for the aggregate table and plot CSVs; default the input directory"),
}


def _add_options(p: argparse.ArgumentParser, options: dict) -> None:
    for name, (default, typ, text) in options.items():
        flag = "--" + name.replace("_", "-")
        shown = "none" if default is None else default
        p.add_argument(flag, dest=name, type=typ, default=None, help=f"{text} [default: {shown}]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxsafe", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None, help="YAML or JSON file with option defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one episode or a suite")
    p.add_argument("--suite", action="store_true", help="run every built-in scenario for each of --modes")
    p.add_argument("--no-filter", action="store_true", help="disable the safety filter (fault injection)")
    _add_options(p, SIM_OPTIONS)

    p = sub.add_parser("certify", help="compute the perception safety certificate")
    p.add_argument("--no-search", action="store_true", help="skip the (c, l) grid search")
    _add_options(p, CERT_OPTIONS)

    p = sub.add_parser("report", help="aggregate episode outputs into the suite table and plot CSVs")
    _add_options(p, REPORT_OPTIONS)

    p = sub.add_parser("scenarios", help="list the built-in scenarios")
    p.add_argument("--show", default=None, help="print one scenario as YAML")
    return parser


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a mapping")
    return doc


def resolve(args: argparse.Namespace, options: dict, config: dict, command: str) -> dict:
    """Fill unset options from the environment, then the config file, then defaults."""
    section = config.get(command, {}) if isinstance(config.get(command), dict) else {}
    out = {}
    for name, (default, typ, _) in options.items():
        value = getattr(args, name, None)
        if value is None:
            env = os.environ.get(ENV_PREFIX + name.upper())
            if env is not None:
                try:
                    value = typ(env)
                except ValueError as exc:
                    raise UsageError(f"bad value for {ENV_PREFIX}{name.upper()}: {env!r}") from exc
        if value is None:
            raw = section.get(name, config.get(name))
            if raw is not None:
                value = typ(raw)
        out[name] = default if value is None else value
    return out


# ---------------------------------------------------------------------------
# simulate


def _scenario_name(opts: dict) -> tuple[str, object]:
    if opts["scenario_file"]:
        sc = load_scenario(opts["scenario_file"])
        return sc.name, sc
    name = opts["scenario"]
    if name is None:
        raise UsageError("give --scenario NAME, --scenario-file PATH or --suite")
    try:
        return name, get_builtin(name)
    except KeyError:
        close = difflib.get_close_matches(name, builtin_names(), n=3)
        hint = f"; did you mean {', '.join(close)}?" if close else f"; known: {', '.join(builtin_names())}"
        raise UsageError(f"unknown scenario {name!r}{hint}") from None


def _episode_template(opts: dict, name: str, no_filter: bool) -> EpisodeConfig:
    from .safety_filter import InputBounds

    if opts["mode"] not in MODES:
        raise UsageError(f"unknown mode {opts['mode']!r}; expected one of {', '.join(MODES)}")
    try:
        det = DetectionModel(opts["p0"], opts["epsilon"], opts["sensing_radius"], opts["min_range"], opts["max_range"])
        return EpisodeConfig(
            scenario=name,
            mode=opts["mode"],
            seed=opts["seed"],
            frame_period=opts["frame_period"],
            latency=opts["latency"],
            detection=det,
            resolution=opts["resolution"],
            tau=opts["tau"],
            treat_unknown=opts["treat_unknown"],
            kernel=opts["kernel"],
            slope=opts["slope"],
            clearance=opts["clearance"],
            dt=opts["dt"],
            bounds=InputBounds(opts["v_max"], opts["omega_max"]),
            horizon=opts["horizon"],
            filter_enabled=not no_filter,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_simulate(args, config) -> int:
    opts = resolve(args, SIM_OPTIONS, config, "simulate")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    if args.suite:
        modes = [m.strip() for m in opts["modes"].split(",") if m.strip()]
        bad = [m for m in modes if m not in MODES]
        if bad:
            raise UsageError(f"unknown modes {bad}; expected {', '.join(MODES)}")
        if opts["repeats"] < 1 or opts["jobs"] < 1:
            raise UsageError("--repeats and --jobs must be >= 1")
        template = _episode_template({**opts, "mode": modes[0]}, builtin_names()[0], args.no_filter)
        result = run_suite(None, modes, opts["repeats"], opts["base_seed"], template, opts["jobs"], out)
        table = result.table()
        (out / "table.txt").write_text(table)
        (out / "summary.json").write_text(result.to_json() + "\n")
        sys.stdout.write(table)
        return 0

    name, sc = _scenario_name(opts)
    cfg = _episode_template(opts, name, args.no_filter)
    log, metrics = run_episode(cfg, sc)  # type: ignore[arg-type]
    stem = out / f"{cfg.mode}__{name}__{cfg.seed}"
    log.write_csv(f"{stem}.csv")
    Path(f"{stem}.json").write_text(json.dumps(metrics.to_dict(), sort_keys=True, indent=1))
    if log.barrier is not None:
        log.barrier.grid.write(f"{stem}.grid.txt", cfg.tau)
        write_sdf_csv(log.barrier, f"{stem}.sdf.csv")
    sys.stdout.write(format_table([summarize([metrics], cfg.mode)]))
    status = "violation" if metrics.violation else ("goal reached" if metrics.goal_reached else "stopped short of goal")
    sys.stdout.write(
        f"{name} [{metrics.task_label} task, {cfg.mode}]: {status}; success {metrics.success}; "
        f"attribution {metrics.failure_attribution}; min h {metrics.min_h:.3f} m\n"
    )
    return 0


# ---------------------------------------------------------------------------
# certify


def cmd_certify(args, config) -> int:
    opts = resolve(args, CERT_OPTIONS, config, "certify")
    eps = opts["epsilon"]
    if eps is None:
        eps = 0.0 if opts["p0"] == 1.0 else 1e-3
    try:
        model = DetectionModel(opts["p0"], eps, opts["D"])
        delta = opts["delta"]
        if delta is None:
            delta = max(0.1, opts["gamma"]) if model.is_perfect else 0.1
        prob = cert.CertificateProblem(
            cert.InverseDistanceParams(opts["c"], opts["ell"]),
            model,
            opts["D"] if opts["R"] is None else opts["R"],
            delta,
            opts["gamma"],
            opts["prior"],
            opts["speed"],
            opts["latency"],
        )
        out = cert.certify(prob, search=not args.no_search, validate=opts["validate"], seed=opts["seed"], k_max=opts["k_max"])
    except (ValueError, cert.InvalidModelError) as exc:
        raise UsageError(str(exc)) from exc
    text = cert.format_report(out)
    sys.stdout.write(text)
    if opts["out"]:
        Path(opts["out"]).write_text(text)
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args, config) -> int:
    opts = resolve(args, REPORT_OPTIONS, config, "report")
    src = Path(opts["input"])
    files = sorted(src.glob("*__*__*.json")) if src.is_dir() else []
    if not files:
        raise UsageError(
            f"no episode outputs in {src}: expected <mode>__<scenario>__<seed>.json with matching .csv trajectories "
            "(written by 'ctxsafe simulate')"
        )
    dst = Path(opts["out"] or src)
    dst.mkdir(parents=True, exist_ok=True)
    metrics = [RunMetrics(**json.loads(f.read_text())) for f in files]
    modes = [m for m in MODES if any(x.mode == m for x in metrics)]
    table = format_table([summarize(metrics, m) for m in modes])
    (dst / "report_table.txt").write_text(table)
    sys.stdout.write(table)

    # trajectory overlay: every tick of every episode with an episode key
    lines = ["episode,mode,scenario,seed,t,x,y,h"]
    for f in files:
        csv_path = f.with_suffix(".csv")
        if not csv_path.is_file():
            continue
        mode, scen, seed = f.stem.split("__")
        data = np.genfromtxt(csv_path, delimiter=",", names=True)
        data = np.atleast_1d(data)
        for row in data:
            lines.append(f"{f.stem},{mode},{scen},{seed},{row['t']!r},{row['x']!r},{row['y']!r},{row['h']!r}")
    (dst / "trajectories.csv").write_text("\n".join(lines) + "\n")
    if len(files) == 1:
        data = np.atleast_1d(np.genfromtxt(files[0].with_suffix(".csv"), delimiter=",", names=True))
        series = ["t,h"] + [f"{r['t']!r},{r['h']!r}" for r in data]
        (dst / "h_series.csv").write_text("\n".join(series) + "\n")
    return 0


# ---------------------------------------------------------------------------
# scenarios


def cmd_scenarios(args, config) -> int:
    if args.show:
        try:
            sc = get_builtin(args.show)
        except KeyError:
            close = difflib.get_close_matches(args.show, builtin_names(), n=3)
            raise UsageError(f"unknown scenario {args.show!r}" + (f"; did you mean {', '.join(close)}?" if close else "")) from None
        sys.stdout.write(yaml.safe_dump(scenario_to_dict(sc), sort_keys=False))
        return 0
    for sc in builtin_scenarios():
        sys.stdout.write(f"{sc.name:<20} {sc.task_label:<7} {sc.description}\n")
    return 0


COMMANDS = {"simulate": cmd_simulate, "certify": cmd_certify, "report": cmd_report, "scenarios": cmd_scenarios}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return COMMANDS[args.command](args, config)
    except (UsageError, ScenarioError) as exc:
        sys.stderr.write(f"ctxsafe {args.command}: error: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
