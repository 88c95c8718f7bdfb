"""Command-line interface: ``robinshape {synth,invert,probe-hessian,plot}``.

Runs are driven by an INI file.  Every key has a default, unknown keys are
rejected, and the merged configuration is written next to the outputs so a
run can be reproduced by feeding that file back in.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .descent import DescentConfig, TerminationReason, read_history, run_reconstruction, write_history
from .fem import SolverError
from .geometry import (
    GeometryError,
    Polyline,
    boundary_from_name,
    read_polyline,
    sample_boundary,
    write_polyline,
)
from .hessian import spectrum_decay_report, write_report
from .mesh import MeshError
from .problems import BoundaryFunction, Formulation, MeasurementSet, read_cauchy_csv, write_cauchy_csv
from .synth import SYNTH_SEED, default_catalog, synthesize

log = logging.getLogger("robinshape")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MESH = 0, 2, 3, 4

DEFAULTS: dict[str, dict[str, str]] = {
    "geometry": {
        "exact": "kite",
        "outer": "circle:1.0",
        "initial": "circle:0.3",
        "samples": "400",
    },
    "problem": {
        "alpha": "1.0",
        "formulation": "N",
        "measurements": "4",
        "prescribed": "",
    },
    "synth": {"h_fine": "0.015", "order": "2", "seed": str(SYNTH_SEED)},
    "data": {"dir": ""},
    "descent": {
        "h": "0.03",
        "max_iterations": "300",
        "cost_tolerance": "1e-8",
        "armijo_c1": "1e-4",
        "backtrack_factor": "0.5",
        "step_fraction": "0.5",
        "area_ratio_floor": "0.1",
        "mesh_seed": "",
        "snapshot_every": "10",
        "remesh_min_angle": "0.0",
        "remesh_edge_ratio": "2.0",
        "remesh_attempts": "3",
        "min_angle_floor": "0.0",
        "record_wall_time": "false",
    },
    "hessian": {"k_list": "2,4,8,16", "h": "0.02", "t": "", "seed": "", "svg": "true"},
    "plot": {"history": "", "polylines": ""},
    "run": {"threads": "1", "seed": ""},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class Config:
    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    @classmethod
    def load(cls, path: str | None) -> "Config":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.read_dict(DEFAULTS)
        if path is not None:
            user = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
            try:
                with open(path) as fh:
                    user.read_file(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
            for section in user.sections():
                if section not in DEFAULTS:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, value in user.items(section, raw=True):
                    if key not in DEFAULTS[section]:
                        raise ConfigError(f"unknown config key '{key}' in [{section}]")
                    parser.set(section, key, value)
        return cls(parser)

    def set(self, section: str, key: str, value) -> None:
        self.parser.set(section, key, str(value))

    def str(self, section: str, key: str) -> str:
        return self.parser.get(section, key).strip()

    def _typed(self, section, key, kind, check=None, optional=False):
        raw = self.str(section, key)
        if optional and raw == "":
            return None
        try:
            value = kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None
        if check is not None and not check(value):
            raise ConfigError(f"[{section}] {key} = {raw!r} is out of range")
        return value

    def float(self, section, key, check=None, optional=False):
        return self._typed(section, key, float, check, optional)

    def int(self, section, key, check=None, optional=False):
        return self._typed(section, key, int, check, optional)

    def bool(self, section, key) -> bool:
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be true or false") from None

    def write(self, path: Path) -> None:
        with open(path, "w") as fh:
            self.parser.write(fh)

    def digest(self) -> str:
        text = "\n".join(f"{s}.{k}={v}" for s in self.parser.sections() for k, v in self.parser.items(s, raw=True))
        return hashlib.sha256(text.encode()).hexdigest()


def _shape(cfg: Config, key: str) -> Polyline | None:
    descriptor = cfg.str("geometry", key)
    if descriptor.lower() in ("", "none"):
        return None
    n = cfg.int("geometry", "samples", lambda v: v >= 8)
    path = Path(descriptor)
    if path.exists():
        try:
            return read_polyline(path)
        except GeometryError as exc:
            raise ConfigError(f"[geometry] {key}: {exc}") from None
    try:
        return sample_boundary(boundary_from_name(descriptor), n)
    except (GeometryError, ValueError) as exc:
        if path.suffix in (".txt", ".csv", ".poly"):
            raise ConfigError(f"[geometry] {key}: polyline file not found: {descriptor}") from None
        raise ConfigError(f"[geometry] {key}: {exc}") from None


def _formulation(cfg: Config) -> Formulation:
    try:
        return Formulation.parse(cfg.str("problem", "formulation"))
    except ValueError as exc:
        raise ConfigError(f"[problem] formulation: {exc}") from None


def _measurements(cfg: Config) -> int:
    M = cfg.int("problem", "measurements")
    if not 1 <= M <= 5:
        raise ConfigError(f"[problem] measurements must be between 1 and 5, got {M}")
    return M


def _prescribed(cfg: Config) -> list[BoundaryFunction]:
    M = _measurements(cfg)
    raw = cfg.str("problem", "prescribed")
    if not raw:
        return default_catalog(_formulation(cfg), M)
    exprs = [e.strip() for e in raw.split(";") if e.strip()]
    if len(exprs) != M:
        raise ConfigError(f"[problem] prescribed lists {len(exprs)} functions but measurements = {M}")
    try:
        return [BoundaryFunction(e) for e in exprs]
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"[problem] prescribed: {exc}") from None


def _alpha(cfg: Config) -> float:
    return cfg.float("problem", "alpha", lambda a: a > 0)


def _descent_config(cfg: Config) -> DescentConfig:
    s = "descent"
    try:
        return DescentConfig(
            max_iterations=cfg.int(s, "max_iterations"),
            cost_tolerance=cfg.float(s, "cost_tolerance"),
            armijo_c1=cfg.float(s, "armijo_c1"),
            backtrack_factor=cfg.float(s, "backtrack_factor"),
            step_fraction=cfg.float(s, "step_fraction"),
            area_ratio_floor=cfg.float(s, "area_ratio_floor"),
            h=cfg.float(s, "h"),
            mesh_seed=cfg.int(s, "mesh_seed", optional=True),
            snapshot_every=cfg.int(s, "snapshot_every"),
            remesh_min_angle=cfg.float(s, "remesh_min_angle"),
            remesh_edge_ratio=cfg.float(s, "remesh_edge_ratio"),
            remesh_attempts=cfg.int(s, "remesh_attempts"),
            min_angle_floor=cfg.float(s, "min_angle_floor"),
            threads=cfg.int("run", "threads"),
            record_wall_time=cfg.bool(s, "record_wall_time"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[descent] {exc}") from None


def _data_dir(cfg: Config, out: Path) -> Path:
    d = cfg.str("data", "dir")
    return Path(d) if d else out


def _provenance(cfg: Config, command: str, extra: dict) -> dict:
    return {
        "tool": "robinshape",
        "version": __version__,
        "command": command,
        "config_sha256": cfg.digest(),
        **extra,
    }


def _finish(cfg: Config, out: Path, command: str, extra: dict) -> None:
    cfg.write(out / f"{command}_effective.ini")
    (out / f"{command}_provenance.json").write_text(json.dumps(_provenance(cfg, command, extra), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: Config, out: Path) -> int:
    _measurements(cfg)
    exact, outer = _shape(cfg, "exact"), _shape(cfg, "outer")
    if exact is None or outer is None:
        raise ConfigError("[geometry] synth needs both exact and outer shapes")
    formulation = _formulation(cfg)
    prescribed = _prescribed(cfg)
    h_fine = cfg.float("synth", "h_fine", lambda v: v > 0)
    order = cfg.int("synth", "order", lambda v: v in (1, 2))
    seed = cfg.int("synth", "seed", optional=True)
    alpha = _alpha(cfg)
    data = synthesize(exact, outer, alpha, prescribed, formulation, h_fine=h_fine, order=order, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, pair in enumerate(data, start=1):
        name = f"cauchy_{i}.csv"
        write_cauchy_csv(out / name, pair, i)
        files.append(name)
    _finish(
        cfg,
        out,
        "synth",
        {
            "geometry": {"exact": cfg.str("geometry", "exact"), "outer": cfg.str("geometry", "outer")},
            "h_fine": h_fine,
            "order": order,
            "alpha": alpha,
            "formulation": formulation.value,
            "files": files,
        },
    )
    log.info("wrote %d Cauchy files to %s", len(files), out)
    return EXIT_OK


def _load_data(cfg: Config, out: Path) -> MeasurementSet:
    d = _data_dir(cfg, out)
    M = _measurements(cfg)
    formulation = _formulation(cfg)
    pairs = []
    for i in range(1, M + 1):
        path = d / f"cauchy_{i}.csv"
        if not path.exists():
            raise ConfigError(f"missing measurement file {path} (run 'synth' first or set [data] dir)")
        try:
            pair, _ = read_cauchy_csv(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if pair.formulation is not formulation:
            raise ConfigError(f"{path}: formulation {pair.formulation.value} does not match [problem] formulation")
        pairs.append(pair)
    return MeasurementSet(tuple(pairs))


def cmd_invert(cfg: Config, out: Path) -> int:
    dcfg = _descent_config(cfg)
    outer, initial, exact = _shape(cfg, "outer"), _shape(cfg, "initial"), _shape(cfg, "exact")
    if outer is None or initial is None:
        raise ConfigError("[geometry] invert needs outer and initial shapes")
    data = _load_data(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_reconstruction(dcfg, initial, outer, data, _alpha(cfg), exact=exact)

    write_history(out / "history.csv", result.history)
    write_polyline(out / "outer.txt", outer)
    write_polyline(out / "initial.txt", initial)
    write_polyline(out / "final.txt", result.final)
    if exact is not None:
        write_polyline(out / "exact.txt", exact)
    if result.snapshots:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for it, poly in result.snapshots:
            write_polyline(snap_dir / f"gamma_{it:04d}.txt", poly)
    last = result.history[-1]
    summary = {
        "reason": result.reason.value,
        "message": result.message,
        "iterations": last.iteration,
        "final_cost": last.cost_total,
        "final_hausdorff": None if np.isnan(last.hausdorff) else last.hausdorff,
    }
    (out / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _finish(cfg, out, "invert", {"measurements": len(data), "h": dcfg.h})
    print(f"termination: {result.reason.value} after {last.iteration} iterations")
    if result.reason is TerminationReason.MESH_DEGENERATE:
        log.error("mesh degenerated: %s", result.message)
        return EXIT_MESH
    return EXIT_OK


def _parse_k_list(cfg: Config) -> list[int]:
    raw = cfg.str("hessian", "k_list")
    try:
        ks = [int(k) for k in raw.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"[hessian] k_list = {raw!r} must be comma-separated integers") from None
    if not ks or any(b <= a for a, b in zip(ks, ks[1:])) or ks[0] < 0:
        raise ConfigError("[hessian] k_list must be a non-empty increasing list")
    return ks


def cmd_probe_hessian(cfg: Config, out: Path) -> int:
    exact, outer = _shape(cfg, "exact"), _shape(cfg, "outer")
    if exact is None or outer is None:
        raise ConfigError("[geometry] probe-hessian needs exact and outer shapes")
    ks = _parse_k_list(cfg)
    h = cfg.float("hessian", "h", lambda v: v > 0)
    t = cfg.float("hessian", "t", lambda v: v > 0, optional=True)
    seed = cfg.int("hessian", "seed", optional=True)
    data = _load_data(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    report = spectrum_decay_report(
        exact, outer, data, _alpha(cfg), ks, t=t, h=h, seed=seed, threads=cfg.int("run", "threads")
    )
    write_report(out / "hessian.csv", report)
    if cfg.bool("hessian", "svg"):
        from .plotting import plot_hessian_report

        plot_hessian_report(report, out / "hessian.svg")
    for f in report.flags:
        log.warning("%s", f)
    _finish(
        cfg,
        out,
        "probe-hessian",
        {"t": report.t, "h": h, "decay_exact": report.decay_exact, "decay_fd": report.decay_fd, "flags": report.flags},
    )
    print(f"decay q({ks[-1]})/q({ks[0]}): exact {report.decay_exact:.4g}, fd {report.decay_fd:.4g}")
    return EXIT_OK


def cmd_plot(cfg: Config, out: Path) -> int:
    from .plotting import plot_history, plot_overlay

    hist = cfg.str("plot", "history")
    polys = [p.strip() for p in cfg.str("plot", "polylines").split(",") if p.strip()]
    if not hist and not polys:
        # default: the files of an 'invert' run in the output directory
        if (out / "history.csv").exists():
            hist = str(out / "history.csv")
        polys = [str(out / f"{n}.txt") for n in ("outer", "exact", "initial", "final") if (out / f"{n}.txt").exists()]
        if not hist and not polys:
            raise ConfigError(f"nothing to plot: set [plot] history/polylines or run 'invert' into {out}")
    curves = []
    for p in polys:
        try:
            curves.append((Path(p).stem, read_polyline(p)))
        except FileNotFoundError:
            raise ConfigError(f"polyline file not found: {p}") from None
        except GeometryError as exc:
            raise ConfigError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if curves:
        plot_overlay(curves, out / "overlay.svg")
        written.append("overlay.svg")
    if hist:
        try:
            history = read_history(hist)
        except FileNotFoundError:
            raise ConfigError(f"history file not found: {hist}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        written += plot_history(history, out)
    print("wrote " + ", ".join(written))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "invert": cmd_invert,
    "probe-hessian": cmd_probe_hessian,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robinshape", description="Robin inclusion reconstruction from Cauchy data.")
    ap.add_argument("--version", action="version", version=f"robinshape {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--threads", type=int, help="parallel measurement solves")
        p.add_argument("--seed", type=int, help="mesh lattice seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = Config.load(args.config)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            cfg.set("run", "threads", args.threads)
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        seed = cfg.int("run", "seed", optional=True)
        if seed is not None:
            cfg.set("descent", "mesh_seed", seed)
            cfg.set("hessian", "seed", seed)
            cfg.set("synth", "seed", seed + 1)
        cfg.int("run", "threads", lambda v: v >= 1)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeshError as exc:
        print(f"mesh error: {exc}", file=sys.stderr)
        return EXIT_MESH
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GeometryError as exc:
        print(f"geometry error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
