"""Command-line entry point: ``harmonic-em run | analyze | diagnose``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import Any

import numpy as np

from . import __version__
from .config import Config, ConfigError, config_from_mapping, load_config
from .core import DomainError, Schedule, Units, step_for_stiffness
from .glue import GlueKernel
from .integrators import StepKernel
from .io import (
    TrajectoryFormatError,
    manifest_hash,
    read_trajectory,
    write_matrix,
    write_table,
    write_trajectory,
)
from .potentials import make_quadratic, make_potential, perturb

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
OUT_DIR_ENV = "HARMONIC_EM_OUT_DIR"
SUITES = ("kl-budget", "weak-order", "stationary-bias", "mh-acceptance", "noise-fusion", "refinement")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- builders

def build_units(cfg: Config) -> Units:
    u = cfg.section("units")
    return Units(temperature=u["temperature"], k_B=u["k_B"])


def build_potential(cfg: Config, bare: bool = False):
    p = cfg.section("potential")
    kind = p["kind"]
    if kind == "quadratic":
        base = make_quadratic(p["kappa"], p["center"], dim=p["dim"])
    elif kind == "double-well":
        base = make_potential(kind, a=p["a"], b=p["b"])
    elif kind == "torsion-ring":
        base = make_potential(kind, heights=p["heights"])
    else:
        raise ConfigError(f"unknown potential kind '{kind}' in [potential]")
    if p["eps_bar"] > 0 and not bare:
        return perturb(base, p["eps_bar"], p["perturb_mode"], seed=p["perturb_seed"])
    return base


def sampler_dt(cfg: Config, units: Units) -> float:
    s = cfg.section("sampler")
    if "stiffness" in s:
        return step_for_stiffness(s["stiffness"], units)
    return s.get("dt", 0.01)


def horizontal_potential(cfg: Config, dim: int):
    s = cfg.section("sampler")
    if s["horizontal_kappa"] <= 0:
        return None
    return make_quadratic(s["horizontal_kappa"], s["horizontal_center"], dim=dim)


def build_kernel(cfg: Config, potential, units: Units):
    s = cfg.section("sampler")
    kind = s["kind"]
    if kind in ("em", "harmonic", "tempered"):
        return StepKernel("em-overdamped", potential, units)
    if kind == "heun":
        hs = s["heun_stiffness"]
        return StepKernel("heun", potential, units, stiffness=hs if hs == "auto" else float(hs))
    if kind == "underdamped":
        return StepKernel("em-underdamped", potential, units, gamma=s["gamma"])
    if kind == "strang":
        a_v = s["alpha_v"]
        return StepKernel("strang-composed", potential, units, split=(a_v, 1.0 - a_v),
                          horizontal=horizontal_potential(cfg, potential.dim), substep=s["substep"])
    if kind in ("adjacent-glue", "anchored-glue"):
        g = cfg.section("glue")
        return GlueKernel(kind.split("-")[0], potential, units, k_a=g["k_a"], stiffness=g.get("k"))
    raise ConfigError(f"unknown sampler kind '{kind}' in [sampler]")


def build_schedule(cfg: Config, dt: float) -> Schedule:
    sc = cfg.section("schedule")
    if sc["upsilon_max"] != 1.0:
        return Schedule.geometric_tempering(sc["n_steps"], dt, sc["upsilon_max"])
    return Schedule.uniform(sc["n_steps"], dt)


# ---------------------------------------------------------------- manifest

def make_manifest(cfg: Config, seed: int, command: str, extra: dict | None = None) -> dict:
    payload = {"config": cfg.raw, "seed": seed, "version": __version__, "command": command,
               "parameters": {name: {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.section(name).items()}
                              for name in sorted(cfg.present)}}
    if extra:
        payload.update(extra)
    return payload


def write_manifest(out_dir: str, payload: dict, started: float) -> str:
    digest = manifest_hash(payload)
    doc = dict(payload, manifest_sha256=digest, start_time=started, end_time=time.time())
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
    return digest


def read_config_arg(path: str) -> tuple[Config, int | None]:
    """Load an INI config, or the config snapshot and seed of a manifest JSON."""
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            return config_from_mapping(doc["config"], path), doc.get("seed")
        except KeyError:
            raise ConfigError(f"{path}: manifest has no 'config' snapshot") from None
    return load_config(path), None


# ---------------------------------------------------------------- run

def cmd_run(args) -> int:
    started = time.time()
    cfg, manifest_seed = read_config_arg(args.config)
    seed = _seed(args, cfg, manifest_seed)
    units = build_units(cfg)
    try:
        potential = build_potential(cfg)
        dt = sampler_dt(cfg, units)
        out_dir = _out_dir(args, cfg)
        if cfg.has("lattice"):
            return _run_lattice(args, cfg, seed, units, potential, dt, out_dir, started)
        kernel = build_kernel(cfg, potential, units)
        sched = build_schedule(cfg, dt)
    except DomainError as err:
        raise ConfigError(str(err)) from None
    s = cfg.section("sampler")
    ex = cfg.section("exactness")
    mh_target = None
    if ex["mh_enabled"]:
        if ex["mh_target"] != "bare":
            raise ConfigError("mh_target 'glued' needs radial glue, which batch runs do not use; use 'bare'")
        mh_target = build_potential(cfg, bare=True)
    from .lattice import initial_batch, parallel_batch_sample

    x0 = initial_batch(s["replicas"], potential.dim, seed, s["init_scale"])
    every = cfg.section("schedule")["record_every"]
    try:
        traj = parallel_batch_sample(kernel, len(sched), sched, seed, x0=x0, mh_target=mh_target, record_every=every)
    except DomainError as err:
        raise ConfigError(str(err)) from None
    payload = make_manifest(cfg, seed, "run")
    digest = manifest_hash(payload)
    T1, B, d = traj.x.shape
    steps = np.repeat(np.arange(1, T1) * every, B)
    reps = np.tile(np.arange(B), T1 - 1)
    times = np.repeat(traj.times[1:], B)
    coords = traj.x[1:].reshape(-1, d)
    vels = traj.v[1:].reshape(-1, d) if traj.v is not None and cfg.section("output")["velocities"] else None
    prefix = cfg.section("output")["prefix"]
    n_rows = write_trajectory(os.path.join(out_dir, f"{prefix}_trajectory.csv"), digest, steps, reps, times, coords, vels)
    final = traj.x[-1]
    summary = {"rows": n_rows, "replicas": B, "steps": len(sched), "dt": dt,
               "final_mean": final.mean(axis=0).tolist(), "final_var": final.var(axis=0).tolist(),
               "acceptance_rate": traj.acceptance_rate}
    _write_json(os.path.join(out_dir, f"{prefix}_summary.json"), digest, summary)
    write_manifest(out_dir, payload, started)
    print(f"wrote {n_rows} rows to {os.path.join(out_dir, prefix + '_trajectory.csv')}")
    return EXIT_OK


def _run_lattice(args, cfg, seed, units, potential, dt, out_dir, started) -> int:
    from .exactness import SheetSpec
    from .lattice import HorizontalCoupling, TrajectoryLattice, run_lattice

    lc = cfg.section("lattice")
    workers = args.workers if args.workers is not None else lc["workers"]
    kernel = build_kernel(cfg, potential, units)
    if not isinstance(kernel, StepKernel) or kernel.kind not in ("em-overdamped", "heun"):
        raise ConfigError("lattice runs need sampler kind em, harmonic or heun")
    s = cfg.section("sampler")
    a_v = s["alpha_v"]
    horizontal = None
    if cfg.has("glue") or cfg.section("exactness")["arex_enabled"]:
        g = cfg.section("glue")
        k = g.get("k") if "k" in g else (1.0 / (2 * units.D * g["dt"]) if "dt" in g else units.beta / (2 * dt))
        vh = horizontal_potential(cfg, potential.dim)
        sheet = SheetSpec(lc["B"], lambda x, lam: lam * vh.value(x)) if vh is not None else None
        grad = (lambda x, lam: lam * vh.gradient(x)) if vh is not None else None
        horizontal = HorizontalCoupling(stiffness=k if cfg.has("glue") else 0.0, sheet=sheet, sheet_gradient=grad,
                                        swaps=cfg.section("exactness")["arex_enabled"] and sheet is not None)
    lat = TrajectoryLattice.initialize(lc["N"], lc["B"], potential.dim, dt, seed, s["init_scale"])
    run_lattice(lat, kernel, horizontal, lc["passes"], (a_v, 1 - a_v), seed, workers)
    payload = make_manifest(cfg, seed, "run-lattice")
    digest = manifest_hash(payload)
    N1, B1, d = lat.states.shape
    steps = np.repeat(np.arange(N1), B1)
    reps = np.tile(np.arange(B1), N1)
    prefix = cfg.section("output")["prefix"]
    path = os.path.join(out_dir, f"{prefix}_lattice.csv")
    n_rows = write_trajectory(path, digest, steps, reps, steps * dt, lat.states.reshape(-1, d))
    write_manifest(out_dir, payload, started)
    print(f"wrote {n_rows} lattice rows ({lat.generation} macro-iterations) to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- analyze

def cmd_analyze(args) -> int:
    from .observables import (
        autocorrelation,
        batch_correlation_matrix,
        circular_acf,
        integrated_autocorrelation,
        pairwise_distance_matrix,
        radius_of_gyration,
    )

    tab = read_trajectory(args.trajectory)
    wanted = set(args.observables.split(","))
    unknown = wanted - {"rg", "acf", "tau", "corr", "dist"}
    if unknown:
        raise UsageError(f"unknown observables: {', '.join(sorted(unknown))}")
    out_dir = _out_dir(args, None)
    digest = manifest_hash({"analyze": os.path.basename(args.trajectory), "source": tab.digest,
                            "observables": sorted(wanted), "angle_column": args.angle_column,
                            "max_lag": args.max_lag})
    d = tab.coords.shape[1]
    reps = tab.replicas
    col = None
    if args.angle_column is not None:
        try:
            col = int(args.angle_column.split("_")[-1])
        except ValueError:
            raise UsageError(f"bad angle column {args.angle_column!r}") from None
        if not 0 <= col < d:
            raise UsageError(f"angle column {args.angle_column!r} not in trajectory")
    series = [tab.series(r) for r in reps]
    dt_phys = args.dt_phys
    if dt_phys is None:
        t0 = series[0][1]
        dt_phys = float(t0[1] - t0[0]) if t0.size > 1 else 1.0
    written = []
    if "rg" in wanted:
        rg = np.concatenate([radius_of_gyration(_as_points(c)) for _, _, c in series])
        cols = {"step": np.concatenate([s for s, _, _ in series]),
                "replica": np.concatenate([np.full(len(s), r) for r, (s, _, _) in zip(reps, series)]),
                "time": np.concatenate([t for _, t, _ in series]), "rg": rg}
        written.append(_table(out_dir, "rg.csv", digest, cols))
    scalar = [c[:, col if col is not None else 0] for _, _, c in series]
    if "acf" in wanted:
        L = min(args.max_lag, min(len(v) for v in scalar) - 1)
        if col is not None:
            acfs = np.array([circular_acf(v, L) for v in scalar])
        else:
            acfs = np.array([autocorrelation(v)[:L + 1] for v in scalar])
        lags = np.arange(L + 1)
        written.append(_table(out_dir, "acf.csv", digest, {"lag": lags, "time": lags * dt_phys,
                                                            "C": acfs.mean(axis=0)}))
    if "tau" in wanted:
        taus = [integrated_autocorrelation(v, circular=col is not None) if len(v) >= 10 else (math.nan, math.nan)
                for v in scalar]
        written.append(_table(out_dir, "tau.csv", digest, {"replica": reps, "tau_int": [t for t, _ in taus],
                                                            "n_eff": [n for _, n in taus]}))
    if "corr" in wanted:
        L = min(len(c) for _, _, c in series)
        rows = np.array([c[:L].ravel() for _, _, c in series])
        if rows.shape[1] >= 2:
            path = os.path.join(out_dir, "corr.mat")
            write_matrix(path, digest, batch_correlation_matrix(rows))
            written.append(path)
    if "dist" in wanted:
        frames = np.array([_as_points(c[-1]) for _, _, c in series])
        path = os.path.join(out_dir, "dist.mat")
        write_matrix(path, digest, pairwise_distance_matrix(frames, align=frames.shape[-1] == 3))
        written.append(path)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def _as_points(coords: np.ndarray) -> np.ndarray:
    """Coordinates as points: groups of three if divisible by 3, else one-dimensional points."""
    d = coords.shape[-1]
    if d % 3 == 0:
        return coords.reshape(coords.shape[:-1] + (d // 3, 3))
    return coords[..., :, None]


def _table(out_dir, name, digest, cols) -> str:
    path = os.path.join(out_dir, name)
    write_table(path, digest, {k: np.asarray(v, dtype=float) for k, v in cols.items()})
    return path


# ---------------------------------------------------------------- diagnose

def cmd_diagnose(args) -> int:
    from . import suites

    if args.suite not in SUITES:
        raise UsageError(f"unknown suite '{args.suite}'; choose from {', '.join(SUITES)}")
    cfg, manifest_seed = read_config_arg(args.config) if args.config else (config_from_mapping({}), None)
    seed = _seed(args, cfg, manifest_seed)
    out_dir = _out_dir(args, cfg)
    records = suites.run_suite(args.suite, cfg, seed)
    payload = make_manifest(cfg, seed, f"diagnose {args.suite}")
    digest = manifest_hash(payload)
    path = os.path.join(out_dir, f"diagnose_{args.suite}.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# manifest_sha256={digest}\n")
        for rec in records:
            line = json.dumps(rec, sort_keys=True, default=float)
            fh.write(line + "\n")
            print(line)
    write_manifest(out_dir, payload, time.time())
    failed = [r for r in records if r["verdict"] != "PASS"]
    print(f"{args.suite}: {len(records) - len(failed)}/{len(records)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- plumbing

def _seed(args, cfg: Config, manifest_seed) -> int:
    if args.seed is not None:
        return int(args.seed)
    if manifest_seed is not None:
        return int(manifest_seed)
    return int(cfg.section("sampler")["seed"])


def _out_dir(args, cfg: Config | None) -> str:
    out = args.out_dir or os.environ.get(OUT_DIR_ENV) or (cfg.section("output")["dir"] if cfg else "out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, digest: str, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# manifest_sha256={digest}\n")
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="INI config file or a manifest.json to reproduce")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides config)")
    parser.add_argument("--workers", type=int, default=default, help="worker threads for lattice runs (0 = all cores)")
    parser.add_argument("--out-dir", default=default, help=f"output directory (default: ${OUT_DIR_ENV} or [output] dir)")


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    p = _Parser(prog="harmonic-em", description=__doc__.splitlines()[0])
    _global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="sample trajectories from a config")
    a = sub.add_parser("analyze", parents=[common], help="compute observables from a trajectory file")
    a.add_argument("trajectory")
    a.add_argument("--observables", default="rg,acf,tau,corr,dist")
    a.add_argument("--angle-column", help="treat this column (e.g. coord_0) as an angle")
    a.add_argument("--max-lag", type=int, default=50)
    a.add_argument("--dt-phys", type=float, help="time per frame (default: from the time column)")
    d = sub.add_parser("diagnose", parents=[common], help="run a diagnostic suite")
    d.add_argument("suite", help=", ".join(SUITES))
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "run" and not args.config:
            raise UsageError("run needs --config")
        return {"run": cmd_run, "analyze": cmd_analyze, "diagnose": cmd_diagnose}[args.command](args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrajectoryFormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
