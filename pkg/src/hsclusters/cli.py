"""hsclusters command line.

Every subcommand writes delimited-text tables plus ``manifest.json`` into
``--out`` (default ``$HSCLUSTERS_OUT`` or ``./hsclusters-out``).  Running
with ``--from-manifest path/manifest.json`` repeats a previous run exactly.

Exit codes: 0 success, 1 runtime failure, 2 bad flags.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, theory
from .dynamics import evolve, state_to_text
from .ensemble import EnsembleConfig, sample_equilibrium

OUT_ENV = "HSCLUSTERS_OUT"
COMMANDS = ("simulate", "clusters", "theory", "percolation", "mfp", "ibf-roundtrip")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _grid(text: str) -> list[float]:
    try:
        vals = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad time grid {text!r}") from None
    if not vals or any(v < 0 or not math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError("grid needs finite non-negative times")
    return sorted(vals)


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--n", type=_positive_int, default=100, help="number of spheres")
    common.add_argument("--beta", type=float, default=1.0, help="inverse temperature")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--samples", type=_positive_int, default=10)
    common.add_argument("--out", type=Path, default=None)
    common.add_argument("--workers", type=_positive_int, default=1)
    common.add_argument("--config", type=Path, default=None, help="key = value file of defaults")
    common.add_argument("--from-manifest", type=Path, default=None)

    p = argparse.ArgumentParser(prog="hsclusters", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="one trajectory and its collision log")
    s.add_argument("--t", type=float, required=False, default=1.0)
    s.add_argument("--max-events", type=int, default=None)
    s.add_argument("--precision", type=int, default=None, help="MPFR bits (exact reversibility)")

    for name, helptext in (("clusters", "backward-cluster histograms and S(t)"),
                           ("percolation", "largest dynamical cluster over time")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--grid", type=_grid, default=[0.0, 1.0])
        c.add_argument("--units", choices=("sim", "tau"), default="sim",
                       help="grid in simulation time or in kinetic mean free times")
        if name == "clusters":
            c.add_argument("--root-average", type=_bool, default=False)
        else:
            c.add_argument("--threshold", type=float, default=0.5)

    t = sub.add_parser("theory", parents=[common], help="closed-form laws and bounds")
    t.add_argument("--t", type=float, default=1.0)
    t.add_argument("--kmax", type=int, default=20)
    t.add_argument("--C", type=float, default=1.0)
    t.add_argument("--k0", type=int, default=0)

    m = sub.add_parser("mfp", parents=[common], help="mean free time estimate")
    m.add_argument("--t", type=float, default=None, help="run length per trajectory")

    i = sub.add_parser("ibf-roundtrip", parents=[common], help="interacting backwards flow round trips")
    i.add_argument("--kmax", type=int, default=4, help="largest number of creations")
    i.add_argument("--eps", type=float, default=0.1)
    i.add_argument("--t", type=float, default=2.0)
    return p


def _read_config(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.lstrip("-").replace("_", "-")] = v
    return out


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest is not None:
        man = harness.RunManifest.read(args.from_manifest)
        replay = list(man.args["argv"])
        if args.out is not None:
            replay += ["--out", str(args.out)]
        args = parser.parse_args(replay)
        args.from_manifest = None
    elif args.config is not None:
        cfg = _read_config(args.config)
        flags = []
        for k, v in cfg.items():
            if f"--{k}" not in argv:
                flags += [f"--{k}", v]
        args = parser.parse_args([args.command] + flags + argv[1:])
    if args.out is None:
        args.out = Path(os.environ.get(OUT_ENV, "hsclusters-out"))
    args.argv = _canonical_argv(args)
    return args


def _canonical_argv(args) -> list[str]:
    """Fully resolved flags (without --out/--config), enough to replay the run."""
    skip = {"command", "out", "config", "from_manifest", "argv"}
    out = [args.command]
    for k, v in sorted(vars(args).items()):
        if k in skip or v is None:
            continue
        flag = "--" + k.replace("_", "-")
        if isinstance(v, list):
            v = ",".join(repr(float(x)) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        out += [flag, str(v)]
    return out


def _config(args) -> EnsembleConfig:
    return EnsembleConfig(args.n, args.beta, args.seed)


def _manifest(args, cfg: EnsembleConfig | None, grid, n_traj: int, **extra) -> harness.RunManifest:
    return harness.RunManifest(
        command=args.command,
        args={"argv": args.argv},
        config={"n_particles": cfg.n_particles, "beta": cfg.beta, "seed": cfg.seed, "eps": cfg.eps}
        if cfg else {},
        time_grid=[float(x) for x in grid],
        seeds=harness.trajectory_seeds(cfg, n_traj) if cfg else [],
        extra=extra,
    )


def _grid_in_sim(args, cfg) -> tuple[list[float], float | None]:
    if args.units == "sim":
        return list(args.grid), None
    tau = harness.kinetic_mean_free_time(cfg.n_particles, cfg.eps, cfg.beta)
    return [g * tau for g in args.grid], tau


def cmd_simulate(args, out: Path) -> harness.RunManifest:
    cfg = _config(args)
    s = sample_equilibrium(cfg)
    (out / "initial_state.txt").write_text(state_to_text(s))
    kw = {"max_events": args.max_events}
    if args.precision:
        kw["precision"] = args.precision
    final, log = evolve(s, args.t, **kw)
    log.write(out / "log.txt")
    (out / "final_state.txt").write_text(state_to_text(final.to_float() if final.is_precise else final))
    print(f"{len(log)} collisions in [0, {log.duration:g}]; log written to {out / 'log.txt'}")
    return _manifest(args, cfg, [args.t], 1, events=len(log))


def cmd_clusters(args, out: Path) -> harness.RunManifest:
    cfg = _config(args)
    grid, tau = _grid_in_sim(args, cfg)
    ex = harness.cluster_size_experiment(cfg, grid, args.samples, args.root_average, args.workers)
    for a, h in enumerate(ex.histograms):
        harness.write_table(out / f"histogram_{a:03d}.csv", h.rows(), harness.HIST_COLUMNS)
    harness.write_table(out / "size_series.csv", ex.series_rows(), harness.SERIES_COLUMNS)
    census_rows = []
    for c in ex.censuses:
        census_rows += [dict(r, t=c.t) for r in c.rows()]
    harness.write_table(out / "tree_census.csv", census_rows,
                        ("t", "k", "tree", "count", "frequency", "probability"))
    print("t,t_hat,S,stderr,theory")
    for h in ex.histograms:
        print(f"{h.t:.6g},{h.t_hat:.4f},{h.mean:.4f},{h.stderr:.4f},{theory.wild_mean_size(h.t_hat):.4f}")
    return _manifest(args, cfg, grid, ex.n_trajectories, rate=ex.rate, rate_stderr=ex.rate_stderr,
                     kinetic_tau=tau, root_average=args.root_average, bracket=list(ex.bracket),
                     histogram_files=[f"histogram_{a:03d}.csv" for a in range(len(grid))])


def cmd_percolation(args, out: Path) -> harness.RunManifest:
    cfg = _config(args)
    grid, tau = _grid_in_sim(args, cfg)
    res = harness.percolation_experiment(cfg, grid, args.samples, args.threshold, workers=args.workers)
    harness.write_table(out / "percolation.csv", res.rows(), harness.PERCOLATION_COLUMNS)
    harness.write_table(out / "crossing_times.csv",
                        [{"trajectory": j, "t_cross": float(tc)} for j, tc in enumerate(res.crossing_times)],
                        ("trajectory", "t_cross"))
    for r in res.rows():
        print(f"t={r['t']:.6g} fraction={r['fraction']:.4f} +- {r['stderr']:.4f}")
    return _manifest(args, cfg, grid, args.samples, kinetic_tau=tau, threshold=args.threshold)


def cmd_mfp(args, out: Path) -> harness.RunManifest:
    cfg = _config(args)
    m = harness.estimate_mean_free_time(cfg, args.samples, args.t, args.workers)
    harness.write_table(out / "mfp.csv", [vars_dict(m)],
                        ("tau", "stderr", "kinetic", "collisions", "particle_time", "n_samples"))
    print(f"tau_mfp = {m.tau:.6g} +- {m.stderr:.3g} (kinetic estimate {m.kinetic:.6g})")
    return _manifest(args, cfg, [], args.samples, tau=m.tau)


def vars_dict(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


def cmd_theory(args, out: Path) -> harness.RunManifest:
    rows = theory.theory_table(args.t, args.kmax, args.C, args.k0)
    cols = ("k", "pmf", "tree_weight", "n_trees", "rough_bound", "tail_bound")
    text = harness.table_text(rows, cols)
    (out / "theory.csv").write_text(text)
    sys.stdout.write(text)
    man = _manifest(args, None, [args.t], 0, mean_size=theory.wild_mean_size(args.t))
    return man


def cmd_ibf(args, out: Path) -> harness.RunManifest:
    from .clusters import construct_ibf, far_spectators, ghost_conflicts, ibf_round_trip, random_ibf_variables

    rng = np.random.default_rng(args.seed)
    rows = []
    skipped = 0
    while len(rows) < args.samples:
        n = int(rng.integers(0, args.kmax + 1))
        v = random_ibf_variables(rng, n, args.eps, t=args.t)
        res = construct_ibf(v, args.eps)
        if ghost_conflicts(res, v):
            skipped += 1
            continue
        rt = ibf_round_trip(v, args.eps, far_spectators(rng, res, v, 4))
        rows.append({"sample": len(rows), "n": n, "gamma": "-".join(map(str, v.gamma)) or "()",
                     "ok": rt.ok, "max_time_error": rt.max_time_error})
    harness.write_table(out / "ibf_roundtrip.csv", rows, ("sample", "n", "gamma", "ok", "max_time_error"))
    bad = sum(not r["ok"] for r in rows)
    print(f"{len(rows) - bad}/{len(rows)} round trips recovered the tree; "
          f"{skipped} draws skipped for interference")
    man = _manifest(args, None, [], 0, failures=bad, skipped=skipped)
    if bad:
        man.extra["status"] = "failed"
    return man


HANDLERS = {
    "simulate": cmd_simulate,
    "clusters": cmd_clusters,
    "theory": cmd_theory,
    "percolation": cmd_percolation,
    "mfp": cmd_mfp,
    "ibf-roundtrip": cmd_ibf,
}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (OSError, ValueError, KeyError) as e:
        print(f"hsclusters: error: {e}", file=sys.stderr)
        return 2
    if args.command != "theory" and args.command != "ibf-roundtrip":
        try:
            _config(args)
        except ValueError as e:
            print(f"hsclusters: error: {e}", file=sys.stderr)
            return 2
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        man = HANDLERS[args.command](args, out)
        man.wall_seconds = time.time() - t0
        man.write(out / "manifest.json")
    except Exception as e:  # runtime failure: report and exit 1
        print(f"hsclusters: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 1 if man.extra.get("status") == "failed" else 0


def main() -> None:
    sys.exit(run())
