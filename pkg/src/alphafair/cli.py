"""Command-line entry point: ``alphafair <command> --spec FILE [options]``.

Every run writes its result files plus ``manifest.json`` into ``--out``
and echoes a short JSON summary on stdout. Numbers are written with 12
significant digits. Randomised commands require ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import allocate, allocate_many, kkt_residual
from .errors import AlphaFairError, InvalidSpec
from .fluid import fms_integrate, lift_many, manifold_distance
from .heavytraffic import interchange_experiment, make_family
from .lyapunov import (compute_constants, drift_inner_products, expected_drift_L, generator_F,
                       maximal_bound, sup_norm_constants, tail_bound)
from .model import load_spec
from .simulator import (RateTable, estimate_stationary, exact_stationary, max_excursion,
                        replica_seeds, simulate_ctmc)

log = logging.getLogger("alphafair")

RANDOMISED = {"simulate", "constants", "tail-check", "excursion-check", "heavy-traffic"}


def num(x) -> str:
    return f"{float(x):.12g}"


def rounded(obj):
    """Round every float in a JSON-able structure to 12 significant digits."""
    if isinstance(obj, (float, np.floating)):
        return float(num(obj)) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return rounded(obj.tolist())
    if isinstance(obj, dict):
        return {k: rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [rounded(v) for v in obj]
    return obj


def vector(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


@dataclass
class ExperimentConfig:
    command: str
    spec_path: Path
    seed: int | None
    out: Path
    workers: int
    params: dict = field(default_factory=dict)


class Run:
    """Collects output files and writes the manifest."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.outputs: list = []
        config.out.mkdir(parents=True, exist_ok=True)

    def write_json(self, name: str, payload) -> Path:
        path = self.config.out / name
        path.write_text(json.dumps(rounded(payload), indent=2, sort_keys=True) + "\n")
        self.outputs.append(str(path))
        return path

    def write_csv(self, name: str, header, rows) -> Path:
        path = self.config.out / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([num(x) if isinstance(x, (float, np.floating)) else x for x in row])
        self.outputs.append(str(path))
        return path

    def manifest(self, started: float, spec_hash: str) -> None:
        cfg = self.config
        payload = {
            "command": cfg.command,
            "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.params.items()},
            "spec_path": str(cfg.spec_path),
            "spec_sha256": spec_hash,
            "seed": cfg.seed,
            "workers": cfg.workers,
            "version": __version__,
            "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "wall_clock_seconds": round(time.time() - started, 3),
            "outputs": self.outputs,
        }
        (cfg.out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@contextmanager
def worker_map(workers: int):
    if workers <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield pool.map


# -- commands -----------------------------------------------------------------

def cmd_allocate(spec, cfg: ExperimentConfig, run: Run) -> dict:
    state = cfg.params["state"]
    alloc = allocate(spec, state)
    result = {"state": state, "rates": alloc.rates, "dual_prices": alloc.dual_prices,
              "kkt_residual": kkt_residual(spec, state, alloc)}
    run.write_json("allocation.json", result)
    return result


def cmd_simulate(spec, cfg: ExperimentConfig, run: Run) -> dict:
    p = cfg.params
    initial = [int(x) for x in (p["initial"] or [0] * spec.n_routes)]
    trace = simulate_ctmc(spec, initial, p["horizon"], cfg.seed)
    idx, delta = trace.changes()
    rows = [[num(trace.times[0]), -1, 0, *trace.states[0].tolist()]]
    rows += [[num(t), int(i), int(d), *s] for t, i, d, s in
             zip(trace.times[1:], idx, delta, trace.states[1:].tolist())]
    header = ["t", "i_changed", "delta"] + [f"n_{i + 1}" for i in range(spec.n_routes)]
    run.write_csv("trace.csv", header, rows)
    return {"events": trace.n_events, "max_excursion": max_excursion(trace)}


def cmd_stationary(spec, cfg: ExperimentConfig, run: Run) -> dict:
    p = cfg.params
    if p["steps"] is not None:
        if cfg.seed is None:
            raise UsageError("--seed is required with --steps")
        est = estimate_stationary(spec, p["burn_in"], p["steps"], cfg.seed)
    else:
        est = exact_stationary(spec, p["cap"])
    header = [f"n_{i + 1}" for i in range(spec.n_routes)] + ["prob"]
    run.write_csv("stationary.csv", header,
                  ([*s, float(q)] for s, q in zip(est.support.tolist(), est.probabilities)))
    return {"method": est.method, "support": len(est.support),
            "truncation_or_samples": est.truncation_or_samples}


def _constants(spec, cfg: ExperimentConfig, mapper):
    return compute_constants(spec, seed=cfg.seed, k_aggregate=cfg.params.get("k_rule", "max"),
                             mapper=mapper)


def cmd_constants(spec, cfg: ExperimentConfig, run: Run) -> dict:
    with worker_map(cfg.workers) as mapper:
        c = _constants(spec, cfg, mapper)
    payload = c.to_dict()
    payload["sup_norm"] = {k: v for k, v in sup_norm_constants(c).to_dict().items()
                           if k in ("B", "xi", "K")}
    run.write_json("constants.json", payload)
    return payload


def cmd_drift_scan(spec, cfg: ExperimentConfig, run: Run) -> dict:
    top = cfg.params["max_state"]
    states = np.array([s for s in itertools.product(range(top + 1), repeat=spec.n_routes) if any(s)],
                      dtype=float)
    rates, _, _ = allocate_many(spec, states)
    lhs, rhs = drift_inner_products(spec, states, rates)
    qf = generator_F(spec, states, rates)
    dl = expected_drift_L(spec, states, rates)
    holds = lhs <= rhs + 1e-7
    header = [f"n_{i + 1}" for i in range(spec.n_routes)] + ["lhs", "rhs", "holds", "generator_F", "drift_L"]
    run.write_csv("drift_scan.csv", header,
                  ([*map(int, s), a, b, str(bool(h)).lower(), q, d]
                   for s, a, b, h, q, d in zip(states, lhs, rhs, holds, qf, dl)))
    return {"states": len(states), "all_hold": bool(holds.all())}


def cmd_tail_check(spec, cfg: ExperimentConfig, run: Run) -> dict:
    p = cfg.params
    with worker_map(cfg.workers) as mapper:
        c = _constants(spec, cfg, mapper)
    flow = sup_norm_constants(c)
    est = exact_stationary(spec, p["cap"])
    rows = []
    for level in range(p["lmax"] + 1):
        threshold, bound = tail_bound(flow, level)
        tail = est.tail_sup_norm(threshold)
        rows.append([level, threshold, bound, tail, str(tail <= bound).lower()])
    run.write_csv("tail_check.csv", ["ell", "threshold", "bound", "exact_tail", "dominated"], rows)
    run.write_json("constants.json", c.to_dict())
    return {"all_dominated": all(r[-1] == "true" for r in rows), "B": c.B,
            "probe_set_hash": c.probe_set_hash}


def _excursion_chunk(args):
    spec, seeds, horizon = args
    table = RateTable(spec)
    return [max_excursion(simulate_ctmc(spec, [0] * spec.n_routes, horizon, s, table=table))
            for s in seeds]


def cmd_excursion_check(spec, cfg: ExperimentConfig, run: Run) -> dict:
    p = cfg.params
    seeds = replica_seeds(cfg.seed, p["replicas"])
    size = max(1, len(seeds) // (8 * max(cfg.workers, 1)))
    jobs = [(spec, seeds[i:i + size], p["horizon"]) for i in range(0, len(seeds), size)]
    with worker_map(cfg.workers) as mapper:
        peaks = np.array([x for part in mapper(_excursion_chunk, jobs) for x in part])
    c = _constants_no_probe(spec)
    rows = []
    for b in p["b"]:
        emp = float(np.mean(peaks >= b))
        bound = maximal_bound(spec, c, p["horizon"], b)
        rows.append([b, emp, bound, str(emp <= bound).lower()])
    run.write_csv("excursion.csv", ["b", "empirical", "bound", "dominated"], rows)
    return {"replicas": len(peaks), "all_dominated": all(r[-1] == "true" for r in rows)}


def _constants_no_probe(spec):
    from .lyapunov import BoundConstants, excursion_constants, separable_constant
    from .model import load_profile
    m, big = excursion_constants(spec)
    return BoundConstants(eps=load_profile(spec).gap, Xi=0.0, w=(), K=0.0, xi=0.0, B=0.0, m=m, M=big,
                          Ktilde=separable_constant(spec), sup_norm_factor=1.0, sup_norm_offset=0.0,
                          probe_set_hash="", probe_count=0)


def cmd_fluid(spec, cfg: ExperimentConfig, run: Run) -> dict:
    p = cfg.params
    traj = fms_integrate(spec, p["initial"], p["T"], p["dt"])
    every = max(1, p["every"])
    idx = np.arange(0, len(traj.times), every)
    dist = manifold_distance(spec, traj.states[idx])
    header = ["t"] + [f"n_{i + 1}" for i in range(spec.n_routes)] + ["F", "manifold_distance"]
    run.write_csv("fluid.csv", header,
                  ([traj.times[k], *map(float, traj.states[k]), float(traj.lyapunov_values[k]), float(d)]
                   for k, d in zip(idx, dist)))
    return {"samples": len(idx), "final_state": traj.states[-1], "final_distance": float(dist[-1])}


def cmd_lift(spec, cfg: ExperimentConfig, run: Run) -> dict:
    w = cfg.params["workload"]
    n = lift_many(spec, [w])[0]
    result = {"workload": w, "flows": n}
    run.write_json("lift.json", result)
    return result


def cmd_heavy_traffic(spec, cfg: ExperimentConfig, run: Run) -> dict:
    p = cfg.params
    family = make_family(spec, theta=p["theta"], direction=p["direction"])
    with worker_map(cfg.workers) as mapper:
        report = interchange_experiment(
            family, p["r_list"], p["budget"], cfg.seed, mc_steps=p["mc_steps"],
            ssc_replicas=p["ssc_replicas"], ssc_horizon=p["ssc_horizon"], mapper=mapper)
    run.write_json("heavy_traffic.json", report)
    rows = [[e["r"], e["gap"], e["method"], *e["ks_per_link"], e["ssc_abs"] if e["ssc_abs"] is not None else "",
             e["ssc_mult"] if e["ssc_mult"] is not None else ""] for e in report["entries"]]
    header = ["r", "gap", "method"] + [f"ks_link_{j + 1}" for j in range(spec.n_links)] + ["ssc_abs", "ssc_mult"]
    run.write_csv("heavy_traffic.csv", header, rows)
    return {"r": [e["r"] for e in report["entries"]], "ks_per_link": [e["ks_per_link"] for e in report["entries"]]}


COMMANDS = {
    "allocate": cmd_allocate, "simulate": cmd_simulate, "stationary": cmd_stationary,
    "constants": cmd_constants, "drift-scan": cmd_drift_scan, "tail-check": cmd_tail_check,
    "excursion-check": cmd_excursion_check, "fluid": cmd_fluid, "lift": cmd_lift,
    "heavy-traffic": cmd_heavy_traffic,
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alphafair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", required=True, type=Path, help="network spec JSON")
    common.add_argument("--out", type=Path, default=Path("alphafair-out"), help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=None,
                        help="parallel workers (default: $AFN_WORKERS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    p = add("allocate", "alpha-fair rates for one state")
    p.add_argument("--state", type=vector, required=True)
    p = add("simulate", "sample path of the flow process")
    p.add_argument("--initial", type=vector, default=None)
    p.add_argument("--horizon", type=float, required=True)
    p = add("stationary", "stationary law: exact on a box (--cap) or Monte Carlo (--steps)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--cap", type=int)
    g.add_argument("--steps", type=int)
    p.add_argument("--burn-in", type=int, default=10_000)
    p = add("constants", "bound constants with a certified drift threshold")
    p.add_argument("--k-rule", choices=("max", "min"), default="max")
    p = add("drift-scan", "drift quantities on the box {0..max}^I")
    p.add_argument("--max-state", type=int, default=6)
    p = add("tail-check", "tail bound versus the exact truncated stationary law")
    p.add_argument("--cap", type=int, default=200)
    p.add_argument("--lmax", type=int, default=10)
    p.add_argument("--k-rule", choices=("max", "min"), default="max")
    p = add("excursion-check", "maximal excursion bound versus simulation")
    p.add_argument("--replicas", type=int, default=10_000)
    p.add_argument("--horizon", type=float, default=100.0)
    p.add_argument("--b", type=vector, default=[10.0, 20.0, 50.0])
    p = add("fluid", "integrate a fluid path")
    p.add_argument("--initial", type=vector, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--every", type=int, default=1, help="write every k-th sample")
    p = add("lift", "least-Lyapunov flow vector for a workload")
    p.add_argument("--workload", type=vector, required=True)
    p = add("heavy-traffic", "interchange-of-limits experiment (spec must be critically loaded)")
    p.add_argument("--theta", type=vector, default=None)
    p.add_argument("--direction", type=vector, default=None)
    p.add_argument("--r-list", type=vector, default=[5.0, 10.0, 20.0, 50.0])
    p.add_argument("--budget", type=int, default=4_000_000)
    p.add_argument("--mc-steps", type=int, default=1_000_000)
    p.add_argument("--ssc-replicas", type=int, default=4)
    p.add_argument("--ssc-horizon", type=float, default=1.0)
    return parser


def make_config(args: argparse.Namespace) -> ExperimentConfig:
    skip = {"command", "spec", "out", "seed", "workers", "verbose"}
    params = {k: v for k, v in vars(args).items() if k not in skip}
    workers = args.workers
    if workers is None:
        env = os.environ.get("AFN_WORKERS")
        try:
            workers = int(env) if env else 1
        except ValueError:
            raise UsageError(f"AFN_WORKERS must be an integer, got {env!r}") from None
    if workers < 1:
        raise UsageError("--workers must be at least 1")
    if args.command in RANDOMISED and args.seed is None:
        raise UsageError(f"{args.command} is randomised: pass --seed")
    return ExperimentConfig(args.command, args.spec, args.seed, args.out, workers, params)


def run(config: ExperimentConfig) -> dict:
    started = time.time()
    spec = load_spec(config.spec_path)
    spec_hash = hashlib.sha256(config.spec_path.read_bytes()).hexdigest()
    out = Run(config)
    summary = COMMANDS[config.command](spec, config, out)
    out.manifest(started, spec_hash)
    return summary


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = make_config(args)
        if not config.spec_path.is_file():
            print(f"alphafair: spec file not found: {config.spec_path}", file=sys.stderr)
            return 2
        summary = run(config)
    except UsageError as exc:
        parser.error(str(exc))
    except InvalidSpec as exc:
        print(f"alphafair: invalid spec {args.spec}: {exc}", file=sys.stderr)
        return 2
    except (AlphaFairError, ValueError) as exc:
        print(f"alphafair: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(rounded(summary), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
