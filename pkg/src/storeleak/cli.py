"""Experiment harness: named end-to-end runs with seeded noise injection and
CSV/JSON artifacts.

Each experiment writes a trace artifact plus ``<name>_summary.json`` into
the output directory. Summaries contain no wall-clock data, so a run is
byte-reproducible from (experiment, config, seed). Exit codes: 0 success,
1 configuration error, 2 attack infeasible.
"""

from __future__ import annotations

import argparse
import json
import math
import random
import sys
from pathlib import Path

from . import analysis, cache, dram, leak
from .addrspace import AddressSpace, AllocPolicy, new_address_space
from .config import Presets, default_presets, load_presets
from .errors import (AttackInfeasibleError, InvalidConfigError, ScanBudgetError,
                     StoreleakError)
from .mob import Mob

SCHEMA_VERSION = 1
EXPERIMENTS = ("scan", "evset", "colocate", "contiguous", "rowhammer",
               "depth", "correlate", "fragsweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="storeleak", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a named experiment")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--arch", default="kabylake-r", help="microarchitecture preset")
    run.add_argument("--dram", default="a", help="DRAM mapping preset or alias")
    run.add_argument("--cache", default="i7-4770", help="cache geometry preset")
    run.add_argument("--dimm", default="M378B5273DH0-CK0:ivybridge",
                     help="DRAM module preset for the flip model")
    run.add_argument("--pages", type=int, default=4096)
    run.add_argument("--trials", type=int, default=10000)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--noise-sigma", type=float, default=0.0)
    run.add_argument("--repeats", type=int, default=0,
                     help="scan repeats for noisy runs (0 = auto)")
    run.add_argument("--frames", type=int, default=1 << 18,
                     help="simulated physical frames")
    run.add_argument("--window", type=int, default=leak.DEFAULT_WINDOW)
    run.add_argument("--engine", choices=("mob", "fast"), default=None)
    run.add_argument("--out", default="runs")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--config", default=None, help="extra preset file")
    run.add_argument("--hammers", type=int, default=500_000_000)
    run.add_argument("--rounds", type=int, default=1,
                     help="eviction-test repeats for the aliased-pool search")
    run.add_argument("--flip-probability", type=float, default=0.0,
                     help="per-eviction-test noise for evset")
    run.add_argument("--pool-target", type=int, default=115)
    run.add_argument("--algos", default="classic,improved,aa")
    run.add_argument("--utilizations",
                     default="0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,0.8,0.7,0.6")
    run.add_argument("--fragmented", action="store_true",
                     help="pre-fragment memory before the rowhammer pipeline")
    run.add_argument("--mixed-fraction", type=float, default=0.5)
    return parser


def _apply_noise(trace: leak.TimingTrace, sigma: float,
                 rng: random.Random) -> leak.TimingTrace:
    if sigma <= 0:
        return trace
    return trace.with_cycles([e.cycles + rng.gauss(0.0, sigma) for e in trace.entries])


def _scan_with_noise(space: AddressSpace, mob: Mob, pages: int, window: int,
                     sigma: float, repeats: int, seed: int,
                     engine: str) -> leak.TimingTrace:
    rng = random.Random(seed ^ 0x5EEDC0DE)
    traces = []
    for _ in range(max(1, repeats)):
        mob.drain_all()
        trace = leak.aliasing_scan(space, mob, pages, window, engine=engine)
        traces.append(_apply_noise(trace, sigma, rng))
    return traces[0] if len(traces) == 1 else leak.median_traces(traces)


def _write_trace(trace: leak.TimingTrace, out: Path, name: str, fmt: str) -> str:
    if fmt == "csv":
        path = out / f"{name}_trace.csv"
        with path.open("w") as fh:
            trace.to_csv(fh)
    else:
        path = out / f"{name}_trace.json"
        rows = [{"page": e.page, "cycles": e.cycles,
                 "stalls_ldm_pending": e.counters.stalls_ldm_pending,
                 "address_alias": e.counters.address_alias}
                for e in trace.entries]
        path.write_text(json.dumps(rows, sort_keys=True))
    return path.name


def _write_rows(rows: list[dict], out: Path, name: str, fmt: str) -> str:
    if fmt == "csv":
        path = out / f"{name}_trace.csv"
        with path.open("w") as fh:
            if rows:
                cols = list(rows[0])
                fh.write(",".join(cols) + "\n")
                for row in rows:
                    fh.write(",".join(f"{row[c]:g}" if isinstance(row[c], float)
                                      else str(row[c]) for c in cols) + "\n")
    else:
        path = out / f"{name}_trace.json"
        path.write_text(json.dumps(rows, sort_keys=True))
    return path.name


# -- experiments ------------------------------------------------------------


def run_scan(args, presets: Presets, out: Path) -> dict:
    params = presets.get_microarch(args.arch)
    space = new_address_space(args.frames, args.seed)
    space.alloc_pages(args.pages + 1, AllocPolicy.fragmented(args.seed))
    mob = Mob(params)
    engine = args.engine or "mob"
    repeats = args.repeats or (5 if args.noise_sigma > 0 else 1)
    trace = _scan_with_noise(space, mob, args.pages, args.window,
                             args.noise_sigma, repeats, args.seed, engine)
    margin, dec_margin, level_tol = leak.noisy_detect_margins(
        args.noise_sigma, repeats)
    report = leak.detect_peaks(trace, margin=margin, decrease_margin=dec_margin,
                               level_tolerance=level_tol)
    spacings = report.spacings()
    summary = {
        "arch": params.name,
        "pages": args.pages,
        "window": args.window,
        "peaks": len(report.peak_pages),
        "peak_pages": report.peak_pages,
        "runs": [{"start": r.start, "end": r.end, "steps": r.step_count,
                  "truncated": r.truncated_start or r.truncated_end}
                 for r in report.runs],
        "step_counts": report.step_counts,
        "mean_spacing": (sum(spacings) / len(spacings)) if spacings else None,
        "trace_file": _write_trace(trace, out, "scan", args.format),
    }
    return summary


def run_correlate(args, presets: Presets, out: Path) -> dict:
    params = presets.get_microarch(args.arch)
    space = new_address_space(args.frames, args.seed)
    space.alloc_pages(args.pages + 1, AllocPolicy.fragmented(args.seed))
    mob = Mob(params)
    engine = args.engine or "mob"
    trace = leak.aliasing_scan(space, mob, args.pages, args.window, engine=engine)
    rng = random.Random(args.seed ^ 0x5EEDC0DE)
    trace = _apply_noise(trace, args.noise_sigma, rng)
    report = analysis.correlate_counters(trace, params.steps)
    scenario = leak.latency_class_samples(Mob(params))
    if args.noise_sigma > 0:
        scenario = {k: [c + rng.gauss(0.0, args.noise_sigma) for c in v]
                    for k, v in scenario.items()}
    means = analysis.histogram_classes(scenario)
    return {
        "arch": params.name,
        "pages": args.pages,
        "correlations": report.as_dict(),
        "class_means": {k: means[k] for k in sorted(means)},
        "trace_file": _write_trace(trace, out, "correlate", args.format),
    }


def run_evset(args, presets: Presets, out: Path) -> dict:
    geometry = presets.get_cache(args.cache)
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    results = {}
    rows = []
    for algo in algos:
        space = new_address_space(args.frames, args.seed)
        if algo == "classic":
            res = cache.find_eviction_sets_classic(geometry, space, args.pages,
                                                   seed=args.seed)
        elif algo == "improved":
            res = cache.find_eviction_sets_improved(geometry, space, args.pages,
                                                    seed=args.seed)
        elif algo == "aa":
            params = presets.get_microarch(args.arch)
            mob = Mob(params)
            stats: dict = {}
            pool = leak.recover_aliased_pool(space, mob, args.pool_target,
                                             window=args.window, seed=args.seed,
                                             stats=stats)
            res = cache.find_eviction_sets_aa(geometry, space, pool,
                                              rounds=args.rounds,
                                              flip_probability=args.flip_probability,
                                              seed=args.seed)
            results["aa_pages_scanned"] = stats["pages_scanned"]
            results["aa_scan_per_aliased"] = stats["pages_scanned"] / len(pool)
        else:
            raise InvalidConfigError(f"unknown eviction algorithm {algo!r}")
        results[algo] = {
            "tests": res.stats.tests,
            "accesses": res.stats.accesses,
            "base_sets": res.stats.base_sets,
            "success": res.stats.success,
            "aborted": res.stats.aborted,
        }
        rows.append({"algo": algo, "tests": res.stats.tests,
                     "base_sets": res.stats.base_sets,
                     "success": int(res.stats.success)})
        results.setdefault("sets_preview", [s.as_dict() for s in res.sets[:4]])
    results["trace_file"] = _write_rows(rows, out, "evset", args.format)
    return results


def run_colocate(args, presets: Presets, out: Path) -> dict:
    geometry = presets.get_dram(args.dram)
    space = new_address_space(args.frames, args.seed)
    p = dram.colocation_probability(geometry, space, args.trials, args.seed)
    rows = [{"dram": geometry.name, "trials": args.trials, "hit_fraction": p}]
    return {
        "dram": geometry.name,
        "unknown_bits": geometry.unknown_bits,
        "trials": args.trials,
        "probability": p,
        "expected": 0.5 ** geometry.unknown_bits,
        "trace_file": _write_rows(rows, out, "colocate", args.format),
    }


def run_contiguous(args, presets: Presets, out: Path) -> dict:
    params = presets.get_microarch(args.arch)
    space = new_address_space(args.frames, args.seed)
    policy = AllocPolicy.mixed(args.seed, fraction=args.mixed_fraction)
    space.alloc_pages(args.pages + 1, policy)
    mob = Mob(params)
    engine = args.engine or "fast"
    trace = leak.aliasing_scan(space, mob, args.pages, args.window, engine=engine)
    regions = dram.detect_contiguous(trace)
    return {
        "arch": params.name,
        "pages": args.pages,
        "regions": [{"start_page": r.start_page, "length_pages": r.length_pages,
                     "peaks": len(r.peak_pages)} for r in regions],
        "trace_file": _write_trace(trace, out, "contiguous", args.format),
    }


def run_rowhammer(args, presets: Presets, out: Path) -> dict:
    params = presets.get_microarch(args.arch)
    geometry = presets.get_dram(args.dram)
    flippy = presets.dimm_flippy.get(args.dimm)
    if flippy is None:
        raise InvalidConfigError(f"unknown DIMM preset {args.dimm!r}")
    flip_model = dram.FlipModel(seed=args.seed,
                                susceptible_fraction=2e-3 if flippy else 0.0)
    space = new_address_space(args.frames, args.seed)
    if args.fragmented:
        space.set_utilization(0.93, seed=args.seed)
    mob = Mob(params)
    engine = args.engine or "mob"
    report = dram.double_sided_rowhammer(space, mob, geometry, flip_model,
                                         args.hammers, probe_pages=args.pages,
                                         window=args.window, engine=engine)
    rows = [f.as_dict() for f in report.flips]
    return {
        "arch": params.name,
        "dram": geometry.name,
        "dimm": args.dimm,
        "report": report.as_dict(),
        "contiguous_bytes": report.region_length_pages * 4096,
        "trace_file": _write_rows(rows, out, "rowhammer", args.format),
    }


def run_depth(args, presets: Presets, out: Path) -> dict:
    params = presets.get_microarch(args.arch)
    counts = [0, 125, 250, 500, 750, 1000, 1500, 2000, 3000, 4000]
    result = {}
    rows = []
    for kind in ("nop", "add", "leal"):
        probe = leak.depth_probe(Mob(params), kind, counts)
        result[kind] = [{"count": c, "steps": s} for c, s in probe]
        rows.extend({"filler": kind, "count": c, "steps": s} for c, s in probe)
    return {
        "arch": params.name,
        "depth": result,
        "trace_file": _write_rows(rows, out, "depth", args.format),
    }


def run_fragsweep(args, presets: Presets, out: Path) -> dict:
    params = presets.get_microarch(args.arch)
    try:
        utils = [float(u) for u in args.utilizations.split(",") if u.strip()]
    except ValueError:
        raise InvalidConfigError("--utilizations must be a comma list of fractions")
    space = new_address_space(args.frames, args.seed)
    mob = Mob(params)
    engine = args.engine or "fast"
    records = dram.fragmentation_sweep(space, mob, utils, seed=args.seed,
                                       window=args.window, engine=engine)
    rows = [{"utilization": r.utilization, "oracle": int(r.oracle_available),
             "leak": int(r.leak_available), "largest_run": r.largest_free_run}
            for r in records]
    return {
        "arch": params.name,
        "utilizations": utils,
        "records": rows,
        "trace_file": _write_rows(rows, out, "fragsweep", args.format),
    }


_RUNNERS = {
    "scan": run_scan,
    "evset": run_evset,
    "colocate": run_colocate,
    "contiguous": run_contiguous,
    "rowhammer": run_rowhammer,
    "depth": run_depth,
    "correlate": run_correlate,
    "fragsweep": run_fragsweep,
}


def run_experiment(args, presets: Presets) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = _RUNNERS[args.experiment](args, presets, out)
    summary["schema_version"] = SCHEMA_VERSION
    summary["experiment"] = args.experiment
    summary["seed"] = args.seed
    summary["noise_sigma"] = args.noise_sigma
    path = out / f"{args.experiment}_summary.json"
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        presets = load_presets(args.config) if args.config else default_presets()
        summary = run_experiment(args, presets)
    except (AttackInfeasibleError, ScanBudgetError) as exc:
        print(f"attack infeasible: {exc}", file=sys.stderr)
        return 2
    except StoreleakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    keys = [k for k in ("peaks", "probability", "regions", "contiguous_bytes")
            if k in summary]
    note = ", ".join(f"{k}={summary[k]}" for k in keys)
    print(f"{args.experiment}: ok ({note})" if note else f"{args.experiment}: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
