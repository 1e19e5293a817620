"""Command-line experiment harness.

``rcnc run``      one config, one or more seeds
``rcnc sweep``    one config over a list of values of one axis
``rcnc analyze``  stability-region and least-cost LP oracles for a config

Exit status is 0 on success, 2 for configuration errors and 3 for runtime
failures (inadmissible flows, solver failures, exhausted traces).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (BackpressurePolicy, StabilityQuery, epsilon_convergence_time,
                       min_cost_flow_lp, stability_margin_lp)
from .config import (ConfigError, ExperimentConfig, apply_axis, build_experiment,
                     bundled_config_path, load_config)
from .lp import OPTIMAL
from .randomized import RandomizedPolicy
from .rcnc import RCNCPolicy, SolverFailure
from .sim import (GreedyPolicy, InadmissibleFlow, MetricsTrace, ZeroPolicy, compute_metrics,
                  run_simulation)
from .traffic import TraceExhausted, mean_rate

log = logging.getLogger("rcnc")

SUMMARY_COLUMNS = ["axis", "value", "seed", "commodity", "slots", "arrival_rate", "target",
                   "timely_throughput", "reliability_ratio", "achieved_reliability",
                   "meets_target", "cost", "total_cost", "drop_rate", "final_gap", "t_eps"]
FLOW_COLUMNS = ["axis", "value", "seed", "edge", "lifetime", "mean_flow"]


def make_policy(cfg: ExperimentConfig, net):
    raw = cfg.raw
    integer = raw["numeric"] == "integer"
    name = raw["policy"]
    if name == "algorithm1":
        return RandomizedPolicy(raw["V"], integer=integer)
    if name in ("rcnc", "rcnc-distributed"):
        return RCNCPolicy(raw["V"], n=raw["n"], K=raw["K"], kappa=raw["kappa"],
                          distributed=name == "rcnc-distributed", integer=integer,
                          window=raw["window"], carry_requests=raw["carry_requests"])
    if name == "backpressure":
        return BackpressurePolicy(raw["V"], integer=integer)
    if name == "greedy":
        return GreedyPolicy()
    return ZeroPolicy()


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return format(float(v), ".12g")


@dataclass
class SeedResult:
    summary: list[list[str]]
    flows: list[list[str]]


def summarize(trace: MetricsTrace, net, cfg: ExperimentConfig, seed: int,
              axis: str = "", value="") -> SeedResult:
    """Summary and mean-flow rows for one run, computed only from ``trace``."""
    raw = cfg.raw
    burn = min(int(raw["burn_in"]), trace.horizon - 1)
    total = float(trace.cost[burn:].sum(axis=1).mean())
    rows = []
    for c, m in enumerate(compute_metrics(trace, burn_in=burn)):
        t_eps = epsilon_convergence_time(trace.delivered[:, c], trace.gamma[c], trace.norm[c],
                                         raw["epsilon"])
        rows.append([axis, _num(value) if value != "" else "", str(seed), m.name,
                     str(trace.horizon), _num(trace.arrivals[burn:, c].mean()), _num(m.target),
                     _num(m.timely_throughput), _num(m.reliability_ratio),
                     _num(m.achieved_reliability), _num(m.meets_target), _num(m.cost),
                     _num(total), _num(m.drop_rate), _num(m.final_gap),
                     "NA" if t_eps is None else str(t_eps)])
    flows = []
    mean = trace.mean_flow
    for e in range(net.num_edges):
        for k in range(net.max_lifetime):
            if net.model_mask[e, k]:
                flows.append([axis, _num(value) if value != "" else "", str(seed),
                              net.edge_label(e), str(k + 1), _num(mean[e, k])])
    return SeedResult(rows, flows)


def manifest(cfg: ExperimentConfig, seeds, extra: dict | None = None) -> dict:
    import numba
    import scipy

    out = {"code_version": __version__, "config": cfg.raw, "seeds": list(seeds),
           "python": sys.version.split()[0], "numpy": np.__version__,
           "scipy": scipy.__version__, "numba": numba.__version__}
    if extra:
        out.update(extra)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_one(cfg: ExperimentConfig, seed: int, out: Path, axis: str = "",
            value="") -> SeedResult:
    """Simulate one seed and write its per-seed artifacts under ``out``."""
    exp = build_experiment(cfg)
    raw = cfg.raw
    policy = make_policy(cfg, exp.net)
    trace = run_simulation(exp.net, exp.spec, policy, raw["horizon"], seed=seed,
                           mode=raw["mode"], numeric=raw["numeric"])
    seed_dir = out / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    if raw["record_trace"]:
        trace.to_csv(seed_dir / "trace.csv")
    if isinstance(policy, RCNCPolicy):
        policy.write_frames(seed_dir / "frames.csv")
    res = summarize(trace, exp.net, cfg, seed, axis, value)
    log.info("seed %d: %s", seed, ", ".join(f"{r[3]} thr={r[7]} cost={r[11]}"
                                            for r in res.summary))
    return res


def _run_job(job):
    cfg, seed, out, axis, value = job
    return run_one(cfg, seed, out, axis, value)


def _execute(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None,
                   workers: int = 1) -> list[SeedResult]:
    """Run every seed of ``cfg``; writes summary.csv, flows.csv and manifest.json."""
    out = Path(out or cfg.raw["output"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", manifest(cfg, cfg.seeds))
    results = _execute([(cfg, s, out, "", "") for s in cfg.seeds], workers)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, [r for res in results for r in res.summary])
    _write_csv(out / "flows.csv", FLOW_COLUMNS, [r for res in results for r in res.flows])
    return results


def sweep(cfg: ExperimentConfig, axis: str, values, out: str | Path | None = None,
          workers: int = 1) -> list[SeedResult]:
    """One summary row per (value, seed, commodity), in value then seed order."""
    out = Path(out or cfg.raw["output"])
    out.mkdir(parents=True, exist_ok=True)
    variants = [(v, apply_axis(cfg, axis, v)) for v in values]
    _write_json(out / "manifest.json", manifest(cfg, cfg.seeds, {
        "sweep": {"axis": axis, "values": list(values)}}))
    jobs = []
    for v, c in variants:
        sub = out / f"{axis}={_num(v)}"
        sub.mkdir(parents=True, exist_ok=True)
        _write_json(sub / "manifest.json", manifest(c, c.seeds))
        jobs += [(c, s, sub, axis, v) for s in c.seeds]
    results = _execute(jobs, workers)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, [r for res in results for r in res.summary])
    _write_csv(out / "flows.csv", FLOW_COLUMNS, [r for res in results for r in res.flows])
    return results


def analyze(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Solve the region and least-cost LPs at the configured mean arrival rates."""
    exp = build_experiment(cfg)
    lam, _ = mean_rate(exp.spec)
    q = StabilityQuery(exp.net, lam)
    region = stability_margin_lp(q)
    cost = min_cost_flow_lp(q)
    result = {"theta": region.theta, "supportable": bool(region.theta >= 1 - 1e-9),
              "min_cost": cost.cost if cost.status == OPTIMAL else None,
              "min_cost_status": cost.status}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for problem, res in (("stability", region), ("min_cost", cost)):
            for e in range(exp.net.num_edges):
                for k in range(exp.net.max_lifetime):
                    if res.x[e, k] != 0:
                        rows.append([problem, _num(region.theta), _num(res.cost),
                                     exp.net.edge_label(e), str(k + 1), _num(res.x[e, k])])
        _write_csv(out / "analysis.csv", ["problem", "theta", "cost", "edge", "lifetime", "flow"],
                   rows)
        _write_json(out / "manifest.json", manifest(cfg, [], {"analysis": result}))
    return result


def _parse_values(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated list of numbers, got {text!r}")
    return [int(v) if v.is_integer() else v for v in vals]


def _resolve(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists() and path.parent == Path(".") and path.suffix in ("", ".json"):
        try:
            path = bundled_config_path(args.config)
        except ConfigError:
            pass  # let load_config report the missing file
    cfg = load_config(path)
    updates = {}
    if args.seed:
        updates["seeds"] = args.seed
    if args.slots is not None:
        updates["horizon"] = args.slots
    if getattr(args, "out", None):
        updates["output"] = args.out
    return cfg.with_values(**updates) if updates else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcnc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-seed progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, metavar="PATH",
                        help="experiment config: a JSON path, a bundled config name, or a run "
                             "manifest to replay")
        sp.add_argument("--seed", type=int, action="append", metavar="N",
                        help="seed to run; repeatable (default: seeds from the config)")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--slots", type=int, metavar="T", help="override the horizon")

    run = sub.add_parser("run", help="simulate a config")
    common(run)
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sw = sub.add_parser("sweep", help="simulate a config over values of one axis")
    common(sw)
    sw.add_argument("--axis", required=True, metavar="NAME",
                    help="V, lifetime_slack (alias dl), slot_scale or lambda")
    sw.add_argument("--values", required=True, metavar="CSV", help="comma-separated values")
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    an = sub.add_parser("analyze", help="solve the stability and least-cost LPs")
    common(an)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        if args.slots is not None and args.slots < 1:
            raise ConfigError("--slots must be >= 1")
        if args.command == "run":
            results = run_experiment(cfg, workers=args.jobs)
            for res in results:
                for row in res.summary:
                    print(f"seed={row[2]} commodity={row[3]} throughput={row[7]} "
                          f"target={row[6]} cost={row[11]} t_eps={row[15]}")
        elif args.command == "sweep":
            values = _parse_values(args.values)
            results = sweep(cfg, args.axis, values, workers=args.jobs)
            for res in results:
                for row in res.summary:
                    print(f"{row[0]}={row[1]} seed={row[2]} commodity={row[3]} "
                          f"throughput={row[7]} cost={row[11]}")
        else:
            res = analyze(cfg, args.out)
            print(json.dumps(res, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InadmissibleFlow as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except (SolverFailure, TraceExhausted, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
