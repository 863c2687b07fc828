"""Command-line workflows: analyze, optimize, sweep, simulate, bpr-report.

Every command writes CSV files (plus a small JSON run record) into the output
directory.  Every CSV row starts with the scenario hash and the mode so rows
from different runs can be concatenated safely.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import expected_bpr_deviation, marginal_table, mva, mva_sweep
from .lp import BACKENDS
from .network import NetworkValidationError, RoutingPolicy, shortest_path_policy
from .optimizer import (
    BASELINE,
    MODES,
    InfeasibleLPError,
    analyze_policy,
    decompose_to_policy,
    poisson_cdf,
    solve_a_oscarr,
)
from .scenario import ScenarioDocument, ScenarioError, load_scenario
from .simulator import FAMILIES, SimConfig, simulate, write_trace_csv
from .traffic import fold_check, utilization_profile

OUT_DIR_ENV = "BCMP_AMOD_OUT_DIR"
EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4
POLICY_SCHEMA_VERSION = 1

COLUMNS = {
    "analyze": ["scenario_hash", "mode", "m", "queue_id", "kind", "gamma", "rho",
                "throughput", "mean_vehicles", "availability"],
    "optimize": ["scenario_hash", "mode", "epsilon", "quantity", "item", "value"],
    "sweep": ["scenario_hash", "mode", "m", "metric", "queue_id", "value"],
    "simulate": ["scenario_hash", "mode", "seed", "m", "family", "metric", "queue_id", "value", "half_width"],
    "compare": ["scenario_hash", "mode", "seed", "m", "family", "metric", "queue_id",
                "analytic", "empirical", "half_width", "inside_ci"],
    "bpr": ["scenario_hash", "mode", "epsilon", "origin", "destination",
            "free_flow_time", "expected_time", "relative_deviation"],
}

HELP = {
    "analyze": "Traffic equations and exact MVA for a routing policy at fleet size --fleet.",
    "optimize": "Solve the asymptotic routing/rebalancing LP and write the decomposed policy.",
    "sweep": "MVA metrics for a list of fleet sizes as a tidy long table.",
    "simulate": "Discrete-event simulation with an analytic-vs-empirical comparison.",
    "bpr-report": "Expected BPR travel-time increase per customer class in both modes.",
}

EPILOG = {
    "analyze": "writes analyze.csv with columns: " + ",".join(COLUMNS["analyze"]),
    "optimize": ("writes optimize.csv with columns: " + ",".join(COLUMNS["optimize"])
                 + "; quantities: objective, rebalancing_rate, road_load, capacity, capacity_bound,"
                 " binding, exceedance.  Also writes policy.json."),
    "sweep": ("writes sweep.csv with columns: " + ",".join(COLUMNS["sweep"])
              + "; metrics: availability, vehicles_station, vehicles_stations_total,"
              " vehicles_roads_customer, vehicles_roads_rebalancing, vehicles_roads_total,"
              " road_max_mean, road_max_std, road_max_exceedance, g_ratio."),
    "simulate": ("writes simulate.csv with columns: " + ",".join(COLUMNS["simulate"])
                 + " and compare.csv with columns: " + ",".join(COLUMNS["compare"])
                 + "; --trace also writes trace.csv with columns: time,queueId,occupancy."),
    "bpr-report": "writes bpr_report.csv with columns: " + ",".join(COLUMNS["bpr"]),
}


def _num(x) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    return repr(x)


class _Table:
    def __init__(self, path: Path, columns):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(columns)
        self.n = len(columns)

    def row(self, *values):
        assert len(values) == self.n
        self.w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in values])

    def close(self):
        self.fh.close()


# policy bundles -----------------------------------------------------------

def policy_document(doc: ScenarioDocument, network, policy: RoutingPolicy, mode: str, epsilon: float) -> dict:
    rates = network.rebalancing_rates()
    return {
        "schema_version": POLICY_SCHEMA_VERSION,
        "scenario_hash": doc.hash,
        "mode": mode,
        "epsilon": epsilon,
        "rebalancing_rates": [{"origin": s, "destination": t, "rate": float(r)}
                              for (s, t), r in sorted(rates.items())],
        **policy.to_document(network),
    }


def read_policy_document(doc: ScenarioDocument, data: dict):
    """Return (network with rebalancing rates, policy, mode)."""
    if data.get("schema_version") != POLICY_SCHEMA_VERSION:
        raise NetworkValidationError("policy document has an unsupported schema_version")
    if data.get("scenario_hash") != doc.hash:
        raise NetworkValidationError(
            f"policy was built for scenario {data.get('scenario_hash')}, not {doc.hash}")
    try:
        rates = {(r["origin"], r["destination"]): float(r["rate"]) for r in data["rebalancing_rates"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkValidationError(f"malformed rebalancing rates in policy document: {exc!r}") from exc
    net = doc.network.with_rebalancing_rates(rates)
    policy = RoutingPolicy.from_document(net, data)
    policy.validate(net)
    return net, policy, data.get("mode", BASELINE)


def _optimized(doc, mode, epsilon, backend):
    sol = solve_a_oscarr(doc.network, mode, epsilon, backend)
    return sol, decompose_to_policy(sol)


def _resolve_policy(args, doc):
    if args.policy == "shortest-path":
        return doc.network, shortest_path_policy(doc.network), args.mode
    if args.policy:
        try:
            data = json.loads(Path(args.policy).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise NetworkValidationError(f"cannot read policy document {args.policy}: {exc}") from exc
        return read_policy_document(doc, data)
    sol, policy = _optimized(doc, args.mode, args.epsilon, args.backend)
    return sol.network, policy, args.mode


def _parse_m_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise NetworkValidationError(f"fleet sizes must be positive integers: {text!r}")
    return sorted(set(out))


def _write_run_record(out: Path, command: str, args, doc: ScenarioDocument, mode: str, files):
    record = {
        "command": command,
        "tool_version": __version__,
        "scenario": doc.name,
        "scenario_hash": doc.hash,
        "mode": mode,
        "epsilon": args.epsilon,
        "seed": args.seed,
        "fleet": args.fleet,
        "files": sorted(files),
    }
    (out / f"run_{command.replace('-', '_')}.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


# commands -----------------------------------------------------------------

def cmd_analyze(args, doc, out: Path):
    net, policy, mode = _resolve_policy(args, doc)
    sol = analyze_policy(net, policy)
    fold = fold_check(sol, net)
    prof = utilization_profile(sol, net)
    m = args.fleet
    rep = mva(sol, m)
    t = _Table(out / "analyze.csv", COLUMNS["analyze"])
    gamma = sol.gamma
    for i, q in enumerate(net.queues):
        t.row(doc.hash, mode, m, q.id, q.kind, float(gamma[i]), float(prof.rho[i]),
              float(rep.throughput[i]), float(rep.queue_length[i]), float(rep.availability[i]))
    t.close()
    print(f"traffic residual {sol.residual:.3e}, folding residual {fold.max_rel:.3e}, "
          f"bottlenecks {[net.queues[i].id for i in prof.bottlenecks]}")
    return mode, ["analyze.csv"]


def cmd_optimize(args, doc, out: Path):
    sol, policy = _optimized(doc, args.mode, args.epsilon, args.backend)
    net = sol.network
    roads = net.road_indices
    C = net.capacities[roads]
    binding = set(sol.binding.tolist())
    t = _Table(out / "optimize.csv", COLUMNS["optimize"])
    key = (doc.hash, args.mode, float(args.epsilon))
    t.row(*key, "objective", "*", sol.objective)
    for (s, d), r in sorted(net.rebalancing_rates().items()):
        t.row(*key, "rebalancing_rate", f"{s}->{d}", float(r))
    for r, j in enumerate(roads):
        rid = net.queues[j].id
        t.row(*key, "road_load", rid, float(sol.loads[r]))
        t.row(*key, "capacity", rid, float(C[r]))
        t.row(*key, "capacity_bound", rid, float(sol.capacity_bounds[r]))
        t.row(*key, "binding", rid, int(r in binding))
        t.row(*key, "exceedance", rid, 1.0 - poisson_cdf(C[r], sol.loads[r]))
    t.close()
    pdoc = policy_document(doc, net, policy, args.mode, float(args.epsilon))
    (out / "policy.json").write_text(json.dumps(pdoc, indent=1, sort_keys=True) + "\n")
    print(f"objective {sol.objective!r}; binding roads {[net.queues[roads[r]].id for r in sorted(binding)]}")
    return args.mode, ["optimize.csv", "policy.json"]


def cmd_sweep(args, doc, out: Path):
    net, policy, mode = _resolve_policy(args, doc)
    sol = analyze_policy(net, policy)
    ms = _parse_m_list(args.m_list)
    sweep = mva_sweep(sol, max(ms))
    roads = net.road_indices
    stations = np.flatnonzero(net.is_station)
    rebal = net.is_rebalancing
    top = int(roads[np.argmax(sol.gamma[roads])])
    top_id = net.queues[top].id
    top_C = net.capacities[top]
    marg = marginal_table(sol, top, max(ms))
    t = _Table(out / "sweep.csv", COLUMNS["sweep"])
    for m in ms:
        rep = sweep.report(m)
        key = (doc.hash, mode, m)
        for i in stations:
            t.row(*key, "availability", net.queues[i].id, float(rep.availability[i]))
        for i in stations:
            t.row(*key, "vehicles_station", net.queues[i].id, float(rep.queue_length[i]))
        t.row(*key, "vehicles_stations_total", "*", float(rep.queue_length[stations].sum()))
        Lk = rep.queue_length_class[roads]
        t.row(*key, "vehicles_roads_customer", "*", float(Lk[:, ~rebal].sum()))
        t.row(*key, "vehicles_roads_rebalancing", "*", float(Lk[:, rebal].sum()))
        t.row(*key, "vehicles_roads_total", "*", float(rep.queue_length[roads].sum()))
        p = marg[m]
        x = np.arange(len(p))
        mean = float(x @ p)
        std = float(np.sqrt(max(((x - mean) ** 2) @ p, 0.0)))
        t.row(*key, "road_max_mean", top_id, mean)
        t.row(*key, "road_max_std", top_id, std)
        t.row(*key, "road_max_exceedance", top_id, float(p[x > top_C].sum()))
        t.row(*key, "g_ratio", "*", float(rep.g_ratio))
    t.close()
    return mode, ["sweep.csv"]


def cmd_simulate(args, doc, out: Path):
    net, policy, mode = _resolve_policy(args, doc)
    cfg = SimConfig(fleet_size=args.fleet, horizon=args.horizon, warmup=args.warmup, seed=args.seed,
                    family=args.family, sigma=args.sigma, n_batches=args.batches,
                    sampling_interval=args.sampling_interval)
    rep = simulate(net, policy, cfg)
    sol = analyze_policy(net, policy)
    ana = mva(sol, args.fleet)
    key = (doc.hash, mode, args.seed, args.fleet, args.family)
    stations = np.flatnonzero(net.is_station)
    t = _Table(out / "simulate.csv", COLUMNS["simulate"])
    nan = float("nan")
    for s in stations:
        sid = net.queues[s].id
        t.row(*key, "availability", sid, float(rep.availability[s]), float(rep.availability_hw[s]))
        t.row(*key, "service_rate", sid, float(rep.service_rate[s]), nan)
        t.row(*key, "arrivals", sid, int(rep.arrivals[s]), nan)
        t.row(*key, "served", sid, int(rep.served[s]), nan)
        t.row(*key, "lost", sid, int(rep.lost[s]), nan)
    for i, q in enumerate(net.queues):
        t.row(*key, "occupancy_mean", q.id, float(rep.occupancy_mean[i]), float(rep.occupancy_hw[i]))
        t.row(*key, "occupancy_var", q.id, float(rep.occupancy_var[i]), nan)
    t.row(*key, "rebalancing_trip_share", "*", rep.rebalancing_trip_share, nan)
    t.row(*key, "rebalancing_vehicle_share", "*", rep.rebalancing_vehicle_share, nan)
    t.close()

    c = _Table(out / "compare.csv", COLUMNS["compare"])
    inside = total = 0
    for s in stations:
        a, e, h = float(ana.availability[s]), float(rep.availability[s]), float(rep.availability_hw[s])
        ok = abs(a - e) <= h
        inside += ok
        total += 1
        c.row(*key, "availability", net.queues[s].id, a, e, h, int(ok))
    for j in net.road_indices:
        if not sol.total[j] > 0:
            continue
        a, e, h = float(ana.queue_length[j]), float(rep.occupancy_mean[j]), float(rep.occupancy_hw[j])
        ok = abs(a - e) <= h
        inside += ok
        total += 1
        c.row(*key, "occupancy", net.queues[j].id, a, e, h, int(ok))
    c.close()
    files = ["simulate.csv", "compare.csv"]
    if args.trace:
        write_trace_csv(rep, out / "trace.csv")
        files.append("trace.csv")
    print(f"{inside}/{total} comparison cells inside the 95% interval")
    return mode, files


def cmd_bpr_report(args, doc, out: Path):
    t = _Table(out / "bpr_report.csv", COLUMNS["bpr"])
    for mode in MODES:
        sol = solve_a_oscarr(doc.network, mode, args.epsilon, args.backend)
        net = sol.network
        dev = expected_bpr_deviation(net, sol.flows, doc.delta, doc.beta)
        roads = net.road_indices
        T = net.travel_times[roads]
        for k, d in sorted(dev.items()):
            c = net.classes[k]
            if c.rebalancing:
                continue
            base = float((sol.flows[roads, k] / c.rate) @ T)
            t.row(doc.hash, mode, float(args.epsilon), c.origin, c.destination, base, base * (1.0 + d), d)
    t.close()
    return "both", ["bpr_report.csv"]


COMMANDS = {
    "analyze": cmd_analyze,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "bpr-report": cmd_bpr_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--scenario", required=True,
                   help="scenario JSON path or bundled name (two_station_symmetric, two_station_asymmetric, grid5x5)")
    g.add_argument("--mode", choices=MODES, default=BASELINE, help="capacity constraint mode")
    g.add_argument("--epsilon", type=float, default=None,
                   help="tolerated capacity-exceedance probability (default: scenario value)")
    g.add_argument("--fleet", type=int, default=40, help="fleet size m")
    g.add_argument("--seed", type=int, default=0, help="simulation seed")
    g.add_argument("--out-dir", default=None, help=f"output directory (default: ${OUT_DIR_ENV} or .)")
    g.add_argument("--backend", choices=sorted(BACKENDS), default="highs", help="LP solver backend")

    p = argparse.ArgumentParser(prog="amod", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name], epilog=EPILOG[name])
        if name in ("analyze", "sweep", "simulate"):
            sp.add_argument("--policy", default=None,
                            help="policy.json from optimize, or 'shortest-path'; default: optimize first")
        if name == "sweep":
            sp.add_argument("--m-list", default="1-200", help="fleet sizes, e.g. '1-200' or '10,20,40'")
        if name == "simulate":
            sp.add_argument("--horizon", type=float, default=1e5)
            sp.add_argument("--warmup", type=float, default=None, help="default: 10%% of the horizon")
            sp.add_argument("--family", choices=sorted(FAMILIES), default="exponential")
            sp.add_argument("--sigma", type=float, default=0.5, help="lognormal shape parameter")
            sp.add_argument("--batches", type=int, default=20)
            sp.add_argument("--sampling-interval", type=float, default=None)
            sp.add_argument("--trace", action="store_true", help="also write trace.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_scenario(args.scenario)
        if args.epsilon is None:
            args.epsilon = doc.epsilon
        if not 0.0 < args.epsilon < 1.0:
            raise ScenarioError(f"epsilon must lie in (0, 1), got {args.epsilon}")
        if args.fleet < 1:
            raise ScenarioError("fleet size must be at least 1")
        out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".")
        out.mkdir(parents=True, exist_ok=True)
        mode, files = COMMANDS[args.command](args, doc, out)
        _write_run_record(out, args.command, args, doc, mode, files)
    except InfeasibleLPError as exc:
        print(f"error: infeasible LP: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ScenarioError, NetworkValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
