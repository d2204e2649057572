"""Command-line entry point: train, eval, bench, plot, oracle-check.

All outputs land in --out: metrics CSVs, summary/manifest JSON, SVG
plots. Every output embeds the resolved config hash. With
--no-timestamp, wall-clock columns are written as 0 and SVG date
metadata is suppressed, which makes reruns byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import cellspace, engine, jsord, lp as lpmod, nmac, topology, workload
from .domain import DemandTensor, ServiceClass


ENV_PREFIX = "EDGEMATRIX_"


class CliError(RuntimeError):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class RunManifest:
    config_path: str
    config_hash: str
    seed: int
    subcommand: str
    out_dir: str

    def write(self, out: Path) -> None:
        with open(out / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def config_hash(cfg: engine.SimConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _env_default(name: str, fallback):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None:
        return fallback
    if isinstance(fallback, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(fallback, int):
        return int(raw)
    return raw


def load_config(path: str | None, seed: int | None) -> engine.SimConfig:
    if path is None:
        cfg = engine.SimConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}", exit_code=2)
        with open(p) as fh:
            try:
                cfg = engine.SimConfig.from_dict(json.load(fh))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise CliError(f"malformed config {p}: {exc}", exit_code=2) from exc
    if seed is not None:
        cfg.seed = seed
    return cfg


# -- output helpers -----------------------------------------------------------

def write_metrics_csv(path: Path, rows: list[dict], P: int, cfg_hash: str,
                      no_timestamp: bool) -> None:
    header = engine.metrics_header(P)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            out = []
            for col in header:
                v = row.get(col, 0.0)
                if col == "wall_ms" and no_timestamp:
                    v = 0.0
                out.append(f"{v:.9g}" if isinstance(v, float) else v)
            writer.writerow(out)


def write_summary(out: Path, cfg: engine.SimConfig, cfg_hash: str,
                  extra: dict) -> None:
    payload = {"config": cfg.to_dict(), "config_hash": cfg_hash,
               "seed": cfg.seed}
    payload.update(extra)
    with open(out / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- train / eval -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        cfg.validate(for_training=True)
    except engine.EngineError as exc:
        raise CliError(f"config validation: {exc}", exit_code=2) from exc
    out = _prepare_out(args)
    h = config_hash(cfg)
    RunManifest(args.config or "<defaults>", h, cfg.seed, "train", str(out)).write(out)
    centralized = args.baseline != "independent"
    try:
        metrics, trainer, reward_log = engine.run_experiment(
            cfg, "train", args.episodes, centralized=centralized)
    except (nmac.NonFiniteLoss, nmac.NonFiniteGradient) as exc:
        raise CliError(f"training diverged: {exc}", exit_code=1) from exc
    per_episode = engine.aggregate_episodes(metrics, cfg.channel_count_P)
    write_metrics_csv(out / "metrics_train.csv", per_episode, cfg.channel_count_P,
                      h, args.no_timestamp)
    ckpt = trainer.to_dict()
    ckpt["config_hash"] = h
    with open(out / "checkpoint.json", "w") as fh:
        json.dump(ckpt, fh, sort_keys=True)
    write_summary(out, cfg, h, {"mode": "train", "episodes": args.episodes,
                                "reward_log": reward_log})
    print(f"train: {args.episodes} episodes, final mean reward "
          f"{reward_log[-1]:.4f}, outputs in {out}")
    return 0


def _load_policy(args, cfg: engine.SimConfig):
    if args.checkpoint:
        p = Path(args.checkpoint)
        if not p.exists():
            raise CliError(f"checkpoint not found: {p}", exit_code=2)
        with open(p) as fh:
            data = json.load(fh)
        trainer = nmac.NmacTrainer.from_dict(data)
        state = engine.SimulationState(cfg)
        if trainer.state_dim != state.schema.size or trainer.n_agents != cfg.node_count:
            raise nmac.ShapeMismatch(
                f"checkpoint shape ({trainer.n_agents} agents, state {trainer.state_dim}) "
                f"does not fit config ({cfg.node_count} agents, state {state.schema.size})")
        return trainer.policy(), "checkpoint"
    kind = args.baseline or "random"
    return nmac.baseline_policy(kind, cfg.seed), kind


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        cfg.validate()
    except engine.EngineError as exc:
        raise CliError(f"config validation: {exc}", exit_code=2) from exc
    out = _prepare_out(args)
    h = config_hash(cfg)
    RunManifest(args.config or "<defaults>", h, cfg.seed, "eval", str(out)).write(out)
    policy, label = _load_policy(args, cfg)
    metrics, _, reward_log = engine.run_experiment(cfg, "eval", args.episodes,
                                                   policy=policy)
    path = out / f"metrics_eval_{label}.csv"
    per_episode = engine.aggregate_episodes(metrics, cfg.channel_count_P)
    write_metrics_csv(path, per_episode, cfg.channel_count_P, h, args.no_timestamp)
    write_summary(out, cfg, h, {"mode": "eval", "policy": label,
                                "episodes": args.episodes,
                                "reward_log": reward_log})
    rate = float(np.mean([r["throughput_rate"] for r in metrics]))
    flagged = any(r.get("offered_zero_flag") for r in metrics)
    note = " (offered=0 frames flagged)" if flagged else ""
    print(f"eval[{label}]: mean throughput rate {rate:.4f}{note}, wrote {path}")
    return 0


# -- benchmark ----------------------------------------------------------------

def build_bench_instances(nodes: int, services: int, cells: int, channels: int,
                          seed: int):
    """Seeded channelized instances plus their monolithic merge."""
    rng = np.random.default_rng(seed)
    graph = topology.random_graph(nodes, 4, (2.0, 4.0), (102_400.0, 204_800.0),
                                  (125.0, 12.5), 10.0, seed=seed)
    svc = []
    per = [services // channels + (1 if p <= services % channels else 0)
           for p in range(1, channels + 1)]
    if min(per) < 1:
        raise CliError(f"{services} services cannot cover {channels} channels", 2)
    for p, count in enumerate(per, start=1):
        t = engine._LEVEL_LIFECYCLES[(p - 1) % len(engine._LEVEL_LIFECYCLES)]
        for l in range(1, count + 1):
            svc.append(ServiceClass(
                sla_level=p, service_id=l,
                packet_size_h=float(rng.uniform(0.1, 0.5)),
                memory_r=float(rng.uniform(250.0, 450.0)),
                compute_w=float(rng.uniform(0.01, 0.05)),
                max_response_t=t, exec_time_o=3.0))
    from .domain import SlaCatalog, validate_catalog
    catalog = validate_catalog(SlaCatalog(services=tuple(svc),
                                          channel_count_P=channels))
    ledger = cellspace.CapacityLedger(graph)
    node_ids = graph.node_ids()
    made = []
    for k in range(cells):
        anchor = node_ids[k % len(node_ids)]
        action = tuple(rng.uniform(0.4, 1.0, size=2))
        made.append(cellspace.realize_cell(graph, ledger, anchor, action, k + 1))
    chars = [cellspace.characteristics(c, 1.5) for c in made]
    chans = cellspace.cluster_channels(made, chars, channels, seed=seed)
    cellspace.assign_service_levels(chans, catalog)
    counts = {(s.sla_level, s.service_id, i): float(rng.uniform(1.0, 8.0))
              for s in catalog.services for i in node_ids}
    demand = DemandTensor(counts=counts, scope="frame_average")
    by_id = {c.cell_id: c for c in made}
    instances = [jsord.build_channel_instance(ch, catalog, graph, by_id, demand)
                 for ch in sorted(chans, key=lambda c: c.channel_id)]
    merged = jsord.merge_instances(instances, graph, demand)
    return instances, merged


BENCH_HEADER = ["mode", "nodes", "services", "cells", "channels", "wall_ms", "psi"]


def cmd_bench(args) -> int:
    out = _prepare_out(args)
    nodes_list = [int(x) for x in args.nodes.split(",")]
    services_list = [int(x) for x in args.services.split(",")]
    seed = args.seed if args.seed is not None else 1
    rows = []
    for n in nodes_list:
        for s in services_list:
            instances, merged = build_bench_instances(n, s, args.cells,
                                                      args.channels, seed)
            results, wall_ch = jsord.solve_all_channels(instances, mode="parallel")
            psi_ch = sum(plan.throughput_psi for _, plan in results.values())
            _, plan_m, wall_m = jsord.monolithic_jsord(merged)
            rows.append(["channelized", n, s, args.cells, args.channels,
                         wall_ch, psi_ch])
            rows.append(["monolithic", n, s, args.cells, args.channels,
                         wall_m, plan_m.throughput_psi])
            print(f"bench n={n} s={s}: channelized {wall_ch:.0f} ms "
                  f"(psi {psi_ch:.2f}) vs monolithic {wall_m:.0f} ms "
                  f"(psi {plan_m.throughput_psi:.2f})")
    path = out / "bench.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(BENCH_HEADER)
        for row in rows:
            if args.no_timestamp:
                row = row[:5] + [0.0] + row[6:]
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
    print(f"bench: wrote {len(rows)} rows to {path}")
    return 0


# -- plots --------------------------------------------------------------------

def read_metrics_csv(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        rows.append({k: float(v) for k, v in row.items()})
    return rows


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "edgematrix"

    out = _prepare_out(args)
    runs = []
    for path in args.metrics:
        p = Path(path)
        if not p.exists():
            raise CliError(f"metrics file not found: {p}", exit_code=2)
        rows = read_metrics_csv(p)
        if not rows:
            raise CliError(f"no rows in {p}", exit_code=1)
        runs.append((p.stem, rows))

    fig, axes = plt.subplots(2, 2, figsize=(11, 8))
    for label, rows in runs:
        axes[0, 0].plot([r["reward_mean"] for r in rows], label=label)
        axes[0, 1].plot([r["throughput_rate"] for r in rows], label=label)
    axes[0, 0].set_title("mean reward per episode")
    axes[0, 1].set_title("throughput rate per episode")
    axes[0, 1].set_ylim(0.0, 1.05)
    for ax in (axes[0, 0], axes[0, 1]):
        ax.set_xlabel("episode row")
        ax.legend(fontsize=8)

    label, rows = runs[0]
    share_cols = sorted(c for c in rows[0] if c.startswith("share_ch"))
    x = np.arange(len(rows))
    bottom = np.zeros(len(rows))
    for col in share_cols:
        vals = np.array([r[col] for r in rows])
        axes[1, 0].bar(x, vals, bottom=bottom, width=1.0, label=col)
        bottom += vals
    axes[1, 0].set_title(f"per-channel served share ({label})")
    axes[1, 0].set_ylim(0.0, 1.05)
    axes[1, 0].legend(fontsize=7)

    names = [lab for lab, _ in runs]
    walls = [float(np.mean([r["wall_ms"] for r in rows])) for _, rows in runs]
    axes[1, 1].bar(range(len(runs)), walls)
    axes[1, 1].set_xticks(range(len(runs)), names, rotation=20, fontsize=8)
    axes[1, 1].set_title("mean solve wall per episode (ms)")

    fig.tight_layout()
    path = out / "plots.svg"
    metadata = {"Date": None} if args.no_timestamp else None
    fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)
    print(f"plot: wrote {path} ({len(runs)} series)")
    return 0


# -- oracle check -------------------------------------------------------------

def random_lp_instance(rng: np.random.Generator) -> lpmod.LinearProgram:
    """Random dispatch-shaped LP with at most 8 variables."""
    while True:
        L, N, M = (int(rng.integers(1, 3)) for _ in range(3))
        if L * N * M <= 8:
            break
    lam = rng.uniform(0.0, 5.0, size=(L, N))
    lam[rng.uniform(size=(L, N)) < 0.2] = 0.0
    w = rng.uniform(0.1, 1.0, size=L)
    W = rng.uniform(0.2, 4.0, size=M)
    if rng.uniform() < 0.1:
        W[0] = -rng.uniform(0.1, 1.0)  # infeasible-row coverage
    rows, rhs = [], []
    for l in range(L):
        for i in range(N):
            start = (l * N + i) * M
            rows.append((np.arange(start, start + M), np.ones(M)))
            rhs.append(1.0)
    for m in range(M):
        idx = np.array([(l * N + i) * M + m for l in range(L) for i in range(N)])
        rows.append((idx, (w[:, None] * lam).ravel()))
        rhs.append(float(W[m]))
    u = (rng.uniform(size=L * N * M) < 0.8).astype(float)
    return lpmod.LinearProgram(objective_c=np.repeat(lam.ravel(), M), rows=rows,
                               rhs_b=np.array(rhs), upper_bounds_u=u)


def random_channel_instance(rng: np.random.Generator,
                            max_pairs: int = 12) -> jsord.ChannelInstance:
    """Random small channel instance for greedy-vs-oracle checks."""
    while True:
        L = int(rng.integers(1, 4))
        M = int(rng.integers(1, 5))
        if L * M <= max_pairs:
            break
    N = int(rng.integers(1, 3))
    services = [ServiceClass(sla_level=1, service_id=l + 1,
                             packet_size_h=float(rng.uniform(0.05, 0.3)),
                             memory_r=float(rng.uniform(50.0, 300.0)),
                             compute_w=float(rng.uniform(0.05, 0.5)),
                             max_response_t=float(rng.uniform(10.0, 60.0)),
                             exec_time_o=3.0)
                for l in range(L)]
    cells = [cellspace.ResourceCell(cell_id=m + 1, anchor_node=1,
                                    cpu_Wpm=float(rng.uniform(0.5, 3.0)),
                                    mem_Rpm=float(rng.uniform(100.0, 500.0)),
                                    edge_backing={1: (1.0, 100.0)},
                                    cloud_backing=(0.0, 0.0))
             for m in range(M)]
    node_ids = list(range(1, N + 1))
    lam = rng.uniform(0.0, 6.0, size=(L, N))
    lam[rng.uniform(size=(L, N)) < 0.15] = 0.0
    latency = rng.uniform(0.0, 40.0, size=(L, N, M))
    return jsord.ChannelInstance(channel_id=1, services=services, cells=cells,
                                 node_ids=node_ids, lam=lam, latency=latency)


def oracle_report(sizes_max_pairs: int, count: int, seed: int) -> dict:
    if sizes_max_pairs > 16:
        raise jsord.TooLarge(f"{sizes_max_pairs} pairs exceeds the brute-force cap of 16")
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(count):
        inst = random_channel_instance(rng, sizes_max_pairs)
        S, _ = jsord.greedy_orchestrate(inst)
        greedy_val = jsord.omega(inst, S)
        _, opt_val = jsord.bruteforce_oracle(inst)
        ratios.append(1.0 if opt_val <= 1e-12 else greedy_val / opt_val)
    gap_max = 0.0
    feas_max = 0.0
    for _ in range(count):
        prob = random_lp_instance(rng)
        sol = lpmod.solve_lp(prob)
        oracle = lpmod.enumerate_optimum(prob)
        if sol.status == "Optimal":
            assert oracle is not None
            gap_max = max(gap_max, abs(sol.objective_value - oracle[0]))
            A = prob.dense_matrix()
            resid = float(np.max(A @ sol.y_star - prob.rhs_b)) if len(prob.rhs_b) else 0.0
            feas_max = max(feas_max, resid)
        elif oracle is not None:
            gap_max = max(gap_max, abs(oracle[0]))
    return {"count": count, "seed": seed,
            "greedy_min_ratio": float(min(ratios)) if ratios else 1.0,
            "greedy_mean_ratio": float(np.mean(ratios)) if ratios else 1.0,
            "lp_max_gap": gap_max, "lp_max_residual": feas_max}


def cmd_oracle_check(args) -> int:
    try:
        report = oracle_report(args.max_pairs, args.count, args.seed or 1)
    except jsord.TooLarge as exc:
        raise CliError(str(exc), exit_code=2) from exc
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        out = _prepare_out(args)
        with open(out / "oracle_report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    if args.count == 0:
        return 0
    if report["greedy_min_ratio"] < 0.5 or report["lp_max_gap"] > 1e-8:
        return 1
    return 0


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgematrix",
        description="Edge-cloud scheduling simulator: training, evaluation, "
                    "benchmarks and solver self-checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, episodes_default=10):
        p.add_argument("--config", default=_env_default("config", None),
                       help="JSON config path (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=_env_default("seed", None))
        p.add_argument("--out", default=_env_default("out", "runs"))
        p.add_argument("--episodes", type=int,
                       default=_env_default("episodes", episodes_default))
        p.add_argument("--no-timestamp", action="store_true",
                       default=_env_default("no_timestamp", False),
                       help="zero wall-clock columns and suppress SVG dates")

    p_train = sub.add_parser("train", help="offline policy training")
    common(p_train, episodes_default=300)
    p_train.add_argument("--baseline", default=None,
                         help="'independent' switches off the centralized critic")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="frozen-policy evaluation")
    common(p_eval, episodes_default=1)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--baseline", default=None,
                        choices=["random", "static_half"],
                        help="built-in policy when no checkpoint is given")
    p_eval.set_defaults(func=cmd_eval)

    p_run = sub.add_parser("run", help="train or eval selected by --mode")
    common(p_run)
    p_run.add_argument("--mode", choices=["train", "eval"], required=True)
    p_run.add_argument("--baseline", default=None)
    p_run.add_argument("--checkpoint", default=None)
    p_run.set_defaults(func=lambda a: (cmd_train if a.mode == "train" else cmd_eval)(a))

    p_bench = sub.add_parser("bench", help="channelized vs monolithic runtime")
    p_bench.add_argument("--nodes", default="10", help="comma list of node counts")
    p_bench.add_argument("--services", default="18", help="comma list of service counts")
    p_bench.add_argument("--cells", type=int, default=36)
    p_bench.add_argument("--channels", type=int, default=6)
    p_bench.add_argument("--seed", type=int, default=_env_default("seed", None))
    p_bench.add_argument("--out", default=_env_default("out", "runs"))
    p_bench.add_argument("--no-timestamp", action="store_true",
                         default=_env_default("no_timestamp", False))
    p_bench.set_defaults(func=cmd_bench)

    p_plot = sub.add_parser("plot", help="render metrics CSVs to SVG")
    p_plot.add_argument("metrics", nargs="+")
    p_plot.add_argument("--out", default=_env_default("out", "runs"))
    p_plot.add_argument("--no-timestamp", action="store_true",
                        default=_env_default("no_timestamp", False))
    p_plot.set_defaults(func=cmd_plot)

    p_oc = sub.add_parser("oracle-check", help="greedy and LP solver self-check")
    p_oc.add_argument("--max-pairs", type=int, default=12)
    p_oc.add_argument("--count", type=int, default=100)
    p_oc.add_argument("--seed", type=int, default=_env_default("seed", None))
    p_oc.add_argument("--out", default=None)
    p_oc.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except nmac.ShapeMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
