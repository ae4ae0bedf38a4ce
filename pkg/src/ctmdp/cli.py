"""Command-line experiment runner.

Subcommands::

    ctmdp solve    --preset paper-v-c --out out/
    ctmdp simulate --preset paper-v-c --out out/ [--policy out/value_table.json]
    ctmdp sweep    --preset paper-v-c --out out/ --key inventory.kappa --values 0,5,10

Exit codes: 0 success, 2 configuration error, 3 solver did not converge
(residuals are still written), 4 I/O error.

Output schemas (floats are written with ``repr`` so they parse back exactly):

* ``policy.csv``: ``x, v_star, a_star, T_star`` (the gated queue adds ``r_star``)
* ``residuals.csv``: ``iteration, sup_norm_residual``
* ``trace.csv``: ``time, kind, state, action, interval``
* ``sweep.csv``: ``key, value, status, v_star_ref, T_star_ref, a_star_min, a_star_max, iterations, error``
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine, gated_queue, simulator
from .config import ConfigError, ExperimentConfig, apply_override, load_config, load_preset, validate
from .engine import ConvergenceError, StagePolicy, ValueTable
from .inventory import InventoryModel

log = logging.getLogger("ctmdp")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "CTMDP_THREADS"


class SolverFailure(RuntimeError):
    """Non-convergence after the partial outputs have been written."""


# --- file helpers ---------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _f(x) -> str:
    return repr(float(x))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def resolve_threads(flag: int | None, cfg: ExperimentConfig) -> int:
    """``--threads`` beats ``CTMDP_THREADS``, which beats ``solver.threads``."""
    if flag is not None:
        n = flag
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    else:
        n = cfg.solver.threads or 1
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


# --- solving --------------------------------------------------------------------


@dataclass
class SolveResult:
    model: str
    table: ValueTable
    policy: StagePolicy | None
    residuals: list[float]
    converged: bool = True
    extra: dict = field(default_factory=dict)
    message: str = ""

    def reference_state(self, cfg: ExperimentConfig) -> int:
        return int(cfg.inventory.theta) if self.model == "inventory" else 0


def solve(cfg: ExperimentConfig, threads: int = 1) -> SolveResult:
    """Solve the configured model in memory. Non-convergence is reported, not raised."""
    if cfg.model == "inventory":
        model = InventoryModel(cfg.inventory)
        try:
            table, policy = engine.value_iteration(
                model, eps=cfg.inventory.eps_vi, max_iter=cfg.solver.max_iter, threads=threads
            )
        except ConvergenceError as exc:
            return SolveResult(cfg.model, exc.values, None, exc.values.residual_history, False, message=str(exc))
        return SolveResult(cfg.model, table, policy, table.residual_history)
    return _solve_queue(cfg)


def _solve_queue(cfg: ExperimentConfig) -> SolveResult:
    p = cfg.queue
    n = cfg.solver.queue_states if cfg.solver.queue_states is not None else p.state_bound + 1
    window = (0, n - 1)
    try:
        sol = gated_queue.solve_epoch_fixed_point(p, max_iter=cfg.solver.max_iter)
    except gated_queue.FixedPointError as exc:
        table = ValueTable(window, np.zeros(n), len(exc.residuals), exc.residuals)
        return SolveResult(cfg.model, table, None, exc.residuals, False, message=str(exc))
    xs = range(n)
    values = np.array([gated_queue.value(x, p, sol.W) for x in xs])
    table = ValueTable(window, values, len(sol.residuals), sol.residuals)
    speeds = [gated_queue.optimal_speed(x, p.eta) for x in xs]
    policy = StagePolicy(window, speeds, np.full(n, sol.T), values)
    extra = {
        "W_star": float(sol.W),
        "T_star": float(sol.T),
        "r_star": [gated_queue.optimal_speed_cost(x, p.eta) for x in xs],
    }
    return SolveResult(cfg.model, table, policy, sol.residuals, extra=extra)


def policy_rows(result: SolveResult) -> list[list[str]]:
    rows = []
    for i, x in enumerate(result.table.states):
        a, T = result.policy.actions[i], result.policy.intervals[i]
        row = [str(int(x)), _f(result.table.values[i]), _f(a), _f(T)]
        if result.model == "gated-queue":
            row.append(_f(result.extra["r_star"][i]))
        rows.append(row)
    return rows


def write_solve_outputs(result: SolveResult, out: Path) -> None:
    write_atomic(
        out / "residuals.csv",
        _csv(["iteration", "sup_norm_residual"], [[k, _f(r)] for k, r in enumerate(result.residuals, 1)]),
    )
    if not result.converged:
        return
    doc = engine.to_json(result.table, result.policy)
    doc["model"] = result.model
    if result.model == "gated-queue":
        doc["epoch"] = {"W_star": result.extra["W_star"], "T_star": result.extra["T_star"]}
    write_atomic(out / "value_table.json", json.dumps(doc, indent=1) + "\n")
    header = ["x", "v_star", "a_star", "T_star"] + (["r_star"] if result.model == "gated-queue" else [])
    write_atomic(out / "policy.csv", _csv(header, policy_rows(result)))


def cmd_solve(cfg: ExperimentConfig, out: Path | None = None, threads: int = 1) -> SolveResult:
    """Solve and write ``value_table.json``, ``policy.csv`` and ``residuals.csv``.

    Raises:
        SolverFailure: after writing ``residuals.csv`` when the solver stalls.
    """
    out = Path(cfg.out if out is None else out)
    result = solve(cfg, threads)
    write_solve_outputs(result, out)
    if not result.converged:
        raise SolverFailure(result.message)
    log.info("solved %s in %d iterations", cfg.model, len(result.residuals))
    return result


# --- simulation -----------------------------------------------------------------


def load_policy(path: Path) -> tuple[ValueTable, StagePolicy, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"policy file {path} is not valid JSON: {exc}") from exc
    table, policy = engine.from_json(doc)
    if policy is None:
        raise ConfigError(f"policy file {path} holds no policy")
    return table, policy, doc


def _check_covered(policy: StagePolicy, x: int, what: str) -> None:
    if not policy.covers(x):
        raise ConfigError(f"{what} = {x} lies outside the policy window {tuple(policy.window)}")


def cmd_simulate(cfg: ExperimentConfig, out: Path | None = None, policy_path: Path | None = None) -> dict:
    """Simulate under a solved policy; writes ``trace.csv`` and ``estimate.json``."""
    out = Path(cfg.out if out is None else out)
    policy_path = Path(policy_path) if policy_path is not None else out / "value_table.json"
    table, policy, doc = load_policy(policy_path)
    model = doc.get("model", cfg.model)
    if model != cfg.model:
        raise ConfigError(f"policy file was solved for {model!r} but the config says {cfg.model!r}")
    sim = cfg.simulation
    trace_x0 = sim.trace_x0 if sim.trace_x0 is not None else sim.x0[0]
    for x in sim.x0:
        _check_covered(policy, x, "simulation.x0")
    _check_covered(policy, trace_x0, "simulation.trace_x0")
    if cfg.model == "inventory":
        trace_csv, estimate = _simulate_inventory(cfg, table, policy, trace_x0)
    else:
        trace_csv, estimate = _simulate_queue(cfg, policy, doc, trace_x0)
    write_atomic(out / "trace.csv", trace_csv)
    write_atomic(out / "estimate.json", json.dumps(estimate, indent=1) + "\n")
    return estimate


def _simulate_inventory(cfg, table, policy, trace_x0):
    sim, p = cfg.simulation, cfg.inventory
    trace = simulator.simulate_inventory(trace_x0, policy, sim.horizon, sim.seed, p)
    rows = []
    for x0 in sim.x0:
        est = simulator.estimate_value(x0, policy, sim.n_rollouts, sim.horizon, sim.seed, p)
        v = table[x0]
        gap = abs(est.mean - v)
        rows.append(
            {
                "x0": int(x0),
                "v_star": v,
                "mean": est.mean,
                "std_error": est.std_error,
                "truncation_bound": est.truncation_bound,
                "abs_error": gap,
                "tolerance": 3.0 * est.std_error + est.truncation_bound,
                "within_tolerance": bool(gap <= 3.0 * est.std_error + est.truncation_bound),
            }
        )
    estimate = {
        "model": "inventory",
        "seed": int(sim.seed),
        "n_rollouts": int(sim.n_rollouts),
        "horizon": float(sim.horizon),
        "trace": {"x0": int(trace_x0), "discounted_cost": trace.discounted_cost},
        "estimates": rows,
    }
    return trace.to_csv(), estimate


def _simulate_queue(cfg, policy, doc, trace_x0):
    """Cycle-level checks of the waiting formula plus a gate-to-gate trace."""
    sim, p = cfg.simulation, cfg.queue
    T = float(doc["epoch"]["T_star"]) if "epoch" in doc else float(policy.intervals[0])
    rows = []
    for i, x0 in enumerate(sim.x0):
        a, _ = policy.lookup(x0)
        a = float(a)
        sums, _ = gated_queue.simulate_gated_cycles(x0, a, T, sim.n_rollouts, simulator.rollout_rng(sim.seed, i), p)
        mean = float(sums.mean())
        se = float(sums.std(ddof=1) / math.sqrt(len(sums)))
        expected = gated_queue.expected_cycle_waiting_cost(x0, a, T, p)
        rows.append(
            {
                "x0": int(x0),
                "a": a,
                "T": T,
                "expected_waiting": expected,
                "mean": mean,
                "std_error": se,
                "within_tolerance": bool(abs(mean - expected) <= 3.0 * se),
            }
        )
    rng = simulator.rollout_rng(sim.seed)
    trace_rows, x, t = [], int(trace_x0), 0.0
    for _ in range(sim.n_cycles):
        a, T_k = policy.lookup(x)
        trace_rows.append([_f(t), simulator.OBSERVATION, x, _f(a), _f(T_k)])
        _, n_new = gated_queue.simulate_gated_cycles(x, float(a), T_k, 1, rng, p)
        x, t = int(n_new[0]), t + T_k
    estimate = {
        "model": "gated-queue",
        "seed": int(sim.seed),
        "n_cycles": int(sim.n_rollouts),
        "W_star": doc.get("epoch", {}).get("W_star"),
        "T_star": T,
        "estimates": rows,
    }
    return _csv(["time", "kind", "state", "action", "interval"], trace_rows), estimate


# --- sweeps -----------------------------------------------------------------------


def _split_key(cfg: ExperimentConfig, key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
    else:
        section, name = ("inventory" if cfg.model == "inventory" else "queue"), key
    target = getattr(cfg, section, None)
    if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown sweep key {key!r}")
    if not isinstance(getattr(target, name), (int, float)) or isinstance(getattr(target, name), bool):
        raise ConfigError(f"sweep key {key!r} is not numeric")
    return section, name


def cmd_sweep(cfg: ExperimentConfig, key: str, values, out: Path | None = None, threads: int = 1) -> list[dict]:
    """One solve per value of ``key``; failures are recorded and the sweep goes on."""
    out = Path(cfg.out if out is None else out)
    section, name = _split_key(cfg, key)
    records = []
    for raw in values:
        rec = {"key": f"{section}.{name}", "value": str(raw).strip(), "status": "ok", "error": ""}
        try:
            point = apply_override(cfg, f"{section}.{name}={raw}")
            result = solve(point, threads)
            rec["iterations"] = len(result.residuals)
            if not result.converged:
                rec.update(status="not_converged", error=result.message)
            else:
                x_ref = result.reference_state(point)
                i = x_ref - result.table.window[0]
                actions = np.array([float(a) for a in result.policy.actions])
                rec.update(
                    v_star_ref=result.table.values[i],
                    T_star_ref=result.policy.intervals[i],
                    a_star_min=actions.min(),
                    a_star_max=actions.max(),
                    result=result,
                )
        except Exception as exc:  # noqa: BLE001 - recorded per point
            log.warning("sweep point %s=%s failed: %s", key, raw, exc)
            rec.update(status="error", error=f"{type(exc).__name__}: {exc}")
        records.append(rec)
    header = ["key", "value", "status", "v_star_ref", "T_star_ref", "a_star_min", "a_star_max", "iterations", "error"]
    rows = []
    for r in records:
        nums = [_f(r[k]) if k in r else "" for k in header[3:7]]
        rows.append([r["key"], r["value"], r["status"], *nums, r.get("iterations", ""), r["error"]])
    write_atomic(out / "sweep.csv", _csv(header, rows))
    return records


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file; applied on top of --preset")
    common.add_argument("--preset", metavar="NAME", help="built-in preset: paper-v-c or gated-default")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    common.add_argument("--seed", type=int, metavar="N", help="simulation seed")
    common.add_argument("--threads", type=int, metavar="N", help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ctmdp", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="value iteration and policy extraction")
    sim = sub.add_parser("simulate", parents=[common], help="Monte-Carlo check of a solved policy")
    sim.add_argument("--policy", metavar="PATH", help="value_table.json (default OUT/value_table.json)")
    sw = sub.add_parser("sweep", parents=[common], help="solve once per parameter value")
    sw.add_argument("--key", required=True, help="numeric key, e.g. inventory.kappa")
    sw.add_argument("--values", required=True, help="comma-separated values")
    return parser


def build_config(args) -> ExperimentConfig:
    cfg = load_preset(args.preset) if args.preset else ExperimentConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    for assignment in args.set:
        cfg = apply_override(cfg, assignment)
    if args.seed is not None:
        cfg = cfg.replace("simulation", seed=args.seed)
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        threads = resolve_threads(args.threads, cfg)
        if args.command == "solve":
            cmd_solve(cfg, threads=threads)
        elif args.command == "simulate":
            cmd_simulate(cfg, policy_path=args.policy)
        else:
            cmd_sweep(cfg, args.key, args.values.split(","), threads=threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
