"""Command-line pipeline: gen, build-mdp, train, solve, eval, report.

Exit codes: 0 success, 1 bad input or runtime failure, 2 usage error,
3 a policy exceeds its budget.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .alloc import AllocationProblem, save_json, solve_exact, solve_lagrangian
from .evaluate import (
    cell_table,
    compare_policies,
    origin_keys,
    report_json,
    report_markdown,
)
from .geo import DAY_KINDS, CodingConfig, HexGrid
from .learning import Checkpoint, DivergenceError, TrainConfig, train, write_metrics
from .market import (
    CityModel,
    ConfigError,
    TripArrays,
    generate_city,
    read_trips,
    standard_city,
    write_trips,
)
from .mdp import ReplayBuffer, build_transitions
from .policy import (
    align_policy,
    evaluate_trips,
    greedy_q_policy,
    historical_policy,
    historical_spend,
    ip_policy,
    read_policy,
    write_policy,
)

log = logging.getLogger("stincentive")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "city": "standard",
    "seeds": {"train_week": 1, "test_week": 2, "train": 0, "eval": 3},
    "coding": {},
    "mdp": {"gamma": 0.9, "reward_mode": "eq1", "alpha": 0.0},
    "train": {},
    "solve": {"beta": 0.5, "solver": "lagrangian", "symmetric": False},
    "eval": {"level": 1},
}


class CliError(Exception):
    """Bad input reported to the user without a traceback."""


# -- configuration --------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    """Run configuration merged over the defaults.

    ``city`` may be ``"standard"``, a path (relative to the config file) or
    an inline city model.  A bare city model file is accepted too.
    """
    if path is None:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        cfg["_dir"] = os.getcwd()
        return cfg
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object")
    if "zones" in raw:
        raw = {"city": raw}
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, raw)
    cfg["_dir"] = os.path.dirname(os.path.abspath(path))
    return cfg


def resolve_city(cfg: dict) -> CityModel:
    spec = cfg["city"]
    try:
        if spec == "standard":
            return standard_city()
        if isinstance(spec, dict) and set(spec) == {"standard_scale"}:
            return standard_city(float(spec["standard_scale"]))
        if isinstance(spec, str):
            path = spec if os.path.isabs(spec) else os.path.join(cfg["_dir"], spec)
            return CityModel.load(path)
        return CityModel.from_dict(spec)
    except OSError as exc:
        raise CliError(f"cannot read city model: {exc}") from None
    except (ConfigError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid city model: {exc}") from None


def resolve_coding(cfg: dict, city: CityModel | None = None) -> CodingConfig:
    d = dict(cfg["coding"])
    if "bbox" not in d:
        d["bbox"] = list((city or resolve_city(cfg)).bbox)
    try:
        return CodingConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid coding config: {exc}") from None


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


# -- manifests --------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    inputs: dict
    outputs: dict
    tool_version: str = __version__
    timing: dict = field(default_factory=dict)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _manifest_path(output: str) -> str:
    if os.path.isdir(output):
        return os.path.join(output, "run_manifest.json")
    return output + ".manifest.json"


def _write_manifest(args, cfg, seeds, inputs, outputs, started):
    m = RunManifest(args.command, config_hash(cfg), seeds, inputs, outputs, timing={"seconds": round(time.perf_counter() - started, 3)})
    m.write(_manifest_path(next(iter(outputs.values()))))


# -- helpers ------------------------------------------------------------------------


def _load_trips(path) -> list:
    try:
        trips = read_trips(path)
    except OSError as exc:
        raise CliError(f"cannot read trips {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if not trips:
        raise CliError(f"{path}: no trips")
    return trips


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (ValueError, KeyError) as exc:
        raise CliError(str(exc)) from None


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=lambda o: o.item() if hasattr(o, "item") else str(o))
        fh.write("\n")


def _budget(args, trips) -> float:
    budget = historical_spend(trips) if args.budget is None else float(args.budget)
    if not math.isfinite(budget) or budget < 0:
        raise CliError(f"budget must be a finite non-negative number, got {budget}")
    return budget


# -- subcommands --------------------------------------------------------------------


def cmd_gen(args, cfg) -> int:
    city = resolve_city(cfg)
    seed = args.seed if args.seed is not None else int(cfg["seeds"][f"{args.week}_week"])
    started = time.perf_counter()
    trips = generate_city(seed, city)
    write_trips(args.out, trips)
    print(f"wrote {len(trips)} trips to {args.out}")
    _write_manifest(args, cfg, {"generator": seed}, {"config": args.config}, {"trips": args.out}, started)
    return EXIT_OK


def cmd_build_mdp(args, cfg) -> int:
    trips = _load_trips(args.trips)
    mdp = dict(cfg["mdp"])
    if args.reward_mode is not None:
        mdp["reward_mode"] = args.reward_mode
    if args.alpha is not None:
        mdp["alpha"] = args.alpha
    started = time.perf_counter()
    coding = resolve_coding(cfg)
    try:
        buf = build_transitions(trips, coding, float(mdp["gamma"]), mdp["reward_mode"], float(mdp["alpha"]))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    buf.save(args.out)
    print(f"wrote {len(buf)} transitions to {args.out} (skipped {buf.header.get('skipped', 0)})")
    _write_manifest(args, cfg, {}, {"trips": args.trips}, {"buffer": args.out}, started)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    try:
        buffer = ReplayBuffer.load(args.buffer)
    except OSError as exc:
        raise CliError(f"cannot read buffer {args.buffer}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"corrupt buffer {args.buffer}: {exc}") from None
    tc = dict(cfg["train"])
    tc.setdefault("seed", int(cfg["seeds"]["train"]))
    tc.setdefault("gamma", buffer.gamma)
    tc.setdefault("alpha", buffer.header.get("alpha", 0.0))
    for name in ("seed", "beta", "steps"):
        if getattr(args, name, None) is not None:
            tc[name] = getattr(args, name)
    try:
        train_cfg = TrainConfig.from_dict(tc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train config: {exc}") from None
    if not math.isclose(train_cfg.gamma, buffer.gamma):
        raise CliError(f"train gamma {train_cfg.gamma} differs from the buffer's {buffer.gamma}")
    resume = _load_checkpoint(args.resume) if args.resume else None
    started = time.perf_counter()
    try:
        ck = train(buffer, train_cfg, checkpoint=resume)
    except DivergenceError as exc:
        raise CliError(f"training diverged: {exc}") from None
    ck.save(args.out)
    write_metrics(ck.metrics, os.path.join(args.out, "metrics.csv"))
    print(f"trained {ck.step} steps, checkpoint in {args.out}")
    _write_manifest(args, cfg, {"train": train_cfg.seed}, {"buffer": args.buffer, "resume": args.resume}, {"checkpoint": args.out}, started)
    return EXIT_OK


def _solve_problem_file(args) -> int:
    try:
        with open(args.problem) as fh:
            problem = AllocationProblem.from_dict(json.load(fh))
    except OSError as exc:
        raise CliError(f"cannot read problem {args.problem}: {exc.strerror}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid problem file: {exc}") from None
    if args.budget is not None:
        problem.budget = float(args.budget)
    if args.solver == "lagrangian":
        sol = solve_lagrangian(problem)
    else:
        sol = solve_exact(problem)
    save_json(sol, args.out)
    print(sol.summary())
    return EXIT_OK


def cmd_solve(args, cfg) -> int:
    if args.problem:
        return _solve_problem_file(args)
    if not (args.trips and args.out):
        raise CliError("solve needs --trips and --out (or --problem)")
    trips = _load_trips(args.trips)
    budget = _budget(args, trips)
    sc = dict(cfg["solve"])
    beta = float(args.beta if args.beta is not None else sc["beta"])
    solver = args.solver or sc["solver"]
    started = time.perf_counter()
    ta = TripArrays.from_records(trips)
    if args.method == "historical":
        actions = historical_policy(ta)
        summary = {"method": "historical", "spend": historical_spend(ta), "budget": budget}
    else:
        if not args.checkpoint:
            raise CliError(f"--method {args.method} needs --checkpoint")
        ck = _load_checkpoint(args.checkpoint)
        tv = evaluate_trips(ta, ck)
        if args.method == "ip":
            actions, sol = ip_policy(tv, budget, beta, ck.config.gamma, solver, bool(sc.get("symmetric", False)))
        else:
            actions, sol = greedy_q_policy(tv, budget)
        summary = {"method": args.method, "beta": beta, "solver": sol.solver, **sol.to_dict()}
        for key in ("X", "choice"):
            summary.pop(key, None)
    write_policy(args.out, ta.trip_id, actions)
    _write_json(args.out + ".summary.json", summary)
    spend = math.fsum(((1.0 - actions) * ta.fare).tolist())
    print(f"{args.method}: {len(ta)} trips, spend {spend:.4f} of budget {budget:.4f}")
    _write_manifest(args, cfg, {}, {"trips": args.trips, "checkpoint": args.checkpoint}, {"policy": args.out}, started)
    if spend > budget and args.method != "historical":
        return EXIT_BUDGET
    return EXIT_OK


def _parse_policy_args(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(item))[0], item
        if name in out:
            raise CliError(f"duplicate policy name {name!r}")
        out[name] = path
    return out


def cmd_eval(args, cfg) -> int:
    trips = _load_trips(args.trips)
    ta = TripArrays.from_records(trips)
    city = resolve_city(cfg)
    coding = resolve_coding(cfg, city)
    budget = _budget(args, trips)
    started = time.perf_counter()
    paths = _parse_policy_args(args.policy)
    policies = {}
    for name, path in paths.items():
        try:
            policies[name] = align_policy(read_policy(path), ta.trip_id)
        except OSError as exc:
            raise CliError(f"cannot read policy {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise CliError(f"{path}: {exc}") from None
    level = int(cfg["eval"]["level"])
    grid = HexGrid(coding)
    if args.sampled < 0:
        raise CliError("--sampled must be >= 0")
    seed = cfg["seeds"]["eval"] if args.seed is None else args.seed
    report = compare_policies(
        ta, policies, budget, city, grid, baseline=args.baseline, level=level, replications=args.sampled, seed=seed
    )
    with open(args.out, "w") as fh:
        fh.write(report_json(report))
    if args.markdown:
        with open(args.markdown, "w") as fh:
            fh.write(report_markdown(report))
    if args.cells:
        name = args.cells_policy or report["baseline"]
        if name not in policies:
            raise CliError(f"--cells-policy {name!r} is not among the policies")
        v_values = None
        if args.checkpoint:
            tv = evaluate_trips(ta, _load_checkpoint(args.checkpoint))
            v_values = _mean_by_key(origin_keys(ta, grid, level), tv.v_s)
        with open(args.cells, "w") as fh:
            fh.write(cell_table(ta, policies[name], city, grid, v_values, level))
    print(report_markdown(report), end="")
    seeds = {"eval": seed} if args.sampled else {}
    _write_manifest(args, cfg, seeds, {"trips": args.trips, "policies": paths}, {"report": args.out}, started)
    if report["budget_violations"]:
        print(f"budget exceeded by: {', '.join(report['budget_violations'])}", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def _mean_by_key(keys, values) -> dict:
    sums: dict = {}
    for c, s, k, v in zip(*(a.tolist() for a in keys), np.asarray(values, dtype=float).tolist()):
        key = (c, s, DAY_KINDS[k])
        tot, n = sums.get(key, (0.0, 0))
        sums[key] = (tot + v, n + 1)
    return {k: tot / n for k, (tot, n) in sums.items()}


def cmd_report(args, cfg) -> int:
    try:
        with open(args.report) as fh:
            report = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read report {args.report}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid report {args.report}: {exc}") from None
    text = report_markdown(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return EXIT_BUDGET if report.get("budget_violations") else EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stincentive", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="run configuration JSON (defaults built in)")
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen", cmd_gen, "generate a synthetic trip log")
    g.add_argument("--week", choices=("train", "test"), default="train", help="which configured seed to use")
    g.add_argument("--seed", type=int, help="override the generator seed")
    g.add_argument("--out", required=True, help="output JSONL path")

    b = add("build-mdp", cmd_build_mdp, "encode a trip log as a transition buffer")
    b.add_argument("--trips", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--reward-mode", choices=("eq1", "eq7"))
    b.add_argument("--alpha", type=float, help="spend penalty weight for the eq7 reward")

    t = add("train", cmd_train, "fit Q and V on a transition buffer")
    t.add_argument("--buffer", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")

    s = add("solve", cmd_solve, "assign a discount to every trip")
    s.add_argument("--trips")
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=("ip", "greedy", "historical"), default="ip")
    s.add_argument("--budget", type=float, help="defaults to the historical spend on these trips")
    s.add_argument("--beta", type=float)
    s.add_argument("--solver", choices=("lagrangian", "exact"))
    s.add_argument("--problem", help="solve a serialized allocation problem instead")

    e = add("eval", cmd_eval, "compare policies on one trip set")
    e.add_argument("--trips", required=True)
    e.add_argument("--policy", action="append", required=True, help="NAME=path.csv, repeatable")
    e.add_argument("--baseline")
    e.add_argument("--budget", type=float)
    e.add_argument("--out", required=True, help="JSON report path")
    e.add_argument("--markdown")
    e.add_argument("--cells", help="per-cell CSV path")
    e.add_argument("--cells-policy")
    e.add_argument("--checkpoint", help="adds V values to the per-cell CSV")
    e.add_argument("--sampled", type=int, default=0, metavar="N", help="also report sampled-mode GMV over N replications")
    e.add_argument("--seed", type=int, help="seed for sampled mode")

    r = add("report", cmd_report, "render a JSON report as Markdown")
    r.add_argument("--report", required=True)
    r.add_argument("--out")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
