"""Turn a trained checkpoint into per-trip discount assignments."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alloc import (
    AllocationProblem,
    AllocationSolution,
    build_cost_matrix,
    build_value_matrix,
    repair,
    solve_exact,
    solve_lagrangian,
)
from .geo import HexGrid
from .learning import Checkpoint
from .market import ACTION_ARRAY, TripArrays, TripRecord, action_index
from .mdp import encode_trips


@dataclass
class TripValues:
    trips: TripArrays
    v_s: np.ndarray
    v_next: np.ndarray
    q: np.ndarray
    done: np.ndarray


def evaluate_trips(trips: Sequence[TripRecord] | TripArrays, ck: Checkpoint) -> TripValues:
    """V at origin and destination and Q at origin for every trip."""
    ta = trips if isinstance(trips, TripArrays) else TripArrays.from_records(trips)
    enc = encode_trips(ta, HexGrid(ck.coding))
    v_s = ck.v.predict(enc.origin.tiles, enc.origin.context)[:, 0].astype(float)
    v_n = ck.v.predict(enc.dest.tiles, enc.dest.context)[:, 0].astype(float)
    q = ck.q.predict(enc.origin.tiles, enc.origin.context).astype(float)
    return TripValues(ta, v_s, v_n, q, enc.done)


def historical_spend(trips: Sequence[TripRecord] | TripArrays) -> float:
    ta = trips if isinstance(trips, TripArrays) else TripArrays.from_records(trips)
    return math.fsum(((1.0 - ta.historical_action) * ta.fare).tolist())


def allocation_problem(tv: TripValues, budget: float, beta: float, gamma: float, symmetric: bool = False) -> AllocationProblem:
    ta = tv.trips
    values = build_value_matrix(ta.delta_ecr(), ta.cr, ta.fare, tv.v_s, tv.v_next, tv.done, beta, gamma, symmetric)
    return AllocationProblem(values, build_cost_matrix(ta.fare), budget, ta.trip_id)


def ip_policy(tv: TripValues, budget: float, beta: float, gamma: float, solver: str = "lagrangian", symmetric: bool = False):
    problem = allocation_problem(tv, budget, beta, gamma, symmetric)
    if solver == "lagrangian":
        sol = solve_lagrangian(problem)
    elif solver in ("exact", "dp", "enumerate"):
        sol = solve_exact(problem, "auto" if solver == "exact" else solver)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return ACTION_ARRAY[sol.choice], sol


def greedy_q_policy(tv: TripValues, budget: float):
    """Per-trip argmax of Q, then downgraded by the greedy repair until within budget."""
    ta = tv.trips
    problem = AllocationProblem(tv.q, build_cost_matrix(ta.fare), budget, ta.trip_id)
    choice = repair(problem, np.argmax(tv.q, axis=1))
    sol = AllocationSolution(choice, problem.objective(choice), problem.spend(choice), budget, "greedy-q")
    return ACTION_ARRAY[choice], sol


def historical_policy(trips: Sequence[TripRecord] | TripArrays) -> np.ndarray:
    ta = trips if isinstance(trips, TripArrays) else TripArrays.from_records(trips)
    return ta.historical_action.copy()


def write_policy(path, trip_ids, actions):
    with open(path, "w", newline="") as fh:
        fh.write(policy_csv(trip_ids, actions))


def policy_csv(trip_ids, actions) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trip_id", "action"])
    for t, a in zip(trip_ids, actions):
        w.writerow([int(t), f"{float(a):g}"])
    return buf.getvalue()


def read_policy(path) -> dict[int, float]:
    policy = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"trip_id", "action"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns trip_id, action")
        for row in reader:
            tid = int(row["trip_id"])
            if tid in policy:
                raise ValueError(f"{path}: duplicate trip id {tid}")
            a = float(row["action"])
            action_index(a)
            policy[tid] = a
    return policy


def align_policy(policy: dict[int, float], trip_ids) -> np.ndarray:
    ids = [int(t) for t in trip_ids]
    if set(policy) != set(ids):
        missing = len(set(ids) - set(policy))
        extra = len(set(policy) - set(ids))
        raise ValueError(f"policy does not cover the trip set ({missing} missing, {extra} extra)")
    return np.array([policy[t] for t in ids], dtype=float)
