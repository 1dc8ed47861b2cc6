"""Budget-constrained discount assignment (multiple-choice knapsack).

Every trip picks exactly one menu action; the summed cost of the picks may
not exceed the budget and the summed value is maximised.  Three solvers:

* :func:`solve_enumerate` - brute force over all ``6**N`` assignments;
* :func:`solve_dp` - dynamic program over the budget quantised to ``eps``;
* :func:`solve_lagrangian` - bisection on the budget multiplier followed by
  a greedy repair/fill pass, with a dual upper bound on the optimum.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .market import ACTION_ARRAY, ACTIONS, action_index

MAX_ENUMERATION_ROWS = 8


class InfeasibleProblemError(ValueError):
    pass


def build_cost_matrix(fares) -> np.ndarray:
    """Discount cost ``(1 - a) * fare`` for every trip and action."""
    fares = np.asarray(fares, dtype=float)
    if np.any(fares <= 0):
        raise ValueError("fares must be positive")
    return (1.0 - ACTION_ARRAY[None, :]) * fares[:, None]


def build_value_matrix(delta_ecr, cr, fare, v_s, v_next, done, beta: float, gamma: float, symmetric: bool = False):
    """Value of each (trip, action) pair.

    ``delta_ecr * cr * (beta*fare + (1-beta)*gamma*(1-done)*V(s') - V(s))``.
    With ``symmetric=True`` the ``V(s)`` term is weighted by ``1 - beta`` as
    well (a variant, not the default formula).
    """
    delta_ecr = np.asarray(delta_ecr, dtype=float)
    cr = np.asarray(cr, dtype=float)[:, None]
    fare = np.asarray(fare, dtype=float)[:, None]
    v_s = np.asarray(v_s, dtype=float)[:, None]
    v_next = np.asarray(v_next, dtype=float)[:, None]
    alive = 1.0 - np.asarray(done, dtype=float)[:, None]
    if symmetric:
        inner = beta * fare + (1.0 - beta) * (gamma * alive * v_next - v_s)
    else:
        inner = beta * fare + (1.0 - beta) * gamma * alive * v_next - v_s
    return delta_ecr * cr * inner


@dataclass
class AllocationProblem:
    values: np.ndarray
    costs: np.ndarray
    budget: float
    trip_ids: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.costs = np.asarray(self.costs, dtype=float)
        if self.values.ndim != 2 or self.values.shape != self.costs.shape:
            raise ValueError("values and costs must be matching 2-d matrices")
        if self.trip_ids is None:
            self.trip_ids = np.arange(self.values.shape[0], dtype=np.int64)
        self.trip_ids = np.asarray(self.trip_ids, dtype=np.int64)
        if self.trip_ids.shape != (self.values.shape[0],):
            raise ValueError("one trip id per row expected")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.costs))):
            raise ValueError("matrix entries must be finite")
        if np.any(self.costs < 0):
            raise ValueError("costs must be non-negative")
        if self.n and not np.all((self.costs == 0).any(axis=1)):
            raise ValueError("every row needs a zero-cost option")
        self.budget = float(self.budget)
        if not math.isfinite(self.budget):
            raise ValueError("budget must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def objective(self, choice) -> float:
        choice = np.asarray(choice, dtype=np.int64)
        return math.fsum(self.values[np.arange(self.n), choice].tolist())

    def spend(self, choice) -> float:
        choice = np.asarray(choice, dtype=np.int64)
        return math.fsum(self.costs[np.arange(self.n), choice].tolist())

    def zero_cost_choice(self) -> np.ndarray:
        """Per row, the best-valued zero-cost option."""
        masked = np.where(self.costs == 0, self.values, -np.inf)
        return np.argmax(masked, axis=1) if self.n else np.zeros(0, np.int64)

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "costs": self.costs.tolist(),
            "budget": self.budget,
            "trip_ids": self.trip_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationProblem":
        def matrix(rows):
            return np.asarray(rows, dtype=float).reshape(-1, len(ACTIONS))

        return cls(matrix(d["values"]), matrix(d["costs"]), d["budget"], d.get("trip_ids"))


@dataclass
class AllocationSolution:
    choice: np.ndarray
    objective: float
    spend: float
    budget: float
    solver: str
    gap_bound: float = 0.0
    dual_bound: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def X(self) -> np.ndarray:
        x = np.zeros((len(self.choice), len(ACTIONS)), dtype=np.int8)
        x[np.arange(len(self.choice)), self.choice] = 1
        return x

    @property
    def feasible(self) -> bool:
        return self.spend <= self.budget

    def summary(self) -> str:
        return (
            f"objective={self.objective:.6f} spend={self.spend:.4f} budget={self.budget:.4f} "
            f"gap={self.gap_bound:.6g} solver={self.solver}"
        )

    def to_dict(self) -> dict:
        return {
            "X": self.X.tolist(),
            "choice": [int(c) for c in self.choice],
            "objective": self.objective,
            "spend": self.spend,
            "budget": self.budget,
            "solver": self.solver,
            "gap_bound": self.gap_bound,
            "dual_bound": self.dual_bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationSolution":
        x = np.asarray(d["X"], dtype=np.int64)
        if x.size and not np.all(x.sum(axis=1) == 1):
            raise ValueError("X rows must be one-hot")
        choice = np.argmax(x, axis=1) if x.size else np.zeros(0, np.int64)
        return cls(choice, d["objective"], d["spend"], d["budget"], d["solver"], d.get("gap_bound", 0.0), d.get("dual_bound"))


def _finish(problem: AllocationProblem, choice, solver: str, dual_bound=None, **info) -> AllocationSolution:
    choice = np.asarray(choice, dtype=np.int64)
    obj = problem.objective(choice)
    spend = problem.spend(choice)
    if spend > problem.budget:
        raise AssertionError(f"{solver}: spend {spend} exceeds budget {problem.budget}")
    gap = 0.0
    if dual_bound is not None:
        # roundoff guard: the bound is >= the optimum >= obj in exact arithmetic
        dual_bound = max(dual_bound, obj)
        gap = dual_bound - obj
    return AllocationSolution(choice, obj, spend, problem.budget, solver, gap, dual_bound, dict(info))


def _check_budget(problem: AllocationProblem):
    if problem.budget < 0:
        raise ValueError("budget must be >= 0")


# -- exact solvers ------------------------------------------------------------


def solve_enumerate(problem: AllocationProblem) -> AllocationSolution:
    _check_budget(problem)
    n, m = problem.n, problem.m
    if n > MAX_ENUMERATION_ROWS:
        raise ValueError(f"enumeration limited to {MAX_ENUMERATION_ROWS} rows")
    if n == 0:
        return _finish(problem, np.zeros(0, np.int64), "exact", dual_bound=0.0, method="enumerate")
    total_v = problem.values[0].copy()
    total_c = problem.costs[0].copy()
    for i in range(1, n):
        total_v = (total_v[:, None] + problem.values[i][None, :]).ravel()
        total_c = (total_c[:, None] + problem.costs[i][None, :]).ravel()
    score = np.where(total_c <= problem.budget + 1e-9, total_v, -np.inf)
    while True:
        flat = int(np.argmax(score))
        if not np.isfinite(score[flat]):
            raise InfeasibleProblemError("no feasible assignment")
        choice = np.array(np.unravel_index(flat, (m,) * n), dtype=np.int64)
        if problem.spend(choice) <= problem.budget:
            break
        score[flat] = -np.inf
    obj = problem.objective(choice)
    return _finish(problem, choice, "exact", dual_bound=obj, method="enumerate")


def _quantize(costs, eps):
    q = np.ceil(costs / eps - 1e-7).astype(np.int64)
    return np.maximum(q, 0)


def _pareto_options(values_row, q_row):
    """Option indices not dominated by a cheaper-or-equal, better-or-equal one, cheapest first."""
    keep = []
    order = sorted(range(len(values_row)), key=lambda k: (q_row[k], -values_row[k], k))
    best = -np.inf
    for k in order:
        if values_row[k] > best:
            keep.append(k)
            best = values_row[k]
    return keep


def _dp_advance(f, values_row, q_row, opts, out, scratch):
    """One DP row: ``out[b] = max_k f[b - q_k] + v_k`` (``-inf`` when unreachable)."""
    size = f.shape[0]
    # opts is cost-ordered and starts with the row's zero-cost option
    np.add(f, values_row[opts[0]], out=out)
    for k in opts[1:]:
        c = int(q_row[k])
        if c >= size:
            continue
        cand = scratch[: size - c]
        np.add(f[: size - c], values_row[k], out=cand)
        np.maximum(out[c:], cand, out=out[c:])
    return out


def solve_dp(problem: AllocationProblem, eps: float = 0.01, memory_limit: int = 256 << 20) -> AllocationSolution:
    """Exact optimum after rounding every cost up to a multiple of ``eps``.

    The forward pass keeps one budget table and stores a copy at the start
    of every block of rows.  Back-tracking rebuilds one block's tables at a
    time from its stored start and reads each chosen option off the previous
    row's table.  Blocks span all rows when every table fits in
    ``memory_limit`` bytes and ``sqrt(N)`` rows otherwise.
    """
    _check_budget(problem)
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = problem.n
    if n == 0:
        return _finish(problem, np.zeros(0, np.int64), "exact", dual_bound=0.0, method="dp")
    q = _quantize(problem.costs, eps)
    units = int(math.floor(problem.budget / eps + 1e-7))
    units = min(units, int(q.max(axis=1).sum()))
    size = units + 1
    values = problem.values
    opts = [_pareto_options(values[i], q[i]) for i in range(n)]

    # all row tables at once if they fit, else sqrt(N) stored starts plus one block in flight
    block = n if n * size * 8 <= memory_limit else max(1, math.isqrt(n))
    starts = []
    f = np.zeros(size)
    g = np.empty(size)
    scratch = np.empty(size)
    for i in range(n):
        if i % block == 0:
            starts.append(f.copy())
        _dp_advance(f, values[i], q[i], opts[i], g, scratch)
        f, g = g, f
    if not np.isfinite(f[units]):
        raise InfeasibleProblemError("no feasible assignment")

    choice = np.zeros(n, dtype=np.int64)
    b = units
    target = f[units]
    for bi in range(len(starts) - 1, -1, -1):
        lo, hi = bi * block, min(n, (bi + 1) * block)
        tables = [starts[bi]]
        for i in range(lo, hi - 1):
            tables.append(_dp_advance(tables[-1], values[i], q[i], opts[i], np.empty(size), scratch))
        for i in range(hi - 1, lo - 1, -1):
            prev = tables[i - lo]
            best_k, best = None, -np.inf
            for k in opts[i]:
                c = int(q[i, k])
                if c <= b and prev[b - c] + values[i, k] > best:
                    best_k, best = k, prev[b - c] + values[i, k]
            if best_k is None or best != target:
                # the forward pass found target through some option; float sums are reproduced exactly
                raise AssertionError("dp back-tracking lost the optimum")
            choice[i] = best_k
            b -= int(q[i, best_k])
            target = prev[b]

    on_grid = bool(np.all(np.abs(problem.costs / eps - np.rint(problem.costs / eps)) < 1e-7))
    if problem.spend(choice) > problem.budget:
        choice = repair(problem, choice)
    dual = problem.objective(choice) if on_grid else lagrangian_bound(problem)
    return _finish(problem, choice, "exact", dual_bound=dual, method="dp", eps=eps, cost_grid_exact=on_grid)


def solve_exact(problem: AllocationProblem, method: str = "auto", eps: float = 0.01) -> AllocationSolution:
    _check_budget(problem)
    if method == "auto":
        method = "enumerate" if problem.n <= MAX_ENUMERATION_ROWS else "dp"
    if method == "enumerate":
        return solve_enumerate(problem)
    if method == "dp":
        return solve_dp(problem, eps)
    raise ValueError(f"unknown exact method {method!r}")


# -- lagrangian solver ------------------------------------------------------------


def _lagrange_choice(problem: AllocationProblem, lam: float):
    score = problem.values - lam * problem.costs
    best = score.max(axis=1, keepdims=True)
    tol = 1e-12 * np.maximum(1.0, np.abs(best))
    cost = np.where(score >= best - tol, problem.costs, np.inf)
    choice = np.argmin(cost, axis=1)
    return choice, float(np.sum(best))


def lagrangian_value(problem: AllocationProblem, lam: float) -> float:
    """Dual function: an upper bound on the optimum for any ``lam >= 0``."""
    score = problem.values - lam * problem.costs
    return math.fsum(score.max(axis=1).tolist()) + lam * problem.budget


def lagrangian_bound(problem: AllocationProblem, iters: int = 60) -> float:
    lo, hi = 0.0, _lambda_ceiling(problem)
    best = min(lagrangian_value(problem, lo), lagrangian_value(problem, hi))
    # ternary search on the convex dual
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        v1, v2 = lagrangian_value(problem, m1), lagrangian_value(problem, m2)
        best = min(best, v1, v2)
        if v1 <= v2:
            hi = m2
        else:
            lo = m1
    return best


def _lambda_ceiling(problem: AllocationProblem) -> float:
    """A multiplier at which every row prefers its zero-cost option."""
    if problem.n == 0:
        return 0.0
    z = problem.zero_cost_choice()
    base = problem.values[np.arange(problem.n), z][:, None]
    pos = problem.costs > 0
    if not pos.any():
        return 0.0
    ratio = np.where(pos, (problem.values - base) / np.where(pos, problem.costs, 1.0), 0.0)
    return float(max(0.0, ratio.max())) * 2.0 + 1.0


def repair(problem: AllocationProblem, choice, order_key=None) -> np.ndarray:
    """Downgrade picks until the spend fits the budget.

    Moves are taken in order of least value lost per unit of cost saved;
    ties go to the smaller trip id.
    """
    choice = np.array(choice, dtype=np.int64)
    A, C = problem.values, problem.costs
    tid = problem.trip_ids if order_key is None else np.asarray(order_key)
    spend = problem.spend(choice)
    if spend <= problem.budget:
        return choice

    def best_move(i):
        k = choice[i]
        best = None
        for j in range(problem.m):
            saved = C[i, k] - C[i, j]
            if saved <= 0:
                continue
            key = ((A[i, k] - A[i, j]) / saved, -saved, j)
            if best is None or key < best[0]:
                best = (key, j)
        return best

    heap = []
    version = np.zeros(problem.n, dtype=np.int64)
    for i in range(problem.n):
        mv = best_move(i)
        if mv is not None:
            heap.append((mv[0][0], int(tid[i]), mv[0][1], i, mv[1], 0))
    heapq.heapify(heap)
    while spend > problem.budget:
        if not heap:
            raise InfeasibleProblemError("cannot repair: no cheaper options left")
        _, _, _, i, j, ver = heapq.heappop(heap)
        if ver != version[i]:
            continue
        spend -= C[i, choice[i]] - C[i, j]
        choice[i] = j
        version[i] += 1
        mv = best_move(i)
        if mv is not None:
            heapq.heappush(heap, (mv[0][0], int(tid[i]), mv[0][1], i, mv[1], int(version[i])))
        if spend <= problem.budget + 1e-9 * max(1.0, abs(problem.budget)):
            spend = problem.spend(choice)
    return choice


def fill(problem: AllocationProblem, choice) -> np.ndarray:
    """Spend leftover budget on upgrades with the best value per unit cost."""
    choice = np.array(choice, dtype=np.int64)
    A, C = problem.values, problem.costs
    spend = problem.spend(choice)
    slack = problem.budget - spend

    def best_move(i, slack):
        k = choice[i]
        best = None
        for j in range(problem.m):
            extra = C[i, j] - C[i, k]
            gain = A[i, j] - A[i, k]
            if gain <= 0 or extra > slack:
                continue
            key = -gain / extra if extra > 0 else -np.inf
            if best is None or (key, j) < best:
                best = (key, j)
        return best

    heap = []
    for i in range(problem.n):
        mv = best_move(i, slack)
        if mv is not None:
            heap.append((mv[0], int(problem.trip_ids[i]), mv[1], i, int(choice[i])))
    heapq.heapify(heap)
    while heap:
        key, t, j, i, k_at = heapq.heappop(heap)
        if choice[i] != k_at:
            continue
        extra = C[i, j] - C[i, k_at]
        if extra > slack:
            mv = best_move(i, slack)
            if mv is not None:
                heapq.heappush(heap, (mv[0], t, mv[1], i, k_at))
            continue
        choice[i] = j
        slack -= extra
        mv = best_move(i, slack)
        if mv is not None:
            heapq.heappush(heap, (mv[0], t, mv[1], i, j))
    if problem.spend(choice) > problem.budget:
        choice = repair(problem, choice)
    return choice


def solve_lagrangian(problem: AllocationProblem, tolerance: float = 1e-9, max_iter: int = 100) -> AllocationSolution:
    _check_budget(problem)
    if problem.n == 0:
        return _finish(problem, np.zeros(0, np.int64), "lagrangian", dual_bound=0.0, lam=0.0)
    choice0, _ = _lagrange_choice(problem, 0.0)
    if problem.spend(choice0) <= problem.budget:
        return _finish(problem, choice0, "lagrangian", dual_bound=lagrangian_value(problem, 0.0), lam=0.0)

    lo, hi = 0.0, _lambda_ceiling(problem)
    choice_hi, _ = _lagrange_choice(problem, hi)
    while problem.spend(choice_hi) > problem.budget:
        hi *= 2.0
        choice_hi, _ = _lagrange_choice(problem, hi)
    choice_lo = choice0
    dual = min(lagrangian_value(problem, 0.0), lagrangian_value(problem, hi))
    for _ in range(max_iter):
        if hi - lo <= tolerance * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        ch, _ = _lagrange_choice(problem, mid)
        dual = min(dual, lagrangian_value(problem, mid))
        if problem.spend(ch) <= problem.budget:
            hi, choice_hi = mid, ch
        else:
            lo, choice_lo = mid, ch

    cands = [fill(problem, choice_hi), fill(problem, repair(problem, choice_lo))]
    objs = [problem.objective(c) for c in cands]
    best = cands[int(np.argmax(objs))]
    return _finish(problem, best, "lagrangian", dual_bound=dual, lam=hi)


# -- policies ---------------------------------------------------------------------


def assignment_to_policy(solution: AllocationSolution, trip_ids: Sequence[int]) -> dict[int, float]:
    trip_ids = [int(t) for t in trip_ids]
    if len(set(trip_ids)) != len(trip_ids):
        raise ValueError("duplicate trip ids")
    if len(trip_ids) != len(solution.choice):
        raise ValueError("one trip id per solution row expected")
    x = solution.X
    if x.size and not np.all(x.sum(axis=1) == 1):
        raise ValueError("X rows must be one-hot")
    return {t: ACTIONS[int(k)] for t, k in zip(trip_ids, solution.choice)}


def policy_to_assignment(policy: Mapping[int, float], trip_ids: Sequence[int]) -> np.ndarray:
    """One-hot matrix with rows in ``trip_ids`` order."""
    x = np.zeros((len(trip_ids), len(ACTIONS)), dtype=np.int8)
    for row, t in enumerate(trip_ids):
        x[row, action_index(policy[int(t)])] = 1
    return x


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh, sort_keys=True)
        fh.write("\n")
