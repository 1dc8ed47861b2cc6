"""The twelve acceptance criteria, one test each, each printing a verdict line."""

import filecmp
import json
import time

import numpy as np
import pytest
from conftest import (
    CHAIN_GAMMA,
    chain_trips,
    chain_value_iteration,
    make_trip,
    record_verdict,
    run_pipeline,
)
from oracles import (
    enumeration_optimum,
    fixture_batch,
    gradient_errors,
    random_problem,
    target_nets,
)
from scipy.stats import chisquare

from stincentive.alloc import (
    AllocationProblem,
    build_cost_matrix,
    solve_dp,
    solve_exact,
    solve_lagrangian,
)
from stincentive.geo import CodingConfig, HexGrid, SpatioTemporalState, TimeSlot
from stincentive.learning import (
    TrainConfig,
    ValueModel,
    compute_targets,
    constrained_argmax,
    train,
)
from stincentive.market import ACTIONS, delta_ecr, ecr, ecr_matrix, logit
from stincentive.mdp import build_transitions, discounted_reward, observed_actions


def verdict(number, ok, detail):
    record_verdict(number, ok, detail)
    assert ok, detail


def test_criterion_01_reward_worked_example():
    trip = make_trip(fare=40.0, est_travel_slots=4, base_ecr=0.5, price_sensitivity=10.0 * logit(0.65))
    assert abs(delta_ecr(trip, 0.9) - 0.15) < 1e-12
    r = discounted_reward(trip, 0.9, 0.9)
    verdict(1, abs(r - 5.1585) < 1e-9, f"reward {r:.12f} vs 5.1585 (tol 1e-9)")


def test_criterion_02_mckp_exactness():
    started = time.perf_counter()
    mismatches = infeasible = outside_gap = 0
    for seed in range(200):
        rng = np.random.default_rng([2, seed])
        problem = random_problem(rng, 1 + seed % 8)
        oracle, _ = enumeration_optimum(problem)
        exact = solve_exact(problem)
        lag = solve_lagrangian(problem)
        mismatches += exact.objective != oracle
        infeasible += not lag.feasible
        outside_gap += oracle - lag.objective > lag.gap_bound + 1e-9
    elapsed = time.perf_counter() - started
    ok = mismatches == 0 and infeasible == 0 and outside_gap == 0 and elapsed < 30
    verdict(2, ok, f"200 instances: {mismatches} exact mismatches, {infeasible} infeasible, {outside_gap} beyond gap, {elapsed:.1f}s")


def test_criterion_03_lagrangian_vs_dp():
    worst_ratio, slowest = np.inf, 0.0
    for seed in range(100):
        rng = np.random.default_rng([3, seed])
        fares = rng.uniform(8.0, 60.0, 2000)
        values = rng.uniform(-5, 5, (2000, 6))
        values[:, 5] = 0.0
        costs = build_cost_matrix(fares)
        problem = AllocationProblem(values, costs, rng.uniform(0.02, 0.2) * costs.max(axis=1).sum())
        t0 = time.perf_counter()
        lag = solve_lagrangian(problem)
        slowest = max(slowest, time.perf_counter() - t0)
        dp = solve_dp(problem, eps=0.01)
        assert lag.feasible and dp.feasible
        worst_ratio = min(worst_ratio, lag.objective / dp.objective)
    ok = worst_ratio >= 0.98 and slowest < 1.0
    verdict(3, ok, f"100 instances N=2000: worst lagrangian/DP {worst_ratio:.5f} (>= 0.98), slowest solve {slowest:.3f}s (< 1s)")


def test_criterion_04_budget_safety():
    bad = 0
    for seed in range(1000):
        rng = np.random.default_rng([4, seed])
        n = int(rng.integers(0, 40))
        problem = random_problem(rng, n, 0.0 if seed % 10 == 0 else rng.uniform(0, 0.6), low=-5, high=10)
        sols = [solve_lagrangian(problem), solve_exact(problem) if n <= 8 else solve_dp(problem)]
        for sol in sols:
            x = sol.X
            one_hot = x.shape == (n, 6) and np.all(x.sum(axis=1) == 1) and np.all((x == 0) | (x == 1))
            bad += not (one_hot and problem.spend(sol.choice) <= problem.budget)
    verdict(4, bad == 0, f"1000 problems x 2 solvers: {bad} solutions not one-hot or over budget")


def test_criterion_05_gradients():
    worst = {}
    for seed in range(50):
        for name, err in gradient_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    top = max(worst.values())
    verdict(5, top < 1e-4, f"50 seeds, worst relative error {top:.2e} (< 1e-4) over {len(worst)} parameter groups")


def test_criterion_06_targets_fixture():
    batch = fixture_batch(
        [{0, 2}, {1}, range(6), {3, 4, 5}, {0, 5}],
        rewards=[1.5, 0.0, 2.0, 0.25, -1.0],
        done=[0, 1, 0, 1, 0],
        s_tiles=[1, 2, 3, 4, 5],
        sn_tiles=[2, 3, 4, 5, 1],
    )
    v, y, _ = compute_targets(batch, *target_nets(), 0.9, np.random.default_rng(0))
    hand_v = [30.0, 40.0, 60.0, 160.0, 50.0]
    hand_y = [1.5 + 0.9 * 2, 0.0, 2.0 + 0.9 * 4, 0.25, -1.0 + 0.9 * 1]
    ok = v.tolist() == hand_v and np.allclose(y, hand_y, rtol=0, atol=1e-12) and y[1] == 0.0 and y[3] == 0.25
    verdict(6, ok, f"v={v.tolist()} y={np.round(y, 12).tolist()}; terminal rows exact")


def test_criterion_07_chain_oracle():
    buf = build_transitions(chain_trips(), CodingConfig(hash_table_size=4096), gamma=CHAIN_GAMMA)
    vi = np.array(chain_value_iteration(buf.column("reward").tolist()))
    cfg = TrainConfig(steps=5000, relabel=False, batch_size=32, hidden=(32, 16), target_update=100, gamma=CHAIN_GAMMA)
    t0 = time.perf_counter()
    ck = train(buf, cfg)
    elapsed = time.perf_counter() - t0
    q = ck.q.predict(buf.cols["s_tiles"], buf.cols["s_ctx"])[np.arange(3), buf.column("action")]
    rel = np.abs(q - vi) / np.abs(vi)
    ok = bool(np.all(rel <= 0.05)) and elapsed < 60
    verdict(7, ok, f"Q {[round(float(x), 4) for x in q]} vs VI {[round(float(x), 4) for x in vi]}, max rel err {rel.max():.2e}, {elapsed:.1f}s")


def test_criterion_08_batch_constraint(small_week):
    coding = CodingConfig(hash_table_size=4096)
    buf = build_transitions(small_week, coding)
    grid = HexGrid(coding)
    rng = np.random.default_rng(8)
    model = ValueModel.initialize(rng, 6, coding.hash_table_size, embedding_dim=coding.embedding_dim, hidden=(16, 8))
    model.params["b3"][:] = rng.normal(0, 5, 6)
    lat0, lat1, lon0, lon1 = coding.bbox
    logged = [small_week[int(i)] for i in rng.integers(0, len(small_week), 5000)]
    states = [
        SpatioTemporalState(t.origin_lat, t.origin_lon, TimeSlot.from_minutes(t.request_time, t.day_kind), context=np.zeros(4))
        for t in logged
    ]
    states += [
        SpatioTemporalState(rng.uniform(lat0, lat1), rng.uniform(lon0, lon1), TimeSlot(int(rng.integers(48)), "weekday" if rng.random() < 5 / 7 else "weekend"), context=np.zeros(4))
        for _ in range(5000)
    ]
    outside, empty_counts = 0, np.zeros(6, int)
    pick = np.random.default_rng(80)
    for s in states:
        seen = observed_actions(buf, s, grid)
        a = constrained_argmax(model, s, buf, pick, grid)
        if seen:
            outside += a not in seen
        else:
            empty_counts[ACTIONS.index(a)] += 1
    p = chisquare(empty_counts).pvalue
    ok = outside == 0 and p > 0.01 and empty_counts.sum() > 0
    verdict(8, ok, f"10^4 states: {outside} picks outside observed set; {empty_counts.sum()} empty-set picks {empty_counts.tolist()}, chi2 p={p:.3f}")


@pytest.fixture(scope="module")
def report(pipeline):
    with open(pipeline["paths"]["report.json"]) as fh:
        return json.load(fh)


def test_criterion_09_gmv_uplift(pipeline, report):
    rows = report["policies"]
    ip, hist, greedy = rows["ip"], rows["historical"], rows["greedy"]
    ok = (
        all(c == 0 for c in pipeline["codes"])
        and ip["gmv"] > hist["gmv"]
        and ip["gmv"] > greedy["gmv"]
        and not ip["over_budget"]
        and pipeline["seconds"] < 600
    )
    detail = (
        f"IP {ip['gmv_delta_pct']:+.2f}% vs historical, greedy {greedy['gmv_delta_pct']:+.2f}%; "
        f"IP spend {ip['spend']:.1f} <= {report['budget']:.1f}; pipeline {pipeline['seconds']:.0f}s"
    )
    verdict(9, ok, detail)


def test_criterion_10_short_supply(report):
    ratio = report["policies"]["ip"]["short_supply_ratio"]
    ok = ratio["all"] >= 1.5
    verdict(10, ok, f"IP/historical short-supply D ratio {ratio['all']:.3f} (>= 1.5); weekday {ratio['weekday']:.3f}, weekend {ratio['weekend']:.3f}")


def test_criterion_11_determinism(pipeline, tmp_path_factory):
    second = run_pipeline(tmp_path_factory.mktemp("run_b"))
    names = [p.name for p in pipeline["policies"].values()] + ["report.json", "report.md", "cells.csv"]
    a, b = pipeline["dir"], second["dir"]
    differ = [n for n in names if not filecmp.cmp(a / n, b / n, shallow=False)]
    differ += [f"ckpt/{n}" for n in ("params.bin", "manifest.json") if not filecmp.cmp(a / "ckpt" / n, b / "ckpt" / n, shallow=False)]
    verdict(11, not differ and all(c == 0 for c in second["codes"]), f"compared {len(names) + 2} files across two runs; differing: {differ or 'none'}")


def test_criterion_12_ecr_properties():
    rng = np.random.default_rng(12)
    n = 100_000
    base = rng.uniform(1e-4, 1 - 1e-4, n)
    sens = rng.uniform(0.01, 20.0, n)
    e = ecr_matrix(base, sens)
    monotone = bool(np.all(np.diff(e, axis=1) < 0))
    zero = bool(np.all(e[:, -1] - base == 0))
    scalar_bad = 0
    for i in range(0, n, 10):
        t = make_trip(base_ecr=float(base[i]), price_sensitivity=float(sens[i]))
        vals = [ecr(t, a) for a in ACTIONS]
        scalar_bad += not (all(x > y for x, y in zip(vals, vals[1:])) and delta_ecr(t, 1.0) == 0.0)
    ok = monotone and zero and scalar_bad == 0
    verdict(12, ok, f"10^5 trips: strictly decreasing in a: {monotone}; delta_ecr(1.0) == 0: {zero}; scalar-path failures {scalar_bad}")
