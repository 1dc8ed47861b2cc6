"""Policy evaluation: fare totals, spend, discount mix and short-supply steering."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geo import (
    DAY_KINDS,
    EARTH_RADIUS_M,
    SLOT_MINUTES,
    SLOTS_PER_DAY,
    HexGrid,
    day_kind_code,
    day_kind_of,
)
from .market import (
    ACTIONS,
    CityModel,
    TripArrays,
    TripRecord,
    action_index,
    delta_ecr_matrix,
    sample_in_zone,
    simulate_policy,
)

EVAL_LEVEL = 1
_ZONE_SAMPLES = 20000


def _arrays(trips) -> TripArrays:
    return trips if isinstance(trips, TripArrays) else TripArrays.from_records(trips)


def _action_idx(actions) -> np.ndarray:
    return np.array([action_index(a) for a in actions], dtype=np.int64)


def arrival_keys(ta: TripArrays, grid: HexGrid, level: int = EVAL_LEVEL):
    """(cell, slot, day kind) of every trip's destination at its arrival time."""
    arrival = ta.arrival_time
    day = ta.day + (arrival // 1440).astype(np.int64)
    slot = (np.mod(arrival, 1440.0) // SLOT_MINUTES).astype(np.int64)
    kind = np.array([day_kind_code(day_kind_of(int(d))) for d in day], dtype=np.int64)
    cell = grid.cell_ids(ta.dest_lat, ta.dest_lon, level) if len(ta) else np.zeros(0, np.int64)
    return cell, slot, kind


def origin_keys(ta: TripArrays, grid: HexGrid, level: int = EVAL_LEVEL):
    slot = (ta.request_time // SLOT_MINUTES).astype(np.int64)
    cell = grid.cell_ids(ta.origin_lat, ta.origin_lon, level) if len(ta) else np.zeros(0, np.int64)
    return cell, slot, ta.day_kind.copy()


def _group_sum(cell, slot, kind, weights) -> dict:
    out: dict = {}
    for c, s, k, w in zip(cell.tolist(), slot.tolist(), kind.tolist(), np.asarray(weights, dtype=float).tolist()):
        key = (c, s, DAY_KINDS[k])
        out[key] = out.get(key, 0.0) + w
    return out


def dest_delta_ecr(trips, actions, grid: HexGrid, level: int = EVAL_LEVEL) -> dict:
    """Sum of ECR lift over trips arriving in each (cell, slot, day kind)."""
    ta = _arrays(trips)
    if len(ta) == 0:
        return {}
    d = delta_ecr_matrix(ta.base_ecr, ta.price_sensitivity)[np.arange(len(ta)), _action_idx(actions)]
    return _group_sum(*arrival_keys(ta, grid, level), d)


def zone_cell_shares(city: CityModel, grid: HexGrid, level: int = EVAL_LEVEL, samples: int = _ZONE_SAMPLES):
    """Fraction of each zone's disk falling in each cell, by fixed-seed sampling."""
    lat0 = 0.5 * (city.bbox[0] + city.bbox[1])
    ky = math.radians(1.0) * EARTH_RADIUS_M
    kx = ky * math.cos(math.radians(lat0))
    shares = []
    for zi, zone in enumerate(city.zones):
        rng = np.random.default_rng([0x5EED, zi])
        lat, lon = sample_in_zone(rng, zone, samples, city, kx, ky)
        cells, counts = np.unique(grid.cell_ids(lat, lon, level), return_counts=True)
        shares.append(dict(zip(cells.tolist(), (counts / samples).tolist())))
    return shares


def supply_minus_demand(trips, city: CityModel, grid: HexGrid, level: int = EVAL_LEVEL, days=None) -> dict:
    """Idle-driver supply minus inquiry count per (cell, slot, day kind).

    Supply is the city model's per-zone driver rate spread over the zone's
    cells, summed over the days of each kind covered by the log.
    """
    ta = _arrays(trips)
    if days is None:
        days = range(city.days)
    n_days = {dk: sum(1 for d in days if day_kind_of(d) == dk) for dk in DAY_KINDS}
    out: dict = {}
    shares = zone_cell_shares(city, grid, level)
    for dk in DAY_KINDS:
        if n_days[dk] == 0:
            continue
        rates = city.rates("supply_rate", dk)
        for zi, share in enumerate(shares):
            for cell, frac in share.items():
                for slot in range(SLOTS_PER_DAY):
                    key = (cell, slot, dk)
                    out[key] = out.get(key, 0.0) + n_days[dk] * rates[zi, slot] * frac
    if len(ta):
        for key, count in _group_sum(*origin_keys(ta, grid, level), np.ones(len(ta))).items():
            out[key] = out.get(key, 0.0) - count
    return out


@dataclass
class ShortSupplySummary:
    total: float
    baseline_total: float
    ratio: float

    @classmethod
    def from_sums(cls, total: float, baseline_total: float) -> "ShortSupplySummary":
        ratio = total / baseline_total if baseline_total > 0 else math.nan
        return cls(total, baseline_total, ratio)


def short_supply_sum(d_values: Mapping, smd: Mapping) -> dict:
    """Sum of D over short-supply keys, overall and per day kind."""
    sums = {"all": 0.0, **{dk: 0.0 for dk in DAY_KINDS}}
    for key, d in d_values.items():
        if smd.get(key, 0.0) < 0:
            sums["all"] += d
            sums[key[2]] += d
    return sums


def fare_deciles(fares) -> np.ndarray:
    return np.quantile(np.asarray(fares, dtype=float), np.linspace(0, 1, 11)) if len(fares) else np.zeros(11)


def action_histograms(ta: TripArrays, actions) -> dict:
    idx = _action_idx(actions)
    overall = np.bincount(idx, minlength=len(ACTIONS))
    edges = fare_deciles(ta.fare)
    band = np.clip(np.searchsorted(edges[1:-1], ta.fare, side="right"), 0, 9)
    per_band = [np.bincount(idx[band == b], minlength=len(ACTIONS)).tolist() for b in range(10)]
    return {
        "actions": list(ACTIONS),
        "overall": overall.tolist(),
        "fare_band_edges": [round(float(e), 4) for e in edges],
        "per_fare_decile": per_band,
    }


def _pct(x, base):
    if base == 0:
        return 0.0 if x == 0 else math.inf
    return 100.0 * (x - base) / base


def compare_policies(
    trips: Sequence[TripRecord] | TripArrays,
    policies: Mapping[str, Sequence[float]],
    budget: float,
    city: CityModel,
    grid: HexGrid,
    baseline: str | None = None,
    level: int = EVAL_LEVEL,
    replications: int = 0,
    seed: int = 0,
) -> dict:
    """Evaluate several policies on one trip set in expected mode.

    With ``replications > 0`` each policy also gets the mean and standard
    deviation of realised GMV over that many sampled runs; replication ``r``
    uses the stream ``(seed, r)`` for every policy.
    """
    ta = _arrays(trips)
    names = list(policies)
    if not names:
        raise ValueError("no policies to compare")
    baseline = baseline or names[0]
    if baseline not in policies:
        raise ValueError(f"baseline {baseline!r} not among policies")
    smd = supply_minus_demand(ta, city, grid, level, days=sorted(set(ta.day.tolist())) or None)
    rows = {}
    for name in names:
        actions = np.asarray(policies[name], dtype=float)
        if actions.shape != (len(ta),):
            raise ValueError(f"policy {name!r} has {actions.shape} actions for {len(ta)} trips")
        out = simulate_policy(ta, actions)
        d_values = dest_delta_ecr(ta, actions, grid, level)
        gmv_by_kind = {dk: math.fsum(out.expected_gmv[ta.day_kind == i].tolist()) for i, dk in enumerate(DAY_KINDS)}
        spend_by_kind = {dk: math.fsum(out.spend[ta.day_kind == i].tolist()) for i, dk in enumerate(DAY_KINDS)}
        rows[name] = {
            "gmv": out.total_gmv,
            "gmv_by_day_kind": gmv_by_kind,
            "spend": out.total_spend,
            "spend_by_day_kind": spend_by_kind,
            "budget": budget,
            "over_budget": out.total_spend > budget,
            "short_supply_d": short_supply_sum(d_values, smd),
            "histograms": action_histograms(ta, actions),
        }
        if replications > 0:
            draws = np.array([simulate_policy(ta, actions, seed=[seed, r], mode="sampled").total_gmv for r in range(replications)])
            rows[name]["sampled_gmv"] = {
                "replications": replications,
                "mean": float(draws.mean()),
                "std": float(draws.std(ddof=1)) if replications > 1 else 0.0,
            }
    base = rows[baseline]
    for name, row in rows.items():
        row["gmv_delta_pct"] = _pct(row["gmv"], base["gmv"])
        row["gmv_delta_pct_by_day_kind"] = {
            dk: _pct(row["gmv_by_day_kind"][dk], base["gmv_by_day_kind"][dk]) for dk in DAY_KINDS
        }
        row["short_supply_ratio"] = {
            k: ShortSupplySummary.from_sums(row["short_supply_d"][k], base["short_supply_d"][k]).ratio
            for k in row["short_supply_d"]
        }
    return {
        "n_trips": len(ta),
        "budget": budget,
        "baseline": baseline,
        "eval_level": level,
        "policies": rows,
        "budget_violations": [n for n, r in rows.items() if r["over_budget"]],
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=True) + "\n"


def report_markdown(report: dict) -> str:
    lines = [
        f"# Policy comparison ({report['n_trips']} trips, baseline `{report['baseline']}`)",
        "",
        f"Budget: {report['budget']:.2f}",
        "",
        "| policy | expected GMV | delta % | weekday % | weekend % | spend | over budget | short-supply D | ratio |",
        "|---|---:|---:|---:|---:|---:|---|---:|---:|",
    ]
    for name, r in report["policies"].items():
        lines.append(
            f"| {name} | {r['gmv']:.2f} | {r['gmv_delta_pct']:+.2f} | {r['gmv_delta_pct_by_day_kind']['weekday']:+.2f} | "
            f"{r['gmv_delta_pct_by_day_kind']['weekend']:+.2f} | {r['spend']:.2f} | {'yes' if r['over_budget'] else 'no'} | "
            f"{r['short_supply_d']['all']:.3f} | {r['short_supply_ratio']['all']:.3f} |"
        )
    lines += ["", "## Discount mix", "", "| policy | " + " | ".join(f"{a:g}" for a in ACTIONS) + " |", "|---|" + "---:|" * len(ACTIONS)]
    for name, r in report["policies"].items():
        lines.append(f"| {name} | " + " | ".join(str(c) for c in r["histograms"]["overall"]) + " |")
    return "\n".join(lines) + "\n"


def cell_table(
    trips,
    actions,
    city: CityModel,
    grid: HexGrid,
    v_values: Mapping | None = None,
    level: int = EVAL_LEVEL,
) -> str:
    """Per-(cell, slot, day kind) CSV for external plotting, sorted by (cell, slot)."""
    ta = _arrays(trips)
    d_values = dest_delta_ecr(ta, actions, grid, level)
    smd = supply_minus_demand(ta, city, grid, level, days=sorted(set(ta.day.tolist())) or None)
    keys = sorted(set(d_values) | set(smd), key=lambda k: (k[0], k[1], day_kind_code(k[2])))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_id", "lat", "lon", "slot", "day_kind", "v_value", "d_value", "supply_minus_demand"])
    for key in keys:
        cell, slot, dk = key
        lat, lon = grid.cell_center(cell)
        v = "" if v_values is None or key not in v_values else repr(float(v_values[key]))
        d, gap = float(d_values.get(key, 0.0)), float(smd.get(key, 0.0))
        w.writerow([cell, f"{lat:.6f}", f"{lon:.6f}", slot, dk, v, repr(d), repr(gap)])
    return buf.getvalue()
