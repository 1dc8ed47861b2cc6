import math

import numpy as np
import pytest
from conftest import make_trip
from hypothesis import given, settings
from hypothesis import strategies as st

from stincentive.geo import CodingConfig, HexGrid, SpatioTemporalState, TimeSlot
from stincentive.market import ACTIONS, TripArrays, logit
from stincentive.mdp import (
    CONTEXT_FEATURES,
    ReplayBuffer,
    build_transitions,
    context_features,
    crosses_boundary,
    discounted_reward,
    observed_actions,
    penalized_reward,
    reward_matrix,
    state_key,
)

CODING = CodingConfig(hash_table_size=1 << 12)


def worked_trip(**kw):
    # base 0.5 and a 15-point lift at 10% off
    return make_trip(fare=40.0, est_travel_slots=4, base_ecr=0.5, price_sensitivity=10.0 * logit(0.65), **kw)


class TestRewards:
    def test_worked_example(self):
        assert abs(discounted_reward(worked_trip(), 0.9, 0.9) - 5.1585) < 1e-9

    def test_no_discount_zero(self):
        assert discounted_reward(worked_trip(), 1.0, 0.9) == 0.0

    def test_gamma_one(self):
        t = make_trip(fare=37.0, est_travel_slots=5)
        for a in ACTIONS:
            from stincentive.market import delta_ecr

            assert discounted_reward(t, a, 1.0) == delta_ecr(t, a) * 37.0

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            discounted_reward(worked_trip(), 0.9, 0.0)

    def test_penalized(self):
        t = worked_trip()
        assert penalized_reward(t, 0.8, 0.9, 0.0) == discounted_reward(t, 0.8, 0.9)
        assert penalized_reward(t, 1.0, 0.9, 0.7) == discounted_reward(t, 1.0, 0.9)
        # lift of 0.15 at 25% off
        t75 = make_trip(fare=40.0, est_travel_slots=4, base_ecr=0.5, price_sensitivity=4.0 * logit(0.65))
        assert discounted_reward(t75, 0.75, 0.9) == pytest.approx(5.1585, abs=1e-9)
        assert penalized_reward(t75, 0.75, 0.9, 0.5) == pytest.approx(0.1585, abs=1e-9)
        with pytest.raises(ValueError):
            penalized_reward(t, 0.8, 0.9, -1.0)

    def test_matrix_matches_scalar(self, small_week):
        trips = small_week[:200]
        ta = TripArrays.from_records(trips)
        r1 = reward_matrix(ta, 0.9)
        r7 = reward_matrix(ta, 0.9, "eq7", 0.3)
        for i, t in enumerate(trips):
            for k, a in enumerate(ACTIONS):
                assert r1[i, k] == pytest.approx(discounted_reward(t, a, 0.9), rel=1e-12, abs=1e-12)
                assert r7[i, k] == pytest.approx(penalized_reward(t, a, 0.9, 0.3), rel=1e-12, abs=1e-12)

    def test_eq1_non_negative_and_monotone(self, small_week):
        r = reward_matrix(TripArrays.from_records(small_week), 0.9)
        assert np.all(r >= 0)
        assert np.all(np.diff(r, axis=1) <= 0)

    def test_eq7_can_be_negative(self, small_week):
        r = reward_matrix(TripArrays.from_records(small_week), 0.9, "eq7", 1.0)
        assert np.any(r < 0)

    def test_unknown_mode(self, small_week):
        with pytest.raises(ValueError):
            reward_matrix(TripArrays.from_records(small_week[:3]), 0.9, "bcq")


class TestTerminal:
    def test_crossing_three_am(self):
        t = make_trip(request_time=170.0, est_travel_slots=2)
        buf = build_transitions([t], CODING)
        assert bool(buf.column("done")[0])

    def test_not_crossing(self):
        buf = build_transitions([make_trip(request_time=600.0, est_travel_slots=4)], CODING)
        assert not bool(buf.column("done")[0])

    @settings(max_examples=500, deadline=None)
    @given(st.floats(0, 1439.99), st.integers(1, 300))
    def test_brute_force(self, req, slots):
        arr = req + 10 * slots
        brute = any(req < 180 + 1440 * k <= arr for k in range(-1, 4))
        assert bool(crosses_boundary(req, arr)) == brute

    def test_generated_log(self, small_week):
        buf = build_transitions(small_week, CODING)
        ta = TripArrays.from_records(small_week)
        brute = [any(r < 180 + 1440 * k <= a for k in range(0, 3)) for r, a in zip(ta.request_time, ta.arrival_time)]
        assert buf.column("done").tolist() == brute


class TestBuild:
    def test_next_slot(self):
        buf = build_transitions([make_trip(request_time=600.0, est_travel_slots=4)], CODING)
        assert int(buf.column("s_slot")[0]) == 20
        assert int(buf.column("sn_slot")[0]) == 21

    def test_next_day_kind(self):
        # Friday 23:50, 30 minutes, arrives on Saturday
        buf = build_transitions([make_trip(day=4, request_time=1430.0, est_travel_slots=3)], CODING)
        assert int(buf.column("s_day_kind")[0]) == 0
        assert int(buf.column("sn_day_kind")[0]) == 1
        assert int(buf.column("sn_slot")[0]) == 0

    def test_empty(self):
        buf = build_transitions([], CODING)
        assert len(buf) == 0
        assert buf.index_snapshot() == {}

    def test_skips_malformed(self):
        good = make_trip(trip_id=1)
        bad_ecr = make_trip(trip_id=2, base_ecr=1.5)
        outside = make_trip(trip_id=3, dest_lat=41.0)
        buf = build_transitions([good, bad_ecr, outside], CODING)
        assert buf.column("trip_id").tolist() == [1]
        assert buf.header["skipped"] == 2

    def test_reward_column_matches_action(self, small_week):
        buf = build_transitions(small_week, CODING, reward_mode="eq7", alpha=0.2)
        rba = buf.column("reward_by_action")
        a = buf.column("action").astype(int)
        assert np.array_equal(buf.column("reward"), rba[np.arange(len(buf)), a])
        assert buf.header["reward_mode"] == "eq7"

    def test_context_fixture(self):
        # two earlier inquiries at the same spot, one slot apart, then the state of interest
        trips = [
            make_trip(trip_id=1, request_time=545.0, historical_action=1.0, base_ecr=0.4, cr=0.5),
            make_trip(trip_id=2, request_time=575.0, historical_action=1.0, base_ecr=0.6, cr=1.0),
            make_trip(trip_id=3, request_time=605.0),
        ]
        o_ctx, _ = context_features(TripArrays.from_records(trips), HexGrid(CODING))
        inq, comp, arr, gap = o_ctx[2]
        assert inq == 2
        assert comp == pytest.approx(0.4 * 0.5 + 0.6 * 1.0)
        assert arr == 0 and gap == -2
        assert len(CONTEXT_FEATURES) == o_ctx.shape[1]

    def test_normalisation_in_header(self, small_week):
        buf = build_transitions(small_week, CODING)
        ctx = buf.column("s_ctx")
        assert np.allclose(buf.context_mean, ctx.mean(axis=0))
        assert np.all(buf.context_std > 0)
        assert np.all(np.isfinite(ctx))


class TestObservedActions:
    def test_contains_own_action(self, small_week):
        buf = build_transitions(small_week[:300], CODING)
        grid = HexGrid(CODING)
        for t in small_week[:50]:
            s = SpatioTemporalState(t.origin_lat, t.origin_lon, TimeSlot.from_minutes(t.request_time, t.day_kind))
            assert t.historical_action in observed_actions(buf, s, grid)

    def test_unvisited_empty(self):
        buf = build_transitions([make_trip()], CODING)
        s = SpatioTemporalState(39.99, 116.30, TimeSlot(3))
        assert observed_actions(buf, s) == set()

    def test_three_transitions_one_grid(self):
        trips = [make_trip(trip_id=i, request_time=600.0 + i, historical_action=a) for i, a in enumerate([0.75, 0.9, 1.0])]
        trips.append(make_trip(trip_id=9, request_time=900.0, historical_action=0.8))
        buf = build_transitions(trips, CODING)
        s = SpatioTemporalState(39.90, 116.40, TimeSlot(20))
        key = int(state_key(HexGrid(CODING).cell_ids(39.90, 116.40, 0), 20, 0))
        keys = state_key(buf.column("s_cell"), buf.column("s_slot"), buf.column("s_day_kind"))
        scan = {ACTIONS[a] for k, a in zip(keys.tolist(), buf.column("action").tolist()) if k == key}
        assert observed_actions(buf, s) == scan == {0.75, 0.9, 1.0}


def linear_scan_index(buf: ReplayBuffer) -> dict:
    out: dict = {}
    keys = state_key(buf.column("s_cell"), buf.column("s_slot"), buf.column("s_day_kind"))
    for k, a in zip(keys.tolist(), buf.column("action").tolist()):
        out.setdefault(k, set()).add(a)
    return {k: tuple(sorted(v)) for k, v in out.items()}


class TestReplayBuffer:
    def test_round_trip(self, small_week, tmp_path):
        buf = build_transitions(small_week, CODING)
        path = tmp_path / "b.bin"
        buf.save(path)
        again = ReplayBuffer.load(path)
        assert again.header["gamma"] == buf.header["gamma"]
        for name in buf.cols:
            assert np.array_equal(again.column(name), buf.column(name)), name
        assert again.index_snapshot() == buf.index_snapshot()
        assert again.transition(5) == buf.transition(5)

    def test_corrupt(self):
        with pytest.raises(ValueError):
            ReplayBuffer.from_bytes(b"nope" + b"\0" * 20)

    def test_relabel_ring_keeps_index_consistent(self, small_week, rng):
        base = build_transitions(small_week[:120], CODING)
        buf = base.copy(relabel_capacity=50)
        for _ in range(8):
            rows = rng.integers(0, len(buf), 23)
            acts = rng.integers(0, 6, 23)
            buf.add_relabeled(rows, acts, buf.column("reward_by_action")[rows, acts])
            assert buf.index_snapshot() == linear_scan_index(buf)
        assert len(buf) == 120 + 50
        assert buf.column("relabeled").sum() == 50
        # logged rows untouched
        assert np.array_equal(buf.column("action")[:120], base.column("action"))

    def test_relabel_disabled(self, small_week):
        buf = build_transitions(small_week[:10], CODING)
        buf.add_relabeled(np.array([0]), np.array([0]), np.array([1.0]))
        assert len(buf) == 10

    def test_rewards_non_negative(self, small_week):
        buf = build_transitions(small_week, CODING)
        assert np.all(buf.column("reward") >= 0)
        assert math.isclose(buf.gamma, 0.9)
