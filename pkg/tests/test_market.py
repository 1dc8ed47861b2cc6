import math

import numpy as np
import pytest
from conftest import make_trip
from hypothesis import given, settings
from hypothesis import strategies as st

from stincentive.market import (
    ACTIONS,
    CityModel,
    ConfigError,
    InvalidActionError,
    TripArrays,
    Zone,
    delta_ecr,
    delta_ecr_matrix,
    ecr,
    ecr_matrix,
    generate_city,
    logit,
    read_trips,
    sigmoid,
    simulate_policy,
    standard_city,
    write_trips,
)

BBOX = (39.80, 40.02, 116.25, 116.55)


def one_zone_city(rate=10.0, supply=5.0, days=1):
    zone = Zone(
        name="only",
        archetype="downtown",
        center=(39.91, 116.40),
        radius_m=1500.0,
        inquiry_rate={"weekday": [rate] * 48, "weekend": [rate] * 48},
        supply_rate={"weekday": [supply] * 48, "weekend": [supply] * 48},
        destinations={"weekday": [1.0], "weekend": [1.0]},
    )
    return CityModel(bbox=BBOX, zones=[zone], days=days)


class TestEcr:
    def test_no_discount_is_base(self):
        t = make_trip(base_ecr=0.37, price_sensitivity=6.0)
        assert ecr(t, 1.0) == 0.37

    def test_zero_sensitivity(self):
        t = make_trip(price_sensitivity=0.0)
        assert all(ecr(t, a) == pytest.approx(t.base_ecr, abs=1e-15) for a in ACTIONS)

    def test_logistic_value(self):
        t = make_trip(base_ecr=0.5, price_sensitivity=4.0)
        assert ecr(t, 0.75) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)

    def test_off_menu_action(self):
        with pytest.raises(InvalidActionError):
            ecr(make_trip(), 0.7)
        with pytest.raises(InvalidActionError):
            delta_ecr(make_trip(), 1.05)

    def test_delta_zero_at_no_discount(self):
        assert delta_ecr(make_trip(), 1.0) == 0.0

    def test_worked_example_lift(self):
        # 0.5 -> 0.65 when 10% off
        t = make_trip(base_ecr=0.5, price_sensitivity=10.0 * math.log(0.65 / 0.35))
        assert delta_ecr(t, 0.9) == pytest.approx(0.15, abs=1e-12)

    def test_delta_positive_below_one(self):
        t = make_trip(price_sensitivity=0.5)
        assert all(delta_ecr(t, a) > 0 for a in ACTIONS[:-1])

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0.001, 0.999), st.floats(0.01, 50.0))
    def test_monotone_and_bounded(self, base, sens):
        t = make_trip(base_ecr=base, price_sensitivity=sens)
        values = [ecr(t, a) for a in ACTIONS]
        assert all(0.0 < v < 1.0 for v in values)
        assert all(values[i] > values[i + 1] for i in range(len(values) - 1))
        assert all(0.0 <= delta_ecr(t, a) < 1.0 for a in ACTIONS)

    def test_matrix_matches_scalar(self, rng):
        base = rng.uniform(0.05, 0.95, 40)
        sens = rng.uniform(0.0, 9.0, 40)
        m = ecr_matrix(base, sens)
        d = delta_ecr_matrix(base, sens)
        for i in range(40):
            t = make_trip(base_ecr=float(base[i]), price_sensitivity=float(sens[i]))
            for k, a in enumerate(ACTIONS):
                assert m[i, k] == pytest.approx(ecr(t, a), abs=1e-15)
                assert d[i, k] == pytest.approx(delta_ecr(t, a), abs=1e-15)
        assert np.all(d[:, -1] == 0.0)

    def test_logit_sigmoid_inverse(self):
        p = np.linspace(0.01, 0.99, 50)
        assert np.allclose(sigmoid(logit(p)), p)


class TestGenerate:
    def test_zero_rates_empty(self):
        assert generate_city(0, one_zone_city(rate=0.0)) == []

    def test_poisson_total(self):
        trips = generate_city(4, one_zone_city(rate=10.0))
        expected = 480.0
        assert abs(len(trips) - expected) <= 3 * math.sqrt(expected)

    def test_zone_slot_counts_follow_rates(self):
        city = standard_city()
        trips = generate_city(5, city)
        for dk in ("weekday", "weekend"):
            n_days = sum(1 for d in range(city.days) if city.day_kind(d) == dk)
            rates = city.rates("inquiry_rate", dk) * n_days
            for zi, z in enumerate(city.zones):
                got = sum(1 for t in trips if t.origin_zone == z.name and t.day_kind == dk)
                exp = float(rates[zi].sum())
                assert abs(got - exp) <= 3 * math.sqrt(exp), (z.name, dk)

    def test_deterministic_bytes(self, tmp_path, small_city):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_trips(a, generate_city(9, small_city))
        write_trips(b, generate_city(9, small_city))
        assert a.read_bytes() == b.read_bytes()
        write_trips(b, generate_city(10, small_city))
        assert a.read_bytes() != b.read_bytes()

    def test_trips_valid(self, small_week, small_city):
        assert small_week
        for t in small_week:
            t.validate()
            assert 0 <= t.request_time < 1440
            assert small_city.day_kind(t.day) == t.day_kind
        assert len({t.trip_id for t in small_week}) == len(small_week)

    def test_standard_city_has_short_supply(self):
        city = standard_city()
        assert city.has_short_supply()
        inq = city.rates("inquiry_rate", "weekday")
        sup = city.rates("supply_rate", "weekday")
        res = city.zone_names.index("res_north")
        morning = slice(15, 19)  # 07:30 - 09:30
        assert np.all(sup[res, morning] < inq[res, morning])

    def test_historical_spend_ratio(self, small_week):
        ta = TripArrays.from_records(small_week)
        ratio = float(np.sum((1 - ta.historical_action) * ta.fare) / np.sum(ta.fare))
        assert 0.03 < ratio < 0.06

    def test_week_split(self):
        city = standard_city()
        assert [city.day_kind(d) for d in range(7)] == ["weekday"] * 5 + ["weekend"] * 2


class TestCityConfig:
    def test_json_round_trip(self, tmp_path):
        city = standard_city()
        city.save(tmp_path / "c.json")
        again = CityModel.load(tmp_path / "c.json")
        assert again.to_dict() == city.to_dict()

    def test_negative_rate(self):
        city = one_zone_city()
        city.zones[0].inquiry_rate["weekday"][3] = -1.0
        with pytest.raises(ConfigError):
            generate_city(0, city)

    def test_bad_mixture(self):
        city = one_zone_city()
        city.zones[0].destinations["weekday"] = [0.5]
        with pytest.raises(ConfigError):
            city.validate()

    def test_bad_historical_policy(self):
        city = one_zone_city()
        city.historical_policy = {"0.7": 1.0}
        with pytest.raises(ConfigError):
            city.validate()

    def test_malformed_dict(self):
        with pytest.raises(ConfigError):
            CityModel.from_dict({"bbox": BBOX, "zones": [{"name": "x"}]})

    def test_rate_scaling(self):
        n1 = len(generate_city(3, standard_city(0.5)))
        n2 = len(generate_city(3, standard_city(1.0)))
        # difference of independent Poisson totals, 3 sigma
        assert abs(n2 - 2 * n1) <= 3 * math.sqrt(n2 + 4 * n1)


class TestTripIO:
    def test_round_trip(self, tmp_path, small_week):
        path = tmp_path / "t.jsonl"
        write_trips(path, small_week[:50])
        assert read_trips(path) == small_week[:50]

    def test_bad_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"trip_id": 1}\n')
        with pytest.raises(ValueError, match="bad trip record"):
            read_trips(path)


class TestSimulate:
    def test_no_discount_expected(self, small_week):
        ta = TripArrays.from_records(small_week)
        out = simulate_policy(ta, np.ones(len(ta)))
        assert np.allclose(out.expected_gmv, ta.fare * ta.base_ecr * ta.cr, rtol=0, atol=1e-12)
        assert out.total_spend == 0.0

    def test_single_trip(self):
        t = make_trip(fare=40.0, base_ecr=0.5, price_sensitivity=0.0, cr=1.0)
        out = simulate_policy([t], [0.9])
        assert out.expected_gmv[0] == pytest.approx(18.0, abs=1e-12)
        assert out.spend[0] == pytest.approx(4.0, abs=1e-12)

    def test_length_mismatch(self, small_week):
        with pytest.raises(ValueError):
            simulate_policy(small_week[:3], [1.0, 1.0])

    def test_cr_independent_of_action(self, small_week):
        trips = small_week[:30]
        outs = [simulate_policy(trips, [a] * 30) for a in ACTIONS]
        for o in outs[1:]:
            assert np.array_equal(o.completed, outs[0].completed)

    def test_spend_accounting(self, small_week, rng):
        ta = TripArrays.from_records(small_week)
        actions = np.array(ACTIONS)[rng.integers(0, 6, len(ta))]
        out = simulate_policy(ta, actions)
        assert out.total_spend == math.fsum(((1.0 - actions) * ta.fare).tolist())
        assert np.isclose(out.gmv_by_slot().sum(), out.total_gmv)

    def test_sampled_needs_seed_and_is_reproducible(self, small_week):
        with pytest.raises(ValueError):
            simulate_policy(small_week, [1.0] * len(small_week), mode="sampled")
        a = simulate_policy(small_week, [0.8] * len(small_week), seed=3, mode="sampled")
        b = simulate_policy(small_week, [0.8] * len(small_week), seed=3, mode="sampled")
        assert np.array_equal(a.expected_gmv, b.expected_gmv)

    def test_sampled_matches_expected(self):
        # 10^5 independent replications of a 5-trip fixture
        base = [
            make_trip(trip_id=i, fare=20.0 + 7 * i, base_ecr=0.2 + 0.1 * i, price_sensitivity=3.0 + i, cr=0.7 + 0.05 * i)
            for i in range(5)
        ]
        actions = [0.75, 0.8, 0.9, 0.95, 1.0]
        reps = 20_000
        trips = base * reps
        acts = actions * reps
        exp = simulate_policy(trips, acts)
        smp = simulate_policy(trips, acts, seed=2024, mode="sampled")
        p = exp.called * exp.completed
        var = float(np.sum((TripArrays.from_records(trips).fare * exp.action) ** 2 * p * (1 - p)))
        assert abs(smp.total_gmv - exp.total_gmv) <= 3 * math.sqrt(var)

    def test_csv_columns(self, small_week):
        out = simulate_policy(small_week[:4], [1.0, 0.9, 0.8, 0.75])
        lines = out.to_csv().splitlines()
        assert lines[0] == "trip_id,action,expected_gmv,spend,called,completed"
        assert len(lines) == 5
