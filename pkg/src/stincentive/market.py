"""Synthetic city trip logs and the demand-response model.

A :class:`CityModel` describes zones with per-slot inquiry rates, driver
supply and destination mixtures.  :func:`generate_city` samples Poisson
inquiry counts per zone and slot and turns each inquiry into a
:class:`TripRecord` carrying the parameters of its conversion model.

The conversion probability (ECR) responds to the discount multiplier ``a``
through a logistic curve::

    logit(ecr(a)) = logit(base_ecr) + price_sensitivity * (1 - a)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geo import DAY_KINDS, EARTH_RADIUS_M, SLOT_MINUTES, SLOTS_PER_DAY, day_kind_of

log = logging.getLogger(__name__)

ACTIONS = (0.75, 0.8, 0.85, 0.9, 0.95, 1.0)
NO_DISCOUNT = len(ACTIONS) - 1
ACTION_ARRAY = np.array(ACTIONS)
SUB_SEGMENT_MINUTES = 10


class InvalidActionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def action_index(a: float) -> int:
    for k, v in enumerate(ACTIONS):
        if abs(v - a) < 1e-9:
            return k
    raise InvalidActionError(f"action {a!r} not in menu {ACTIONS}")


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass(frozen=True)
class TripRecord:
    trip_id: int
    day: int
    day_kind: str
    request_time: float
    origin_lat: float
    origin_lon: float
    dest_lat: float
    dest_lon: float
    est_travel_slots: int
    fare: float
    base_ecr: float
    price_sensitivity: float
    cr: float
    historical_action: float = 1.0
    origin_zone: str = ""
    dest_zone: str = ""

    def validate(self):
        if not 0.0 < self.base_ecr < 1.0:
            raise ValueError(f"trip {self.trip_id}: base_ecr {self.base_ecr} outside (0, 1)")
        if not 0.0 < self.cr <= 1.0:
            raise ValueError(f"trip {self.trip_id}: cr {self.cr} outside (0, 1]")
        if not self.fare > 0.0:
            raise ValueError(f"trip {self.trip_id}: fare must be positive")
        if self.est_travel_slots < 1:
            raise ValueError(f"trip {self.trip_id}: est_travel_slots must be >= 1")
        if self.price_sensitivity < 0.0:
            raise ValueError(f"trip {self.trip_id}: negative price sensitivity")
        if not 0.0 <= self.request_time < 24 * 60:
            raise ValueError(f"trip {self.trip_id}: request_time outside the day")
        if self.day_kind not in DAY_KINDS:
            raise ValueError(f"trip {self.trip_id}: unknown day kind {self.day_kind!r}")
        action_index(self.historical_action)

    @property
    def travel_minutes(self) -> int:
        return self.est_travel_slots * SUB_SEGMENT_MINUTES

    @property
    def arrival_time(self) -> float:
        """Arrival, in minutes since midnight of ``day`` (may exceed one day)."""
        return self.request_time + self.travel_minutes


def ecr(trip: TripRecord, a: float) -> float:
    k = action_index(a)
    if k == NO_DISCOUNT:
        return trip.base_ecr
    return float(sigmoid(logit(trip.base_ecr) + trip.price_sensitivity * (1.0 - ACTIONS[k])))


def delta_ecr(trip: TripRecord, a: float) -> float:
    return ecr(trip, a) - trip.base_ecr


def ecr_matrix(base_ecr, sensitivity) -> np.ndarray:
    """ECR for every trip and menu action, shape ``(n, 6)``."""
    base = np.asarray(base_ecr, dtype=float)
    sens = np.asarray(sensitivity, dtype=float)
    z = logit(base)[:, None] + sens[:, None] * (1.0 - ACTION_ARRAY[None, :])
    out = sigmoid(z)
    out[:, NO_DISCOUNT] = base
    return out


def delta_ecr_matrix(base_ecr, sensitivity) -> np.ndarray:
    return ecr_matrix(base_ecr, sensitivity) - np.asarray(base_ecr, dtype=float)[:, None]


@dataclass
class TripArrays:
    """Column view of a trip log for vectorised work."""

    trip_id: np.ndarray
    day: np.ndarray
    day_kind: np.ndarray
    request_time: np.ndarray
    origin_lat: np.ndarray
    origin_lon: np.ndarray
    dest_lat: np.ndarray
    dest_lon: np.ndarray
    est_travel_slots: np.ndarray
    fare: np.ndarray
    base_ecr: np.ndarray
    price_sensitivity: np.ndarray
    cr: np.ndarray
    historical_action: np.ndarray

    @classmethod
    def from_records(cls, trips: Sequence[TripRecord]) -> "TripArrays":
        def col(name, dtype):
            return np.array([getattr(t, name) for t in trips], dtype=dtype)

        return cls(
            trip_id=col("trip_id", np.int64),
            day=col("day", np.int64),
            day_kind=np.array([DAY_KINDS.index(t.day_kind) for t in trips], dtype=np.int64),
            request_time=col("request_time", float),
            origin_lat=col("origin_lat", float),
            origin_lon=col("origin_lon", float),
            dest_lat=col("dest_lat", float),
            dest_lon=col("dest_lon", float),
            est_travel_slots=col("est_travel_slots", np.int64),
            fare=col("fare", float),
            base_ecr=col("base_ecr", float),
            price_sensitivity=col("price_sensitivity", float),
            cr=col("cr", float),
            historical_action=col("historical_action", float),
        )

    def __len__(self):
        return len(self.trip_id)

    @property
    def arrival_time(self) -> np.ndarray:
        return self.request_time + self.est_travel_slots * SUB_SEGMENT_MINUTES

    def delta_ecr(self) -> np.ndarray:
        return delta_ecr_matrix(self.base_ecr, self.price_sensitivity)


# -- city model ---------------------------------------------------------------


@dataclass
class Zone:
    """One archetypal area of the city.

    Rates are lists of 48 per-slot values keyed by day kind.  ``destinations``
    maps day kind to either one mixture over zones or 48 per-slot mixtures.
    """

    name: str
    archetype: str
    center: tuple[float, float]
    radius_m: float
    inquiry_rate: dict
    supply_rate: dict
    destinations: dict
    fare_multiplier: float = 1.0
    fare_dispersion: float = 0.2
    base_ecr_beta: tuple[float, float] = (5.0, 5.0)
    cr_beta: tuple[float, float] = (8.0, 2.0)
    sensitivity_range: tuple[float, float] = (1.0, 8.0)


@dataclass
class CityModel:
    bbox: tuple[float, float, float, float]
    zones: list[Zone]
    days: int = 7
    speed_kmh: float = 25.0
    eta_noise: float = 0.15
    fare_base: float = 8.0
    fare_per_km: float = 2.0
    historical_policy: dict = field(
        default_factory=lambda: {"0.75": 0.08, "0.8": 0.10, "0.85": 0.02, "0.9": 0.02, "0.95": 0.02, "1.0": 0.76}
    )

    # -- accessors ------------------------------------------------------------

    @property
    def zone_names(self) -> list[str]:
        return [z.name for z in self.zones]

    def day_kind(self, day: int) -> str:
        return day_kind_of(day)

    def rates(self, attr: str, day_kind: str) -> np.ndarray:
        """Per-zone, per-slot rate matrix of shape ``(zones, 48)``."""
        return np.array([getattr(z, attr)[day_kind] for z in self.zones], dtype=float)

    def destination_matrix(self, zone: Zone, day_kind: str) -> np.ndarray:
        mix = np.asarray(zone.destinations[day_kind], dtype=float)
        if mix.ndim == 1:
            mix = np.broadcast_to(mix, (SLOTS_PER_DAY, len(self.zones)))
        return mix

    def historical_mixture(self) -> np.ndarray:
        p = np.zeros(len(ACTIONS))
        for key, prob in self.historical_policy.items():
            p[action_index(float(key))] = prob
        return p

    def has_short_supply(self) -> bool:
        return any(np.any(self.rates("supply_rate", dk) < self.rates("inquiry_rate", dk)) for dk in DAY_KINDS)

    # -- validation / io ------------------------------------------------------

    def validate(self):
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ConfigError("degenerate bounding box")
        if not self.zones:
            raise ConfigError("city needs at least one zone")
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        if self.speed_kmh <= 0 or self.eta_noise < 0 or self.fare_base < 0 or self.fare_per_km < 0:
            raise ConfigError("speed, noise and fare parameters must be non-negative (speed positive)")
        names = self.zone_names
        if len(set(names)) != len(names):
            raise ConfigError("duplicate zone names")
        for z in self.zones:
            lat, lon = z.center
            if not (lat_min <= lat <= lat_max and lon_min <= lon <= lon_max):
                raise ConfigError(f"zone {z.name}: centre outside bounding box")
            if z.radius_m <= 0:
                raise ConfigError(f"zone {z.name}: radius must be positive")
            for attr in ("inquiry_rate", "supply_rate"):
                for dk in DAY_KINDS:
                    r = np.asarray(getattr(z, attr).get(dk, ()), dtype=float)
                    if r.shape != (SLOTS_PER_DAY,):
                        raise ConfigError(f"zone {z.name}: {attr}[{dk}] needs {SLOTS_PER_DAY} values")
                    if np.any(r < 0) or not np.all(np.isfinite(r)):
                        raise ConfigError(f"zone {z.name}: {attr}[{dk}] must be finite and >= 0")
            for dk in DAY_KINDS:
                if dk not in z.destinations:
                    raise ConfigError(f"zone {z.name}: destinations[{dk}] missing")
                mix = np.asarray(z.destinations[dk], dtype=float)
                if mix.shape not in ((len(self.zones),), (SLOTS_PER_DAY, len(self.zones))):
                    raise ConfigError(f"zone {z.name}: destination mixture has shape {mix.shape}")
                if np.any(mix < 0) or not np.allclose(mix.sum(axis=-1), 1.0, atol=1e-9):
                    raise ConfigError(f"zone {z.name}: destination mixture must be >= 0 and sum to 1")
            a, b = z.base_ecr_beta
            c, d = z.cr_beta
            if min(a, b, c, d) <= 0:
                raise ConfigError(f"zone {z.name}: beta parameters must be positive")
            lo, hi = z.sensitivity_range
            if not 0 < lo <= hi:
                raise ConfigError(f"zone {z.name}: sensitivity range must satisfy 0 < lo <= hi")
            if z.fare_multiplier <= 0 or z.fare_dispersion < 0:
                raise ConfigError(f"zone {z.name}: bad fare parameters")
        try:
            p = self.historical_mixture()
        except InvalidActionError as exc:
            raise ConfigError(str(exc)) from None
        if np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ConfigError("historical policy must be a distribution over the action menu")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "CityModel":
        d = dict(d)
        try:
            zones = [Zone(**z) for z in d.pop("zones")]
            city = cls(zones=zones, **d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed city model: {exc}") from None
        city.bbox = tuple(city.bbox)
        for z in city.zones:
            z.center = tuple(z.center)
        city.validate()
        return city

    @classmethod
    def load(cls, path) -> "CityModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _profile(base, peaks=()):
    """48-slot curve: ``base`` plus Gaussian bumps ``(centre_hour, width_h, height)``."""
    hours = (np.arange(SLOTS_PER_DAY) + 0.5) / 2.0
    night = 0.25 + 0.75 / (1.0 + np.exp(-(hours - 6.0) * 1.5)) / (1.0 + np.exp((hours - 23.5) * 1.5))
    curve = base * night
    for centre, width, height in peaks:
        curve = curve + height * np.exp(-0.5 * ((hours - centre) / width) ** 2)
    return [round(float(v), 4) for v in curve]


def standard_city(scale: float = 1.0) -> CityModel:
    """A six-zone city with a commuting pattern.

    Residential areas send people downtown in the morning and run short of
    drivers while doing so; downtown empties out in the evening.
    """
    lat0, lon0 = 39.91, 116.40
    names = ["downtown", "midtown", "res_north", "res_east", "suburb_west", "suburb_south"]
    offsets_km = {
        "downtown": (0.0, 0.0),
        "midtown": (2.5, -2.5),
        "res_north": (7.0, 1.0),
        "res_east": (0.5, 8.0),
        "suburb_west": (-1.0, -9.5),
        "suburb_south": (-8.0, 1.5),
    }

    def center(name):
        dy, dx = offsets_km[name]
        lat = lat0 + math.degrees(dy * 1000.0 / EARTH_RADIUS_M)
        lon = lon0 + math.degrees(dx * 1000.0 / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
        return (round(lat, 6), round(lon, 6))

    def mix(weights):
        w = np.array([weights.get(n, 0.0) for n in names], dtype=float)
        return [round(float(v), 12) for v in w / w.sum()]

    def slot_mix(morning, evening, other, shift=0.0):
        hours = (np.arange(SLOTS_PER_DAY) + 0.5) / 2.0 - shift
        rows = []
        for h in hours:
            if 6.5 <= h < 10.0:
                rows.append(mix(morning))
            elif 16.5 <= h < 20.0:
                rows.append(mix(evening))
            else:
                rows.append(mix(other))
        # exact normalisation on the last entry keeps sums at 1 to the bit
        fixed = []
        for r in rows:
            r = list(r)
            r[-1] = 1.0 - math.fsum(r[:-1])
            fixed.append(r)
        return fixed

    s = scale
    zones = []
    spec = {
        # name: archetype, radius, weekday demand (base, peaks), weekday supply, fare mult, sensitivity
        "downtown": ("downtown", 2200.0, (6.0, [(8.5, 1.0, 2.0), (18.0, 1.2, 14.0)]), (21.0, [(9.0, 1.2, 10.0)]), 1.0, (2.0, 9.0)),
        "midtown": ("downtown", 1800.0, (4.0, [(8.5, 1.0, 2.0), (18.0, 1.2, 7.0)]), (10.5, [(9.0, 1.2, 4.0)]), 1.0, (1.5, 8.0)),
        "res_north": ("residential", 2000.0, (3.0, [(8.2, 1.0, 12.0), (19.0, 1.5, 1.0)]), (6.0, [(19.0, 1.5, 7.0)]), 1.05, (1.0, 8.0)),
        "res_east": ("residential", 2000.0, (3.0, [(8.2, 1.0, 11.0), (19.0, 1.5, 1.0)]), (6.0, [(19.0, 1.5, 7.0)]), 1.05, (1.0, 8.0)),
        "suburb_west": ("suburb", 2500.0, (1.5, [(7.8, 1.0, 4.0)]), (3.75, [(19.5, 1.5, 2.0)]), 1.1, (0.5, 6.0)),
        "suburb_south": ("suburb", 2500.0, (1.5, [(7.8, 1.0, 4.0)]), (3.75, [(19.5, 1.5, 2.0)]), 1.1, (0.5, 6.0)),
    }
    for name in names:
        archetype, radius, (dbase, dpeaks), (sbase, speaks), fmult, sens = spec[name]
        wk_demand = _profile(s * dbase, [(c, w, s * h) for c, w, h in dpeaks])
        wk_supply = _profile(s * sbase, [(c, w, s * h) for c, w, h in speaks])
        we_demand = _profile(s * dbase * 1.1, [(c + 3.0, w * 1.5, s * h * 0.4) for c, w, h in dpeaks])
        we_supply = _profile(s * sbase * 1.1, [(c + 3.0, w * 1.5, s * h * 0.4) for c, w, h in speaks])
        if archetype == "residential":
            morning = {"downtown": 6, "midtown": 3, "res_north": 0.5, "res_east": 0.5, "suburb_west": 0.5, "suburb_south": 0.5}
            evening = {"downtown": 1, "midtown": 1, "res_north": 1, "res_east": 1, "suburb_west": 0.5, "suburb_south": 0.5}
        elif archetype == "downtown":
            morning = {"downtown": 2, "midtown": 2, "res_north": 1, "res_east": 1, "suburb_west": 0.5, "suburb_south": 0.5}
            evening = {"downtown": 1, "midtown": 1, "res_north": 4, "res_east": 4, "suburb_west": 2, "suburb_south": 2}
        else:
            morning = {"downtown": 4, "midtown": 3, "res_north": 1, "res_east": 1, "suburb_west": 0.5, "suburb_south": 0.5}
            evening = {"downtown": 1, "midtown": 1, "res_north": 1, "res_east": 1, "suburb_west": 1, "suburb_south": 1}
        other = {"downtown": 3, "midtown": 2, "res_north": 1.5, "res_east": 1.5, "suburb_west": 1, "suburb_south": 1}
        wk_dest = slot_mix(morning, evening, other)
        we_dest = slot_mix(morning, evening, other, shift=3.0)
        zones.append(
            Zone(
                name=name,
                archetype=archetype,
                center=center(name),
                radius_m=radius,
                inquiry_rate={"weekday": wk_demand, "weekend": we_demand},
                supply_rate={"weekday": wk_supply, "weekend": we_supply},
                destinations={"weekday": wk_dest, "weekend": we_dest},
                fare_multiplier=fmult,
                fare_dispersion=0.2,
                base_ecr_beta=(4.0, 4.0),
                cr_beta=(9.0, 1.5) if archetype != "suburb" else (6.0, 2.0),
                sensitivity_range=sens,
            )
        )
    return CityModel(bbox=(39.80, 40.02, 116.25, 116.55), zones=zones)


# -- generation -----------------------------------------------------------------


def sample_in_zone(rng, zone: Zone, n: int, city: CityModel, kx: float, ky: float):
    """Uniform points in the zone disk, rejected until inside the box."""
    lat_min, lat_max, lon_min, lon_max = city.bbox
    lat = np.empty(n)
    lon = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        rad = zone.radius_m * np.sqrt(rng.random(todo.size))
        ang = rng.uniform(0.0, 2.0 * math.pi, todo.size)
        la = zone.center[0] + rad * np.sin(ang) / ky
        lo = zone.center[1] + rad * np.cos(ang) / kx
        ok = (la >= lat_min) & (la <= lat_max) & (lo >= lon_min) & (lo <= lon_max)
        lat[todo[ok]] = la[ok]
        lon[todo[ok]] = lo[ok]
        todo = todo[~ok]
    return lat, lon


def _generate_day(city: CityModel, seed: int, day: int, first_id: int) -> list[TripRecord]:
    rng = np.random.default_rng([seed, day])
    dk = city.day_kind(day)
    lat0 = 0.5 * (city.bbox[0] + city.bbox[1])
    ky = math.radians(1.0) * EARTH_RADIUS_M
    kx = ky * math.cos(math.radians(lat0))
    hist_p = city.historical_mixture()
    rates = city.rates("inquiry_rate", dk)
    counts = rng.poisson(rates)
    trips = []
    next_id = first_id
    for zi, zone in enumerate(city.zones):
        dest_mix = city.destination_matrix(zone, dk)
        for slot in range(SLOTS_PER_DAY):
            n = int(counts[zi, slot])
            if n == 0:
                continue
            req = slot * SLOT_MINUTES + rng.random(n) * SLOT_MINUTES
            olat, olon = sample_in_zone(rng, zone, n, city, kx, ky)
            dz = rng.choice(len(city.zones), size=n, p=dest_mix[slot])
            dlat = np.empty(n)
            dlon = np.empty(n)
            for j in np.unique(dz):
                sel = dz == j
                dlat[sel], dlon[sel] = sample_in_zone(rng, city.zones[j], int(sel.sum()), city, kx, ky)
            km = np.hypot((dlat - olat) * ky, (dlon - olon) * kx) / 1000.0 * 1.3
            minutes = km / city.speed_kmh * 60.0 * np.maximum(0.3, 1.0 + city.eta_noise * rng.standard_normal(n))
            slots = np.maximum(1, np.ceil(minutes / SUB_SEGMENT_MINUTES)).astype(int)
            sigma = zone.fare_dispersion
            fare = (city.fare_base + city.fare_per_km * km) * zone.fare_multiplier
            fare = fare * rng.lognormal(-0.5 * sigma**2, sigma, n) if sigma > 0 else fare
            base = np.clip(rng.beta(*zone.base_ecr_beta, size=n), 0.02, 0.98)
            sens = rng.uniform(*zone.sensitivity_range, size=n)
            cr = np.clip(rng.beta(*zone.cr_beta, size=n), 0.05, 1.0)
            hist = rng.choice(len(ACTIONS), size=n, p=hist_p)
            for i in range(n):
                trips.append(
                    TripRecord(
                        trip_id=next_id,
                        day=day,
                        day_kind=dk,
                        request_time=round(float(req[i]), 3),
                        origin_lat=round(float(olat[i]), 6),
                        origin_lon=round(float(olon[i]), 6),
                        dest_lat=round(float(dlat[i]), 6),
                        dest_lon=round(float(dlon[i]), 6),
                        est_travel_slots=int(slots[i]),
                        fare=round(float(fare[i]), 2),
                        base_ecr=round(float(base[i]), 6),
                        price_sensitivity=round(float(sens[i]), 6),
                        cr=round(float(cr[i]), 6),
                        historical_action=ACTIONS[int(hist[i])],
                        origin_zone=zone.name,
                        dest_zone=city.zones[int(dz[i])].name,
                    )
                )
                next_id += 1
    trips.sort(key=lambda t: (t.request_time, t.trip_id))
    return trips


def generate_city(seed: int, city: CityModel) -> list[TripRecord]:
    """Sample ``city.days`` days of trips; deterministic in ``seed``.

    Each day draws from its own stream seeded by ``(seed, day)``.
    """
    city.validate()
    if not city.has_short_supply():
        log.warning("city model has no zone/slot with supply below demand")
    trips: list[TripRecord] = []
    for day in range(city.days):
        trips.extend(_generate_day(city, seed, day, first_id=day * 1_000_000))
    return trips


# -- trip log io --------------------------------------------------------------

TRIP_FIELDS = tuple(TripRecord.__dataclass_fields__)


def trip_to_json(trip: TripRecord) -> str:
    return json.dumps(asdict(trip), sort_keys=True)


def write_trips(path, trips: Iterable[TripRecord]):
    with open(path, "w") as fh:
        for t in trips:
            fh.write(trip_to_json(t))
            fh.write("\n")


def read_trips(path) -> list[TripRecord]:
    trips = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                trips.append(TripRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trip record ({exc})") from None
    return trips


# -- policy simulation ----------------------------------------------------------


@dataclass
class OutcomeLog:
    trip_id: np.ndarray
    action: np.ndarray
    expected_gmv: np.ndarray
    spend: np.ndarray
    called: np.ndarray
    completed: np.ndarray
    slot: np.ndarray
    mode: str = "expected"

    @property
    def total_gmv(self) -> float:
        return math.fsum(self.expected_gmv)

    @property
    def total_spend(self) -> float:
        return math.fsum(self.spend)

    def gmv_by_slot(self) -> np.ndarray:
        return np.bincount(self.slot, weights=self.expected_gmv, minlength=SLOTS_PER_DAY)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trip_id", "action", "expected_gmv", "spend", "called", "completed"])
        for row in zip(self.trip_id, self.action, self.expected_gmv, self.spend, self.called, self.completed):
            tid, a, g, sp, c, d = row
            w.writerow([int(tid), f"{a:g}", repr(float(g)), repr(float(sp)), repr(float(c)), repr(float(d))])
        return buf.getvalue()


def simulate_policy(
    trips: Sequence[TripRecord] | TripArrays,
    actions: Sequence[float],
    seed: int | None = None,
    mode: str = "expected",
) -> OutcomeLog:
    """Fare outcome of assigning ``actions[i]`` to trip ``i``.

    Expected mode reports ``fare * ecr(a) * cr * a`` per trip with call and
    completion probabilities in ``called``/``completed``.  Sampled mode draws
    the call and completion events from a stream seeded by ``seed``.
    """
    ta = trips if isinstance(trips, TripArrays) else TripArrays.from_records(trips)
    actions = np.asarray(actions, dtype=float)
    if actions.shape != (len(ta),):
        raise ValueError(f"expected {len(ta)} actions, got shape {actions.shape}")
    idx = np.array([action_index(a) for a in actions], dtype=np.int64)
    a = ACTION_ARRAY[idx]
    p_call = ecr_matrix(ta.base_ecr, ta.price_sensitivity)[np.arange(len(ta)), idx] if len(ta) else np.zeros(0)
    spend = (1.0 - a) * ta.fare
    slot = (ta.request_time // SLOT_MINUTES).astype(np.int64) % SLOTS_PER_DAY
    if mode == "expected":
        called = p_call
        completed = ta.cr.copy()
        gmv = ta.fare * p_call * ta.cr * a
    elif mode == "sampled":
        if seed is None:
            raise ValueError("sampled mode needs a seed")
        rng = np.random.default_rng(seed)
        called = (rng.random(len(ta)) < p_call).astype(float)
        completed = called * (rng.random(len(ta)) < ta.cr)
        gmv = ta.fare * a * completed
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return OutcomeLog(ta.trip_id.copy(), a, gmv, spend, called, completed, slot, mode)
