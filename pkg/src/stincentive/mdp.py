"""Trip logs to MDP transitions and the replay buffer.

Each trip is one transition from its origin state to its destination
state.  The destination slot is the slot of the estimated arrival time
(request time plus ``est_travel_slots`` ten-minute segments).  A trip is
terminal when its interval crosses 03:00 of any day.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geo import (
    SLOT_MINUTES,
    SLOTS_PER_DAY,
    CodingConfig,
    HexGrid,
    SpatioTemporalState,
    day_kind_code,
    day_kind_of,
)
from .market import (
    ACTION_ARRAY,
    ACTIONS,
    TripArrays,
    TripRecord,
    action_index,
    delta_ecr,
    ecr_matrix,
)

log = logging.getLogger(__name__)

EPISODE_BOUNDARY_MINUTES = 3 * 60
CONTEXT_FEATURES = ("inquiries", "expected_completions", "arrivals", "arrivals_minus_inquiries")
CONTEXT_WINDOW_SLOTS = 2
REWARD_MODES = ("eq1", "eq7")
SCHEMA_VERSION = 1
_MAGIC = b"STRB"


def discounted_fare(fare, slots, gamma):
    """``sum_{t<T} gamma^t * fare / T`` for ``T = slots``."""
    fare = np.asarray(fare, dtype=float)
    slots = np.asarray(slots, dtype=float)
    if gamma == 1.0:
        return fare * np.ones_like(slots)
    return fare / slots * (1.0 - gamma**slots) / (1.0 - gamma)


def discounted_reward(trip: TripRecord, a: float, gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    return float(delta_ecr(trip, a) * discounted_fare(trip.fare, trip.est_travel_slots, gamma))


def penalized_reward(trip: TripRecord, a: float, gamma: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return discounted_reward(trip, a, gamma) - alpha * (1.0 - a) * trip.fare


def reward_matrix(trips: TripArrays, gamma: float, mode: str = "eq1", alpha: float = 0.0) -> np.ndarray:
    """Reward of every trip under every menu action, shape ``(n, 6)``."""
    if mode not in REWARD_MODES:
        raise ValueError(f"reward mode must be one of {REWARD_MODES}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    r = trips.delta_ecr() * discounted_fare(trips.fare, trips.est_travel_slots, gamma)[:, None]
    if mode == "eq7":
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        r = r - alpha * (1.0 - ACTION_ARRAY[None, :]) * trips.fare[:, None]
    return r


def crosses_boundary(request_time, arrival_time, boundary: float = EPISODE_BOUNDARY_MINUTES):
    """True where ``(request, arrival]`` contains ``boundary`` of some day."""
    req = np.asarray(request_time, dtype=float)
    arr = np.asarray(arrival_time, dtype=float)
    return np.floor((arr - boundary) / 1440.0) > np.floor((req - boundary) / 1440.0)


# -- encoded states -------------------------------------------------------------


@dataclass
class EncodedStates:
    """Tile ids, raw context and grid key for a batch of states."""

    tiles: np.ndarray
    context: np.ndarray
    cell: np.ndarray
    slot: np.ndarray
    day_kind: np.ndarray


@dataclass
class EncodedTrips:
    origin: EncodedStates
    dest: EncodedStates
    done: np.ndarray
    keep: np.ndarray


def _grid_key(cell, abs_slot):
    return np.asarray(cell, dtype=np.int64) * 4096 + np.asarray(abs_slot, dtype=np.int64)


def _lookup(keys, values, query):
    """values[keys == query] with zeros for missing keys (keys sorted)."""
    out = np.zeros((len(query),) + values.shape[1:])
    if len(keys) == 0:
        return out
    pos = np.searchsorted(keys, query)
    pos_c = np.minimum(pos, len(keys) - 1)
    hit = keys[pos_c] == query
    out[hit] = values[pos_c[hit]]
    return out


def _sum_by_key(keys, weights):
    uk, inv = np.unique(keys, return_inverse=True)
    return uk, np.bincount(inv, weights=weights, minlength=len(uk))


def context_features(ta: TripArrays, grid: HexGrid) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window supply/demand statistics at each trip's origin and destination.

    Counts cover the ``CONTEXT_WINDOW_SLOTS`` slots before the state's slot
    at the state's finest-level cell.
    """
    n = len(ta)
    if n == 0:
        empty = np.zeros((0, len(CONTEXT_FEATURES)))
        return empty, empty
    o_cell = grid.cell_ids(ta.origin_lat, ta.origin_lon, 0)
    d_cell = grid.cell_ids(ta.dest_lat, ta.dest_lon, 0)
    o_abs = ta.day * SLOTS_PER_DAY + (ta.request_time // SLOT_MINUTES).astype(np.int64)
    d_abs = ta.day * SLOTS_PER_DAY + (ta.arrival_time // SLOT_MINUTES).astype(np.int64)
    hist_idx = np.array([action_index(a) for a in ta.historical_action], dtype=np.int64)
    p_done = ecr_matrix(ta.base_ecr, ta.price_sensitivity)[np.arange(n), hist_idx] * ta.cr

    inq_k, inq_v = _sum_by_key(_grid_key(o_cell, o_abs), np.ones(n))
    com_k, com_v = _sum_by_key(_grid_key(o_cell, o_abs), p_done)
    arr_k, arr_v = _sum_by_key(_grid_key(d_cell, d_abs), np.ones(n))

    def window(cell, abs_slot):
        inq = np.zeros(len(cell))
        com = np.zeros(len(cell))
        arr = np.zeros(len(cell))
        for lag in range(1, CONTEXT_WINDOW_SLOTS + 1):
            q = _grid_key(cell, abs_slot - lag)
            inq += _lookup(inq_k, inq_v, q)
            com += _lookup(com_k, com_v, q)
            arr += _lookup(arr_k, arr_v, q)
        return np.stack([inq, com, arr, arr - inq], axis=1)

    return window(o_cell, o_abs), window(d_cell, d_abs)


def encode_trips(trips: Sequence[TripRecord] | TripArrays, grid: HexGrid) -> EncodedTrips:
    ta = trips if isinstance(trips, TripArrays) else TripArrays.from_records(trips)
    o_ctx, d_ctx = context_features(ta, grid)
    req_slot = (ta.request_time // SLOT_MINUTES).astype(np.int64)
    arrival = ta.arrival_time
    arr_day = ta.day + (arrival // 1440).astype(np.int64)
    arr_min = np.mod(arrival, 1440.0)
    arr_slot = (arr_min // SLOT_MINUTES).astype(np.int64)
    arr_kind = np.array([day_kind_code(day_kind_of(int(d))) for d in arr_day], dtype=np.int64)
    origin = EncodedStates(
        tiles=grid.tile_matrix(ta.origin_lat, ta.origin_lon, req_slot * SLOT_MINUTES, ta.day_kind),
        context=o_ctx,
        cell=grid.cell_ids(ta.origin_lat, ta.origin_lon, 0),
        slot=req_slot,
        day_kind=ta.day_kind.copy(),
    )
    dest = EncodedStates(
        tiles=grid.tile_matrix(ta.dest_lat, ta.dest_lon, arr_slot * SLOT_MINUTES, arr_kind),
        context=d_ctx,
        cell=grid.cell_ids(ta.dest_lat, ta.dest_lon, 0),
        slot=arr_slot,
        day_kind=arr_kind,
    )
    done = crosses_boundary(ta.request_time, arrival)
    return EncodedTrips(origin, dest, done, np.ones(len(ta), dtype=bool))


# -- replay buffer ----------------------------------------------------------------


@dataclass
class Transition:
    """Row view of one buffer entry."""

    trip_id: int
    s_cell: int
    s_slot: int
    s_day_kind: int
    action: float
    reward: float
    s_next_cell: int
    s_next_slot: int
    s_next_day_kind: int
    done: bool
    relabeled: bool = False


def state_key(cell, slot, day_kind):
    """Integer key of the discretized grid g(s): finest cell x semi-hour x day kind."""
    return (np.asarray(cell, dtype=np.int64) * SLOTS_PER_DAY + np.asarray(slot, dtype=np.int64)) * 2 + np.asarray(
        day_kind, dtype=np.int64
    )


_COLUMNS_1D = {
    "trip_id": "<i8",
    "s_cell": "<i8",
    "s_slot": "<i2",
    "s_day_kind": "<i1",
    "action": "<i1",
    "reward": "<f8",
    "sn_cell": "<i8",
    "sn_slot": "<i2",
    "sn_day_kind": "<i1",
    "done": "?",
    "fare": "<f8",
    "cr": "<f8",
    "relabeled": "?",
}


class ReplayBuffer:
    """Column store of transitions plus the per-grid action index.

    The logged transitions occupy the first ``n_logged`` rows.  Relabeled
    transitions are appended behind them up to ``relabel_capacity`` rows;
    once full, the oldest relabel is overwritten.
    """

    def __init__(self, columns: dict, header: dict, n_logged: int | None = None, relabel_capacity: int = 0):
        size = len(columns["trip_id"])
        self.header = header
        self.n_logged = size if n_logged is None else n_logged
        self.relabel_capacity = relabel_capacity
        cap = max(size, self.n_logged + relabel_capacity)
        self.cols = {}
        for name, arr in columns.items():
            arr = np.asarray(arr)
            store = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
            store[:size] = arr
            self.cols[name] = store
        self.size = size
        self._next_relabel = 0
        self._counts: dict[int, np.ndarray] = {}
        keys = state_key(self.cols["s_cell"][:size], self.cols["s_slot"][:size], self.cols["s_day_kind"][:size])
        for k, a in zip(keys.tolist(), self.cols["action"][:size].tolist()):
            self._counts.setdefault(k, np.zeros(len(ACTIONS), dtype=np.int64))[a] += 1

    def __len__(self):
        return self.size

    @property
    def gamma(self) -> float:
        return float(self.header["gamma"])

    @property
    def coding(self) -> CodingConfig:
        return CodingConfig.from_dict(self.header["coding"])

    @property
    def context_mean(self) -> np.ndarray:
        return np.asarray(self.header["context_mean"], dtype=float)

    @property
    def context_std(self) -> np.ndarray:
        return np.asarray(self.header["context_std"], dtype=float)

    def column(self, name: str) -> np.ndarray:
        return self.cols[name][: self.size]

    def transition(self, i: int) -> Transition:
        c = self.cols
        return Transition(
            trip_id=int(c["trip_id"][i]),
            s_cell=int(c["s_cell"][i]),
            s_slot=int(c["s_slot"][i]),
            s_day_kind=int(c["s_day_kind"][i]),
            action=ACTIONS[int(c["action"][i])],
            reward=float(c["reward"][i]),
            s_next_cell=int(c["sn_cell"][i]),
            s_next_slot=int(c["sn_slot"][i]),
            s_next_day_kind=int(c["sn_day_kind"][i]),
            done=bool(c["done"][i]),
            relabeled=bool(c["relabeled"][i]),
        )

    # -- action index -------------------------------------------------------

    def observed_action_indices(self, cell: int, slot: int, day_kind: int) -> list[int]:
        counts = self._counts.get(int(state_key(cell, slot, day_kind)))
        if counts is None:
            return []
        return [k for k in range(len(ACTIONS)) if counts[k] > 0]

    def observed_mask(self, cell, slot, day_kind) -> np.ndarray:
        keys = state_key(cell, slot, day_kind)
        mask = np.zeros((len(keys), len(ACTIONS)), dtype=bool)
        get = self._counts.get
        for i, k in enumerate(keys.tolist()):
            counts = get(k)
            if counts is not None:
                mask[i] = counts > 0
        return mask

    def index_snapshot(self) -> dict[int, tuple[int, ...]]:
        return {k: tuple(int(x) for x in np.flatnonzero(v)) for k, v in self._counts.items() if v.any()}

    # -- mutation -----------------------------------------------------------------

    def add_relabeled(self, rows: np.ndarray, actions: np.ndarray, rewards: np.ndarray):
        """Append copies of rows ``rows`` with new actions and rewards."""
        if self.relabel_capacity <= 0:
            return
        for src, a, r in zip(np.asarray(rows).tolist(), np.asarray(actions).tolist(), np.asarray(rewards).tolist()):
            dst = self.n_logged + self._next_relabel
            if dst < self.size:
                self._bump(dst, -1)
            for name, store in self.cols.items():
                store[dst] = store[src]
            self.cols["action"][dst] = a
            self.cols["reward"][dst] = r
            self.cols["relabeled"][dst] = True
            self._bump(dst, +1)
            self.size = max(self.size, dst + 1)
            self._next_relabel = (self._next_relabel + 1) % self.relabel_capacity

    def _bump(self, row: int, delta: int):
        c = self.cols
        k = int(state_key(c["s_cell"][row], c["s_slot"][row], c["s_day_kind"][row]))
        counts = self._counts.setdefault(k, np.zeros(len(ACTIONS), dtype=np.int64))
        counts[int(c["action"][row])] += delta

    def copy(self, relabel_capacity: int | None = None) -> "ReplayBuffer":
        cols = {name: self.column(name).copy() for name in self.cols}
        cap = self.relabel_capacity if relabel_capacity is None else relabel_capacity
        return ReplayBuffer(cols, json.loads(json.dumps(self.header)), self.n_logged, cap)

    # -- persistence -----------------------------------------------------------

    def _record_dtype(self) -> np.dtype:
        k = self.cols["s_tiles"].shape[1]
        c = self.cols["s_ctx"].shape[1]
        fields = [(name, dt) for name, dt in _COLUMNS_1D.items()]
        fields += [
            ("s_tiles", "<i8", (k,)),
            ("s_ctx", "<f8", (c,)),
            ("sn_tiles", "<i8", (k,)),
            ("sn_ctx", "<f8", (c,)),
            ("delta_ecr", "<f8", (len(ACTIONS),)),
            ("reward_by_action", "<f8", (len(ACTIONS),)),
        ]
        return np.dtype(fields)

    def to_bytes(self) -> bytes:
        dt = self._record_dtype()
        rec = np.zeros(self.size, dtype=dt)
        for name in dt.names:
            rec[name] = self.column(name)
        header = dict(self.header)
        header.update(
            schema_version=SCHEMA_VERSION,
            count=int(self.size),
            n_logged=int(self.n_logged),
            record_size=dt.itemsize,
            num_tilings=int(self.cols["s_tiles"].shape[1]),
            context_dim=int(self.cols["s_ctx"].shape[1]),
        )
        hb = json.dumps(header, sort_keys=True).encode()
        return _MAGIC + struct.pack("<I", len(hb)) + hb + rec.tobytes()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, relabel_capacity: int = 0) -> "ReplayBuffer":
        if blob[:4] != _MAGIC or len(blob) < 8:
            raise ValueError("not a replay buffer file")
        (hlen,) = struct.unpack("<I", blob[4:8])
        try:
            header = json.loads(blob[8 : 8 + hlen])
        except json.JSONDecodeError:
            raise ValueError("corrupt replay buffer header") from None
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported buffer schema {header.get('schema_version')}")
        k, c = header["num_tilings"], header["context_dim"]
        proto = cls(
            {
                **{name: np.zeros(0, dtype=dt) for name, dt in _COLUMNS_1D.items()},
                "s_tiles": np.zeros((0, k), np.int64),
                "sn_tiles": np.zeros((0, k), np.int64),
                "s_ctx": np.zeros((0, c)),
                "sn_ctx": np.zeros((0, c)),
                "delta_ecr": np.zeros((0, len(ACTIONS))),
                "reward_by_action": np.zeros((0, len(ACTIONS))),
            },
            header,
        )
        dt = proto._record_dtype()
        body = blob[8 + hlen :]
        if dt.itemsize != header["record_size"] or len(body) != dt.itemsize * header["count"]:
            raise ValueError("corrupt replay buffer: body size does not match header")
        rec = np.frombuffer(body, dtype=dt)
        cols = {name: np.array(rec[name]) for name in dt.names}
        for name, d in _COLUMNS_1D.items():
            cols[name] = cols[name].astype(np.dtype(d).newbyteorder("="))
        return cls(cols, header, header.get("n_logged", header["count"]), relabel_capacity)

    @classmethod
    def load(cls, path, relabel_capacity: int = 0) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), relabel_capacity)


def _valid_mask(trips: Sequence[TripRecord], grid: HexGrid) -> np.ndarray:
    ok = np.ones(len(trips), dtype=bool)
    for i, t in enumerate(trips):
        try:
            t.validate()
        except (ValueError, TypeError):
            ok[i] = False
            continue
        if not (grid.in_bounds(t.origin_lat, t.origin_lon) and grid.in_bounds(t.dest_lat, t.dest_lon)):
            ok[i] = False
    return ok


def normalization_stats(context: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(context) == 0:
        return np.zeros(context.shape[1]), np.ones(context.shape[1])
    mean = context.mean(axis=0)
    std = context.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def build_transitions(
    trips: Sequence[TripRecord],
    coding: CodingConfig,
    gamma: float = 0.9,
    reward_mode: str = "eq1",
    alpha: float = 0.0,
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> ReplayBuffer:
    """One transition per valid trip, logged under its historical action.

    Malformed trips are skipped and counted in ``header["skipped"]``.
    Normalisation statistics of the context features are computed from the
    kept trips unless ``norm_stats`` is given.
    """
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"reward mode must be one of {REWARD_MODES}")
    grid = HexGrid(coding)
    ok = _valid_mask(trips, grid)
    skipped = int(len(trips) - ok.sum())
    if skipped:
        log.warning("skipped %d malformed trip(s)", skipped)
    kept = [t for t, keep in zip(trips, ok) if keep]
    ta = TripArrays.from_records(kept)
    enc = encode_trips(ta, grid)
    n = len(ta)
    k = coding.num_tilings
    c = len(CONTEXT_FEATURES)
    rewards = reward_matrix(ta, gamma, reward_mode, alpha) if n else np.zeros((0, len(ACTIONS)))
    act = np.array([action_index(a) for a in ta.historical_action], dtype=np.int8)
    mean, std = norm_stats if norm_stats is not None else normalization_stats(enc.origin.context)
    columns = {
        "trip_id": ta.trip_id,
        "s_cell": enc.origin.cell if n else np.zeros(0, np.int64),
        "s_slot": enc.origin.slot.astype(np.int16),
        "s_day_kind": enc.origin.day_kind.astype(np.int8),
        "action": act,
        "reward": rewards[np.arange(n), act.astype(np.int64)] if n else np.zeros(0),
        "sn_cell": enc.dest.cell if n else np.zeros(0, np.int64),
        "sn_slot": enc.dest.slot.astype(np.int16),
        "sn_day_kind": enc.dest.day_kind.astype(np.int8),
        "done": enc.done.astype(bool),
        "fare": ta.fare,
        "cr": ta.cr,
        "relabeled": np.zeros(n, dtype=bool),
        "s_tiles": enc.origin.tiles.reshape(n, k),
        "s_ctx": enc.origin.context.reshape(n, c),
        "sn_tiles": enc.dest.tiles.reshape(n, k),
        "sn_ctx": enc.dest.context.reshape(n, c),
        "delta_ecr": ta.delta_ecr().reshape(n, len(ACTIONS)),
        "reward_by_action": rewards,
    }
    header = {
        "gamma": gamma,
        "reward_mode": reward_mode,
        "alpha": alpha,
        "coding": coding.to_dict(),
        "context_features": list(CONTEXT_FEATURES),
        "context_mean": [float(v) for v in mean],
        "context_std": [float(v) for v in std],
        "skipped": skipped,
        "action_menu": list(ACTIONS),
    }
    return ReplayBuffer(columns, header)


def observed_actions(buffer: ReplayBuffer, s: SpatioTemporalState, grid: HexGrid | None = None) -> set[float]:
    """Actions logged in the buffer at the discretized grid of ``s``."""
    grid = grid or HexGrid(buffer.coding)
    cell = int(grid.cell_ids(s.lat, s.lon, 0))
    idx = buffer.observed_action_indices(cell, s.slot.index, day_kind_code(s.slot.day_kind))
    return {ACTIONS[k] for k in idx}
