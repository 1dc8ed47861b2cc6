"""Offline training of the state-action value Q and the state value V.

Both networks read the same input: the summed embedding rows of a state's
active tiles, concatenated with its normalised context features, followed
by two ReLU layers and a linear head (six outputs for Q, one for V).
Gradients are computed by hand; there is no autodiff dependency.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .alloc import (
    AllocationProblem,
    build_cost_matrix,
    build_value_matrix,
    solve_exact,
    solve_lagrangian,
)
from .geo import CodingConfig, HexGrid, SpatioTemporalState, activate_tiles
from .market import ACTIONS
from .mdp import ReplayBuffer, observed_actions

log = logging.getLogger(__name__)

PARAM_ORDER = ("embedding", "w1", "b1", "w2", "b2", "w3", "b3")
METRIC_COLUMNS = ("step", "q_loss", "v_loss", "batch_spend", "batch_budget")


class DivergenceError(FloatingPointError):
    pass


class ValueModel:
    """Tile embedding plus a two-hidden-layer ReLU network."""

    def __init__(self, params: dict, context_mean=None, context_std=None):
        self.params = params
        d = self.embedding_dim
        c = params["w1"].shape[0] - d
        self.context_mean = np.zeros(c) if context_mean is None else np.asarray(context_mean, dtype=float)
        self.context_std = np.ones(c) if context_std is None else np.asarray(context_std, dtype=float)
        self.check_finite()

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        n_out: int,
        table_rows: int,
        embedding_dim: int = 16,
        context_dim: int = 4,
        hidden: tuple[int, int] = (128, 64),
        dtype=np.float32,
        embedding_scale: float = 0.01,
        context_mean=None,
        context_std=None,
    ) -> "ValueModel":
        def dense(fan_in, fan_out):
            lim = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)

        h1, h2 = hidden
        d_in = embedding_dim + context_dim
        params = {
            "embedding": rng.uniform(-embedding_scale, embedding_scale, size=(table_rows, embedding_dim)).astype(dtype),
            "w1": dense(d_in, h1),
            "b1": np.zeros(h1, dtype=dtype),
            "w2": dense(h1, h2),
            "b2": np.zeros(h2, dtype=dtype),
            "w3": dense(h2, n_out),
            "b3": np.zeros(n_out, dtype=dtype),
        }
        return cls(params, context_mean, context_std)

    @property
    def embedding_dim(self) -> int:
        return self.params["embedding"].shape[1]

    @property
    def n_out(self) -> int:
        return self.params["w3"].shape[1]

    @property
    def dtype(self):
        return self.params["w1"].dtype

    def copy(self) -> "ValueModel":
        return ValueModel({k: v.copy() for k, v in self.params.items()}, self.context_mean, self.context_std)

    def load_from(self, other: "ValueModel"):
        for k in PARAM_ORDER:
            np.copyto(self.params[k], other.params[k])

    def check_finite(self, names=PARAM_ORDER):
        for k in names:
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"non-finite parameter in {k}")

    def features(self, tiles, context) -> np.ndarray:
        tiles = np.asarray(tiles, dtype=np.int64)
        emb = self.params["embedding"][tiles].sum(axis=1)
        ctx = (np.asarray(context, dtype=float) - self.context_mean) / self.context_std
        return np.concatenate([emb, ctx.astype(self.dtype)], axis=1)

    def forward(self, tiles, context):
        p = self.params
        x = self.features(tiles, context)
        z1 = x @ p["w1"] + p["b1"]
        h1 = np.maximum(z1, 0)
        z2 = h1 @ p["w2"] + p["b2"]
        h2 = np.maximum(z2, 0)
        out = h2 @ p["w3"] + p["b3"]
        return out, (np.asarray(tiles, dtype=np.int64), x, z1, h1, z2, h2)

    def predict(self, tiles, context, chunk: int = 8192) -> np.ndarray:
        self.check_finite(("w1", "b1", "w2", "b2", "w3", "b3"))
        tiles = np.asarray(tiles, dtype=np.int64)
        outs = [self.forward(tiles[i : i + chunk], context[i : i + chunk])[0] for i in range(0, len(tiles), chunk)]
        if not outs:
            return np.zeros((0, self.n_out), dtype=self.dtype)
        out = np.concatenate(outs)
        if not np.all(np.isfinite(out)):
            raise ValueError("non-finite parameter reached the output")
        return out

    def backward(self, cache, dout) -> dict:
        """Gradients of ``sum(dout * out)``.

        The embedding gradient is sparse: ``embedding_rows`` lists the table
        rows and ``embedding`` the matching gradient rows (with repeats).
        """
        p = self.params
        tiles, x, z1, h1, z2, h2 = cache
        g = {}
        g["w3"] = h2.T @ dout
        g["b3"] = dout.sum(axis=0)
        dz2 = (dout @ p["w3"].T) * (z2 > 0)
        g["w2"] = h1.T @ dz2
        g["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["w2"].T) * (z1 > 0)
        g["w1"] = x.T @ dz1
        g["b1"] = dz1.sum(axis=0)
        dx = dz1 @ p["w1"].T
        d_emb = dx[:, : self.embedding_dim]
        k = tiles.shape[1]
        g["embedding_rows"] = tiles.ravel()
        g["embedding"] = np.repeat(d_emb, k, axis=0)
        return g

    def dense_embedding_grad(self, grads) -> np.ndarray:
        out = np.zeros_like(self.params["embedding"], dtype=float)
        np.add.at(out, grads["embedding_rows"], grads["embedding"])
        return out

    def apply(self, grads, lr: float):
        p = self.params
        for k in ("w1", "b1", "w2", "b2", "w3", "b3"):
            p[k] -= (lr * grads[k]).astype(p[k].dtype)
        np.add.at(p["embedding"], grads["embedding_rows"], (-lr * grads["embedding"]).astype(p["embedding"].dtype))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def shapes(self) -> dict:
        return {k: list(self.params[k].shape) for k in PARAM_ORDER}


def forward_q(model: ValueModel, tiles, context) -> np.ndarray:
    """Six action values for one encoded state."""
    return model.predict(np.asarray(tiles)[None, :], np.asarray(context, dtype=float)[None, :])[0]


def forward_v(model: ValueModel, tiles, context) -> float:
    return float(model.predict(np.asarray(tiles)[None, :], np.asarray(context, dtype=float)[None, :])[0, 0])


def mse_loss_and_grads(model: ValueModel, tiles, context, targets, actions=None):
    """Mean squared error of the taken-action output against ``targets``."""
    out, cache = model.forward(tiles, context)
    n = out.shape[0]
    col = np.zeros(n, dtype=np.int64) if actions is None else np.asarray(actions, dtype=np.int64)
    pred = out[np.arange(n), col]
    err = pred.astype(float) - np.asarray(targets, dtype=float)
    loss = float(np.mean(err**2))
    dout = np.zeros_like(out)
    dout[np.arange(n), col] = (2.0 / n) * err
    return loss, model.backward(cache, dout)


def sgd_step(model: ValueModel, tiles, context, targets, lr: float, actions=None) -> float:
    """One plain gradient step on the mean squared error; returns the loss."""
    loss, grads = mse_loss_and_grads(model, tiles, context, targets, actions)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}; max |target| {np.max(np.abs(targets)):.3g}")
    model.apply(grads, lr)
    return loss


def masked_argmax(values, mask, rng: np.random.Generator) -> np.ndarray:
    """Per row, the best action among ``mask``; random for empty rows.

    Ties go to the lowest action index (deepest discount).
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    masked = np.where(mask, values, -np.inf)
    choice = np.argmax(masked, axis=1)
    empty = ~mask.any(axis=1)
    if empty.any():
        choice[empty] = rng.integers(0, values.shape[1], size=int(empty.sum()))
    return choice


def constrained_argmax(
    model_q: ValueModel,
    s: SpatioTemporalState,
    buffer: ReplayBuffer,
    rng: np.random.Generator,
    grid: HexGrid | None = None,
) -> float:
    """Best action for ``s`` among those the buffer logged at its grid."""
    coding = buffer.coding
    grid = grid or HexGrid(coding)
    tiles = activate_tiles(s, coding, grid).tile_ids
    q = forward_q(model_q, tiles, s.context)
    seen = observed_actions(buffer, s, grid)
    mask = np.array([[a in seen for a in ACTIONS]])
    return ACTIONS[int(masked_argmax(q[None, :], mask, rng)[0])]


@dataclass
class Batch:
    s_tiles: np.ndarray
    s_ctx: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    sn_tiles: np.ndarray
    sn_ctx: np.ndarray
    done: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_buffer(cls, buffer: ReplayBuffer, idx) -> "Batch":
        c = buffer.cols
        return cls(
            s_tiles=c["s_tiles"][idx],
            s_ctx=c["s_ctx"][idx],
            actions=c["action"][idx].astype(np.int64),
            rewards=c["reward"][idx],
            sn_tiles=c["sn_tiles"][idx],
            sn_ctx=c["sn_ctx"][idx],
            done=c["done"][idx],
            mask=buffer.observed_mask(c["s_cell"][idx], c["s_slot"][idx], c["s_day_kind"][idx]),
        )


def compute_targets(batch: Batch, q: ValueModel, q_target: ValueModel, v_target: ValueModel, gamma: float, rng):
    """Targets for V (double-Q at the state) and for Q (one-step bootstrap through V).

    ``v_j = Q_target(s_j, argmax_{a seen at s_j} Q(s_j, a))`` and
    ``y_j = r_j + gamma * (1 - d_j) * V_target(s_{j+1})``.
    """
    q_online = q.predict(batch.s_tiles, batch.s_ctx)
    greedy = masked_argmax(q_online, batch.mask, rng)
    q_tgt = q_target.predict(batch.s_tiles, batch.s_ctx)
    v = q_tgt[np.arange(len(greedy)), greedy].astype(float)
    v_next = v_target.predict(batch.sn_tiles, batch.sn_ctx)[:, 0].astype(float)
    alive = 1.0 - np.asarray(batch.done, dtype=float)
    y = np.asarray(batch.rewards, dtype=float) + gamma * alive * v_next
    return v, y, greedy


@dataclass
class TrainConfig:
    gamma: float = 0.9
    batch_size: int = 256
    learning_rate: float = 1e-3
    target_update: int = 100
    steps: int = 2000
    beta: float = 0.5
    budget_fraction: float = 0.045
    alpha: float = 0.0
    seed: int = 0
    hidden: tuple[int, int] = (128, 64)
    relabel: bool = True
    solver: str = "lagrangian"
    divergence_threshold: float = 1e12
    embedding_scale: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.budget_fraction < 0:
            raise ValueError("budget_fraction must be >= 0")
        if self.batch_size < 1 or self.target_update < 1 or self.steps < 0:
            raise ValueError("batch_size and target_update must be >= 1, steps >= 0")
        if self.solver not in ("lagrangian", "exact"):
            raise ValueError("solver must be 'lagrangian' or 'exact'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    q: ValueModel
    q_target: ValueModel
    v: ValueModel
    v_target: ValueModel
    config: TrainConfig
    coding: CodingConfig
    step: int = 0
    metrics: list = field(default_factory=list, repr=False)

    MODELS = ("q", "q_target", "v", "v_target")

    def models(self):
        return {name: getattr(self, name) for name in self.MODELS}

    def save(self, path):
        """Write ``manifest.json`` and ``params.bin`` (little-endian float32) into ``path``."""
        os.makedirs(path, exist_ok=True)
        layout = {}
        offset = 0
        chunks = []
        for name, model in self.models().items():
            entries = {}
            for k in PARAM_ORDER:
                arr = np.ascontiguousarray(model.params[k], dtype="<f4")
                entries[k] = {"shape": list(arr.shape), "offset": offset}
                offset += arr.size
                chunks.append(arr.tobytes())
            layout[name] = entries
        manifest = {
            "format": "stincentive-checkpoint",
            "version": 1,
            "step": self.step,
            "config": self.config.to_dict(),
            "coding": self.coding.to_dict(),
            "normalization": {
                "context_mean": [float(v) for v in self.v.context_mean],
                "context_std": [float(v) for v in self.v.context_std],
            },
            "dtype": "<f4",
            "layout": layout,
            "total_floats": offset,
        }
        with open(os.path.join(path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(path, "params.bin"), "wb") as fh:
            for c in chunks:
                fh.write(c)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(os.path.join(path, "manifest.json")) as fh:
                manifest = json.load(fh)
            blob = np.fromfile(os.path.join(path, "params.bin"), dtype="<f4")
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read checkpoint {path}: {exc}") from None
        if blob.size != manifest["total_floats"]:
            raise ValueError("checkpoint parameter blob has the wrong size")
        norm = manifest["normalization"]
        models = {}
        for name, entries in manifest["layout"].items():
            params = {}
            for k in PARAM_ORDER:
                e = entries[k]
                size = int(np.prod(e["shape"]))
                params[k] = blob[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float32)
            models[name] = ValueModel(params, norm["context_mean"], norm["context_std"])
        return cls(
            config=TrainConfig.from_dict(manifest["config"]),
            coding=CodingConfig.from_dict(manifest["coding"]),
            step=int(manifest["step"]),
            **models,
        )


def init_checkpoint(buffer: ReplayBuffer, cfg: TrainConfig) -> Checkpoint:
    coding = buffer.coding
    rng = np.random.default_rng([cfg.seed, 0])
    context_dim = buffer.cols["s_ctx"].shape[1]
    common = dict(
        table_rows=coding.hash_table_size,
        embedding_dim=coding.embedding_dim,
        context_dim=context_dim,
        hidden=cfg.hidden,
        embedding_scale=cfg.embedding_scale,
        context_mean=buffer.context_mean,
        context_std=buffer.context_std,
    )
    q = ValueModel.initialize(rng, len(ACTIONS), **common)
    v = ValueModel.initialize(rng, 1, **common)
    return Checkpoint(q, q.copy(), v, v.copy(), cfg, coding, 0)


def relabel_batch(buffer: ReplayBuffer, idx, v: ValueModel, cfg: TrainConfig):
    """Solve the batch allocation under the current V and return (choice, spend, budget)."""
    c = buffer.cols
    v_s = v.predict(c["s_tiles"][idx], c["s_ctx"][idx])[:, 0]
    v_n = v.predict(c["sn_tiles"][idx], c["sn_ctx"][idx])[:, 0]
    fare = c["fare"][idx]
    values = build_value_matrix(c["delta_ecr"][idx], c["cr"][idx], fare, v_s, v_n, c["done"][idx], cfg.beta, cfg.gamma)
    budget = cfg.budget_fraction * float(np.sum(fare))
    problem = AllocationProblem(values, build_cost_matrix(fare), budget, c["trip_id"][idx])
    sol = solve_lagrangian(problem) if cfg.solver == "lagrangian" else solve_exact(problem)
    return sol.choice, sol.spend, budget


def train(
    buffer: ReplayBuffer,
    cfg: TrainConfig,
    checkpoint: Checkpoint | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Run the offline training loop.

    Each step samples a mini-batch, fits Q and V toward their targets, solves
    the batch allocation with the current V and appends the relabeled
    transitions.  Target networks are synchronised every
    ``cfg.target_update`` steps.  The step's random stream is seeded by
    ``(seed, step)``, so a run resumed from a checkpoint continues the same
    sampling sequence (relabeled transitions are not persisted).
    """
    if len(buffer) == 0:
        raise ValueError("cannot train on an empty buffer")
    ck = checkpoint if checkpoint is not None else init_checkpoint(buffer, cfg)
    ck.config = cfg
    buf = buffer.copy(relabel_capacity=buffer.n_logged if cfg.relabel else 0)
    q, q_t, v, v_t = ck.q, ck.q_target, ck.v, ck.v_target
    gamma = cfg.gamma
    for step in range(ck.step, cfg.steps):
        rng = np.random.default_rng([cfg.seed, 1, step])
        idx = rng.integers(0, buf.size, size=cfg.batch_size)
        batch = Batch.from_buffer(buf, idx)
        v_tgt, y_tgt, _ = compute_targets(batch, q, q_t, v_t, gamma, rng)
        q_loss = sgd_step(q, batch.s_tiles, batch.s_ctx, y_tgt, cfg.learning_rate, actions=batch.actions)
        v_loss = sgd_step(v, batch.s_tiles, batch.s_ctx, v_tgt, cfg.learning_rate)
        if max(q_loss, v_loss) > cfg.divergence_threshold:
            raise DivergenceError(f"step {step}: q_loss={q_loss:.4g} v_loss={v_loss:.4g} exceed {cfg.divergence_threshold:g}")
        spend = budget = 0.0
        if cfg.relabel:
            choice, spend, budget = relabel_batch(buf, idx, v, cfg)
            buf.add_relabeled(idx, choice, buf.cols["reward_by_action"][idx, choice])
        if (step + 1) % cfg.target_update == 0:
            q_t.load_from(q)
            v_t.load_from(v)
        row = {"step": step + 1, "q_loss": q_loss, "v_loss": v_loss, "batch_spend": spend, "batch_budget": budget}
        ck.metrics.append(row)
        if on_step is not None:
            on_step(row)
        ck.step = step + 1
    return ck


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in METRIC_COLUMNS[1:]])
