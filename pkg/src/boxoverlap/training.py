"""Fit per-image embeddings to directed overlap targets.

Two model kinds are supported: axis-aligned boxes trained on both directed
overlaps, and a plain vector baseline trained on the symmetric mean overlap
via a target-distance loss. Optimization is plain Adam over a lookup table
of per-image parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxes
from .boxes import BoxEmbedding, BoxParams, SmoothingConfig, params_to_box, softplus
from .geometry import OverlapRecord


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, pair_ids):
        super().__init__(f"non-finite loss at step {step} (pairs: {pair_ids})")
        self.step = step
        self.pair_ids = pair_ids


@dataclass
class TrainConfig:
    dim: int = 32
    rho: float = 5.0
    lr: float = 0.1
    steps: int = 40000
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_final_scale: float = 0.01
    # Boxes start large and heavily overlapping: with rho = 5 the smoothed
    # edge function flattens below a scale of a few rho, so tiny initial
    # boxes stall; see the softplus floor rho * ln 2 per dimension.
    init_center_std: float = 10.0
    init_size_raw: float = 100.0

    def __post_init__(self):
        if min(self.dim, self.steps, self.batch_size) < 1:
            raise ValueError("dim, steps and batch_size must be >= 1")
        if self.lr <= 0 or self.rho <= 0:
            raise ValueError("lr and rho must be positive")

    @property
    def smoothing(self) -> SmoothingConfig:
        return SmoothingConfig(self.rho)


@dataclass
class PairDataset:
    records: list
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            seen = {}
            for rec in self.records:
                seen.setdefault(rec.id_x, None)
                seen.setdefault(rec.id_y, None)
            self.ids = sorted(seen)
        known = set(self.ids)
        for rec in self.records:
            if rec.id_x not in known or rec.id_y not in known:
                raise ValueError(f"pair references unknown id: {rec.id_x}, {rec.id_y}")

    def __len__(self) -> int:
        return len(self.records)


def nso_symmetric(record: OverlapRecord) -> float:
    return 0.5 * (record.nso_xy + record.nso_yx)


def nso_min(record: OverlapRecord) -> float:
    return min(record.nso_xy, record.nso_yx)


class EmbeddingTable:
    """Image id -> trainable embedding parameters (box or vector kind)."""

    def __init__(self, kind: str, ids, params: np.ndarray):
        if kind not in ("box", "vector"):
            raise ValueError(f"unknown embedding kind: {kind}")
        self.kind = kind
        self.ids = list(ids)
        self.params = np.asarray(params, dtype=np.float64)
        self.row = {img_id: i for i, img_id in enumerate(self.ids)}
        expected = 2 if kind == "box" else 1
        if self.params.ndim != 2 or len(self.ids) != len(self.params):
            raise ValueError("params must be (n_ids, k*D)")
        if self.params.shape[1] % expected:
            raise ValueError("box tables need an even parameter count per id")

    @property
    def dim(self) -> int:
        return self.params.shape[1] // (2 if self.kind == "box" else 1)

    def _index(self, img_id: str) -> int:
        if img_id not in self.row:
            raise KeyError(f"unknown image id: {img_id}")
        return self.row[img_id]

    def box_params(self, img_id: str) -> BoxParams:
        if self.kind != "box":
            raise ValueError("not a box table")
        row = self.params[self._index(img_id)]
        return BoxParams(row[: self.dim], row[self.dim :])

    def box(self, img_id: str) -> BoxEmbedding:
        return params_to_box(self.box_params(img_id))

    def vector(self, img_id: str) -> np.ndarray:
        if self.kind != "vector":
            raise ValueError("not a vector table")
        return self.params[self._index(img_id)]

    def centers_sizes(self):
        if self.kind != "box":
            raise ValueError("not a box table")
        return self.params[:, : self.dim], self.params[:, self.dim :]

    def bounds(self):
        centers, size_raws = self.centers_sizes()
        size = softplus(size_raws)
        return centers - size / 2.0, centers + size / 2.0


def loss_box(table: EmbeddingTable, pair: OverlapRecord, cfg: TrainConfig) -> float:
    """Squared error of both directed box overlaps against the targets."""
    bx = table.box(pair.id_x)
    by = table.box(pair.id_y)
    smoothing = cfg.smoothing
    e_xy = pair.nso_xy - boxes.nbo(bx, by, smoothing)
    e_yx = pair.nso_yx - boxes.nbo(by, bx, smoothing)
    return e_xy**2 + e_yx**2


def loss_vector(table: EmbeddingTable, pair: OverlapRecord) -> float:
    """Squared error between the vector distance and 1 - symmetric overlap."""
    fx = table.vector(pair.id_x)
    fy = table.vector(pair.id_y)
    dist = float(np.linalg.norm(fx - fy))
    return ((1.0 - nso_symmetric(pair)) - dist) ** 2


def _init_table(dataset: PairDataset, cfg: TrainConfig, kind: str, rng) -> EmbeddingTable:
    n = len(dataset.ids)
    if kind == "box":
        centers = rng.normal(0.0, cfg.init_center_std, size=(n, cfg.dim))
        size_raws = np.full((n, cfg.dim), cfg.init_size_raw)
        return EmbeddingTable("box", dataset.ids, np.hstack([centers, size_raws]))
    vectors = rng.normal(0.0, cfg.init_center_std, size=(n, cfg.dim))
    return EmbeddingTable("vector", dataset.ids, vectors)


def _box_batch_grad(table, xi, yi, t_xy, t_yx, cfg: TrainConfig):
    """Mean loss over a batch of pairs plus gradient w.r.t. the full table."""
    d = cfg.dim
    centers, size_raws = table.params[:, :d], table.params[:, d:]
    cx, sx = centers[xi], size_raws[xi]
    cy, sy = centers[yi], size_raws[yi]
    smoothing = cfg.smoothing

    grad = np.zeros_like(table.params)
    total = 0.0
    for (ca, sa, cb, sb, ia, ib, target) in (
        (cx, sx, cy, sy, xi, yi, t_xy),
        (cy, sy, cx, sx, yi, xi, t_yx),
    ):
        pred, d_ca, d_sa, d_cb, d_sb = boxes.nbo_grad_batch(ca, sa, cb, sb, smoothing)
        err = target - pred
        total += float(np.mean(err**2))
        coef = (-2.0 * err / len(err))[:, None]
        np.add.at(grad[:, :d], ia, coef * d_ca)
        np.add.at(grad[:, d:], ia, coef * d_sa)
        np.add.at(grad[:, :d], ib, coef * d_cb)
        np.add.at(grad[:, d:], ib, coef * d_sb)
    return total, grad


def _vector_batch_grad(table, xi, yi, t_sym, cfg: TrainConfig):
    vx = table.params[xi]
    vy = table.params[yi]
    diff = vx - vy
    dist = np.linalg.norm(diff, axis=1)
    err = (1.0 - t_sym) - dist
    loss = float(np.mean(err**2))
    grad = np.zeros_like(table.params)
    safe = np.where(dist > 0, dist, 1.0)
    coef = (-2.0 * err / len(err) / safe * (dist > 0))[:, None]
    np.add.at(grad, xi, coef * diff)
    np.add.at(grad, yi, -coef * diff)
    return loss, grad


def train(
    dataset: PairDataset,
    cfg: TrainConfig,
    kind: str = "box",
    initial: EmbeddingTable | None = None,
):
    """Minibatch Adam over the embedding table; returns (table, loss_trace)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if kind not in ("box", "vector"):
        raise ValueError(f"unknown embedding kind: {kind}")
    rng = np.random.default_rng(cfg.seed)
    table = initial if initial is not None else _init_table(dataset, cfg, kind, rng)

    t_xy = np.array([r.nso_xy for r in dataset.records])
    t_yx = np.array([r.nso_yx for r in dataset.records])
    t_sym = 0.5 * (t_xy + t_yx)
    row = table.row
    xi_all = np.array([row[r.id_x] for r in dataset.records])
    yi_all = np.array([row[r.id_y] for r in dataset.records])

    m = np.zeros_like(table.params)
    v = np.zeros_like(table.params)
    trace = np.empty(cfg.steps)
    for step in range(cfg.steps):
        batch = rng.integers(0, len(dataset), size=cfg.batch_size)
        xi, yi = xi_all[batch], yi_all[batch]
        if kind == "box":
            loss, grad = _box_batch_grad(table, xi, yi, t_xy[batch], t_yx[batch], cfg)
        else:
            loss, grad = _vector_batch_grad(table, xi, yi, t_sym[batch], cfg)
        if not np.isfinite(loss):
            ids = sorted({dataset.records[b].id_x for b in batch}
                         | {dataset.records[b].id_y for b in batch})
            raise TrainingDivergedError(step, ids)
        trace[step] = loss

        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad**2
        m_hat = m / (1.0 - cfg.beta1 ** (step + 1))
        v_hat = v / (1.0 - cfg.beta2 ** (step + 1))
        # Cosine decay from lr down to lr * lr_final_scale.
        frac = step / max(1, cfg.steps - 1)
        lr_t = cfg.lr * (cfg.lr_final_scale
                         + (1.0 - cfg.lr_final_scale) * 0.5 * (1.0 + math.cos(math.pi * frac)))
        table.params -= lr_t * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return table, trace


def predict_pair(table: EmbeddingTable, pair: OverlapRecord, smoothing: SmoothingConfig):
    """Predicted directed overlaps (pred_xy, pred_yx) for one pair."""
    if table.kind == "box":
        bx = table.box(pair.id_x)
        by = table.box(pair.id_y)
        return boxes.nbo(bx, by, smoothing), boxes.nbo(by, bx, smoothing)
    dist = float(np.linalg.norm(table.vector(pair.id_x) - table.vector(pair.id_y)))
    pred = min(1.0, max(0.0, 1.0 - dist))
    return pred, pred


def evaluate(table: EmbeddingTable, test_pairs, cfg: TrainConfig) -> dict:
    """L1-Norm, RMSE and Acc<0.1 of predicted vs ground-truth overlaps.

    acc_at_0.1 is the fraction (0..1) of individual directed overlaps whose
    absolute error is below 0.1.
    """
    test_pairs = list(test_pairs)
    if not test_pairs:
        raise ValueError("empty test set")
    smoothing = SmoothingConfig(cfg.rho)
    errs = []
    for pair in test_pairs:
        pred_xy, pred_yx = predict_pair(table, pair, smoothing)
        errs.append((pair.nso_xy - pred_xy, pair.nso_yx - pred_yx))
    errs = np.array(errs)
    return {
        "l1_norm": float(np.mean(np.abs(errs).sum(axis=1))),
        "rmse": float(np.sqrt(np.mean((errs**2).sum(axis=1)))),
        "acc_at_0.1": float(np.mean(np.abs(errs) < 0.1)),
    }


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, table: EmbeddingTable, cfg: TrainConfig, step: int,
                    m: np.ndarray | None = None, v: np.ndarray | None = None):
    np.savez(
        path,
        kind=table.kind,
        ids=np.array(table.ids),
        params=table.params,
        adam_m=m if m is not None else np.zeros_like(table.params),
        adam_v=v if v is not None else np.zeros_like(table.params),
        step=step,
        config=json.dumps(asdict(cfg), sort_keys=True),
    )


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        table = EmbeddingTable(str(data["kind"]), [str(s) for s in data["ids"]],
                               data["params"])
        cfg = TrainConfig(**json.loads(str(data["config"])))
        step = int(data["step"])
    return table, cfg, step
