"""Retrieval over box embeddings: ranking, relation labels, relative scale.

The index is a packed (bulk-loaded) R-tree keyed on a low-dimensional
projection of the boxes; candidates are re-scored exactly in full
dimension, and smoothed-overlap queries fall back to an exhaustive scan,
so results are always identical to a full scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import boxes
from .boxes import HARD, BoxEmbedding, SmoothingConfig

ZOOM_IN = "zoom-in"
ZOOM_OUT = "zoom-out"
CLONE_LIKE = "clone-like"
OBLIQUE_OR_CROP_OUT = "oblique-or-crop-out"
UNRELATED = "unrelated"

RELATION_NOISE_FLOOR = 0.05


@dataclass(frozen=True)
class RelationLabel:
    label: str
    nbo_qr: float
    nbo_rq: float


@dataclass(frozen=True)
class QueryResult:
    id: str
    enclosure: float
    concentration: float
    score: float


def classify_relation(nbo_qr: float, nbo_rq: float,
                      t_low: float = 0.3, t_high: float = 0.6) -> RelationLabel:
    """Relation of a retrieved image to the query from the two overlaps.

    Low query-to-retrieved overlap with high overlap back means the
    retrieved image is a close-up (zoom-in) of the query; the transpose is
    a zoom-out; both high is clone-like. Everything else is an oblique or
    crop-out relation unless both overlaps are negligible.
    """
    for v in (nbo_qr, nbo_rq):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"overlap value out of [0, 1]: {v}")
    if nbo_qr < t_low and nbo_rq >= t_high:
        label = ZOOM_IN
    elif nbo_qr >= t_high and nbo_rq >= t_high:
        label = CLONE_LIKE
    elif nbo_qr >= t_high and nbo_rq < t_low:
        label = ZOOM_OUT
    elif max(nbo_qr, nbo_rq) >= RELATION_NOISE_FLOOR:
        label = OBLIQUE_OR_CROP_OUT
    else:
        label = UNRELATED
    return RelationLabel(label, nbo_qr, nbo_rq)


def estimate_scale(nbo_qr: float, nbo_rq: float, n_q: int, n_r: int) -> float:
    """Resize factor for the query so the co-visible surface covers equal pixels."""
    if nbo_qr <= 0:
        raise ValueError("no estimated overlap")
    return math.sqrt((n_r / n_q) * (nbo_rq / nbo_qr))


def _interval_scores(q: BoxEmbedding, lowers, uppers, cfg: SmoothingConfig):
    """Exact (enclosure, concentration) of the query against (n, D) gallery bounds."""
    inter_lo = np.maximum(lowers, q.lower)
    inter_hi = np.minimum(uppers, q.upper)
    inter = np.prod(boxes.sigma(inter_hi - inter_lo, cfg), axis=1)
    vol_q = boxes.volume(q, cfg)
    if vol_q == 0.0:
        raise boxes.DegenerateBoxError("degenerate query box")
    vol_r = np.prod(boxes.sigma(uppers - lowers, cfg), axis=1)
    enclosure = inter / vol_q
    with np.errstate(divide="ignore", invalid="ignore"):
        concentration = np.where(vol_r > 0, inter / np.where(vol_r > 0, vol_r, 1.0), 0.0)
    return enclosure, concentration


class BoxIndex:
    """Immutable packed R-tree over box embeddings.

    Tree keys use the 3 dimensions with the widest endpoint spread across
    the gallery; leaf rectangles prune hard-overlap queries and surviving
    candidates are scored exactly in full dimension.
    """

    LEAF_CAPACITY = 64

    def __init__(self, ids, lowers, uppers):
        order = np.argsort(np.asarray(ids, dtype=object))
        self.ids = [ids[i] for i in order]
        self.lowers = np.asarray(lowers, dtype=np.float64)[order]
        self.uppers = np.asarray(uppers, dtype=np.float64)[order]
        if len(self.ids) == 0:
            self.key_dims = np.arange(0)
            self._leaves = []
            return
        spread = self.lowers.var(axis=0) + self.uppers.var(axis=0)
        n_keys = min(3, self.lowers.shape[1])
        self.key_dims = np.argsort(-spread, kind="stable")[:n_keys]
        self._build_leaves()

    @classmethod
    def build(cls, table) -> "BoxIndex":
        """Index every entry of a box-kind embedding table."""
        if table.kind != "box":
            raise ValueError("index requires a box-kind table")
        lowers, uppers = table.bounds()
        return cls(table.ids, lowers, uppers)

    def __len__(self) -> int:
        return len(self.ids)

    def _build_leaves(self):
        # Sort-Tile-Recursive packing on the key dimensions.
        keys = 0.5 * (self.lowers + self.uppers)[:, self.key_dims]
        n = len(self.ids)
        cap = self.LEAF_CAPACITY
        groups = [np.arange(n)]
        for d in range(len(self.key_dims)):
            remaining = len(self.key_dims) - d
            new_groups = []
            for g in groups:
                slices = max(1, round((len(g) / cap) ** (1.0 / remaining)))
                g = g[np.argsort(keys[g, d], kind="stable")]
                size = math.ceil(len(g) / slices)
                new_groups.extend(g[i : i + size] for i in range(0, len(g), size))
            groups = new_groups

        self._leaves = [g for g in groups if len(g)]
        self._leaf_lo = np.array([self.lowers[g][:, self.key_dims].min(axis=0)
                                  for g in self._leaves])
        self._leaf_hi = np.array([self.uppers[g][:, self.key_dims].max(axis=0)
                                  for g in self._leaves])

    def _candidates(self, q: BoxEmbedding) -> np.ndarray:
        """Indices that may intersect the query in the key dimensions."""
        q_lo = q.lower[self.key_dims]
        q_hi = q.upper[self.key_dims]
        hit = np.all((self._leaf_lo <= q_hi) & (self._leaf_hi >= q_lo), axis=1)
        if not hit.any():
            return np.arange(0)
        members = np.concatenate([g for g, h in zip(self._leaves, hit) if h])
        lo = self.lowers[members][:, self.key_dims]
        hi = self.uppers[members][:, self.key_dims]
        keep = np.all((lo <= q_hi) & (hi >= q_lo), axis=1)
        return members[keep]

    def _scores(self, q: BoxEmbedding, cfg: SmoothingConfig):
        n = len(self.ids)
        if cfg.hard:
            enclosure = np.zeros(n)
            concentration = np.zeros(n)
            cand = self._candidates(q)
            if len(cand):
                e, c = _interval_scores(q, self.lowers[cand], self.uppers[cand], cfg)
                enclosure[cand] = e
                concentration[cand] = c
            return enclosure, concentration
        return _interval_scores(q, self.lowers, self.uppers, cfg)

    def query_topk(self, q: BoxEmbedding, k: int,
                   cfg: SmoothingConfig = HARD) -> list[QueryResult]:
        """Top-k gallery entries by mean of the two directed overlaps.

        Ties are broken by ascending id; identical to an exhaustive scan.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if len(self.ids) == 0:
            return []
        enclosure, concentration = self._scores(q, cfg)
        return self._rank(enclosure, concentration, k)

    def query_topk_exhaustive(self, q: BoxEmbedding, k: int,
                              cfg: SmoothingConfig = HARD) -> list[QueryResult]:
        """Oracle path: full scan with no pruning."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if len(self.ids) == 0:
            return []
        enclosure, concentration = _interval_scores(q, self.lowers, self.uppers, cfg)
        return self._rank(enclosure, concentration, k)

    def _rank(self, enclosure, concentration, k):
        score = 0.5 * (enclosure + concentration)
        order = np.argsort(-score, kind="stable")[:k]
        return [
            QueryResult(self.ids[i], float(enclosure[i]),
                        float(concentration[i]), float(score[i]))
            for i in order
        ]

    def query_quadrant(self, q: BoxEmbedding, enclosure_range, concentration_range,
                       cfg: SmoothingConfig = HARD) -> list[QueryResult]:
        """All entries whose (enclosure, concentration) fall in the rectangle.

        Range membership is half-open, lo <= v < hi, except that hi == 1
        also admits v == 1, so bands partitioning [0, 1]^2 cover each entry
        exactly once.
        """
        for lo, hi in (enclosure_range, concentration_range):
            if not (0.0 <= lo < hi <= 1.0):
                raise ValueError(f"invalid range: ({lo}, {hi})")
        enclosure, concentration = _interval_scores(q, self.lowers, self.uppers, cfg)

        def inside(v, rng):
            lo, hi = rng
            return (v >= lo) & ((v < hi) | ((hi == 1.0) & (v == 1.0)))

        keep = inside(enclosure, enclosure_range) & inside(concentration, concentration_range)
        return [
            QueryResult(self.ids[i], float(enclosure[i]), float(concentration[i]),
                        float(0.5 * (enclosure[i] + concentration[i])))
            for i in np.nonzero(keep)[0]
        ]


def build(table) -> BoxIndex:
    return BoxIndex.build(table)
