"""Ground-truth visible-surface overlap between posed depth images.

Pixels are backprojected into world-space oriented points (surfels); the
directed overlap from view x to view y counts x's points that have a
y-point within a distance threshold, optionally weighted by the cosine
between the matched surface normals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rotation and translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(rot), 1.0, atol=1e-9):
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return self.translation


@dataclass
class CameraView:
    """One posed depth image. depth > 0 exactly where valid_mask is True."""

    id: str
    intrinsics: CameraIntrinsics
    pose: Pose
    depth: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        mask = np.asarray(self.valid_mask, dtype=bool)
        h, w = self.intrinsics.height, self.intrinsics.width
        if depth.shape != (h, w) or mask.shape != (h, w):
            raise ValueError("depth/valid_mask dims must match intrinsics")
        positive = np.zeros_like(mask)
        with np.errstate(invalid="ignore"):
            positive[np.isfinite(depth)] = depth[np.isfinite(depth)] > 0
        if not np.array_equal(positive, mask):
            raise ValueError("valid_mask must equal (depth > 0)")
        self.depth = depth
        self.valid_mask = mask

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class SurfelCloud:
    """World-space points with unit normals and originating pixel coords."""

    points: np.ndarray
    normals: np.ndarray
    source_pixel: np.ndarray

    def __post_init__(self):
        if not (len(self.points) == len(self.normals) == len(self.source_pixel)):
            raise ValueError("points/normals/source_pixel must have equal length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class OverlapRecord:
    id_x: str
    id_y: str
    nso_xy: float
    nso_yx: float

    def __post_init__(self):
        for v in (self.nso_xy, self.nso_yx):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"NSO value out of [0, 1]: {v}")


@dataclass(frozen=True)
class NSOConfig:
    radius: float = 0.1
    n_sub: int = 5000
    seed: int = 0
    weighted: bool = True

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.n_sub < 1:
            raise ValueError("n_sub must be >= 1")


def _camera_points(view: CameraView) -> np.ndarray:
    """Backproject every pixel into the camera frame (invalid pixels -> NaN)."""
    intr = view.intrinsics
    cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    z = np.where(view.valid_mask, view.depth, np.nan)
    x = (cols - intr.cx) / intr.fx * z
    y = (rows - intr.cy) / intr.fy * z
    return np.stack([x, y, z], axis=-1)


def estimate_normals(view: CameraView):
    """Per-pixel unit normals from a total-least-squares plane fit.

    For each valid pixel whose 3x3 backprojected neighborhood holds at least
    4 valid points (center included), the normal is the smallest eigenvector
    of the neighborhood covariance, oriented toward the camera center.
    Returns (normals, valid) with world-frame normals; pixels without a
    reliable fit are flagged invalid.
    """
    pts = _camera_points(view)
    mask = view.valid_mask
    h, w = mask.shape

    # Accumulate neighborhood sums of p, p p^T and counts via 3x3 shifts.
    m = mask.astype(np.float64)
    p = np.where(mask[..., None], pts, 0.0)
    outer = p[..., :, None] * p[..., None, :]

    count = np.zeros((h, w))
    s1 = np.zeros((h, w, 3))
    s2 = np.zeros((h, w, 3, 3))
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rs = slice(max(0, -dr), h - max(0, dr))
            rd = slice(max(0, dr), h - max(0, -dr))
            cs = slice(max(0, -dc), w - max(0, dc))
            cd = slice(max(0, dc), w - max(0, -dc))
            count[rd, cd] += m[rs, cs]
            s1[rd, cd] += p[rs, cs]
            s2[rd, cd] += outer[rs, cs]

    valid = mask & (count >= 4)
    safe = np.maximum(count, 1.0)
    mean = s1 / safe[..., None]
    cov = s2 / safe[..., None, None] - mean[..., :, None] * mean[..., None, :]

    normals = np.zeros((h, w, 3))
    if valid.any():
        cov_v = cov[valid]
        # Symmetrize against accumulation round-off before the eigensolve.
        cov_v = 0.5 * (cov_v + np.transpose(cov_v, (0, 2, 1)))
        _, vecs = np.linalg.eigh(cov_v)
        n = vecs[:, :, 0]
        # Orient toward the camera center (origin of the camera frame).
        flip = np.einsum("ij,ij->i", n, pts[valid]) > 0
        n[flip] *= -1.0
        normals[valid] = n

    world_normals = normals @ view.pose.rotation.T
    return world_normals, valid


def backproject(view: CameraView) -> SurfelCloud:
    """One world-space surfel per valid pixel with a well-determined normal."""
    if not view.valid_mask.any():
        raise ValueError(f"no valid depth in view {view.id!r}")
    normals, normal_valid = estimate_normals(view)
    keep = view.valid_mask & normal_valid
    if not keep.any():
        raise ValueError(f"no valid depth in view {view.id!r}")
    pts_cam = _camera_points(view)[keep]
    pts_world = pts_cam @ view.pose.rotation.T + view.pose.translation
    rows, cols = np.nonzero(keep)
    return SurfelCloud(
        points=pts_world,
        normals=normals[keep],
        source_pixel=np.stack([rows, cols], axis=1),
    )


def subsample(cloud: SurfelCloud, n: int, seed: int) -> SurfelCloud:
    """Uniform subsample without replacement, preserving point order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= len(cloud):
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(cloud), size=n, replace=False))
    return SurfelCloud(cloud.points[idx], cloud.normals[idx], cloud.source_pixel[idx])


def _match_tree(src_points, dst_points, radius):
    tree = cKDTree(dst_points)
    dist, idx = tree.query(src_points, k=1)
    within = dist <= radius
    return within, np.where(within, idx, 0)


def _match_brute(src_points, dst_points, radius):
    dist = cdist(src_points, dst_points)
    idx = np.argmin(dist, axis=1)
    within = dist[np.arange(len(src_points)), idx] <= radius
    return within, np.where(within, idx, 0)


def _weighted_sum(src: SurfelCloud, dst: SurfelCloud, within, idx, weighted: bool):
    if weighted:
        # Normalizing by sqrt(|n_i|^2 |n_j|^2) makes the cosine of a normal
        # with itself exactly 1.0, so self-overlap stays exact.
        dot = np.einsum("ij,ij->i", src.normals, dst.normals[idx])
        nrm_i = np.einsum("ij,ij->i", src.normals, src.normals)
        nrm_j = np.einsum("ij,ij->i", dst.normals[idx], dst.normals[idx])
        cos = dot / np.sqrt(nrm_i * nrm_j)
        w = np.where(within, np.clip(cos, 0.0, 1.0), 0.0)
    else:
        w = within.astype(np.float64)
    return float(np.sum(w))


def overlap_count(
    src: SurfelCloud, dst: SurfelCloud, radius: float, weighted: bool = True
) -> float:
    """Sum of per-surfel match weights from src into dst (k-d tree search)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(src) == 0 or len(dst) == 0:
        return 0.0
    within, idx = _match_tree(src.points, dst.points, radius)
    return _weighted_sum(src, dst, within, idx, weighted)


def overlap_count_brute(
    src: SurfelCloud, dst: SurfelCloud, radius: float, weighted: bool = True
) -> float:
    """O(n^2) reference implementation of overlap_count."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(src) == 0 or len(dst) == 0:
        return 0.0
    within, idx = _match_brute(src.points, dst.points, radius)
    return _weighted_sum(src, dst, within, idx, weighted)


def nso_from_clouds(
    cloud_x: SurfelCloud,
    cloud_y: SurfelCloud,
    id_x: str,
    id_y: str,
    cfg: NSOConfig,
    brute_force: bool = False,
) -> OverlapRecord:
    """Directed NSO in both directions from precomputed surfel clouds.

    The source cloud is subsampled to cfg.n_sub points; matches are searched
    in the full destination cloud. The denominator is the subsampled source
    size, so a view always fully overlaps itself.
    """
    count = overlap_count_brute if brute_force else overlap_count
    sub_x = subsample(cloud_x, cfg.n_sub, cfg.seed)
    sub_y = subsample(cloud_y, cfg.n_sub, cfg.seed)
    nso_xy = count(sub_x, cloud_y, cfg.radius, cfg.weighted) / len(sub_x)
    nso_yx = count(sub_y, cloud_x, cfg.radius, cfg.weighted) / len(sub_y)
    return OverlapRecord(id_x, id_y, nso_xy, nso_yx)


def compute_nso(
    view_x: CameraView, view_y: CameraView, cfg: NSOConfig = NSOConfig()
) -> OverlapRecord:
    """Ground-truth normalized surface overlap between two posed depth images."""
    cloud_x = backproject(view_x)
    cloud_y = backproject(view_y)
    return nso_from_clouds(cloud_x, cloud_y, view_x.id, view_y.id, cfg)
