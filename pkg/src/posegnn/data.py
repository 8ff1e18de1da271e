"""Feature/pose datasets: file format, synthetic scenes and feature-map fixtures.

File format (whitespace separated, one record per line)::

    # name: <text>            optional comment lines, before the header
    # origin: synthetic|ingested
    n d [L W]                 header; L W marks rows as flattened L x W x (d/(L*W)) maps
    f_1 .. f_d px py pz qw qx qy qz s     n rows, s = 0 train / 1 test

Floats are written with 17 significant digits so a save/load cycle is exact.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pose import Pose

TRAIN_FLAG, TEST_FLAG = 0, 1


class DatasetParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)
        self.lineno = lineno


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    poses: tuple[Pose, ...]
    split: tuple[int, ...]
    name: str = "dataset"
    feature_origin: str = "ingested"
    map_shape: tuple[int, int] | None = None

    def __post_init__(self):
        n = self.features.shape[0]
        if len(self.poses) != n or len(self.split) != n:
            raise DatasetError(f"{n} feature rows, {len(self.poses)} poses, {len(self.split)} split flags")
        if any(s not in (TRAIN_FLAG, TEST_FLAG) for s in self.split):
            raise DatasetError("split flags must be 0 (train) or 1 (test)")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features contain NaN or Inf")
        if self.map_shape is not None:
            L, W = self.map_shape
            if self.features.shape[1] % (L * W):
                raise DatasetError(f"feature dim {self.features.shape[1]} not divisible by {L}x{W}")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.features, other.features) and self.poses == other.poses
                and self.split == other.split and self.name == other.name
                and self.feature_origin == other.feature_origin and self.map_shape == other.map_shape)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def node_dim(self) -> int:
        """Per-node feature dimension (the map depth for feature-map datasets)."""
        if self.map_shape is None:
            return self.d
        return self.d // (self.map_shape[0] * self.map_shape[1])

    def indices(self, flag: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.split) == flag)

    def rows(self, flag: int) -> tuple[np.ndarray, list[Pose]]:
        idx = self.indices(flag)
        return self.features[idx], [self.poses[i] for i in idx]

    def train(self) -> tuple[np.ndarray, list[Pose]]:
        return self.rows(TRAIN_FLAG)

    def test(self) -> tuple[np.ndarray, list[Pose]]:
        return self.rows(TEST_FLAG)

    def feature_maps(self, flag: int | None = None) -> np.ndarray:
        """Rows reshaped to (count, L*W, depth)."""
        if self.map_shape is None:
            raise DatasetError("dataset does not hold feature maps")
        x = self.features if flag is None else self.features[self.indices(flag)]
        L, W = self.map_shape
        return x.reshape(x.shape[0], L * W, self.node_dim)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(d: Dataset, path) -> None:
    lines = [f"# name: {d.name}", f"# origin: {d.feature_origin}"]
    header = f"{len(d)} {d.d}"
    if d.map_shape is not None:
        header += f" {d.map_shape[0]} {d.map_shape[1]}"
    lines.append(header)
    for row, pose, s in zip(d.features, d.poses, d.split):
        vals = [*row, *pose.position, *pose.orientation]
        lines.append(" ".join(_fmt(v) for v in vals) + f" {s}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _orientation(q: np.ndarray, lineno: int) -> np.ndarray:
    nsq = float(np.dot(q, q))
    if math.sqrt(nsq) < 1e-6:
        raise DatasetError(f"line {lineno}: quaternion norm below 1e-6")
    # already-unit quaternions are kept bit-exact
    if abs(nsq - 1.0) > 1e-12:
        q = q / math.sqrt(nsq)
    return q


def load_dataset(path) -> Dataset:
    name, origin = os.path.splitext(os.path.basename(str(path)))[0], "ingested"
    header = None
    feats, poses, split = [], [], []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                key, _, value = text[1:].partition(":")
                if key.strip() == "name":
                    name = value.strip()
                elif key.strip() == "origin":
                    origin = value.strip()
                continue
            parts = text.split()
            if header is None:
                if len(parts) not in (2, 4):
                    raise DatasetParseError("header must be 'n d' or 'n d L W'", lineno)
                try:
                    header = [int(p) for p in parts]
                except ValueError:
                    raise DatasetParseError("header fields must be integers", lineno) from None
                if header[0] < 0 or header[1] < 1:
                    raise DatasetParseError("header needs n >= 0 and d >= 1", lineno)
                continue
            d = header[1]
            if len(parts) != d + 8:
                raise DatasetParseError(f"expected {d + 8} fields (d features, 3 position, "
                                        f"4 quaternion, split), got {len(parts)}", lineno)
            try:
                vals = np.array([float(p) for p in parts[:-1]])
                flag = int(parts[-1])
            except ValueError as exc:
                raise DatasetParseError(str(exc), lineno) from None
            if not np.all(np.isfinite(vals)):
                raise DatasetError(f"line {lineno}: non-finite value")
            if flag not in (TRAIN_FLAG, TEST_FLAG):
                raise DatasetParseError(f"split flag must be 0 or 1, got {flag}", lineno)
            q = _orientation(vals[d + 3:], lineno)
            feats.append(vals[:d])
            poses.append(Pose(tuple(float(v) for v in vals[d:d + 3]), tuple(float(v) for v in q)))
            split.append(flag)
    if header is None:
        raise DatasetParseError("missing header")
    if len(feats) != header[0]:
        raise DatasetParseError(f"header declares {header[0]} rows, found {len(feats)}")
    features = np.array(feats, dtype=np.float64).reshape(header[0], header[1])
    map_shape = (header[2], header[3]) if len(header) == 4 else None
    return Dataset(features, tuple(poses), tuple(split), name, origin, map_shape)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic scene parameters.

    Train poses sit on the trajectory at ``spacing`` meter steps; test poses
    are drawn uniformly inside the train trajectory's extent.
    """

    n_train: int = 200
    n_test: int = 40
    d: int = 64
    trajectory: str = "grid"
    feature_noise_sigma: float = 0.05
    embed_smoothness: float = 4.0
    seed: int = 0
    spacing: float = 1.0
    jitter: float = 0.0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need n_train >= 1 and n_test >= 0")
        if self.d < 8:
            raise ValueError("feature dimension d must be >= 8")
        if self.feature_noise_sigma < 0:
            raise ValueError("feature_noise_sigma must be >= 0")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")
        if not self.embed_smoothness > 0 or not self.spacing > 0:
            raise ValueError("embed_smoothness and spacing must be positive")
        if self.trajectory not in ("grid", "loop"):
            raise ValueError(f"trajectory must be 'grid' or 'loop', got {self.trajectory!r}")


@dataclass(frozen=True)
class FeatureMapConfig(SynthConfig):
    n_train: int = 60
    n_test: int = 20
    map_l: int = 7
    map_w: int = 7
    view_depth: float = 2.0

    def validate(self) -> None:
        super().validate()
        if self.map_l * self.map_w < 2:
            raise ValueError("feature maps need at least 2 cells")


def yaw_quaternion(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _grid_positions(n: int, spacing: float) -> np.ndarray:
    """Serpentine walk over a square-ish lattice centered on the origin."""
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    pts = []
    for idx in range(n):
        r, c = divmod(idx, cols)
        if r % 2:
            c = cols - 1 - c
        pts.append(((c - (cols - 1) / 2) * spacing, (r - (rows - 1) / 2) * spacing, 0.0))
    return np.array(pts)


def _grid_yaw(pos: np.ndarray, extent: float) -> np.ndarray:
    u = pos[:, 0] / extent
    v = pos[:, 1] / extent
    return 0.9 * np.sin(math.pi * u) + 0.6 * v


def _trajectory(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, yaws and split flags for train then test poses.

    Grid train positions are lattice points moved by a uniform jitter of up
    to ``jitter * spacing`` per axis. Test positions are a random lattice
    point plus a uniform offset of up to half a spacing per axis, so they
    interpolate rather than extrapolate.
    """
    if cfg.trajectory == "grid":
        lattice = _grid_positions(cfg.n_train, cfg.spacing)
        train_pos = lattice.copy()
        train_pos[:, :2] += rng.uniform(-cfg.jitter, cfg.jitter, (cfg.n_train, 2)) * cfg.spacing
        lo, hi = train_pos.min(axis=0), train_pos.max(axis=0)
        extent = max(float(np.max(hi - lo)), cfg.spacing)
        anchor = lattice[rng.integers(0, cfg.n_train, cfg.n_test)]
        offset = rng.uniform(-0.5, 0.5, (cfg.n_test, 2)) * cfg.spacing
        test_pos = anchor.copy()
        test_pos[:, :2] = np.clip(anchor[:, :2] + offset, lo[:2], hi[:2])
        pos = np.vstack([train_pos, test_pos])
        yaw = _grid_yaw(pos, extent)
    else:
        radius = cfg.n_train * cfg.spacing / (2 * math.pi)
        angles = np.concatenate([
            2 * math.pi * np.arange(cfg.n_train) / cfg.n_train,
            rng.uniform(0, 2 * math.pi, cfg.n_test),
        ])
        pos = np.column_stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros(angles.size)])
        yaw = angles + math.pi / 2
    split = np.array([TRAIN_FLAG] * cfg.n_train + [TEST_FLAG] * cfg.n_test)
    return pos, yaw, split


class _Embedding:
    """Random Fourier features of (position, rotation) with fixed random frequencies."""

    def __init__(self, rng: np.random.Generator, d: int, smoothness: float):
        self.omega = rng.standard_normal((9, d))
        self.phase = rng.uniform(0.0, 2 * math.pi, d)
        self.smoothness = smoothness

    def __call__(self, points: np.ndarray, rot: np.ndarray) -> np.ndarray:
        # rotation enters through the first two columns of R, which are
        # smooth in the rotation and blind to the quaternion sign
        z = np.concatenate([points / self.smoothness, rot[:, :2].T.reshape(-1)[None, :].repeat(points.shape[0], 0)],
                           axis=1)
        return math.sqrt(2.0) * np.cos(z @ self.omega + self.phase)


def generate_synthetic(cfg: SynthConfig, name: str | None = None) -> Dataset:
    """Scene whose features are a smooth random embedding of the pose plus noise."""
    cfg.validate()
    traj_rng, embed_rng, noise_rng = (np.random.Generator(np.random.PCG64(s))
                                      for s in np.random.SeedSequence(cfg.seed).spawn(3))
    pos, yaw, split = _trajectory(cfg, traj_rng)
    embed = _Embedding(embed_rng, cfg.d, cfg.embed_smoothness)
    feats = np.empty((pos.shape[0], cfg.d))
    poses = []
    for i in range(pos.shape[0]):
        q = yaw_quaternion(float(yaw[i]))
        pose = Pose.from_arrays(pos[i], q)
        poses.append(pose)
        feats[i] = embed(pos[i:i + 1], rotation_matrix(pose.q))[0]
    if cfg.feature_noise_sigma > 0:
        feats = feats + noise_rng.normal(0.0, cfg.feature_noise_sigma, feats.shape)
    return Dataset(feats, tuple(poses), tuple(int(s) for s in split),
                   name or f"synthetic-{cfg.trajectory}", "synthetic")


def _camera_rays(L: int, W: int) -> np.ndarray:
    """Unit view directions in the camera frame (x forward) for each map cell."""
    rays = []
    for r in range(L):
        for c in range(W):
            u = (c + 0.5) / W - 0.5
            v = (r + 0.5) / L - 0.5
            ray = np.array([1.0, -u, -v])
            rays.append(ray / np.linalg.norm(ray))
    return np.array(rays)


def generate_feature_maps(cfg: FeatureMapConfig, name: str | None = None) -> Dataset:
    """One L x W x d map per pose; cell features embed the scene point that cell views."""
    cfg.validate()
    traj_rng, embed_rng, noise_rng = (np.random.Generator(np.random.PCG64(s))
                                      for s in np.random.SeedSequence(cfg.seed).spawn(3))
    pos, yaw, split = _trajectory(cfg, traj_rng)
    embed = _Embedding(embed_rng, cfg.d, cfg.embed_smoothness)
    rays = _camera_rays(cfg.map_l, cfg.map_w)
    cells = cfg.map_l * cfg.map_w
    maps = np.empty((pos.shape[0], cells * cfg.d))
    poses = []
    for i in range(pos.shape[0]):
        pose = Pose.from_arrays(pos[i], yaw_quaternion(float(yaw[i])))
        poses.append(pose)
        rot = rotation_matrix(pose.q)
        points = pos[i] + cfg.view_depth * rays @ rot.T
        maps[i] = embed(points, rot).reshape(-1)
    if cfg.feature_noise_sigma > 0:
        maps = maps + noise_rng.normal(0.0, cfg.feature_noise_sigma, maps.shape)
    return Dataset(maps, tuple(poses), tuple(int(s) for s in split),
                   name or f"featuremaps-{cfg.trajectory}", "synthetic", (cfg.map_l, cfg.map_w))


def feature_map_fixture(cfg: FeatureMapConfig | None = None) -> list[tuple[np.ndarray, Pose]]:
    """``(L x W x d map, pose)`` pairs, train poses first."""
    cfg = cfg or FeatureMapConfig()
    ds = generate_feature_maps(cfg)
    maps = ds.features.reshape(len(ds), cfg.map_l, cfg.map_w, cfg.d)
    return [(maps[i], ds.poses[i]) for i in range(len(ds))]


def mean_spacing(positions: np.ndarray) -> float:
    """Mean distance from each position to its nearest other position."""
    p = np.asarray(positions, dtype=np.float64)
    diff = p[:, None, :] - p[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min(axis=1).mean())
