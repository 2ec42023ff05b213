"""Slide-level conditioning inputs and the synthetic verification task.

A slide arrives as a matrix of precomputed tile features. We summarize it
as k cluster centroids via a fully deterministic k-means: seeding is
greedy farthest-point starting from a content hash of the sorted rows, so
the result is invariant to tile order. Centroid rows are ordered by
descending cluster size (ties by first member in the sorted view) purely
for reproducible serialization; the downstream condition encoder is
permutation-invariant anyway.

SyntheticTask supplies conditions with an analytically known conditional
expression distribution (x1 | y is Gaussian with mean W @ mean(y) and
isotropic noise), which is the oracle the end-to-end tests check sampled
ensembles against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


@dataclass(frozen=True)
class TileFeatures:
    """Per-tile feature rows for one slide."""

    slide_id: str
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("features must be a non-empty (n_tiles, d) matrix")
        if not np.isfinite(feats).all():
            raise ValueError("tile features must be finite")
        object.__setattr__(self, "features", feats)

    @property
    def n_tiles(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SlideRepresentation:
    """k cluster centroids summarizing one slide."""

    slide_id: str
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim != 2:
            raise ValueError("y must be a (k, d) matrix")
        if not np.isfinite(y).all():
            raise ValueError("slide representation must be finite")
        object.__setattr__(self, "y", y)

    @property
    def k(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.y.shape[1]


def _content_seed_index(sorted_rows: np.ndarray) -> int:
    """Start index for farthest-point seeding, hashed from row content."""
    digest = hashlib.sha256(np.ascontiguousarray(sorted_rows, dtype="<f8").tobytes()).digest()
    return int.from_bytes(digest[:8], "big") % sorted_rows.shape[0]


def _farthest_point_seeds(rows: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point seed indices; ties take the smallest index."""
    n = rows.shape[0]
    seeds = [_content_seed_index(rows)]
    dist = np.sum((rows - rows[seeds[0]]) ** 2, axis=1)
    while len(seeds) < k:
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, np.sum((rows - rows[nxt]) ** 2, axis=1))
    return np.array(seeds, dtype=np.int64)


def cluster_slide(tiles: TileFeatures, k: int) -> SlideRepresentation:
    """Summarize a slide as k k-means centroids, deterministically.

    Rows are clustered in lexicographically sorted order so the outcome
    does not depend on tile order. If the slide has fewer tiles than k,
    the centroid list is padded by cycling (shape stays static).
    """
    if k < 1:
        raise ValueError(f"cluster count must be >= 1, got {k}")
    rows = tiles.features
    n = rows.shape[0]
    order = np.lexsort(rows.T[::-1])
    rows = np.ascontiguousarray(rows[order])
    k_eff = min(k, n)

    centroids = rows[_farthest_point_seeds(rows, k_eff)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((rows[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        moved = 0.0
        for c in range(k_eff):
            members = rows[assign == c]
            if members.shape[0] == 0:
                continue
            new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - centroids[c])))
            centroids[c] = new
        if moved <= KMEANS_TOL:
            break

    sizes = np.bincount(assign, minlength=k_eff)
    first_member = np.full(k_eff, n, dtype=np.int64)
    for idx in range(n - 1, -1, -1):
        first_member[assign[idx]] = idx
    cluster_order = np.lexsort((first_member, -sizes))

    y = centroids[cluster_order]
    if k_eff < k:
        y = y[np.arange(k) % k_eff]
    return SlideRepresentation(slide_id=tiles.slide_id, y=y)


def write_feature_container(path, array: np.ndarray, header: dict) -> None:
    """JSON header line followed by raw little-endian float32, row-major."""
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(array.tobytes())


def read_feature_container(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed container header: {exc}") from exc
        payload = fh.read()
    rows, cols = _container_shape(header, path)
    expected = rows * cols * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    array = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return header, array


def _container_shape(header: dict, path) -> tuple[int, int]:
    if "n_tiles" in header:
        return int(header["n_tiles"]), int(header["d"])
    if "k" in header:
        return int(header["k"]), int(header["d"])
    raise ValueError(f"{path}: container header lacks n_tiles/k")


def write_tile_features(path, tiles: TileFeatures) -> None:
    header = {"n_tiles": tiles.n_tiles, "d": tiles.dim, "slide_id": tiles.slide_id}
    write_feature_container(path, tiles.features, header)


def read_tile_features(path) -> TileFeatures:
    header, array = read_feature_container(path)
    if "n_tiles" not in header:
        raise ValueError(f"{path}: not a tile-feature container")
    return TileFeatures(slide_id=str(header["slide_id"]), features=array)


def write_slide_representation(path, rep: SlideRepresentation) -> None:
    header = {"k": rep.k, "d": rep.dim, "slide_id": rep.slide_id}
    write_feature_container(path, rep.y, header)


def read_slide_representation(path) -> SlideRepresentation:
    header, array = read_feature_container(path)
    if "k" not in header:
        raise ValueError(f"{path}: not a slide-representation container")
    return SlideRepresentation(slide_id=str(header["slide_id"]), y=array)


def read_tile_features_tsv(path, slide_id: str | None = None) -> TileFeatures:
    """Plain numeric TSV, one tile per row; slide id defaults to the stem."""
    array = np.loadtxt(path, dtype=np.float64, delimiter="\t", ndmin=2)
    if slide_id is None:
        name = str(path).rsplit("/", 1)[-1]
        slide_id = name.rsplit(".", 1)[0]
    return TileFeatures(slide_id=slide_id, features=array)


class SyntheticTask:
    """Gaussian regression task with closed-form conditional moments.

    Conditions are k x d matrices with standard normal entries. The
    expression vector given a condition is

        x1 | y ~ N(W @ mean_rows(y), sigma_task^2 * I_G)

    with W fixed at construction. Rows of W are drawn in a random
    direction and scaled so the per-gene signal std across conditions is
    exactly ``mixing_scale`` (mean_rows(y) has variance 1/k per entry).
    """

    def __init__(self, seed: int, n_genes: int, cond_dim: int, cluster_count: int,
                 sigma_task: float, mixing_scale: float = 1.0):
        if min(n_genes, cond_dim, cluster_count) < 1:
            raise ValueError("dimensions must be positive")
        if sigma_task <= 0:
            raise ValueError(f"sigma_task must be > 0, got {sigma_task}")
        self.seed = int(seed)
        self.n_genes = int(n_genes)
        self.cond_dim = int(cond_dim)
        self.cluster_count = int(cluster_count)
        self.sigma_task = float(sigma_task)
        self.mixing_scale = float(mixing_scale)
        rng = np.random.default_rng(self.seed)
        directions = rng.standard_normal((n_genes, cond_dim))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        self.mixing = directions / norms * (mixing_scale * np.sqrt(cluster_count))

    def condition_summary(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.cluster_count, self.cond_dim):
            raise ValueError(
                f"condition shape {y.shape} != {(self.cluster_count, self.cond_dim)}"
            )
        return y.mean(axis=0)

    def conditional_mean(self, y: np.ndarray) -> np.ndarray:
        return self.mixing @ self.condition_summary(y)

    def conditional_std(self) -> float:
        return self.sigma_task

    def sample_condition(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((self.cluster_count, self.cond_dim))

    def sample_expression(self, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.conditional_mean(y) + self.sigma_task * rng.standard_normal(self.n_genes)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_genes": self.n_genes,
            "cond_dim": self.cond_dim,
            "cluster_count": self.cluster_count,
            "sigma_task": self.sigma_task,
            "mixing_scale": self.mixing_scale,
            "mixing": [[float(v) for v in row] for row in self.mixing],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SyntheticTask":
        task = cls(
            seed=payload["seed"],
            n_genes=payload["n_genes"],
            cond_dim=payload["cond_dim"],
            cluster_count=payload["cluster_count"],
            sigma_task=payload["sigma_task"],
            mixing_scale=payload.get("mixing_scale", 1.0),
        )
        mixing = np.asarray(payload["mixing"], dtype=np.float64)
        if mixing.shape != task.mixing.shape:
            raise ValueError("stored mixing matrix has the wrong shape")
        task.mixing = mixing
        return task


def synth_task(seed: int, n_genes: int, cond_dim: int, cluster_count: int,
               sigma_task: float, mixing_scale: float = 1.0) -> SyntheticTask:
    return SyntheticTask(seed, n_genes, cond_dim, cluster_count, sigma_task, mixing_scale)


def sample_pair(task: SyntheticTask, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (x1, y) from the task's joint; deterministic under the rng."""
    y = task.sample_condition(rng)
    x1 = task.sample_expression(y, rng)
    return x1, y
