"""Expression matrices, preprocessing, and split management.

Expression values move through three spaces: raw (non-negative), log
(log2(x+1)), and standardized (per-gene zero mean / unit std, fit on the
training rows only). The generative flow operates in the standardized
space so the unit-Gaussian prior is scale-matched; samples are inverted
back to log space before any metric is computed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

SPACES = ("raw", "log", "standardized")

STD_FLOOR = 1e-6


def _format_float(v: float) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return repr(float(v))


def _gene_fingerprint(genes) -> str:
    return hashlib.sha256("\n".join(genes).encode("utf-8")).hexdigest()


@dataclass
class ExpressionMatrix:
    """Samples-by-genes expression values with an explicit space tag."""

    sample_ids: tuple[str, ...]
    genes: tuple[str, ...]
    values: np.ndarray
    space: str = "raw"

    def __post_init__(self):
        self.sample_ids = tuple(self.sample_ids)
        self.genes = tuple(self.genes)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.sample_ids), len(self.genes)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.genes)} genes"
            )
        if self.space not in SPACES:
            raise ValueError(f"unknown space {self.space!r}")
        if self.space == "raw" and (self.values < 0).any():
            raise ValueError("raw expression values must be non-negative")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    def gene_fingerprint(self) -> str:
        return _gene_fingerprint(self.genes)

    def row(self, sample_id: str) -> np.ndarray:
        return self.values[self.sample_ids.index(sample_id)]


def read_expression_tsv(path, space: str = "raw") -> ExpressionMatrix:
    """Read a TSV with header 'sample_id<TAB>gene...' and one row per sample."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) < 2 or header[0] != "sample_id":
            raise ValueError(f"{path}: expected header starting with 'sample_id'")
        genes = header[1:]
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != len(genes) + 1:
                raise ValueError(
                    f"{path}: line {lineno}: expected {len(genes) + 1} fields, "
                    f"got {len(fields)}"
                )
            ids.append(fields[0])
            rows.append([float(v) for v in fields[1:]])
    return ExpressionMatrix(tuple(ids), tuple(genes), np.asarray(rows), space=space)


def write_expression_tsv(matrix: ExpressionMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id\t" + "\t".join(matrix.genes) + "\n")
        for sid, row in zip(matrix.sample_ids, matrix.values):
            fh.write(sid + "\t" + "\t".join(_format_float(v) for v in row) + "\n")


def log_transform(matrix: ExpressionMatrix) -> ExpressionMatrix:
    """Elementwise log2(x + 1); requires raw-space non-negative input."""
    if matrix.space != "raw":
        raise ValueError(f"log_transform expects raw space, got {matrix.space!r}")
    if (matrix.values < 0).any():
        raise ValueError("negative values in raw expression matrix")
    return ExpressionMatrix(
        matrix.sample_ids, matrix.genes, np.log2(matrix.values + 1.0), space="log"
    )


class Standardizer:
    """Per-gene affine map fit on training rows in log space.

    Uses the population std (ddof=0), floored at STD_FLOOR so constant genes
    standardize to zero. The gene fingerprint guards against applying a
    standardizer fit on a different vocabulary.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray, genes_fingerprint: str):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D with equal length")
        if (self.std <= 0).any():
            raise ValueError("std entries must be positive")
        self.genes_fingerprint = genes_fingerprint

    @classmethod
    def fit(cls, matrix: ExpressionMatrix) -> "Standardizer":
        if matrix.space != "log":
            raise ValueError(f"standardizer is fit in log space, got {matrix.space!r}")
        if matrix.n_samples < 2:
            raise ValueError("need at least 2 training samples to fit a standardizer")
        mean = matrix.values.mean(axis=0)
        std = np.maximum(matrix.values.std(axis=0), STD_FLOOR)
        return cls(mean, std, matrix.gene_fingerprint())

    def _check(self, fingerprint: str) -> None:
        if fingerprint != self.genes_fingerprint:
            raise ValueError(
                "gene vocabulary fingerprint mismatch: standardizer was fit on a "
                "different vocabulary"
            )

    def apply(self, matrix: ExpressionMatrix) -> ExpressionMatrix:
        self._check(matrix.gene_fingerprint())
        if matrix.space != "log":
            raise ValueError(f"apply expects log space, got {matrix.space!r}")
        values = (matrix.values - self.mean) / self.std
        return ExpressionMatrix(matrix.sample_ids, matrix.genes, values, space="standardized")

    def invert(self, matrix: ExpressionMatrix) -> ExpressionMatrix:
        self._check(matrix.gene_fingerprint())
        if matrix.space != "standardized":
            raise ValueError(f"invert expects standardized space, got {matrix.space!r}")
        values = matrix.values * self.std + self.mean
        return ExpressionMatrix(matrix.sample_ids, matrix.genes, values, space="log")

    def invert_array(self, values: np.ndarray) -> np.ndarray:
        """Map standardized rows back to log space without a matrix wrapper."""
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "genes_fingerprint": self.genes_fingerprint,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Standardizer":
        return cls(
            np.asarray(payload["mean"]),
            np.asarray(payload["std"]),
            payload["genes_fingerprint"],
        )


@dataclass
class SplitSpec:
    """Sample-id to fold assignment partitioning a dataset into F folds."""

    folds: dict = field(default_factory=dict)
    n_folds: int = 5

    def __post_init__(self):
        for sid, f in self.folds.items():
            if not 0 <= f < self.n_folds:
                raise ValueError(f"fold {f} for {sid!r} out of range [0, {self.n_folds})")

    def fold_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.folds.items() if f == fold]

    def to_json(self) -> dict:
        return {"n_folds": self.n_folds, "folds": dict(self.folds)}

    @classmethod
    def from_json(cls, payload: dict) -> "SplitSpec":
        return cls(folds=dict(payload["folds"]), n_folds=int(payload["n_folds"]))


def make_splits(sample_ids, n_folds: int = 5, seed: int = 0) -> SplitSpec:
    """Seeded uniform partition with per-fold size difference <= 1."""
    ids = list(sample_ids)
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if len(ids) < n_folds:
        raise ValueError("fewer samples than folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    folds = {ids[int(i)]: int(pos % n_folds) for pos, i in enumerate(order)}
    return SplitSpec(folds=folds, n_folds=n_folds)


def save_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
