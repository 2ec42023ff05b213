"""Gene vocabularies, pathway collections, and the inter-pathway graph.

A pathway is an index set over a fixed gene vocabulary. Genes covered by no
retained pathway form the background set, so every gene has at least one
home. Pathways sharing at least one gene are connected in a binary overlap
graph, which is symmetrized, self-looped, and degree-normalized; the
normalized graph induces an additive attention mask (0 on edges, -inf off
edges) consumed by the masked attention block.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GmtParseError(ValueError):
    """Raised when a GMT gene-set file cannot be parsed."""


class GeneVocabulary:
    """Fixed, ordered list of unique gene identifiers.

    The ordering defines the gene index used by every downstream matrix and
    is immutable after construction.
    """

    def __init__(self, genes: Iterable[str]):
        genes = tuple(str(g) for g in genes)
        if not genes:
            raise ValueError("gene vocabulary is empty")
        if len(set(genes)) != len(genes):
            raise ValueError("gene identifiers must be unique")
        self.genes = genes
        self.index = {g: i for i, g in enumerate(genes)}

    def __len__(self) -> int:
        return len(self.genes)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, GeneVocabulary) and self.genes == other.genes

    def __hash__(self):
        return hash(self.genes)

    @property
    def size(self) -> int:
        return len(self.genes)

    @classmethod
    def from_file(cls, path) -> "GeneVocabulary":
        """Read a one-symbol-per-line vocabulary file."""
        with open(path, "r", encoding="utf-8") as fh:
            genes = [line.strip() for line in fh if line.strip()]
        return cls(genes)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for g in self.genes:
                fh.write(g + "\n")

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.genes).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GeneSet:
    """A named set of gene indices, sorted and duplicate-free."""

    name: str
    members: tuple[int, ...]

    def __post_init__(self):
        if tuple(sorted(set(self.members))) != self.members:
            raise ValueError(f"members of {self.name!r} must be sorted and unique")

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class GmtDiagnostics:
    """Bookkeeping from GMT resolution against a vocabulary."""

    n_sets: int = 0
    dropped_symbols: int = 0
    dropped_by_set: dict = None

    def __post_init__(self):
        if self.dropped_by_set is None:
            self.dropped_by_set = {}


def load_gmt(path, vocab: GeneVocabulary) -> tuple[list[GeneSet], GmtDiagnostics]:
    """Parse a GMT file (name, description, gene symbols; tab separated).

    Symbols missing from ``vocab`` are dropped and counted in the returned
    diagnostics. Lines with fewer than three tab-separated fields are a
    parse error; an empty file is an error.
    """
    sets: list[GeneSet] = []
    diag = GmtDiagnostics()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise GmtParseError(
                    f"{path}: line {lineno}: expected at least 3 tab-separated "
                    f"fields (name, description, genes), got {len(fields)}"
                )
            name = fields[0]
            symbols = [s for s in fields[2:] if s]
            resolved = sorted({vocab.index[s] for s in symbols if s in vocab})
            dropped = len(set(symbols)) - len(resolved)
            if dropped:
                diag.dropped_symbols += dropped
                diag.dropped_by_set[name] = dropped
            sets.append(GeneSet(name=name, members=tuple(resolved)))
            diag.n_sets += 1
    if not sets:
        raise GmtParseError(f"{path}: no gene sets found")
    return sets, diag


class PathwayCollection:
    """Retained pathways plus the derived background set over one vocabulary.

    Invariants enforced at construction: every pathway is non-empty with
    sorted, in-range, duplicate-free members; the background is exactly the
    set of genes in no retained pathway; their union covers the vocabulary.
    """

    def __init__(self, vocab: GeneVocabulary, pathways: Sequence[GeneSet]):
        if not pathways:
            raise ValueError("a pathway collection requires at least one pathway")
        g = vocab.size
        covered = np.zeros(g, dtype=bool)
        for ps in pathways:
            if len(ps) == 0:
                raise ValueError(f"pathway {ps.name!r} is empty")
            members = np.asarray(ps.members)
            if members.min() < 0 or members.max() >= g:
                raise ValueError(f"pathway {ps.name!r} has out-of-range gene indices")
            covered[members] = True
        self.vocab = vocab
        self.pathways = tuple(pathways)
        self.background = tuple(int(i) for i in np.nonzero(~covered)[0])

    @property
    def n_pathways(self) -> int:
        return len(self.pathways)

    @property
    def n_genes(self) -> int:
        return self.vocab.size

    def membership_counts(self) -> np.ndarray:
        """Per-gene count of covering pathways plus background membership.

        This is the denominator of the overlap-averaged reconstruction and
        is always >= 1 by the cover invariant.
        """
        counts = np.zeros(self.n_genes, dtype=np.int64)
        for ps in self.pathways:
            counts[list(ps.members)] += 1
        counts[list(self.background)] += 1
        return counts

    def fingerprint(self) -> str:
        payload = {
            "genes": list(self.vocab.genes),
            "pathways": [{"name": p.name, "members": list(p.members)} for p in self.pathways],
            "background": list(self.background),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def filter_pathways(
    raw_sets: Sequence[GeneSet],
    min_size: int,
    max_size: int,
    vocab: GeneVocabulary,
) -> PathwayCollection:
    """Retain sets with min_size <= size <= max_size, preserving input order.

    Genes exclusive to discarded sets fall into the background. Raises if no
    set survives the filter.
    """
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    if max_size < min_size:
        raise ValueError("max_size must be >= min_size")
    retained = [s for s in raw_sets if min_size <= len(s) <= max_size]
    if not retained:
        raise ValueError(
            f"no pathways retained with size filter [{min_size}, {max_size}] "
            f"out of {len(raw_sets)} candidate sets"
        )
    return PathwayCollection(vocab, retained)


def build_adjacency(collection: PathwayCollection) -> np.ndarray:
    """Binary overlap adjacency: A[i, j] = 1 iff i != j share >= 1 gene."""
    p = collection.n_pathways
    a = np.zeros((p, p), dtype=np.float64)
    member_sets = [set(ps.members) for ps in collection.pathways]
    for i in range(p):
        for j in range(i + 1, p):
            if member_sets[i] & member_sets[j]:
                a[i, j] = 1.0
                a[j, i] = 1.0
    return a


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization with self-loops.

    A_norm = D^(-1/2) (sym(A) + I) D^(-1/2) with sym(A) = max(A, A^T) and D
    the row-degree diagonal of sym(A) + I. Isolated nodes keep degree 1 from
    their self-loop, so the result is always finite.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency must be square")
    sym = np.maximum(a, a.T) + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(sym.sum(axis=1))
    return sym * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def build_attention_mask(normalized: np.ndarray) -> np.ndarray:
    """Additive mask: 0 where the normalized adjacency is positive, else -inf."""
    a = np.asarray(normalized, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("normalized adjacency must be square")
    if (a < 0).any():
        raise ValueError("normalized adjacency must be non-negative")
    mask = np.where(a > 0, 0.0, -np.inf)
    return mask


@dataclass(frozen=True)
class PathwayGraph:
    """Adjacency, its normalization, and the derived additive attention mask."""

    adjacency: np.ndarray
    normalized: np.ndarray
    mask: np.ndarray


def build_graph(collection: PathwayCollection) -> PathwayGraph:
    a = build_adjacency(collection)
    a_norm = normalize_adjacency(a)
    return PathwayGraph(adjacency=a, normalized=a_norm, mask=build_attention_mask(a_norm))


def graph_to_json(collection: PathwayCollection, graph: PathwayGraph) -> dict:
    """Inspection container: vocabulary, membership, background, edge list."""
    edges = [[int(i), int(j)] for i, j in zip(*np.nonzero(np.triu(graph.adjacency, k=1)))]
    return {
        "genes": list(collection.vocab.genes),
        "pathways": [
            {"name": p.name, "members": list(p.members)} for p in collection.pathways
        ],
        "background": list(collection.background),
        "edges": edges,
    }


def graph_from_json(payload: dict) -> tuple[PathwayCollection, PathwayGraph]:
    vocab = GeneVocabulary(payload["genes"])
    sets = [GeneSet(p["name"], tuple(p["members"])) for p in payload["pathways"]]
    collection = PathwayCollection(vocab, sets)
    if list(collection.background) != list(payload["background"]):
        raise ValueError("background set in container disagrees with membership")
    graph = build_graph(collection)
    edges = {(min(i, j), max(i, j)) for i, j in payload["edges"]}
    got = {
        (int(i), int(j))
        for i, j in zip(*np.nonzero(np.triu(graph.adjacency, k=1)))
    }
    if edges != got:
        raise ValueError("edge list in container disagrees with recomputed adjacency")
    return collection, graph
