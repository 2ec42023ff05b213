"""Shared fixtures: small pathway collections and analytic velocity stubs.

The stubs implement the model call protocol expected by the flow engine
(``model(x, t, y=None, rng=None, cond_drop_mask=None)`` plus an
``n_genes`` attribute) with closed-form fields, so sampler and loss
behavior can be checked against exact solutions without any training.
"""

import numpy as np
import pytest
import torch
from torch import nn

from pathflow import GeneSet, GeneVocabulary, NetworkConfig, PathwayCollection


class GaussianFieldStub(nn.Module):
    """Optimal velocity for a 1-D Gaussian target under the linear path.

    For x1 ~ N(mu, sigma^2), x0 ~ N(0, 1) independent, and
    x_t = t*x1 + (1-t)*x0, the conditional expectation of the path
    derivative given x_t = x is

        v(x, t) = mu + (t*sigma^2 - (1-t)) / (t^2*sigma^2 + (1-t)^2) * (x - t*mu)

    so exact integration transports N(0, 1) to N(mu, sigma^2).
    """

    n_genes = 1

    def __init__(self, mu: float, sigma: float):
        super().__init__()
        self.mu = float(mu)
        self.sigma = float(sigma)

    def forward(self, x, t, y=None, rng=None, cond_drop_mask=None):
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.ndim == 1:
            t = t.unsqueeze(1)
        s2 = self.sigma**2
        denom = t**2 * s2 + (1.0 - t) ** 2
        slope = (t * s2 - (1.0 - t)) / denom
        return self.mu + slope * (x - t * self.mu)


class ConstantFieldStub(nn.Module):
    """v(x, t) = c everywhere; Euler integration is exact for it."""

    def __init__(self, c):
        super().__init__()
        self.register_buffer("c", torch.as_tensor(c, dtype=torch.get_default_dtype()))
        self.n_genes = self.c.numel()

    def forward(self, x, t, y=None, rng=None, cond_drop_mask=None):
        return self.c.expand_as(x) + torch.zeros_like(x)


class ContractionFieldStub(nn.Module):
    """v(x, t) = -x; the exact flow is x(1) = x(0) * exp(-1)."""

    def __init__(self, n_genes: int = 1):
        super().__init__()
        self.n_genes = n_genes

    def forward(self, x, t, y=None, rng=None, cond_drop_mask=None):
        return -x


class ZeroFieldStub(nn.Module):
    """v(x, t) = 0; the flow-matching loss against it is E[(v*)^2]."""

    def __init__(self, n_genes: int):
        super().__init__()
        self.n_genes = n_genes

    def forward(self, x, t, y=None, rng=None, cond_drop_mask=None):
        return torch.zeros_like(x)


class BranchFieldStub(nn.Module):
    """Constant conditional/unconditional fields and a call log.

    Records whether each forward saw a condition, so tests can assert
    which guidance branches the sampler actually evaluates.
    """

    def __init__(self, n_genes: int, v_cond: float, v_uncond: float):
        super().__init__()
        self.n_genes = n_genes
        self.v_cond = float(v_cond)
        self.v_uncond = float(v_uncond)
        self.calls: list[bool] = []

    def forward(self, x, t, y=None, rng=None, cond_drop_mask=None):
        conditioned = y is not None
        self.calls.append(conditioned)
        value = self.v_cond if conditioned else self.v_uncond
        return torch.full_like(x, value)


@pytest.fixture
def vocab12() -> GeneVocabulary:
    return GeneVocabulary([f"g{i:02d}" for i in range(12)])


@pytest.fixture
def toy_collection(vocab12) -> PathwayCollection:
    """Three pathways over 12 genes; PWC shares no gene, g11 is background."""
    sets = [
        GeneSet("PWA", (0, 1, 2, 3, 4)),
        GeneSet("PWB", (3, 4, 5, 6, 7, 8)),
        GeneSet("PWC", (9, 10)),
    ]
    return PathwayCollection(vocab12, sets)


@pytest.fixture
def covered_collection(vocab12) -> PathwayCollection:
    """Two overlapping pathways covering every gene; empty background."""
    sets = [
        GeneSet("PWA", tuple(range(0, 7))),
        GeneSet("PWB", tuple(range(5, 12))),
    ]
    return PathwayCollection(vocab12, sets)


def small_config(**overrides) -> NetworkConfig:
    base = dict(
        condition_dim=6, depth=2, heads=2, hidden=16, cluster_count=3, dropout=0.1
    )
    base.update(overrides)
    return NetworkConfig(**base)


def random_collection(rng: np.random.Generator, n_genes: int, n_sets: int,
                      cover: bool = False) -> PathwayCollection:
    """Random overlapping pathway collection for property loops.

    With ``cover=True`` the last set absorbs all uncovered genes so the
    background is empty (clipped into the same size regime).
    """
    vocab = GeneVocabulary([f"g{i:03d}" for i in range(n_genes)])
    sets = []
    for i in range(n_sets):
        size = int(rng.integers(2, max(3, n_genes // 2)))
        members = np.sort(rng.choice(n_genes, size=size, replace=False))
        sets.append(GeneSet(f"S{i}", tuple(int(m) for m in members)))
    if cover:
        covered = set()
        for s in sets:
            covered.update(s.members)
        rest = tuple(sorted(set(range(n_genes)) - covered))
        if rest:
            sets.append(GeneSet("REST", rest))
    return PathwayCollection(vocab, sets)
