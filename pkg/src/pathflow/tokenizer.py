"""Expression-to-token embedding and overlap-averaged gene assembly.

An expression vector x in R^G becomes one token per pathway plus one
background token: token_i = f_i(x restricted to pathway i) + e_i with a
two-layer GELU perceptron f_i and a learnable per-token bias e_i. Head
outputs over the same index sets are assembled back to R^G by averaging
every head's prediction for a gene over all sets containing it.

An empty background set degenerates cleanly: its perceptron has zero-width
input and hidden layers, so the background token is the second layer's
bias, a learnable constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .pathways import PathwayCollection


@dataclass
class PathwayTokens:
    """Per-pathway token matrix (batch, P, h) and background token (batch, h)."""

    tokens: torch.Tensor
    background_token: torch.Tensor


def _init_fan_in_uniform(linear: nn.Linear) -> None:
    # max() keeps the zero-input background layers finite
    bound = 1.0 / math.sqrt(max(linear.in_features, 1))
    nn.init.uniform_(linear.weight, -bound, bound)
    nn.init.uniform_(linear.bias, -bound, bound)


class SetEmbed(nn.Module):
    """Two-layer GELU perceptron over one gene index set.

    Hidden width is min(4 * set size, out_dim), bounding parameters for
    large sets. A zero-size set yields a learnable constant output.
    """

    def __init__(self, members, out_dim: int):
        super().__init__()
        self.register_buffer("members", torch.tensor(list(members), dtype=torch.long))
        in_dim = len(members)
        width = min(4 * in_dim, out_dim)
        self.fc1 = nn.Linear(in_dim, width)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(width, out_dim)
        _init_fan_in_uniform(self.fc1)
        _init_fan_in_uniform(self.fc2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x[:, self.members])))


class PathwayTokenizer(nn.Module):
    """Maps (batch, G) expression to pathway tokens plus a background token."""

    def __init__(self, collection: PathwayCollection, hidden: int):
        super().__init__()
        if hidden < 1:
            raise ValueError("token width must be >= 1")
        self.hidden = hidden
        self.n_genes = collection.n_genes
        self.pathway_embeds = nn.ModuleList(
            SetEmbed(p.members, hidden) for p in collection.pathways
        )
        self.background_embed = SetEmbed(collection.background, hidden)
        # token biases start at zero so zeroed perceptrons isolate them exactly
        self.token_bias = nn.Parameter(torch.zeros(collection.n_pathways, hidden))
        self.background_bias = nn.Parameter(torch.zeros(hidden))

    def forward(self, x: torch.Tensor) -> PathwayTokens:
        if x.ndim != 2 or x.shape[1] != self.n_genes:
            raise ValueError(f"expected (batch, {self.n_genes}) input, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("expression input contains non-finite values")
        tokens = torch.stack([emb(x) for emb in self.pathway_embeds], dim=1)
        tokens = tokens + self.token_bias
        background = self.background_embed(x) + self.background_bias
        return PathwayTokens(tokens=tokens, background_token=background)


class GeneAssembler(nn.Module):
    """Averages per-set head outputs into a (batch, G) vector.

    Each gene's value is the mean of the predictions from every pathway
    containing it plus the background prediction if it is a background
    gene; positions within a set follow the sorted member order.
    """

    def __init__(self, collection: PathwayCollection):
        super().__init__()
        counts = collection.membership_counts()
        if (counts == 0).any():
            raise ValueError("a gene is covered by no pathway and not in the background")
        index = [i for p in collection.pathways for i in p.members]
        index.extend(collection.background)
        self.register_buffer("scatter_index", torch.tensor(index, dtype=torch.long))
        self.register_buffer("counts", torch.tensor(counts, dtype=torch.get_default_dtype()))
        self.set_sizes = tuple(len(p) for p in collection.pathways)
        self.background_size = len(collection.background)
        self.n_genes = collection.n_genes

    def forward(self, per_pathway, background: torch.Tensor) -> torch.Tensor:
        if len(per_pathway) != len(self.set_sizes):
            raise ValueError(
                f"expected {len(self.set_sizes)} pathway outputs, got {len(per_pathway)}"
            )
        for i, (out, size) in enumerate(zip(per_pathway, self.set_sizes)):
            if out.ndim != 2 or out.shape[1] != size:
                raise ValueError(f"pathway {i} output has shape {tuple(out.shape)}, wants (batch, {size})")
        if background.ndim != 2 or background.shape[1] != self.background_size:
            raise ValueError(
                f"background output has shape {tuple(background.shape)}, wants (batch, {self.background_size})"
            )
        flat = torch.cat(list(per_pathway) + [background], dim=1)
        total = torch.zeros(
            flat.shape[0], self.n_genes, dtype=flat.dtype, device=flat.device
        )
        total.index_add_(1, self.scatter_index, flat)
        return total / self.counts.to(flat.dtype)


def reconstruct(per_pathway, background: torch.Tensor, collection: PathwayCollection) -> torch.Tensor:
    """One-shot overlap-averaged assembly without holding an assembler."""
    return GeneAssembler(collection).forward(per_pathway, background)
