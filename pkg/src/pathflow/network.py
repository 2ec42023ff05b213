"""Conditional velocity field over pathway tokens.

The network evaluates v(x_t, t | y): tokenize the state (tokenizer
module), mix pathway tokens once under the pathway-graph attention mask,
run a stack of adaptively modulated transformer blocks conditioned on the
sum of a time embedding and a condition embedding, then map each token
through a linear head and assemble gene values by overlap averaging. The
background token skips the token-mixing stack and feeds its head
directly; background genes are disjoint from every pathway, so there is
no structure for it to attend over.

Dropout draws come from a caller-supplied torch.Generator so training is
reproducible from a single seed; evaluation mode uses no randomness.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .pathways import PathwayCollection, PathwayGraph, build_graph
from .tokenizer import GeneAssembler, PathwayTokenizer

FFN_RATIO = 4
COND_HEADS = 1
TIME_SCALE = 1000.0
TIME_MAX_PERIOD = 10000.0


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters for the velocity network."""

    condition_dim: int
    depth: int = 7
    heads: int = 8
    hidden: int = 512
    cluster_count: int = 100
    dropout: float = 0.1
    residual_scale_init: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.hidden < 2 or self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be >= 2 and divisible by heads ({self.heads})")
        if self.condition_dim < 1 or self.cluster_count < 1:
            raise ValueError("condition_dim and cluster_count must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "NetworkConfig":
        return cls(**payload)


def generator_dropout(x: torch.Tensor, p: float, training: bool,
                      rng: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires a generator")
    keep = torch.rand(x.shape, generator=rng, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def sinusoidal_features(t: torch.Tensor, dim: int, scale: float = TIME_SCALE,
                        max_period: float = TIME_MAX_PERIOD) -> torch.Tensor:
    """Geometric-frequency cos/sin features of scaled time, shape (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t.reshape(-1, 1) * scale * freqs
    feats = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        feats = torch.cat([feats, torch.zeros_like(feats[:, :1])], dim=1)
    return feats


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of t in [0,1] followed by a two-layer perceptron."""

    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.mlp = nn.Sequential(
            nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if ((t < 0.0) | (t > 1.0)).any():
            raise ValueError("flow time must lie in [0, 1]")
        return self.mlp(sinusoidal_features(t, self.hidden))


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention with an optional additive logit mask.

    Hand-rolled so attention probabilities can be returned exactly as used;
    -inf mask entries are applied as the dtype's most negative finite value,
    which still drives the softmax output to exactly zero.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                return_weights: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            neg = torch.finfo(logits.dtype).min
            additive = torch.where(
                torch.isneginf(mask.to(logits.dtype)),
                torch.full((), neg, dtype=logits.dtype, device=logits.device),
                mask.to(logits.dtype),
            )
            logits = logits + additive
        probs = torch.softmax(logits, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        return (out, probs) if return_weights else (out, None)


class GraphAttentionBlock(nn.Module):
    """Masked token mixing with a learned residual scale, then an FFN.

    tokens' = MHA(tokens; mask); r = tokens + alpha * Dropout(tokens');
    out = r + FFN(LayerNorm(r)).
    """

    def __init__(self, dim: int, heads: int, mask, dropout: float = 0.1,
                 residual_scale_init: float = 1.0):
        super().__init__()
        self.attn = MaskedSelfAttention(dim, heads)
        self.register_buffer(
            "mask", torch.as_tensor(mask, dtype=torch.get_default_dtype())
        )
        self.residual_scale = nn.Parameter(torch.tensor(float(residual_scale_init)))
        self.dropout_p = float(dropout)
        self.norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, FFN_RATIO * dim), nn.GELU(), nn.Linear(FFN_RATIO * dim, dim)
        )

    def forward(self, tokens: torch.Tensor, rng: torch.Generator | None = None,
                return_weights: bool = False):
        if tokens.shape[1] != self.mask.shape[0]:
            raise ValueError(
                f"got {tokens.shape[1]} tokens for a {self.mask.shape[0]}-node mask"
            )
        mixed, weights = self.attn(tokens, self.mask, return_weights)
        x = tokens + self.residual_scale * generator_dropout(
            mixed, self.dropout_p, self.training, rng
        )
        x = x + self.ffn(self.norm(x))
        if not torch.isfinite(x).all():
            raise FloatingPointError("graph attention block produced non-finite tokens")
        return (x, weights) if return_weights else x


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class ConditionalBlock(nn.Module):
    """Transformer block modulated by the conditioning vector.

    Shift/scale/gate pairs for the attention and FFN branches are regressed
    from c; gate projections start at zero so the block is the identity at
    initialization.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = MaskedSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ffn = nn.Sequential(
            nn.Linear(dim, FFN_RATIO * dim), nn.GELU(), nn.Linear(FFN_RATIO * dim, dim)
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = self.modulation(c).chunk(6, dim=1)
        attn_out, _ = self.attn(modulate(self.norm1(x), shift_a, scale_a))
        x = x + gate_a.unsqueeze(1) * attn_out
        x = x + gate_f.unsqueeze(1) * self.ffn(modulate(self.norm2(x), shift_f, scale_f))
        return x


class ConditionEncoder(nn.Module):
    """Permutation-invariant map from (k, d) cluster tokens to R^hidden.

    One pre-norm self-attention block over cluster tokens, mean pooling,
    then a linear projection. The null condition bypasses the encoder and
    returns a learnable embedding, the classifier-free-guidance branch.
    """

    def __init__(self, cluster_count: int, cond_dim: int, hidden: int):
        super().__init__()
        self.cluster_count = cluster_count
        self.cond_dim = cond_dim
        self.norm1 = nn.LayerNorm(cond_dim)
        self.attn = MaskedSelfAttention(cond_dim, COND_HEADS)
        self.norm2 = nn.LayerNorm(cond_dim)
        self.ffn = nn.Sequential(
            nn.Linear(cond_dim, FFN_RATIO * cond_dim),
            nn.GELU(),
            nn.Linear(FFN_RATIO * cond_dim, cond_dim),
        )
        self.proj = nn.Linear(cond_dim, hidden)
        self.null_embedding = nn.Parameter(torch.zeros(hidden))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 3 or y.shape[1] != self.cluster_count or y.shape[2] != self.cond_dim:
            raise ValueError(
                f"condition must be (batch, {self.cluster_count}, {self.cond_dim}), "
                f"got {tuple(y.shape)}"
            )
        if not torch.isfinite(y).all():
            raise ValueError("condition contains non-finite values")
        z = y + self.attn(self.norm1(y))[0]
        z = z + self.ffn(self.norm2(z))
        return self.proj(z.mean(dim=1))

    def null(self, batch: int) -> torch.Tensor:
        return self.null_embedding.unsqueeze(0).expand(batch, -1)


def combine_conditioning(t_emb: torch.Tensor, c_y: torch.Tensor) -> torch.Tensor:
    """Conditioning vector fed to every modulated block and head."""
    return t_emb + c_y


class VelocityNetwork(nn.Module):
    """Full conditional velocity field v(x_t, t | y) over R^G."""

    def __init__(self, config: NetworkConfig, collection: PathwayCollection,
                 graph: PathwayGraph | None = None):
        super().__init__()
        if graph is None:
            graph = build_graph(collection)
        if graph.mask.shape != (collection.n_pathways, collection.n_pathways):
            raise ValueError("attention mask does not match the pathway count")
        self.config = config
        self.collection_fingerprint = collection.fingerprint()
        self.n_genes = collection.n_genes
        h = config.hidden
        self.tokenizer = PathwayTokenizer(collection, h)
        self.graph_block = GraphAttentionBlock(
            h, config.heads, graph.mask, config.dropout, config.residual_scale_init
        )
        self.time_embed = TimestepEmbedder(h)
        self.condition_encoder = ConditionEncoder(
            config.cluster_count, config.condition_dim, h
        )
        self.blocks = nn.ModuleList(
            ConditionalBlock(h, config.heads) for _ in range(config.depth)
        )
        self.pathway_heads = nn.ModuleList(
            nn.Linear(2 * h, len(p)) for p in collection.pathways
        )
        self.background_head = nn.Linear(2 * h, len(collection.background))
        self.assembler = GeneAssembler(collection)

    def _time_batch(self, t, batch: int, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ValueError(f"time must be scalar or shape ({batch},), got {tuple(t.shape)}")
        return t

    def embed_condition(self, y: torch.Tensor | None, batch: int,
                        cond_drop_mask: torch.Tensor | None = None) -> torch.Tensor:
        if y is None:
            return self.condition_encoder.null(batch)
        if y.ndim == 2:
            y = y.unsqueeze(0).expand(batch, -1, -1)
        if y.shape[0] != batch:
            raise ValueError(f"condition batch {y.shape[0]} != input batch {batch}")
        c_y = self.condition_encoder(y)
        if cond_drop_mask is not None:
            if cond_drop_mask.shape != (batch,):
                raise ValueError("condition-dropout mask must be one flag per item")
            c_y = torch.where(
                cond_drop_mask.unsqueeze(1), self.condition_encoder.null(batch), c_y
            )
        return c_y

    def forward(self, x: torch.Tensor, t, y: torch.Tensor | None = None,
                rng: torch.Generator | None = None,
                cond_drop_mask: torch.Tensor | None = None) -> torch.Tensor:
        batch = x.shape[0]
        t = self._time_batch(t, batch, x)
        c = combine_conditioning(
            self.time_embed(t), self.embed_condition(y, batch, cond_drop_mask)
        )
        embedded = self.tokenizer(x)
        tokens = self.graph_block(embedded.tokens, rng=rng)
        for block in self.blocks:
            tokens = block(tokens, c)
        per_pathway = [
            head(torch.cat([tokens[:, i, :], c], dim=1))
            for i, head in enumerate(self.pathway_heads)
        ]
        background = self.background_head(
            torch.cat([embedded.background_token, c], dim=1)
        )
        return self.assembler(per_pathway, background)
