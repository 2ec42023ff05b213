"""Pathway-token flow matching for conditional gene-expression generation."""

from .pathways import (
    GeneSet,
    GeneVocabulary,
    GmtParseError,
    PathwayCollection,
    PathwayGraph,
    build_adjacency,
    build_attention_mask,
    build_graph,
    filter_pathways,
    graph_from_json,
    graph_to_json,
    load_gmt,
    normalize_adjacency,
)
from .data import (
    ExpressionMatrix,
    SplitSpec,
    Standardizer,
    load_json,
    log_transform,
    make_splits,
    read_expression_tsv,
    save_json,
    write_expression_tsv,
)
from .metrics import (
    MetricsReport,
    UncertaintyReport,
    compute_metrics_report,
    gaussian_nll,
    interval_coverage,
    pcc,
    per_gene_pcc,
    per_gene_rmse,
    point_prediction,
    rmse,
    select_top_k,
    spearman,
    variance_error_spearman,
)
from .conditioning import (
    SlideRepresentation,
    SyntheticTask,
    TileFeatures,
    cluster_slide,
    read_slide_representation,
    read_tile_features,
    read_tile_features_tsv,
    sample_pair,
    synth_task,
    write_slide_representation,
    write_tile_features,
)
from .tokenizer import GeneAssembler, PathwayTokenizer, PathwayTokens, reconstruct
from .network import (
    ConditionEncoder,
    ConditionalBlock,
    GraphAttentionBlock,
    MaskedSelfAttention,
    NetworkConfig,
    TimestepEmbedder,
    VelocityNetwork,
    combine_conditioning,
    sinusoidal_features,
)
from .flow import (
    Ema,
    FingerprintMismatchError,
    FlowConfig,
    LinearInterpolant,
    LogisticInterpolant,
    NonFiniteLossError,
    SampleSet,
    SamplingNumericsError,
    TrainingDivergedError,
    cfg_velocity,
    euler_sample,
    fm_loss,
    generate_ensemble,
    interpolate,
    load_checkpoint,
    make_interpolant,
    read_ensemble,
    save_checkpoint,
    target_velocity,
    train,
    write_ensemble,
)

__version__ = "0.1.0"
