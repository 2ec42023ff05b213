"""Command-line pipeline: synth, train, sample, eval.

One JSON config file drives every command; a small set of flags override
individual fields with precedence flag > config file > built-in default.
Outputs carry provenance (seeds, a hash of the effective config, and the
model's pathway fingerprint) and contain no timestamps, so re-running a
command with identical inputs reproduces its outputs byte for byte.

Exit codes: 0 success, 2 config or validation error, 3 numerical failure
during training or sampling, 4 fingerprint mismatch between a checkpoint
and the pathway collection or dataset.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .conditioning import (
    SlideRepresentation,
    read_slide_representation,
    synth_task,
    write_slide_representation,
)
from .data import (
    ExpressionMatrix,
    Standardizer,
    load_json,
    log_transform,
    read_expression_tsv,
    save_json,
    write_expression_tsv,
    _format_float,
)
from .flow import (
    Ema,
    FlowConfig,
    SamplingNumericsError,
    TrainingDivergedError,
    FingerprintMismatchError,
    generate_ensemble,
    load_checkpoint,
    make_interpolant,
    read_ensemble,
    save_checkpoint,
    train,
    write_ensemble,
)
from .metrics import (
    UncertaintyReport,
    compute_metrics_report,
    gaussian_nll,
    interval_coverage,
    point_prediction,
    variance_error_spearman,
)
from .network import NetworkConfig, VelocityNetwork
from .pathways import (
    GeneSet,
    GeneVocabulary,
    GmtParseError,
    PathwayCollection,
    filter_pathways,
    load_gmt,
)


class ConfigError(ValueError):
    """Invalid or missing configuration; maps to exit code 2."""


DEFAULTS: dict = {
    "seed": 0,
    "data_dir": "data",
    "run_dir": "run",
    # synthetic dataset geometry
    "n_genes": 40,
    "cond_dim": 16,
    "cluster_count": 8,
    "sigma_task": 0.3,
    "mixing_scale": 1.0,
    "n_pathways": 6,
    "pathway_size_min": 5,
    "pathway_size_max": 12,
    "n_train": 400,
    "n_test": 100,
    "expression_space": "log",
    # pathway retention filter (null keeps every non-empty set)
    "filter_min_size": None,
    "filter_max_size": None,
    # velocity network
    "depth": 7,
    "heads": 8,
    "hidden": 512,
    "dropout": 0.1,
    "residual_scale_init": 1.0,
    # flow training and sampling
    "steps": 20,
    "cfg_scale": 2.0,
    "condition_dropout_prob": 0.1,
    "ema_decay": 0.999,
    "learning_rate": 1e-4,
    "batch_size": 32,
    "max_epochs": 2000,
    "interpolant": "linear",
    "logistic_sharpness": 10.0,
    "ensemble_n": 32,
    # evaluation
    "top_k": [20, 10],
    "point_mode": "mean",
    "per_gene_dump": True,
}

OVERRIDE_FIELDS = (
    "seed", "cfg_scale", "steps", "interpolant", "learning_rate", "ensemble_n", "top_k",
)


def load_run_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        file_cfg = load_json(path)
        unknown = sorted(set(file_cfg) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    if cfg["interpolant"] not in ("linear", "logistic"):
        raise ConfigError(f"interpolant must be linear or logistic, got {cfg['interpolant']!r}")
    if cfg["expression_space"] not in ("raw", "log"):
        raise ConfigError(f"expression_space must be raw or log, got {cfg['expression_space']!r}")
    if cfg["point_mode"] not in ("mean", "median", "single"):
        raise ConfigError(f"point_mode must be mean, median, or single, got {cfg['point_mode']!r}")
    if not isinstance(cfg["top_k"], list) or not all(isinstance(k, int) and k > 0 for k in cfg["top_k"]):
        raise ConfigError("top_k must be a list of positive integers")
    return cfg


def config_sha256(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _dataset_paths(cfg: dict) -> dict:
    d = Path(cfg["data_dir"])
    return {
        "root": d,
        "vocab": d / "genes.txt",
        "gmt": d / "pathways.gmt",
        "train": d / "train_expression.tsv",
        "test": d / "test_expression.tsv",
        "conditions": d / "conditions",
        "task": d / "task.json",
        "manifest": d / "manifest.json",
    }


def _run_paths(cfg: dict) -> dict:
    r = Path(cfg["run_dir"])
    return {
        "root": r,
        "checkpoint": r / "checkpoint.pt",
        "history": r / "loss_history.json",
        "ensembles": r / "ensembles",
        "metrics": r / "metrics.json",
        "uncertainty": r / "uncertainty.json",
        "per_gene": r / "per_gene_metrics.tsv",
    }


def _condition_seed(base_seed: int, condition_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{condition_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _draw_pathways(rng: np.random.Generator, cfg: dict) -> list[GeneSet]:
    """Random member sets; redrawn until two pathways share a gene."""
    n_genes = cfg["n_genes"]
    count = cfg["n_pathways"]
    lo, hi = cfg["pathway_size_min"], cfg["pathway_size_max"]
    if not 1 <= lo <= hi <= n_genes:
        raise ConfigError("pathway sizes must satisfy 1 <= min <= max <= n_genes")
    for _ in range(200):
        sets = []
        for i in range(count):
            size = int(rng.integers(lo, hi + 1))
            members = tuple(sorted(int(g) for g in rng.choice(n_genes, size, replace=False)))
            sets.append(GeneSet(name=f"PW{i}", members=members))
        if count < 2:
            return sets
        overlapping = any(
            set(a.members) & set(b.members)
            for i, a in enumerate(sets)
            for b in sets[i + 1 :]
        )
        if overlapping:
            return sets
    return sets


def cmd_synth(cfg: dict, args) -> int:
    paths = _dataset_paths(cfg)
    paths["root"].mkdir(parents=True, exist_ok=True)
    paths["conditions"].mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    rng = np.random.default_rng(seed)
    task = synth_task(
        seed, cfg["n_genes"], cfg["cond_dim"], cfg["cluster_count"],
        cfg["sigma_task"], cfg["mixing_scale"],
    )
    vocab = GeneVocabulary([f"g{i:04d}" for i in range(cfg["n_genes"])])
    vocab.to_file(paths["vocab"])

    sets = _draw_pathways(rng, cfg)
    with open(paths["gmt"], "w", encoding="utf-8") as fh:
        for s in sets:
            symbols = "\t".join(vocab.genes[g] for g in s.members)
            fh.write(f"{s.name}\tsynthetic\t{symbols}\n")

    for split, count in (("train", cfg["n_train"]), ("test", cfg["n_test"])):
        ids, rows = [], []
        for i in range(count):
            sid = f"{split}_{i:04d}"
            y = task.sample_condition(rng)
            rows.append(task.sample_expression(y, rng))
            ids.append(sid)
            write_slide_representation(
                paths["conditions"] / f"{sid}.bin", SlideRepresentation(sid, y)
            )
        matrix = ExpressionMatrix(ids, vocab.genes, np.asarray(rows), space="log")
        write_expression_tsv(matrix, paths[split])

    save_json(task.to_dict(), paths["task"])
    save_json(
        {
            "command": "synth",
            "seed": seed,
            "config_sha256": config_sha256(cfg),
            "n_train": cfg["n_train"],
            "n_test": cfg["n_test"],
            "gene_fingerprint": vocab.fingerprint(),
        },
        paths["manifest"],
    )
    print(
        f"synth: wrote {cfg['n_train']}+{cfg['n_test']} samples over "
        f"{cfg['n_genes']} genes and {len(sets)} pathways to {paths['root']}"
    )
    return 0


def _load_collection(cfg: dict) -> tuple[GeneVocabulary, PathwayCollection]:
    paths = _dataset_paths(cfg)
    for field in ("vocab", "gmt"):
        if not paths[field].is_file():
            raise ConfigError(
                f"missing {field} file {paths[field]} (derived from config field 'data_dir')"
            )
    vocab = GeneVocabulary.from_file(paths["vocab"])
    raw, _ = load_gmt(paths["gmt"], vocab)
    raw = [s for s in raw if len(s) > 0]
    if not raw:
        raise ConfigError("no pathway resolved to any vocabulary gene")
    if cfg["filter_min_size"] is not None or cfg["filter_max_size"] is not None:
        lo = cfg["filter_min_size"] or 1
        hi = cfg["filter_max_size"] or vocab.size
        collection = filter_pathways(raw, lo, hi, vocab)
    else:
        collection = PathwayCollection(vocab, raw)
    return vocab, collection


def _load_expression(path: Path, cfg: dict, vocab: GeneVocabulary) -> ExpressionMatrix:
    if not path.is_file():
        raise ConfigError(f"missing expression file {path} (derived from config field 'data_dir')")
    matrix = read_expression_tsv(path, space=cfg["expression_space"])
    if matrix.space == "raw":
        matrix = log_transform(matrix)
    if tuple(matrix.genes) != vocab.genes:
        raise FingerprintMismatchError(
            f"{path}: expression gene columns disagree with the gene vocabulary file"
        )
    return matrix


def _load_conditions(cfg: dict, sample_ids) -> np.ndarray:
    cond_dir = _dataset_paths(cfg)["conditions"]
    missing = [sid for sid in sample_ids if not (cond_dir / f"{sid}.bin").is_file()]
    if missing:
        raise ConfigError(f"missing condition files for samples: {', '.join(missing[:10])}")
    stack = []
    for sid in sample_ids:
        rep = read_slide_representation(cond_dir / f"{sid}.bin")
        if rep.y.shape != (cfg["cluster_count"], cfg["cond_dim"]):
            raise ConfigError(
                f"{sid}: condition shape {rep.y.shape} does not match config "
                f"(cluster_count={cfg['cluster_count']}, cond_dim={cfg['cond_dim']})"
            )
        stack.append(rep.y)
    return np.stack(stack)


def _network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig(
        condition_dim=cfg["cond_dim"],
        depth=cfg["depth"],
        heads=cfg["heads"],
        hidden=cfg["hidden"],
        cluster_count=cfg["cluster_count"],
        dropout=cfg["dropout"],
        residual_scale_init=cfg["residual_scale_init"],
    )


def _flow_config(cfg: dict) -> FlowConfig:
    return FlowConfig(
        steps=cfg["steps"],
        cfg_scale=cfg["cfg_scale"],
        condition_dropout_prob=cfg["condition_dropout_prob"],
        ema_decay=cfg["ema_decay"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
    )


def cmd_train(cfg: dict, args) -> int:
    paths = _dataset_paths(cfg)
    run = _run_paths(cfg)
    run["root"].mkdir(parents=True, exist_ok=True)
    vocab, collection = _load_collection(cfg)
    train_matrix = _load_expression(paths["train"], cfg, vocab)
    standardizer = Standardizer.fit(train_matrix)
    standardized = standardizer.apply(train_matrix)
    conditions = _load_conditions(cfg, train_matrix.sample_ids)

    net_cfg = _network_config(cfg)
    flow_cfg = _flow_config(cfg)
    interp = make_interpolant(cfg["interpolant"], cfg["logistic_sharpness"])
    torch.manual_seed(cfg["seed"])
    model = VelocityNetwork(net_cfg, collection)

    resume_state = None
    if getattr(args, "resume", None):
        bundle = load_checkpoint(args.resume, collection)
        if bundle.resume is None:
            raise ConfigError(f"{args.resume}: checkpoint carries no resume state")
        resume_state = bundle.resume

    provenance = {"seed": cfg["seed"], "config_sha256": config_sha256(cfg)}
    try:
        result = train(
            standardized.values, conditions, model, interp, flow_cfg,
            seed=cfg["seed"], resume=resume_state,
        )
    except TrainingDivergedError as exc:
        state = exc.last_good
        model.load_state_dict(state.model_state)
        ema = Ema(model, flow_cfg.ema_decay)
        ema.load_state_dict(state.ema_state)
        save_checkpoint(
            run["checkpoint"], model, ema, net_cfg, flow_cfg,
            cfg["interpolant"], cfg["logistic_sharpness"],
            standardizer=standardizer, resume=state, extra=provenance,
        )
        save_json(
            {"history": state.history, "diverged": True, **provenance}, run["history"]
        )
        print(f"error: {exc}; last good checkpoint written to {run['checkpoint']}", file=sys.stderr)
        return 3

    save_checkpoint(
        run["checkpoint"], model, result.ema, net_cfg, flow_cfg,
        cfg["interpolant"], cfg["logistic_sharpness"],
        standardizer=standardizer, resume=result.state, extra=provenance,
    )
    save_json(
        {"history": result.history, "diverged": False, **provenance}, run["history"]
    )
    print(
        f"train: {len(result.history)} epochs, final loss {result.history[-1]:.6f}, "
        f"checkpoint at {run['checkpoint']}"
    )
    return 0


def _sample_ids(cfg: dict, vocab: GeneVocabulary) -> list[str]:
    paths = _dataset_paths(cfg)
    if paths["test"].is_file():
        return list(_load_expression(paths["test"], cfg, vocab).sample_ids)
    cond_dir = paths["conditions"]
    if not cond_dir.is_dir():
        raise ConfigError(f"no test expression file and no conditions directory under {paths['root']}")
    return sorted(p.stem for p in cond_dir.glob("*.bin"))


def cmd_sample(cfg: dict, args) -> int:
    run = _run_paths(cfg)
    vocab, collection = _load_collection(cfg)
    if not run["checkpoint"].is_file():
        raise ConfigError(f"missing checkpoint {run['checkpoint']} (derived from config field 'run_dir')")
    bundle = load_checkpoint(run["checkpoint"], collection)
    if bundle.standardizer is None:
        raise ConfigError("checkpoint carries no standardizer; cannot de-standardize samples")
    flow_cfg = _flow_config(cfg)
    ids = _sample_ids(cfg, vocab)
    conditions = _load_conditions(cfg, ids)
    ema_model = bundle.ema_model()
    run["ensembles"].mkdir(parents=True, exist_ok=True)
    sha = config_sha256(cfg)
    for sid, y in zip(ids, conditions):
        member_seed = _condition_seed(cfg["seed"], sid)
        gen = torch.Generator()
        gen.manual_seed(member_seed)
        sample_set = generate_ensemble(
            y, cfg["ensemble_n"], ema_model, flow_cfg, gen,
            standardizer=bundle.standardizer, condition_id=sid,
        )
        write_ensemble(
            run["ensembles"] / sid,
            sample_set,
            vocab.genes,
            {
                "condition_id": sid,
                "N": cfg["ensemble_n"],
                "seed": member_seed,
                "base_seed": cfg["seed"],
                "cfg_scale": flow_cfg.cfg_scale,
                "steps": flow_cfg.steps,
                "model_fingerprint": bundle.fingerprint,
                "config_sha256": sha,
            },
        )
    print(f"sample: wrote {len(ids)} ensembles of {cfg['ensemble_n']} to {run['ensembles']}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    paths = _dataset_paths(cfg)
    run = _run_paths(cfg)
    vocab, _ = _load_collection(cfg)
    truth = _load_expression(paths["test"], cfg, vocab)
    missing = [
        sid
        for sid in truth.sample_ids
        if not (run["ensembles"] / f"{sid}.tsv").is_file()
        or not (run["ensembles"] / f"{sid}.json").is_file()
    ]
    if missing:
        raise ConfigError(f"missing ensembles for samples: {', '.join(missing[:10])}")

    sets, sidecars = [], []
    for sid in truth.sample_ids:
        sample_set, provenance, genes = read_ensemble(run["ensembles"] / sid)
        if tuple(genes) != vocab.genes:
            raise ConfigError(f"{sid}: ensemble gene columns disagree with the vocabulary")
        sets.append(sample_set)
        sidecars.append(provenance)
    for key in ("model_fingerprint", "N", "cfg_scale", "steps", "base_seed"):
        values = {json.dumps(s.get(key)) for s in sidecars}
        if len(values) != 1:
            raise ConfigError(f"ensembles disagree on provenance field {key!r}")

    preds = np.stack([point_prediction(s.samples, cfg["point_mode"]) for s in sets])
    report = compute_metrics_report(preds, truth.values, vocab.genes, top_k_sizes=cfg["top_k"])
    stacked = np.stack([s.samples for s in sets])
    uncertainty = UncertaintyReport(
        coverage=interval_coverage(stacked, truth.values),
        nll=gaussian_nll(stacked, truth.values),
        spearman_var_err=variance_error_spearman(stacked, truth.values),
    )
    provenance = {
        "model_fingerprint": sidecars[0]["model_fingerprint"],
        "seed": sidecars[0].get("base_seed"),
        "N": sidecars[0]["N"],
        "cfg_scale": sidecars[0]["cfg_scale"],
        "steps": sidecars[0]["steps"],
        "config_sha256": config_sha256(cfg),
    }
    run["root"].mkdir(parents=True, exist_ok=True)
    save_json({**report.to_json(), "provenance": provenance}, run["metrics"])
    save_json({**uncertainty.to_json(), "provenance": provenance}, run["uncertainty"])
    if cfg["per_gene_dump"]:
        with open(run["per_gene"], "w", encoding="utf-8") as fh:
            fh.write("gene\tpcc\trmse\n")
            for gene, p, r in zip(vocab.genes, report.pcc_per_gene, report.rmse_per_gene):
                fh.write(f"{gene}\t{_format_float(p)}\t{_format_float(r)}\n")

    defined = [v for v in report.pcc_per_gene if not np.isnan(v)]
    mean_pcc = float(np.mean(defined)) if defined else float("nan")
    cov = uncertainty.coverage
    print(
        f"eval: mean PCC {mean_pcc:.4f} over {len(defined)} genes, "
        f"coverage {cov.get(0.5, float('nan')):.3f}/{cov.get(0.8, float('nan')):.3f}/"
        f"{cov.get(0.9, float('nan')):.3f}, NLL {uncertainty.nll:.4f}"
    )
    return 0


def _overrides(args) -> dict:
    overrides = {}
    for field in OVERRIDE_FIELDS:
        overrides[field] = getattr(args, field, None)
    if overrides.get("top_k") is not None:
        try:
            overrides["top_k"] = [int(v) for v in str(overrides["top_k"]).split(",") if v]
        except ValueError as exc:
            raise ConfigError(f"--top-k expects comma-separated integers: {exc}") from exc
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathflow",
        description="Pathway-token flow matching for conditional expression generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = (
        ("synth", cmd_synth, "generate a synthetic dataset with known conditional moments"),
        ("train", cmd_train, "train the velocity network on an expression dataset"),
        ("sample", cmd_sample, "generate ensembles for every test condition"),
        ("eval", cmd_eval, "score point predictions and ensemble calibration"),
    )
    for name, fn, help_text in commands:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file; flags override its fields")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--interpolant", choices=("linear", "logistic"), default=None)
        p.add_argument("--lr", dest="learning_rate", type=float, default=None)
        p.add_argument("--ensemble-n", dest="ensemble_n", type=int, default=None)
        p.add_argument("--top-k", dest="top_k", default=None,
                       help="comma-separated top-K sizes for eval aggregates")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to continue training from")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, _overrides(args))
        return args.func(cfg, args)
    except FingerprintMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (TrainingDivergedError, SamplingNumericsError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, GmtParseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
