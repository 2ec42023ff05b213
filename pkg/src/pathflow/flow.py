"""Flow-matching training and guided ODE sampling.

The generative path interpolates x_t = alpha(t) * x1 + sigma(t) * x0
between a standard Gaussian draw x0 at t=0 and a data vector x1 at t=1;
the network is regressed onto the path derivative
v* = alpha_dot(t) * x1 + sigma_dot(t) * x0. Sampling integrates the
learned field with a fixed-step Euler scheme from t=0 to t=1, combining
conditional and unconditional evaluations with a guidance scale.

All stochastic draws in one training run (batch order, per-item t and x0,
condition dropout, attention dropout) come from one seeded generator, so
runs and resumed runs are reproducible bit for bit. Evaluation always
uses the exponential moving average of the weights.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .data import Standardizer, _format_float
from .network import NetworkConfig, VelocityNetwork
from .pathways import PathwayCollection


class NonFiniteLossError(FloatingPointError):
    """Training loss left the reals; carries the first offending item."""

    def __init__(self, item_index: int):
        super().__init__(f"non-finite training loss at batch item {item_index}")
        self.item_index = item_index


class TrainingDivergedError(FloatingPointError):
    """Raised on NaN/Inf during training; holds the last good train state."""

    def __init__(self, message: str, last_good: "TrainState"):
        super().__init__(message)
        self.last_good = last_good


class SamplingNumericsError(FloatingPointError):
    """Euler state became non-finite; reports the failing step."""

    def __init__(self, step: int):
        super().__init__(f"non-finite sampler state after Euler step {step}")
        self.step = step


class FingerprintMismatchError(ValueError):
    """Checkpoint and pathway collection disagree on the model's inputs."""


def _float_tensor(t) -> torch.Tensor:
    t = torch.as_tensor(t)
    return t if t.dtype.is_floating_point else t.to(torch.get_default_dtype())


class LinearInterpolant:
    """alpha(t) = t, sigma(t) = 1 - t."""

    kind = "linear"

    def alpha(self, t):
        return _float_tensor(t)

    def sigma(self, t):
        return 1.0 - _float_tensor(t)

    def alpha_dot(self, t):
        return torch.ones_like(_float_tensor(t))

    def sigma_dot(self, t):
        return -torch.ones_like(_float_tensor(t))


class LogisticInterpolant:
    """Sigmoid-shaped schedule, renormalized to hit the boundary values.

    alpha(t) = (L(a*(t - 1/2)) - L(-a/2)) / (L(a/2) - L(-a/2)) with L the
    logistic function and a the sharpness; sigma = 1 - alpha. The shifted
    endpoints evaluate through the identical expressions, so alpha(0) = 0
    and alpha(1) = 1 hold bitwise.
    """

    kind = "logistic"

    def __init__(self, sharpness: float = 10.0):
        if sharpness <= 0:
            raise ValueError(f"sharpness must be positive, got {sharpness}")
        self.sharpness = float(sharpness)

    def _bounds(self, t: torch.Tensor):
        a = torch.as_tensor(self.sharpness, dtype=t.dtype)
        lo = torch.sigmoid(a * -0.5)
        hi = torch.sigmoid(a * 0.5)
        return a, lo, hi

    def alpha(self, t):
        t = _float_tensor(t)
        a, lo, hi = self._bounds(t)
        return (torch.sigmoid(a * (t - 0.5)) - lo) / (hi - lo)

    def sigma(self, t):
        return 1.0 - self.alpha(t)

    def alpha_dot(self, t):
        t = _float_tensor(t)
        a, lo, hi = self._bounds(t)
        s = torch.sigmoid(a * (t - 0.5))
        return a * s * (1.0 - s) / (hi - lo)

    def sigma_dot(self, t):
        return -self.alpha_dot(t)


def make_interpolant(kind: str, logistic_sharpness: float = 10.0):
    if kind == "linear":
        return LinearInterpolant()
    if kind == "logistic":
        return LogisticInterpolant(logistic_sharpness)
    raise ValueError(f"unknown interpolant kind {kind!r}")


def _check_time(t) -> None:
    t = torch.as_tensor(t)
    if ((t < 0.0) | (t > 1.0)).any():
        raise ValueError("interpolation time must lie in [0, 1]")


def _per_item(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    while coef.ndim < like.ndim:
        coef = coef.unsqueeze(-1)
    return coef


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t, interp) -> torch.Tensor:
    """x_t = alpha(t) * x1 + sigma(t) * x0."""
    _check_time(t)
    return _per_item(interp.alpha(t), x1) * x1 + _per_item(interp.sigma(t), x0) * x0


def target_velocity(x0: torch.Tensor, x1: torch.Tensor, t, interp) -> torch.Tensor:
    """v* = alpha_dot(t) * x1 + sigma_dot(t) * x0, the path derivative."""
    _check_time(t)
    return _per_item(interp.alpha_dot(t), x1) * x1 + _per_item(interp.sigma_dot(t), x0) * x0


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided velocity v_uncond + scale * (v_cond - v_uncond).

    scale=1 returns the conditional field itself so the identity holds
    bitwise, not merely up to rounding of the affine form.
    """
    if v_cond.shape != v_uncond.shape:
        raise ValueError("conditional and unconditional velocities must share a shape")
    if scale == 1.0:
        return v_cond
    return v_uncond + scale * (v_cond - v_uncond)


@dataclass(frozen=True)
class FlowConfig:
    """Training and sampling hyperparameters."""

    steps: int = 20
    cfg_scale: float = 2.0
    condition_dropout_prob: float = 0.1
    ema_decay: float = 0.999
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 2000

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not 0.0 <= self.condition_dropout_prob < 1.0:
            raise ValueError("condition_dropout_prob must be in [0, 1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size, max_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "FlowConfig":
        return cls(**payload)


def fm_loss(x1: torch.Tensor, y: torch.Tensor, model: nn.Module, interp,
            rng: torch.Generator, config: FlowConfig) -> torch.Tensor:
    """Flow-matching objective, mean over batch items and genes.

    Per item: t ~ U[0,1], x0 ~ N(0, I), and the condition is dropped with
    probability condition_dropout_prob (the unconditional branch used by
    guidance at sampling time). Draw order is fixed: t, x0, dropout flags,
    then any attention-dropout masks inside the model.
    """
    batch = x1.shape[0]
    t = torch.rand(batch, generator=rng, dtype=x1.dtype, device=x1.device)
    x0 = torch.randn(x1.shape, generator=rng, dtype=x1.dtype, device=x1.device)
    drop = (
        torch.rand(batch, generator=rng, device=x1.device)
        < config.condition_dropout_prob
    )
    x_t = interpolate(x0, x1, t, interp)
    v_star = target_velocity(x0, x1, t, interp)
    v = model(x_t, t, y, rng=rng, cond_drop_mask=drop)
    per_item = torch.mean((v - v_star) ** 2, dim=1)
    finite = torch.isfinite(per_item)
    if not finite.all():
        raise NonFiniteLossError(int(torch.nonzero(~finite)[0]))
    return per_item.mean()


class Ema:
    """Exponential moving average of model parameters.

    shadow <- decay * shadow + (1 - decay) * param after every optimizer
    step; buffers are not averaged (they are constants here) and are taken
    from the live model when materializing an evaluation copy.
    """

    def __init__(self, model: nn.Module, decay: float):
        self.decay = float(decay)
        self.shadow = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for name, p in model.named_parameters():
            self.shadow[name].mul_(self.decay).add_(p, alpha=1.0 - self.decay)

    def state_dict(self) -> dict:
        return {"decay": self.decay, "shadow": {k: v.clone() for k, v in self.shadow.items()}}

    def load_state_dict(self, payload: dict) -> None:
        self.decay = float(payload["decay"])
        self.shadow = {k: v.clone() for k, v in payload["shadow"].items()}

    def module_copy(self, model: nn.Module) -> nn.Module:
        """Deep copy of the model carrying the averaged parameters."""
        twin = copy.deepcopy(model)
        with torch.no_grad():
            for name, p in twin.named_parameters():
                p.copy_(self.shadow[name])
        twin.eval()
        return twin


@dataclass
class TrainState:
    """Everything needed to resume training with an identical trajectory."""

    epoch: int
    history: list
    model_state: dict
    ema_state: dict
    optimizer_state: dict
    generator_state: torch.Tensor

    def to_payload(self) -> dict:
        return {
            "epoch": self.epoch,
            "history": list(self.history),
            "model_state": self.model_state,
            "ema_state": self.ema_state,
            "optimizer_state": self.optimizer_state,
            "generator_state": self.generator_state,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "TrainState":
        return cls(
            epoch=int(payload["epoch"]),
            history=list(payload["history"]),
            model_state=payload["model_state"],
            ema_state=payload["ema_state"],
            optimizer_state=payload["optimizer_state"],
            generator_state=payload["generator_state"],
        )


@dataclass
class TrainResult:
    model: nn.Module
    ema: Ema
    history: list
    state: TrainState


def _snapshot(epoch: int, history, model, ema, optimizer, rng) -> TrainState:
    return TrainState(
        epoch=epoch,
        history=list(history),
        model_state=copy.deepcopy(model.state_dict()),
        ema_state=copy.deepcopy(ema.state_dict()),
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        generator_state=rng.get_state().clone(),
    )


def train(x1, y, model: VelocityNetwork, interp, config: FlowConfig, seed: int = 0,
          epochs: int | None = None, resume: TrainState | None = None) -> TrainResult:
    """Minibatch AdamW on the flow-matching loss with a per-step EMA.

    x1 is (N, G) standardized expression, y is (N, k, d) conditions. A NaN
    or Inf anywhere aborts with the state captured at the last completed
    epoch. Passing the returned state back as ``resume`` continues the
    identical trajectory.
    """
    x1 = torch.as_tensor(np.asarray(x1), dtype=torch.get_default_dtype())
    y = torch.as_tensor(np.asarray(y), dtype=torch.get_default_dtype())
    if x1.shape[0] != y.shape[0]:
        raise ValueError("x1 and y disagree on the number of samples")
    n = x1.shape[0]
    epochs = config.max_epochs if epochs is None else epochs

    rng = torch.Generator()
    rng.manual_seed(seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    ema = Ema(model, config.ema_decay)
    history: list[float] = []
    start_epoch = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        ema.load_state_dict(resume.ema_state)
        optimizer.load_state_dict(resume.optimizer_state)
        rng.set_state(resume.generator_state)
        history = list(resume.history)
        start_epoch = resume.epoch

    last_good = _snapshot(start_epoch, history, model, ema, optimizer, rng)
    model.train()
    for epoch in range(start_epoch, epochs):
        perm = torch.randperm(n, generator=rng)
        batch_losses = []
        try:
            for lo in range(0, n, config.batch_size):
                idx = perm[lo : lo + config.batch_size]
                optimizer.zero_grad()
                loss = fm_loss(x1[idx], y[idx], model, interp, rng, config)
                loss.backward()
                optimizer.step()
                ema.update(model)
                batch_losses.append(float(loss.detach()))
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                f"training diverged in epoch {epoch}: {exc}", last_good
            ) from exc
        epoch_mean = float(np.mean(batch_losses))
        if not math.isfinite(epoch_mean):
            raise TrainingDivergedError(
                f"non-finite epoch-mean loss in epoch {epoch}", last_good
            )
        history.append(epoch_mean)
        last_good = _snapshot(epoch + 1, history, model, ema, optimizer, rng)
    model.eval()
    return TrainResult(model=model, ema=ema, history=history, state=last_good)


@dataclass
class SampleSet:
    """Generated expression ensemble for one condition, in log space."""

    condition_id: str
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError("samples must be a non-empty (N, G) matrix")
        if not np.isfinite(samples).all():
            raise ValueError("ensemble contains non-finite values")
        self.samples = samples

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def variance(self) -> np.ndarray:
        """Population variance per gene; zero for a single-member ensemble."""
        return self.samples.var(axis=0)


def _integrate(model: nn.Module, y, x: torch.Tensor, config: FlowConfig) -> torch.Tensor:
    """Euler steps of the guided field from t=0 to t=1 on a batch of states."""
    dt = 1.0 / config.steps
    scale = config.cfg_scale
    with torch.no_grad():
        for step in range(config.steps):
            t = step / config.steps
            v_cond = model(x, t, y)
            if scale == 1.0:
                v = v_cond
            else:
                v = cfg_velocity(v_cond, model(x, t, None), scale)
            x = x + dt * v
            if not torch.isfinite(x).all():
                raise SamplingNumericsError(step)
    return x


def generate_ensemble(y, n: int, model: nn.Module, config: FlowConfig,
                      rng: torch.Generator, standardizer: Standardizer | None = None,
                      condition_id: str = "") -> SampleSet:
    """N guided Euler samples from independent Gaussian starts.

    Integration runs in the flow's standardized space; the returned set is
    de-standardized to log space when a standardizer is supplied.
    """
    if n < 1:
        raise ValueError(f"ensemble size must be >= 1, got {n}")
    model.eval()
    n_genes = getattr(model, "n_genes")
    dtype = torch.get_default_dtype()
    x0 = torch.randn(n, n_genes, generator=rng, dtype=dtype)
    if y is not None:
        y = torch.as_tensor(np.asarray(y), dtype=dtype)
    x = _integrate(model, y, x0, config)
    values = x.detach().cpu().numpy().astype(np.float64)
    if standardizer is not None:
        values = standardizer.invert_array(values)
    return SampleSet(condition_id=condition_id, samples=values)


def euler_sample(y, model: nn.Module, config: FlowConfig, rng: torch.Generator,
                 standardizer: Standardizer | None = None) -> np.ndarray:
    """Single guided sample; the one-member case of generate_ensemble."""
    return generate_ensemble(y, 1, model, config, rng, standardizer).samples[0]


ENSEMBLE_PROVENANCE_KEYS = ("condition_id", "N", "seed", "cfg_scale", "steps", "model_fingerprint")


def write_ensemble(path_base, sample_set: SampleSet, genes, provenance: dict) -> None:
    """TSV of members (columns = genes) plus a JSON provenance sidecar."""
    genes = list(genes)
    if len(genes) != sample_set.samples.shape[1]:
        raise ValueError("gene list does not match ensemble width")
    missing = [k for k in ENSEMBLE_PROVENANCE_KEYS if k not in provenance]
    if missing:
        raise ValueError(f"provenance lacks required keys: {missing}")
    with open(f"{path_base}.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(genes) + "\n")
        for row in sample_set.samples:
            fh.write("\t".join(_format_float(v) for v in row) + "\n")
    with open(f"{path_base}.json", "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_ensemble(path_base) -> tuple[SampleSet, dict, list]:
    with open(f"{path_base}.json", "r", encoding="utf-8") as fh:
        provenance = json.load(fh)
    with open(f"{path_base}.tsv", "r", encoding="utf-8") as fh:
        genes = fh.readline().rstrip("\n").split("\t")
        rows = [
            [float(v) for v in line.rstrip("\n").split("\t")]
            for line in fh
            if line.strip()
        ]
    samples = np.asarray(rows, dtype=np.float64)
    return (
        SampleSet(condition_id=str(provenance["condition_id"]), samples=samples),
        provenance,
        genes,
    )


def save_checkpoint(path, model: VelocityNetwork, ema: Ema, net_config: NetworkConfig,
                    flow_config: FlowConfig, interpolant_kind: str,
                    logistic_sharpness: float = 10.0,
                    standardizer: Standardizer | None = None,
                    resume: TrainState | None = None, extra: dict | None = None) -> None:
    """Single-file container with weights, EMA, configs, and the pathway fingerprint."""
    payload = {
        "network_config": net_config.to_dict(),
        "flow_config": flow_config.to_dict(),
        "interpolant_kind": interpolant_kind,
        "logistic_sharpness": float(logistic_sharpness),
        "model_state": model.state_dict(),
        "ema_state": ema.state_dict(),
        "collection_fingerprint": model.collection_fingerprint,
        "standardizer": None if standardizer is None else standardizer.to_dict(),
        "resume": None if resume is None else resume.to_payload(),
        "extra": extra or {},
    }
    torch.save(payload, path)


@dataclass
class CheckpointBundle:
    model: VelocityNetwork
    ema: Ema
    net_config: NetworkConfig
    flow_config: FlowConfig
    interpolant_kind: str
    logistic_sharpness: float
    standardizer: Standardizer | None
    resume: TrainState | None
    fingerprint: str
    extra: dict = field(default_factory=dict)

    def ema_model(self) -> nn.Module:
        return self.ema.module_copy(self.model)


def load_checkpoint(path, collection: PathwayCollection) -> CheckpointBundle:
    """Load a checkpoint, refusing a pathway collection with another fingerprint."""
    payload = torch.load(path, weights_only=True)
    fingerprint = payload["collection_fingerprint"]
    if fingerprint != collection.fingerprint():
        raise FingerprintMismatchError(
            "checkpoint was trained against a different gene vocabulary or pathway set"
        )
    net_config = NetworkConfig.from_dict(payload["network_config"])
    flow_config = FlowConfig.from_dict(payload["flow_config"])
    model = VelocityNetwork(net_config, collection)
    model.load_state_dict(payload["model_state"])
    model.eval()
    ema = Ema(model, flow_config.ema_decay)
    ema.load_state_dict(payload["ema_state"])
    standardizer = (
        None
        if payload["standardizer"] is None
        else Standardizer.from_dict(payload["standardizer"])
    )
    resume = (
        None if payload["resume"] is None else TrainState.from_payload(payload["resume"])
    )
    return CheckpointBundle(
        model=model,
        ema=ema,
        net_config=net_config,
        flow_config=flow_config,
        interpolant_kind=payload.get("interpolant_kind", "linear"),
        logistic_sharpness=payload.get("logistic_sharpness", 10.0),
        standardizer=standardizer,
        resume=resume,
        fingerprint=fingerprint,
        extra=payload.get("extra", {}),
    )
