"""Reference pretraining, preference fine-tuning, Adam and checkpoint I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import objectives as obj
from .data import PreferencePairSet, ToyDataset
from .diffusion import NoiseSchedule, forward_diffuse
from .network import (CheckpointCorruptError, CheckpointShapeError, FrozenParamsError, NetConfig,
                      NetworkParams, init_network, params_from_dict, params_to_dict)

log = logging.getLogger(__name__)

METHODS = ("pretrain", "ddpo", "dspo", "dspo_cpp", "ddspo_practical", "ddspo_efficient")
USES_POLICY_TARGETS = ("dspo_cpp",)


class NumericalError(FloatingPointError):
    """A training loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    method: str = "pretrain"
    steps: int = 4000
    batch_size: int = 256
    learning_rate: float = 1e-3
    loss: obj.LossConfig = field(default_factory=obj.LossConfig)
    seed: int = 0
    warmup_steps: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # lr = 0 is accepted so a run can be checked against its starting point
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def to_dict(self) -> dict:
        return {"method": self.method, "steps": self.steps, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "loss": self.loss.to_dict(), "seed": self.seed,
                "warmup_steps": self.warmup_steps, "grad_clip": self.grad_clip}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = obj.LossConfig.from_dict(d.get("loss", {}))
        return cls(**d)


def pretrain_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(method="pretrain", steps=4000, batch_size=256, learning_rate=1e-3), **overrides)


def finetune_config(method: str, beta: float = 400.0, **overrides) -> TrainConfig:
    base = TrainConfig(method=method, steps=600, batch_size=64, learning_rate=7e-4,
                       loss=obj.LossConfig(beta=beta), warmup_steps=50)
    return replace(base, **overrides)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})


def adam_update(params: NetworkParams, grads: dict, state: OptimizerState, learning_rate: float,
                hyper: tuple[float, float, float] = (0.9, 0.999, 1e-8)):
    """Bias-corrected Adam step, applied in place; returns ``(params, state)``."""
    if params.frozen:
        raise FrozenParamsError("refusing to update frozen parameters")
    if set(grads) != set(params.tensors) or set(state.m) != set(params.tensors):
        raise ValueError("gradient / optimizer state keys do not match parameters")
    b1, b2, eps_hat = hyper
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps_hat)
    return params, state


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    params: NetworkParams
    schedule: NoiseSchedule
    train_config: TrainConfig
    loss_summary: dict
    loss_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def net_config(self) -> NetConfig:
        return self.params.config

    def to_dict(self) -> dict:
        doc = params_to_dict(self.params)
        doc["schedule"] = self.schedule.to_dict()
        doc["train_config"] = self.train_config.to_dict()
        doc["loss_summary"] = self.loss_summary
        return doc


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(ckpt.to_dict()))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: not valid JSON ({exc})") from exc
    params = params_from_dict(doc)
    try:
        schedule = NoiseSchedule.from_dict(doc["schedule"])
        train_config = TrainConfig.from_dict(doc["train_config"])
        summary = dict(doc["loss_summary"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: malformed checkpoint metadata ({exc})") from exc
    if schedule.num_steps != params.config.num_steps:
        raise CheckpointShapeError("schedule length does not match the network's num_steps")
    return Checkpoint(params, schedule, train_config, summary)


def summarize_trace(trace) -> dict:
    trace = np.asarray(trace, dtype=np.float64)
    k = max(1, len(trace) // 10)
    return {"steps": int(len(trace)), "first": float(trace[0]), "final": float(trace[-1]),
            "first_10pct_mean": float(trace[:k].mean()), "last_10pct_mean": float(trace[-k:].mean())}


# -- training loops ------------------------------------------------------------

def pretrain_reference(data: ToyDataset, net_cfg: NetConfig, schedule: NoiseSchedule,
                       train_cfg: TrainConfig, rng_seed: int | None = None) -> Checkpoint:
    """Fit the noise-prediction MSE on ``data`` from a fresh initialization."""
    if train_cfg.method != "pretrain":
        raise ValueError("pretrain_reference requires method='pretrain'")
    if len(data) == 0:
        raise ValueError("empty dataset")
    if net_cfg.num_steps != schedule.num_steps:
        raise ValueError("network num_steps must match the schedule")
    seed = train_cfg.seed if rng_seed is None else rng_seed
    init_seq, loop_seq = np.random.SeedSequence(seed).spawn(2)
    params = init_network(net_cfg, int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(loop_seq)
    state = OptimizerState.zeros_like(params)
    trace = []
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(data), size=train_cfg.batch_size)
        t = rng.integers(1, schedule.num_steps + 1, size=train_cfg.batch_size)
        eps = rng.standard_normal((train_cfg.batch_size, 2))
        loss, grads = obj.pretrain_mse_loss(params, schedule, data.x0[idx], data.c[idx], eps, t, grad=True)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite pretraining loss at step {step}")
        trace.append(loss)
        adam_update(params, _clip(grads, train_cfg.grad_clip), state, _lr_at(train_cfg, step))
    return Checkpoint(params, schedule, train_cfg, summarize_trace(trace), trace)


def make_microbatch(schedule, ref_params, pairs: PreferencePairSet, idx, method, rng) -> obj.PreferenceMicrobatch:
    """Noise a minibatch of pairs at per-pair timesteps and attach the method's targets."""
    n = len(idx)
    t = rng.integers(1, schedule.num_steps + 1, size=n)
    eps_w = rng.standard_normal((n, 2))
    eps_l = rng.standard_normal((n, 2))
    x_t_w = forward_diffuse(schedule, pairs.x0_w[idx], t, eps_w)
    x_t_l = forward_diffuse(schedule, pairs.x0_l[idx], t, eps_l)
    batch = obj.PreferenceMicrobatch(t, pairs.c[idx], pairs.c_neg[idx], x_t_w, x_t_l, eps_w, eps_l)
    if method in USES_POLICY_TARGETS:
        batch = batch.with_targets(*obj.make_reference_score_targets(
            ref_params, schedule, x_t_w, x_t_l, t, batch.c, batch.c_neg))
    return batch


def finetune(method: str, ref_ckpt: Checkpoint, pairs: PreferencePairSet, train_cfg: TrainConfig,
             rng_seed: int | None = None) -> Checkpoint:
    """Preference fine-tuning of a copy of the reference against the frozen original."""
    if method == "pretrain" or method not in METHODS:
        raise ValueError(f"not a fine-tuning method: {method!r}")
    if method == "ddspo_efficient" and pairs.mode != "unpaired":
        raise ValueError("ddspo_efficient requires an unpaired preference set")
    if method != "ddspo_efficient" and pairs.mode != "paired":
        raise ValueError(f"{method} requires a paired preference set")
    if len(pairs) == 0:
        raise ValueError("empty preference set")
    train_cfg = replace(train_cfg, method=method)
    schedule = ref_ckpt.schedule
    ref = ref_ckpt.params.freeze()
    student = ref_ckpt.params.copy()
    loss_fn = obj.PREFERENCE_LOSSES[method]
    seed = train_cfg.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    state = OptimizerState.zeros_like(student)
    bs = min(train_cfg.batch_size, len(pairs))
    trace = []
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(pairs), size=bs)
        batch = make_microbatch(schedule, ref, pairs, idx, method, rng)
        loss, grads = loss_fn(student, ref, train_cfg.loss, batch, grad=True)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(f"{method}: non-finite loss or gradient at step {step}")
        trace.append(loss)
        adam_update(student, _clip(grads, train_cfg.grad_clip), state, _lr_at(train_cfg, step))
    log.debug("%s finetune: first loss %.6f final %.6f", method, trace[0], trace[-1])
    return Checkpoint(student, schedule, train_cfg, summarize_trace(trace), trace)
