"""Preference objectives over student and reference noise predictions.

Each loss comes in two layers:

* a kernel operating on ``(B, 2)`` prediction arrays that returns the
  batch-mean loss together with its derivative with respect to each student
  prediction;
* a wrapper taking network parameters and a :class:`PreferenceMicrobatch`
  that runs the forward passes, calls the kernel and, with ``grad=True``,
  backpropagates into the student.

The reference network is only ever evaluated; no gradient is formed for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, forward_diffuse
from .network import NetworkParams, backprop, forward, predict_eps

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class LossConfig:
    beta: float = 400.0
    dspo_gate_stop_gradient: bool = True
    per_term_weighting: str = "constant"
    dspo_weight_A: str = "one"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.per_term_weighting != "constant":
            raise ValueError("only constant per-term weighting is supported")
        if self.dspo_weight_A != "one":
            raise ValueError("only A(t) = 1 is supported")

    def to_dict(self) -> dict:
        return {"beta": self.beta, "dspo_gate_stop_gradient": self.dspo_gate_stop_gradient}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(beta=float(d.get("beta", 400.0)),
                   dspo_gate_stop_gradient=bool(d.get("dspo_gate_stop_gradient", True)))


@dataclass
class PreferenceMicrobatch:
    t: np.ndarray
    c: np.ndarray
    c_neg: np.ndarray
    x_t_w: np.ndarray
    x_t_l: np.ndarray
    eps_fwd_w: np.ndarray
    eps_fwd_l: np.ndarray
    eps_star_w: np.ndarray | None = None
    eps_star_l: np.ndarray | None = None

    def __post_init__(self):
        for name in ("t", "c", "c_neg"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.int64)))
        for name in ("x_t_w", "x_t_l", "eps_fwd_w", "eps_fwd_l", "eps_star_w", "eps_star_l"):
            v = getattr(self, name)
            if v is not None:
                v = np.atleast_2d(np.asarray(v, dtype=np.float64))
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"{name} contains non-finite values")
                setattr(self, name, v)
        if len(self) == 0:
            raise ValueError("empty microbatch")

    def __len__(self) -> int:
        return len(self.t)

    def with_targets(self, eps_star_w, eps_star_l) -> "PreferenceMicrobatch":
        return PreferenceMicrobatch(self.t, self.c, self.c_neg, self.x_t_w, self.x_t_l,
                                    self.eps_fwd_w, self.eps_fwd_l, eps_star_w, eps_star_l)

    def subset(self, idx) -> "PreferenceMicrobatch":
        pick = lambda v: None if v is None else v[idx]
        return PreferenceMicrobatch(self.t[idx], self.c[idx], self.c_neg[idx], self.x_t_w[idx],
                                    self.x_t_l[idx], self.eps_fwd_w[idx], self.eps_fwd_l[idx],
                                    pick(self.eps_star_w), pick(self.eps_star_l))


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def neg_log_sigmoid(z):
    return softplus(-z)


def _sqnorm(v):
    return np.sum(v * v, axis=-1)


# -- kernels ---------------------------------------------------------------

def preference_kernel(pred_w, pred_l, ref_w, ref_l, tgt_w, tgt_l, beta):
    """Batch mean of -log sigmoid(-beta * bracket) and its student derivatives.

    bracket = (|tgt_w - pred_w|^2 - |tgt_w - ref_w|^2)
            - (|tgt_l - pred_l|^2 - |tgt_l - ref_l|^2)

    Diffusion-DPO (forward-noise targets) and DDSPO (policy targets) share
    this kernel; identical targets give bitwise identical results.
    """
    pred_w, pred_l, ref_w, ref_l, tgt_w, tgt_l = (
        np.atleast_2d(np.asarray(a, dtype=np.float64))
        for a in (pred_w, pred_l, ref_w, ref_l, tgt_w, tgt_l))
    res_w = tgt_w - pred_w
    res_l = tgt_l - pred_l
    bracket = (_sqnorm(res_w) - _sqnorm(tgt_w - ref_w)) - (_sqnorm(res_l) - _sqnorm(tgt_l - ref_l))
    z = -beta * bracket
    n = len(z)
    loss = float(np.mean(neg_log_sigmoid(z)))
    # d/dz softplus(-z) = -sigmoid(-z); dz/dbracket = -beta
    dbracket = (beta * sigmoid(-z) / n)[:, None]
    d_pred_w = dbracket * (-2.0 * res_w)
    d_pred_l = dbracket * (2.0 * res_l)
    return loss, d_pred_w, d_pred_l


def practical_ddspo_kernel(pred_w, pred_l, ref_w_c, ref_l_c, ref_l_neg, beta):
    """Practical DDSPO with the vanishing winner reference term dropped.

    bracket = |ref_w_c - pred_w|^2 - (|ref_l_neg - pred_l|^2 - |ref_l_neg - ref_l_c|^2)
    """
    pred_w, pred_l, ref_w_c, ref_l_c, ref_l_neg = (
        np.atleast_2d(np.asarray(a, dtype=np.float64))
        for a in (pred_w, pred_l, ref_w_c, ref_l_c, ref_l_neg))
    res_w = ref_w_c - pred_w
    res_l = ref_l_neg - pred_l
    bracket = _sqnorm(res_w) - (_sqnorm(res_l) - _sqnorm(ref_l_neg - ref_l_c))
    z = -beta * bracket
    n = len(z)
    loss = float(np.mean(neg_log_sigmoid(z)))
    dbracket = (beta * sigmoid(-z) / n)[:, None]
    return loss, dbracket * (-2.0 * res_w), dbracket * (2.0 * res_l)


def implicit_reward(pred, ref, target):
    """|target - pred|^2 - |target - ref|^2 per row."""
    pred, ref, target = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (pred, ref, target))
    return _sqnorm(target - pred) - _sqnorm(target - ref)


def dspo_kernel(pred_w, pred_l, ref_w, ref_l, anchor_w, tgt_w, tgt_l, beta, stop_gradient=True):
    """Batch mean of |(pred_w - anchor_w) - beta * g * (pred_w - ref_w)|^2.

    g = 1 - sigmoid(r_w - r_l) with the implicit rewards measured against
    ``tgt_w`` / ``tgt_l``.  With ``stop_gradient`` the gate is a constant.
    """
    pred_w, pred_l, ref_w, ref_l, anchor_w, tgt_w, tgt_l = (
        np.atleast_2d(np.asarray(a, dtype=np.float64))
        for a in (pred_w, pred_l, ref_w, ref_l, anchor_w, tgt_w, tgt_l))
    r_w = implicit_reward(pred_w, ref_w, tgt_w)
    r_l = implicit_reward(pred_l, ref_l, tgt_l)
    s = sigmoid(r_w - r_l)
    gate = (1.0 - s)[:, None]
    drift = pred_w - ref_w
    v = (pred_w - anchor_w) - beta * gate * drift
    n = len(v)
    loss = float(np.mean(_sqnorm(v)))
    dv = 2.0 * v / n
    d_pred_w = dv * (1.0 - beta * gate)
    d_pred_l = np.zeros_like(pred_l)
    if not stop_gradient:
        # dL/dgate -> dgate/d(r_w - r_l) = -s(1-s) -> d(r_w - r_l)/dpred
        d_delta = (-beta * np.sum(dv * drift, axis=-1) * (-s * (1.0 - s)))[:, None]
        d_pred_w = d_pred_w + d_delta * 2.0 * (pred_w - tgt_w)
        d_pred_l = -d_delta * 2.0 * (pred_l - tgt_l)
    return loss, d_pred_w, d_pred_l


# -- parameter-level losses --------------------------------------------------

def _student_pair(params, batch):
    out_w, cache_w = forward(params, batch.x_t_w, batch.t, batch.c)
    out_l, cache_l = forward(params, batch.x_t_l, batch.t, batch.c)
    return out_w, cache_w, out_l, cache_l


def _finish(params, loss, caches_and_grads, grad):
    if not grad:
        return loss
    return loss, backprop(params, caches_and_grads)


def pretrain_mse_loss(params: NetworkParams, schedule: NoiseSchedule, x0, c, eps, t, *, grad=False):
    """Mean over the batch of |eps - eps_theta(x_t, t, c)|^2."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if len(x0) == 0:
        raise ValueError("empty batch")
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    x_t = forward_diffuse(schedule, x0, t, eps)
    out, cache = forward(params, x_t, t, c)
    res = out - eps
    loss = float(np.mean(_sqnorm(res)))
    return _finish(params, loss, [(cache, 2.0 * res / len(res))], grad)


def diffusion_dpo_loss(params, ref_params, cfg: LossConfig, batch: PreferenceMicrobatch, *, grad=False):
    out_w, cache_w, out_l, cache_l = _student_pair(params, batch)
    ref_w = predict_eps(ref_params, batch.x_t_w, batch.t, batch.c)
    ref_l = predict_eps(ref_params, batch.x_t_l, batch.t, batch.c)
    loss, dw, dl = preference_kernel(out_w, out_l, ref_w, ref_l, batch.eps_fwd_w, batch.eps_fwd_l, cfg.beta)
    return _finish(params, loss, [(cache_w, dw), (cache_l, dl)], grad)


def _require_targets(batch):
    if batch.eps_star_w is None or batch.eps_star_l is None:
        raise ValueError("microbatch is missing eps_star targets")


def ddspo_loss(params, ref_params, cfg: LossConfig, batch: PreferenceMicrobatch, *, grad=False):
    _require_targets(batch)
    out_w, cache_w, out_l, cache_l = _student_pair(params, batch)
    ref_w = predict_eps(ref_params, batch.x_t_w, batch.t, batch.c)
    ref_l = predict_eps(ref_params, batch.x_t_l, batch.t, batch.c)
    loss, dw, dl = preference_kernel(out_w, out_l, ref_w, ref_l, batch.eps_star_w, batch.eps_star_l, cfg.beta)
    return _finish(params, loss, [(cache_w, dw), (cache_l, dl)], grad)


def make_reference_score_targets(ref_params, schedule, x_t_w, x_t_l, t, c, c_neg):
    """Winner target under the original condition, loser target under the perturbed one."""
    if schedule is not None:
        schedule.check_step(t)
    eps_star_w = predict_eps(ref_params, x_t_w, t, c)
    eps_star_l = predict_eps(ref_params, x_t_l, t, c_neg)
    return eps_star_w, eps_star_l


def practical_ddspo_loss(params, ref_params, cfg: LossConfig, batch: PreferenceMicrobatch, *, grad=False):
    out_w, cache_w, out_l, cache_l = _student_pair(params, batch)
    ref_w_c = predict_eps(ref_params, batch.x_t_w, batch.t, batch.c)
    ref_l_c = predict_eps(ref_params, batch.x_t_l, batch.t, batch.c)
    ref_l_neg = predict_eps(ref_params, batch.x_t_l, batch.t, batch.c_neg)
    loss, dw, dl = practical_ddspo_kernel(out_w, out_l, ref_w_c, ref_l_c, ref_l_neg, cfg.beta)
    return _finish(params, loss, [(cache_w, dw), (cache_l, dl)], grad)


def dspo_implicit_reward(params, ref_params, x_t, t, c, eps_target) -> np.ndarray:
    r = implicit_reward(predict_eps(params, x_t, t, c), predict_eps(ref_params, x_t, t, c), eps_target)
    return r[0] if np.ndim(x_t) == 1 else r


def _dspo(params, ref_params, cfg, batch, tgt_w, tgt_l, grad):
    out_w, cache_w, out_l, cache_l = _student_pair(params, batch)
    ref_w = predict_eps(ref_params, batch.x_t_w, batch.t, batch.c)
    ref_l = predict_eps(ref_params, batch.x_t_l, batch.t, batch.c)
    loss, dw, dl = dspo_kernel(out_w, out_l, ref_w, ref_l, batch.eps_fwd_w, tgt_w, tgt_l,
                               cfg.beta, cfg.dspo_gate_stop_gradient)
    records = [(cache_w, dw)]
    if not cfg.dspo_gate_stop_gradient:
        records.append((cache_l, dl))
    return _finish(params, loss, records, grad)


def dspo_loss(params, ref_params, cfg: LossConfig, batch: PreferenceMicrobatch, *, grad=False):
    return _dspo(params, ref_params, cfg, batch, batch.eps_fwd_w, batch.eps_fwd_l, grad)


def dspo_cpp_loss(params, ref_params, cfg: LossConfig, batch: PreferenceMicrobatch, *, grad=False):
    """DSPO with implicit rewards measured against the policy targets; anchor stays the forward noise."""
    _require_targets(batch)
    return _dspo(params, ref_params, cfg, batch, batch.eps_star_w, batch.eps_star_l, grad)


PREFERENCE_LOSSES = {
    "ddpo": diffusion_dpo_loss,
    "dspo": dspo_loss,
    "dspo_cpp": dspo_cpp_loss,
    "ddspo_practical": practical_ddspo_loss,
    "ddspo_efficient": practical_ddspo_loss,
}

SIGMOID_FAMILY = ("ddpo", "ddspo_practical", "ddspo_efficient")
