"""Fast invariant suite behind ``ddspo-lab selfcheck``.

The helpers here (finite differences, random small instances) are also used
by the test-suite so both exercise the same instances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import objectives as obj
from .diffusion import build_linear_schedule, default_schedule, forward_diffuse, gaussian_optimal_eps, sample
from .network import NetConfig, NetworkParams, init_network, predict_eps

SMALL_NET = NetConfig(hidden_width=6, hidden_layers=2, num_classes=3, time_embed_dim=4, class_embed_dim=3,
                      num_steps=20)
FD_STEP = 1e-5
FD_TOL = 1e-4
# Entries below this fraction of the largest gradient entry are compared against the floor
# instead of their own magnitude, where central differences have no relative accuracy.
FD_FLOOR = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


# -- random instances ------------------------------------------------------------

def perturbed(params: NetworkParams, scale: float, rng) -> NetworkParams:
    out = params.copy()
    for v in out.tensors.values():
        v += scale * rng.standard_normal(v.shape)
    return out


def random_batch(rng, n: int, num_classes: int, num_steps: int, targets: bool = True) -> obj.PreferenceMicrobatch:
    t = rng.integers(1, num_steps + 1, size=n)
    c = rng.integers(0, num_classes, size=n)
    c_neg = (c + rng.integers(1, num_classes, size=n)) % num_classes
    arrs = [rng.standard_normal((n, 2)) for _ in range(6)]
    batch = obj.PreferenceMicrobatch(t, c, c_neg, *arrs[:4])
    return batch.with_targets(arrs[4], arrs[5]) if targets else batch


def random_instance(seed: int, config: NetConfig = SMALL_NET, n: int = 5):
    """(student, reference, batch, schedule) with the student a small perturbation of the reference."""
    rng = np.random.default_rng(seed)
    ref = init_network(config, int(rng.integers(2**31)))
    student = perturbed(ref, 0.05, rng)
    schedule = build_linear_schedule(config.num_steps, 1e-3, 0.2)
    return student, ref.freeze(), random_batch(rng, n, config.num_classes, config.num_steps), schedule


def _pretrain_case(params, ref, cfg, batch, schedule, grad):
    # reinterpret the batch's winner fields as (x0, eps)
    return obj.pretrain_mse_loss(params, schedule, batch.x_t_w, batch.c, batch.eps_fwd_w, batch.t, grad=grad)


def _wrap(fn):
    return lambda params, ref, cfg, batch, schedule, grad: fn(params, ref, cfg, batch, grad=grad)


def _dspo_full_gate(params, ref, cfg, batch, schedule, grad):
    return obj.dspo_loss(params, ref, replace(cfg, dspo_gate_stop_gradient=False), batch, grad=grad)


def loss_cases(ddspo=None) -> dict:
    """Every implemented loss under a common call signature."""
    return {
        "pretrain_mse": _pretrain_case,
        "diffusion_dpo": _wrap(obj.diffusion_dpo_loss),
        "ddspo": _wrap(ddspo or obj.ddspo_loss),
        "practical_ddspo": _wrap(obj.practical_ddspo_loss),
        "dspo": _wrap(obj.dspo_loss),
        "dspo_full_gate": _dspo_full_gate,
        "dspo_cpp": _wrap(obj.dspo_cpp_loss),
    }


# -- finite differences ----------------------------------------------------------

def finite_difference_grads(f, params: NetworkParams, h: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central differences of scalar ``f(params)`` for every entry, perturbing in place."""
    out = {}
    for name, tensor in params.tensors.items():
        g = np.zeros_like(tensor)
        flat, gflat = tensor.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params)
            flat[i] = orig - h
            down = f(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict) -> float:
    a = np.concatenate([np.ravel(analytic[k]) for k in sorted(analytic)])
    n = np.concatenate([np.ravel(numeric[k]) for k in sorted(analytic)])
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FD_FLOOR * scale)
    return float(np.max(np.abs(a - n) / denom))


def frozen_gate_value(student, ref, cfg, batch, use_targets: bool):
    """Value function of DSPO with the gate pinned at the student's current value.

    With the stop-gradient convention this is the function whose gradient
    the trainer follows, so it is the right finite-difference oracle.
    """
    tgt_w = batch.eps_star_w if use_targets else batch.eps_fwd_w
    tgt_l = batch.eps_star_l if use_targets else batch.eps_fwd_l
    ref_w = predict_eps(ref, batch.x_t_w, batch.t, batch.c)
    ref_l = predict_eps(ref, batch.x_t_l, batch.t, batch.c)
    sq = lambda v: np.sum(v * v, axis=1)  # noqa: E731
    r_w = sq(tgt_w - predict_eps(student, batch.x_t_w, batch.t, batch.c)) - sq(tgt_w - ref_w)
    r_l = sq(tgt_l - predict_eps(student, batch.x_t_l, batch.t, batch.c)) - sq(tgt_l - ref_l)
    gate = (1.0 - 1.0 / (1.0 + np.exp(-(r_w - r_l))))[:, None]

    def value(p):
        pred = predict_eps(p, batch.x_t_w, batch.t, batch.c)
        v = (pred - batch.eps_fwd_w) - cfg.beta * gate * (pred - ref_w)
        return float(np.mean(np.sum(v * v, axis=1)))
    return value


STOP_GRADIENT_CASES = {"dspo": False, "dspo_cpp": True}


def gradient_error(case, seed: int, beta: float = 2.0, name: str | None = None) -> float:
    student, ref, batch, schedule = random_instance(seed)
    cfg = obj.LossConfig(beta=beta)
    _, grads = case(student, ref, cfg, batch, schedule, True)
    if name in STOP_GRADIENT_CASES:
        value = frozen_gate_value(student, ref, cfg, batch, STOP_GRADIENT_CASES[name])
    else:
        value = lambda p: case(p, ref, cfg, batch, schedule, False)  # noqa: E731
    return max_relative_error(grads, finite_difference_grads(value, student))


# -- checks ----------------------------------------------------------------------

def _timed(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def check_gradients(cases, instances: int = 3):
    worst = {name: max(gradient_error(case, 1000 + i, name=name) for i in range(instances))
             for name, case in cases.items()}
    bad = {k: v for k, v in worst.items() if not v < FD_TOL}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return not bad, detail


def check_ln2_identity(trials: int = 20):
    worst = 0.0
    for i in range(trials):
        _, ref, batch, _ = random_instance(2000 + i)
        student = ref.copy()
        cfg = obj.LossConfig(beta=float(np.random.default_rng(i).uniform(1, 800)))
        for fn in (obj.diffusion_dpo_loss, obj.ddspo_loss, obj.practical_ddspo_loss):
            worst = max(worst, abs(fn(student, ref, cfg, batch) - obj.LN2))
    return worst < 1e-9, f"max |loss - ln 2| = {worst:.1e}"


def check_reduction(ddspo=None, trials: int = 20):
    ddspo = ddspo or obj.ddspo_loss
    mismatches = 0
    for i in range(trials):
        student, ref, batch, _ = random_instance(3000 + i)
        cfg = obj.LossConfig(beta=float(np.random.default_rng(i).uniform(1, 800)))
        reduced = batch.with_targets(batch.eps_fwd_w, batch.eps_fwd_l)
        la, ga = obj.diffusion_dpo_loss(student, ref, cfg, batch, grad=True)
        lb, gb = ddspo(student, ref, cfg, reduced, grad=True)
        same = la == lb and all(np.array_equal(ga[k], gb[k]) for k in ga)
        mismatches += not same
    return mismatches == 0, f"{trials - mismatches}/{trials} bitwise equal (loss and gradient)"


def check_gaussian_sampler(n: int = 4000, seed: int = 11):
    schedule = default_schedule()
    mean, std = np.array([2.0, 0.0]), 0.1
    pts = sample(schedule, gaussian_optimal_eps(schedule, mean, std), 0, n, seed)
    m_err = float(np.max(np.abs(pts.mean(axis=0) - mean)))
    s_err = float(np.max(np.abs(pts.std(axis=0) / std - 1)))
    return m_err < 0.05 and s_err < 0.15, f"mean err {m_err:.4f}, std rel err {s_err:.3f}"


def check_forward_inverse():
    schedule = default_schedule()
    rng = np.random.default_rng(5)
    x0, eps = rng.standard_normal((256, 2)), rng.standard_normal((256, 2))
    t = rng.integers(1, schedule.num_steps + 1, size=256)
    from .diffusion import predict_x0_from_eps
    err = float(np.max(np.abs(predict_x0_from_eps(schedule, forward_diffuse(schedule, x0, t, eps), t, eps) - x0)))
    return err < 1e-9, f"max reconstruction error {err:.1e}"


def corrupt_gradient(loss_fn):
    """Test hook: the same loss with a slightly wrong gradient."""
    def faulty(params, ref_params, cfg, batch, *, grad=False):
        out = loss_fn(params, ref_params, cfg, batch, grad=grad)
        if not grad:
            return out
        loss, grads = out
        return loss, {k: v * (1.0 + 1e-3) for k, v in grads.items()}
    return faulty


FAULTS = ("gradient",)


def run_selfcheck(fault: str | None = None, emit=print) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    ddspo = corrupt_gradient(obj.ddspo_loss) if fault == "gradient" else None
    checks = [
        ("gradients vs finite differences", lambda: check_gradients(loss_cases(ddspo))),
        ("ln 2 at reference", check_ln2_identity),
        ("ddspo reduces to diffusion-dpo", lambda: check_reduction(ddspo)),
        ("posterior mean inverts forward process", check_forward_inverse),
        ("gaussian-oracle sampler", check_gaussian_sampler),
    ]
    results = []
    for name, fn in checks:
        r = _timed(name, fn)
        if emit is not None:
            emit(r.line())
        results.append(r)
    return results
