"""End-to-end toy protocol: corrupted corpus -> reference -> preference fine-tuning -> metrics.

Everything is derived from a :class:`ToyConfig` and an integer seed.  Each
pipeline stage draws from its own stream (``stage_seed``) so that changing
one stage never perturbs another.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from .diffusion import build_linear_schedule, sample_conditions
from .metrics import MetricsReport, evaluate
from .network import NetConfig, eps_fn_for
from .objectives import LossConfig
from .report import emit_scatter_svg
from .trainer import Checkpoint, finetune, pretrain_config, pretrain_reference

log = logging.getLogger(__name__)

COMPARED_METHODS = ("ddpo", "dspo", "ddspo_practical")
GRID_HEADER = ["method", "N", "beta", "seed", "consistency", "centroid_shift", "status"]

_STAGES = {"clean": 1, "corrupt": 2, "pretrain": 3, "pairs": 4, "unpaired": 5, "finetune": 6, "eval": 7}


def stage_seed(seed: int, stage: str, *extra: int) -> int:
    ss = np.random.SeedSequence([int(seed), _STAGES[stage], *map(int, extra)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class ToyConfig:
    num_classes: int = 6
    radius: float = 2.0
    std: float = 0.18
    train_per_class: int = 2000
    extra_std: float = 0.12
    contamination: float = 0.1
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05
    hidden_width: int = 128
    hidden_layers: int = 2
    time_embed_dim: int = 16
    class_embed_dim: int = 8
    pretrain_steps: int = 4000
    pretrain_batch: int = 256
    pretrain_lr: float = 1e-3
    finetune_steps: int = 600
    finetune_batch: int = 64
    finetune_lr: float = 7e-4
    warmup_steps: int = 50
    beta: float = 400.0
    dspo_gate_stop_gradient: bool = True
    n_pairs: int = 12
    neighbor_offsets: tuple[int, ...] = (1, -1)
    pair_source: str = "clean"
    eval_per_class: int = 300

    def __post_init__(self):
        if self.pair_source not in ("clean", "reference"):
            raise ValueError("pair_source must be 'clean' or 'reference'")
        if self.n_pairs % self.num_classes:
            raise ValueError(f"n_pairs={self.n_pairs} is not a multiple of num_classes={self.num_classes}")
        object.__setattr__(self, "neighbor_offsets", tuple(int(o) for o in np.atleast_1d(self.neighbor_offsets)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neighbor_offsets"] = list(self.neighbor_offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown toy config keys: {sorted(unknown)}")
        d = dict(d)
        if "neighbor_offsets" in d:
            d["neighbor_offsets"] = tuple(d["neighbor_offsets"])
        return cls(**d)

    # -- derived objects --
    def mixture(self) -> D.MixtureSpec:
        return D.build_ring_mixture(self.num_classes, self.radius, self.std)

    def schedule(self):
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)

    def net_config(self) -> NetConfig:
        return NetConfig(self.hidden_width, self.hidden_layers, self.num_classes, self.time_embed_dim,
                         self.class_embed_dim, self.T)

    def pretrain_config(self, seed: int):
        return pretrain_config(steps=self.pretrain_steps, batch_size=self.pretrain_batch,
                               learning_rate=self.pretrain_lr, seed=seed)

    def finetune_config(self, method: str, seed: int, beta: float | None = None):
        from .trainer import finetune_config
        return finetune_config(method, steps=self.finetune_steps, batch_size=self.finetune_batch,
                               learning_rate=self.finetune_lr, warmup_steps=self.warmup_steps, seed=seed,
                               loss=LossConfig(beta=self.beta if beta is None else beta,
                                               dspo_gate_stop_gradient=self.dspo_gate_stop_gradient))


def make_datasets(cfg: ToyConfig, seed: int) -> tuple[D.ToyDataset, D.ToyDataset]:
    spec = cfg.mixture()
    clean = D.sample_clean(spec, cfg.train_per_class, stage_seed(seed, "clean"))
    noisy = D.corrupt_dataset(clean, spec, cfg.extra_std, cfg.contamination, stage_seed(seed, "corrupt"))
    return clean, noisy


def train_reference(cfg: ToyConfig, seed: int, noisy: D.ToyDataset | None = None) -> Checkpoint:
    if noisy is None:
        noisy = make_datasets(cfg, seed)[1]
    return pretrain_reference(noisy, cfg.net_config(), cfg.schedule(), cfg.pretrain_config(seed),
                              stage_seed(seed, "pretrain"))


def make_pairs(cfg: ToyConfig, seed: int, n_pairs: int | None = None, ref: Checkpoint | None = None,
               unpaired: bool = False) -> D.PreferencePairSet:
    """Preference pairs at ``n_pairs`` total; ``unpaired`` reuses the winners as surrogate losers."""
    n_pairs = cfg.n_pairs if n_pairs is None else n_pairs
    K = cfg.num_classes
    if n_pairs % K:
        raise ValueError(f"N={n_pairs} is not a multiple of K={K}")
    spec = cfg.mixture()
    if cfg.pair_source == "reference":
        if ref is None:
            raise ValueError("pair_source='reference' needs a reference checkpoint")
        sampler = D.reference_sampler(ref.schedule, ref.params, stage_seed(seed, "pairs", n_pairs))
    else:
        sampler = D.clean_sampler(spec)
    pairs = D.build_preference_pairs(sampler, sampler, K, n_pairs // K, cfg.neighbor_offsets,
                                     stage_seed(seed, "pairs", n_pairs))
    if unpaired:
        pairs = D.build_unpaired_negatives(pairs.x0_w, pairs.c, cfg.neighbor_offsets,
                                           stage_seed(seed, "unpaired", n_pairs), K)
    return pairs


def pairs_for_method(cfg, seed, method, n_pairs=None, ref=None):
    return make_pairs(cfg, seed, n_pairs, ref, unpaired=(method == "ddspo_efficient"))


def generate(cfg: ToyConfig, ckpt: Checkpoint, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``eval_per_class`` reverse-chain samples per condition; identical noise for every model at a seed."""
    return sample_conditions(ckpt.schedule, eps_fn_for(ckpt.params), range(cfg.num_classes),
                             cfg.eval_per_class, stage_seed(seed, "eval"))


@dataclass
class MethodResult:
    method: str
    seed: int
    checkpoint: Checkpoint
    samples: np.ndarray
    labels: np.ndarray
    metrics: MetricsReport


@dataclass
class ToyRun:
    seed: int
    clean: D.ToyDataset
    noisy: D.ToyDataset
    reference: MethodResult
    results: dict[str, MethodResult] = field(default_factory=dict)


def run_toy(cfg: ToyConfig, seed: int, methods=COMPARED_METHODS, beta: float | None = None) -> ToyRun:
    """Pretrain one reference and fine-tune every method in ``methods`` from it."""
    spec = cfg.mixture()
    clean, noisy = make_datasets(cfg, seed)
    ref = train_reference(cfg, seed, noisy)
    pts, labs = generate(cfg, ref, seed)
    run = ToyRun(seed, clean, noisy, MethodResult("reference", seed, ref, pts, labs, evaluate(pts, labs, spec)))
    for m in methods:
        pairs = pairs_for_method(cfg, seed, m, ref=ref)
        ck = finetune(m, ref, pairs, cfg.finetune_config(m, stage_seed(seed, "finetune"), beta))
        pts, labs = generate(cfg, ck, seed)
        run.results[m] = MethodResult(m, seed, ck, pts, labs, evaluate(pts, labs, spec))
        log.info("seed %d %s consistency %.4f", seed, m, run.results[m].metrics.condition_consistency)
    return run


# -- sweep ---------------------------------------------------------------------

@dataclass
class SweepGrid:
    methods: list[str]
    N_values: list[int]
    beta_values: list[float]
    seeds: list[int]
    cells: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> list[dict]:
        return [c for c in self.cells if c["status"] != "ok"]

    def mean_consistency(self, method: str, N: int, beta: float) -> float:
        vals = [c["consistency"] for c in self.cells
                if c["method"] == method and c["N"] == N and c["beta"] == beta and c["status"] == "ok"]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, GRID_HEADER, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for c in self.cells:
                row = dict(c)
                for k in ("consistency", "centroid_shift"):
                    row[k] = "" if row[k] is None else format(row[k], ".17g")
                row["beta"] = format(row["beta"], "g")
                w.writerow(row)


def svg_name(method: str, N: int, beta: float, seed: int) -> str:
    return f"sweep_{method}_N{N}_b{beta:g}_s{seed}.svg"


def _seed_cells(cfg: ToyConfig, seed: int, methods, N_values, beta_values, out_dir):
    spec = cfg.mixture()
    cells = []
    try:
        ref = train_reference(cfg, seed)
    except Exception as exc:  # noqa: BLE001 - flagged, never fatal for the grid
        log.error("seed %d: reference pretraining failed: %s", seed, exc)
        return [dict(method=m, N=n, beta=b, seed=seed, consistency=None, centroid_shift=None,
                     status=f"failed: reference: {exc}") for m in methods for n in N_values for b in beta_values]
    for m in methods:
        for n in N_values:
            for b in beta_values:
                cell = dict(method=m, N=n, beta=float(b), seed=seed)
                try:
                    pairs = pairs_for_method(cfg, seed, m, n, ref)
                    ck = finetune(m, ref, pairs, cfg.finetune_config(m, stage_seed(seed, "finetune"), b))
                    pts, labs = generate(cfg, ck, seed)
                    rep = evaluate(pts, labs, spec)
                    cell.update(consistency=rep.condition_consistency, centroid_shift=rep.centroid_shift,
                                status="ok", report=rep.to_dict())
                    if out_dir is not None:
                        emit_scatter_svg(pts, labs, spec, Path(out_dir) / svg_name(m, n, b, seed),
                                         title=f"{m} N={n} beta={b:g} seed={seed}")
                except Exception as exc:  # noqa: BLE001
                    log.error("cell %s N=%s beta=%s seed=%s failed: %s", m, n, b, seed, exc)
                    cell.update(consistency=None, centroid_shift=None, status=f"failed: {exc}")
                cells.append(cell)
    return cells


def run_sweep(methods, N_values, beta_values, seeds, base_config: ToyConfig | None = None,
              out_dir=None, workers: int = 1) -> SweepGrid:
    """Every (method, N, beta, seed) cell; one reference per seed, shared by its cells.

    Failed cells are flagged in ``status`` and never abort the grid.  With
    ``out_dir`` the grid CSV and one SVG per cell are written there.
    """
    cfg = base_config or ToyConfig()
    methods, N_values, beta_values, seeds = list(methods), list(N_values), [float(b) for b in beta_values], list(seeds)
    if not (methods and N_values and beta_values and seeds):
        raise ValueError("sweep axes must be non-empty")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    args = [(cfg, s, methods, N_values, beta_values, out_dir) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_seed = list(pool.map(_seed_cells, *zip(*args)))
    else:
        per_seed = [_seed_cells(*a) for a in args]
    grid = SweepGrid(methods, N_values, beta_values, seeds)
    # canonical order independent of execution order
    order = {(m, n, b, s): i for i, (m, n, b, s) in enumerate(
        (m, n, b, s) for m in methods for n in N_values for b in beta_values for s in seeds)}
    grid.cells = sorted((c for cells in per_seed for c in cells),
                        key=lambda c: order[(c["method"], c["N"], c["beta"], c["seed"])])
    if out_dir is not None:
        grid.write_csv(Path(out_dir) / "grid.csv")
    return grid


def with_overrides(cfg: ToyConfig, **kw) -> ToyConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
