"""Ring-of-Gaussians ground truth, corrupted training corpus and preference pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

PAIR_HEADER = ["x0w_x", "x0w_y", "x0l_x", "x0l_y", "c", "c_neg", "mode"]
DATASET_HEADER = ["x", "y", "c"]
MODES = ("paired", "unpaired")

# class id, count, rng -> (count, 2) points
ClassSampler = Callable[[int, int, np.random.Generator], np.ndarray]


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MixtureSpec:
    centers: np.ndarray
    std: float

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != 2:
            raise ValueError("centers must have shape (K, 2)")
        if not self.std > 0:
            raise ValueError("std must be positive")
        d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
        if np.any(d[~np.eye(len(centers), dtype=bool)] == 0):
            raise ValueError("centers must be pairwise distinct")
        object.__setattr__(self, "centers", centers)

    @property
    def num_classes(self) -> int:
        return len(self.centers)


@dataclass
class ToyDataset:
    x0: np.ndarray
    c: np.ndarray

    def __len__(self):
        return len(self.c)


@dataclass
class PreferencePairSet:
    x0_w: np.ndarray
    x0_l: np.ndarray
    c: np.ndarray
    c_neg: np.ndarray
    mode: str = "paired"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.x0_w = np.asarray(self.x0_w, dtype=np.float64).reshape(-1, 2)
        self.x0_l = np.asarray(self.x0_l, dtype=np.float64).reshape(-1, 2)
        self.c = np.asarray(self.c, dtype=np.int64).reshape(-1)
        self.c_neg = np.asarray(self.c_neg, dtype=np.int64).reshape(-1)
        if self.mode == "paired" and np.any(self.c == self.c_neg):
            raise ValueError("paired preference sets require c != c_neg")

    def __len__(self):
        return len(self.c)


def build_ring_mixture(K: int = 6, radius: float = 2.0, std: float = 0.18) -> MixtureSpec:
    if K < 2:
        raise ValueError("need at least 2 classes")
    if not radius > 0:
        raise ValueError("radius must be positive")
    ang = 2.0 * np.pi * np.arange(K) / K
    return MixtureSpec(radius * np.stack([np.cos(ang), np.sin(ang)], axis=1), float(std))


def clean_sampler(spec: MixtureSpec) -> ClassSampler:
    def draw(k, n, rng):
        return spec.centers[k] + spec.std * rng.standard_normal((n, 2))
    return draw


def sample_clean(spec: MixtureSpec, n_per_class: int, rng_seed: int) -> ToyDataset:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(rng_seed)
    c = np.repeat(np.arange(spec.num_classes), n_per_class)
    x0 = spec.centers[c] + spec.std * rng.standard_normal((len(c), 2))
    return ToyDataset(x0, c)


def corrupt_dataset(ds: ToyDataset, spec: MixtureSpec, extra_std: float, contamination_rate: float,
                    rng_seed: int) -> ToyDataset:
    """Jitter every point and relabel a random fraction to some other class."""
    if extra_std < 0:
        raise ValueError("extra_std must be >= 0")
    if not 0.0 <= contamination_rate <= 1.0:
        raise ValueError("contamination_rate must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    n = len(ds)
    x0 = ds.x0 + extra_std * rng.standard_normal((n, 2))
    c = ds.c.copy()
    flip = rng.random(n) < contamination_rate
    # uniform over the K-1 other classes
    shift = rng.integers(1, spec.num_classes, size=n)
    c[flip] = (c[flip] + shift[flip]) % spec.num_classes
    return ToyDataset(x0, c)


def _offsets(neighbor_offset, K: int) -> np.ndarray:
    """Normalize one offset or a cycle of offsets into [1, K); negative values count backwards."""
    raw = np.atleast_1d(np.asarray(neighbor_offset))
    if raw.size == 0 or not np.issubdtype(raw.dtype, np.integer):
        raise ValueError(f"neighbor_offset must be an integer or a sequence of integers, got {neighbor_offset!r}")
    if np.any(np.abs(raw) >= K):
        raise ValueError(f"neighbor_offset must lie in (-{K}, {K}), got {neighbor_offset!r}")
    off = raw % K
    if np.any(off == 0):
        raise ValueError("neighbor_offset 0 would make c_neg == c")
    return off.astype(np.int64)


def build_preference_pairs(gen_w: ClassSampler, gen_l: ClassSampler, K: int, n_pairs_per_class: int,
                           neighbor_offset=1, rng_seed: int = 0) -> PreferencePairSet:
    """Winner from class k, loser from class (k + offset) mod K, for every k.

    ``neighbor_offset`` may be a sequence, in which case the j-th pair of each
    class uses ``offsets[j % len(offsets)]``; ``(1, -1)`` alternates between the
    two adjacent classes.
    """
    if n_pairs_per_class < 1:
        raise ValueError("n_pairs_per_class must be >= 1")
    offsets = _offsets(neighbor_offset, K)
    rng = np.random.default_rng(rng_seed)
    per_pair = offsets[np.arange(n_pairs_per_class) % len(offsets)]
    xs_w, xs_l, cs, cns = [], [], [], []
    for k in range(K):
        k_neg = (k + per_pair) % K
        xs_w.append(gen_w(k, n_pairs_per_class, rng))
        xs_l.append(np.concatenate([gen_l(int(j), int(np.sum(k_neg == j)), rng) for j in np.unique(k_neg)]))
        cs.append(np.full(n_pairs_per_class, k))
        # losers were drawn grouped by class in sorted order
        cns.append(np.sort(k_neg))
    return PreferencePairSet(np.concatenate(xs_w), np.concatenate(xs_l),
                             np.concatenate(cs), np.concatenate(cns), "paired")


def build_unpaired_negatives(x0_w, c, neighbor_offset=1, rng_seed: int = 0,
                             num_classes: int | None = None) -> PreferencePairSet:
    """Give each positive a surrogate loser borrowed from a positive of a different class.

    The perturbed condition is ``(c + offset) mod K``; with a sequence of
    offsets record ``i`` uses ``offsets[i % len(offsets)]``.
    """
    x0_w = np.asarray(x0_w, dtype=np.float64).reshape(-1, 2)
    c = np.asarray(c, dtype=np.int64).reshape(-1)
    if len(np.unique(c)) < 2:
        raise ValueError("need positives from at least 2 distinct classes")
    K = int(num_classes) if num_classes is not None else int(c.max()) + 1
    offsets = _offsets(neighbor_offset, K)
    rng = np.random.default_rng(rng_seed)
    x0_l = np.empty_like(x0_w)
    for i in range(len(c)):
        pool = np.flatnonzero(c != c[i])
        x0_l[i] = x0_w[rng.choice(pool)]
    c_neg = (c + offsets[np.arange(len(c)) % len(offsets)]) % K
    return PreferencePairSet(x0_w, x0_l, c, c_neg, "unpaired")


def reference_sampler(schedule, params, rng_seed: int) -> ClassSampler:
    """Class sampler that draws from a trained model's reverse chain."""
    from .diffusion import sample
    from .network import eps_fn_for

    eps_fn = eps_fn_for(params)

    def draw(k, n, rng):
        return sample(schedule, eps_fn, k, n, int(rng.integers(0, 2**63 - 1)))
    return draw


# -- CSV ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_pairs_csv(pairs: PreferencePairSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_HEADER)
        for i in range(len(pairs)):
            w.writerow([_fmt(pairs.x0_w[i, 0]), _fmt(pairs.x0_w[i, 1]), _fmt(pairs.x0_l[i, 0]),
                        _fmt(pairs.x0_l[i, 1]), int(pairs.c[i]), int(pairs.c_neg[i]), pairs.mode])


def _rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            raise DataFormatError(f"{path}: empty file, expected header {','.join(header)}")
        if first != header:
            raise DataFormatError(f"{path}:1: bad header {first!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _class_id(text, lineno, path, num_classes):
    try:
        v = int(text)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: class id {text!r} is not an integer") from None
    if v < 0 or (num_classes is not None and v >= num_classes):
        raise DataFormatError(f"{path}:{lineno}: class id {v} outside [0, {num_classes})")
    return v


def _float(text, lineno, path):
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: {text!r} is not a number") from None
    if not np.isfinite(v):
        raise DataFormatError(f"{path}:{lineno}: non-finite coordinate")
    return v


def load_pairs_csv(path, num_classes: int | None = None) -> PreferencePairSet:
    xw, xl, cs, cns, modes = [], [], [], [], set()
    for lineno, row in _rows(path, PAIR_HEADER):
        xw.append([_float(row[0], lineno, path), _float(row[1], lineno, path)])
        xl.append([_float(row[2], lineno, path), _float(row[3], lineno, path)])
        cs.append(_class_id(row[4], lineno, path, num_classes))
        cns.append(_class_id(row[5], lineno, path, num_classes))
        if row[6] not in MODES:
            raise DataFormatError(f"{path}:{lineno}: unknown mode {row[6]!r}")
        if row[6] == "paired" and cs[-1] == cns[-1]:
            raise DataFormatError(f"{path}:{lineno}: paired row with c == c_neg")
        modes.add(row[6])
    if len(modes) > 1:
        raise DataFormatError(f"{path}: mixed pair modes {sorted(modes)}")
    return PreferencePairSet(np.array(xw).reshape(-1, 2), np.array(xl).reshape(-1, 2),
                             np.array(cs, dtype=np.int64), np.array(cns, dtype=np.int64),
                             modes.pop() if modes else "paired")


def save_dataset_csv(ds: ToyDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for (x, y), c in zip(ds.x0, ds.c):
            w.writerow([_fmt(x), _fmt(y), int(c)])


def load_dataset_csv(path, num_classes: int | None = None) -> ToyDataset:
    xs, cs = [], []
    for lineno, row in _rows(path, DATASET_HEADER):
        xs.append([_float(row[0], lineno, path), _float(row[1], lineno, path)])
        cs.append(_class_id(row[2], lineno, path, num_classes))
    return ToyDataset(np.array(xs, dtype=np.float64).reshape(-1, 2), np.array(cs, dtype=np.int64))
