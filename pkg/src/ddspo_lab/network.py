"""Conditional noise-prediction MLP with hand-written reverse-mode gradients.

Layout (names are the checkpoint tensor keys)::

    class_embed   (K, E)          learned class embedding
    W0, b0        (2+D+E, H), (H,)
    W1..W{L-1}    (H, H), (H,)    hidden layers, SiLU after each
    W_out, b_out  (H, 2), (2,)    linear output

Input features are ``[x_t, sincos(t / T), class_embed[c]]``.  Weights are
drawn from N(0, 1/fan_in), biases start at zero and the class embedding
from N(0, 1).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FrozenParamsError(RuntimeError):
    """Raised when something tries to update a frozen (reference) network."""


class CheckpointError(ValueError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    hidden_width: int = 128
    hidden_layers: int = 2
    num_classes: int = 6
    time_embed_dim: int = 16
    class_embed_dim: int = 8
    num_steps: int = 100

    def __post_init__(self):
        for name in ("hidden_width", "hidden_layers", "num_classes", "time_embed_dim",
                     "class_embed_dim", "num_steps"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def input_dim(self) -> int:
        return 2 + self.time_embed_dim + self.class_embed_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H = self.hidden_width
        out = {"class_embed": (self.num_classes, self.class_embed_dim),
               "W0": (self.input_dim, H), "b0": (H,)}
        for i in range(1, self.hidden_layers):
            out[f"W{i}"] = (H, H)
            out[f"b{i}"] = (H,)
        out["W_out"] = (H, 2)
        out["b_out"] = (2,)
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


@dataclass
class NetworkParams:
    config: NetConfig
    tensors: dict[str, np.ndarray]
    frozen: bool = field(default=False)

    def __post_init__(self):
        expected = self.config.shapes()
        if set(expected) != set(self.tensors):
            raise CheckpointShapeError(
                f"tensor names {sorted(self.tensors)} do not match layout {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise CheckpointShapeError(
                    f"{name}: expected shape {shape}, got {tuple(self.tensors[name].shape)}")

    def copy(self, frozen: bool = False) -> "NetworkParams":
        tensors = {k: np.array(v, dtype=np.float64, copy=True) for k, v in self.tensors.items()}
        if frozen:
            for v in tensors.values():
                v.setflags(write=False)
        return NetworkParams(self.config, tensors, frozen=frozen)

    def freeze(self) -> "NetworkParams":
        return self.copy(frozen=True)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.config.shapes()])

    def equal(self, other: "NetworkParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def init_network(config: NetConfig, rng_seed: int) -> NetworkParams:
    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name == "class_embed":
            tensors[name] = rng.standard_normal(shape)
        elif name.startswith("W"):
            tensors[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            tensors[name] = np.zeros(shape)
    return NetworkParams(config, tensors)


def zeros_like_params(params: NetworkParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def time_embedding(t, num_steps: int, dim: int) -> np.ndarray:
    """Sin/cos features of ``t / num_steps`` at geometrically spaced frequencies 1..1000."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / num_steps
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), dim // 2))
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return z * sig, sig


@dataclass
class ForwardCache:
    """Activations retained from one batched ``forward`` call for ``backprop``."""

    c: np.ndarray
    inputs: list
    pre: list
    sig: list
    squeeze: bool


def forward(params: NetworkParams, x_t, t, c) -> tuple[np.ndarray, ForwardCache]:
    cfg = params.config
    x = np.asarray(x_t, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    c = np.broadcast_to(np.asarray(c), (n,))
    if not np.issubdtype(c.dtype, np.integer):
        c = c.astype(np.int64)
    if np.any(c < 0) or np.any(c >= cfg.num_classes):
        raise ValueError(f"class id out of range [0, {cfg.num_classes}): {np.unique(c)}")
    t = np.broadcast_to(np.asarray(t), (n,))
    if np.any(t < 0) or np.any(t > cfg.num_steps):
        raise ValueError(f"step index out of range [0, {cfg.num_steps}]")
    P = params.tensors
    h = np.concatenate([x, time_embedding(t, cfg.num_steps, cfg.time_embed_dim),
                        P["class_embed"][c]], axis=1)
    inputs, pre, sig = [], [], []
    for i in range(cfg.hidden_layers):
        inputs.append(h)
        z = h @ P[f"W{i}"] + P[f"b{i}"]
        h, s = _silu(z)
        pre.append(z)
        sig.append(s)
    inputs.append(h)
    out = h @ P["W_out"] + P["b_out"]
    cache = ForwardCache(np.array(c), inputs, pre, sig, squeeze)
    return (out[0] if squeeze else out), cache


def predict_eps(params: NetworkParams, x_t, t, c) -> np.ndarray:
    return forward(params, x_t, t, c)[0]


def eps_fn_for(params: NetworkParams):
    return lambda x, t, c: predict_eps(params, x, t, c)


def backprop(params: NetworkParams, records) -> dict[str, np.ndarray]:
    """Gradient of a scalar with respect to every tensor.

    ``records`` is an iterable of ``(cache, upstream)`` pairs where
    ``upstream`` is d(scalar)/d(output) for the corresponding ``forward``
    call.  Contributions from all records are summed.
    """
    cfg = params.config
    P = params.tensors
    grads = zeros_like_params(params)
    for cache, upstream in records:
        g = np.asarray(upstream, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        n = cache.inputs[0].shape[0]
        if g.shape != (n, 2):
            raise ValueError(f"upstream shape {g.shape} does not match output ({n}, 2)")
        grads["W_out"] += cache.inputs[-1].T @ g
        grads["b_out"] += g.sum(axis=0)
        dh = g @ P["W_out"].T
        for i in range(cfg.hidden_layers - 1, -1, -1):
            z, s = cache.pre[i], cache.sig[i]
            dz = dh * (s * (1.0 + z * (1.0 - s)))
            grads[f"W{i}"] += cache.inputs[i].T @ dz
            grads[f"b{i}"] += dz.sum(axis=0)
            dh = dz @ P[f"W{i}"].T
        d_embed = dh[:, 2 + cfg.time_embed_dim:]
        np.add.at(grads["class_embed"], cache.c, d_embed)
    return grads


def add_grads(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


# -- serialization ---------------------------------------------------------

def params_to_dict(params: NetworkParams) -> dict:
    return {
        "config": asdict(params.config),
        "tensors": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
                    for k, v in params.tensors.items()},
        "format_version": FORMAT_VERSION,
    }


def params_from_dict(doc: dict) -> NetworkParams:
    if not isinstance(doc, dict):
        raise CheckpointCorruptError("checkpoint root must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    try:
        config = NetConfig(**doc["config"])
        raw = doc["tensors"]
        tensors = {}
        for name, item in raw.items():
            shape = tuple(int(s) for s in item["shape"])
            data = np.asarray(item["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise CheckpointShapeError(f"{name}: {data.size} values for shape {shape}")
            tensors[name] = data.reshape(shape)
    except CheckpointShapeError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"malformed checkpoint: {exc}") from exc
    params = NetworkParams(config, tensors)
    if not all(np.all(np.isfinite(v)) for v in tensors.values()):
        raise CheckpointCorruptError("non-finite parameter values")
    return params


def save_params(params: NetworkParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_params(path) -> NetworkParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: not valid JSON ({exc})") from exc
    return params_from_dict(doc)
