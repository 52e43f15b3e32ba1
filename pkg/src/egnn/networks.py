"""Parameter containers and forward passes for the three EGNN networks.

* embedding ``f_emb``: conv4 (image tensors) or mlp (vectors)
* node transform ``f_v`` (one per layer)
* metric ``f_e`` (one per layer, optionally with a separate dissimilarity net)

Weights are stored as (in, out) for linear maps and (out, in, 3, 3) for
convolutions. Nothing here depends on the number of ways, shots or queries.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numerics import Tensor, get_default_dtype, no_grad, ops


class ConfigError(ValueError):
    """Invalid architecture or training configuration."""


@dataclass(frozen=True)
class ArchConfig:
    variant: str = "mlp"                      # "mlp" | "conv4"
    input_shape: tuple[int, ...] = (16,)
    emb_dim: int = 32
    num_layers: int = 3
    mlp_hidden: int = 64
    conv_channels: int = 32
    conv_pool_blocks: int = 2                 # max-pool after the first n conv blocks
    node_hidden: int | None = None            # default 2 * emb_dim
    metric_hidden: tuple[int, int] | None = None  # default (emb_dim, emb_dim // 2)
    node_self_feature: bool = True            # feed v_i alongside the two aggregations
    intra_only: bool = False
    separate_dsim: bool = False
    exclude_self_edges: bool = False
    leaky_slope: float = 0.01
    metric_floor: float = 1e-6                # similarities live in [floor, 1 - floor]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.metric_hidden is not None:
            object.__setattr__(self, "metric_hidden", tuple(int(s) for s in self.metric_hidden))
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("mlp", "conv4"):
            raise ConfigError(f"unknown embedding variant {self.variant!r}")
        if self.emb_dim < 1 or self.num_layers < 1:
            raise ConfigError("emb_dim and num_layers must be >= 1")
        if any(s < 1 for s in self.input_shape) or not self.input_shape:
            raise ConfigError(f"invalid input shape {self.input_shape}")
        if self.variant == "conv4" and len(self.input_shape) != 3:
            raise ConfigError("conv4 needs a (channels, height, width) input shape")
        if self.variant == "mlp" and len(self.input_shape) != 1:
            raise ConfigError("mlp embedding needs a flat (dim,) input shape")
        if self.mlp_hidden < 1 or self.conv_channels < 1 or self.node_hidden_size < 1:
            raise ConfigError("hidden sizes must be positive")
        if any(h < 1 for h in self.metric_hidden_sizes):
            raise ConfigError("metric hidden sizes must be positive")
        if not 0 <= self.metric_floor < 0.5:
            raise ConfigError("metric_floor must be in [0, 0.5)")
        if not 0 <= self.conv_pool_blocks <= 4:
            raise ConfigError("conv_pool_blocks must be in 0..4")

    @property
    def node_hidden_size(self) -> int:
        return self.node_hidden if self.node_hidden is not None else 2 * self.emb_dim

    @property
    def metric_hidden_sizes(self) -> tuple[int, int]:
        if self.metric_hidden is not None:
            return self.metric_hidden
        return self.emb_dim, max(1, self.emb_dim // 2)

    @property
    def node_input_width(self) -> int:
        return (3 if self.node_self_feature else 2) * self.emb_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        if self.metric_hidden is not None:
            d["metric_hidden"] = list(self.metric_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# -- building blocks ------------------------------------------------------------

class Module:
    """Minimal parameter container: parameters, buffers and child modules by name."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype):
        super().__init__()
        self.weight = self.add_param("weight", _uniform(rng, np.sqrt(6.0 / n_in), (n_in, n_out), dtype))
        self.bias = self.add_param("bias", _uniform(rng, 1.0 / np.sqrt(n_in), (n_out,), dtype))

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype):
        super().__init__()
        fan_in = c_in * 9
        self.weight = self.add_param("weight", _uniform(rng, np.sqrt(6.0 / fan_in), (c_out, c_in, 3, 3), dtype))
        self.bias = self.add_param("bias", _uniform(rng, 1.0 / np.sqrt(fan_in), (c_out,), dtype))

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalization with a switchable statistics mode.

    ``mode`` is "train" (batch statistics, running buffers updated),
    "batch" (batch statistics, buffers untouched) or "running".
    """

    def __init__(self, channels: int, dtype, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    def __call__(self, x):
        stats = "running" if self.mode == "running" else "batch"
        return ops.batchnorm(x, self.gamma, self.beta,
                             self._buffers["running_mean"], self._buffers["running_var"],
                             mode=stats, update_running=self.mode == "train",
                             momentum=self.momentum, eps=self.eps)


class Block(Module):
    """Linear -> BatchNorm -> LeakyReLU."""

    def __init__(self, n_in, n_out, rng, dtype, slope, activate=True):
        super().__init__()
        self.linear = self.add_child("linear", Linear(n_in, n_out, rng, dtype))
        self.bn = self.add_child("bn", BatchNorm(n_out, dtype))
        self.slope = slope
        self.activate = activate

    def __call__(self, x):
        y = self.bn(self.linear(x))
        return ops.leaky_relu(y, self.slope) if self.activate else y


# -- the three networks ---------------------------------------------------------

class EmbeddingNet(Module):
    """Maps raw samples (B, *input_shape) to (B, emb_dim) node features."""

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__()
        self.cfg = cfg
        slope = cfg.leaky_slope
        if cfg.variant == "mlp":
            (dim,) = cfg.input_shape
            self.add_child("block0", Block(dim, cfg.mlp_hidden, rng, dtype, slope))
            self.add_child("block1", Block(cfg.mlp_hidden, cfg.mlp_hidden, rng, dtype, slope))
            self.add_child("proj", Block(cfg.mlp_hidden, cfg.emb_dim, rng, dtype, slope, activate=False))
        else:
            c, h, w = cfg.input_shape
            for i in range(4):
                self.add_child(f"conv{i}", Conv3x3(c if i == 0 else cfg.conv_channels, cfg.conv_channels, rng, dtype))
                self.add_child(f"bn{i}", BatchNorm(cfg.conv_channels, dtype))
                if i < cfg.conv_pool_blocks:
                    h, w = h // 2, w // 2
                    if h < 1 or w < 1:
                        raise ConfigError(f"input {cfg.input_shape} too small for {cfg.conv_pool_blocks} pools")
            self.flat_dim = cfg.conv_channels * h * w
            self.add_child("proj", Block(self.flat_dim, cfg.emb_dim, rng, dtype, slope, activate=False))

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self._params_dtype()))
        if x.shape[1:] != self.cfg.input_shape:
            raise ValueError(f"embedding expects samples of shape {self.cfg.input_shape}, got {x.shape[1:]}")
        ch = self._children
        if self.cfg.variant == "mlp":
            return ch["proj"](ch["block1"](ch["block0"](x)))
        h = x
        for i in range(4):
            h = ops.leaky_relu(ch[f"bn{i}"](ch[f"conv{i}"](h)), self.cfg.leaky_slope)
            if i < self.cfg.conv_pool_blocks:
                h = ops.maxpool2d(h)
        return ch["proj"](ops.reshape(h, (h.shape[0], self.flat_dim)))

    def _params_dtype(self):
        return next(self.named_parameters())[1].dtype


class NodeTransformNet(Module):
    """f_v: concatenated [self ||] intra || inter aggregations -> emb_dim."""

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__()
        self.in_width = cfg.node_input_width
        self.add_child("hidden", Block(self.in_width, cfg.node_hidden_size, rng, dtype, cfg.leaky_slope))
        self.add_child("out", Block(cfg.node_hidden_size, cfg.emb_dim, rng, dtype, cfg.leaky_slope))

    def __call__(self, x):
        if x.shape[-1] != self.in_width:
            raise ValueError(f"node transform expects width {self.in_width}, got {x.shape[-1]}")
        return self._children["out"](self._children["hidden"](x))


class MetricNet(Module):
    """f_e: |v_i - v_j| -> similarity in [floor, 1 - floor].

    The sigmoid is squeezed affinely by ``metric_floor`` so that neither the
    similarity nor the dissimilarity 1 - f_e rounds to exactly 0 in float32;
    otherwise an edge that is already one-hot meets a saturated score and
    its renormalization becomes 0/0.
    """

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__()
        h1, h2 = cfg.metric_hidden_sizes
        self.emb_dim = cfg.emb_dim
        self.floor = cfg.metric_floor
        self.add_child("hidden0", Block(cfg.emb_dim, h1, rng, dtype, cfg.leaky_slope))
        self.add_child("hidden1", Block(h1, h2, rng, dtype, cfg.leaky_slope))
        self.add_child("score", Linear(h2, 1, rng, dtype))

    def score_diffs(self, diffs):
        """Scores for a (P, emb_dim) batch of absolute differences -> (P,)."""
        ch = self._children
        logits = ch["score"](ch["hidden1"](ch["hidden0"](diffs)))
        sim = ops.sigmoid(ops.reshape(logits, (logits.shape[0],)))
        if self.floor:
            sim = ops.add(ops.mul(sim, 1.0 - 2.0 * self.floor), self.floor)
        return sim

    def pairwise(self, v):
        """All-pairs score matrix (n, n) for node features v (n, emb_dim)."""
        n = v.shape[0]
        diffs = ops.reshape(ops.pairwise_absdiff(v), (n * n, v.shape[1]))
        return ops.reshape(self.score_diffs(diffs), (n, n))

    def __call__(self, vi, vj):
        vi, vj = (t if isinstance(t, Tensor) else Tensor(t) for t in (vi, vj))
        if vi.shape != vj.shape:
            raise ValueError(f"metric inputs differ in shape: {vi.shape} vs {vj.shape}")
        if vi.ndim == 1:
            vi, vj = ops.reshape(vi, (1, -1)), ops.reshape(vj, (1, -1))
        return self.score_diffs(ops.abs(ops.sub(vi, vj)))


class ModelParams(Module):
    """theta_emb plus per-layer node-transform and metric networks."""

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__()
        self.cfg = cfg
        self.embedding = self.add_child("embedding", EmbeddingNet(cfg, rng, dtype))
        self.node_nets = [self.add_child(f"node{l + 1}", NodeTransformNet(cfg, rng, dtype))
                          for l in range(cfg.num_layers)]
        self.metric_nets = [self.add_child(f"metric{l + 1}", MetricNet(cfg, rng, dtype))
                            for l in range(cfg.num_layers)]
        self.dsim_nets = ([self.add_child(f"dsim{l + 1}", MetricNet(cfg, rng, dtype))
                           for l in range(cfg.num_layers)] if cfg.separate_dsim else None)

    @property
    def num_layers(self) -> int:
        return self.cfg.num_layers

    @property
    def config_hash(self) -> str:
        return self.cfg.config_hash()

    def set_bn_mode(self, mode: str) -> None:
        if mode not in ("train", "batch", "running"):
            raise ValueError(f"unknown batchnorm mode {mode!r}")
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.mode = mode

    def train(self) -> None:
        self.set_bn_mode("train")

    def eval(self, bn: str = "running") -> None:
        self.set_bn_mode(bn)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"buffer:{k}" for k in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr
        for name, b in buffers.items():
            b[...] = state[f"buffer:{name}"]


def init_params(cfg: ArchConfig, seed: int, dtype=None) -> ModelParams:
    """Fresh parameters: fan-in scaled uniform weights, unit/zero batchnorm affine."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    return ModelParams(cfg, rng, np.dtype(dtype or get_default_dtype()).type)


def embed(samples, net: EmbeddingNet) -> Tensor:
    return net(samples)


def metric_score(vi, vj, net: MetricNet) -> float:
    """Similarity of one pair, scored with the running batchnorm statistics."""
    bns = [m for m in net.modules() if isinstance(m, BatchNorm)]
    saved = [m.mode for m in bns]
    try:
        for m in bns:
            m.mode = "running"
        with no_grad():
            return float(net(vi, vj).data[0])
    finally:
        for m, mode in zip(bns, saved):
            m.mode = mode
