"""Episodic training: layered edge loss, Adam updates, validation, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .episodes import Dataset, Episode, sample_episode
from .graph import EpisodeGraph, build_graph, edge_labels, run_inference
from .networks import ArchConfig, ConfigError, ModelParams, init_params
from .numerics import (AdamState, NumericalError, Tensor, adam_step, backward, default_dtype,
                       halve_lr_schedule, no_grad, ops, reset_tape)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"EGCK"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, episode_seed):
        super().__init__(f"{message} (episode seed {episode_seed})")
        self.episode_seed = episode_seed


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    # task layout
    way: int = 5
    shot: int = 5
    query: int = 5
    labeled_ratio: float = 1.0
    labeled_only: bool = False
    transductive_train: bool = True
    # optimisation
    task_batch: int = 8
    episodes: int = 5000
    lambdas: tuple[float, ...] | None = None
    lr: float = 5e-4
    weight_decay: float = 1e-6
    lr_interval: int = 2000
    loss_both_directions: bool = False
    # validation
    eval_every: int = 250
    eval_episodes: int = 100
    eval_query: int | None = None
    seed: int = 0
    dtype: str = "float32"
    split: tuple[int, int, int] | None = None
    # architecture
    variant: str = "mlp"
    emb_dim: int = 32
    num_layers: int = 3
    mlp_hidden: int = 64
    conv_channels: int = 32
    node_self_feature: bool = True
    leaky_slope: float = 0.01
    metric_floor: float = 1e-6
    # ablations
    intra_only: bool = False
    separate_dsim: bool = False
    exclude_self_edges: bool = False
    symmetrize_votes: bool = False

    def __post_init__(self):
        if self.lambdas is not None:
            object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if self.split is not None:
            object.__setattr__(self, "split", tuple(int(x) for x in self.split))
        if self.task_batch < 1:
            raise ConfigError("task_batch must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.lr_interval <= 0:
            raise ConfigError("lr_interval must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        lam = self.layer_weights
        if len(lam) != self.num_layers or min(lam) < 0 or max(lam) <= 0:
            raise ConfigError(f"lambdas must be {self.num_layers} non-negative values with one positive")
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise ConfigError("need way >= 2, shot >= 1, query >= 1")

    @property
    def layer_weights(self) -> tuple[float, ...]:
        return self.lambdas if self.lambdas is not None else (1.0,) * self.num_layers

    def arch(self, input_shape) -> ArchConfig:
        return ArchConfig(variant=self.variant, input_shape=tuple(input_shape), emb_dim=self.emb_dim,
                          num_layers=self.num_layers, mlp_hidden=self.mlp_hidden,
                          conv_channels=self.conv_channels, node_self_feature=self.node_self_feature,
                          intra_only=self.intra_only, separate_dsim=self.separate_dsim,
                          exclude_self_edges=self.exclude_self_edges, leaky_slope=self.leaky_slope,
                          metric_floor=self.metric_floor)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("lambdas", "split"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- loss ------------------------------------------------------------------------

def query_edge_mask(query_mask, both_directions: bool = False) -> np.ndarray:
    """Pairs scored by the loss: query rows against every other node
    (plus query columns when ``both_directions``); never the diagonal."""
    q = np.asarray(query_mask, dtype=bool)
    mask = np.repeat(q[:, None], len(q), axis=1)
    if both_directions:
        mask |= q[None, :]
    np.fill_diagonal(mask, False)
    return mask


def edge_loss(edge_layers: Sequence[Tensor], labels, query_mask, lambdas,
              both_directions: bool = False) -> tuple[Tensor, list[float]]:
    """sum_l lambda_l * BCE(y_ij, e_ij1^l) over query edges, mean-reduced per layer.

    ``edge_layers`` are the edge tensors of layers 1..L (not the initial ones).
    Returns the total loss and the unweighted per-layer values.
    """
    if len(edge_layers) != len(lambdas):
        raise ValueError(f"{len(edge_layers)} edge layers but {len(lambdas)} loss weights")
    mask = query_edge_mask(query_mask, both_directions)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("episode has no query edges")
    target = edge_labels(labels)[rows, cols]
    total, per_layer = None, []
    for lam, e in zip(lambdas, edge_layers):
        layer_loss = ops.bce_loss(e[rows, cols, 0], target)
        per_layer.append(float(layer_loss.data))
        if lam == 0:
            continue
        term = ops.mul(layer_loss, lam)
        total = term if total is None else ops.add(total, term)
    return total, per_layer


def episode_loss(model: ModelParams, episode: Episode, config: TrainingConfig) -> tuple[Tensor, list[float], EpisodeGraph]:
    if config.labeled_only:
        episode = episode.labeled_only()
    inputs, labels, labeled, is_query = episode.graph_arrays()
    graph = build_graph(model, inputs.astype(config.dtype), labels, labeled, is_query)
    loss, per_layer = edge_loss(graph.edge_feats[1:], labels, is_query, config.layer_weights,
                                config.loss_both_directions)
    return loss, per_layer, graph


# -- evaluation ------------------------------------------------------------------

def episode_seed(seed: int, stream: int, index: int, sub: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(stream), int(index), int(sub)])


STREAM_TRAIN, STREAM_VAL, STREAM_TEST, STREAM_INSPECT = 0, 1, 2, 3


@dataclass
class EvalReport:
    accuracy: float
    ci95: float
    mean_bce: float
    per_episode: np.ndarray

    def line(self) -> str:
        return f"accuracy {100 * self.accuracy:.2f}% +- {100 * self.ci95:.2f}% | edge BCE {self.mean_bce:.4f}"


def confidence_half_width(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


def evaluate(model: ModelParams, dataset: Dataset, *, split: str = "test", way: int = 5, shot: int = 5,
             query: int = 15, episodes: int = 600, transductive: bool = True, labeled_ratio: float = 1.0,
             labeled_only: bool = False, seed: int = 0, symmetrize_votes: bool = False,
             bn: str = "running", stream: int = STREAM_TEST) -> EvalReport:
    """Mean query accuracy (with 95% normal half-width) and final-layer edge BCE."""
    mode = "transductive" if transductive else "non_transductive"
    accs, bces = [], []
    for k in range(episodes):
        rng = np.random.default_rng(episode_seed(seed, stream, k))
        ep = sample_episode(dataset, way, shot, query, labeled_ratio, rng=rng, split=split)
        if labeled_only:
            ep = ep.labeled_only()
        res = run_inference(ep, model, mode, symmetrize_votes=symmetrize_votes, keep_graphs=True, bn=bn)
        accs.append(res.accuracy(ep.query_y))
        bces.append(_final_query_bce(res.graphs))
    accs = np.asarray(accs)
    return EvalReport(float(accs.mean()), confidence_half_width(accs), float(np.mean(bces)), accs)


def _final_query_bce(graphs) -> float:
    vals = []
    for g in graphs:
        mask = query_edge_mask(g.query_mask)
        rows, cols = np.nonzero(mask)
        y = edge_labels(g.labels)[rows, cols]
        p = np.clip(g.edge_feats[-1].data[rows, cols, 0].astype(np.float64), 1e-7, 1 - 1e-7)
        vals.append(-(y * np.log(p) + (1 - y) * np.log1p(-p)))
    return float(np.concatenate(vals).mean())


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainingConfig
    arch: ArchConfig
    iteration: int
    model_state: dict[str, np.ndarray]
    adam: AdamState
    best_val_acc: float | None = None
    best_iteration: int | None = None
    rng: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def to_model(self) -> ModelParams:
        model = init_params(self.arch, seed=0, dtype=self.config.dtype)
        model.load_state_dict(self.model_state)
        return model


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
    raw = name.encode()
    head = struct.pack(f"<H{len(raw)}sBB", len(raw), raw, _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "arch": ckpt.arch.to_dict(),
        "adam": {"lr": ckpt.adam.lr, "initial_lr": ckpt.adam.initial_lr, "betas": list(ckpt.adam.betas),
                 "eps": ckpt.adam.eps, "weight_decay": ckpt.adam.weight_decay, "step": ckpt.adam.step},
        "best_val_acc": ckpt.best_val_acc,
        "best_iteration": ckpt.best_iteration,
        "rng": ckpt.rng,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    tensors = [(f"model:{k}", v) for k, v in ckpt.model_state.items()]
    tensors += [(f"adam.m:{k}", v) for k, v in ckpt.adam.m.items()]
    tensors += [(f"adam.v:{k}", v) for k, v in ckpt.adam.v.items()]
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), bytes.fromhex(ckpt.config_hash),
           struct.pack("<QI", ckpt.iteration, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    out += [_pack_tensor(name, arr) for name, arr in tensors]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_checkpoint(path, expect_hash: str | None = None) -> Checkpoint:
    """Read an EGCK file. A config-hash mismatch against ``expect_hash`` only warns."""
    r = _Reader(Path(path).read_bytes())
    if r.raw(4) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.take("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = r.raw(32).hex()
    iteration, meta_len = r.take("<QI")
    try:
        meta = json.loads(r.raw(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    (count,) = r.take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.take("<H")
        name = r.raw(name_len).decode()
        code, ndim = r.take("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.take(f"<{ndim}I")
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(r.raw(nbytes), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.blob):
        raise CheckpointError(f"trailing bytes after checkpoint payload at byte {r.pos}")

    config = TrainingConfig.from_dict(meta["config"])
    if config.config_hash() != stored_hash:
        raise CheckpointError("stored config hash does not match the embedded config")
    if expect_hash is not None and expect_hash != stored_hash:
        warnings.warn("checkpoint was trained with a different config", stacklevel=2)
    a = meta["adam"]
    adam = AdamState(lr=a["lr"], betas=tuple(a["betas"]), eps=a["eps"], weight_decay=a["weight_decay"],
                     initial_lr=a["initial_lr"], step=a["step"])
    model_state = {}
    for name, arr in tensors.items():
        kind, _, key = name.partition(":")
        if kind == "model":
            model_state[key] = arr
        elif kind == "adam.m":
            adam.m[key] = arr
        elif kind == "adam.v":
            adam.v[key] = arr
        else:
            raise CheckpointError(f"unknown tensor section {kind!r}")
    return Checkpoint(config, ArchConfig.from_dict(meta["arch"]), iteration, model_state, adam,
                      meta["best_val_acc"], meta["best_iteration"], meta["rng"])


# -- training loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    latest: Checkpoint
    best: Checkpoint
    log_lines: list[str]
    losses: list[float]


def _snapshot(model, adam, config, arch, iteration, best_acc, best_it) -> Checkpoint:
    return Checkpoint(config, arch, iteration, model.state_dict(),
                      AdamState(lr=adam.lr, betas=adam.betas, eps=adam.eps, weight_decay=adam.weight_decay,
                                initial_lr=adam.initial_lr, step=adam.step,
                                m={k: v.copy() for k, v in adam.m.items()},
                                v={k: v.copy() for k, v in adam.v.items()}),
                      best_acc, best_it, {"seed": config.seed, "next_iteration": iteration})


def train(config: TrainingConfig, dataset: Dataset, resume: Checkpoint | None = None, *,
          run_dir=None, log_fn: Callable[[str], None] | None = None,
          episode_fn: Callable[[int, int], np.random.SeedSequence] | None = None,
          best: Checkpoint | None = None) -> TrainResult:
    """Episodic training from scratch or from ``resume``.

    Each iteration samples ``task_batch`` episodes, back-propagates the mean
    task loss (accumulated one episode at a time, in a fixed order) and takes
    one Adam step. ``episode_fn(iteration, m)`` overrides the episode seeds.
    When ``run_dir`` is given, ``latest.ckpt``, ``best.ckpt`` and
    ``metrics.tsv`` are written there.
    """
    if config.split is not None:
        dataset.set_splits(*config.split)
    arch = config.arch(dataset.input_shape)
    with default_dtype(config.dtype):
        if resume is not None:
            if resume.config_hash != config.config_hash():
                warnings.warn("resuming with a config that differs from the checkpoint's", stacklevel=2)
            model = resume.to_model()
            ck = _snapshot(model, resume.adam, config, arch, resume.iteration, None, None)
            adam = ck.adam
            start = resume.iteration
            best_acc, best_it = resume.best_val_acc, resume.best_iteration
        else:
            model = init_params(arch, seed=config.seed, dtype=config.dtype)
            adam = AdamState(lr=config.lr, weight_decay=config.weight_decay)
            start = 0
            best_acc, best_it = None, None
        best_ckpt = best
        if best_ckpt is None and run_dir is not None and resume is not None and (Path(run_dir) / "best.ckpt").exists():
            best_ckpt = load_checkpoint(Path(run_dir) / "best.ckpt")

        metrics_path = Path(run_dir) / "metrics.tsv" if run_dir is not None else None
        if run_dir is not None:
            Path(run_dir).mkdir(parents=True, exist_ok=True)
        if run_dir is not None and resume is None:
            # a fresh run must not inherit a previous run's log or best model
            for stale in ("metrics.tsv", "best.ckpt", "latest.ckpt"):
                (Path(run_dir) / stale).unlink(missing_ok=True)
        lines: list[str] = []
        losses: list[float] = []

        def emit(line):
            lines.append(line)
            if metrics_path is not None:
                with open(metrics_path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            if log_fn is not None:
                log_fn(line)

        # validation runs at the configured way when the val split allows it,
        # otherwise at the largest way it can supply
        val_way = min(config.way, len(dataset.splits["val"]))
        validate = bool(config.eval_every)
        if validate and val_way < 2:
            warnings.warn("validation split has fewer than 2 classes; skipping validation", stacklevel=2)
            validate = False
        elif validate and val_way < config.way:
            warnings.warn(f"validation split has {val_way} classes; validating {val_way}-way", stacklevel=2)

        scale = 1.0 / config.task_batch
        for it in range(start, config.episodes):
            halve_lr_schedule(adam, it, config.lr_interval)
            model.train()
            model.zero_grad()
            batch_loss, layer_sums = 0.0, np.zeros(config.num_layers)
            for m in range(config.task_batch):
                ss = episode_fn(it, m) if episode_fn is not None else episode_seed(config.seed, STREAM_TRAIN, it, m)
                ep = sample_episode(dataset, config.way, config.shot, config.query, config.labeled_ratio,
                                    rng=np.random.default_rng(ss), split="train")
                reset_tape()
                try:
                    loss, per_layer, _ = episode_loss(model, ep, config)
                except NumericalError as exc:
                    raise TrainingDivergedError(f"numerical failure at iteration {it}: {exc}", ss.entropy) from exc
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"non-finite loss at iteration {it}", ss.entropy)
                backward(ops.mul(loss, scale))
                batch_loss += value * scale
                layer_sums += np.asarray(per_layer) * scale
            adam_step(model, adam)
            losses.append(batch_loss)
            emit("\t".join([str(it), repr(batch_loss)] + [repr(float(x)) for x in layer_sums] + [repr(adam.lr)]))

            done = it + 1
            if validate and (done % config.eval_every == 0 or done == config.episodes):
                report = evaluate(model, dataset, split="val", way=val_way, shot=config.shot,
                                  query=config.eval_query or config.query, episodes=config.eval_episodes,
                                  transductive=True, labeled_ratio=config.labeled_ratio,
                                  labeled_only=config.labeled_only, seed=config.seed,
                                  symmetrize_votes=config.symmetrize_votes, stream=STREAM_VAL)
                emit(f"VAL\t{done}\t{report.accuracy!r}\t{report.ci95!r}")
                if best_acc is None or report.accuracy > best_acc:
                    best_acc, best_it = report.accuracy, done
                    best_ckpt = _snapshot(model, adam, config, arch, done, best_acc, best_it)
                    if run_dir is not None:
                        save_checkpoint(best_ckpt, Path(run_dir) / "best.ckpt")
                if run_dir is not None and done < config.episodes:
                    save_checkpoint(_snapshot(model, adam, config, arch, done, best_acc, best_it),
                                    Path(run_dir) / "latest.ckpt")

        latest = _snapshot(model, adam, config, arch, max(start, config.episodes), best_acc, best_it)
        if best_ckpt is None:
            best_ckpt = latest
        if run_dir is not None:
            save_checkpoint(latest, Path(run_dir) / "latest.ckpt")
            if not (Path(run_dir) / "best.ckpt").exists():
                save_checkpoint(best_ckpt, Path(run_dir) / "best.ckpt")
    return TrainResult(latest, best_ckpt, lines, losses)
