"""Episode graph engine: edge initialization, alternating node/edge updates, voting.

Node order in every graph is supports first (class-major), then queries.
Edge tensors are (n, n, 2): channel 0 holds intra-class strength, channel 1
inter-class strength, and every pair sums to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .networks import ModelParams, MetricNet
from .numerics import NumericalError, Tensor, no_grad, ops

EPS = 1e-12


def edge_labels(labels) -> np.ndarray:
    """y_ij = 1 if y_i == y_j else 0."""
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def init_edges(labels, labeled_mask, dtype=None) -> np.ndarray:
    """Initial edge features: [1, 0] / [0, 1] between labeled nodes, [0.5, 0.5] otherwise."""
    labels = np.asarray(labels)
    mask = np.asarray(labeled_mask, dtype=bool)
    if labels.shape != mask.shape:
        raise ValueError("labels and labeled_mask must have the same length")
    dtype = dtype or np.float64
    y = edge_labels(labels)
    both = mask[:, None] & mask[None, :]
    e = np.full(y.shape + (2,), 0.5, dtype=dtype)
    e[both, 0] = y[both]
    e[both, 1] = 1.0 - y[both]
    return e


@dataclass
class EpisodeGraph:
    """Per-layer node features and edge features for one task graph."""

    labels: np.ndarray                 # episode-local class ids, -1 where unknown to the model
    labeled_mask: np.ndarray
    query_mask: np.ndarray
    node_feats: list = field(default_factory=list)   # Tensor per layer 0..L
    edge_feats: list = field(default_factory=list)   # Tensor per layer 0..L

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    def edge_array(self, layer: int = -1) -> np.ndarray:
        return self.edge_feats[layer].data


def _row_normalize(w: Tensor) -> Tensor:
    sums = w.data.sum(axis=1)
    if np.any(sums < EPS):
        raise NumericalError("edge row with zero total weight in node aggregation")
    return ops.l1_normalize(w, axis=1, eps=EPS)


def node_update(v: Tensor, e: Tensor, f_v: Callable, *, intra_only: bool = False,
                self_feature: bool = True, exclude_self: bool = False) -> Tensor:
    """v_i <- f_v([v_i ||] sum_j e~_ij1 v_j || sum_j e~_ij2 v_j), e~ row-normalized per channel."""
    n = v.shape[0]
    if e.shape != (n, n, 2):
        raise ValueError(f"edge tensor shape {e.shape} does not match {n} nodes")
    if exclude_self:
        e = ops.mul(e, (1.0 - np.eye(n, dtype=e.dtype))[:, :, None])
    intra = ops.matmul(_row_normalize(e[:, :, 0]), v)
    if intra_only:
        inter = Tensor(np.zeros(intra.shape, dtype=intra.dtype))
    else:
        inter = ops.matmul(_row_normalize(e[:, :, 1]), v)
    parts = [v, intra, inter] if self_feature else [intra, inter]
    return f_v(ops.concat(parts, axis=1))


def edge_update(v: Tensor, e: Tensor, f_e: MetricNet | Callable, f_dsim: MetricNet | Callable | None = None,
                *, exclude_self: bool = False) -> Tensor:
    """Re-weight edges by the metric's (dis)similarities, then L1-normalize each pair.

    ``f_e`` maps node features (n, d) to an (n, n) similarity matrix (a
    :class:`MetricNet` or any callable); dissimilarity is ``1 - f_e`` unless
    ``f_dsim`` is given.
    """
    n = v.shape[0]
    sim = f_e.pairwise(v) if isinstance(f_e, MetricNet) else f_e(v)
    if f_dsim is None:
        dsim = ops.sub(1.0, sim)
    else:
        dsim = f_dsim.pairwise(v) if isinstance(f_dsim, MetricNet) else f_dsim(v)
    if not exclude_self:
        return ops.edge_renorm(sim, dsim, e, eps=EPS)
    off = (1.0 - np.eye(n, dtype=e.dtype))[:, :, None]
    masked = ops.mul(e, off)
    updated = ops.mul(ops.edge_renorm(sim, dsim, masked, eps=EPS, ignore_diagonal=True), off)
    return ops.add(updated, ops.mul(e, 1.0 - off))


def propagate(model: ModelParams, v0: Tensor, e0: np.ndarray) -> tuple[list, list]:
    """Run all L layers from initial node features and edges; returns per-layer lists."""
    cfg = model.cfg
    v = v0
    e = Tensor(np.asarray(e0, dtype=v0.dtype))
    nodes, edges = [v], [e]
    for layer in range(cfg.num_layers):
        v = node_update(v, e, model.node_nets[layer], intra_only=cfg.intra_only,
                        self_feature=cfg.node_self_feature, exclude_self=cfg.exclude_self_edges)
        dsim = model.dsim_nets[layer] if model.dsim_nets is not None else None
        e = edge_update(v, e, model.metric_nets[layer], dsim, exclude_self=cfg.exclude_self_edges)
        nodes.append(v)
        edges.append(e)
    return nodes, edges


def build_graph(model: ModelParams, inputs, labels, labeled_mask, query_mask) -> EpisodeGraph:
    """Embed the samples and propagate through every layer."""
    labels = np.asarray(labels)
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    query_mask = np.asarray(query_mask, dtype=bool)
    v0 = model.embedding(inputs)
    return graph_from_embeddings(model, v0, labels, labeled_mask, query_mask)


def graph_from_embeddings(model, v0, labels, labeled_mask, query_mask) -> EpisodeGraph:
    e0 = init_edges(labels, labeled_mask, dtype=v0.dtype)
    nodes, edges = propagate(model, v0, e0)
    visible = np.where(labeled_mask, labels, -1)
    return EpisodeGraph(visible, labeled_mask, query_mask, nodes, edges)


def predict_nodes(edges, labels, labeled_mask, query_idx, n_way: int,
                  symmetrize: bool = False) -> np.ndarray:
    """Weighted voting with labeled supports: softmax_k sum_j yhat_ij [y_j = k].

    ``edges`` is the final (n, n, 2) edge tensor (array or Tensor); returns a
    (len(query_idx), n_way) probability matrix.
    """
    e = edges.data if isinstance(edges, Tensor) else np.asarray(edges)
    labels = np.asarray(labels)
    labeled = np.flatnonzero(np.asarray(labeled_mask, dtype=bool))
    query_idx = np.asarray(query_idx)
    counts = np.bincount(labels[labeled], minlength=n_way) if labeled.size else np.zeros(n_way)
    if len(counts) > n_way or np.any(counts[:n_way] == 0):
        raise ValueError("every class needs at least one labeled support")
    yhat = e[:, :, 0]
    if symmetrize:
        yhat = 0.5 * (yhat + yhat.T)
    onehot = np.eye(n_way, dtype=e.dtype)[labels[labeled]]
    rows = yhat[np.ix_(query_idx, labeled)]
    # a node never votes for itself
    rows = np.where(query_idx[:, None] == labeled[None, :], 0.0, rows)
    votes = rows @ onehot
    return ops.softmax(Tensor(votes), axis=1).data


def vote_sums(edges, labels, labeled_mask, query_idx, n_way, symmetrize=False) -> np.ndarray:
    e = edges.data if isinstance(edges, Tensor) else np.asarray(edges)
    yhat = e[:, :, 0]
    if symmetrize:
        yhat = 0.5 * (yhat + yhat.T)
    labeled = np.flatnonzero(labeled_mask)
    rows = yhat[np.ix_(np.asarray(query_idx), labeled)]
    return rows @ np.eye(n_way)[np.asarray(labels)[labeled]]


@dataclass
class InferenceResult:
    probs: np.ndarray                  # (T_q, N)
    predictions: np.ndarray            # (T_q,)
    graphs: list                       # EpisodeGraph per graph (empty unless kept)

    def accuracy(self, query_labels) -> float:
        return float(np.mean(self.predictions == np.asarray(query_labels)))


def run_inference(episode, model: ModelParams, mode: str = "transductive", *,
                  symmetrize_votes: bool = False, keep_graphs: bool = False,
                  bn: str = "running") -> InferenceResult:
    """Classify an episode's queries (no gradient tracking).

    ``transductive`` puts every query in one graph; ``non_transductive``
    builds one graph per query holding the full support set plus that query.
    ``bn`` selects the batchnorm statistics used ("running" or "batch").
    """
    if mode not in ("transductive", "non_transductive"):
        raise ValueError(f"unknown inference mode {mode!r}")
    if episode.num_queries == 0:
        raise ValueError("episode has no queries")
    model.eval(bn)
    dtype = next(model.named_parameters())[1].dtype
    with no_grad():
        if mode == "transductive":
            groups = [np.arange(episode.num_queries)]
        else:
            groups = [np.array([q]) for q in range(episode.num_queries)]
        if bn == "running":
            all_v0 = model.embedding(np.concatenate([episode.support_x, episode.query_x]).astype(dtype))
        ns = episode.num_support
        probs, graphs = [], []
        for qs in groups:
            inputs, labels, labeled, is_query = episode.graph_arrays(qs)
            if bn == "running":
                v0 = Tensor(all_v0.data[np.concatenate([np.arange(ns), ns + qs])])
            else:
                v0 = model.embedding(inputs.astype(dtype))
            g = graph_from_embeddings(model, v0, labels, labeled, is_query)
            qidx = np.flatnonzero(is_query)
            probs.append(predict_nodes(g.edge_feats[-1], labels, labeled, qidx, episode.n_way, symmetrize_votes))
            if keep_graphs:
                g.labels = labels
                graphs.append(g)
    p = np.concatenate(probs, axis=0)
    return InferenceResult(p, p.argmax(axis=1), graphs)


# -- snapshot export --------------------------------------------------------------

def write_edge_snapshot(path, edge_matrix, n_way: int, n_shot: int, n_query: int, layer: int) -> None:
    """One text file per layer: header "|T| N K T_q layer", then one row of e_ij1 per node."""
    e1 = np.asarray(edge_matrix)
    if e1.ndim == 3:
        e1 = e1[:, :, 0]
    n = e1.shape[0]
    lines = [f"{n} {n_way} {n_shot} {n_query} {layer}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in e1]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_edge_snapshot(path) -> tuple[dict, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    n, n_way, n_shot, n_query, layer = (int(x) for x in text[0].split())
    mat = np.array([[float(x) for x in line.split()] for line in text[1:1 + n]])
    if mat.shape != (n, n):
        raise ValueError(f"{path}: expected {n}x{n} matrix, got {mat.shape}")
    return {"nodes": n, "n_way": n_way, "n_shot": n_shot, "n_query": n_query, "layer": layer}, mat
