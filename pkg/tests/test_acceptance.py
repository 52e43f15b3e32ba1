"""Exit criteria. Each test records one PASS/FAIL line for the terminal summary.

The learning criteria train real models; expect the module to take a while on
one CPU. Select with ``-m acceptance``; skip with ``-m "not acceptance"``.
"""

import itertools
import math
import time

import numpy as np
import pytest

from egnn.episodes import SyntheticSpec, generate_synthetic, sample_episode
from egnn.graph import edge_update, init_edges, node_update, predict_nodes, propagate
from egnn.networks import ArchConfig, init_params, metric_score
from egnn.numerics import Tensor, backward, default_dtype, no_grad, ops, reset_tape
from egnn.training import TrainingConfig, episode_loss, evaluate, save_checkpoint, train

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)


# -- 1. equation exactness ------------------------------------------------------

def _init_oracle(labels, labeled):
    n = len(labels)
    out = np.empty((n, n, 2))
    for i in range(n):
        for j in range(n):
            if labeled[i] and labeled[j]:
                out[i, j] = (1.0, 0.0) if labels[i] == labels[j] else (0.0, 1.0)
            else:
                out[i, j] = (0.5, 0.5)
    return out


def _check_initialization():
    """Every 2-way 2-shot support arrangement x labeled subset x query labels."""
    checked = 0
    for support in set(itertools.permutations([0, 0, 1, 1])):
        for labeled in itertools.product([False, True], repeat=4):
            for queries in itertools.product([0, 1], repeat=2):
                labels = np.array(support + queries)
                mask = np.array(labeled + (False, False))
                if not np.array_equal(init_edges(labels, mask), _init_oracle(labels, mask)):
                    return False, checked
                checked += 1
    return True, checked


def _check_pair_normalization(n_graphs, rng):
    worst = 0.0
    for _ in range(n_graphs):
        n = int(rng.integers(2, 12))
        sim = rng.uniform(1e-3, 1 - 1e-3, size=(n, n))
        sim = Tensor(0.5 * (sim + sim.T))
        e1 = rng.uniform(0, 1, size=(n, n))
        e = Tensor(np.stack([e1, 1 - e1], axis=2))
        v = Tensor(rng.normal(size=(n, 3)))
        out = edge_update(v, e, lambda _v, s=sim: s).data
        if np.any(out < 0) or np.any(out > 1):
            return False, math.inf
        worst = max(worst, float(np.abs(out.sum(axis=2) - 1).max()))
    return worst <= 1e-12, worst


def _check_vote_argmax(n_tensors, rng):
    for _ in range(n_tensors):
        way, shot, query = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        labels = np.concatenate([np.repeat(np.arange(way), shot), np.repeat(np.arange(way), query)])
        n = len(labels)
        labeled = np.arange(n) < way * shot
        e1 = rng.uniform(size=(n, n))
        edges = np.stack([e1, 1 - e1], axis=2)
        qidx = np.flatnonzero(~labeled)
        probs = predict_nodes(edges, labels, labeled, qidx, way)
        raw = np.zeros((len(qidx), way))
        for a, i in enumerate(qidx):
            for j in np.flatnonzero(labeled):
                raw[a, labels[j]] += e1[i, j]
        if not np.array_equal(probs.argmax(axis=1), raw.argmax(axis=1)):
            return False
    return True


def test_criterion_1_equation_exactness(f64, record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    init_ok, cases = _check_initialization()
    norm_ok, worst = _check_pair_normalization(1000, rng)
    vote_ok = _check_vote_argmax(1000, rng)
    elapsed = time.perf_counter() - start
    ok = init_ok and norm_ok and vote_ok and elapsed < 30
    record_criterion(1, ok, f"init {cases} patterns ok={init_ok}; pair sums max dev {worst:.1e}; "
                            f"vote argmax ok={vote_ok}; {elapsed:.1f}s (< 30s)")
    assert ok


# -- 2. gradient check ------------------------------------------------------------

def test_criterion_2_full_loss_gradient(record_criterion):
    start = time.perf_counter()
    ds = generate_synthetic(SyntheticSpec(classes=4, per_class=4, dim=4, sigma_b=2, seed=0)).set_splits(4, 0, 0)
    cfg = TrainingConfig(way=2, shot=1, query=1, num_layers=2, emb_dim=6, mlp_hidden=8, dtype="float64")
    with default_dtype("float64"):
        model = init_params(cfg.arch(ds.input_shape), seed=3)
        ep = sample_episode(ds, 2, 1, 1, rng=np.random.default_rng(1))
        model.train()

        def loss_value():
            reset_tape()
            return float(episode_loss(model, ep, cfg)[0].data)

        reset_tape()
        model.zero_grad()
        backward(episode_loss(model, ep, cfg)[0])
        h, worst, worst_name, count = 1e-6, 0.0, "", 0
        for name, p in model.named_parameters():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat, gflat = p.data.reshape(-1), analytic.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_value()
                flat[k] = orig - h
                down = loss_value()
                flat[k] = orig
                numeric = (up - down) / (2 * h)
                scale = max(abs(numeric), abs(gflat[k]))
                # entries whose gradient is zero to within the difference noise floor carry no relative information
                rel = 0.0 if scale < 1e-8 else abs(numeric - gflat[k]) / scale
                count += 1
                if rel > worst:
                    worst, worst_name = rel, f"{name}[{k}]"
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 120
    record_criterion(2, ok, f"max relative error {worst:.2e} ({worst_name}) over {count} parameters; "
                            f"{elapsed:.1f}s (< 120s)")
    assert ok


# -- 3. straight-line oracle --------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _leaky(x, slope=0.01):
    return x if x > 0 else slope * x


def _oracle_layer(v, e, f_v, f_e):
    """One node update then one edge update on a small graph, scalar by scalar."""
    n, d = len(v), len(v[0])
    new_v = []
    for i in range(n):
        s1 = sum(e[i][j][0] for j in range(n))
        s2 = sum(e[i][j][1] for j in range(n))
        intra = [sum(e[i][j][0] / s1 * v[j][k] for j in range(n)) for k in range(d)]
        inter = [sum(e[i][j][1] / s2 * v[j][k] for j in range(n)) for k in range(d)]
        new_v.append(f_v(list(v[i]) + intra + inter))
    new_e = [[None] * n for _ in range(n)]
    for i in range(n):
        a1 = sum(e[i][k][0] for k in range(n))
        a2 = sum(e[i][k][1] for k in range(n))
        b1 = sum(f_e(new_v[i], new_v[k]) * e[i][k][0] for k in range(n))
        b2 = sum((1 - f_e(new_v[i], new_v[k])) * e[i][k][1] for k in range(n))
        for j in range(n):
            sim = f_e(new_v[i], new_v[j])
            x1 = sim * e[i][j][0] * a1 / b1
            x2 = (1 - sim) * e[i][j][1] * a2 / b2
            new_e[i][j] = (x1 / (x1 + x2), x2 / (x1 + x2))
    return new_v, new_e


def test_criterion_3_oracle_equivalence(f64, record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    d = 3
    v0 = rng.normal(size=(3, d))
    e1 = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.5, 0.5, 0.5]])
    e0 = np.stack([e1, 1 - e1], axis=2)

    # (a) explicit closed-form transforms, written twice: once with tensor ops, once scalar by scalar
    W = rng.normal(size=(3 * d, d))
    a, b = rng.uniform(0.2, 1.0, size=d), 0.7

    def f_v_engine(x):
        return ops.leaky_relu(ops.matmul(x, Tensor(W)))

    def f_e_engine(v):
        n = v.shape[0]
        dist = ops.matmul(ops.reshape(ops.pairwise_absdiff(v), (n * n, d)), Tensor(a.reshape(d, 1)))
        return ops.sigmoid(ops.sub(b, ops.reshape(dist, (n, n))))

    def f_v_oracle(x):
        return [_leaky(sum(x[r] * W[r, c] for r in range(3 * d))) for c in range(d)]

    def f_e_oracle(vi, vj):
        return _sigmoid(b - sum(a[k] * abs(vi[k] - vj[k]) for k in range(d)))

    v_eng = node_update(Tensor(v0), Tensor(e0), f_v_engine)
    e_eng = edge_update(v_eng, Tensor(e0), f_e_engine)
    v_orc, e_orc = _oracle_layer(v0.tolist(), e0.tolist(), f_v_oracle, f_e_oracle)
    dev_a = max(np.abs(v_eng.data - np.array(v_orc)).max(), np.abs(e_eng.data - np.array(e_orc)).max())

    # (b) the learned networks of a two-layer model, applied one row / one pair at a time
    model = init_params(ArchConfig(input_shape=(d,), emb_dim=d, num_layers=2, mlp_hidden=5), seed=2)
    model.eval("running")
    with no_grad():
        nodes, edges = propagate(model, Tensor(v0), e0)
    v_cur, e_cur = v0.tolist(), e0.tolist()
    dev_b = 0.0
    for layer in range(2):
        net_v, net_e = model.node_nets[layer], model.metric_nets[layer]

        def f_v_rows(x, net=net_v):
            with no_grad():
                return net(Tensor(np.array([x]))).data[0].tolist()

        def f_e_pairs(vi, vj, net=net_e):
            return metric_score(np.array(vi), np.array(vj), net)

        v_cur, e_cur = _oracle_layer(v_cur, e_cur, f_v_rows, f_e_pairs)
        dev_b = max(dev_b, np.abs(nodes[layer + 1].data - np.array(v_cur)).max(),
                    np.abs(edges[layer + 1].data - np.array(e_cur)).max())
    elapsed = time.perf_counter() - start
    ok = dev_a <= 1e-10 and dev_b <= 1e-10 and elapsed < 60
    record_criterion(3, ok, f"max deviation {dev_a:.1e} (closed-form transforms), {dev_b:.1e} (learned networks, "
                            f"2 layers); atol 1e-10; {elapsed:.1f}s (< 60s)")
    assert ok


# -- 4. learning end to end -------------------------------------------------------

EASY_SPLIT = (40, 6, 10)


@pytest.fixture(scope="module")
def easy_data():
    spec = SyntheticSpec(classes=sum(EASY_SPLIT), per_class=60, dim=16, sigma_w=1.0, sigma_b=10.0, seed=0)
    return generate_synthetic(spec).set_splits(*EASY_SPLIT)


def easy_config(**kw):
    base = dict(way=5, shot=5, query=5, num_layers=3, emb_dim=32, mlp_hidden=64, task_batch=8,
                episodes=200, eval_every=50, eval_episodes=50, lr=1e-3, split=EASY_SPLIT, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="module")
def easy_five_way(easy_data):
    start = time.perf_counter()
    result = train(easy_config(), easy_data)
    return result, time.perf_counter() - start


def test_criterion_4_learning_end_to_end(easy_data, easy_five_way, record_criterion):
    result, train_time = easy_five_way
    start = time.perf_counter()
    report = evaluate(result.best.to_model(), easy_data, way=5, shot=5, query=5, episodes=200)
    elapsed = train_time + time.perf_counter() - start
    ok = report.accuracy >= 0.90 and elapsed < 600
    record_criterion(4, ok, f"5-way 5-shot test accuracy {100 * report.accuracy:.2f}% +- {100 * report.ci95:.2f} "
                            f"over 200 episodes (>= 90%); {elapsed:.0f}s (< 600s)")
    assert ok


# -- 5-8. direction of effect on the harder setting ------------------------------------

HARD_SPLIT = (40, 6, 10)
HARD_EVAL_EPISODES = 600
HARD_TRAINING = dict(way=5, shot=5, query=5, emb_dim=16, mlp_hidden=32, task_batch=4, episodes=1000,
                     lr=1e-3, eval_every=0, split=HARD_SPLIT)


@pytest.fixture(scope="module")
def hard_data():
    # class centers spread 3x the within-class spread; two dimensions keep clusters overlapping
    spec = SyntheticSpec(classes=sum(HARD_SPLIT), per_class=60, dim=2, sigma_w=1.0, sigma_b=3.0, seed=0)
    return generate_synthetic(spec).set_splits(*HARD_SPLIT)


class HardRuns:
    """Trains each (variant, seed) once and caches the final checkpoint."""

    VARIANTS = {
        "L1": dict(num_layers=1),
        "L2": dict(num_layers=2),
        "L3": dict(num_layers=3),
        "intra_only": dict(num_layers=3, intra_only=True),
        "semi": dict(num_layers=3, labeled_ratio=0.2),
        "labeled_only": dict(num_layers=3, labeled_ratio=0.2, labeled_only=True),
    }

    def __init__(self, data):
        self.data = data
        self.models = {}
        self.reports = {}

    def config(self, variant, seed):
        return TrainingConfig(seed=seed, **{**HARD_TRAINING, **self.VARIANTS[variant]})

    def model(self, variant, seed):
        key = (variant, seed)
        if key not in self.models:
            self.models[key] = train(self.config(variant, seed), self.data).latest.to_model()
        return self.models[key]

    def accuracy(self, variant, seed, transductive=True):
        key = (variant, seed, transductive)
        if key not in self.reports:
            cfg = self.config(variant, seed)
            self.reports[key] = evaluate(self.model(variant, seed), self.data, way=5, shot=5, query=5,
                                         episodes=HARD_EVAL_EPISODES, seed=100 + seed,
                                         transductive=transductive, labeled_ratio=cfg.labeled_ratio,
                                         labeled_only=cfg.labeled_only)
        return 100 * self.reports[key].accuracy


@pytest.fixture(scope="module")
def hard(hard_data):
    return HardRuns(hard_data)


def _fmt(values):
    return "/".join(f"{x:.1f}" for x in values)


def test_criterion_5_depth_ordering(hard, record_criterion):
    acc = {L: [hard.accuracy(f"L{L}", s) for s in SEEDS] for L in (1, 2, 3)}
    ordered = all(acc[3][k] >= acc[2][k] >= acc[1][k] for k in range(len(SEEDS)))
    gap = float(np.mean(acc[3]) - np.mean(acc[1]))
    ok = ordered and gap >= 2.0
    record_criterion(5, ok, f"per-seed L1 {_fmt(acc[1])}, L2 {_fmt(acc[2])}, L3 {_fmt(acc[3])}; "
                            f"ordered every seed={ordered}; mean L3-L1 {gap:+.2f} pts (>= 2)")
    assert ok


def test_criterion_6_inter_class_aggregation_helps(hard, record_criterion):
    full = [hard.accuracy("L3", s) for s in SEEDS]
    intra = [hard.accuracy("intra_only", s) for s in SEEDS]
    ok = np.mean(full) >= np.mean(intra)
    record_criterion(6, ok, f"intra+inter {_fmt(full)} (mean {np.mean(full):.2f}) vs intra-only {_fmt(intra)} "
                            f"(mean {np.mean(intra):.2f})")
    assert ok


def test_criterion_7_transduction_helps(hard, record_criterion):
    trans = [hard.accuracy("L3", s, transductive=True) for s in SEEDS]
    single = [hard.accuracy("L3", s, transductive=False) for s in SEEDS]
    ok = np.mean(trans) >= np.mean(single)
    record_criterion(7, ok, f"transductive {_fmt(trans)} (mean {np.mean(trans):.2f}) vs non-transductive "
                            f"{_fmt(single)} (mean {np.mean(single):.2f}); {HARD_EVAL_EPISODES} episodes per seed")
    assert ok


def test_criterion_8_unlabeled_supports_help(hard, record_criterion):
    semi = [hard.accuracy("semi", s) for s in SEEDS]
    labeled = [hard.accuracy("labeled_only", s) for s in SEEDS]
    gap = float(np.mean(semi) - np.mean(labeled))
    ok = gap >= 1.0
    record_criterion(8, ok, f"semi {_fmt(semi)} vs labeled-only {_fmt(labeled)} at 20% labeled; "
                            f"mean gap {gap:+.2f} pts (>= 1)")
    assert ok


# -- 9. cross-way ---------------------------------------------------------------------

def test_criterion_9_cross_way(easy_data, easy_five_way, record_criterion):
    five = easy_five_way[0].best.to_model()
    ten = train(easy_config(way=10, query=2, eval_every=0), easy_data).latest.to_model()
    kw = dict(shot=5, episodes=200)
    five_on_ten = evaluate(five, easy_data, way=10, query=2, **kw).accuracy
    five_on_five = evaluate(five, easy_data, way=5, query=5, **kw).accuracy
    ten_on_five = evaluate(ten, easy_data, way=5, query=5, **kw).accuracy
    gap = 100 * abs(ten_on_five - five_on_five)
    ok = five_on_ten >= 0.30 and gap <= 3.0
    record_criterion(9, ok, f"5-way model at 10-way {100 * five_on_ten:.2f}% (>= 30%); 10-way model at 5-way "
                            f"{100 * ten_on_five:.2f}% vs 5-way model {100 * five_on_five:.2f}% "
                            f"(|diff| {gap:.2f} <= 3 pts)")
    assert ok


# -- 10. determinism ------------------------------------------------------------------

def test_criterion_10_determinism(easy_data, tmp_path, record_criterion):
    cfg = easy_config(episodes=30, task_batch=2, eval_every=10, eval_episodes=10, emb_dim=16, mlp_hidden=16)
    for name in ("a", "b"):
        train(cfg, easy_data, run_dir=tmp_path / name)
    files = ("latest.ckpt", "best.ckpt", "metrics.tsv")
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    ok = all(same.values())
    record_criterion(10, ok, "bit-identical " + ", ".join(f"{f}={v}" for f, v in same.items()))
    assert ok
