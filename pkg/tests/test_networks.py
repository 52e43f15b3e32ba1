import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egnn.networks import ArchConfig, ConfigError, embed, init_params, metric_score
from egnn.numerics import Tensor, no_grad


def mlp_cfg(**kw):
    base = dict(variant="mlp", input_shape=(6,), emb_dim=8, num_layers=3, mlp_hidden=12)
    base.update(kw)
    return ArchConfig(**base)


def test_mlp_embedding_with_zero_affine_maps_outputs_zero(f64):
    model = init_params(mlp_cfg(), seed=0)
    for name, p in model.embedding.named_parameters():
        if not name.endswith("gamma"):
            p.data[...] = 0.0
    out = embed(np.random.default_rng(0).normal(size=(5, 6)), model.embedding)
    np.testing.assert_array_equal(out.data, 0.0)


def test_identical_samples_embed_identically(f64):
    model = init_params(mlp_cfg(), seed=1)
    x = np.random.default_rng(0).normal(size=(4, 6))
    x[3] = x[1]
    out = embed(x, model.embedding).data
    np.testing.assert_array_equal(out[1], out[3])


def test_conv4_output_length_on_16x16(f64):
    cfg = ArchConfig(variant="conv4", input_shape=(1, 16, 16), emb_dim=32, conv_channels=8)
    model = init_params(cfg, seed=0)
    out = embed(np.random.default_rng(0).normal(size=(3, 1, 16, 16)), model.embedding)
    assert out.shape == (3, 32)
    # two 2x2 pools: 16 -> 8 -> 4, so the projection sees channels * 4 * 4 values
    assert model.embedding.flat_dim == 8 * 4 * 4


def test_embedding_rejects_wrong_sample_shape():
    model = init_params(mlp_cfg(), seed=0)
    with pytest.raises(ValueError, match="shape"):
        embed(np.zeros((3, 5)), model.embedding)


def test_parameter_shapes_depend_only_on_architecture():
    a = init_params(mlp_cfg(), seed=0)
    b = init_params(mlp_cfg(), seed=9)
    assert {k: p.shape for k, p in a.named_parameters()} == {k: p.shape for k, p in b.named_parameters()}


def test_same_seed_gives_bit_identical_params():
    a, b = init_params(mlp_cfg(), seed=4), init_params(mlp_cfg(), seed=4)
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb and np.array_equal(pa.data, pb.data)


def test_batchnorm_affine_starts_at_identity():
    model = init_params(mlp_cfg(), seed=0)
    for name, p in model.named_parameters():
        if name.endswith("gamma"):
            np.testing.assert_array_equal(p.data, 1.0)
        if name.endswith("beta"):
            np.testing.assert_array_equal(p.data, 0.0)


def test_weights_use_fan_in_scaled_bounds():
    model = init_params(mlp_cfg(mlp_hidden=200), seed=0)
    w = dict(model.named_parameters())["embedding.block1.linear.weight"].data
    bound = np.sqrt(6.0 / 200)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.95 * bound


def test_three_layers_have_distinct_networks():
    model = init_params(mlp_cfg(num_layers=3), seed=0)
    assert len(model.node_nets) == 3 and len(model.metric_nets) == 3
    assert len({id(n) for n in model.node_nets}) == 3
    w = [dict(n.named_parameters())["hidden.linear.weight"].data for n in model.node_nets]
    assert not np.array_equal(w[0], w[1]) and not np.array_equal(w[1], w[2])


def test_literal_node_transform_input_is_twice_feature_width():
    cfg = mlp_cfg(node_self_feature=False)
    model = init_params(cfg, seed=0)
    assert model.node_nets[0].in_width == 2 * cfg.emb_dim
    assert init_params(mlp_cfg(), seed=0).node_nets[0].in_width == 3 * cfg.emb_dim
    with pytest.raises(ValueError, match="width"):
        model.node_nets[0](Tensor(np.zeros((4, 3 * cfg.emb_dim), dtype=np.float32)))


def test_parameter_count_is_independent_of_way():
    # the layout is fixed by the architecture alone, so one model serves any N, K, T
    model = init_params(mlp_cfg(), seed=0)
    model.eval()
    with no_grad():
        for n in (10, 25, 55):
            v = Tensor(np.random.default_rng(n).normal(size=(n, 8)).astype(np.float32))
            assert model.metric_nets[0].pairwise(v).shape == (n, n)
    assert model.num_parameters() == init_params(mlp_cfg(), seed=3).num_parameters()


def test_metric_identical_inputs_give_the_zero_difference_score(f64):
    model = init_params(mlp_cfg(), seed=0)
    net = model.metric_nets[0]
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    s_aa, s_bb = metric_score(a, a, net), metric_score(b, b, net)
    assert s_aa == s_bb == metric_score(np.zeros(8), np.zeros(8), net)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_is_symmetric(seed):
    model = init_params(mlp_cfg(), seed=seed % 7)
    model.eval()
    rng = np.random.default_rng(seed)
    v = Tensor(rng.normal(size=(6, 8)).astype(np.float32))
    for net in model.metric_nets:
        with no_grad():
            s = net.pairwise(v).data
        np.testing.assert_array_equal(s, s.T)
        assert np.all(s > 0) and np.all(s < 1)


def test_metric_with_zero_weights_and_bias_ten(f64):
    model = init_params(mlp_cfg(), seed=0)
    net = model.metric_nets[0]
    for name, p in net.named_parameters():
        if not name.endswith("gamma"):
            p.data[...] = 0.0
    dict(net.named_parameters())["score.bias"].data[...] = 10.0
    assert metric_score(np.ones(8), np.zeros(8), net) == pytest.approx(1 / (1 + np.exp(-10)), abs=2e-6)


def test_metric_output_stays_inside_unit_interval_when_saturated():
    model = init_params(mlp_cfg(), seed=0)
    net = model.metric_nets[0]
    dict(net.named_parameters())["score.bias"].data[...] = 1e4
    s = metric_score(np.ones(8), np.zeros(8), net)
    assert 0 < s < 1 and 1 - s >= 1e-7


def test_layer_parameters_are_independent(f64):
    from egnn.graph import init_edges, node_update
    model = init_params(mlp_cfg(), seed=0)
    model.eval("batch")
    rng = np.random.default_rng(0)
    v = Tensor(rng.normal(size=(6, 8)))
    e = Tensor(init_edges(np.array([0, 0, 1, 1, 0, 1]), np.array([1, 1, 1, 1, 0, 0], bool)))
    before = [node_update(v, e, net).data.copy() for net in model.node_nets]
    for _, p in model.node_nets[1].named_parameters():
        p.data += 1.0
    after = [node_update(v, e, net).data for net in model.node_nets]
    np.testing.assert_array_equal(before[0], after[0])
    np.testing.assert_array_equal(before[2], after[2])
    assert not np.allclose(before[1], after[1])


def test_state_dict_round_trip_and_mismatch():
    a, b = init_params(mlp_cfg(), seed=0), init_params(mlp_cfg(), seed=1)
    b.load_state_dict(a.state_dict())
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data)
    with pytest.raises(ConfigError):
        init_params(mlp_cfg(num_layers=2), seed=0).load_state_dict(a.state_dict())


@pytest.mark.parametrize("kw", [dict(emb_dim=0), dict(num_layers=0), dict(variant="resnet"),
                                dict(mlp_hidden=0), dict(input_shape=(1, 4, 4)), dict(metric_floor=0.5)])
def test_invalid_architecture_is_a_config_error(kw):
    with pytest.raises(ConfigError):
        mlp_cfg(**kw)


def test_config_dict_round_trip():
    cfg = mlp_cfg(separate_dsim=True, metric_hidden=(5, 3))
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() == ArchConfig.from_dict(cfg.to_dict()).config_hash()
    with pytest.raises(ConfigError):
        ArchConfig.from_dict({**cfg.to_dict(), "bogus": 1})
