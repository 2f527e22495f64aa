"""Embedder forward pass, graph encoder, parameters and checkpointing."""

import numpy as np
import pytest

from avatarprint.embedder import (
    AdjacencyGraph,
    EmbedderConfig,
    EmbedderError,
    EmbedderParams,
    GraphEncoderConfig,
    NonFiniteError,
    attention_weights,
    forward,
    forward_batch,
    graph_encode,
    init_params,
    load_adjacency,
    load_checkpoint,
    save_checkpoint,
    triplet_loss,
)
from avatarprint.feature_store import NormalizationParams


def small_config(**overrides):
    base = dict(input_dim=6, heads=2, attention_dim=8, projection_dim=4, window_len=8, seed=1)
    base.update(overrides)
    return EmbedderConfig(**base)


def graph_setup(seed=2):
    graph = AdjacencyGraph(3, ((0, 1), (1, 2)))
    config = EmbedderConfig(
        input_dim=6, heads=2, attention_dim=8, projection_dim=3, window_len=4,
        graph=GraphEncoderConfig(layers=2, hidden_dim=5), seed=seed,
    )
    return config, graph


class TestAdjacency:
    def test_rejects_bad_edges(self):
        with pytest.raises(EmbedderError, match="self-loop"):
            AdjacencyGraph(3, ((1, 1),))
        with pytest.raises(EmbedderError, match="duplicate"):
            AdjacencyGraph(3, ((0, 1), (1, 0)))
        with pytest.raises(EmbedderError, match="out of range"):
            AdjacencyGraph(3, ((0, 3),))

    def test_connectivity(self):
        assert AdjacencyGraph(3, ((0, 1), (1, 2))).is_connected
        assert not AdjacencyGraph(3, ((0, 1),)).is_connected
        assert AdjacencyGraph(1, ()).is_connected

    def test_norm_matrix_path_graph(self):
        # two nodes joined by an edge: each averages itself and the other
        mat = AdjacencyGraph(2, ((0, 1),)).norm_matrix()
        np.testing.assert_allclose(mat, [[0.5, 0.5], [0.5, 0.5]])
        # isolated node only aggregates itself
        mat3 = AdjacencyGraph(3, ((0, 1),)).norm_matrix()
        np.testing.assert_allclose(mat3[2], [0.0, 0.0, 1.0])

    def test_csv_loading(self, tmp_path):
        p = tmp_path / "edges.csv"
        p.write_text("0,1\n1,2\n", encoding="utf-8")
        graph = load_adjacency(p)
        assert graph.num_nodes == 3 and graph.edges == ((0, 1), (1, 2))
        assert load_adjacency(p, num_nodes=5).num_nodes == 5
        p.write_text("0,x\n", encoding="utf-8")
        with pytest.raises(EmbedderError, match="non-integer"):
            load_adjacency(p)

    def test_dict_round_trip(self):
        graph = AdjacencyGraph(4, ((0, 1), (2, 3)))
        assert AdjacencyGraph.from_dict(graph.to_dict()) == graph


class TestConfig:
    def test_head_split_must_be_exact(self):
        with pytest.raises(EmbedderError, match="divide"):
            small_config(heads=3, attention_dim=8)

    def test_window_must_be_even(self):
        with pytest.raises(EmbedderError):
            small_config(window_len=7)
        with pytest.raises(EmbedderError):
            small_config(window_len=0)

    def test_projection_must_compress(self):
        with pytest.raises(EmbedderError, match="projection_dim"):
            small_config(projection_dim=6)
        cfg, _ = graph_setup()
        # with a graph encoder the bound is its hidden size, not input_dim
        assert cfg.projection_dim < cfg.graph.hidden_dim

    def test_dict_round_trip(self):
        for cfg in (small_config(), graph_setup()[0]):
            assert EmbedderConfig.from_dict(cfg.to_dict()) == cfg


class TestParams:
    def test_views_share_flat_memory(self):
        params = init_params(small_config())
        params["proj.bias"][:] = 7.0
        start = params.flat.size - params["proj.bias"].size
        np.testing.assert_array_equal(params.flat[start:], 7.0)

    def test_size_matches_shapes(self):
        cfg = small_config()
        params = init_params(cfg)
        expected = (
            cfg.heads * cfg.head_dim  # queries
            + 2 * cfg.heads * cfg.input_dim * cfg.head_dim  # keys, values
            + cfg.attention_dim * cfg.input_dim  # head mixer
            + cfg.input_dim * cfg.projection_dim + cfg.projection_dim  # projection
        )
        assert params.size == expected

    def test_init_is_seeded(self):
        a = init_params(small_config(seed=5)).flat
        b = init_params(small_config(seed=5)).flat
        c = init_params(small_config(seed=6)).flat
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        params = init_params(small_config())
        np.testing.assert_array_equal(params["proj.bias"], 0.0)

    def test_graph_topology_consistency(self):
        cfg, graph = graph_setup()
        with pytest.raises(EmbedderError, match="iff"):
            init_params(cfg, graph=None)
        with pytest.raises(EmbedderError, match="incompatible"):
            init_params(cfg, graph=AdjacencyGraph(4, ((0, 1),)))

    def test_rejects_wrong_length_or_nan(self):
        cfg = small_config()
        with pytest.raises(EmbedderError):
            EmbedderParams(cfg, np.zeros(3))
        flat = init_params(cfg).flat
        flat[0] = np.nan
        with pytest.raises(NonFiniteError):
            EmbedderParams(cfg, flat)


class TestForward:
    def test_embeddings_are_unit_norm(self):
        params = init_params(small_config())
        windows = np.random.default_rng(0).normal(size=(5, 8, 6))
        z, _ = forward_batch(params, windows)
        assert z.shape == (5, 4)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, rtol=0, atol=1e-12)

    def test_single_window_matches_batch(self):
        params = init_params(small_config())
        windows = np.random.default_rng(1).normal(size=(3, 8, 6))
        z_batch, _ = forward_batch(params, windows)
        for i in range(3):
            np.testing.assert_allclose(forward(params, windows[i]), z_batch[i], atol=1e-12)

    def test_constant_window_gets_uniform_attention(self):
        params = init_params(small_config())
        window = np.tile(np.random.default_rng(2).normal(size=(1, 6)), (8, 1))
        weights = attention_weights(params, window)
        np.testing.assert_allclose(weights, 1.0 / 8.0, rtol=0, atol=1e-12)

    def test_frame_order_does_not_matter(self):
        # pooling attends over frames with no positional signal, so any
        # permutation of the window embeds identically
        params = init_params(small_config())
        rng = np.random.default_rng(3)
        window = rng.normal(size=(8, 6))
        z = forward(params, window)
        for _ in range(3):
            perm = rng.permutation(8)
            np.testing.assert_allclose(forward(params, window[perm]), z, atol=1e-12)

    def test_scaled_input_keeps_unit_norm(self):
        params = init_params(small_config())
        window = np.random.default_rng(4).normal(size=(8, 6))
        z = forward(params, 1000.0 * window)
        assert np.linalg.norm(z) == pytest.approx(1.0, abs=1e-12)

    def test_shape_and_finiteness_guards(self):
        params = init_params(small_config())
        with pytest.raises(EmbedderError, match="expected windows"):
            forward_batch(params, np.zeros((2, 7, 6)))
        bad = np.zeros((1, 8, 6))
        bad[0, 0, 0] = np.inf
        with pytest.raises(NonFiniteError) as err:
            forward_batch(params, bad)
        assert "input" in str(err.value)

    def test_zero_window_cannot_be_normalized(self):
        # zero input with zero biases gives a zero pre-normalization vector
        params = init_params(small_config())
        with pytest.raises(NonFiniteError) as err:
            forward(params, np.zeros((8, 6)))
        assert "l2_normalize" in str(err.value)


class TestGraphEncoder:
    def test_hand_computed_aggregation(self):
        # 2-node path graph, 1 layer, hidden_dim 1, weight picks the x channel:
        # node values x = [1, 3] aggregate to [2, 2]; tanh then node mean
        graph = AdjacencyGraph(2, ((0, 1),))
        cfg = EmbedderConfig(
            input_dim=4, heads=1, attention_dim=2, projection_dim=1, window_len=2,
            graph=GraphEncoderConfig(layers=1, hidden_dim=2), seed=0,
        )
        params = init_params(cfg, graph=graph)
        params["graph.l0.weight"][:] = [[1.0, 0.0], [0.0, 1.0]]
        params["graph.l0.bias"][:] = 0.0
        frames = np.array([[[1.0, 10.0], [3.0, 30.0]]])  # (N=1, L=2, xy)
        desc = graph_encode(params, frames)
        np.testing.assert_allclose(desc, [[np.tanh(2.0), np.tanh(20.0)]], atol=1e-12)

    def test_isolated_node_keeps_its_value(self):
        graph = AdjacencyGraph(3, ((0, 1),))
        cfg = EmbedderConfig(
            input_dim=6, heads=1, attention_dim=2, projection_dim=1, window_len=2,
            graph=GraphEncoderConfig(layers=1, hidden_dim=2), seed=0,
        )
        params = init_params(cfg, graph=graph)
        params["graph.l0.weight"][:] = np.eye(2)
        params["graph.l0.bias"][:] = 0.0
        frames = np.zeros((1, 3, 2))
        frames[0, 2] = [0.5, -0.5]
        desc = graph_encode(params, frames)
        # nodes 0 and 1 see only zeros; node 2 sees itself
        manual = (np.tanh([0.0, 0.0]) + np.tanh([0.0, 0.0]) + np.tanh([0.5, -0.5])) / 3.0
        np.testing.assert_allclose(desc[0], manual, atol=1e-12)

    def test_zero_weights_collapse_to_bias(self):
        cfg, graph = graph_setup()
        params = init_params(cfg, graph=graph)
        for layer in range(cfg.graph.layers):
            params[f"graph.l{layer}.weight"][:] = 0.0
            params[f"graph.l{layer}.bias"][:] = 0.25
        desc = graph_encode(params, np.random.default_rng(0).normal(size=(4, 3, 2)))
        np.testing.assert_allclose(desc, np.tanh(0.25), rtol=0, atol=1e-12)

    def test_forward_uses_graph_path(self):
        cfg, graph = graph_setup()
        params = init_params(cfg, graph=graph)
        windows = np.random.default_rng(5).normal(size=(2, 4, 6))
        z, state = forward_batch(params, windows)
        assert state.graph is not None
        assert state.attn_input.shape == (2, 4, cfg.graph.hidden_dim)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)

    def test_shape_guard(self):
        cfg, graph = graph_setup()
        params = init_params(cfg, graph=graph)
        with pytest.raises(EmbedderError, match="landmark frames"):
            graph_encode(params, np.zeros((2, 4, 2)))


class TestTripletLoss:
    def test_hand_values(self):
        a = np.array([1.0, 0.0])
        p = np.array([1.0, 0.0])
        n = np.array([0.0, 1.0])
        # d_pos = 0, d_neg = 2: loss = max(0, 0 - 2 + margin)
        assert triplet_loss(a, p, n, margin=0.2) == 0.0
        assert triplet_loss(a, p, n, margin=2.5) == pytest.approx(0.5)
        assert triplet_loss(a, n, p, margin=0.2) == pytest.approx(2.2)

    def test_shape_guard(self):
        with pytest.raises(EmbedderError):
            triplet_loss(np.zeros(2), np.zeros(3), np.zeros(2))


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        cfg, graph = graph_setup(seed=9)
        norm = NormalizationParams(
            mean=np.arange(6.0), std=np.full(6, 0.5), floored_dims=(1,), n_frames=321
        )
        params = init_params(cfg, norm, graph)
        path = tmp_path / "model.avck"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert back.config == params.config
        assert back.graph == params.graph
        np.testing.assert_array_equal(back.flat, params.flat)
        np.testing.assert_array_equal(back.normalization.mean, norm.mean)
        np.testing.assert_array_equal(back.normalization.std, norm.std)
        assert back.normalization.floored_dims == (1,)
        assert back.normalization.n_frames == 321

    def test_plain_model_round_trip(self, tmp_path):
        params = init_params(small_config(seed=11))
        save_checkpoint(params, tmp_path / "m.avck")
        back = load_checkpoint(tmp_path / "m.avck")
        assert back.normalization is None and back.graph is None
        np.testing.assert_array_equal(back.flat, params.flat)
        w = np.random.default_rng(0).normal(size=(3, 8, 6))
        np.testing.assert_array_equal(forward_batch(back, w)[0], forward_batch(params, w)[0])

    def test_bad_file_rejected(self, tmp_path):
        p = tmp_path / "bad.avck"
        p.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(EmbedderError):
            load_checkpoint(p)
