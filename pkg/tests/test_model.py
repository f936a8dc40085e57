import numpy as np
import pytest

from mapn import autodiff as ad
from mapn.autodiff import ParamStore, Tensor, grad_check
from mapn.graph import (HeteroGraph, MetaPath, cycle_graph, default_meta_paths, from_edge_list,
                        generate_synthetic)
from mapn.model import (MAPN, BiLSTMMean, ModelConfig, PathSamples, async_aggregate, content_aggregate,
                        inter_path_node_aggregate, intra_path_encode, meta_path_fuse, type_transform)
from mapn.sampler import WalkConfig, bfs_distances, ring_operators
from mapn.ssm import SsmParams, init_ssm


def rng(seed=0):
    return np.random.default_rng(seed)


def test_type_transform_identity_and_bias():
    feats = rng().standard_normal((4, 3))
    g = from_edge_list(4, [(0, 1)], feats)
    s = ParamStore()
    s.add("f.node.W", np.eye(3))
    s.add("f.node.b", np.zeros(3))
    np.testing.assert_array_equal(type_transform(g, s, 3).data[:, 0], feats)
    z = from_edge_list(4, [(0, 1)], np.zeros((4, 3)))
    s.set("f.node.b", [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(type_transform(z, s, 3).data[:, 0], np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_type_transform_shape_contract_and_errors():
    g = HeteroGraph([0, 0, 1], [(0, 2, 0), (1, 2, 0)], ("a", "b"), ("r",),
                    {0: rng().standard_normal((2, 4)), 1: rng().standard_normal((1, 7))})
    s = ParamStore()
    s.add("f.a.W", np.ones((4, 5)))
    s.add("f.a.b", np.zeros(5))
    with pytest.raises(KeyError, match="'b'"):
        type_transform(g, s, 5)
    s.add("f.b.W", np.ones((7, 5)))
    s.add("f.b.b", np.zeros(5))
    assert type_transform(g, s, 5).shape == (3, 1, 5)
    s2 = ParamStore()
    s2.add("f.a.W", np.ones((3, 5)))
    s2.add("f.a.b", np.zeros(5))
    s2.add("f.b.W", np.ones((7, 5)))
    s2.add("f.b.b", np.zeros(5))
    with pytest.raises(ad.ShapeError):
        type_transform(g, s2, 5)


def test_content_aggregate_singleton_and_width():
    s = ParamStore()
    enc = BiLSTMMean(s, "c", 4, 3, rng())
    x = Tensor(rng(1).standard_normal((5, 1, 4)))
    out = content_aggregate(x, enc)
    xs = [x[:, 0]]
    manual = ad.concat([enc.fwd.run(xs)[0], enc.bwd.run(xs)[0]], axis=-1)
    np.testing.assert_array_equal(out.data, manual.data)
    assert content_aggregate(Tensor(rng(2).standard_normal((5, 4, 4))), enc).shape == (5, 6)
    with pytest.raises(ValueError):
        content_aggregate(Tensor(np.zeros((5, 0, 4))), enc)


def test_intra_path_encode_singleton_and_constant():
    s = ParamStore()
    self_enc, nbr_enc = BiLSTMMean(s, "s", 4, 2, rng()), BiLSTMMean(s, "n", 4, 2, rng(1))
    stack = Tensor(rng(2).standard_normal((3, 2, 4)))
    h_hat, q = intra_path_encode(stack, np.array([[1], [2], [0]]), self_enc, nbr_enc)
    expect = nbr_enc(ad.reshape(h_hat[1], (1, 1, 4)))
    np.testing.assert_allclose(q.data[0], expect.data[0], atol=1e-15)
    same = Tensor(np.tile(rng(3).standard_normal((1, 2, 4)), (4, 1, 1)))
    _, q1 = intra_path_encode(same, np.array([[1, 2], [0, 3], [3, 3], [2, 1]]), self_enc, nbr_enc)
    np.testing.assert_allclose(q1.data, np.tile(q1.data[0], (4, 1)), atol=1e-15)
    with pytest.raises(ValueError):
        intra_path_encode(stack, np.zeros((3, 0), dtype=int), self_enc, nbr_enc)


def _path_ssm(d, seed=0):
    s = ParamStore()
    return s, init_ssm(s, "p", d, 3, d, rng(seed), 1.0, feedthrough=False).params()


def test_inter_path_attention_cases():
    _, ssm = _path_ssm(4)
    u = Tensor(rng(5).standard_normal(8))
    qc = Tensor(rng(6).standard_normal((2, 4)))
    _, alpha = inter_path_node_aggregate(qc, Tensor(rng(7).standard_normal((2, 1, 4))),
                                         np.array([[3], [4]]), u, ssm)
    np.testing.assert_array_equal(alpha.data, 1.0)
    same = Tensor(np.tile(rng(8).standard_normal(4), (2, 5, 1)))
    _, alpha = inter_path_node_aggregate(qc, same, np.arange(10).reshape(2, 5), u, ssm)
    np.testing.assert_allclose(alpha.data, 0.2, atol=1e-15)
    with pytest.raises(ValueError):
        inter_path_node_aggregate(qc, Tensor(np.zeros((2, 0, 4))), np.zeros((2, 0), dtype=int), u, ssm)


def test_inter_path_matches_per_node_definition():
    _, ssm = _path_ssm(3, 2)
    u = Tensor(rng(1).standard_normal(6))
    qc, qn = rng(2).standard_normal((2, 3)), rng(3).standard_normal((2, 4, 3))
    ids = np.array([[5, 1, 7, 2], [0, 3, 9, 4]])
    zi, alpha = inter_path_node_aggregate(Tensor(qc), Tensor(qn), ids, u, ssm)
    from mapn.ssm import scan_filter_set
    for a in range(2):
        logits = np.array([ad.leaky_relu(Tensor(u.data @ np.concatenate([qc[a], qn[a, b]]))).data for b in range(4)])
        al = np.exp(logits - logits.max())
        al /= al.sum()
        np.testing.assert_allclose(alpha.data[a], al, atol=1e-14)
        order = sorted(range(4), key=lambda b: (-al[b], ids[a, b]))
        y = scan_filter_set(ssm, np.array([al[b] * qn[a, b] for b in order])).data
        np.testing.assert_allclose(zi.data[a], y * qn[a].sum(0), atol=1e-13)


def test_inter_path_grad_check_five_neighbors():
    s = ParamStore()
    ssm = init_ssm(s, "p", 4, 3, 4, rng(0), 1.0, feedthrough=False)
    s.add("u", rng(1).standard_normal(8))
    s.add("qc", rng(2).standard_normal((1, 4)))
    s.add("qn", rng(3).standard_normal((1, 5, 4)))
    ids = np.array([[4, 8, 1, 3, 6]])
    w = rng(4).standard_normal((1, 4))
    f = lambda: ad.sum_(inter_path_node_aggregate(s["qc"], s["qn"], ids, s["u"], ssm.params())[0] * w)
    assert grad_check(f, s) < 1e-5


def test_meta_path_fuse_cases():
    _, ssm = _path_ssm(4, 3)
    q = Tensor(rng(1).standard_normal(4))
    z1 = Tensor(rng(2).standard_normal((3, 4)))
    _, beta, _ = meta_path_fuse([z1], q, ssm)
    np.testing.assert_array_equal(beta.data, 1.0)
    z, beta, zw = meta_path_fuse([z1, z1], q, ssm)
    np.testing.assert_allclose(beta.data, 0.5, atol=1e-15)
    np.testing.assert_allclose(z.data, zw[0].data + zw[1].data)
    for seed in range(10):
        zs = [Tensor(rng(seed + 10 + i).standard_normal((3, 4))) for i in range(3)]
        _, beta, _ = meta_path_fuse(zs, q, ssm)
        np.testing.assert_allclose(beta.data.sum(1), 1.0, atol=1e-9)
    with pytest.raises(ValueError):
        meta_path_fuse([], q, ssm)


def _async_ssm(d, seed=0):
    s = ParamStore()
    return init_ssm(s, "a", d, 4, d + 1, rng(seed), 1.0).params()


def test_async_isolated_node_keeps_skips():
    g = from_edge_list(4, [(0, 1), (1, 2)])
    mats, mask = ring_operators(g, 2)
    ssm = _async_ssm(3)
    h_prev, h0 = Tensor(rng(1).standard_normal((4, 3))), Tensor(rng(2).standard_normal((4, 3)))
    out = async_aggregate(h_prev, h0, mats, mask, ssm)
    np.testing.assert_allclose(out.data[3], h_prev.data[3] + h0.data[3], atol=1e-15)


def test_async_triangle_symmetry():
    g = cycle_graph(3)
    mats, mask = ring_operators(g, 1)
    x = Tensor(np.tile(rng(0).standard_normal(4), (3, 1)))
    out = async_aggregate(x, x, mats, mask, _async_ssm(4)).data
    np.testing.assert_allclose(out, np.tile(out[0], (3, 1)), atol=1e-14)


ASYM_EDGES = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (1, 5), (2, 6), (0, 3)]


def test_async_permutation_equivariance():
    feats = rng(0).standard_normal((8, 3))
    g = from_edge_list(8, ASYM_EDGES, feats)
    perm = rng(1).permutation(8)
    h = g.relabel(perm)
    ssm = _async_ssm(3)
    outs = []
    for graph in (g, h):
        mats, mask = ring_operators(graph, 2)
        x = Tensor(graph.features[0])
        outs.append(async_aggregate(x, x, mats, mask, ssm).data)
    np.testing.assert_allclose(outs[1][perm], outs[0], atol=1e-13)


def test_async_locality_without_skips():
    g = from_edge_list(10, [(i, i + 1) for i in range(9)])
    K, L = 1, 2
    mats, mask = ring_operators(g, K)
    s = ParamStore()
    ssms = [init_ssm(s, f"a{l}", 2, 3, 3, rng(l), 1.0).params() for l in range(L)]
    h0 = Tensor(rng(5).standard_normal((10, 2)), requires_grad=True)
    h = h0
    for l in range(L):
        h = async_aggregate(h, h0, mats, mask, ssms[l], hop_skip=False, layer_skip=False)
    a = 0
    h0.grad = None
    ad.backward(ad.sum_(h[a]))
    dist = bfs_distances(g, a)
    for b in range(10):
        if dist[b] > L * K:
            np.testing.assert_array_equal(h0.grad[b], 0.0)
    # path graph is bipartite, so two hops without skips reach only even distances
    assert np.abs(h0.grad[2]).sum() > 0


def small_model(seed=0, **kw):
    g = generate_synthetic("homophilous-sbm", 12, 2, 0.6, 0.1, 3, seed=1)
    cfg = ModelConfig(d=4, state_dim=4, K=2, L=2, k_neighbors=3, init_scale=0.5, **kw)
    m = MAPN(g, default_meta_paths(g), cfg, seed=seed)
    m.sample(WalkConfig(walk_length=20, walks_per_node=3))
    return m


def test_forward_shapes_and_normalization():
    m = small_model()
    out = m.forward()
    assert out.z.shape == (12, 4)
    assert all(h.shape == (12, 4) for h in out.layers)
    assert all(q.shape == (12, 4) for q in out.q)
    for alpha in out.alpha:
        np.testing.assert_allclose(alpha.data.sum(1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.beta.data.sum(1), 1.0, atol=1e-9)
    assert np.all(np.isfinite(out.z.data))


def test_forward_requires_samples():
    g = generate_synthetic("homophilous-sbm", 12, 2, 0.6, 0.1, 3, seed=1)
    m = MAPN(g, default_meta_paths(g), ModelConfig(d=4, state_dim=4))
    with pytest.raises(RuntimeError):
        m.forward()


def test_layer_zero_is_feature_projection():
    m = small_model()
    lat = type_transform(m.graph, m.store, 4)
    np.testing.assert_array_equal(m.layers()[0].data, content_aggregate(lat, m.content).data)


def test_full_forward_permutation_equivariance():
    m = small_model()
    g = m.graph
    perm = rng(3).permutation(g.num_nodes)
    h = g.relabel(perm)
    m2 = MAPN(h, m.paths, m.cfg, store=m.store)
    m2.samples = [PathSamples(m2.anchor_nodes, perm[ps.nbr_ids][np.argsort(perm)],
                              perm[ps.nbr_rows][np.argsort(perm)]) for ps in m.samples]
    np.testing.assert_allclose(m2.forward().z.data[perm], m.forward().z.data, atol=1e-12)


def test_lap_pe_option_adds_content_item():
    m = small_model(use_lap_pe=True, lap_pe_k=2)
    assert "f.pe.W" in m.store
    assert type_transform(m.graph, m.store, 4, m.pe).shape == (12, 2, 4)
    assert np.all(np.isfinite(m.embed()))


def test_raw_ssm_input_flag_changes_output():
    a, b = small_model(), small_model(ssm_input="raw")
    assert not np.allclose(a.embed(), b.embed(), rtol=1e-6, atol=0.0)


def test_model_config_validation():
    for bad in (dict(d=3), dict(K=0), dict(L=0), dict(ssm_input="x")):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_mixed_anchor_paths_rejected():
    g = generate_synthetic("hetero-academic", 40, 2, 0.3, 0.05, 3, seed=0)
    bad = [MetaPath(("author", "paper"), ("writes",))]
    with pytest.raises(ValueError):
        MAPN(g, bad, ModelConfig(d=4, state_dim=2))


def test_heterogeneous_forward():
    g = generate_synthetic("hetero-academic", 40, 2, 0.3, 0.05, 3, seed=0)
    m = MAPN(g, default_meta_paths(g), ModelConfig(d=4, state_dim=2, k_neighbors=2))
    m.sample(WalkConfig(walk_length=10, walks_per_node=2))
    z = m.embed()
    assert z.shape == (len(g.nodes_of_type("author")), 4)


def test_end_to_end_gradient_check():
    # a large init keeps the embeddings away from zero so the check is not vacuous
    g = generate_synthetic("homophilous-sbm", 10, 2, 0.6, 0.1, 3, seed=1)
    m = MAPN(g, default_meta_paths(g), ModelConfig(d=2, state_dim=2, K=1, L=1, k_neighbors=2, init_scale=16.0))
    m.sample(WalkConfig(walk_length=20, walks_per_node=3))
    tr = np.array([[0, 2, 1], [1, 3, 0], [4, 6, 5]])

    def loss():
        z = m.forward().z
        pos = ad.sum_(ad.take(z, tr[:, 0]) * ad.take(z, tr[:, 1]), axis=1)
        neg = ad.sum_(ad.take(z, tr[:, 0]) * ad.take(z, tr[:, 2]), axis=1)
        return ad.mean(ad.softplus(-pos) + ad.softplus(neg))

    assert abs(float(loss().data) - 2 * np.log(2)) > 1e-2
    assert grad_check(loss, m.store, eps=1e-4, order=4, floor=1e-6) < 1e-4
