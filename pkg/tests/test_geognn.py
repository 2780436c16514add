import math

import mpmath
import numpy as np
import pytest

from geomrpp.autodiff import Tensor, grad_check, ops
from geomrpp.geognn import (BasisConfig, GeoGNN, GraphBatch, ModelConfig, action_of, bbf,
                            forward_centralized, rbf, sbf, spherical_bessel_roots)
from geomrpp.gradsuite import model_case, resolvable
from geomrpp.percept import build_comm_graph

from oracles import C, mp_bbf, mp_root, mp_sbf_radial, mp_sph_jn, mp_y0


# -- basis functions ------------------------------------------------------------

def test_bbf_cutoff_zero():
    assert np.max(np.abs(bbf(np.array([C])))) < 1e-12


def test_bbf_reference_value():
    v = bbf(np.array([2.5]), BasisConfig(n_bbf=1))[0, 0]
    assert v == pytest.approx(float(mp_bbf(2.5, 1)), abs=1e-15)
    assert v == pytest.approx(0.252982, abs=1e-6)


def test_bbf_small_r_limit():
    cfg = BasisConfig(n_bbf=8)
    v = bbf(np.array([1e-9]), cfg)[0]
    lim = math.sqrt(2 / C) * np.arange(1, 9) * math.pi / C
    assert np.allclose(v, lim, rtol=1e-12)
    # the series branch and the direct branch agree around the switch point
    a, b = bbf(np.array([0.999e-6, 1.001e-6]), cfg)
    assert np.allclose(a, b, rtol=1e-6)


def test_basis_domain_errors():
    for f in (lambda r: bbf(r), lambda r: sbf(r, np.zeros_like(r)), lambda r: rbf(r)):
        with pytest.raises(ValueError):
            f(np.array([0.0]))
        with pytest.raises(ValueError):
            f(np.array([C + 1e-6]))


def test_spherical_bessel_roots_vs_oracle():
    z = spherical_bessel_roots(6, 6)
    for l in range(7):
        for n in range(1, 7):
            assert z[l, n - 1] == pytest.approx(float(mp_root(l, n)), abs=1e-12)
    assert np.allclose(z[0], np.arange(1, 7) * math.pi)


def test_sbf_l0_vanishes_at_cutoff():
    cfg = BasisConfig()
    v = sbf(np.array([C]), np.array([0.7]), cfg)[0]
    assert np.max(np.abs(v[:cfg.n_sbf_radial])) < 1e-15


def test_sbf_l0_reference_value():
    cfg = BasisConfig()
    v = sbf(np.array([C / 2]), np.array([1.3]), cfg)[0, 0]
    ref = (mpmath.sqrt(2 / (C ** 3 * mp_sph_jn(1, mpmath.pi) ** 2)) * mp_sph_jn(0, mpmath.pi / 2)
           / (2 * mpmath.sqrt(mpmath.pi)))
    assert v == pytest.approx(float(ref), abs=1e-14)


def test_sbf_l0_independent_of_theta():
    cfg = BasisConfig()
    r = np.full(5, 3.1)
    v = sbf(r, np.linspace(0, 6, 5), cfg)[:, :cfg.n_sbf_radial]
    assert np.all(v == v[0])


def test_basis_grid_matches_oracle():
    cfg = BasisConfig()
    rs = np.linspace(5.0 / 50, 5.0, 50)
    ths = np.arange(20) * 2 * math.pi / 20
    R, T = np.meshgrid(rs, ths, indexing="ij")
    got_b = bbf(R.ravel(), cfg).reshape(50, 20, -1)
    got_s = sbf(R.ravel(), T.ravel(), cfg).reshape(50, 20, -1)
    want_b = np.array([[float(mp_bbf(r, n)) for n in range(1, cfg.n_bbf + 1)] for r in rs])
    radial = {(l, n): np.array([float(mp_sbf_radial(r, l, n)) for r in rs])
              for l in range(cfg.l_sbf_max + 1) for n in range(1, cfg.n_sbf_radial + 1)}
    ang = {l: np.array([float(mp_y0(l, t)) for t in ths]) for l in range(cfg.l_sbf_max + 1)}
    assert np.max(np.abs(got_b - want_b[:, None, :])) < 1e-9
    for (l, n), rad in radial.items():
        col = l * cfg.n_sbf_radial + (n - 1)
        assert np.max(np.abs(got_s[:, :, col] - rad[:, None] * ang[l][None, :])) < 1e-9


def test_rbf_centers_and_peak():
    cfg = BasisConfig(n_rbf=5)
    v = rbf(np.array([2.0]), cfg)[0]  # centers at 1, 2, 3, 4, 5
    assert v[1] == 1.0
    assert v[0] == pytest.approx(math.exp(-cfg.rbf_gamma))


# -- configuration ------------------------------------------------------------

def test_config_errors():
    with pytest.raises(ValueError):
        ModelConfig(position_encoding="sinusoid")
    with pytest.raises(ValueError):
        ModelConfig(model="geognn", hops=0)
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(d=7)
    with pytest.raises(ValueError):
        BasisConfig(n_bbf=0)
    with pytest.raises(ValueError):
        BasisConfig(cutoff=0.0)


def small_cfg(**kw):
    base = dict(model="geognn", feature_dim=8, hops=2, d=16, encoder_widths=(2, 3, 4), seed=5,
                basis=BasisConfig(n_bbf=4, n_sbf_radial=3, l_sbf_max=3, n_rbf=4))
    base.update(kw)
    return ModelConfig(**base)


def test_config_dict_round_trip():
    cfg = small_cfg()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- encoder ---------------------------------------------------------------------

def test_encoder_zero_input_gives_zero():
    m = GeoGNN(small_cfg()).eval()
    f = m.encode(np.zeros((2, 3, 16, 16)))
    assert f.shape == (2, 8)
    assert np.all(f.data == 0.0)


@pytest.mark.parametrize("d", [8, 16, 24, 40])
def test_encoder_output_shape(d, rng):
    m = GeoGNN(small_cfg(d=d)).eval()
    assert m.encode(rng.random((3, 3, d, d))).shape == (3, 8)


def test_encoder_rejects_wrong_map_shape(rng):
    m = GeoGNN(small_cfg())
    with pytest.raises(ValueError):
        m.encode(rng.random((1, 3, 20, 20)))


def test_encoder_gradient_two_samples():
    cfg = small_cfg(model="cnn", hops=1)
    for seed in range(20):
        m = GeoGNN(ModelConfig(**{**cfg.__dict__, "seed": seed}))
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 16, 16)))
        y = rng.integers(0, 9, 2)
        f = lambda: ops.softmax_cross_entropy(m.forward(x)[0], y)
        if resolvable(f, m.parameters()):
            break
    assert grad_check(f, m.parameters(), eps=1e-5) < 1e-4


# -- DimeConv and interaction layers -------------------------------------------------

def test_dimeconv_zero_neighbor_feature():
    m = GeoGNN(small_cfg())
    conv = m.layers[0].conv
    msg = conv(Tensor(np.zeros((1, 8))), np.array([2.0]), np.array([1.0]))
    assert np.array_equal(msg.data, conv.post(Tensor(np.zeros((1, 8)))).data)


def test_dimeconv_cutoff_edge_constant_message(rng):
    m = GeoGNN(small_cfg())
    conv = m.layers[0].conv
    base = conv.post(Tensor(np.zeros((1, 8)))).data
    for _ in range(3):
        msg = conv(Tensor(rng.normal(size=(1, 8))), np.array([C]), np.array([rng.uniform(0, 6)]))
        assert np.max(np.abs(msg.data - base)) < 1e-12


def test_dimeconv_gradient(rng):
    m = GeoGNN(small_cfg())
    conv = m.layers[0].conv
    f_in = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    r, th = rng.uniform(0.5, 4.5, 3), rng.uniform(0, 6, 3)
    w = Tensor(rng.normal(size=(3, 8)))
    f = lambda: (conv(f_in, r, th) * w).sum()
    assert grad_check(f, [f_in, conv.dense_bbf.weight, conv.dense_sbf.weight]) < 1e-6


def _zero_layer(layer):
    for p in layer.parameters():
        p.data = np.zeros_like(p.data)


def test_residual_identity_with_zero_weights(rng):
    m = GeoGNN(small_cfg(hops=3)).eval()
    for layer in m.layers:
        _zero_layer(layer)
    maps = rng.random((4, 3, 16, 16))
    g = GraphBatch.from_comm_graph(build_comm_graph([0, 1, 2, 3], rng.uniform(0, 4, (4, 2))))
    _, feats = m.forward(maps, g)
    for f in feats[1:]:
        assert np.array_equal(f.data, feats[0].data)


def test_neighbor_permutation_invariance(rng):
    layer = GeoGNN(small_cfg()).layers[0]
    f = Tensor(rng.normal(size=(1, 8)))
    nb = [rng.normal(size=8) for _ in range(4)]
    r, th = rng.uniform(0.5, 4.5, 4), rng.uniform(0, 6, 4)
    a = layer.node_update(f, nb, r, th).data
    p = [2, 0, 3, 1]
    b = layer.node_update(f, [nb[k] for k in p], r[p], th[p]).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_two_identical_neighbors_double_sum(rng):
    layer = GeoGNN(small_cfg()).layers[0]
    fj = rng.normal(size=(1, 8))
    r, th = np.array([2.2]), np.array([0.9])
    single = layer.conv(Tensor(fj), r, th).data
    pair = ops.segment_sum(layer.conv(Tensor(np.vstack([fj, fj])), np.repeat(r, 2), np.repeat(th, 2)),
                           np.array([0, 0]), 1).data
    # BLAS may round a 2-row product differently from a 1-row one by an ulp
    assert np.allclose(pair, 2.0 * single, rtol=1e-12, atol=1e-15)
    # and through the whole layer: v differs from the self path by exactly that sum
    layer.update = lambda v: v
    fi = Tensor(rng.normal(size=(1, 8)))
    self_v = layer.self_path(fi).data
    one = layer.node_update(fi, [fj[0]], r, th).data - fi.data - self_v
    two = layer.node_update(fi, [fj[0], fj[0]], np.repeat(r, 2), np.repeat(th, 2)).data - fi.data - self_v
    assert np.allclose(two, 2.0 * one, rtol=1e-12, atol=1e-14)


# -- whole-model properties ---------------------------------------------------------

def test_isolated_node_matches_edgeless_forward(rng):
    m = GeoGNN(small_cfg()).eval()
    maps = rng.random((3, 3, 16, 16))
    pos = np.array([[0.0, 0.0], [20.0, 0.0], [23.0, 0.0]])  # node 0 is isolated
    g = GraphBatch.from_comm_graph(build_comm_graph([0, 1, 2], pos))
    logits, _ = m.forward(maps, g)
    alone, _ = m.forward(maps[:1])
    # batch of 3 vs batch of 1 may differ by BLAS rounding only
    assert np.allclose(logits.data[0], alone.data[0], rtol=1e-12, atol=1e-15)


def test_isolated_node_equals_cnn_when_self_path_is_identity(rng):
    cfg = small_cfg()
    m = GeoGNN(cfg).eval()
    for layer in m.layers:
        _zero_layer(layer)
    cnn = GeoGNN(ModelConfig(**{**cfg.__dict__, "model": "cnn"})).eval()
    cnn.encoder.load_state_dict(m.encoder.state_dict())
    cnn.mapper.load_state_dict(m.mapper.state_dict())
    maps = rng.random((1, 3, 16, 16))
    assert np.array_equal(m.forward(maps)[0].data, cnn.forward(maps)[0].data)
    assert cnn.layers == []


@pytest.mark.parametrize("hops", [1, 2, 3])
def test_h_hop_locality(hops, rng):
    m = GeoGNN(small_cfg(hops=hops)).eval()
    n = 6
    pos = np.array([[4.0 * k, 0.0] for k in range(n)])  # chain: only consecutive nodes connect
    g = GraphBatch.from_comm_graph(build_comm_graph(list(range(n)), pos))
    maps = rng.random((n, 3, 16, 16))
    base = m.forward(maps, g)[0].data[0]
    for k in range(1, n):
        pert = maps.copy()
        pert[k] = rng.random((3, 16, 16))
        diff = np.max(np.abs(m.forward(pert, g)[0].data[0] - base))
        if k > hops:
            assert diff == 0.0
        else:
            assert diff > 0.0


def test_relabeling_permutes_logits(rng):
    m = GeoGNN(small_cfg(hops=2)).eval()
    n = 6
    pos = rng.uniform(0, 7, (n, 2))
    maps = rng.random((n, 3, 16, 16))
    ids = list(range(n))
    a = forward_centralized(m, build_comm_graph(ids, pos), maps)[0].data
    perm = rng.permutation(n)
    # new id k is old robot perm[k]
    b = forward_centralized(m, build_comm_graph(ids, pos[perm]), maps[perm])[0].data
    assert np.max(np.abs(b - a[perm])) < 1e-9


def test_graph_size_mismatch(rng):
    m = GeoGNN(small_cfg())
    with pytest.raises(ValueError):
        m.forward(rng.random((2, 3, 16, 16)), GraphBatch.empty(3))


def test_model_gradient_four_nodes():
    for seed in range(50):
        f, params = model_case("geognn", 2, "bbf-sbf", 900 + seed, n_robots=4)
        if resolvable(f, params):
            break
    assert grad_check(f, params) < 1e-4


# -- ablation variants -----------------------------------------------------------------

def _variant_logits(mode, r_shift=0.0, th_shift=0.0, seed=2):
    rng = np.random.default_rng(seed)
    m = GeoGNN(small_cfg(position_encoding=mode)).eval()
    g = GraphBatch.from_comm_graph(build_comm_graph(list(range(4)), rng.uniform(0, 3, (4, 2))))
    maps = rng.random((4, 3, 16, 16))
    g2 = GraphBatch(g.n_nodes, g.recv, g.nbr, np.clip(g.r + r_shift, 1e-3, C), g.theta + th_shift)
    return m.forward(maps, g2)[0].data


@pytest.mark.parametrize("mode,r_dep,th_dep", [("none", False, False), ("rbf", True, False),
                                               ("bbf-sbf", True, True)])
def test_geometry_dependence(mode, r_dep, th_dep):
    base = _variant_logits(mode)
    dr = np.max(np.abs(_variant_logits(mode, r_shift=0.4) - base))
    dth = np.max(np.abs(_variant_logits(mode, th_shift=0.8) - base))
    assert (dr > 0) == r_dep and (dr == 0) == (not r_dep)
    assert (dth > 0) == th_dep and (dth == 0) == (not th_dep)


# -- action selection --------------------------------------------------------------------

def test_action_of():
    z = np.zeros(9)
    z[3] = 1.0
    assert action_of(z) == 3
    assert action_of(np.zeros(9)) == 0


def test_argmax_softmax_equals_argmax(rng):
    for _ in range(1000):
        z = rng.normal(scale=5, size=9)
        p = np.exp(z - z.max())
        p /= p.sum()
        assert action_of(z) == int(np.argmax(p))
