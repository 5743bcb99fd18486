import numpy as np
import pytest

from carpe import tensor as tc
from carpe.graphnet import (MLP, Dense, GraphParams, embed_nodes, gin_layer, graph_forward,
                            neighborhood_sum)
from carpe.tensor import Tensor

from oracles import naive_gin, naive_neighbour_sum


def identity_params(d):
    def dense():
        return Dense(Tensor(np.eye(d)), Tensor(np.zeros(d)))
    return GraphParams(rho=dense(), phi0=MLP(dense(), dense()), phi1=MLP(dense(), dense()),
                       epsilon=Tensor(np.zeros(1)))


class TestNeighborhoodSum:
    def test_single_node(self):
        s = neighborhood_sum(Tensor(np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_array_equal(s.data, [[0, 0, 0]])

    def test_unit_basis(self):
        s = neighborhood_sum(Tensor(np.eye(3)))
        np.testing.assert_array_equal(s.data, [[0, 1, 1], [1, 0, 1], [1, 1, 0]])

    def test_equal_rows(self):
        v = np.array([0.5, -1.0])
        s = neighborhood_sum(Tensor(np.tile(v, (5, 1))))
        np.testing.assert_array_equal(s.data, np.tile(4 * v, (5, 1)))

    def test_frames_stay_separate(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(7, 4)).astype(np.float32)
        s = neighborhood_sum(Tensor(h), counts=[3, 1, 3]).data
        np.testing.assert_array_equal(s[:3], naive_neighbour_sum(h[:3]))
        np.testing.assert_array_equal(s[3], 0)
        np.testing.assert_array_equal(s[4:], naive_neighbour_sum(h[4:]))

    def test_counts_must_cover_rows(self):
        with pytest.raises(tc.ShapeError):
            neighborhood_sum(Tensor(np.zeros((3, 2))), counts=[1, 1])


class TestGin:
    def test_single_pedestrian_reduces(self):
        rng = np.random.default_rng(1)
        params = GraphParams.init(rng, 8)
        h = Tensor(rng.normal(size=(1, 64)))
        got = gin_layer(h, params).data
        want = params.phi0(h).data + params.phi1(Tensor(np.zeros((1, 64)))).data
        np.testing.assert_array_equal(got, want)

    def test_identity_config(self):
        h = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        out = gin_layer(h, identity_params(2)).data
        # h_i plus the sum of the other rows
        np.testing.assert_array_equal(out, [[2, 2], [2, 2], [2, 2]])

    def test_row_permutation(self):
        rng = np.random.default_rng(2)
        params = GraphParams.init(rng, 8)
        h = rng.normal(size=(6, 64))
        perm = rng.permutation(6)
        a = gin_layer(Tensor(h), params).data
        b = gin_layer(Tensor(h[perm]), params).data
        np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)

    def test_width_mismatch(self):
        params = GraphParams.init(np.random.default_rng(0), 8)
        with pytest.raises(tc.ShapeError):
            gin_layer(Tensor(np.zeros((2, 10))), params)

    def test_minus_one_epsilon_drops_self_term(self):
        rng = np.random.default_rng(4)
        params = GraphParams.init(rng, 8)
        params.epsilon.data[:] = -1.0
        h = rng.normal(size=(4, 64))
        base = gin_layer(Tensor(h), params).data
        h2 = h.copy()
        h2[0] += rng.normal(size=64)
        moved = gin_layer(Tensor(h2), params).data
        # node 0's own output ignores its own feature; the others see it through phi1
        np.testing.assert_allclose(moved[0], base[0], rtol=1e-6, atol=1e-7)
        assert not np.allclose(moved[1:], base[1:])

    def test_single_hop(self):
        rng = np.random.default_rng(5)
        params = GraphParams.init(rng, 8)
        h = rng.normal(size=(4, 64)).astype(np.float32)
        h2 = h.copy()
        h2[3] = 0
        out = gin_layer(Tensor(h2), params).data
        # node 0: self term untouched, social term is phi1 of the reduced sum
        social = params.phi1(Tensor(h[1:3].sum(axis=0, keepdims=True))).data
        self_term = params.phi0(Tensor(h[:1])).data
        np.testing.assert_allclose(out[0], (self_term + social)[0], rtol=1e-5, atol=1e-6)


class TestEmbed:
    def test_zero_inputs_give_bias(self):
        rng = np.random.default_rng(0)
        params = GraphParams.init(rng, 8)
        params.rho.b.data[:] = rng.normal(size=64)
        h = embed_nodes(np.zeros((3, 8, 2)), np.zeros((3, 8, 2)), params).data
        np.testing.assert_array_equal(h, np.tile(params.rho.b.data, (3, 1)))

    def test_identical_pedestrians(self):
        rng = np.random.default_rng(1)
        params = GraphParams.init(rng, 8)
        A = np.tile(rng.normal(size=(1, 8, 2)), (2, 1, 1))
        h = embed_nodes(A, A - A[:, :1], params).data
        assert h.shape == (2, 64)
        np.testing.assert_array_equal(h[0], h[1])

    def test_flatten_order(self):
        d = 32
        params = GraphParams(rho=Dense(Tensor(np.eye(d)), Tensor(np.zeros(d))),
                             phi0=None, phi1=None, epsilon=None)
        A = np.arange(16, dtype=float).reshape(1, 8, 2)
        h = embed_nodes(A, -A, params).data[0]
        np.testing.assert_array_equal(h[:4], [0, 1, 2, 3])   # x1, y1, x2, y2
        np.testing.assert_array_equal(h[16:18], [0, -1])

    def test_empty_graph(self):
        params = GraphParams.init(np.random.default_rng(0), 8)
        with pytest.raises(ValueError):
            embed_nodes(np.zeros((0, 8, 2)), np.zeros((0, 8, 2)), params)


class TestGraphForward:
    def test_shapes(self, make_sample):
        rng = np.random.default_rng(0)
        params = GraphParams.init(rng, 8)
        nf = graph_forward(make_sample(rng, 5), params)
        assert nf.h.shape == (5, 64) and nf.h_prime.shape == (5, 16)

    def test_duplicates(self, make_sample):
        rng = np.random.default_rng(1)
        params = GraphParams.init(rng, 8)
        s = make_sample(rng, 1)
        dup = s.permuted([0, 0])
        hp = graph_forward(dup, params).h_prime.data
        np.testing.assert_array_equal(hp[0], hp[1])

    def test_finite_outputs(self, make_sample):
        rng = np.random.default_rng(2)
        params = GraphParams.init(rng, 8)
        for _ in range(1000):
            s = make_sample(rng, int(rng.integers(1, 12)))
            assert np.all(np.isfinite(graph_forward(s, params).h_prime.data))


@pytest.mark.parametrize("num_peds", range(1, 17))
def test_gin_matches_per_node_loop(num_peds):
    rng = np.random.default_rng(num_peds)
    params = GraphParams.init(rng, 8)
    params.epsilon.data[:] = rng.normal()
    h = (rng.normal(size=(num_peds, 64)) * 3).astype(np.float32)
    np.testing.assert_array_equal(neighborhood_sum(Tensor(h)).data, naive_neighbour_sum(h))
    np.testing.assert_array_equal(gin_layer(Tensor(h), params).data, naive_gin(h, params))
