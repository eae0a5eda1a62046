import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tensormix.exceptions import DimensionError, InvalidInputError
from tensormix.tensor_core import (
    MAX_CELLS,
    ProbTensor,
    RankRDecomposition,
    Shape,
    compose,
    hellinger,
    kl_divergence,
    marginals,
    normalize,
    rank_one_check,
    rank_upper_bound,
)


def point_mass(dims, idx):
    v = np.zeros(dims)
    v[idx] = 1.0
    return ProbTensor.from_array(v)


def diag(a, b):
    return ProbTensor.from_array(np.diag([a, b]))


def decomp(weights, *factors):
    return RankRDecomposition(np.asarray(weights, float),
                              tuple(np.asarray(f, float) for f in factors))


@st.composite
def normalized_decomps(draw, max_R=3, max_M=3, max_c=4):
    M = draw(st.integers(1, max_M))
    dims = draw(st.lists(st.integers(2, max_c), min_size=M, max_size=M))
    R = draw(st.integers(1, max_R))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(R))
    facs = tuple(rng.dirichlet(np.ones(c), size=R).T for c in dims)
    return RankRDecomposition(w, facs)


class TestShape:
    def test_rejects_binary_less(self):
        with pytest.raises(DimensionError):
            Shape((1, 3))

    def test_rejects_empty(self):
        with pytest.raises(DimensionError):
            Shape(())

    def test_cell_cap(self):
        with pytest.raises(DimensionError):
            Shape((2,) * (int(math.log2(MAX_CELLS)) + 1))

    def test_size(self):
        assert Shape((4, 4, 4, 4)).size == 256
        assert Shape((2, 3)).M == 2


class TestCompose:
    def test_point_mass(self):
        t = compose(decomp([1.0], [[1], [0]], [[0], [1]]))
        expected = np.zeros((2, 2))
        expected[0, 1] = 1.0
        np.testing.assert_array_equal(t.values, expected)

    def test_uniform(self):
        t = compose(decomp([1.0], np.full((3, 1), 1 / 3), np.full((4, 1), 0.25)))
        np.testing.assert_allclose(t.values, 1 / 12, rtol=0, atol=1e-15)

    def test_two_component_diagonal(self):
        t = compose(decomp([0.5, 0.5], [[1, 0], [0, 1]], [[1, 0], [0, 1]]))
        np.testing.assert_allclose(t.values, np.diag([0.5, 0.5]), atol=1e-15)

    def test_factor_mismatch(self):
        with pytest.raises(DimensionError):
            decomp([0.5, 0.5], [[1], [0]])

    def test_unnormalized_is_flagged(self):
        t = compose(decomp([2.0], [[0.5], [0.5]]))
        assert not t.check

    @given(normalized_decomps())
    def test_normalized_gives_valid_tensor(self, d):
        t = compose(d)
        assert t.check
        assert t.values.min() >= 0
        assert abs(t.values.sum() - 1) <= 1e-10


class TestMarginals:
    def test_uniform(self):
        np.testing.assert_allclose(marginals(ProbTensor.from_array(np.full((2, 2), 0.25)), 0),
                                   [0.5, 0.5])

    def test_point_mass(self):
        np.testing.assert_array_equal(marginals(point_mass((2, 2), (0, 1)), 1), [0, 1])

    def test_diag(self):
        np.testing.assert_allclose(marginals(diag(0.3, 0.7), 0), [0.3, 0.7])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            marginals(diag(0.3, 0.7), 2)

    @given(normalized_decomps())
    def test_mixture_of_marginals(self, d):
        t = compose(d)
        for m, f in enumerate(d.factors):
            np.testing.assert_allclose(marginals(t, m), f @ d.weights, rtol=0, atol=1e-12)


class TestRankOne:
    def test_outer_product(self):
        ok, dec = rank_one_check(ProbTensor.from_array(np.outer([0.3, 0.7], [0.6, 0.4])))
        assert ok
        np.testing.assert_allclose(dec.factors[0][:, 0], [0.3, 0.7])

    def test_diagonal_is_not(self):
        t = diag(0.5, 0.5)
        ok, dec = rank_one_check(t)
        assert not ok and dec is None
        # marginals are uniform, so the worst cell is off by 0.25
        assert np.max(np.abs(np.full((2, 2), 0.25) - t.values)) == pytest.approx(0.25)

    def test_point_mass(self):
        assert rank_one_check(point_mass((3, 2, 2), (2, 0, 1)))[0]

    @given(normalized_decomps(max_R=1))
    def test_rank_one_compositions(self, d):
        assert rank_one_check(compose(d), tol=1e-10)[0]


class TestNormalize:
    def test_absorbs_norms(self):
        out = normalize(decomp([2.0], [[0.25], [0.25]], [[0.5], [0.5]]))
        np.testing.assert_allclose(out.weights, [1.0])
        np.testing.assert_allclose(out.factors[0][:, 0], [0.5, 0.5])
        np.testing.assert_allclose(out.factors[1][:, 0], [0.5, 0.5])

    def test_drops_zero_weight(self):
        d = decomp([1.0, 0.0], [[0.5, -7.0], [0.5, 3.0]], [[0.2, 1e6], [0.8, np.pi]])
        out = normalize(d)
        assert out.R == 1
        np.testing.assert_allclose(out.weights, [1.0])

    def test_sign_absorbed(self):
        out = normalize(decomp([-1.0], [[-0.5], [-0.5]], [[0.5], [0.5]]))
        np.testing.assert_allclose(out.weights, [1.0])
        assert np.all(out.factors[0] >= 0)

    def test_rejects_invalid_tensor(self):
        with pytest.raises(InvalidInputError):
            normalize(decomp([3.0], [[0.5], [0.5]]))

    def test_rejects_mixed_sign(self):
        # composes to a valid tensor, but the rank-one terms are signed
        d = decomp([1.0, 1.0], [[1.0, -0.5], [0.0, 0.5]], [[1.0, 1.0], [0.0, 0.0]])
        assert compose(d).check
        with pytest.raises(InvalidInputError):
            normalize(d)

    @given(normalized_decomps())
    def test_idempotent(self, d):
        out = normalize(d)
        np.testing.assert_allclose(out.weights, d.weights, atol=1e-12)
        for a, b in zip(out.factors, d.factors):
            np.testing.assert_allclose(a, b, atol=1e-12)

    @given(normalized_decomps(), st.integers(0, 2**31))
    def test_preserves_composition(self, d, seed):
        rng = np.random.default_rng(seed)
        # rescale factors and compensate in the weights
        scales = [rng.uniform(0.1, 5.0, size=d.R) for _ in d.factors]
        w = d.weights / np.prod(scales, axis=0)
        scaled = RankRDecomposition(w, tuple(f * s for f, s in zip(d.factors, scales)))
        out = normalize(scaled)
        np.testing.assert_allclose(compose(out).values, compose(d).values, atol=1e-12)
        assert abs(out.weights.sum() - 1) <= 1e-12 and np.all(out.weights > 0)
        for f in out.factors:
            np.testing.assert_allclose(f.sum(axis=0), 1.0, atol=1e-12)


class TestRankBound:
    def test_examples(self):
        assert rank_upper_bound((4, 4, 4, 4)) == 64
        assert rank_upper_bound((3, 7)) == 3
        assert rank_upper_bound((2,)) == 1

    @given(st.lists(st.integers(2, 6), min_size=1, max_size=5), st.randoms())
    def test_permutation_invariant(self, dims, rnd):
        perm = dims[:]
        rnd.shuffle(perm)
        assert rank_upper_bound(dims) == rank_upper_bound(Shape(tuple(perm)))


class TestDistances:
    def test_kl_example(self):
        p = ProbTensor.from_array([0.25, 0.75])
        q = ProbTensor.from_array([0.5, 0.5])
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-15)
        assert kl_divergence(p, q) == pytest.approx(0.14384, abs=1e-5)

    def test_kl_zero_cases(self):
        p = point_mass((2, 2), (1, 1))
        assert kl_divergence(p, p) == 0
        t = diag(0.4, 0.6)
        assert kl_divergence(t, t) == 0

    def test_kl_infinite_and_floor(self):
        p = ProbTensor.from_array([1.0, 0.0])
        q = ProbTensor.from_array([0.5, 0.5])
        assert kl_divergence(p, q) == math.inf
        assert math.isfinite(kl_divergence(p, q, floor=1e-12))

    def test_kl_shape_mismatch(self):
        with pytest.raises(DimensionError):
            kl_divergence(ProbTensor.from_array([0.5, 0.5]), ProbTensor.from_array([1 / 3] * 3))

    def test_hellinger_examples(self):
        p = ProbTensor.from_array([0.5, 0.5])
        q = ProbTensor.from_array([0.25, 0.75])
        expected = math.sqrt(0.5 * ((math.sqrt(.5) - .5) ** 2 + (math.sqrt(.5) - math.sqrt(.75)) ** 2))
        assert hellinger(p, q) == pytest.approx(expected, abs=1e-15)
        # evaluating the formula by hand gives 0.18459
        assert hellinger(p, q) == pytest.approx(0.184592, abs=1e-6)
        assert hellinger(p, p) == 0
        assert hellinger(point_mass((2, 2), (0, 0)), point_mass((2, 2), (1, 0))) == pytest.approx(1)

    @given(normalized_decomps(), st.integers(0, 2**31))
    def test_metric_properties(self, d, seed):
        a = compose(d)
        rng = np.random.default_rng(seed)
        b = ProbTensor(a.shape, rng.dirichlet(np.ones(a.shape.size)))
        assert kl_divergence(a, b) >= 0
        assert kl_divergence(a, a) == pytest.approx(0, abs=1e-15)
        h = hellinger(a, b)
        assert 0 <= h <= 1
        assert h == pytest.approx(hellinger(b, a), abs=1e-15)


class TestRecords:
    def test_round_trip(self):
        t = compose(decomp([0.3, 0.7], [[0.2, 0.9], [0.8, 0.1]], [[0.5, 0.1], [0.25, 0.1], [0.25, 0.8]]))
        rec = t.to_record()
        assert rec["dims"] == [2, 3]
        back = ProbTensor.from_record(rec)
        np.testing.assert_array_equal(back.values, t.values)

    def test_row_major(self):
        v = np.arange(6, dtype=float).reshape(2, 3) / 15
        assert ProbTensor.from_array(v).to_record()["values"] == v.ravel().tolist()

    def test_missing_key(self):
        with pytest.raises(InvalidInputError):
            ProbTensor.from_record({"values": [1.0]})

    def test_rejects_bad_values(self):
        with pytest.raises(InvalidInputError):
            ProbTensor.from_array([0.6, 0.6])
        with pytest.raises(InvalidInputError):
            ProbTensor.from_array([1.5, -0.5])
        with pytest.raises(DimensionError):
            ProbTensor(Shape((2, 2)), np.full(3, 1 / 3))
