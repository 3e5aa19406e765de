import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moeut import tensor as T
from moeut.moe_ffn import (ExpertSelection, FfnExpertBank, balancing_loss, expert_scores,
                           ffn_forward, routing_distribution, select_experts)
from moeut.tensor import Tensor

from oracles import dense_moe_ffn, entropy_loss, rel_err, selection_margin, sigmoid, topk_mask


def bank_from(w1, w2, w_s):
    return FfnExpertBank(Tensor(w1), Tensor(w2), Tensor(w_s))


def random_case(seed, dtype=np.float32):
    """Random shapes and weights whose top-k boundary is not a near tie."""
    r = np.random.default_rng(seed)
    t, d = int(r.integers(1, 20)), int(r.integers(2, 40))
    de, ne = int(r.integers(1, 24)), int(r.integers(1, 24))
    k = int(r.integers(1, ne + 1))
    while True:
        bank = FfnExpertBank.init(r, d, de, ne, dtype)
        x = r.standard_normal((t, d)).astype(dtype)
        s = sigmoid(x.astype(np.float64) @ bank.w_s.data.astype(np.float64))
        if selection_margin(s, k) > 1e-5:
            return x, bank, k


def as64(bank):
    return [b.data.astype(np.float64) for b in (bank.w1, bank.w2, bank.w_s)]


class TestScores:
    def test_zero_input(self):
        s = expert_scores(Tensor(np.zeros((1, 3))), Tensor(np.ones((3, 5))))
        assert np.allclose(s.data, 0.5)

    def test_hand_values(self):
        s = expert_scores(Tensor([[1.0]]), Tensor([[1.0, -1.0]]))
        assert np.allclose(s.data, [[0.7311, 0.2689]], atol=1e-4)

    def test_monotone_in_own_logit(self):
        w = np.random.default_rng(0).standard_normal((4, 6))
        x = np.random.default_rng(1).standard_normal((1, 4))
        base = expert_scores(Tensor(x), Tensor(w)).data
        w2 = w.copy()
        w2[:, 3] += x[0] * 0.1  # raises logit 3 only
        bumped = expert_scores(Tensor(x), Tensor(w2)).data
        assert bumped[0, 3] > base[0, 3]
        assert np.array_equal(np.delete(bumped, 3, 1), np.delete(base, 3, 1))


class TestSelect:
    def test_ordering(self):
        sel = select_experts(Tensor([[0.9, 0.1, 0.5]]), 2)
        assert sel.indices.tolist() == [[0, 2]]
        assert np.allclose(sel.scores.data, [[0.9, 0.5]])

    def test_full_selection(self):
        sel = select_experts(Tensor(np.random.default_rng(0).random((3, 5))), 5)
        assert all(sorted(r) == list(range(5)) for r in sel.indices.tolist())

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_sort_oracle(self, seed):
        r = np.random.default_rng(seed)
        s = r.random((6, 12))
        k = int(r.integers(1, 13))
        sel = select_experts(Tensor(s), k)
        mask = np.zeros_like(s, dtype=bool)
        np.put_along_axis(mask, sel.indices, True, axis=-1)
        assert np.array_equal(mask, topk_mask(s, k))

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            select_experts(Tensor(np.zeros((1, 3))), 4)


class TestFfnForward:
    def test_hand_example(self):
        bank = bank_from(np.array([[[1.0], [0.0]], [[0.0], [0.0]]]),
                         np.array([[[1.0, 1.0]], [[0.0, 0.0]]]),
                         np.array([[1.0, -1.0], [0.0, 0.0]]))
        y = ffn_forward(Tensor([[1.0, 0.0]]), bank, 1)
        assert np.allclose(y.data, [[0.7311, 0.7311]], atol=1e-4)

    def test_zero_input(self):
        bank = FfnExpertBank.init(np.random.default_rng(0), 8, 4, 6)
        assert np.array_equal(ffn_forward(Tensor(np.zeros((3, 8), np.float32)), bank, 2).data,
                              np.zeros((3, 8), np.float32))

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_dense_oracle_fp32(self, seed):
        x, bank, k = random_case(seed)
        got = ffn_forward(Tensor(x), bank, k).data
        assert got.dtype == np.float32
        assert rel_err(got, dense_moe_ffn(x, *as64(bank), k)) <= 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_dense_oracle_fp64(self, seed):
        x, bank, k = random_case(seed, np.float64)
        got = ffn_forward(Tensor(x), bank, k).data
        assert rel_err(got, dense_moe_ffn(x, *as64(bank), k)) <= 1e-12

    def test_separate_selector_input(self):
        x, bank, k = random_case(3, np.float64)
        sel_in = np.random.default_rng(9).standard_normal(x.shape)
        got = ffn_forward(Tensor(x), bank, k, selector_input=Tensor(sel_in)).data
        assert rel_err(got, dense_moe_ffn(x, *as64(bank), k, sel_in=sel_in)) <= 1e-12

    def test_batched_input(self):
        x, bank, k = random_case(5, np.float64)
        xb = np.stack([x, x[::-1]])
        got = ffn_forward(Tensor(xb), bank, k).data
        assert got.shape == xb.shape
        assert rel_err(got, dense_moe_ffn(xb, *as64(bank), k)) <= 1e-12

    def test_touches_only_selected_experts(self):
        x, bank, k = random_case(11, np.float64)
        for t in (bank.w1, bank.w2, bank.w_s):
            t.requires_grad = True
        with T.Graph() as g:
            y, sel, _ = ffn_forward(Tensor(x), bank, k, return_selection=True)
            loss = y.sum()
        g.backward(loss)
        unused = sorted(set(range(bank.n_experts)) - set(sel.indices.ravel().tolist()))
        assert np.all(bank.w1.grad[unused] == 0) and np.all(bank.w2.grad[unused] == 0)

    def test_gate_homogeneity(self):
        # rescaling the selector columns without changing the selected set changes
        # each expert's contribution only through its gate value
        r = np.random.default_rng(4)
        d, de, ne = 6, 3, 4
        w1, w2 = r.standard_normal((ne, d, de)), r.standard_normal((ne, de, d))
        x = r.standard_normal((1, d))
        w_s = r.standard_normal((d, ne))
        y1, sel1, _ = ffn_forward(Tensor(x), bank_from(w1, w2, w_s), 1, return_selection=True)
        e = int(sel1.indices[0, 0])
        w_s2 = w_s.copy()
        w_s2[:, e] *= 1.5
        y2, sel2, _ = ffn_forward(Tensor(x), bank_from(w1, w2, w_s2), 1, return_selection=True)
        assert sel2.indices[0, 0] == e
        ratio = sel2.scores.data[0, 0] / sel1.scores.data[0, 0]
        assert np.allclose(y2.data, y1.data * ratio)

    def test_shape_errors(self):
        bank = FfnExpertBank.init(np.random.default_rng(0), 8, 4, 6)
        with pytest.raises(T.ShapeError):
            ffn_forward(Tensor(np.zeros((2, 7))), bank, 1)
        with pytest.raises(T.ShapeError):
            FfnExpertBank(bank.w1, bank.w1, bank.w_s)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_raises_numeric_error(self):
        bank = FfnExpertBank.init(np.random.default_rng(0), 4, 2, 3, np.float64)
        bank.w2.data[:] = np.inf
        with pytest.raises(T.NumericError):
            ffn_forward(Tensor(np.ones((2, 4))), bank, 3)


class TestBalancingLoss:
    def test_uniform(self):
        for n in (1, 2, 7, 64):
            assert math.isclose(float(balancing_loss(Tensor(np.zeros((5, n)))).data), -math.log(n),
                                abs_tol=1e-12)

    def test_one_hot_limit(self):
        z = np.full((3, 4), -60.0)
        z[:, 2] = 60.0
        v = float(balancing_loss(Tensor(z)).data)
        assert -1e-12 < v <= 0.0

    def test_two_token_split(self):
        z = np.full((2, 4), -80.0)
        z[0, 0] = z[1, 1] = 80.0
        assert math.isclose(float(balancing_loss(Tensor(z)).data), -0.6931, abs_tol=1e-4)

    def test_from_inputs_and_selector(self):
        r = np.random.default_rng(0)
        x, w = r.standard_normal((5, 3)), r.standard_normal((3, 6))
        assert math.isclose(float(balancing_loss(Tensor(x), Tensor(w)).data), entropy_loss(x @ w),
                            rel_tol=1e-12)

    def test_batch_averages_sequences(self):
        r = np.random.default_rng(1)
        z = r.standard_normal((3, 7, 5))
        per_seq = [entropy_loss(z[b]) for b in range(3)]
        assert math.isclose(float(balancing_loss(Tensor(z)).data), np.mean(per_seq), rel_tol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 16), st.floats(0.01, 50.0), st.integers(0, 2**32 - 1))
    def test_bounds(self, t, n, scale, seed):
        z = np.random.default_rng(seed).standard_normal((t, n)) * scale
        v = float(balancing_loss(Tensor(z)).data)
        assert -math.log(n) - 1e-12 <= v <= 1e-12
        assert math.isclose(v, entropy_loss(z), rel_tol=1e-9, abs_tol=1e-12)

    def test_routing_distribution(self):
        z = np.zeros((4, 5))
        assert np.allclose(routing_distribution(z), 0.2)


def test_selection_dataclass():
    sel = ExpertSelection(np.zeros((3, 2), int), Tensor(np.zeros((3, 2))))
    assert sel.k == 2
