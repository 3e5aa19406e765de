import csv

import numpy as np
import pytest

from moeut.analysis import (SelectionTrace, column_selection_iou, expert_layer_histogram,
                            expert_order, layer_position_score, layer_position_scores,
                            residual_update_norms, token_expert_diversity, token_frequencies,
                            token_layer_specialization, write_metrics, write_residual_norms)
from moeut.config import ModelConfig
from moeut.model import MoEUT

from oracles import (brute_diversity, brute_frequencies, brute_histogram, brute_iou,
                     brute_position_score, brute_specialization, synthetic_records)

N_E, K = 16, 3


@pytest.fixture(scope="module")
def records():
    recs = synthetic_records(0, n_experts=N_E, k=K)
    assert len(recs) == 10_000
    return recs


@pytest.fixture(scope="module")
def trace(records):
    return SelectionTrace.from_records(records)


def rec(step, pos, tok, experts, seq=0):
    return {"seq": seq, "layer_step": step, "member": 0, "position": pos, "token_id": tok,
            "experts": experts}


class TestHistogram:
    def test_single_token(self):
        hist = expert_layer_histogram(SelectionTrace.from_records([rec(0, 0, 5, [3, 7])]), 8)
        want = np.zeros((8, 1), int)
        want[[3, 7], 0] = 1
        assert np.array_equal(hist.counts, want)

    def test_empty(self):
        with pytest.raises(ValueError):
            expert_layer_histogram(SelectionTrace(2))

    def test_matches_tally(self, trace, records):
        hist = expert_layer_histogram(trace, N_E)
        counts, steps = brute_histogram(records, N_E)
        assert hist.layer_steps.tolist() == steps
        for (e, s), c in counts.items():
            assert hist.column(s)[e] == c

    def test_column_conservation(self, trace):
        hist = expert_layer_histogram(trace, N_E)
        assert np.all(hist.counts.sum(axis=0) == 25 * 100 * K)


class TestPositionScore:
    def hist(self, pairs):
        # pairs: (layer_step, count) for expert 0
        recs = [rec(s, i, 0, [0]) for s, c in pairs for i in range(c)]
        recs.append(rec(99, 0, 0, [1]))
        return expert_layer_histogram(SelectionTrace.from_records(recs), 3)

    def test_single_step(self):
        assert layer_position_score(self.hist([(5, 4)]), 0) == 5.0

    def test_midpoint(self):
        assert layer_position_score(self.hist([(0, 2), (8, 2)]), 0) == 4.0

    def test_weighted(self):
        assert layer_position_score(self.hist([(2, 1), (6, 3)]), 0) == 5.0

    def test_never_active(self):
        h = self.hist([(2, 1)])
        assert layer_position_score(h, 2) is None
        assert np.isnan(layer_position_scores(h)[2])
        assert expert_order(h)[-1] == 2

    def test_matches_oracle(self, trace, records):
        hist = expert_layer_histogram(trace, N_E)
        for e in range(N_E):
            assert layer_position_score(hist, e) == pytest.approx(brute_position_score(records, e),
                                                                 rel=1e-12)

    def test_order_ties_by_id(self):
        recs = [rec(3, 0, 0, [2]), rec(3, 1, 0, [0]), rec(1, 2, 0, [1])]
        assert expert_order(expert_layer_histogram(SelectionTrace.from_records(recs), 3)).tolist() \
            == [1, 0, 2]


class TestDiversity:
    def test_identical_routing(self):
        recs = [rec(0, p, 9, [1, 4], seq=s) for s in range(3) for p in range(2)]
        assert token_expert_diversity(SelectionTrace.from_records(recs), 0) == {9: 2}

    def test_disjoint(self):
        recs = [rec(0, 0, 9, [1, 4]), rec(0, 1, 9, [2, 5])]
        assert token_expert_diversity(SelectionTrace.from_records(recs), 0) == {9: 4}

    def test_matches_oracle(self, trace, records):
        for s in (0, 2, 4, 6):
            got = token_expert_diversity(trace, s)
            assert got == brute_diversity(records, s)
            assert min(got.values()) >= K

    def test_token_cap(self, trace, records):
        top = [t for t, _ in brute_frequencies(records)[:5]]
        assert sorted(token_expert_diversity(trace, 0, token_cap=5)) == sorted(top)


class TestIou:
    def test_identical_and_disjoint(self):
        recs = [rec(0, 0, 1, [0, 1]), rec(1, 0, 1, [0, 1]), rec(2, 0, 1, [2, 3])]
        iou, _ = column_selection_iou(SelectionTrace.from_records(recs), 4)
        assert iou[0, 1] == 1.0 and iou[0, 2] == 0.0

    def test_partial_overlap(self):
        a = list(range(16))
        b = list(range(8, 24))
        recs = [rec(0, 0, 1, a), rec(1, 0, 1, b)]
        iou, _ = column_selection_iou(SelectionTrace.from_records(recs), 24)
        assert iou[0, 1] == pytest.approx(1 / 3)

    def test_matches_oracle(self, trace, records):
        iou, steps = column_selection_iou(trace, N_E, chunk=37)
        want, wsteps = brute_iou(records)
        assert steps.tolist() == wsteps
        assert np.allclose(iou, want, rtol=0, atol=1e-12)
        assert np.array_equal(iou, iou.T)
        assert np.all(np.diag(iou) == 1.0)
        assert np.all((iou >= 0) & (iou <= 1))

    def test_chunking_invariant(self, trace):
        a, _ = column_selection_iou(trace, N_E, chunk=7)
        b, _ = column_selection_iou(trace, N_E, chunk=100_000)
        assert np.allclose(a, b, rtol=0, atol=1e-12)


class TestSpecialization:
    def test_identical_everywhere(self):
        recs = [rec(s, 0, 4, [1, 2]) for s in range(3)]
        (ts,) = token_layer_specialization(SelectionTrace.from_records(recs))
        assert ts.proportions == {0: 1.0, 1: 1.0, 2: 1.0}

    def test_disjoint_partition(self):
        recs = [rec(s, 0, 4, [2 * s, 2 * s + 1]) for s in range(4)]
        (ts,) = token_layer_specialization(SelectionTrace.from_records(recs))
        assert all(v == 0.25 for v in ts.proportions.values())

    def test_matches_oracle(self, trace, records):
        got = token_layer_specialization(trace)
        freqs = brute_frequencies(records)
        assert [(g.token_id, g.frequency) for g in got] == freqs
        want = brute_specialization(records)
        for g in got:
            assert g.proportions == pytest.approx(want[g.token_id], abs=1e-15)
            assert sum(g.proportions.values()) >= 1.0 - 1e-12
            assert max(g.proportions.values()) <= 1.0

    def test_frequencies(self, trace, records):
        assert token_frequencies(trace) == brute_frequencies(records)


class TestTraceIO:
    def test_jsonl_round_trip(self, trace, tmp_path):
        path = tmp_path / "trace.jsonl"
        trace.to_jsonl(path)
        back = SelectionTrace.from_jsonl(path)
        for f in ("seq", "layer_step", "member", "position", "token_id", "experts"):
            assert np.array_equal(getattr(back, f), getattr(trace, f))

    def test_experts_sorted(self):
        t = SelectionTrace.from_records([rec(0, 0, 1, [5, 2, 9])])
        assert t.experts.tolist() == [[2, 5, 9]]

    def test_inconsistent_k(self):
        with pytest.raises(ValueError):
            SelectionTrace.from_records([rec(0, 0, 1, [1, 2]), rec(0, 1, 1, [3])])

    def test_model_trace_first_member(self):
        cfg = ModelConfig(d_model=16, n_layers=4, group_size=2, n_heads=1, d_head=8, n_att_experts=2,
                          att_k=1, d_expert=8, n_experts=6, expert_k=2, vocab_size=32, context_length=8)
        model = MoEUT(cfg, 0)
        tokens = np.arange(10).reshape(2, 5)
        tr = model.forward(tokens, trace=True).trace
        assert len(tr) == 2 * 5 * 2
        assert tr.layer_steps.tolist() == [0, 2]
        assert set(tr.member.tolist()) == {0}
        everyone = model.forward(tokens, trace=True, trace_members=(0, 1)).trace
        assert everyone.layer_steps.tolist() == [0, 1, 2, 3]
        assert token_expert_diversity(everyone, 1) and \
            min(token_expert_diversity(everyone, 1).values()) >= 2


class TestResidualNorms:
    cfg = ModelConfig(d_model=16, n_layers=4, group_size=4, n_heads=1, d_head=8, n_att_experts=2,
                      att_k=1, d_expert=8, n_experts=6, expert_k=2, vocab_size=32, context_length=8,
                      dtype="float64")

    def test_zero_block(self):
        model = MoEUT(self.cfg, 0)
        model.members[2].attn.w_o.data[:] = 0
        model.members[2].ffn.w2.data[:] = 0
        norms = residual_update_norms(model, np.arange(8))
        assert norms[2] == 0.0 and np.all(norms[[0, 1, 3]] > 0)

    def test_homogeneous_in_last_block_output(self):
        # only the last block: earlier blocks are unchanged and peri-norm routing
        # of the last block does not see its own output weights
        model = MoEUT(self.cfg, 0)
        model.members[3].ffn.w2.data[:] = 0
        a = residual_update_norms(model, np.arange(8))
        model.members[3].attn.w_o.data *= 3.0
        b = residual_update_norms(model, np.arange(8))
        assert b[3] == pytest.approx(3.0 * a[3], rel=1e-12)

    def test_pre_norm_finite_positive(self):
        model = MoEUT(self.cfg.with_(norm_scheme="pre"), 1)
        norms = residual_update_norms(model, np.arange(8))
        assert np.all(np.isfinite(norms)) and np.all(norms > 0)

    def test_csv(self, tmp_path):
        p = write_residual_norms([0.5, 1.25], tmp_path / "r.csv")
        assert p.read_text().splitlines() == ["layer,mean_update_norm", "0,0.5", "1,1.25"]


def test_write_metrics_headers(trace, tmp_path):
    paths = write_metrics(trace, tmp_path, n_experts=N_E)
    headers = {p.name: next(csv.reader(open(p))) for p in paths}
    assert headers == {
        "expert_layer_histogram.csv": ["expert", "layer_step", "count"],
        "layer_position_score.csv": ["rank", "expert", "score"],
        "token_expert_diversity.csv": ["layer_step", "token_id", "unique_experts"],
        "column_iou.csv": ["layer_step_a", "layer_step_b", "iou"],
        "token_layer_specialization.csv": ["rank", "token_id", "frequency", "layer_step", "proportion"],
    }
    rows = list(csv.reader(open(tmp_path / "expert_layer_histogram.csv")))[1:]
    assert len(rows) == N_E * 4
