"""Tests for segment slicing, answer scoring, and the answer loss."""

import numpy as np
import pytest

from segqa import autodiff as ad
from segqa.answerer import (
    AnswerPredictor,
    answer_loss,
    masked_segment_pool,
    segment_mask,
    slice_segment,
)
from segqa.features import QUESTION, VIDEO, FeatureSequence
from segqa.proposals import Proposal, generate_proposals

from test_encoder import tiny_cfg


def seq(r, length, dim=8, modality=VIDEO):
    return FeatureSequence(r.normal(size=(length, dim)), modality)


class TestSliceSegment:
    def test_whole_video(self):
        r = np.random.default_rng(40)
        v = seq(r, 10)
        out = slice_segment(v, Proposal(0, 10))
        np.testing.assert_array_equal(out.tokens, v.tokens)

    def test_single_frame(self):
        r = np.random.default_rng(41)
        v = seq(r, 10)
        out = slice_segment(v, Proposal(3, 4))
        assert out.length == 1
        np.testing.assert_array_equal(out.tokens[0], v.tokens[3])

    def test_middle_rows(self):
        r = np.random.default_rng(42)
        v = seq(r, 16)
        out = slice_segment(v, Proposal(5, 11))
        assert out.length == 6
        for i, row in enumerate(range(5, 11)):
            np.testing.assert_array_equal(out.tokens[i], v.tokens[row])

    def test_out_of_range_rejected(self):
        r = np.random.default_rng(43)
        with pytest.raises(ValueError, match="out of range"):
            slice_segment(seq(r, 8), Proposal(4, 9))


class TestMaskedPooling:
    def test_equals_slice_then_pool_for_all_proposals(self):
        """Masked max over the full sequence == max over the hard slice."""
        r = np.random.default_rng(44)
        for length in (1, 5, 17, 32):
            scales = tuple(m for m in (1, 2, 3, 4, 5) if m <= length)
            pset = generate_proposals(length, scales)
            v = r.normal(size=(2, length, 6))
            mask = segment_mask(length, pset)
            pooled = masked_segment_pool(ad.Tensor(v), mask)
            assert pooled.shape == (2, len(pset), 6)
            for i, p in enumerate(pset):
                expected = v[:, p.st : p.ed].max(axis=1)
                np.testing.assert_array_equal(pooled.data[:, i], expected)

    def test_single_mask_shape(self):
        r = np.random.default_rng(45)
        v = r.normal(size=(3, 7, 4))
        mask = segment_mask(7, [Proposal(2, 5)])[0]
        pooled = masked_segment_pool(ad.Tensor(v), mask)
        np.testing.assert_array_equal(pooled.data, v[:, 2:5].max(axis=1))


class TestScoreAnswers:
    def test_single_candidate_always_predicts_zero(self):
        r = np.random.default_rng(46)
        ap = AnswerPredictor(tiny_cfg(n_answers=1), r)
        out = ap.score_answers(seq(r, 3, modality=QUESTION), seq(r, 4))
        assert out.scores.shape == (1,)
        assert out.predicted == 0

    def test_identical_choices_tie_to_zero(self):
        r = np.random.default_rng(47)
        ap = AnswerPredictor(tiny_cfg(answer_mode="multiple_choice", n_answers=4), r)
        cand = seq(r, 2, modality=QUESTION)
        cands = [FeatureSequence(cand.tokens.copy(), QUESTION) for _ in range(4)]
        out = ap.score_answers(seq(r, 3, modality=QUESTION), seq(r, 5), cands)
        assert np.all(out.scores == out.scores[0])
        assert out.predicted == 0

    def test_closed_set_matches_pool_fuse_oracle(self):
        r = np.random.default_rng(48)
        ap = AnswerPredictor(tiny_cfg(n_answers=3), r)
        q, v = seq(r, 3, modality=QUESTION), seq(r, 6)
        out = ap.score_answers(q, v)
        expected = ap.fuse(
            ad.Tensor(q.tokens.max(axis=0)), ad.Tensor(v.tokens.max(axis=0))
        )
        np.testing.assert_allclose(out.scores, expected.data, atol=1e-6)

    def test_choice_scores_match_per_candidate_oracle(self):
        """Batched multiple-choice logits equal the candidate-by-candidate fuse."""
        r = np.random.default_rng(49)
        ap = AnswerPredictor(tiny_cfg(answer_mode="multiple_choice", n_answers=3), r)
        q, v = seq(r, 3, modality=QUESTION), seq(r, 5)
        cands = [seq(r, 2, modality=QUESTION) for _ in range(3)]
        out = ap.score_answers(q, v, cands)
        pooled_q = q.tokens.max(axis=0)
        pooled_v = v.tokens.max(axis=0)
        for i, c in enumerate(cands):
            combined = pooled_q * c.tokens.max(axis=0)
            expected = ap.fuse(ad.Tensor(combined), ad.Tensor(pooled_v))
            np.testing.assert_allclose(out.scores[i], expected.data[0], atol=1e-9)

    def test_proposal_batched_choice_scores(self):
        """(B, N, K) scoring equals scoring each proposal separately."""
        r = np.random.default_rng(50)
        ap = AnswerPredictor(tiny_cfg(answer_mode="multiple_choice", n_answers=4), r)
        b, n, k, d = 2, 3, 4, 8
        pooled_q = ad.Tensor(r.normal(size=(b, d)))
        pooled_cands = ad.Tensor(r.normal(size=(b, k, d)))
        segs = ad.Tensor(r.normal(size=(b, n, d)))
        all_scores = ap.choice_scores(pooled_q, pooled_cands, segs)
        assert all_scores.shape == (b, n, k)
        for i in range(n):
            one = ap.choice_scores(pooled_q, pooled_cands, ad.Tensor(segs.data[:, i]))
            np.testing.assert_allclose(all_scores.data[:, i], one.data, atol=1e-12)

    def test_proposal_batched_closed_scores(self):
        r = np.random.default_rng(51)
        ap = AnswerPredictor(tiny_cfg(n_answers=3), r)
        b, n, d = 2, 4, 8
        pooled_q = ad.Tensor(r.normal(size=(b, d)))
        segs = ad.Tensor(r.normal(size=(b, n, d)))
        all_scores = ap.closed_scores(pooled_q, segs)
        assert all_scores.shape == (b, n, 3)
        for i in range(n):
            one = ap.closed_scores(pooled_q, ad.Tensor(segs.data[:, i]))
            np.testing.assert_allclose(all_scores.data[:, i], one.data, atol=1e-12)


class TestAnswerLoss:
    def test_uniform_logits(self):
        assert answer_loss(np.zeros(5), 2) == pytest.approx(np.log(5), rel=1e-12)

    def test_confident_correct_goes_to_zero(self):
        scores = np.array([50.0, 0.0, 0.0])
        assert answer_loss(scores, 0) < 1e-20

    def test_known_value(self):
        assert answer_loss(np.array([2.0, 0.0, 0.0]), 0) == pytest.approx(
            np.log(np.exp(2.0) + 2.0) - 2.0, rel=1e-12
        )

    def test_nonnegative_and_ln_k_for_uniform(self):
        r = np.random.default_rng(52)
        for _ in range(50):
            k = int(r.integers(2, 12))
            scores = r.normal(size=k) * 3
            idx = int(r.integers(k))
            assert answer_loss(scores, idx) >= 0.0
            assert answer_loss(np.full(k, r.normal()), idx) == pytest.approx(np.log(k))

    def test_bad_index_rejected(self):
        with pytest.raises(ValueError):
            answer_loss(np.zeros(3), 3)
