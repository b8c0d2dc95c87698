"""Tests for the assembled model: variants, parameter groups, equivalences."""

import numpy as np
import pytest

from segqa.config import ModelConfig
from segqa.features import QUESTION, VIDEO, FeatureSequence, QASample
from segqa.model import SegQAModel, make_batch
from segqa.proposals import Proposal

from test_encoder import tiny_cfg


def sample_for(cfg, rng, video_len=8, with_candidates=False):
    cands = None
    if with_candidates:
        cands = [
            FeatureSequence(rng.normal(size=(2, cfg.d_question)), QUESTION)
            for _ in range(cfg.n_answers)
        ]
    return QASample(
        video=FeatureSequence(rng.normal(size=(video_len, cfg.d_video)), VIDEO),
        question=FeatureSequence(rng.normal(size=(3, cfg.d_question)), QUESTION),
        answer_index=1,
        candidates=cands,
        gt_segment=Proposal(0, video_len // 2),
    )


class TestAssembly:
    def test_variant_structure(self):
        cfg = tiny_cfg()
        r = np.random.default_rng(60)
        assert SegQAModel(cfg, r, "full").locator is not None
        assert SegQAModel(cfg, r, "no_LQL").locator is not None
        assert SegQAModel(cfg, r, "no_QL").locator is None
        soft = SegQAModel(cfg, r, "soft_QL")
        assert soft.locator is None and soft.soft is not None
        with pytest.raises(ValueError, match="variant"):
            SegQAModel(cfg, r, "bogus")

    def test_proposal_count_follows_scales(self):
        cfg = tiny_cfg(anchor_scales=(1, 2, 3, 4, 5))
        model = SegQAModel(cfg, np.random.default_rng(0))
        assert model.n_proposals == 15
        assert model.locator.n_proposals == 15

    def test_parameter_groups_partition(self):
        model = SegQAModel(tiny_cfg(), np.random.default_rng(61), "full")
        groups = model.parameter_groups()
        all_names = {name for name, _ in model.named_parameters()}
        assert set(groups["ql"]) | set(groups["rest"]) == all_names
        assert not set(groups["ql"]) & set(groups["rest"])
        # the question locator = cross-modal encoder + proposal-scoring head
        assert all(n.startswith(("cross.", "locator.")) for n in groups["ql"])
        assert any(n.startswith("locator.fuse") for n in groups["ql"])
        assert any(n.startswith("encoder.") for n in groups["rest"])
        assert any(n.startswith("answerer.") for n in groups["rest"])

    def test_checksums_track_changes(self):
        model = SegQAModel(tiny_cfg(), np.random.default_rng(62), "full")
        before = model.group_checksums()
        assert before == model.group_checksums()
        first = next(iter(model.parameter_groups()["ql"].values()))
        first.data += 1.0
        after = model.group_checksums()
        assert after["ql"] != before["ql"]
        assert after["rest"] == before["rest"]

    def test_state_dict_round_trip(self):
        cfg = tiny_cfg()
        a = SegQAModel(cfg, np.random.default_rng(63), "full")
        b = SegQAModel(cfg, np.random.default_rng(64), "full")
        b.load_state_dict(a.state_dict())
        assert a.group_checksums() == b.group_checksums()

    def test_state_dict_mismatch_rejected(self):
        a = SegQAModel(tiny_cfg(), np.random.default_rng(65), "full")
        b = SegQAModel(tiny_cfg(), np.random.default_rng(66), "no_QL")
        with pytest.raises(ValueError, match="parameter mismatch"):
            b.load_state_dict(a.state_dict())


class TestForward:
    def test_whole_video_selection_equals_no_ql_variant(self):
        """Forcing the locator onto proposal [0, L) reproduces the no_QL
        forward bit for bit, given identical shared parameters."""
        cfg = tiny_cfg()
        rng = np.random.default_rng(67)
        full = SegQAModel(cfg, rng, "full")
        plain = SegQAModel(cfg, np.random.default_rng(68), "no_QL")
        shared = {
            k: v for k, v in full.state_dict().items() if not k.startswith("locator.")
        }
        plain.load_state_dict(shared)
        # proposal 0 is [0, L) under the default scale ordering; pin the argmax there
        full.locator.fuse.gate.data[:] = 0.0
        full.locator.fuse.bias.data[:] = 0.0
        full.locator.fuse.bias.data[0] = 100.0

        data_rng = np.random.default_rng(69)
        sample = sample_for(cfg, data_rng)
        pf = full.predict(sample)
        pn = plain.predict(sample)
        assert pf.segment == Proposal(0, sample.video.length)
        assert np.array_equal(pf.answer.scores, pn.answer.scores)
        assert pf.answer.predicted == pn.answer.predicted

    def test_predict_deterministic(self):
        cfg = tiny_cfg(dropout_rate=0.4, use_position_embedding=True)
        model = SegQAModel(cfg, np.random.default_rng(70), "full")
        sample = sample_for(cfg, np.random.default_rng(71))
        a = model.predict(sample)
        b = model.predict(sample)
        assert np.array_equal(a.answer.scores, b.answer.scores)
        assert np.array_equal(a.locator.scores, b.locator.scores)
        assert a.segment == b.segment

    def test_soft_variant_has_no_segment(self):
        cfg = tiny_cfg()
        model = SegQAModel(cfg, np.random.default_rng(72), "soft_QL")
        pred = model.predict(sample_for(cfg, np.random.default_rng(73)))
        assert pred.segment is None and pred.locator is None
        assert pred.answer.scores.shape == (cfg.n_answers,)

    def test_multiple_choice_forward(self):
        cfg = tiny_cfg(answer_mode="multiple_choice")
        model = SegQAModel(cfg, np.random.default_rng(74), "full")
        sample = sample_for(cfg, np.random.default_rng(75), with_candidates=True)
        pred = model.predict(sample)
        assert pred.answer.scores.shape == (cfg.n_answers,)

    def test_multiple_choice_requires_candidates(self):
        cfg = tiny_cfg(answer_mode="multiple_choice")
        model = SegQAModel(cfg, np.random.default_rng(76), "full")
        sample = sample_for(cfg, np.random.default_rng(77), with_candidates=False)
        with pytest.raises(ValueError, match="candidate"):
            model.predict(sample)

    def test_batch_shape_mixing_rejected(self):
        cfg = tiny_cfg()
        r = np.random.default_rng(78)
        with pytest.raises(ValueError, match="share shapes"):
            make_batch([sample_for(cfg, r, video_len=8), sample_for(cfg, r, video_len=9)])

    def test_batched_matches_single(self):
        cfg = tiny_cfg()
        model = SegQAModel(cfg, np.random.default_rng(79), "full")
        r = np.random.default_rng(80)
        samples = [sample_for(cfg, r) for _ in range(5)]
        batch_preds = model.predict_batch(make_batch(samples))
        for s, bp in zip(samples, batch_preds):
            sp = model.predict(s)
            np.testing.assert_allclose(bp.answer.scores, sp.answer.scores, atol=1e-12)
            assert bp.segment == sp.segment
