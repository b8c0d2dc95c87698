"""Tests for pseudo labels, losses, alternating epochs, and the train loop."""

import types

import numpy as np
import pytest

from segqa import autodiff as ad
from segqa.answerer import answer_loss, slice_segment
from segqa.config import TrainSchedule
from segqa.features import QUESTION, VIDEO, FeatureSequence, QASample
from segqa.model import SegQAModel, make_batch
from segqa.proposals import Proposal, ProposalSet, generate_proposals
from segqa.synth import SynthConfig, generate_synthetic_dataset
from segqa.training import (
    Adam,
    ConfigurationError,
    PseudoLabel,
    TrainingDiverged,
    answer_only_epoch,
    bundled_loss,
    da_epoch,
    evaluate,
    generate_pseudo_label,
    load_checkpoint,
    locator_loss,
    make_batches,
    pseudo_labels_batch,
    save_checkpoint,
    train_loop,
)

from test_encoder import tiny_cfg
from test_model import sample_for


def tiny_dataset(n_train=48, n_val=24, seed=3):
    cfg = SynthConfig(
        n_train=n_train, n_val=n_val, video_len=8, n_segments=4,
        d_video=20, d_question=6, n_answers=3, cue_vocab=5, seed=seed,
    )
    return cfg, generate_synthetic_dataset(cfg)


def tiny_model(scfg, variant="full", seed=0, **kw):
    kw.setdefault("anchor_scales", (1, 2, 4))
    mcfg = tiny_cfg(
        d_video=scfg.d_video, d_question=scfg.d_question,
        n_answers=scfg.n_answers, **kw,
    )
    return SegQAModel(mcfg, np.random.default_rng(seed), variant)


def exhaustive_pseudo_oracle(model, sample):
    """Independent reference: slice every proposal, score it, take the argmax
    correct-answer probability (first index wins ties)."""
    q_cross, v_cross = model.cross.cross_encode(
        *model.encoder.self_encode(
            model.encoder.project(sample.question), model.encoder.project(sample.video)
        )
    )
    best_idx, best_prob = 0, -1.0
    for i, prop in enumerate(model.proposals_for(sample.video.length)):
        seg = slice_segment(v_cross, prop)
        out = model.answerer.score_answers(q_cross, seg)
        e = np.exp(out.scores - out.scores.max())
        prob = (e / e.sum())[sample.answer_index]
        if prob > best_prob:
            best_idx, best_prob = i, prob
    return best_idx, best_prob


class TestPseudoLabels:
    def test_matches_exhaustive_oracle(self):
        scfg, ds = tiny_dataset()
        for seed in range(8):
            model = tiny_model(scfg, seed=seed)
            for sample in ds.samples["train"][:4]:
                label = generate_pseudo_label(model, sample)
                idx, prob = exhaustive_pseudo_oracle(model, sample)
                assert label.proposal_index == idx
                assert label.confidence == pytest.approx(prob, abs=1e-9)

    def test_single_proposal_is_index_zero(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg, anchor_scales=(1,))
        label = generate_pseudo_label(model, ds.samples["train"][0])
        assert label.proposal_index == 0

    def test_all_equal_probabilities_tie_to_zero(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        # zero the answer head: every proposal yields the same logits
        model.answerer.fuse.gate.data[:] = 0.0
        label = generate_pseudo_label(model, ds.samples["train"][0])
        assert label.proposal_index == 0

    def test_rigged_probabilities_pick_the_peak(self):
        """A model whose correct-answer probabilities across 3 proposals are
        [0.2, 0.9, 0.1] must label proposal 1."""
        probs = np.array([[0.2, 0.8], [0.9, 0.1], [0.1, 0.9]])  # (N, K), answer 0
        pset = ProposalSet(
            (Proposal(0, 4), Proposal(0, 2), Proposal(2, 4)), 4, (1, 2)
        )
        rigged = types.SimpleNamespace(
            proposals_for=lambda length: pset,
            answer_scores=lambda encoded, pooled: ad.Tensor(
                np.log(probs)[None]  # (1, N, K); softmax recovers the rows
            ),
        )
        encoded = types.SimpleNamespace(v_cross=ad.Tensor(np.zeros((1, 4, 2))))
        batch = types.SimpleNamespace(answers=np.array([0]), size=1, video_len=4)
        idx, conf = pseudo_labels_batch(rigged, encoded, batch)
        assert idx[0] == 1
        assert conf[0] == pytest.approx(0.9)

    def test_generation_leaves_no_gradients(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        generate_pseudo_label(model, ds.samples["train"][0])
        assert all(p.grad is None for p in model.parameters())


class TestLosses:
    def test_locator_loss_uniform(self):
        assert locator_loss(np.zeros(15), PseudoLabel(3, 1.0)) == pytest.approx(np.log(15))

    def test_locator_loss_known_value(self):
        assert locator_loss(np.array([1.0, 0.0]), 1) == pytest.approx(np.log(1 + np.e))

    def test_locator_loss_aligned_logit_vanishes(self):
        scores = np.zeros(5)
        scores[2] = 60.0
        assert locator_loss(scores, 2) < 1e-20

    def test_bundled_loss_scalar(self):
        assert bundled_loss(1.0, 2.0, 0.05) == pytest.approx(1.1)
        assert bundled_loss(1.3, 99.0, 0.0) == pytest.approx(1.3)

    def test_bundled_gradient_linearity(self):
        """grad(L_AP + w*L_QL) = grad(L_AP) + w*grad(L_QL) on shared params."""
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        batch = make_batch(ds.samples["train"][:6])
        w = 0.37

        def grads_of(which):
            for p in model.parameters():
                p.grad = None
            encoded = model.encode(batch, training=False)
            ql_scores = model.locator_scores(encoded)
            pooled, _ = model.pooled_segment(encoded, batch, ql_scores)
            ap_scores = model.answer_scores(encoded, pooled)
            loss_ap = ad.cross_entropy(ap_scores, batch.answers)
            pseudo, _ = pseudo_labels_batch(model, encoded, batch)
            loss_ql = ad.cross_entropy(ql_scores, pseudo)
            loss = {"ap": loss_ap, "ql": loss_ql,
                    "both": bundled_loss(loss_ap, loss_ql, w)}[which]
            loss.backward()
            return {
                n: (p.grad.copy() if p.grad is not None else None)
                for n, p in model.named_parameters()
            }

        g_ap, g_ql, g_both = grads_of("ap"), grads_of("ql"), grads_of("both")
        for name in g_both:
            a = g_ap[name] if g_ap[name] is not None else 0.0
            b = g_ql[name] if g_ql[name] is not None else 0.0
            expected = a + w * b
            if np.isscalar(expected) and expected == 0.0:
                assert g_both[name] is None or np.allclose(g_both[name], 0.0)
            else:
                np.testing.assert_allclose(g_both[name], expected, atol=1e-6, err_msg=name)


class TestAdam:
    def test_skips_parameters_without_grad(self):
        p = ad.parameter(np.ones(3))
        q = ad.parameter(np.ones(3))
        opt = Adam({"p": p, "q": q}, lr=0.1)
        p.grad = np.ones(3)
        opt.step()
        assert not np.array_equal(p.data, np.ones(3))
        np.testing.assert_array_equal(q.data, np.ones(3))
        assert opt.state["q"]["t"] == 0

    def test_group_filter(self):
        p = ad.parameter(np.ones(3))
        q = ad.parameter(np.ones(3))
        opt = Adam({"p": p, "q": q}, lr=0.1)
        p.grad = np.ones(3)
        q.grad = np.ones(3)
        opt.step(only={"p"})
        np.testing.assert_array_equal(q.data, np.ones(3))

    def test_matches_reference_formula(self):
        p = ad.parameter(np.array([1.0, -2.0]))
        opt = Adam({"p": p}, lr=0.01)
        g = np.array([0.3, -0.7])
        p.grad = g.copy()
        opt.step()
        m = 0.1 * g
        v = 0.001 * g**2
        mhat, vhat = m / 0.1, v / 0.001
        expected = np.array([1.0, -2.0]) - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(p.data, expected, atol=1e-12)


class TestEpochs:
    def test_odd_epoch_freezes_locator_group(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        opt = Adam(dict(model.named_parameters()), lr=1e-3)
        batches = make_batches(ds.samples["train"], 16)
        before = model.group_checksums()
        stats = da_epoch(model, batches, epoch_index=1, optimizer=opt)
        after = model.group_checksums()
        assert stats["phase"] == "AP"
        assert after["ql"] == before["ql"]
        assert after["rest"] != before["rest"]

    def test_even_epoch_freezes_rest_group(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        opt = Adam(dict(model.named_parameters()), lr=1e-3)
        batches = make_batches(ds.samples["train"], 16)
        before = model.group_checksums()
        stats = da_epoch(model, batches, epoch_index=2, optimizer=opt)
        after = model.group_checksums()
        assert stats["phase"] == "QL"
        assert after["rest"] == before["rest"]
        assert after["ql"] != before["ql"]

    def test_zero_learning_rate_changes_nothing(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        opt = Adam(dict(model.named_parameters()), lr=0.0)
        batches = make_batches(ds.samples["train"], 16)
        before = model.group_checksums()
        da_epoch(model, batches, 1, opt)
        da_epoch(model, batches, 2, opt)
        assert model.group_checksums() == before

    def test_optimizer_mismatch_rejected(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        other = tiny_model(scfg, variant="no_QL")
        opt = Adam(dict(other.named_parameters()), lr=1e-3)
        with pytest.raises(ConfigurationError, match="parameter group"):
            da_epoch(model, make_batches(ds.samples["train"][:8], 8), 1, opt)

    def test_da_requires_locator(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg, variant="no_QL")
        opt = Adam(dict(model.named_parameters()), lr=1e-3)
        with pytest.raises(ConfigurationError, match="locator"):
            da_epoch(model, make_batches(ds.samples["train"][:8], 8), 1, opt)

    def test_divergence_reports_location(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        model.answerer.fuse.bias.data[0] = np.nan
        opt = Adam(dict(model.named_parameters()), lr=1e-3)
        with pytest.raises(TrainingDiverged) as err:
            answer_only_epoch(model, make_batches(ds.samples["train"][:8], 8), 5, opt)
        assert err.value.epoch == 5
        assert err.value.batch_index == 0


class TestTrainLoop:
    def test_zero_epochs_returns_untrained(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        before = model.group_checksums()
        res = train_loop(
            model, ds.samples["train"], ds.samples["val"],
            TrainSchedule(max_epochs=0, seed=1),
        )
        assert res.history == []
        assert model.group_checksums() == before
        assert res.summary["epochs_run"] == 0

    def test_da_phases_alternate(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        res = train_loop(
            model, ds.samples["train"], ds.samples["val"],
            TrainSchedule(mode="DA", max_epochs=5, convergence_patience=50, seed=1),
        )
        assert [h["phase"] for h in res.history] == ["AP", "QL", "AP", "QL", "AP"]

    def test_reproducible_given_seed(self):
        scfg, ds = tiny_dataset()
        sched = TrainSchedule(mode="DA", max_epochs=4, convergence_patience=50, seed=11)
        runs = []
        for _ in range(2):
            model = tiny_model(scfg, seed=5)
            res = train_loop(model, ds.samples["train"], ds.samples["val"], sched)
            runs.append((res.history, model.group_checksums()))
        assert runs[0] == runs[1]

    def test_ablation_variants_train_answer_only(self):
        scfg, ds = tiny_dataset()
        for variant in ("no_QL", "no_LQL", "soft_QL"):
            model = tiny_model(scfg, variant=variant)
            res = train_loop(
                model, ds.samples["train"], ds.samples["val"],
                TrainSchedule(mode="DA", max_epochs=2, convergence_patience=50, seed=2),
            )
            assert all(h["phase"] == "AP" for h in res.history)
            assert res.summary["mode"] == "answer_only"

    def test_no_lql_never_updates_locator_head(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg, variant="no_LQL")
        head_before = model.locator.fuse.gate.data.copy()
        train_loop(
            model, ds.samples["train"], ds.samples["val"],
            TrainSchedule(max_epochs=2, convergence_patience=50, seed=2),
        )
        np.testing.assert_array_equal(model.locator.fuse.gate.data, head_before)

    def test_plateau_halves_learning_rate(self):
        scfg, ds = tiny_dataset(n_train=16, n_val=8)
        model = tiny_model(scfg)
        # zero LR cannot improve past epoch 1, so the plateau logic must fire
        sched = TrainSchedule(
            base_lr=1e-12, max_epochs=6, plateau_patience=2,
            convergence_patience=50, seed=4,
        )
        res = train_loop(model, ds.samples["train"], ds.samples["val"], sched)
        lrs = [h["lr"] for h in res.history]
        assert lrs[-1] < lrs[0]

    def test_convergence_patience_stops_early(self):
        scfg, ds = tiny_dataset(n_train=16, n_val=8)
        model = tiny_model(scfg)
        sched = TrainSchedule(
            base_lr=1e-12, max_epochs=40, convergence_patience=3, seed=4,
        )
        res = train_loop(model, ds.samples["train"], ds.samples["val"], sched)
        assert res.summary["epochs_run"] <= 5
        assert res.summary["convergence_epoch"] <= res.summary["epochs_run"]

    def test_multiple_choice_trains(self):
        scfg, ds = tiny_dataset(n_train=24, n_val=12)
        model = tiny_model(scfg, answer_mode="multiple_choice")
        res = train_loop(
            model, ds.samples["train"], ds.samples["val"],
            TrainSchedule(max_epochs=2, convergence_patience=50, seed=6),
        )
        assert len(res.history) == 2

    def test_dataset_mismatch_rejected(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg, answer_mode="multiple_choice")
        broken = [
            QASample(
                video=s.video, question=s.question,
                answer_index=s.answer_index, candidates=None,
            )
            for s in ds.samples["train"]
        ]
        with pytest.raises(ConfigurationError, match="candidates"):
            train_loop(model, broken, ds.samples["val"], TrainSchedule(max_epochs=1))


class TestEvaluate:
    def test_accuracy_matches_record_recount(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        report = evaluate(model, ds.samples["val"], batch_size=7)
        recount = sum(r["correct"] for r in report["records"]) / len(report["records"])
        assert report["accuracy"] == pytest.approx(recount)
        assert len(report["records"]) == len(ds.samples["val"])

    def test_localization_metrics_present_with_gt(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        report = evaluate(model, ds.samples["val"])
        assert 0.0 <= report["mean_iou"] <= 1.0
        assert 0.0 <= report["loc_at_half"] <= 1.0

    def test_no_locator_no_loc_metrics(self):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg, variant="no_QL")
        report = evaluate(model, ds.samples["val"])
        assert "mean_iou" not in report


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        scfg, ds = tiny_dataset()
        model = tiny_model(scfg)
        sched = TrainSchedule(max_epochs=1, seed=9)
        res = train_loop(model, ds.samples["train"], ds.samples["val"], sched)
        path = save_checkpoint(
            tmp_path / "model.npz", model, state=res.best_state,
            schedule=sched, rng_state={"note": 1}, summary=res.summary,
        )
        loaded, meta = load_checkpoint(path)
        assert meta["variant"] == "full"
        assert meta["train_schedule"]["seed"] == 9
        for name, arr in res.best_state.items():
            np.testing.assert_array_equal(dict(loaded.named_parameters())[name].data, arr)
        # loaded model predicts identically to the best state
        model.load_state_dict(res.best_state)
        sample = ds.samples["val"][0]
        np.testing.assert_array_equal(
            loaded.predict(sample).answer.scores, model.predict(sample).answer.scores
        )

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.ones(3))
        with pytest.raises(ValueError, match="not a model checkpoint"):
            load_checkpoint(path)


class TestBatching:
    def test_batches_partition_samples(self):
        scfg, ds = tiny_dataset()
        batches = make_batches(ds.samples["train"], 7)
        ids = sorted(i for b in batches for i in b.sample_ids)
        assert ids == sorted(s.sample_id for s in ds.samples["train"])

    def test_shuffle_is_seeded(self):
        scfg, ds = tiny_dataset()
        a = make_batches(ds.samples["train"], 8, np.random.default_rng(3))
        b = make_batches(ds.samples["train"], 8, np.random.default_rng(3))
        assert [x.sample_ids for x in a] == [x.sample_ids for x in b]
        c = make_batches(ds.samples["train"], 8, np.random.default_rng(4))
        assert [x.sample_ids for x in a] != [x.sample_ids for x in c]
