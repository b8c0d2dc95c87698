"""Full model assembly: encode, locate, slice, answer.

The assembled network is variant-aware:

  * ``full``    - locator scores proposals; the answer head reads the argmax
                  segment (training supervises the locator with pseudo labels).
  * ``no_LQL``  - same structure as ``full`` but trained on the answer loss
                  only; the locator head never receives its own loss.
  * ``no_QL``   - no locator head at all; the answer head reads the whole
                  video, which is exactly the ``full`` forward with proposal
                  [0, L).
  * ``soft_QL`` - hard slicing replaced by an attention-weighted average of
                  the video tokens.

Parameters are split into two named groups for alternating training: ``ql``
(the cross-modal encoder plus the proposal-scoring head, i.e. the question
locator) and ``rest`` (projections, position tables, self encoders, answer
head).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .answerer import AnswerOutput, AnswerPredictor, masked_segment_pool, segment_mask
from .encoder import FeatureEncoder, Module
from .features import QUESTION, VIDEO
from .locator import CrossEncoder, LocatorOutput, QuestionLocator, SoftLocator, max_pool
from .proposals import Proposal, generate_proposals

VARIANTS = ("full", "no_QL", "no_LQL", "soft_QL")


@dataclass
class Batch:
    """Shape-uniform arrays for a set of samples."""

    videos: np.ndarray                 # (B, Lv, d_video)
    questions: np.ndarray              # (B, Lq, d_question)
    answers: np.ndarray                # (B,) int
    candidates: np.ndarray | None      # (B, K, Lc, d_question)
    gt_segments: list                  # per-sample Proposal or None
    sample_ids: list

    @property
    def size(self):
        return self.videos.shape[0]

    @property
    def video_len(self):
        return self.videos.shape[1]


@dataclass
class Encoded:
    """Cross-encoded streams plus pooled candidate features (if any)."""

    q_cross: ad.Tensor                 # (B, Lq, d_model)
    v_cross: ad.Tensor                 # (B, Lv, d_model)
    pooled_q: ad.Tensor                # (B, d_model)
    pooled_candidates: ad.Tensor | None  # (B, K, d_model)


@dataclass
class Prediction:
    """Per-sample inference outcome."""

    answer: AnswerOutput
    locator: LocatorOutput | None
    segment: Proposal | None


def make_batch(samples):
    """Stack same-shape samples into arrays; rejects ragged shape mixes."""
    shapes = {
        (s.video.tokens.shape, s.question.tokens.shape, s.n_candidates)
        for s in samples
    }
    if len(shapes) != 1:
        raise ValueError(f"samples in a batch must share shapes, got {sorted(map(str, shapes))}")
    candidates = None
    if samples[0].candidates is not None:
        candidates = np.stack(
            [np.stack([c.tokens for c in s.candidates]) for s in samples]
        )
    return Batch(
        videos=np.stack([s.video.tokens for s in samples]),
        questions=np.stack([s.question.tokens for s in samples]),
        answers=np.array([s.answer_index for s in samples], dtype=np.intp),
        candidates=candidates,
        gt_segments=[s.gt_segment for s in samples],
        sample_ids=[s.sample_id for s in samples],
    )


class SegQAModel(Module):
    def __init__(self, cfg, rng, variant="full"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.cfg = cfg
        self.variant = variant
        self.n_proposals = sum(cfg.anchor_scales)
        self.encoder = self._child("encoder", FeatureEncoder(cfg, rng))
        self.cross = self._child("cross", CrossEncoder(cfg, rng))
        self.locator = None
        self.soft = None
        if variant in ("full", "no_LQL"):
            self.locator = self._child(
                "locator", QuestionLocator(cfg, self.n_proposals, rng)
            )
        elif variant == "soft_QL":
            self.soft = self._child("soft", SoftLocator(cfg, rng))
        self.answerer = self._child("answerer", AnswerPredictor(cfg, rng))
        self._proposal_cache = {}

    # -- parameter bookkeeping ------------------------------------------------

    def parameter_groups(self):
        """{'ql': locator params, 'rest': everything else}, both name-keyed."""
        ql_prefixes = ("cross.", "locator.", "soft.")
        groups = {"ql": {}, "rest": {}}
        for name, p in self.named_parameters():
            key = "ql" if name.startswith(ql_prefixes) else "rest"
            groups[key][name] = p
        return groups

    def group_checksums(self):
        """SHA-256 over each group's raw parameter bytes, in name order."""
        out = {}
        for group, params in self.parameter_groups().items():
            digest = hashlib.sha256()
            for name in sorted(params):
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(params[name].data).tobytes())
            out[group] = digest.hexdigest()
        return out

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        mine = dict(self.named_parameters())
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise ValueError(
                f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in mine.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}"
                )
            p.data = arr.copy()

    # -- forward pieces ---------------------------------------------------------

    def proposals_for(self, video_len):
        if video_len not in self._proposal_cache:
            self._proposal_cache[video_len] = generate_proposals(
                video_len, self.cfg.anchor_scales
            )
        return self._proposal_cache[video_len]

    def encode(self, batch, training=False, rng=None):
        q_self = self.encoder.encode_batch(batch.questions, QUESTION, training, rng)
        v_self = self.encoder.encode_batch(batch.videos, VIDEO, training, rng)
        q_cross, v_cross = self.cross(q_self, v_self, training=training, rng=rng)
        pooled_candidates = None
        if self.cfg.answer_mode == "multiple_choice":
            if batch.candidates is None:
                raise ValueError("multiple_choice mode needs candidate sequences in the batch")
            b, k, lc, dq = batch.candidates.shape
            flat = batch.candidates.reshape(b * k, lc, dq)
            enc = self.encoder.encode_batch(flat, QUESTION, training, rng)
            pooled = max_pool(enc)
            pooled_candidates = ad.reshape(pooled, (b, k, self.cfg.d_model))
        return Encoded(
            q_cross=q_cross,
            v_cross=v_cross,
            pooled_q=max_pool(q_cross),
            pooled_candidates=pooled_candidates,
        )

    def locator_scores(self, encoded):
        """(B, N) proposal scores; only for variants with a locator head."""
        if self.locator is None:
            raise ValueError(f"variant {self.variant!r} has no locator head")
        return self.locator.score_batch(encoded.q_cross, encoded.v_cross)

    def pooled_segment(self, encoded, batch, ql_scores=None):
        """Pooled video features the answer head should read, per variant.

        Returns (pooled (B, d), selected proposal indices (B,) or None).
        For hard-locator variants the argmax selection is detached: indices
        are taken from the score values, never differentiated through.
        """
        if self.variant == "no_QL":
            return max_pool(encoded.v_cross), None
        if self.variant == "soft_QL":
            return self.soft.pool_batch(encoded.q_cross, encoded.v_cross), None
        if ql_scores is None:
            ql_scores = self.locator_scores(encoded)
        selected = np.argmax(ql_scores.data, axis=1)
        pset = self.proposals_for(batch.video_len)
        mask = segment_mask(batch.video_len, pset)[selected]       # (B, Lv)
        pooled = ad.amax(
            ad.add(encoded.v_cross, ad.Tensor(mask[:, :, None])), axis=-2
        )
        return pooled, selected

    def answer_scores(self, encoded, pooled_seg):
        return self.answerer.score_batch(
            encoded.pooled_q, pooled_seg, encoded.pooled_candidates
        )

    # -- inference -----------------------------------------------------------------

    def predict_batch(self, batch):
        """Eval-mode forward; returns one Prediction per sample."""
        with ad.no_grad():
            encoded = self.encode(batch, training=False)
            ql_scores = None
            if self.locator is not None:
                ql_scores = self.locator_scores(encoded)
            pooled_seg, selected = self.pooled_segment(encoded, batch, ql_scores)
            ap = self.answer_scores(encoded, pooled_seg).data
        pset = self.proposals_for(batch.video_len)
        out = []
        for i in range(batch.size):
            loc = None
            seg = None
            if selected is not None:
                loc = LocatorOutput(
                    scores=ql_scores.data[i].copy(), selected=int(selected[i])
                )
                seg = pset[int(selected[i])]
            out.append(
                Prediction(
                    answer=AnswerOutput(scores=ap[i].copy(), predicted=int(np.argmax(ap[i]))),
                    locator=loc,
                    segment=seg,
                )
            )
        return out

    def predict(self, sample):
        return self.predict_batch(make_batch([sample]))[0]
