"""Answer predictor: score answer candidates from the localized video segment.

Two modes share one bilinear head family:

  * closed_set: the pooled question and pooled segment fuse straight to one
    logit per vocabulary answer.
  * multiple_choice: each encoded candidate sequence is pooled, gated by the
    pooled question (elementwise product), and fused against the pooled
    segment through a scalar-output bilinear head; the K scalars are the
    logits.

Segment slicing is hard: the rows of the cross-encoded video inside the
proposal, nothing else.  Pooling a slice equals max-pooling the full sequence
with positions outside the segment masked to -inf, which is what the batched
training path uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import VIDEO, FeatureSequence
from .locator import BilinearFusion, Module, max_pool
from .proposals import Proposal


@dataclass
class AnswerOutput:
    """Answer logits and the argmax prediction (lowest index wins ties)."""

    scores: np.ndarray
    predicted: int


def slice_segment(v_cross, proposal):
    """Rows st..ed-1 of the encoded video, as a new sequence."""
    if proposal.ed > v_cross.length:
        raise ValueError(
            f"proposal [{proposal.st}, {proposal.ed}) out of range for video "
            f"of length {v_cross.length}"
        )
    return FeatureSequence(v_cross.tokens[proposal.st : proposal.ed], VIDEO)


def segment_mask(length, proposals):
    """(N, length) additive mask: 0 inside each proposal, -inf outside."""
    mask = np.full((len(proposals), length), -np.inf)
    for i, p in enumerate(proposals):
        if p.ed > length:
            raise ValueError(f"proposal [{p.st}, {p.ed}) out of range for length {length}")
        mask[i, p.st : p.ed] = 0.0
    return mask


def masked_segment_pool(v_cross, mask):
    """Max-pool (B, L, d) video features inside each masked span.

    ``mask`` is (L,) or (N, L) additive; returns (B, d) or (B, N, d).
    """
    v_cross = ad.as_tensor(v_cross)
    b, length, d = v_cross.shape
    if mask.ndim == 1:
        shaped = ad.reshape(v_cross, (b, length, d))
        return ad.amax(ad.add(shaped, ad.Tensor(mask[:, None])), axis=-2)
    n = mask.shape[0]
    expanded = ad.reshape(v_cross, (b, 1, length, d))
    return ad.amax(ad.add(expanded, ad.Tensor(mask[:, :, None])), axis=-2)


class AnswerPredictor(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.mode = cfg.answer_mode
        self.n_answers = cfg.n_answers
        out_dim = 1 if self.mode == "multiple_choice" else cfg.n_answers
        self.fuse = self._child(
            "fuse", BilinearFusion(rng, cfg.d_model, out_dim, cfg.fusion_rank)
        )

    def closed_scores(self, pooled_q, pooled_seg):
        """(B, d) x (B, d) or (B, N, d) -> (B, K) or (B, N, K) logits."""
        pooled_q = ad.as_tensor(pooled_q)
        pooled_seg = ad.as_tensor(pooled_seg)
        if pooled_seg.ndim == pooled_q.ndim + 1:
            b, d = pooled_q.shape
            pooled_q = ad.reshape(pooled_q, (b, 1, d))
        return self.fuse(pooled_q, pooled_seg)

    def choice_scores(self, pooled_q, pooled_cands, pooled_seg):
        """(B, d) x (B, K, d) x (B, d)|(B, N, d) -> (B, K)|(B, N, K) logits."""
        pooled_q = ad.as_tensor(pooled_q)
        pooled_cands = ad.as_tensor(pooled_cands)
        pooled_seg = ad.as_tensor(pooled_seg)
        b, k, d = pooled_cands.shape
        r = self.fuse.rank
        combined = ad.mul(ad.reshape(pooled_q, (b, 1, d)), pooled_cands)
        za = self.fuse.left_code(combined)              # (B, K, r) since out_dim=1
        zb = self.fuse.right_code(pooled_seg)           # (B, r) or (B, N, r)
        gate = ad.take(self.fuse.gate, 0)               # (r,)
        bias = ad.take(self.fuse.bias, 0)               # scalar
        if pooled_seg.ndim == 2:
            prod = ad.mul(za, ad.reshape(zb, (b, 1, r)))        # (B, K, r)
            return ad.add(ad.tsum(ad.mul(prod, gate), axis=-1), bias)
        n = pooled_seg.shape[1]
        prod = ad.mul(ad.reshape(za, (b, 1, k, r)), ad.reshape(zb, (b, n, 1, r)))
        return ad.add(ad.tsum(ad.mul(prod, gate), axis=-1), bias)

    def score_batch(self, pooled_q, pooled_seg, pooled_cands=None):
        if self.mode == "multiple_choice":
            if pooled_cands is None:
                raise ValueError("multiple_choice mode needs candidate features")
            return self.choice_scores(pooled_q, pooled_cands, pooled_seg)
        return self.closed_scores(pooled_q, pooled_seg)

    def score_answers(self, q_cross, v_segment, candidates=None):
        """Single-sample inference over FeatureSequence inputs.

        ``candidates`` are the already self-encoded candidate sequences in
        multiple-choice mode.
        """
        with ad.no_grad():
            pooled_q = max_pool(q_cross.tokens[None])
            pooled_seg = max_pool(v_segment.tokens[None])
            if self.mode == "multiple_choice":
                if candidates is None:
                    raise ValueError("multiple_choice mode needs candidate sequences")
                pooled_cands = ad.Tensor(
                    np.stack([c.tokens.max(axis=0) for c in candidates])[None]
                )
                scores = self.choice_scores(pooled_q, pooled_cands, pooled_seg)
            else:
                scores = self.closed_scores(pooled_q, pooled_seg)
        row = scores.data[0]
        return AnswerOutput(scores=row, predicted=int(np.argmax(row)))


def answer_loss(output, answer_index):
    """Softmax cross-entropy of the answer logits against the true index."""
    scores = output.scores if isinstance(output, AnswerOutput) else np.asarray(output)
    if not 0 <= answer_index < scores.shape[-1]:
        raise ValueError(f"answer_index {answer_index} out of range")
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[answer_index])
