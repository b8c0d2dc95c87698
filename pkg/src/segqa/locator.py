"""Question locator: cross-modal encoding and proposal scoring.

The locator cross-encodes the self-attended question and video streams
(queries from one modality, keys/values from the other, updated in parallel
each layer), max-pools both to single vectors, and maps the pooled pair
through a low-rank gated bilinear head to one score per temporal proposal.
The predicted segment is the argmax proposal, ties broken toward the lowest
index so the label space stays reproducible.

``SoftLocator`` is the ablation alternative: instead of a hard segment it
returns an attention-weighted average of the video tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import EncoderBlock, Linear, Module, uniform_init
from .features import QUESTION, VIDEO, FeatureSequence


@dataclass
class LocatorOutput:
    """Per-proposal scores and the selected (argmax, lowest index) proposal."""

    scores: np.ndarray
    selected: int


def max_pool(x):
    """Elementwise max over the length axis: (..., L, d) -> (..., d)."""
    return ad.amax(ad.as_tensor(x), axis=-2)


class BilinearFusion(Module):
    """Low-rank gated bilinear map of two d-dim vectors to ``out_dim`` scores.

    Per output j with rank-r factors U_j, V_j in R^{r x d}:
        out_j = w_j . (tanh(U_j a) * tanh(V_j b)) + c_j
    """

    def __init__(self, rng, d_in, out_dim, rank):
        super().__init__()
        self.out_dim = out_dim
        self.rank = rank
        self.left = self._param("left", uniform_init(rng, d_in, (out_dim, rank, d_in)))
        self.right = self._param("right", uniform_init(rng, d_in, (out_dim, rank, d_in)))
        self.gate = self._param("gate", uniform_init(rng, rank, (out_dim, rank)))
        self.bias = self._param("bias", np.zeros(out_dim))

    def left_code(self, a):
        """tanh of the left factor projections: (..., d) -> (..., out_dim*rank)."""
        flat = ad.reshape(self.left, (self.out_dim * self.rank, -1))
        return ad.tanh(ad.matmul(ad.as_tensor(a), ad.swapaxes(flat, 0, 1)))

    def right_code(self, b):
        flat = ad.reshape(self.right, (self.out_dim * self.rank, -1))
        return ad.tanh(ad.matmul(ad.as_tensor(b), ad.swapaxes(flat, 0, 1)))

    def __call__(self, a, b):
        """Fuse ``a`` and ``b`` of shape (..., d) into (..., out_dim)."""
        z = ad.mul(self.left_code(a), self.right_code(b))
        z = ad.reshape(z, z.shape[:-1] + (self.out_dim, self.rank))
        gated = ad.tsum(ad.mul(z, self.gate), axis=-1)
        return ad.add(gated, self.bias)


class CrossEncoder(Module):
    """Stacked cross-modal blocks; both directions updated in parallel."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.q_blocks = [
            self._child(f"q_block{i}", EncoderBlock(rng, cfg.d_model, cfg.heads, cfg.dropout_rate))
            for i in range(cfg.n_cross_layers)
        ]
        self.v_blocks = [
            self._child(f"v_block{i}", EncoderBlock(rng, cfg.d_model, cfg.heads, cfg.dropout_rate))
            for i in range(cfg.n_cross_layers)
        ]

    def __call__(self, q, v, training=False, rng=None):
        q, v = ad.as_tensor(q), ad.as_tensor(v)
        for q_block, v_block in zip(self.q_blocks, self.v_blocks):
            q, v = (
                q_block(q, kv=v, training=training, rng=rng),
                v_block(v, kv=q, training=training, rng=rng),
            )
        return q, v

    def cross_encode(self, q_self, v_self):
        """Single-sample inference over FeatureSequence inputs."""
        with ad.no_grad():
            q, v = self(q_self.tokens[None], v_self.tokens[None])
        return (
            FeatureSequence(q.data[0], QUESTION),
            FeatureSequence(v.data[0], VIDEO),
        )


class QuestionLocator(Module):
    """Pooled bilinear scoring of the cross-encoded pair over N proposals."""

    def __init__(self, cfg, n_proposals, rng):
        super().__init__()
        self.n_proposals = n_proposals
        self.fuse = self._child(
            "fuse", BilinearFusion(rng, cfg.d_model, n_proposals, cfg.fusion_rank)
        )

    def score_batch(self, q_cross, v_cross):
        """(B, Lq, d), (B, Lv, d) -> (B, N) proposal scores."""
        return self.fuse(max_pool(q_cross), max_pool(v_cross))

    def score_proposals(self, q_cross, v_cross):
        """Single-sample inference; returns scores and the argmax proposal."""
        with ad.no_grad():
            scores = self.score_batch(q_cross.tokens[None], v_cross.tokens[None])
        row = scores.data[0]
        return LocatorOutput(scores=row, selected=int(np.argmax(row)))


class SoftLocator(Module):
    """Ablation variant: attention-weighted average instead of hard slicing.

    Weights come from a learned bilinear compatibility between the pooled
    question vector and each video token, softmaxed over time.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.compat = self._child("compat", Linear(rng, cfg.d_model, cfg.d_model))

    def weights_batch(self, q_cross, v_cross):
        pooled_q = max_pool(q_cross)                      # (B, d)
        keys = self.compat(ad.as_tensor(v_cross))         # (B, Lv, d)
        logits = ad.tsum(
            ad.mul(keys, ad.reshape(pooled_q, (pooled_q.shape[0], 1, pooled_q.shape[-1]))),
            axis=-1,
        )
        return ad.softmax(logits, axis=-1)                # (B, Lv)

    def pool_batch(self, q_cross, v_cross):
        """(B, Lv, d) -> (B, d) soft-localized video summary."""
        w = self.weights_batch(q_cross, v_cross)
        w3 = ad.reshape(w, w.shape + (1,))
        return ad.tsum(ad.mul(ad.as_tensor(v_cross), w3), axis=-2)

    def soft_localize(self, q_cross, v_cross):
        """Single-sample inference; returns a length-1 FeatureSequence."""
        with ad.no_grad():
            pooled = self.pool_batch(q_cross.tokens[None], v_cross.tokens[None])
        return FeatureSequence(pooled.data, VIDEO)
