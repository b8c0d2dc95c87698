"""Feature representation: per-modality projection plus self-attention stacks.

Raw video-clip and question-token features are mapped to a shared model
dimension by one affine layer per modality, optionally offset by a learned
position table, then passed through post-norm transformer blocks that never
mix the two modalities.  Candidate answer sequences reuse the question
projection and question self-attention stack.

All forward paths are batch-first: tensors are (B, L, d).  ``training=True``
enables dropout, which draws masks from the caller's generator so runs are
reproducible given a seed.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .features import QUESTION, VIDEO, FeatureSequence


class Module:
    """Tiny parameter container; children and params are discovered by name."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def _param(self, name, array):
        t = ad.parameter(array)
        self._params[name] = t
        return t

    def _child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def uniform_init(rng, fan_in, shape):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the package-wide affine init."""
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.Tensor(mask))


class Linear(Module):
    def __init__(self, rng, d_in, d_out):
        super().__init__()
        self.weight = self._param("weight", uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = self._param("bias", np.zeros(d_out))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)


def identity_pad_init(d_in, d_out):
    """Identity on the leading square block, zero elsewhere.

    Used for the raw-feature projections so that input structure reaches the
    pooled bilinear heads unscrambled from the first step; the map trains away
    from the identity as needed.
    """
    w = np.zeros((d_in, d_out))
    np.fill_diagonal(w, 1.0)
    return w


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.gain = self._param("gain", np.ones(dim))
        self.bias = self._param("bias", np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """Two affine layers with ReLU between; hidden width 4x the model dim."""

    def __init__(self, rng, d_model):
        super().__init__()
        self.inner = self._child("inner", Linear(rng, d_model, 4 * d_model))
        self.outer = self._child("outer", Linear(rng, 4 * d_model, d_model))

    def __call__(self, x):
        return self.outer(ad.relu(self.inner(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with independent Q/K/V maps and h heads.

    Scores are divided by sqrt(d_model / h); each head works on a disjoint
    d_model/h slice of the projected features, and the concatenated heads go
    through an output projection.
    """

    def __init__(self, rng, d_model, heads, dropout_rate=0.0):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f"heads ({heads}) must divide d_model ({d_model})")
        self.d_model = d_model
        self.heads = heads
        self.dropout_rate = dropout_rate
        self.q_map = self._child("q_map", Linear(rng, d_model, d_model))
        self.k_map = self._child("k_map", Linear(rng, d_model, d_model))
        self.v_map = self._child("v_map", Linear(rng, d_model, d_model))
        self.out_map = self._child("out_map", Linear(rng, d_model, d_model))

    def __call__(self, s_q, s_k, s_v, training=False, rng=None, need_weights=False):
        s_q, s_k, s_v = ad.as_tensor(s_q), ad.as_tensor(s_k), ad.as_tensor(s_v)
        if s_k.shape[-2] != s_v.shape[-2]:
            raise ValueError(
                f"key length {s_k.shape[-2]} != value length {s_v.shape[-2]}"
            )
        b, lq, d = s_q.shape
        lkv = s_k.shape[-2]
        h, dh = self.heads, self.d_model // self.heads

        def split(x, length):
            return ad.swapaxes(ad.reshape(x, (b, length, h, dh)), 1, 2)

        qh = split(self.q_map(s_q), lq)          # (B, h, Lq, dh)
        kh = split(self.k_map(s_k), lkv)         # (B, h, Lkv, dh)
        vh = split(self.v_map(s_v), lkv)
        scale = 1.0 / np.sqrt(self.d_model / self.heads)
        scores = ad.mul(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), scale)
        weights = ad.softmax(scores, axis=-1)    # (B, h, Lq, Lkv)
        dropped = dropout(weights, self.dropout_rate, rng, training)
        mixed = ad.matmul(dropped, vh)           # (B, h, Lq, dh)
        merged = ad.reshape(ad.swapaxes(mixed, 1, 2), (b, lq, d))
        out = self.out_map(merged)
        if need_weights:
            return out, weights.data
        return out


class EncoderBlock(Module):
    """Post-norm transformer block: attention then feed-forward, each wrapped
    in residual + layer normalization.

    The attention output projection and the outer feed-forward layer start at
    zero, so a freshly built block is layer normalization around an identity
    map.  Blocks then grow their residual branches only along directions the
    loss consistently asks for, which keeps early noisy gradients (e.g. from
    immature pseudo labels) from scrambling the features other heads read.
    """

    def __init__(self, rng, d_model, heads, dropout_rate):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.attn = self._child("attn", MultiHeadAttention(rng, d_model, heads, dropout_rate))
        self.norm_attn = self._child("norm_attn", LayerNorm(d_model))
        self.ffn = self._child("ffn", FeedForward(rng, d_model))
        self.norm_ffn = self._child("norm_ffn", LayerNorm(d_model))
        self.attn.out_map.weight.data[:] = 0.0
        self.ffn.outer.weight.data[:] = 0.0

    def __call__(self, x, kv=None, training=False, rng=None):
        kv = x if kv is None else kv
        attended = self.attn(x, kv, kv, training=training, rng=rng)
        x = self.norm_attn(ad.add(x, attended))
        fed = dropout(self.ffn(x), self.dropout_rate, rng, training)
        return self.norm_ffn(ad.add(x, fed))


class FeatureEncoder(Module):
    """Projection, optional position offsets, and the two self-attention stacks."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.proj_video = self._child("proj_video", Linear(rng, cfg.d_video, cfg.d_model))
        self.proj_question = self._child(
            "proj_question", Linear(rng, cfg.d_question, cfg.d_model)
        )
        self.proj_video.weight.data = identity_pad_init(cfg.d_video, cfg.d_model)
        self.proj_question.weight.data = identity_pad_init(cfg.d_question, cfg.d_model)
        if cfg.use_position_embedding:
            self.pos_video = self._param(
                "pos_video", rng.normal(0.0, 0.02, size=(cfg.max_video_len, cfg.d_model))
            )
            self.pos_question = self._param(
                "pos_question", rng.normal(0.0, 0.02, size=(cfg.max_question_len, cfg.d_model))
            )
        self.video_blocks = [
            self._child(f"video_block{i}", EncoderBlock(rng, cfg.d_model, cfg.heads, cfg.dropout_rate))
            for i in range(cfg.n_self_layers)
        ]
        self.question_blocks = [
            self._child(f"question_block{i}", EncoderBlock(rng, cfg.d_model, cfg.heads, cfg.dropout_rate))
            for i in range(cfg.n_self_layers)
        ]

    def _raw_dim(self, modality):
        return self.cfg.d_video if modality == VIDEO else self.cfg.d_question

    def project_batch(self, x, modality):
        x = ad.as_tensor(x)
        expected = self._raw_dim(modality)
        if x.shape[-1] != expected:
            raise ValueError(
                f"{modality} features have dim {x.shape[-1]}, configured raw dim is {expected}"
            )
        proj = self.proj_video if modality == VIDEO else self.proj_question
        return proj(x)

    def add_position(self, x, modality):
        if not self.cfg.use_position_embedding:
            return x
        table = self.pos_video if modality == VIDEO else self.pos_question
        length = x.shape[-2]
        if length > table.shape[0]:
            raise ValueError(
                f"{modality} length {length} exceeds position table size {table.shape[0]}"
            )
        return ad.add(x, ad.take(table, slice(0, length)))

    def self_encode_batch(self, x, modality, training=False, rng=None):
        """Position offsets plus the modality's self-attention stack.

        Expects already-projected (B, L, d_model) input.
        """
        blocks = self.video_blocks if modality == VIDEO else self.question_blocks
        x = self.add_position(ad.as_tensor(x), modality)
        for block in blocks:
            x = block(x, training=training, rng=rng)
        return x

    def encode_batch(self, x, modality, training=False, rng=None):
        """Full path: project, then self-encode."""
        return self.self_encode_batch(
            self.project_batch(x, modality), modality, training=training, rng=rng
        )

    # -- single-sample conveniences over FeatureSequence ---------------------

    def project(self, seq):
        out = self.project_batch(seq.tokens[None], seq.modality)
        return FeatureSequence(out.data[0], seq.modality)

    def self_encode(self, question, video):
        """Encode both modalities independently (inference mode)."""
        with ad.no_grad():
            q = self.self_encode_batch(question.tokens[None], QUESTION)
            v = self.self_encode_batch(video.tokens[None], VIDEO)
        return (
            FeatureSequence(q.data[0], QUESTION),
            FeatureSequence(v.data[0], VIDEO),
        )
