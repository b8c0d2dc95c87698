"""Feature sequences and QA samples: the data the model consumes.

Videos arrive as precomputed clip features (one vector per clip) and
questions as precomputed token embeddings; this package never touches raw
pixels or text.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .proposals import Proposal

VIDEO = "video"
QUESTION = "question"
MODALITIES = (VIDEO, QUESTION)


@dataclass
class FeatureSequence:
    """A length x dim matrix of token vectors for one modality."""

    tokens: np.ndarray
    modality: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D (length x dim), got shape {self.tokens.shape}")
        if self.tokens.shape[0] < 1 or self.tokens.shape[1] < 1:
            raise ValueError(f"empty feature sequence: shape {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("feature sequence contains non-finite entries")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")

    @property
    def length(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]


@dataclass
class QASample:
    """One question over one video, with its answer label.

    ``candidates`` is present in multiple-choice mode (one token sequence per
    answer option) and absent in closed-set mode.  ``gt_segment`` is only
    available for synthetic data and is never used for training, only for
    scoring the locator.
    """

    video: FeatureSequence
    question: FeatureSequence
    answer_index: int
    candidates: list[FeatureSequence] | None = None
    gt_segment: Proposal | None = None
    sample_id: int = 0

    def __post_init__(self):
        if self.video.modality != VIDEO:
            raise ValueError("video sequence must have modality 'video'")
        if self.question.modality != QUESTION:
            raise ValueError("question sequence must have modality 'question'")
        n = self.n_candidates
        if n is not None and not 0 <= self.answer_index < n:
            raise ValueError(f"answer_index {self.answer_index} out of range for {n} candidates")
        if self.answer_index < 0:
            raise ValueError("answer_index must be nonnegative")
        if self.gt_segment is not None and self.gt_segment.ed > self.video.length:
            raise ValueError(
                f"gt_segment {self.gt_segment} exceeds video length {self.video.length}"
            )

    @property
    def n_candidates(self):
        return None if self.candidates is None else len(self.candidates)
