"""Configuration dataclasses for the model and the training schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .proposals import validate_scales

ANSWER_MODES = ("closed_set", "multiple_choice")
TRAIN_MODES = ("DA", "bundled")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``anchor_scales`` holds integer denominators m (anchor width 1/m).
    ``d_video`` / ``d_question`` are the raw per-modality feature dims that the
    projection layers map to ``d_model``.
    """

    d_video: int = 48
    d_question: int = 24
    d_model: int = 48
    heads: int = 4
    n_self_layers: int = 2
    n_cross_layers: int = 1
    anchor_scales: tuple = (1, 2, 3, 4, 5)
    fusion_rank: int = 32
    n_answers: int = 5
    dropout_rate: float = 0.1
    use_position_embedding: bool = False
    max_video_len: int = 128
    max_question_len: int = 32
    answer_mode: str = "closed_set"

    def __post_init__(self):
        self.anchor_scales = validate_scales(self.anchor_scales)
        if self.d_model < 1 or self.heads < 1:
            raise ValueError("d_model and heads must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        for name in ("d_video", "d_question", "n_self_layers", "n_cross_layers",
                     "fusion_rank", "max_video_len", "max_question_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_answers < 1:
            raise ValueError("n_answers must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.answer_mode not in ANSWER_MODES:
            raise ValueError(f"answer_mode must be one of {ANSWER_MODES}")

    def to_dict(self):
        d = asdict(self)
        d["anchor_scales"] = list(self.anchor_scales)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "anchor_scales" in d:
            d["anchor_scales"] = tuple(d["anchor_scales"])
        return cls(**d)


@dataclass
class TrainSchedule:
    """Training regime: alternating (DA) or joint (bundled) optimization.

    ``loss_lambda`` weighs the locator loss in bundled mode and is ignored in
    DA mode.  The learning rate halves (``lr_decay_factor``) whenever
    validation accuracy fails to improve for ``plateau_patience`` epochs, and
    training stops early after ``convergence_patience`` epochs without
    improvement.

    ``trunk_lr_scale`` runs the shared representation trunk (projections,
    position tables, self-attention stacks) at a fraction of the head
    learning rate.  The heads must be able to track the model-generated
    pseudo labels faster than the trunk can drift away from them; a slow
    trunk is the from-scratch stand-in for the near-frozen pretrained
    features this architecture normally sits on.
    """

    mode: str = "DA"
    loss_lambda: float = 0.05
    base_lr: float = 1e-3
    trunk_lr_scale: float = 0.1
    batch_size: int = 16
    plateau_patience: int = 4
    lr_decay_factor: float = 0.5
    max_epochs: int = 45
    convergence_patience: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        if self.loss_lambda < 0:
            raise ValueError("loss_lambda must be nonnegative")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.trunk_lr_scale <= 1.0:
            raise ValueError("trunk_lr_scale must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.plateau_patience < 1 or self.convergence_patience < 1:
            raise ValueError("patience values must be positive")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train schedule keys: {sorted(unknown)}")
        return cls(**d)
