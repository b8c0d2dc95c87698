"""segqa: locate the question in a long video, then answer from that segment.

A desk-scale, numpy-based implementation of proposal-based question
localization for video QA: self/cross attention encoders, a bilinear-fusion
question locator over fixed temporal proposals, an answer predictor that reads
only the selected segment, answer-guided pseudo temporal labels, and the
alternating training scheme that updates locator and answerer in separate
epochs.  A synthetic benchmark with known evidence segments makes the locator
quantitatively testable.
"""

from .answerer import AnswerOutput, AnswerPredictor, answer_loss, slice_segment
from .config import ModelConfig, TrainSchedule
from .encoder import FeatureEncoder, MultiHeadAttention
from .features import FeatureSequence, QASample
from .locator import BilinearFusion, CrossEncoder, LocatorOutput, QuestionLocator, SoftLocator
from .model import SegQAModel, make_batch
from .proposals import Proposal, ProposalSet, generate_proposals, temporal_iou
from .synth import SynthConfig, generate_synthetic_dataset, load_feature_dataset
from .training import (
    Adam,
    PseudoLabel,
    TrainingDiverged,
    bundled_loss,
    da_epoch,
    evaluate,
    generate_pseudo_label,
    load_checkpoint,
    locator_loss,
    save_checkpoint,
    train_loop,
)

__version__ = "0.1.0"
