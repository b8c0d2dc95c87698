"""Synthetic long-video QA with known ground-truth evidence segments.

Each video is a row of equal-width semantic blocks.  A block pairs a "cue"
concept (what a question could ask about) with an "answer" concept (the fact
the block states), and its frames alternate between the two: even offsets
carry the cue embedding, odd offsets carry the answer embedding.  Exactly one
block is the evidence: the question tokens encode its cue, and its answer
concept (at full strength) is the label.  Distractor blocks carry the other
answer concepts at ``distractor_strength``.

The alternating layout is what makes localization matter.  Answer frames are
anonymous - nothing in a single frame says which block it belongs to - so
reading the answer from a whole-video summary requires binding answer frames
to cue frames across positions.  A model that first localizes the cue-matched
block sidesteps that entirely: the sliced segment contains exactly one answer
concept.

What a cue looks like depends on where it is shown: the video-side cue table
is indexed by (cue, block) and each pair owns a disjoint group of feature
dimensions.  Those direction-coded conjunctions survive both max-pooling and
the per-token layer normalization inside the encoders, so a pooled video
vector still says "cue c appears in block b" and a low-rank bilinear head can
match it against the question's cue.  Answer embeddings stay dense, random,
and position-independent so answers cannot be read off frame by frame.

Feature files are raw little-endian float32, row-major, one file per tensor;
a JSON manifest per split records shapes, paths, labels, and ground-truth
segments.  Generation is a pure function of the config: the same seed yields
byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .features import QUESTION, VIDEO, FeatureSequence, QASample
from .proposals import Proposal

MANIFEST_VERSION = 1
FLOAT_DTYPE = np.dtype("<f4")


@dataclass
class SynthConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 0
    video_len: int = 20
    n_segments: int = 5
    d_video: int = 48
    d_question: int = 24
    n_answers: int = 5
    question_len: int = 4
    candidate_len: int = 2
    cue_vocab: int = 8
    noise_std: float = 0.1
    distractor_strength: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 0 or self.n_test < 0:
            raise ValueError("split sizes must be positive (train) / nonnegative")
        if self.n_segments > self.video_len:
            raise ValueError(
                f"n_segments ({self.n_segments}) cannot exceed video_len ({self.video_len})"
            )
        if self.video_len < 2 * self.n_segments:
            raise ValueError(
                f"video_len ({self.video_len}) must be at least 2 * n_segments "
                f"({2 * self.n_segments}) so every block holds cue and answer frames"
            )
        if self.n_segments < 1:
            raise ValueError("n_segments must be positive")
        if self.n_answers < 2:
            raise ValueError("n_answers must be at least 2")
        if self.cue_vocab < self.n_segments:
            raise ValueError(
                f"cue_vocab ({self.cue_vocab}) must cover n_segments ({self.n_segments})"
            )
        for name in ("d_video", "d_question", "question_len", "candidate_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_video < self.cue_vocab * self.n_segments:
            raise ValueError(
                f"d_video ({self.d_video}) must be at least cue_vocab * n_segments "
                f"({self.cue_vocab * self.n_segments}) for disjoint (cue, block) supports"
            )
        if self.d_question < self.cue_vocab:
            raise ValueError(
                f"d_question ({self.d_question}) must be at least cue_vocab "
                f"({self.cue_vocab}) for disjoint cue supports"
            )
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not 0.0 <= self.distractor_strength <= 1.0:
            raise ValueError("distractor_strength must be in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def splits(self):
        out = {"train": self.n_train}
        if self.n_val:
            out["val"] = self.n_val
        if self.n_test:
            out["test"] = self.n_test
        return out


@dataclass
class Concepts:
    """The generator's ground-truth embedding tables."""

    cue_video: np.ndarray       # (cue_vocab, n_segments, d_video), disjoint supports
    answer_video: np.ndarray    # (n_answers, d_video), dense unit rows
    cue_question: np.ndarray    # (cue_vocab, d_question), disjoint supports
    answer_question: np.ndarray  # (n_answers, d_question)
    question_offsets: np.ndarray  # (question_len, d_question)
    candidate_offsets: np.ndarray  # (candidate_len, d_question)


@dataclass
class SampleMeta:
    """Generator-side truth for one sample (never written to disk)."""

    evidence_slot: int
    segment_cues: list
    segment_answers: list


@dataclass
class SynthDataset:
    config: SynthConfig
    samples: dict          # split -> list[QASample]
    metas: dict            # split -> list[SampleMeta]
    concepts: Concepts
    manifest_paths: dict   # split -> Path (empty when not written)


def segment_bounds(video_len, n_segments):
    """Equal-width block intervals covering [0, video_len)."""
    edges = [(i * video_len) // n_segments for i in range(n_segments + 1)]
    return [Proposal(a, b) for a, b in zip(edges, edges[1:])]


def _unit_rows(rng, shape):
    m = rng.normal(size=shape)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _disjoint_rows(rng, vocab, dim):
    """One embedding per entry, nonzero only on its own slice of dimensions."""
    width = dim // vocab
    m = np.zeros((vocab, dim))
    for c in range(vocab):
        lo = c * width
        hi = lo + width if c < vocab - 1 else dim
        m[c, lo:hi] = 0.5 + rng.random(hi - lo)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _generate_split(cfg, concepts, n, rng):
    bounds = segment_bounds(cfg.video_len, cfg.n_segments)
    answers = rng.permutation(np.arange(n) % cfg.n_answers)
    samples, metas = [], []
    for i in range(n):
        answer = int(answers[i])
        evidence_slot = int(rng.integers(cfg.n_segments))
        cues = rng.choice(cfg.cue_vocab, size=cfg.n_segments, replace=False)
        wrong = np.array([a for a in range(cfg.n_answers) if a != answer])
        fillers = rng.choice(
            wrong,
            size=cfg.n_segments - 1,
            replace=cfg.n_segments - 1 > wrong.size,
        )
        segment_answers = []
        video = np.empty((cfg.video_len, cfg.d_video))
        f = 0
        for slot, span in enumerate(bounds):
            if slot == evidence_slot:
                a, strength = answer, 1.0
            else:
                # distractor_strength is the mean association strength; the
                # per-segment draw reaches 1.0 so amplitude alone cannot
                # separate evidence from distractors on every sample
                a = int(fillers[f])
                lo = max(0.0, 2.0 * cfg.distractor_strength - 1.0)
                strength = float(rng.uniform(lo, 1.0))
                f += 1
            segment_answers.append(a)
            # even offsets state the cue as seen at this block, odd offsets
            # state the answer
            block = np.empty((len(span), cfg.d_video))
            block[0::2] = concepts.cue_video[cues[slot], slot]
            block[1::2] = strength * concepts.answer_video[a]
            noise = cfg.noise_std * rng.normal(size=(len(span), cfg.d_video))
            video[span.st : span.ed] = block + noise
        question = (
            concepts.cue_question[cues[evidence_slot]]
            + concepts.question_offsets
            + cfg.noise_std * rng.normal(size=(cfg.question_len, cfg.d_question))
        )
        candidates = [
            concepts.answer_question[k]
            + concepts.candidate_offsets
            + cfg.noise_std * rng.normal(size=(cfg.candidate_len, cfg.d_question))
            for k in range(cfg.n_answers)
        ]
        samples.append(
            QASample(
                video=FeatureSequence(video.astype(FLOAT_DTYPE), VIDEO),
                question=FeatureSequence(question.astype(FLOAT_DTYPE), QUESTION),
                answer_index=answer,
                candidates=[
                    FeatureSequence(c.astype(FLOAT_DTYPE), QUESTION) for c in candidates
                ],
                gt_segment=bounds[evidence_slot],
                sample_id=i,
            )
        )
        metas.append(
            SampleMeta(
                evidence_slot=evidence_slot,
                segment_cues=[int(c) for c in cues],
                segment_answers=segment_answers,
            )
        )
    return samples, metas


def generate_synthetic_dataset(cfg, out_dir=None):
    """Build all splits; write feature files + manifests when out_dir given."""
    rng = np.random.default_rng(cfg.seed)
    cue_video = _disjoint_rows(rng, cfg.cue_vocab * cfg.n_segments, cfg.d_video)
    concepts = Concepts(
        cue_video=cue_video.reshape(cfg.cue_vocab, cfg.n_segments, cfg.d_video),
        answer_video=_unit_rows(rng, (cfg.n_answers, cfg.d_video)),
        cue_question=_disjoint_rows(rng, cfg.cue_vocab, cfg.d_question),
        answer_question=_unit_rows(rng, (cfg.n_answers, cfg.d_question)),
        question_offsets=rng.normal(0.0, 0.3, size=(cfg.question_len, cfg.d_question)),
        candidate_offsets=rng.normal(0.0, 0.3, size=(cfg.candidate_len, cfg.d_question)),
    )
    samples, metas, manifest_paths = {}, {}, {}
    for split, n in cfg.splits().items():
        samples[split], metas[split] = _generate_split(cfg, concepts, n, rng)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for split in samples:
            manifest_paths[split] = write_split(
                out_dir, split, samples[split], cfg
            )
    return SynthDataset(
        config=cfg,
        samples=samples,
        metas=metas,
        concepts=concepts,
        manifest_paths=manifest_paths,
    )


# -- disk format ---------------------------------------------------------------


def _write_tensor(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(array, dtype=FLOAT_DTYPE).tobytes())


def write_split(out_dir, split, samples, cfg=None):
    """Write one split's tensors and its manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    records = []
    for i, s in enumerate(samples):
        stem = f"{split}/{i:05d}"
        video_rel = f"{stem}_video.bin"
        question_rel = f"{stem}_question.bin"
        _write_tensor(out_dir / video_rel, s.video.tokens)
        _write_tensor(out_dir / question_rel, s.question.tokens)
        rec = {
            "video": {"path": video_rel, "shape": list(s.video.tokens.shape)},
            "question": {"path": question_rel, "shape": list(s.question.tokens.shape)},
            "answer_index": int(s.answer_index),
        }
        if s.candidates is not None:
            cand = np.stack([c.tokens for c in s.candidates])
            cand_rel = f"{stem}_candidates.bin"
            _write_tensor(out_dir / cand_rel, cand)
            rec["candidates"] = {"path": cand_rel, "shape": list(cand.shape)}
        if s.gt_segment is not None:
            rec["gt_segment"] = [s.gt_segment.st, s.gt_segment.ed]
        records.append(rec)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "split": split,
        "dtype": "float32",
        "byte_order": "little",
        "n_samples": len(samples),
        "samples": records,
    }
    if cfg is not None:
        manifest["generator_config"] = cfg.to_dict()
    path = out_dir / f"manifest_{split}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


class ManifestError(ValueError):
    """Malformed manifest or feature file inconsistent with it."""


def _read_tensor(root, entry, what, index):
    for key in ("path", "shape"):
        if key not in entry:
            raise ManifestError(f"sample {index}: {what} record is missing '{key}'")
    path = root / entry["path"]
    shape = tuple(int(x) for x in entry["shape"])
    if not path.exists():
        raise ManifestError(f"sample {index}: missing feature file {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * FLOAT_DTYPE.itemsize
    if len(raw) != expected:
        raise ManifestError(
            f"sample {index}: {path} holds {len(raw)} bytes but manifest shape "
            f"{list(shape)} needs {expected}"
        )
    return np.frombuffer(raw, dtype=FLOAT_DTYPE).reshape(shape)


def load_feature_dataset(manifest_path):
    """Read a manifest and its tensors back into QASample items."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ManifestError(f"cannot read manifest {manifest_path}: {err}") from err
    for key in ("format_version", "split", "dtype", "n_samples", "samples"):
        if key not in manifest:
            raise ManifestError(f"manifest {manifest_path} is missing '{key}'")
    if manifest["format_version"] != MANIFEST_VERSION:
        raise ManifestError(
            f"unsupported manifest version {manifest['format_version']}"
        )
    if manifest["dtype"] != "float32":
        raise ManifestError(f"unsupported dtype {manifest['dtype']!r}")
    if len(manifest["samples"]) != manifest["n_samples"]:
        raise ManifestError(
            f"manifest declares {manifest['n_samples']} samples but lists "
            f"{len(manifest['samples'])}"
        )
    root = manifest_path.parent
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        video = _read_tensor(root, rec["video"], "video", i)
        question = _read_tensor(root, rec["question"], "question", i)
        candidates = None
        if "candidates" in rec:
            cand = _read_tensor(root, rec["candidates"], "candidates", i)
            if cand.ndim != 3:
                raise ManifestError(f"sample {i}: candidates must be 3-D, got {cand.shape}")
            candidates = [FeatureSequence(c, QUESTION) for c in cand]
        if "answer_index" not in rec:
            raise ManifestError(f"sample {i}: missing answer_index")
        gt = None
        if rec.get("gt_segment") is not None:
            st, ed = rec["gt_segment"]
            gt = Proposal(int(st), int(ed))
        samples.append(
            QASample(
                video=FeatureSequence(video, VIDEO),
                question=FeatureSequence(question, QUESTION),
                answer_index=int(rec["answer_index"]),
                candidates=candidates,
                gt_segment=gt,
                sample_id=i,
            )
        )
    return samples, manifest
