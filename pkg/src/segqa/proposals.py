"""Fixed temporal proposals from anchor scales, plus interval overlap math.

A video of ``length`` frames is tiled, for every anchor scale ``1/m``, by
``m`` non-overlapping windows of rational width ``length/m``.  Window ``i``
spans ``[i*length/m, (i+1)*length/m)``; since frame indices are integers the
start is rounded down and the end rounded up, so adjacent windows of the same
scale can overlap by at most one frame.  Localization over a video becomes a
classification over this fixed, deterministically ordered proposal list.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Proposal:
    """Half-open frame interval [st, ed)."""

    st: int
    ed: int

    def __post_init__(self):
        if not (0 <= self.st < self.ed):
            raise ValueError(f"invalid proposal [{self.st}, {self.ed})")

    def __len__(self):
        return self.ed - self.st


@dataclass(frozen=True)
class ProposalSet:
    proposals: tuple[Proposal, ...]
    length: int
    scales: tuple[int, ...]

    def __len__(self):
        return len(self.proposals)

    def __getitem__(self, i):
        return self.proposals[i]

    def __iter__(self):
        return iter(self.proposals)


DEFAULT_SCALES = (1, 2, 3, 4, 5)


def validate_scales(scales, length=None):
    """Scales are given as integer denominators m, meaning anchor width 1/m."""
    scales = tuple(scales)
    if not scales:
        raise ValueError("anchor scales must be nonempty")
    for m in scales:
        if not isinstance(m, (int,)) or isinstance(m, bool) or m < 1:
            raise ValueError(f"anchor scale denominator must be a positive integer, got {m!r}")
        if length is not None and m > length:
            raise ValueError(
                f"anchor scale 1/{m} creates empty windows on a video of {length} frames"
            )
    if len(set(scales)) != len(scales):
        raise ValueError(f"duplicate anchor scales in {scales}")
    return scales


def generate_proposals(length, scales=DEFAULT_SCALES):
    """Build the proposal list for a video of ``length`` frames.

    Ordering is fixed: scales in the order given, window index ascending, so
    proposal indices form a stable label space across runs.
    """
    if length < 1:
        raise ValueError(f"video length must be >= 1, got {length}")
    scales = validate_scales(scales, length)
    out = []
    for m in scales:
        for i in range(m):
            st = (i * length) // m
            ed = -((-(i + 1) * length) // m)  # ceil((i+1)*length/m)
            out.append(Proposal(st, ed))
    return ProposalSet(tuple(out), length, scales)


def temporal_iou(a, b):
    """Intersection over union of two half-open frame intervals."""
    inter = max(0, min(a.ed, b.ed) - max(a.st, b.st))
    union = len(a) + len(b) - inter
    return inter / union


def best_iou(p, pset):
    """Highest IoU of ``p`` against any proposal in ``pset``."""
    return max(temporal_iou(p, q) for q in pset)
