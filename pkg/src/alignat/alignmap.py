"""From a frame-level alignment to decoder-input geometry.

An alignment is a length-T' sequence of ids over vocabulary-plus-blank
(blank = 0). Collapsing merges adjacent repeats and then drops blanks. Each
collapsed token's end boundary is the frame index of the **first** frame of
its run, and its attention span is the half-open stretch between consecutive
boundaries — so a repeated frame extends the *next* token's span, which is
the mapping used consistently at train and decode time.

All public frame indices here are 0-based; rendered debug text is 1-based to
match the bracket notation used in docs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoTokensError, ShapeMismatchError

BLANK = 0


def collapse(labels) -> list[int]:
    """Merge adjacent duplicates, then remove blanks."""
    out: list[int] = []
    prev = None
    for lab in labels:
        lab = int(lab)
        if lab != prev:
            if lab != BLANK:
                out.append(lab)
            prev = lab
    return out


def token_runs(labels) -> list[tuple[int, int]]:
    """(token, first-frame index) for every non-blank run, in order."""
    runs: list[tuple[int, int]] = []
    prev = None
    for i, lab in enumerate(labels):
        lab = int(lab)
        if lab != prev and lab != BLANK:
            runs.append((lab, i))
        prev = lab
    return runs


def predicted_length(labels) -> int:
    """Number of decoder-input positions the alignment triggers."""
    return len(collapse(labels))


@dataclass
class TriggerMaskSet:
    """Per-token attention spans derived from one alignment."""

    token_count: int
    frame_count: int
    tokens: np.ndarray      # collapsed token ids, (U',)
    boundaries: np.ndarray  # 0-based end-boundary frame per token, (U',)
    masks: np.ndarray       # bool, (U', T')

    def validate(self) -> None:
        b = self.boundaries
        if len(b) != self.token_count or self.masks.shape != (self.token_count, self.frame_count):
            raise ShapeMismatchError("trigger mask set fields disagree on shape")
        if self.token_count == 0:
            raise NoTokensError("no tokens triggered")
        if not (np.all(np.diff(b) > 0) and b[0] >= 0 and b[-1] < self.frame_count):
            raise ShapeMismatchError("boundaries must be strictly increasing within the frame range")
        # rows tile the frame prefix 0..b[-1] with multiplicity one; anything
        # past the final boundary may belong only to the (extended) last row
        coverage = self.masks.sum(axis=0)
        last = int(b[-1])
        if not np.all(coverage[: last + 1] == 1):
            raise ShapeMismatchError("mask rows must partition the triggered frame prefix")
        if self.masks[:-1, last + 1 :].any():
            raise ShapeMismatchError("only the last row may extend past the final boundary")

    def bracket_text(self) -> str:
        lines = []
        for u in range(self.token_count):
            row = ",".join("1" if x else "0" for x in self.masks[u])
            lines.append(f"token {self.tokens[u]} boundary {self.boundaries[u]} mask [{row}]")
        return "\n".join(lines)


def trigger_masks(labels, extend_last: bool = False) -> TriggerMaskSet:
    """Build the per-token span masks for an alignment.

    Row u covers frames (boundary[u-1], boundary[u]] — contiguous, no overlap.
    Frames after the final boundary are attended by no token unless
    ``extend_last`` stretches the last row to the end (ablation aid).
    """
    labels = np.asarray(list(labels), dtype=np.int64)
    runs = token_runs(labels)
    if not runs:
        raise NoTokensError("no tokens triggered")
    n_frames = len(labels)
    tokens = np.array([tok for tok, _ in runs], dtype=np.int64)
    bounds = np.array([first for _, first in runs], dtype=np.int64)

    masks = np.zeros((len(runs), n_frames), dtype=bool)
    prev = -1
    for u, b in enumerate(bounds):
        masks[u, prev + 1 : b + 1] = True
        prev = b
    if extend_last:
        masks[-1, bounds[-1] :] = True

    out = TriggerMaskSet(
        token_count=len(runs),
        frame_count=n_frames,
        tokens=tokens,
        boundaries=bounds,
        masks=masks,
    )
    out.validate()
    return out
