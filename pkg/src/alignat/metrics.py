"""Edit-distance metrics: WER, boundary mismatch rate, length error rate.

The backtrace is deterministic: on equal-cost paths it prefers the diagonal
(match or substitution) over deletion over insertion, so a substitution is
never reported as an insert+delete pair. Mismatch rate counts only deletions
and insertions, normalised by the oracle length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def mismatches(self) -> int:
        return self.deletions + self.insertions


def edit_alignment(hyp, ref) -> EditCounts:
    """Unit-cost Levenshtein alignment between token sequences."""
    hyp = list(hyp)
    ref = list(ref)
    n, m = len(hyp), len(ref)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            subs += hyp[i - 1] != ref[j - 1]
            i -= 1
            j -= 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            dels += 1  # reference token absent from the hypothesis
            j -= 1
        else:
            ins += 1   # hypothesis token absent from the reference
            i -= 1
    return EditCounts(substitutions=int(subs), deletions=dels, insertions=ins)


def wer(hyp, ref) -> float:
    """(S + D + I) / N with N the reference length."""
    ref = list(ref)
    if not ref:
        raise ValueError("empty reference")
    return edit_alignment(hyp, ref).errors / len(ref)


def mismatch_rate(generated, oracle) -> float:
    """(D + I) / N between collapsed alignments; substitutions are free."""
    oracle = list(oracle)
    if not oracle:
        raise ValueError("empty oracle sequence")
    return edit_alignment(generated, oracle).mismatches / len(oracle)


def length_error_rate(pairs) -> float:
    """Fraction of (generated, oracle) pairs whose lengths differ."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs")
    wrong = sum(1 for gen, oracle in pairs if len(list(gen)) != len(list(oracle)))
    return wrong / len(pairs)
