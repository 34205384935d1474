"""Independent brute-force references used to pin expected values.

Everything here enumerates the raw path space directly (no shared code with
the package's dynamic programming) so the two routes stay independent.
"""

from __future__ import annotations

import itertools

import numpy as np


def all_paths(n_frames: int, vocab: int) -> np.ndarray:
    """Every label sequence in {0..vocab-1}^n_frames, as an (N, n_frames) array."""
    grids = np.meshgrid(*[np.arange(vocab)] * n_frames, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def collapse_matches(paths: np.ndarray, reference) -> np.ndarray:
    """Boolean mask of paths whose merge-repeats-then-drop-blanks equals the reference."""
    ref = list(reference)
    keep = np.ones(paths.shape, dtype=bool)
    keep[:, 1:] = paths[:, 1:] != paths[:, :-1]
    keep &= paths != 0
    ok = keep.sum(axis=1) == len(ref)
    if len(ref):
        order = np.argsort(~keep, axis=1, kind="stable")
        vals = np.take_along_axis(paths, order, axis=1)
        for j, tok in enumerate(ref):
            ok &= vals[:, j] == tok
    return ok


def path_logprobs(paths: np.ndarray, probs: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    logp = np.log(np.maximum(probs, floor))
    total = np.zeros(paths.shape[0])
    for t in range(paths.shape[1]):
        total += logp[t, paths[:, t]]
    return total


def brute_ctc_neg_logprob(probs: np.ndarray, reference) -> float:
    """-log of the pooled probability of all paths collapsing to the reference."""
    paths = all_paths(probs.shape[0], probs.shape[1])
    mask = collapse_matches(paths, reference)
    assert mask.any(), "reference not reachable at this frame count"
    lp = path_logprobs(paths[mask], probs)
    m = lp.max()
    return float(-(m + np.log(np.exp(lp - m).sum())))


def _state_sequence(path, reference) -> list[int]:
    """Lattice-state index per frame (unique for any path collapsing to the reference)."""
    ss = [0]
    for tok in reference:
        ss.extend([tok, 0])
    states = []
    s = 0
    for lab in path:
        if ss[s] == lab:
            states.append(s)
        elif s + 1 < len(ss) and ss[s + 1] == lab:
            s += 1
            states.append(s)
        elif s + 2 < len(ss) and ss[s + 2] == lab and ss[s + 2] != 0 and ss[s] != ss[s + 2]:
            s += 2
            states.append(s)
        else:
            raise AssertionError("path does not collapse to reference")
    return states


def _tie_key(path, reference, n_states: int) -> tuple:
    """Mirror of the package's deterministic tie rule, expressed on whole paths.

    Prefer ending in the final blank; then, scanning from the last frame
    backwards, prefer smaller lattice-state jumps (stay, then adjacent, then
    skip).
    """
    states = _state_sequence(path, reference)
    end_pref = 0 if states[-1] == n_states - 1 else 1
    jumps = tuple(states[t] - states[t - 1] for t in range(len(states) - 1, 0, -1))
    return (end_pref,) + jumps


def brute_viterbi(probs: np.ndarray, reference) -> tuple[np.ndarray, float]:
    """Argmax-probability path collapsing to the reference, under the fixed tie rule."""
    paths = all_paths(probs.shape[0], probs.shape[1])
    mask = collapse_matches(paths, reference)
    cand = paths[mask]
    lp = path_logprobs(cand, probs)
    best = lp.max()
    tied = cand[lp == best]
    n_states = 2 * len(list(reference)) + 1
    keys = [_tie_key(p, reference, n_states) for p in tied]
    winner = tied[min(range(len(keys)), key=keys.__getitem__)]
    return winner, float(best)


def brute_best_prefix(probs: np.ndarray) -> tuple[tuple, float]:
    """Collapsed sequence with the largest pooled path probability."""
    n_frames, vocab = probs.shape
    totals: dict[tuple, float] = {}
    for path in itertools.product(range(vocab), repeat=n_frames):
        prob = 1.0
        for t, lab in enumerate(path):
            prob *= probs[t, lab]
        key = []
        prev = None
        for lab in path:
            if lab != prev and lab != 0:
                key.append(lab)
            prev = lab
        key = tuple(key)
        totals[key] = totals.get(key, 0.0) + prob
    best = max(totals.items(), key=lambda kv: (kv[1], [-x for x in kv[0]]))
    return best[0], float(np.log(best[1]))


def scalar_masked_attention(q, k, v, bits) -> np.ndarray:
    """Attention by scalar loops: per-row softmax over permitted logits only."""
    n_q, d_k = q.shape
    n_k, d_v = v.shape
    out = np.zeros((n_q, d_v))
    for i in range(n_q):
        logits = []
        cols = []
        for j in range(n_k):
            if bits[i, j]:
                s = 0.0
                for d in range(d_k):
                    s += q[i, d] * k[j, d]
                logits.append(s / np.sqrt(d_k))
                cols.append(j)
        m = max(logits)
        weights = [np.exp(x - m) for x in logits]
        z = sum(weights)
        for w, j in zip(weights, cols):
            out[i] += (w / z) * v[j]
    return out


def scalar_smoothed_cross_entropy(logits, targets, eps) -> float:
    """Label-smoothed cross entropy by scalar loops."""
    n, vocab = logits.shape
    total = 0.0
    for i in range(n):
        m = max(logits[i])
        z = sum(np.exp(x - m) for x in logits[i])
        logp = [x - m - np.log(z) for x in logits[i]]
        for kk in range(vocab):
            q = eps / vocab + (1.0 - eps if kk == targets[i] else 0.0)
            total -= q * logp[kk]
    return total / n
