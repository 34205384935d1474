"""Dynamic programming and sampling over the blank-augmented output lattice.

Everything here works on a :class:`PosteriorGrid` — per-frame distributions
over vocabulary-plus-blank (blank id 0). Probabilities are floored at 1e-12
before logs so no path score underflows to -inf. All stochastic behaviour
draws from generators derived from (seed, utterance id, sample index), making
results independent of scheduling order.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .alignmap import BLANK, collapse
from .errors import CorruptRecordError, InfeasibleSequenceError, ShapeMismatchError
from .numerics.tensor import Tensor

PROB_FLOOR = 1e-12
NEG_INF = -np.inf
GRID_MAGIC = b"CASSGRID"

ESA_DISTRIBUTIONS = ("top2-uniform", "top2-renormalized")


@dataclass
class PosteriorGrid:
    """T' rows of token posteriors; optionally tied to a graph node for training."""

    probs: np.ndarray
    source: Tensor | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ShapeMismatchError("posterior grid must be a matrix")
        rows = self.probs.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ShapeMismatchError("grid rows must sum to 1")
        if (self.probs <= 0).any() or (self.probs > 1 + 1e-12).any():
            raise ShapeMismatchError("grid entries must lie in (0, 1]")

    @property
    def frames(self) -> int:
        return self.probs.shape[0]

    @property
    def vocab(self) -> int:
        return self.probs.shape[1]

    def log_probs(self) -> np.ndarray:
        return np.log(np.maximum(self.probs, PROB_FLOOR))


@dataclass
class Alignment:
    """A concrete frame path and its summed per-frame log posterior."""

    labels: np.ndarray
    logprob: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def collapsed(self) -> list[int]:
        return collapse(self.labels)


@dataclass
class EsaConfig:
    """Error-based sampling knobs."""

    threshold: float = 0.7
    samples: int = 50
    distribution: str = "top2-uniform"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError("threshold must be in (0, 1]")
        if self.samples < 1:
            raise ValueError("need at least one sample")
        if self.distribution not in ESA_DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {ESA_DISTRIBUTIONS}")


# ---------------------------------------------------------------------------
# lattice construction
# ---------------------------------------------------------------------------


def extended_states(reference) -> np.ndarray:
    """Blank-interleaved state labels: blank, y1, blank, y2, ..., blank."""
    y = np.asarray(list(reference), dtype=np.int64)
    if y.size and ((y <= 0) | (y >= 10**9)).any():
        raise ShapeMismatchError("reference tokens must be positive ids")
    ss = np.zeros(2 * y.size + 1, dtype=np.int64)
    ss[1::2] = y
    return ss


def min_frames_required(reference) -> int:
    y = list(reference)
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return len(y) + repeats


def _check_feasible(grid_frames: int, reference) -> None:
    y = list(reference)
    if len(y) == 0:
        raise InfeasibleSequenceError("empty reference")
    need = min_frames_required(y)
    if grid_frames < need:
        raise InfeasibleSequenceError(
            f"reference of {len(y)} tokens needs at least {need} frames, grid has {grid_frames}"
        )


def _skip_allowed(ss: np.ndarray) -> np.ndarray:
    """Which states may be entered from two states back (distinct-label skips)."""
    ok = np.zeros(ss.size, dtype=bool)
    if ss.size > 2:
        ok[2:] = (ss[2:] != BLANK) & (ss[2:] != ss[:-2])
    return ok


# ---------------------------------------------------------------------------
# forward loss (differentiable through the grid)
# ---------------------------------------------------------------------------


def _forward_logalpha(logp: np.ndarray, ss: np.ndarray, skip: np.ndarray) -> np.ndarray:
    n_frames = logp.shape[0]
    n_states = ss.size
    alpha = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = logp[0, ss[0]]
    if n_states > 1:
        alpha[0, 1] = logp[0, ss[1]]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        with np.errstate(invalid="ignore"):
            skipped = np.where(skip[2:], prev[:-2], NEG_INF)
        acc[2:] = np.logaddexp(acc[2:], skipped)
        alpha[t] = acc + logp[t, ss]
    return alpha


def _backward_logbeta(logp: np.ndarray, ss: np.ndarray, skip: np.ndarray) -> np.ndarray:
    n_frames = logp.shape[0]
    n_states = ss.size
    beta = np.full((n_frames, n_states), NEG_INF)
    beta[n_frames - 1, n_states - 1] = 0.0
    if n_states > 1:
        beta[n_frames - 1, n_states - 2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ss]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        with np.errstate(invalid="ignore"):
            skipped = np.where(skip[2:], nxt[2:], NEG_INF)
        acc[:-2] = np.logaddexp(acc[:-2], skipped)
        beta[t] = acc
    return beta


def ctc_loss(grid: PosteriorGrid, reference) -> Tensor:
    """Negative log probability of all frame paths collapsing to the reference.

    Returns a scalar graph node; if the grid carries its producing tensor the
    gradient flows back into those probabilities.
    """
    _check_feasible(grid.frames, reference)
    ss = extended_states(reference)
    skip = _skip_allowed(ss)
    logp = grid.log_probs()
    alpha = _forward_logalpha(logp, ss, skip)
    final = alpha[-1, -1] if ss.size == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    loss_value = -final

    source = grid.source
    if source is None:
        return Tensor(loss_value)

    def bwd(g: np.ndarray, source=source, grid=grid, ss=ss, skip=skip, logp=logp, alpha=alpha, final=final):
        beta = _backward_logbeta(logp, ss, skip)
        # d(-logP)/dp[t,k] = -(1/P) * sum_{s: lab(s)=k} alpha[t,s]*beta[t,s] / p[t,k]
        contrib = alpha + beta - final - logp[:, ss]
        occupancy = np.exp(contrib)
        dprobs = np.zeros_like(grid.probs)
        for k in np.unique(ss):
            dprobs[:, k] = occupancy[:, ss == k].sum(axis=1)
        dprobs = np.where(grid.probs >= PROB_FLOOR, -dprobs, 0.0)
        source._accumulate(float(g.reshape(())) * dprobs)

    return Tensor(loss_value, _parents=(source,), _backward=bwd)


# ---------------------------------------------------------------------------
# alignment search
# ---------------------------------------------------------------------------


def viterbi_align(grid: PosteriorGrid, reference) -> Alignment:
    """Most probable frame path among those collapsing exactly to the reference.

    Ties prefer staying in the current lattice state, then the adjacent
    previous state (the blank, for label states), then the skip; a tie at the
    final frame prefers the terminal blank state.
    """
    _check_feasible(grid.frames, reference)
    ss = extended_states(reference)
    skip = _skip_allowed(ss)
    logp = grid.log_probs()
    n_frames, n_states = grid.frames, ss.size

    score = np.full((n_frames, n_states), NEG_INF)
    ptr = np.zeros((n_frames, n_states), dtype=np.int8)
    score[0, 0] = logp[0, ss[0]]
    if n_states > 1:
        score[0, 1] = logp[0, ss[1]]
    for t in range(1, n_frames):
        prev = score[t - 1]
        best = prev.copy()
        jump = np.zeros(n_states, dtype=np.int8)
        cand1 = np.full(n_states, NEG_INF)
        cand1[1:] = prev[:-1]
        better = cand1 > best
        best[better] = cand1[better]
        jump[better] = 1
        cand2 = np.full(n_states, NEG_INF)
        cand2[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        better = cand2 > best
        best[better] = cand2[better]
        jump[better] = 2
        score[t] = best + logp[t, ss]
        ptr[t] = jump

    if n_states == 1:
        end = 0
    else:
        # prefer the terminal blank on a tie
        end = n_states - 1 if score[-1, n_states - 1] >= score[-1, n_states - 2] else n_states - 2
    total = score[-1, end]
    if not np.isfinite(total):
        raise InfeasibleSequenceError("no feasible path through the lattice")

    states = np.zeros(n_frames, dtype=np.int64)
    states[-1] = end
    for t in range(n_frames - 1, 0, -1):
        states[t - 1] = states[t] - ptr[t, states[t]]
    labels = ss[states]
    return Alignment(labels=labels, logprob=float(total))


def best_path_align(grid: PosteriorGrid) -> Alignment:
    """Per-frame argmax labels (ties to the lowest token id)."""
    labels = grid.probs.argmax(axis=1)
    logp = grid.log_probs()
    total = float(logp[np.arange(grid.frames), labels].sum())
    return Alignment(labels=labels, logprob=total)


@dataclass
class _PrefixEntry:
    lp_blank: float = NEG_INF
    lp_token: float = NEG_INF
    path_blank: tuple | None = None  # (score, labels tuple)
    path_token: tuple | None = None

    def total(self) -> float:
        return np.logaddexp(self.lp_blank, self.lp_token)

    def best_path(self) -> tuple:
        if self.path_token is None:
            return self.path_blank
        if self.path_blank is None:
            return self.path_token
        return self.path_blank if self.path_blank[0] >= self.path_token[0] else self.path_token


def _track_max(current: tuple | None, candidate: tuple | None) -> tuple | None:
    if candidate is None:
        return current
    if current is None or candidate[0] > current[0]:
        return candidate
    return current


def beam_search_align(grid: PosteriorGrid, beam: int, path_mode: str = "tracked") -> Alignment:
    """Prefix beam search; paths that collapse to the same prefix pool their mass.

    The winning prefix is realised as a concrete frame path: either the best
    path tracked alongside each surviving prefix (default) or a forced
    re-alignment of that prefix against the grid (``path_mode="realigned"``).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if path_mode not in ("tracked", "realigned"):
        raise ValueError("path_mode must be 'tracked' or 'realigned'")
    logp = grid.log_probs()
    vocab = grid.vocab

    beams: dict[tuple, _PrefixEntry] = {
        (): _PrefixEntry(lp_blank=0.0, lp_token=NEG_INF, path_blank=(0.0, ()), path_token=None)
    }
    for t in range(grid.frames):
        nxt: dict[tuple, _PrefixEntry] = {}
        items = sorted(beams.items(), key=lambda kv: (-kv[1].total(), kv[0]))
        for prefix, entry in items:
            both = np.logaddexp(entry.lp_blank, entry.lp_token)
            best_any = entry.best_path()
            for k in range(vocab):
                lpt = logp[t, k]
                if k == BLANK:
                    tgt = nxt.setdefault(prefix, _PrefixEntry())
                    tgt.lp_blank = np.logaddexp(tgt.lp_blank, both + lpt)
                    if best_any is not None:
                        tgt.path_blank = _track_max(
                            tgt.path_blank, (best_any[0] + lpt, best_any[1] + (BLANK,))
                        )
                    continue
                if prefix and k == prefix[-1]:
                    # same token again: continue the run on this prefix...
                    tgt = nxt.setdefault(prefix, _PrefixEntry())
                    tgt.lp_token = np.logaddexp(tgt.lp_token, entry.lp_token + lpt)
                    if entry.path_token is not None:
                        tgt.path_token = _track_max(
                            tgt.path_token, (entry.path_token[0] + lpt, entry.path_token[1] + (k,))
                        )
                    # ...or start a fresh run after an intervening blank
                    ext = prefix + (k,)
                    tgt2 = nxt.setdefault(ext, _PrefixEntry())
                    tgt2.lp_token = np.logaddexp(tgt2.lp_token, entry.lp_blank + lpt)
                    if entry.path_blank is not None:
                        tgt2.path_token = _track_max(
                            tgt2.path_token, (entry.path_blank[0] + lpt, entry.path_blank[1] + (k,))
                        )
                else:
                    ext = prefix + (k,)
                    tgt = nxt.setdefault(ext, _PrefixEntry())
                    tgt.lp_token = np.logaddexp(tgt.lp_token, both + lpt)
                    if best_any is not None:
                        tgt.path_token = _track_max(
                            tgt.path_token, (best_any[0] + lpt, best_any[1] + (k,))
                        )
        ranked = sorted(nxt.items(), key=lambda kv: (-kv[1].total(), kv[0]))
        beams = dict(ranked[:beam])

    best_prefix, best_entry = max(beams.items(), key=lambda kv: (kv[1].total(), [-x for x in kv[0]]))
    if path_mode == "realigned":
        if not best_prefix:
            labels = np.zeros(grid.frames, dtype=np.int64)
            return Alignment(labels=labels, logprob=float(logp[:, BLANK].sum()))
        return viterbi_align(grid, best_prefix)
    score, labels = best_entry.best_path()
    return Alignment(labels=np.array(labels, dtype=np.int64), logprob=float(score))


def beam_search_score(grid: PosteriorGrid, beam: int) -> tuple[tuple, float]:
    """Best surviving prefix and its pooled log probability (diagnostic helper)."""
    align = beam_search_align(grid, beam)
    prefix = tuple(align.collapsed())
    if prefix:
        return prefix, -ctc_loss(PosteriorGrid(grid.probs), prefix).item()
    return prefix, float(np.log(np.maximum(grid.probs[:, BLANK], PROB_FLOOR)).sum())


# ---------------------------------------------------------------------------
# error-based sampling
# ---------------------------------------------------------------------------


def _utterance_stream(seed: int, utt_id: str, sample_index: int) -> np.random.Generator:
    uid = zlib.crc32(utt_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, uid, sample_index]))


def esa_selected_frames(grid: PosteriorGrid, threshold: float) -> np.ndarray:
    """Frames whose top posterior falls below the confidence threshold."""
    top1 = grid.probs.max(axis=1)
    return np.flatnonzero(top1 < threshold)


def esa_sample(grid: PosteriorGrid, cfg: EsaConfig, utt_id: str = "") -> list[Alignment]:
    """Best-path plus (S-1) resamples of the low-confidence frames.

    Sample 0 is always the plain best path. Every other sample keeps the
    top-1 token at confident frames and draws between the top-2 tokens at
    selected frames, uniformly or proportionally to their renormalised mass.
    Sample k is reproducible from (seed, utterance id, k) alone.
    """
    order = np.argsort(-grid.probs, axis=1, kind="stable")
    top1 = order[:, 0]
    top2 = order[:, 1] if grid.vocab > 1 else order[:, 0]
    p_top1 = grid.probs[np.arange(grid.frames), top1]
    p_top2 = grid.probs[np.arange(grid.frames), top2]
    selected = np.flatnonzero(p_top1 < cfg.threshold)
    logp = grid.log_probs()

    def path_of(labels: np.ndarray) -> Alignment:
        lp = float(logp[np.arange(grid.frames), labels].sum())
        return Alignment(labels=labels, logprob=lp)

    out = [path_of(top1.copy())]
    if cfg.distribution == "top2-renormalized" and selected.size:
        p_second = p_top2[selected] / (p_top1[selected] + p_top2[selected])
    else:
        p_second = np.full(selected.size, 0.5)
    for k in range(1, cfg.samples):
        labels = top1.copy()
        if selected.size:
            rng = _utterance_stream(cfg.seed, utt_id, k)
            take_second = rng.random(selected.size) < p_second
            labels[selected[take_second]] = top2[selected[take_second]]
        out.append(path_of(labels))
    return out


# ---------------------------------------------------------------------------
# serialisation and inspection
# ---------------------------------------------------------------------------


def grid_to_bytes(grid: PosteriorGrid) -> bytes:
    head = GRID_MAGIC + struct.pack("<II", grid.frames, grid.vocab)
    return head + np.ascontiguousarray(grid.probs).astype("<f8").tobytes()


def grid_from_bytes(buf: bytes) -> PosteriorGrid:
    if buf[:8] != GRID_MAGIC:
        raise CorruptRecordError(f"bad grid magic {buf[:8]!r}", offset=0)
    frames, vocab = struct.unpack("<II", buf[8:16])
    need = 16 + 8 * frames * vocab
    if len(buf) != need:
        raise CorruptRecordError(f"grid payload is {len(buf)} bytes, expected {need}", offset=min(len(buf), need))
    probs = np.frombuffer(buf[16:], dtype="<f8").astype(np.float64).reshape(frames, vocab)
    return PosteriorGrid(probs)


def grid_debug_text(grid: PosteriorGrid, alignment: Alignment) -> str:
    """One frame per line: index, chosen token, its posterior."""
    lines = []
    for t in range(grid.frames):
        lab = int(alignment.labels[t])
        lines.append(f"{t} {lab} {grid.probs[t, lab]:.6f}")
    return "\n".join(lines)
