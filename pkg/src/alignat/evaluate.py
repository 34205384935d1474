"""End-to-end decoding pipelines and corpus-level evaluation.

Modes mirror the alignment sources: per-frame best path, prefix beam search,
error-based sampling with candidate ranking, and the reference-forced oracle.
Sampled candidates are deduplicated (identical frame paths give identical
hypotheses) and decoded in one batch; ranking picks the best score with ties
broken by higher alignment log-probability, then first occurrence.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .alignmap import collapse, trigger_masks
from .errors import InfeasibleSequenceError
from .infer import FastAr, FastNat
from .lattice import (
    Alignment,
    EsaConfig,
    PosteriorGrid,
    beam_search_align,
    best_path_align,
    esa_sample,
    viterbi_align,
)
from .metrics import EditCounts, edit_alignment
from .data import Utterance

DECODE_MODES = ("bpa", "bsa", "esa", "oracle")
RANKERS = ("self", "at")
FRAME_PERIOD_S = 0.01  # nominal raw-frame hop


@dataclass
class Hypothesis:
    tokens: list[int]
    token_logprobs: np.ndarray
    alignment: Alignment
    rank_score: float
    mode: str
    empty: bool = False


@dataclass
class UttRecord:
    id: str
    reference: list[int]
    tokens: list[int]
    counts: EditCounts
    length_error: int      # |collapse(generated)| - |collapse(oracle)|
    mismatches: int        # D+I between collapsed alignments
    oracle_len: int
    rank_score: float
    empty: bool


@dataclass
class Bucket:
    count: int = 0
    errors: int = 0
    ref_tokens: int = 0

    @property
    def wer(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else 0.0


@dataclass
class EvalReport:
    mode: str
    ranker: str
    n_utterances: int
    wer: float
    mr: float
    lper: float
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int
    rtf: float | None = None
    rtf_relative_at: float | None = None
    histogram: dict[int, Bucket] = field(default_factory=dict)
    records: list[UttRecord] = field(default_factory=list)


def _rank(hyps: list[Hypothesis]) -> Hypothesis:
    """Highest score wins; ties prefer higher path log-probability, then the
    earliest candidate."""
    best = hyps[0]
    for h in hyps[1:]:
        if h.rank_score > best.rank_score or (
            h.rank_score == best.rank_score and h.alignment.logprob > best.alignment.logprob
        ):
            best = h
    return best


def rank_candidates(hyps: list[Hypothesis]) -> Hypothesis:
    if not hyps:
        raise ValueError("no candidates to rank")
    return _rank(hyps)


def _empty_hypothesis(alignment: Alignment, mode: str) -> Hypothesis:
    return Hypothesis(
        tokens=[], token_logprobs=np.zeros(0), alignment=alignment,
        rank_score=-np.inf, mode=mode, empty=True,
    )


def _candidate_alignments(
    grid: PosteriorGrid, utt_id: str, mode: str, esa_cfg: EsaConfig | None,
    beam: int, bsa_path: str, reference=None,
) -> list[Alignment]:
    if mode == "bpa":
        return [best_path_align(grid)]
    if mode == "bsa":
        return [beam_search_align(grid, beam, path_mode=bsa_path)]
    if mode == "esa":
        return esa_sample(grid, esa_cfg or EsaConfig(), utt_id)
    if mode == "oracle":
        if reference is None:
            raise ValueError("oracle mode requires a reference")
        return [viterbi_align(grid, reference)]
    raise ValueError(f"unknown decode mode {mode!r}")


def decode_encoded(
    fast: FastNat,
    hidden: np.ndarray,
    grid: PosteriorGrid,
    pad_mask: np.ndarray,
    utt_id: str,
    mode: str,
    esa_cfg: EsaConfig | None = None,
    beam: int = 10,
    ranker: str = "self",
    fast_ar: FastAr | None = None,
    ar_state=None,
    reference=None,
) -> Hypothesis:
    """Decode one utterance from precomputed encoder outputs."""
    cands = _candidate_alignments(
        grid, utt_id, mode, esa_cfg, beam, fast.cfg.bsa_path, reference=reference
    )
    seen: dict[tuple, Alignment] = {}
    for a in cands:
        key = tuple(a.labels.tolist())
        if key not in seen:
            seen[key] = a
    distinct = [a for a in seen.values() if collapse(a.labels)]
    if not distinct:
        return _empty_hypothesis(cands[0], mode)

    mask_sets = [trigger_masks(a.labels, extend_last=fast.cfg.extend_last) for a in distinct]
    logps = fast.decode_candidates(hidden, pad_mask, mask_sets)

    if ranker == "at" and fast_ar is not None and ar_state is None:
        raise ValueError("at ranker needs the baseline's encoder output")

    hyps: list[Hypothesis] = []
    for align, logp in zip(distinct, logps):
        tokens = logp.argmax(axis=1)
        token_lp = logp[np.arange(len(tokens)), tokens]
        if ranker == "at":
            ar_hidden, ar_pad = ar_state
            score = fast_ar.teacher_score(ar_hidden, ar_pad, tokens.tolist())
        else:
            score = float(token_lp.mean())
        hyps.append(
            Hypothesis(
                tokens=[int(t) for t in tokens],
                token_logprobs=token_lp,
                alignment=align,
                rank_score=score,
                mode=mode,
            )
        )
    return _rank(hyps)


def decode(
    fast: FastNat,
    utt: Utterance,
    mode: str,
    esa_cfg: EsaConfig | None = None,
    beam: int = 10,
    ranker: str = "self",
    fast_ar: FastAr | None = None,
    use_reference: bool = True,
) -> Hypothesis:
    """Full pipeline for one utterance: encode, align, extract, decode, rank."""
    hidden, grid, pad = fast.encode(utt.frames)
    ar_state = None
    if ranker == "at":
        if fast_ar is None:
            raise ValueError("at ranker requires the baseline model")
        ar_hidden, _, ar_pad = fast_ar.encode(utt.frames)
        ar_state = (ar_hidden, ar_pad)
    return decode_encoded(
        fast, hidden, grid, pad, utt.id, mode,
        esa_cfg=esa_cfg, beam=beam, ranker=ranker, fast_ar=fast_ar, ar_state=ar_state,
        reference=utt.tokens if use_reference else None,
    )


def evaluate_set(
    fast: FastNat,
    utts: list[Utterance],
    mode: str,
    esa_cfg: EsaConfig | None = None,
    beam: int = 10,
    ranker: str = "self",
    fast_ar: FastAr | None = None,
    workers: int = 1,
) -> EvalReport:
    """Decode a whole set and aggregate WER / MR / LPER plus the length-error
    histogram. Wall-clock timing is deliberately not part of this report."""

    def one(utt: Utterance) -> UttRecord:
        hidden, grid, pad = fast.encode(utt.frames)
        try:
            oracle = viterbi_align(grid, utt.tokens)
        except InfeasibleSequenceError:
            oracle = Alignment(labels=np.zeros(grid.frames, dtype=np.int64), logprob=0.0)
        ar_state = None
        if ranker == "at":
            ar_hidden, _, ar_pad = fast_ar.encode(utt.frames)
            ar_state = (ar_hidden, ar_pad)
        hyp = decode_encoded(
            fast, hidden, grid, pad, utt.id, mode,
            esa_cfg=esa_cfg, beam=beam, ranker=ranker, fast_ar=fast_ar, ar_state=ar_state,
            reference=utt.tokens,
        )
        gen_collapsed = collapse(hyp.alignment.labels) if not hyp.empty else []
        oracle_collapsed = collapse(oracle.labels)
        counts = edit_alignment(hyp.tokens, utt.tokens)
        boundary = edit_alignment(gen_collapsed, oracle_collapsed)
        return UttRecord(
            id=utt.id,
            reference=list(utt.tokens),
            tokens=hyp.tokens,
            counts=counts,
            length_error=len(gen_collapsed) - len(oracle_collapsed),
            mismatches=boundary.mismatches,
            oracle_len=len(oracle_collapsed),
            rank_score=hyp.rank_score,
            empty=hyp.empty,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, utts))
    else:
        records = [one(u) for u in utts]

    total_ref = sum(len(r.reference) for r in records)
    total_oracle = sum(r.oracle_len for r in records)
    subs = sum(r.counts.substitutions for r in records)
    dels = sum(r.counts.deletions for r in records)
    ins = sum(r.counts.insertions for r in records)
    histogram: dict[int, Bucket] = {}
    for r in records:
        b = histogram.setdefault(r.length_error, Bucket())
        b.count += 1
        b.errors += r.counts.errors
        b.ref_tokens += len(r.reference)
    return EvalReport(
        mode=mode,
        ranker=ranker,
        n_utterances=len(records),
        wer=(subs + dels + ins) / total_ref if total_ref else 0.0,
        mr=sum(r.mismatches for r in records) / total_oracle if total_oracle else 0.0,
        lper=sum(1 for r in records if r.length_error != 0) / len(records) if records else 0.0,
        substitutions=subs,
        deletions=dels,
        insertions=ins,
        ref_tokens=total_ref,
        histogram=dict(sorted(histogram.items())),
        records=records,
    )


@dataclass
class RtfResult:
    mode: str
    rtf: float
    decode_seconds: float
    audio_seconds: float


def measure_rtf(
    fast: FastNat | FastAr,
    utts: list[Utterance],
    mode: str,
    esa_cfg: EsaConfig | None = None,
    beam: int = 10,
    warmup: int = 2,
) -> RtfResult:
    """Strictly serial batch-of-one decoding; wall time over nominal audio time.

    ``mode="at"`` times the baseline's greedy loop on its own encoder.
    """
    audio_seconds = sum(u.frames.shape[0] for u in utts) * FRAME_PERIOD_S

    def run(utt: Utterance) -> None:
        if mode == "at":
            hidden, _, pad = fast.encode(utt.frames)
            # a collapse can never exceed the encoder frame count
            fast.greedy(hidden, pad, max_len=int(pad.sum()))
        else:
            hidden, grid, pad = fast.encode(utt.frames)
            decode_encoded(
                fast, hidden, grid, pad, utt.id, mode,
                esa_cfg=esa_cfg, beam=beam,
                reference=utt.tokens if mode == "oracle" else None,
            )

    for utt in utts[: min(warmup, len(utts))]:
        run(utt)
    start = time.perf_counter()
    for utt in utts:
        run(utt)
    elapsed = time.perf_counter() - start
    return RtfResult(mode=mode, rtf=elapsed / audio_seconds, decode_seconds=elapsed, audio_seconds=audio_seconds)
