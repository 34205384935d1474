"""Lattice operations against exhaustive enumeration and hand-worked cases."""

import numpy as np
import pytest

from alignat.errors import InfeasibleSequenceError
from alignat.lattice import (
    Alignment,
    EsaConfig,
    PosteriorGrid,
    beam_search_align,
    beam_search_score,
    best_path_align,
    ctc_loss,
    esa_sample,
    esa_selected_frames,
    grid_debug_text,
    grid_from_bytes,
    grid_to_bytes,
    viterbi_align,
)
from alignat.numerics import Tensor, finite_difference_check, row_softmax

from fixtures import fig2_grid, random_grid
from oracles import brute_best_prefix, brute_ctc_neg_logprob, brute_viterbi


def random_reference(rng, vocab, max_len, n_frames):
    while True:
        n = int(rng.integers(1, max_len + 1))
        y = rng.integers(1, vocab, size=n).tolist()
        need = n + sum(1 for a, b in zip(y, y[1:]) if a == b)
        if need <= n_frames:
            return y


class TestCtcLoss:
    def test_single_frame_single_token(self):
        rng = np.random.default_rng(7)
        grid = random_grid(rng, 1, 4)
        loss = ctc_loss(grid, [2]).item()
        assert loss == pytest.approx(-np.log(grid.probs[0, 2]), abs=1e-12)

    def test_three_frame_uniform_hand_enumeration(self):
        # vocab {blank, a}, uniform rows: 6 of the 8 paths collapse to [a]
        grid = PosteriorGrid(np.full((3, 2), 0.5))
        assert ctc_loss(grid, [1]).item() == pytest.approx(-np.log(6 / 8), abs=1e-12)

    def test_matches_enumeration_on_random_grids(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            n_frames = int(rng.integers(1, 9))
            vocab = int(rng.integers(2, 6))
            grid = random_grid(rng, n_frames, vocab)
            y = random_reference(rng, vocab, 3, n_frames)
            assert ctc_loss(grid, y).item() == pytest.approx(
                brute_ctc_neg_logprob(grid.probs, y), abs=1e-6
            )

    def test_infeasible_reference_raises(self):
        grid = PosteriorGrid(np.full((2, 3), 1 / 3))
        with pytest.raises(InfeasibleSequenceError):
            ctc_loss(grid, [1, 1])  # needs 3 frames (repeat slot)
        with pytest.raises(InfeasibleSequenceError):
            ctc_loss(grid, [])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)

        def build():
            probs = row_softmax(logits)
            return ctc_loss(PosteriorGrid(probs.data, source=probs), [1, 2, 1])

        assert finite_difference_check(build, [logits]) < 1e-4


class TestViterbi:
    def test_peaked_grid_recovers_reference_verbatim(self):
        y = [3, 1, 2]
        probs = np.full((3, 4), 0.01)
        for t, tok in enumerate(y):
            probs[t, tok] = 1 - 0.03
        grid = PosteriorGrid(probs / probs.sum(axis=1, keepdims=True))
        out = viterbi_align(grid, y)
        assert out.labels.tolist() == y

    def test_matches_brute_force_on_random_grids(self):
        rng = np.random.default_rng(17)
        for _ in range(60):
            n_frames = int(rng.integers(1, 9))
            vocab = int(rng.integers(2, 6))
            grid = random_grid(rng, n_frames, vocab)
            y = random_reference(rng, vocab, 3, n_frames)
            got = viterbi_align(grid, y)
            want_path, want_score = brute_viterbi(grid.probs, y)
            assert got.logprob == pytest.approx(want_score, abs=1e-9)
            assert got.labels.tolist() == want_path.tolist()

    def test_tie_rule_matches_brute_force_on_uniform_grid(self):
        # every path has the same score; the fixed tie rule decides alone
        for n_frames, y in [(4, [1]), (5, [1, 2]), (6, [2, 2])]:
            grid = PosteriorGrid(np.full((n_frames, 3), 1 / 3))
            got = viterbi_align(grid, y)
            want_path, want_score = brute_viterbi(grid.probs, y)
            assert got.labels.tolist() == want_path.tolist()
            assert got.logprob == pytest.approx(want_score, abs=0)

    def test_collapse_always_equals_reference(self):
        rng = np.random.default_rng(19)
        for _ in range(80):
            n_frames = int(rng.integers(1, 10))
            vocab = int(rng.integers(2, 7))
            grid = random_grid(rng, n_frames, vocab)
            y = random_reference(rng, vocab, 4, n_frames)
            assert viterbi_align(grid, y).collapsed() == y

    def test_sum_dominates_max(self):
        rng = np.random.default_rng(23)
        for _ in range(40):
            grid = random_grid(rng, int(rng.integers(2, 9)), 4)
            y = random_reference(rng, 4, 3, grid.frames)
            assert -ctc_loss(grid, y).item() >= viterbi_align(grid, y).logprob - 1e-12


class TestBestPath:
    def test_one_hot_rows_recover_sequence(self):
        seq = [0, 2, 2, 0, 1]
        probs = np.full((5, 3), 0.005)
        for t, tok in enumerate(seq):
            probs[t, tok] = 0.99
        out = best_path_align(PosteriorGrid(probs))
        assert out.labels.tolist() == seq

    def test_fig2_fragment(self):
        out = best_path_align(fig2_grid())
        assert out.labels.tolist() == [1, 1, 0, 2, 0, 3, 3, 4, 0]
        assert out.collapsed() == [1, 2, 3, 4]  # length 4

    def test_ties_take_lowest_token_id(self):
        probs = np.array([[0.4, 0.4, 0.2]])
        assert best_path_align(PosteriorGrid(probs)).labels.tolist() == [0]


class TestBeamSearch:
    def test_beam_one_equals_best_path_when_collapses_agree(self):
        probs = np.array(
            [
                [0.1, 0.8, 0.1],
                [0.7, 0.2, 0.1],
                [0.1, 0.1, 0.8],
            ]
        )
        grid = PosteriorGrid(probs)
        bpa = best_path_align(grid)
        bsa = beam_search_align(grid, beam=1)
        assert bsa.collapsed() == bpa.collapsed()
        assert bsa.labels.tolist() == bpa.labels.tolist()

    def test_best_prefix_matches_enumeration(self):
        rng = np.random.default_rng(29)
        for _ in range(25):
            n_frames = int(rng.integers(1, 6))
            vocab = int(rng.integers(2, 4))
            grid = random_grid(rng, n_frames, vocab)
            prefix, pooled = beam_search_score(grid, beam=64)
            want_prefix, want_logp = brute_best_prefix(grid.probs)
            assert prefix == want_prefix
            assert pooled == pytest.approx(want_logp, abs=1e-9)

    def test_score_improves_with_beam_width(self):
        # Pruned prefix search is not strictly monotone per instance (survivor
        # sets are not nested), so the property is pinned in its true form:
        # every beam is bounded by the unpruned search, and widening the beam
        # improves the score in aggregate over a seeded batch.
        rng = np.random.default_rng(31)
        widths = (1, 2, 4, 8, 16)
        sums = {b: 0.0 for b in widths}
        for _ in range(25):
            grid = random_grid(rng, 6, 4)
            exact = beam_search_score(grid, beam=10**6)[1]
            for b in widths:
                s = beam_search_score(grid, beam=b)[1]
                assert s <= exact + 1e-9
                sums[b] += s
        totals = [sums[b] for b in widths]
        assert all(b >= a - 1e-9 for a, b in zip(totals, totals[1:]))

    def test_tracked_path_collapses_to_winning_prefix(self):
        rng = np.random.default_rng(37)
        for _ in range(20):
            grid = random_grid(rng, 7, 4)
            out = beam_search_align(grid, beam=8)
            prefix, _ = beam_search_score(grid, beam=8)
            assert tuple(out.collapsed()) == prefix
            assert out.labels.size == grid.frames

    def test_realigned_mode_returns_viterbi_path(self):
        rng = np.random.default_rng(41)
        grid = random_grid(rng, 7, 4)
        tracked = beam_search_align(grid, beam=8, path_mode="tracked")
        realigned = beam_search_align(grid, beam=8, path_mode="realigned")
        assert realigned.collapsed() == tracked.collapsed()
        want = viterbi_align(grid, tracked.collapsed())
        assert realigned.labels.tolist() == want.labels.tolist()


class TestEsa:
    def test_fig2_selection_and_lengths(self):
        grid = fig2_grid()
        selected = esa_selected_frames(grid, 0.7)
        assert selected.tolist() == [2, 4, 5, 6]  # frames 3,5,6,7 one-based

        cfg = EsaConfig(threshold=0.7, samples=400, seed=5)
        samples = esa_sample(grid, cfg, utt_id="fig2")
        assert samples[0].collapsed() == [1, 2, 3, 4]
        lengths = {len(s.collapsed()) for s in samples}
        assert lengths == {3, 4, 5}

    def test_threshold_below_everything_collapses_to_best_path(self):
        grid = fig2_grid()
        bpa = best_path_align(grid)
        cfg = EsaConfig(threshold=1e-6, samples=8, seed=1)
        for s in esa_sample(grid, cfg, utt_id="x"):
            assert s.labels.tolist() == bpa.labels.tolist()

    def test_unselected_frames_identical_to_best_path(self):
        rng = np.random.default_rng(43)
        grid = random_grid(rng, 10, 5)
        bpa = best_path_align(grid)
        selected = set(esa_selected_frames(grid, 0.7).tolist())
        cfg = EsaConfig(threshold=0.7, samples=30, seed=2)
        for s in esa_sample(grid, cfg, utt_id="y"):
            for t in range(grid.frames):
                if t not in selected:
                    assert s.labels[t] == bpa.labels[t]

    def test_top2_uniform_frequency(self):
        grid = fig2_grid()
        cfg = EsaConfig(threshold=0.7, samples=10001, seed=9)
        samples = esa_sample(grid, cfg, utt_id="freq")
        draws = np.array([s.labels for s in samples[1:]])
        top1 = grid.probs.argmax(axis=1)
        n = len(samples) - 1
        sigma = np.sqrt(0.25 / n)
        for t in esa_selected_frames(grid, 0.7):
            freq = np.mean(draws[:, t] == top1[t])
            assert abs(freq - 0.5) < 3 * sigma + 1e-9

    def test_sample_k_reproducible_and_nested(self):
        grid = fig2_grid()
        a = esa_sample(grid, EsaConfig(samples=10, seed=3), utt_id="u1")
        b = esa_sample(grid, EsaConfig(samples=50, seed=3), utt_id="u1")
        for k in range(10):
            assert a[k].labels.tolist() == b[k].labels.tolist()
        c = esa_sample(grid, EsaConfig(samples=10, seed=3), utt_id="u2")
        assert any(x.labels.tolist() != y.labels.tolist() for x, y in zip(a, c))

    def test_renormalized_distribution_prefers_heavier_token(self):
        probs = np.zeros((200, 3))
        probs[:, 0] = 0.60
        probs[:, 1] = 0.35
        probs[:, 2] = 0.05
        grid = PosteriorGrid(probs)
        cfg = EsaConfig(threshold=0.7, samples=2, seed=11, distribution="top2-renormalized")
        s = esa_sample(grid, cfg, utt_id="z")[1]
        frac_top1 = np.mean(s.labels == 0)
        assert 0.55 < frac_top1 < 0.72  # expect 0.60/0.95 ~ 0.63

    def test_collapsed_length_can_fluctuate(self):
        grid = fig2_grid()
        cfg = EsaConfig(threshold=0.7, samples=64, seed=13)
        lens = {len(s.collapsed()) for s in esa_sample(grid, cfg, utt_id="flux")}
        assert len(lens) > 1


class TestAlignmentInvariants:
    def test_collapse_plus_repeats_bounded_by_frames(self):
        rng = np.random.default_rng(47)
        for _ in range(200):
            n = int(rng.integers(1, 12))
            labels = rng.integers(0, 4, size=n)
            coll = Alignment(labels, 0.0).collapsed()
            repeats = sum(1 for a, b in zip(coll, coll[1:]) if a == b)
            assert len(coll) + repeats <= n

    def test_no_underflow_on_floored_grids(self):
        probs = np.full((4, 3), 1e-13)
        probs[:, 0] = 1.0 - 2e-13
        grid = PosteriorGrid(probs)
        out = viterbi_align(grid, [1])
        assert np.isfinite(out.logprob)
        assert np.isfinite(ctc_loss(grid, [1]).item())


class TestGridSerialisation:
    def test_round_trip(self):
        rng = np.random.default_rng(53)
        grid = random_grid(rng, 6, 5)
        back = grid_from_bytes(grid_to_bytes(grid))
        assert np.array_equal(back.probs, grid.probs)

    def test_truncated_payload_reports_offset(self):
        rng = np.random.default_rng(59)
        buf = grid_to_bytes(random_grid(rng, 6, 5))
        from alignat.errors import CorruptRecordError

        with pytest.raises(CorruptRecordError):
            grid_from_bytes(buf[:-8])

    def test_debug_text_one_frame_per_line(self):
        grid = fig2_grid()
        out = best_path_align(grid)
        text = grid_debug_text(grid, out)
        lines = text.splitlines()
        assert len(lines) == grid.frames
        assert lines[0] == "0 1 0.900000"
