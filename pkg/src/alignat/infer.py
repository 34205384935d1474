"""Vectorised, graph-free forward passes for decoding and benchmarking.

This mirrors the autodiff forward in eval mode (no dropout) on raw numpy
arrays, sharing the training network's parameter storage. The design point:
all sampled alignments of an utterance decode in ONE padded batch, with the
encoder-side attention keys/values projected once and shared across
candidates — so candidate count barely moves wall time. The autoregressive
baseline, by contrast, reruns its full decoder per emitted token (the
straightforward greedy loop, no state caching).

Equivalence with the autodiff path is asserted in the test suite (1e-9).
"""

from __future__ import annotations

import math

import numpy as np

from .alignmap import TriggerMaskSet
from .errors import ShapeMismatchError
from .lattice import PosteriorGrid
from .model import ArModel, NatModel, _Network
from .numerics.ops import sinusoidal_positional_encoding

_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _pe(length: int, width: int) -> np.ndarray:
    key = (length, width)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = sinusoidal_positional_encoding(length, width)
    return _PE_CACHE[key]


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class FastModel:
    """Read-only inference view over a network's parameters."""

    def __init__(self, net: _Network):
        self.cfg = net.cfg
        self.net = net

    @property
    def p(self) -> dict[str, np.ndarray]:
        # live views: reflects any parameter updates on the owning network
        return {name: t.data for name, t in self.net.params.items()}

    # -- building blocks ----------------------------------------------------

    def _heads(self, x: np.ndarray) -> np.ndarray:
        """(n, d) -> (h, n, d_head)."""
        n = x.shape[0]
        return x.reshape(n, self.cfg.heads, -1).transpose(1, 0, 2)

    def _kv(self, p, prefix: str, x_kv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project attention keys/values once; reusable across queries."""
        k = self._heads(x_kv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"])
        v = self._heads(x_kv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"])
        return k, v

    def _attend(self, p, prefix: str, x_q: np.ndarray, kv, keep: np.ndarray) -> np.ndarray:
        """2-D masked attention with precomputed (h, n_k, d_head) keys/values."""
        cfg = self.cfg
        k, v = kv
        d_head = cfg.d_model // cfg.heads
        q = self._heads(x_q @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
        scores = np.matmul(q, k.transpose(0, 2, 1)) / math.sqrt(d_head)
        if cfg.mask_mode == "literal":
            w = _softmax(scores) * keep[None]
        else:
            w = _softmax(np.where(keep[None], scores, -1.0e30))
        out = np.matmul(w, v).transpose(1, 0, 2).reshape(x_q.shape[0], cfg.d_model)
        return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]

    def _mha2d(self, p, prefix: str, x_q: np.ndarray, x_kv: np.ndarray, keep: np.ndarray) -> np.ndarray:
        return self._attend(p, prefix, x_q, self._kv(p, prefix, x_kv), keep)

    def _ffn(self, p, prefix: str, x: np.ndarray) -> np.ndarray:
        h = x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]
        np.maximum(h, 0.0, out=h)
        return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    def _lnp(self, p, prefix: str, x: np.ndarray) -> np.ndarray:
        return _ln(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    # -- encoder -------------------------------------------------------------

    def encode(self, features: np.ndarray, valid_raw: int | None = None):
        """Returns (hidden (T', d), grid over valid frames, pad_mask)."""
        cfg = self.cfg
        p = self.p
        features = np.asarray(features, dtype=np.float64)
        t_raw = features.shape[0]
        if valid_raw is None:
            valid_raw = t_raw
        factor = cfg.subsample_factor
        n_frames = -(-t_raw // factor)
        if valid_raw < t_raw:
            features = features.copy()
            features[valid_raw:] = 0.0
        if cfg.frontend == "stack":
            padded = np.zeros((n_frames * factor, cfg.d_feat))
            padded[:t_raw] = features
            x = padded.reshape(n_frames, factor * cfg.d_feat) @ p["frontend.w"] + p["frontend.b"]
        else:
            x = self._conv_frontend(p, features)
        n_valid = -(-valid_raw // factor)
        pad_mask = np.arange(n_frames) < n_valid

        x = x * math.sqrt(cfg.d_model) + _pe(n_frames, cfg.d_model)
        keep = np.broadcast_to(pad_mask, (n_frames, n_frames))
        for i in range(cfg.n_enc):
            ln1 = self._lnp(p, f"enc.{i}.ln1", x)
            x = x + self._mha2d(p, f"enc.{i}.attn", ln1, ln1, keep)
            x = x + self._ffn(p, f"enc.{i}.ffn", self._lnp(p, f"enc.{i}.ln2", x))
        hidden = self._lnp(p, "enc.final_ln", x)
        logits = hidden @ p["ctc.w"] + p["ctc.b"]
        grid = PosteriorGrid(_softmax(logits[:n_valid]))
        return hidden, grid, pad_mask

    def _conv_frontend(self, p, features: np.ndarray) -> np.ndarray:
        from .numerics.ops import conv2d, conv_frames
        from .numerics.tensor import Tensor

        h1 = conv2d(Tensor(features[None]), Tensor(p["frontend.conv1.w"]), Tensor(p["frontend.conv1.b"]))
        h1 = Tensor(np.maximum(h1.data, 0.0))
        h2 = conv2d(h1, Tensor(p["frontend.conv2.w"]), Tensor(p["frontend.conv2.b"]))
        frames = conv_frames(Tensor(np.maximum(h2.data, 0.0)))
        return frames.data @ p["frontend.w"] + p["frontend.b"]


class FastNat(FastModel):
    """Batched single-pass decoding over any number of candidate alignments."""

    def __init__(self, net: NatModel):
        super().__init__(net)

    def _batch_attend(self, p, prefix, x, kv_shared, keep) -> np.ndarray:
        """(s, u, d) queries against shared (h, T, d_head) keys/values."""
        cfg = self.cfg
        s, u, d = x.shape
        d_head = d // cfg.heads
        k, v = kv_shared
        q = (x.reshape(s * u, d) @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
        q = q.reshape(s, u, cfg.heads, d_head).transpose(0, 2, 1, 3)       # (s,h,u,dh)
        scores = np.matmul(q, k.transpose(0, 2, 1)[None]) / math.sqrt(d_head)  # (s,h,u,T)
        if cfg.mask_mode == "literal":
            w = _softmax(scores) * keep[:, None]
        else:
            w = _softmax(np.where(keep[:, None], scores, -1.0e30))
        out = np.matmul(w, v[None]).transpose(0, 2, 1, 3).reshape(s * u, d)
        return (out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]).reshape(s, u, d)

    def _batch_self(self, p, prefix, x, keep) -> np.ndarray:
        cfg = self.cfg
        s, u, d = x.shape
        d_head = d // cfg.heads
        flat = x.reshape(s * u, d)

        def proj(tag):
            y = flat @ p[f"{prefix}.w{tag}"] + p[f"{prefix}.b{tag}"]
            return y.reshape(s, u, cfg.heads, d_head).transpose(0, 2, 1, 3)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) / math.sqrt(d_head)
        if cfg.mask_mode == "literal":
            w = _softmax(scores) * keep[:, None]
        else:
            w = _softmax(np.where(keep[:, None], scores, -1.0e30))
        out = np.matmul(w, v).transpose(0, 2, 1, 3).reshape(s * u, d)
        return (out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]).reshape(s, u, d)

    def _batch_ffn(self, p, prefix, x) -> np.ndarray:
        s, u, d = x.shape
        flat = x.reshape(s * u, d)
        h = flat @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]
        np.maximum(h, 0.0, out=h)
        return (h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]).reshape(s, u, d)

    def decode_candidates(
        self,
        hidden: np.ndarray,
        pad_mask: np.ndarray,
        mask_sets: list[TriggerMaskSet],
    ) -> list[np.ndarray]:
        """Token log-probabilities for every candidate, one parallel pass.

        Candidates are padded to a common token count; padded query rows
        attend to the valid frames (their outputs are never read) and padded
        token columns are blocked so they cannot leak into real positions.
        """
        cfg = self.cfg
        p = self.p
        s = len(mask_sets)
        if s == 0:
            raise ShapeMismatchError("no candidates to decode")
        n_total = hidden.shape[0]
        u_max = max(ms.token_count for ms in mask_sets)
        u_valid = np.array([ms.token_count for ms in mask_sets])

        trigger = np.zeros((s, u_max, n_total), dtype=bool)
        for i, ms in enumerate(mask_sets):
            trigger[i, : ms.token_count, : ms.frame_count] = ms.masks
            trigger[i, ms.token_count :, : ms.frame_count] = pad_mask[: ms.frame_count]
        rows_valid = np.arange(u_max)[None, :] < u_valid[:, None]          # (s, u_max)
        self_keep = np.broadcast_to(rows_valid[:, None, :], (s, u_max, u_max))
        src_keep = np.broadcast_to(pad_mask, (s, u_max, n_total))

        x = np.broadcast_to(_pe(u_max, cfg.d_model), (s, u_max, cfg.d_model))
        x = x + self._batch_attend(
            p, "ext.attn", self._lnp(p, "ext.ln_q", x), self._kv(p, "ext.attn", hidden), trigger
        )
        x = x + self._batch_ffn(p, "ext.ffn", self._lnp(p, "ext.ln2", x))

        for i in range(cfg.n_self):
            ln1 = self._lnp(p, f"dec.self{i}.ln1", x)
            x = x + self._batch_self(p, f"dec.self{i}.attn", ln1, self_keep)
            x = x + self._batch_ffn(p, f"dec.self{i}.ffn", self._lnp(p, f"dec.self{i}.ln2", x))
        for i in range(cfg.n_mix):
            ln1 = self._lnp(p, f"dec.mix{i}.ln1", x)
            x = x + self._batch_self(p, f"dec.mix{i}.self_attn", ln1, self_keep)
            x = x + self._batch_attend(
                p, f"dec.mix{i}.src_attn", self._lnp(p, f"dec.mix{i}.ln2", x),
                self._kv(p, f"dec.mix{i}.src_attn", hidden), src_keep,
            )
            x = x + self._batch_ffn(p, f"dec.mix{i}.ffn", self._lnp(p, f"dec.mix{i}.ln3", x))
        x = self._lnp(p, "dec.final_ln", x)
        logits = x.reshape(s * u_max, cfg.d_model) @ p["dec.out.w"] + p["dec.out.b"]
        logp = _log_softmax(logits).reshape(s, u_max, cfg.n_classes)
        return [logp[i, : ms.token_count] for i, ms in enumerate(mask_sets)]

    def decode_single(self, hidden, pad_mask, mask_set: TriggerMaskSet) -> np.ndarray:
        return self.decode_candidates(hidden, pad_mask, [mask_set])[0]


class FastAr(FastModel):
    """Greedy decoding and teacher-forced scoring for the causal baseline."""

    def __init__(self, net: ArModel):
        super().__init__(net)

    def _decoder_pass(self, p, ids: list[int], hidden: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        n = len(ids)
        x = p["at.embed"][np.asarray(ids)] * math.sqrt(cfg.d_model) + _pe(n, cfg.d_model)
        causal = np.tril(np.ones((n, n), dtype=bool))
        src = np.broadcast_to(pad_mask, (n, pad_mask.size))
        for i in range(cfg.n_dec_at):
            ln1 = self._lnp(p, f"at.dec{i}.ln1", x)
            x = x + self._mha2d(p, f"at.dec{i}.self_attn", ln1, ln1, causal)
            x = x + self._mha2d(p, f"at.dec{i}.src_attn", self._lnp(p, f"at.dec{i}.ln2", x), hidden, src)
            x = x + self._ffn(p, f"at.dec{i}.ffn", self._lnp(p, f"at.dec{i}.ln3", x))
        x = self._lnp(p, "at.final_ln", x)
        return x @ p["at.out.w"] + p["at.out.b"]

    def greedy(self, hidden: np.ndarray, pad_mask: np.ndarray, max_len: int) -> tuple[list[int], list[float]]:
        """Left-to-right argmax decoding; recomputes the full prefix each step."""
        cfg = self.cfg
        p = self.p
        ids = [cfg.sos_id]
        logprobs: list[float] = []
        for _ in range(max_len):
            logits = self._decoder_pass(p, ids, hidden, pad_mask)
            last = logits[-1].copy()
            last[cfg.sos_id] = -np.inf
            logp = _log_softmax(last[None])[0]
            nxt = int(logp.argmax())
            if nxt == cfg.eos_id:
                break
            ids.append(nxt)
            logprobs.append(float(logp[nxt]))
        return ids[1:], logprobs

    def teacher_score(self, hidden: np.ndarray, pad_mask: np.ndarray, tokens) -> float:
        """Length-normalised log probability of the token sequence plus EOS."""
        cfg = self.cfg
        ids = [cfg.sos_id] + list(tokens)
        targets = list(tokens) + [cfg.eos_id]
        logits = self._decoder_pass(self.p, ids, hidden, pad_mask)
        logp = _log_softmax(logits)
        picked = logp[np.arange(len(targets)), targets]
        return float(picked.mean())
