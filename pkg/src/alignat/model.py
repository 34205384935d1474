"""The two networks: the alignment-triggered parallel decoder and an
autoregressive baseline sharing the same encoder recipe.

The parallel model runs encoder -> token-posterior head -> (alignment chosen
outside the graph) -> trigger-masked token extractor -> bidirectional decoder,
and emits every output position in one pass. The baseline replaces the
extractor/decoder with word embeddings and a causal decoder.

Training objective: label-smoothed token cross entropy on the decoder output
plus ``task_ratio`` times the lattice loss on the posterior head. The
alignment used to build trigger masks is the forced alignment of the current
posteriors against the reference and carries no gradient (hard latent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignmap import TriggerMaskSet, trigger_masks
from .errors import InfeasibleSequenceError, ShapeMismatchError
from .lattice import PosteriorGrid, ctc_loss, min_frames_required, viterbi_align
from .numerics import (
    AttentionMask,
    MhaParams,
    Tensor,
    conv2d,
    conv_frames,
    cross_entropy_label_smoothed,
    dropout,
    embedding_lookup,
    feed_forward,
    layer_norm,
    matmul,
    mul,
    multi_head_attention,
    parameter,
    relu,
    row_softmax,
    sinusoidal_positional_encoding,
    slice_rows,
)

FRONTENDS = ("stack", "conv")


@dataclass
class ModelConfig:
    d_feat: int = 16
    n_enc: int = 4
    n_self: int = 2
    n_mix: int = 2
    n_dec_at: int = 4
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    vocab: int = 32
    blank: int = 0
    subsample_factor: int = 4
    frontend: str = "stack"
    conv_channels: int = 64
    dropout: float = 0.1
    label_smooth: float = 0.1
    task_ratio: float = 1.0
    mask_mode: str = "presoftmax"
    extend_last: bool = False
    bsa_path: str = "tracked"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ShapeMismatchError(f"{self.heads} heads do not divide d_model={self.d_model}")
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be >= 1")
        if self.task_ratio < 0:
            raise ValueError("task_ratio must be >= 0")
        if self.frontend not in FRONTENDS:
            raise ValueError(f"frontend must be one of {FRONTENDS}")

    @property
    def n_classes(self) -> int:
        """Posterior/decoder classes: tokens 1..vocab plus blank 0."""
        return self.vocab + 1

    @property
    def sos_id(self) -> int:
        return self.vocab + 1

    @property
    def eos_id(self) -> int:
        return self.vocab + 2

    @property
    def n_at_classes(self) -> int:
        return self.vocab + 3


@dataclass
class EncoderOutput:
    hidden: Tensor            # (T'_total, d_model), includes padded rows if any
    grid: PosteriorGrid       # valid rows only; source tensor attached
    pad_mask: np.ndarray      # bool over T'_total, True where the frame is real
    n_frames: int             # valid encoder frames


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_in, fan_out))


class _ParamFactory:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def weight(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        t = parameter(_xavier(self.rng, fan_in, fan_out, shape), name)
        self.params[name] = t
        return t

    def zeros(self, name: str, shape) -> Tensor:
        t = parameter(np.zeros(shape), name)
        self.params[name] = t
        return t

    def ones(self, name: str, shape) -> Tensor:
        t = parameter(np.ones(shape), name)
        self.params[name] = t
        return t

    def mha(self, prefix: str, width: int) -> MhaParams:
        return MhaParams(
            wq=self.weight(f"{prefix}.wq", width, width), bq=self.zeros(f"{prefix}.bq", width),
            wk=self.weight(f"{prefix}.wk", width, width), bk=self.zeros(f"{prefix}.bk", width),
            wv=self.weight(f"{prefix}.wv", width, width), bv=self.zeros(f"{prefix}.bv", width),
            wo=self.weight(f"{prefix}.wo", width, width), bo=self.zeros(f"{prefix}.bo", width),
        )

    def ln(self, prefix: str, width: int) -> tuple[Tensor, Tensor]:
        return self.ones(f"{prefix}.g", width), self.zeros(f"{prefix}.b", width)

    def ffn(self, prefix: str, width: int, hidden: int):
        return (
            self.weight(f"{prefix}.w1", width, hidden),
            self.zeros(f"{prefix}.b1", hidden),
            self.weight(f"{prefix}.w2", hidden, width),
            self.zeros(f"{prefix}.b2", width),
        )


def _build_encoder(f: _ParamFactory, cfg: ModelConfig) -> None:
    d = cfg.d_model
    if cfg.frontend == "stack":
        f.weight("frontend.w", cfg.subsample_factor * cfg.d_feat, d)
        f.zeros("frontend.b", d)
    else:
        c = cfg.conv_channels
        f.weight("frontend.conv1.w", 9, 9 * c, shape=(c, 1, 3, 3))
        f.zeros("frontend.conv1.b", c)
        f.weight("frontend.conv2.w", 9 * c, 9 * c, shape=(c, c, 3, 3))
        f.zeros("frontend.conv2.b", c)
        feat_cols = math.ceil(math.ceil(cfg.d_feat / 2) / 2)
        f.weight("frontend.w", feat_cols * c, d)
        f.zeros("frontend.b", d)
    for i in range(cfg.n_enc):
        f.ln(f"enc.{i}.ln1", d)
        f.mha(f"enc.{i}.attn", d)
        f.ln(f"enc.{i}.ln2", d)
        f.ffn(f"enc.{i}.ffn", d, cfg.d_ff)
    f.ln("enc.final_ln", d)
    f.weight("ctc.w", d, cfg.n_classes)
    f.zeros("ctc.b", cfg.n_classes)


ENCODER_PREFIXES = ("frontend.", "enc.", "ctc.")


def encoder_param_names(params: dict[str, Tensor]) -> list[str]:
    return [n for n in params if n.startswith(ENCODER_PREFIXES)]


class _Network:
    """Shared plumbing: parameter table, encoder forward."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        factory = _ParamFactory(np.random.default_rng(np.random.SeedSequence([seed, 0xA11])))
        _build_encoder(factory, cfg)
        self._build_rest(factory)
        self.params = factory.params

    def _build_rest(self, f: _ParamFactory) -> None:
        raise NotImplementedError

    # -- parameter table ----------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], subset: bool = False) -> None:
        names = arrays.keys() if subset else self.params.keys()
        for name in names:
            if name not in self.params:
                raise ShapeMismatchError(f"unknown parameter {name!r} in checkpoint")
            if name not in arrays:
                raise ShapeMismatchError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != self.params[name].data.shape:
                raise ShapeMismatchError(
                    f"parameter {name!r}: checkpoint {arrays[name].shape} vs model {self.params[name].data.shape}"
                )
            self.params[name].data = np.ascontiguousarray(arrays[name], dtype=np.float64)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _mha_params(self, prefix: str) -> MhaParams:
        p = self.params
        return MhaParams(
            wq=p[f"{prefix}.wq"], bq=p[f"{prefix}.bq"],
            wk=p[f"{prefix}.wk"], bk=p[f"{prefix}.bk"],
            wv=p[f"{prefix}.wv"], bv=p[f"{prefix}.bv"],
            wo=p[f"{prefix}.wo"], bo=p[f"{prefix}.bo"],
        )

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return feed_forward(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    # -- encoder -------------------------------------------------------------

    def _frontend(self, features: np.ndarray) -> Tensor:
        cfg = self.cfg
        t_raw = features.shape[0]
        n_frames = -(-t_raw // cfg.subsample_factor)
        if cfg.frontend == "stack":
            padded = np.zeros((n_frames * cfg.subsample_factor, cfg.d_feat))
            padded[:t_raw] = features
            stacked = Tensor(padded.reshape(n_frames, cfg.subsample_factor * cfg.d_feat))
            return matmul(stacked, self._p("frontend.w")) + self._p("frontend.b")
        image = Tensor(features[None, :, :])
        h1 = relu(conv2d(image, self._p("frontend.conv1.w"), self._p("frontend.conv1.b")))
        h2 = relu(conv2d(h1, self._p("frontend.conv2.w"), self._p("frontend.conv2.b")))
        return matmul(conv_frames(h2), self._p("frontend.w")) + self._p("frontend.b")

    def encode(
        self,
        features: np.ndarray,
        valid_raw: int | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> EncoderOutput:
        """Subsample, run the self-attention stack, and emit token posteriors."""
        cfg = self.cfg
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != cfg.d_feat:
            raise ShapeMismatchError(f"features must be (T, {cfg.d_feat})")
        t_raw = features.shape[0]
        if valid_raw is None:
            valid_raw = t_raw
        if valid_raw < cfg.subsample_factor:
            raise InfeasibleSequenceError(
                f"need at least {cfg.subsample_factor} raw frames, got {valid_raw}"
            )
        if valid_raw < t_raw:
            # padding rows must not bleed into the last valid subsample group
            features = features.copy()
            features[valid_raw:] = 0.0

        x = self._frontend(features)
        n_total = x.shape[0]
        n_valid = -(-valid_raw // cfg.subsample_factor)
        pad_mask = np.arange(n_total) < n_valid

        pe = sinusoidal_positional_encoding(n_total, cfg.d_model)
        x = mul(x, math.sqrt(cfg.d_model)) + pe
        x = dropout(x, cfg.dropout, rng, train)

        # every query may see exactly the valid frames
        bits = np.broadcast_to(pad_mask, (n_total, n_total))
        bi = AttentionMask(np.ascontiguousarray(bits))
        for i in range(cfg.n_enc):
            ln1 = self._ln(f"enc.{i}.ln1", x)
            attn = multi_head_attention(ln1, ln1, bi, self._mha_params(f"enc.{i}.attn"),
                                        cfg.heads, mode=cfg.mask_mode)
            x = x + dropout(attn, cfg.dropout, rng, train)
            x = x + dropout(self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln2", x)), cfg.dropout, rng, train)
        hidden = self._ln("enc.final_ln", x)

        logits = matmul(hidden, self._p("ctc.w")) + self._p("ctc.b")
        probs = row_softmax(slice_rows(logits, 0, n_valid))
        grid = PosteriorGrid(probs.data, source=probs)
        return EncoderOutput(hidden=hidden, grid=grid, pad_mask=pad_mask, n_frames=n_valid)


class NatModel(_Network):
    """Single-pass decoder driven by trigger-masked token extraction."""

    def _build_rest(self, f: _ParamFactory) -> None:
        cfg = self.cfg
        d = cfg.d_model
        f.ln("ext.ln_q", d)
        f.mha("ext.attn", d)
        f.ln("ext.ln2", d)
        f.ffn("ext.ffn", d, cfg.d_ff)
        for i in range(cfg.n_self):
            f.ln(f"dec.self{i}.ln1", d)
            f.mha(f"dec.self{i}.attn", d)
            f.ln(f"dec.self{i}.ln2", d)
            f.ffn(f"dec.self{i}.ffn", d, cfg.d_ff)
        for i in range(cfg.n_mix):
            f.ln(f"dec.mix{i}.ln1", d)
            f.mha(f"dec.mix{i}.self_attn", d)
            f.ln(f"dec.mix{i}.ln2", d)
            f.mha(f"dec.mix{i}.src_attn", d)
            f.ln(f"dec.mix{i}.ln3", d)
            f.ffn(f"dec.mix{i}.ffn", d, cfg.d_ff)
        f.ln("dec.final_ln", d)
        f.weight("dec.out.w", d, cfg.n_classes)
        f.zeros("dec.out.b", cfg.n_classes)

    def extract_token_embeddings(
        self,
        enc: EncoderOutput,
        masks: TriggerMaskSet,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """One source-attention block: positional queries against trigger spans."""
        cfg = self.cfg
        if masks.token_count == 0:
            raise InfeasibleSequenceError("cannot extract embeddings for zero tokens")
        if masks.frame_count != enc.n_frames:
            raise ShapeMismatchError(
                f"mask frames {masks.frame_count} vs encoder frames {enc.n_frames}"
            )
        n_total = enc.hidden.shape[0]
        bits = np.zeros((masks.token_count, n_total), dtype=bool)
        bits[:, : masks.frame_count] = masks.masks
        trigger = AttentionMask(bits)

        q = Tensor(sinusoidal_positional_encoding(masks.token_count, cfg.d_model))
        attn = multi_head_attention(self._ln("ext.ln_q", q), enc.hidden, trigger,
                                    self._mha_params("ext.attn"), cfg.heads, mode=cfg.mask_mode)
        q = q + dropout(attn, cfg.dropout, rng, train)
        q = q + dropout(self._ffn("ext.ffn", self._ln("ext.ln2", q)), cfg.dropout, rng, train)
        return q

    def decode_nat(
        self,
        token_emb: Tensor,
        enc: EncoderOutput,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """All positions in one parallel pass; bidirectional over tokens."""
        cfg = self.cfg
        n_tok = token_emb.shape[0]
        bi = AttentionMask.ones(n_tok, n_tok)
        src = AttentionMask(np.ascontiguousarray(np.broadcast_to(enc.pad_mask, (n_tok, enc.pad_mask.size))))

        x = token_emb
        for i in range(cfg.n_self):
            ln1 = self._ln(f"dec.self{i}.ln1", x)
            attn = multi_head_attention(ln1, ln1, bi, self._mha_params(f"dec.self{i}.attn"),
                                        cfg.heads, mode=cfg.mask_mode)
            x = x + dropout(attn, cfg.dropout, rng, train)
            x = x + dropout(self._ffn(f"dec.self{i}.ffn", self._ln(f"dec.self{i}.ln2", x)),
                            cfg.dropout, rng, train)
        for i in range(cfg.n_mix):
            ln1 = self._ln(f"dec.mix{i}.ln1", x)
            attn = multi_head_attention(ln1, ln1, bi, self._mha_params(f"dec.mix{i}.self_attn"),
                                        cfg.heads, mode=cfg.mask_mode)
            x = x + dropout(attn, cfg.dropout, rng, train)
            cross = multi_head_attention(self._ln(f"dec.mix{i}.ln2", x), enc.hidden, src,
                                         self._mha_params(f"dec.mix{i}.src_attn"), cfg.heads,
                                         mode=cfg.mask_mode)
            x = x + dropout(cross, cfg.dropout, rng, train)
            x = x + dropout(self._ffn(f"dec.mix{i}.ffn", self._ln(f"dec.mix{i}.ln3", x)),
                            cfg.dropout, rng, train)
        x = self._ln("dec.final_ln", x)
        return matmul(x, self._p("dec.out.w")) + self._p("dec.out.b")

    def forward_alignment(
        self,
        enc: EncoderOutput,
        alignment_labels,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Trigger masks -> extractor -> parallel decoder, returning token logits."""
        masks = trigger_masks(alignment_labels, extend_last=self.cfg.extend_last)
        emb = self.extract_token_embeddings(enc, masks, train=train, rng=rng)
        return self.decode_nat(emb, enc, train=train, rng=rng)


@dataclass
class LossStats:
    total: float = 0.0
    decoder: float = 0.0
    lattice: float = 0.0
    n_used: int = 0
    n_skipped: int = 0
    used_alignments: list = None  # (utterance id, labels) pairs, in batch order


def joint_loss(
    model: NatModel,
    batch,
    train: bool = True,
    rng: np.random.Generator | None = None,
    alignments: list | None = None,
    warn=None,
) -> tuple[Tensor | None, LossStats]:
    """Mean over the batch of decoder cross entropy plus task-ratio-weighted
    lattice loss. Infeasible utterances are skipped and counted.

    ``alignments`` pins the frame alignment per utterance (by list position);
    otherwise the forced alignment of the current posteriors is used. The
    alignment choice itself never carries gradient.
    """
    cfg = model.cfg
    stats = LossStats(used_alignments=[])
    terms: list[Tensor] = []
    for i, utt in enumerate(batch):
        n_frames = -(-len(utt.frames) // cfg.subsample_factor)
        if min_frames_required(utt.tokens) > n_frames:
            stats.n_skipped += 1
            if warn is not None:
                warn(f"skipping {utt.id}: {len(utt.tokens)} tokens do not fit {n_frames} frames")
            continue
        enc = model.encode(utt.frames, train=train, rng=rng)
        lattice_nll = ctc_loss(enc.grid, utt.tokens)
        if alignments is not None and alignments[i] is not None:
            ali_labels = alignments[i]
        else:
            ali_labels = viterbi_align(enc.grid, utt.tokens).labels
        stats.used_alignments.append((utt.id, ali_labels))
        logits = model.forward_alignment(enc, ali_labels, train=train, rng=rng)
        dec_nll = cross_entropy_label_smoothed(logits, utt.tokens, cfg.label_smooth)
        terms.append(dec_nll + mul(lattice_nll, cfg.task_ratio))
        stats.decoder += dec_nll.item()
        stats.lattice += lattice_nll.item()
        stats.n_used += 1
    if not terms:
        return None, stats
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = mul(total, 1.0 / len(terms))
    stats.total = total.item()
    stats.decoder /= len(terms)
    stats.lattice /= len(terms)
    return total, stats


class ArModel(_Network):
    """Autoregressive baseline: same encoder, causal decoder over word embeddings."""

    def _build_rest(self, f: _ParamFactory) -> None:
        cfg = self.cfg
        d = cfg.d_model
        f.weight("at.embed", cfg.n_at_classes, d, shape=(cfg.n_at_classes, d))
        for i in range(cfg.n_dec_at):
            f.ln(f"at.dec{i}.ln1", d)
            f.mha(f"at.dec{i}.self_attn", d)
            f.ln(f"at.dec{i}.ln2", d)
            f.mha(f"at.dec{i}.src_attn", d)
            f.ln(f"at.dec{i}.ln3", d)
            f.ffn(f"at.dec{i}.ffn", d, cfg.d_ff)
        f.ln("at.final_ln", d)
        f.weight("at.out.w", d, cfg.n_at_classes)
        f.zeros("at.out.b", cfg.n_at_classes)

    def decode_at(
        self,
        prefix_ids,
        enc: EncoderOutput,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Causal decoder logits for every position of the prefix."""
        cfg = self.cfg
        ids = list(prefix_ids)
        if not ids or ids[0] != cfg.sos_id:
            raise ShapeMismatchError("prefix must begin with the start-of-sequence id")
        n = len(ids)
        x = mul(embedding_lookup(self._p("at.embed"), ids), math.sqrt(cfg.d_model))
        x = x + sinusoidal_positional_encoding(n, cfg.d_model)
        x = dropout(x, cfg.dropout, rng, train)
        causal = AttentionMask.causal(n)
        src = AttentionMask(np.ascontiguousarray(np.broadcast_to(enc.pad_mask, (n, enc.pad_mask.size))))
        for i in range(cfg.n_dec_at):
            ln1 = self._ln(f"at.dec{i}.ln1", x)
            attn = multi_head_attention(ln1, ln1, causal, self._mha_params(f"at.dec{i}.self_attn"),
                                        cfg.heads, mode=cfg.mask_mode)
            x = x + dropout(attn, cfg.dropout, rng, train)
            cross = multi_head_attention(self._ln(f"at.dec{i}.ln2", x), enc.hidden, src,
                                         self._mha_params(f"at.dec{i}.src_attn"), cfg.heads,
                                         mode=cfg.mask_mode)
            x = x + dropout(cross, cfg.dropout, rng, train)
            x = x + dropout(self._ffn(f"at.dec{i}.ffn", self._ln(f"at.dec{i}.ln3", x)),
                            cfg.dropout, rng, train)
        x = self._ln("at.final_ln", x)
        return matmul(x, self._p("at.out.w")) + self._p("at.out.b")

    def loss(
        self,
        batch,
        train: bool = True,
        rng: np.random.Generator | None = None,
        warn=None,
    ) -> tuple[Tensor | None, LossStats]:
        """Hybrid objective: teacher-forced cross entropy plus the lattice term."""
        cfg = self.cfg
        stats = LossStats()
        terms: list[Tensor] = []
        for utt in batch:
            n_frames = -(-len(utt.frames) // cfg.subsample_factor)
            if min_frames_required(utt.tokens) > n_frames:
                stats.n_skipped += 1
                if warn is not None:
                    warn(f"skipping {utt.id}")
                continue
            enc = self.encode(utt.frames, train=train, rng=rng)
            lattice_nll = ctc_loss(enc.grid, utt.tokens)
            logits = self.decode_at([cfg.sos_id] + list(utt.tokens), enc, train=train, rng=rng)
            targets = list(utt.tokens) + [cfg.eos_id]
            dec_nll = cross_entropy_label_smoothed(logits, targets, cfg.label_smooth)
            terms.append(dec_nll + mul(lattice_nll, cfg.task_ratio))
            stats.decoder += dec_nll.item()
            stats.lattice += lattice_nll.item()
            stats.n_used += 1
        if not terms:
            return None, stats
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        total = mul(total, 1.0 / len(terms))
        stats.total = total.item()
        stats.decoder /= len(terms)
        stats.lattice /= len(terms)
        return total, stats
