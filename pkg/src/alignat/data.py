"""Deterministic synthetic corpus: Markov token sequences rendered as noisy
frame emissions, with streaming manifest/feature-file storage.

On-disk layout per split (``train``/``dev``/``test``):

* ``features-<split>.bin`` — 8-byte magic ``CASSFEAT``, uint32 feature dim,
  then per utterance the raw little-endian float32 frames, row-major.
* ``manifest-<split>.tsv`` — one record per line:
  ``id<TAB>n_frames<TAB>tokens (space-separated)<TAB>boundaries (comma-separated
  exclusive end frames)<TAB>byte offset into the feature file``.

Round-trips are bit-exact and regeneration from the same seed is
byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CorruptRecordError

FEAT_MAGIC = b"CASSFEAT"
SPLITS = ("train", "dev", "test")


def default_transition(vocab: int, seed: int) -> np.ndarray:
    """Each token concentrates ~0.75 mass on three preferred successors.

    Gives the token stream real bigram structure for the decoder's
    self-attention to exploit, while keeping every transition possible.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A05]))
    trans = np.full((vocab, vocab), 0.25 / (vocab - 3))
    for i in range(vocab):
        favourites = rng.choice(vocab, size=3, replace=False)
        trans[i, favourites] = 0.0
        weights = rng.dirichlet(np.ones(3) * 4.0) * 0.75
        trans[i, favourites] += weights
        trans[i] /= trans[i].sum()
    return trans


def default_means(vocab: int, d_feat: int, seed: int, scale: float) -> np.ndarray:
    """Unit-norm emission mean per token, scaled."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3EA2]))
    means = rng.normal(size=(vocab, d_feat))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means * scale


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(values - 1.0)))
    pi = np.real(vectors[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


@dataclass
class CorpusSpec:
    vocab: int = 32
    d_feat: int = 16
    duration_min: int = 8
    duration_max: int = 24
    tokens_min: int = 5
    tokens_max: int = 15
    sigma: float = 0.55
    mean_scale: float = 1.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 2024
    subsample_factor: int = 4
    transition: np.ndarray | None = field(default=None, repr=False)
    means: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.duration_min < self.subsample_factor:
            raise ValueError("token duration must cover at least one encoder frame")
        if self.transition is None:
            self.transition = default_transition(self.vocab, self.seed)
        if self.means is None:
            self.means = default_means(self.vocab, self.d_feat, self.seed, self.mean_scale)
        rows = np.asarray(self.transition).sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ValueError("transition matrix rows must sum to 1")


@dataclass
class Utterance:
    id: str
    frames: np.ndarray          # (T, d_feat) float64
    tokens: list[int]           # ids in 1..vocab
    true_boundaries: list[int]  # exclusive end frame per token; tiles [0, T)


def _sample_utterance(spec: CorpusSpec, rng: np.random.Generator, uid: str, pi: np.ndarray) -> Utterance:
    n_tokens = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
    tokens = np.empty(n_tokens, dtype=np.int64)
    tokens[0] = rng.choice(spec.vocab, p=pi)
    for i in range(1, n_tokens):
        tokens[i] = rng.choice(spec.vocab, p=spec.transition[tokens[i - 1]])
    durations = rng.integers(spec.duration_min, spec.duration_max + 1, size=n_tokens)

    frames = np.concatenate(
        [np.tile(spec.means[tok], (dur, 1)) for tok, dur in zip(tokens, durations)]
    )
    frames = frames + spec.sigma * rng.normal(size=frames.shape)
    bounds = np.cumsum(durations).tolist()
    return Utterance(
        id=uid,
        frames=frames,
        tokens=(tokens + 1).tolist(),  # 0 is reserved for blank
        true_boundaries=bounds,
    )


def generate(spec: CorpusSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write all three splits; returns manifest paths. Reproducible per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests: dict[str, Path] = {}
    counts = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    pi = stationary_distribution(spec.transition)
    for split_index, split in enumerate(SPLITS):
        feat_path = out_dir / f"features-{split}.bin"
        man_path = out_dir / f"manifest-{split}.tsv"
        lines = []
        with open(feat_path, "wb") as fh:
            fh.write(FEAT_MAGIC + struct.pack("<I", spec.d_feat))
            for i in range(counts[split]):
                uid = f"{split}-{i:06d}"
                rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_index, i]))
                utt = _sample_utterance(spec, rng, uid, pi)
                offset = fh.tell()
                fh.write(np.ascontiguousarray(utt.frames, dtype="<f4").tobytes())
                lines.append(
                    "\t".join(
                        [
                            uid,
                            str(utt.frames.shape[0]),
                            " ".join(map(str, utt.tokens)),
                            ",".join(map(str, utt.true_boundaries)),
                            str(offset),
                        ]
                    )
                )
        man_path.write_text("\n".join(lines) + "\n")
        manifests[split] = man_path
    return manifests


def load_manifest(manifest_path: str | Path) -> Iterator[Utterance]:
    """Stream utterances in manifest order without loading the whole corpus."""
    manifest_path = Path(manifest_path)
    split = manifest_path.stem.replace("manifest-", "")
    feat_path = manifest_path.parent / f"features-{split}.bin"
    with open(feat_path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:8] != FEAT_MAGIC:
            raise CorruptRecordError(f"{feat_path}: bad feature magic", offset=0)
        (d_feat,) = struct.unpack("<I", head[8:12])
        for line_no, line in enumerate(manifest_path.read_text().splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 5:
                raise CorruptRecordError(f"{manifest_path}:{line_no}: expected 5 fields")
            uid, n_frames_s, tokens_s, bounds_s, offset_s = parts
            n_frames, offset = int(n_frames_s), int(offset_s)
            fh.seek(offset)
            payload = fh.read(4 * n_frames * d_feat)
            if len(payload) != 4 * n_frames * d_feat:
                raise CorruptRecordError(
                    f"{feat_path}: truncated record {uid!r}", offset=offset + len(payload)
                )
            frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n_frames, d_feat)
            yield Utterance(
                id=uid,
                frames=frames,
                tokens=[int(t) for t in tokens_s.split()],
                true_boundaries=[int(b) for b in bounds_s.split(",")],
            )


def load_split(data_dir: str | Path, split: str) -> list[Utterance]:
    return list(load_manifest(Path(data_dir) / f"manifest-{split}.tsv"))
