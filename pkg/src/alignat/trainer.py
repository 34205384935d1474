"""Optimisation loop: ramp/hold/decay schedule, Adam, encoder pre-training,
checkpointing with parameter averaging, and a CSV training log."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DivergenceError
from .lattice import ctc_loss
from .model import LossStats, NatModel, _Network, encoder_param_names, joint_loss
from .numerics import Tensor, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    floor_lr: float = 1e-5
    warmup_steps: int = 150
    hold_steps: int = 250
    decay_rate: float = 0.998
    batch_size: int = 8
    max_steps: int = 1200
    pretrain_steps: int = 600
    seed: int = 1234
    average_last_k: int = 3
    eval_every: int = 100
    patience: int = 10
    dev_batch_limit: int = 12
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    align_refresh_every: int = 1

    def __post_init__(self):
        if not self.floor_lr < self.peak_lr:
            raise ValueError("floor_lr must be below peak_lr")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear ramp to the peak, a hold, then exponential decay clipped at the floor."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    past = step - cfg.warmup_steps
    if past <= cfg.hold_steps:
        return cfg.peak_lr
    return max(cfg.floor_lr, cfg.peak_lr * cfg.decay_rate ** (past - cfg.hold_steps))


class Adam:
    """Transformer-recipe Adam with a non-finite-gradient guard."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite gradient in {name!r} at update {self.t} "
                    f"(|g|max={np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'n/a'})"
                )
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def make_batches(utterances, batch_size: int, rng: np.random.Generator) -> list[list]:
    """Length-bucketed batches in a shuffled order (deterministic given the rng)."""
    order = sorted(range(len(utterances)), key=lambda i: (len(utterances[i].frames), i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return [[utterances[i] for i in batch] for batch in batches]


def average_checkpoints(paths: list[str | Path]) -> dict[str, np.ndarray]:
    """Parameter-wise arithmetic mean of saved checkpoints."""
    if not paths:
        raise ValueError("nothing to average")
    acc: dict[str, np.ndarray] = {}
    for path in paths:
        arrays = load_checkpoint(path)
        for name, arr in arrays.items():
            if name in acc:
                acc[name] = acc[name] + arr
            else:
                acc[name] = arr.copy()
    return {name: arr / len(paths) for name, arr in acc.items()}


@dataclass
class TrainResult:
    final_checkpoint: Path
    history: list[dict]
    stopped_early: bool


LossFn = Callable[..., tuple[Tensor | None, LossStats]]


def ctc_only_loss(model: _Network, batch, train=True, rng=None, warn=None):
    """Encoder + posterior head objective used for pre-training."""
    from .lattice import min_frames_required
    from .numerics import mul

    stats = LossStats()
    terms = []
    for utt in batch:
        n_frames = -(-len(utt.frames) // model.cfg.subsample_factor)
        if min_frames_required(utt.tokens) > n_frames:
            stats.n_skipped += 1
            if warn is not None:
                warn(f"skipping {utt.id}")
            continue
        enc = model.encode(utt.frames, train=train, rng=rng)
        terms.append(ctc_loss(enc.grid, utt.tokens))
        stats.n_used += 1
    if not terms:
        return None, stats
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = mul(total, 1.0 / len(terms))
    stats.total = stats.lattice = total.item()
    return total, stats


def _dev_loss(model, loss_fn, dev_utts, batch_size: int, limit: int) -> float:
    losses = []
    count = 0
    for i in range(0, len(dev_utts), batch_size):
        loss, stats = loss_fn(model, dev_utts[i : i + batch_size], train=False, rng=None)
        if loss is not None:
            losses.append(stats.total * stats.n_used)
            count += stats.n_used
        if (i // batch_size) + 1 >= limit:
            break
    return sum(losses) / max(count, 1)


def train_model(
    model: _Network,
    loss_fn: LossFn,
    train_utts,
    dev_utts,
    cfg: TrainConfig,
    out_dir: str | Path,
    tag: str,
    max_steps: int | None = None,
    dev_metric_fn: Callable[[_Network], float] | None = None,
    save_subset: list[str] | None = None,
    log=None,
) -> TrainResult:
    """Run the optimisation loop; emits ``<tag>_log.csv`` and ``<tag>_final.bin``.

    Deterministic for a fixed config: batch order, dropout, and alignment
    refresh all derive from ``cfg.seed``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps_total = cfg.max_steps if max_steps is None else max_steps

    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB47C4]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD707]))
    opt = Adam(model.params, cfg)

    history: list[dict] = []
    ckpts: list[Path] = []
    best_dev = np.inf
    evals_since_best = 0
    stopped_early = False

    batches: list[list] = []
    step = 0
    while step < steps_total:
        if not batches:
            batches = make_batches(train_utts, cfg.batch_size, order_rng)
        batch = batches.pop()
        step += 1
        opt.zero_grad()
        loss, stats = loss_fn(model, batch, train=True, rng=drop_rng, warn=log)
        if loss is None:
            continue
        loss.backward()
        opt.step(lr_at(cfg, step))

        if step % cfg.eval_every == 0 or step == steps_total:
            dev_loss = _dev_loss(model, loss_fn, dev_utts, cfg.batch_size, cfg.dev_batch_limit)
            dev_metric = dev_metric_fn(model) if dev_metric_fn is not None else float("nan")
            row = {
                "step": step,
                "lr": lr_at(cfg, step),
                "train_loss": stats.total,
                "dev_loss": dev_loss,
                "dev_wer": dev_metric,
            }
            history.append(row)
            if log is not None:
                log(
                    f"[{tag}] step {step} lr {row['lr']:.2e} "
                    f"train {stats.total:.4f} dev {dev_loss:.4f} dev_wer {dev_metric:.4f}"
                )
            ckpt = out_dir / f"{tag}_step{step:06d}.bin"
            arrays = model.param_arrays()
            if save_subset is not None:
                arrays = {n: arrays[n] for n in save_subset}
            save_checkpoint(ckpt, arrays)
            ckpts.append(ckpt)

            if dev_loss < best_dev - 1e-9:
                best_dev = dev_loss
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= cfg.patience:
                    stopped_early = True
                    break

    with open(out_dir / f"{tag}_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "lr", "train_loss", "dev_loss", "dev_wer"])
        writer.writeheader()
        writer.writerows(history)

    tail = ckpts[-cfg.average_last_k :] if cfg.average_last_k > 0 else ckpts[-1:]
    averaged = average_checkpoints(tail)
    final = out_dir / f"{tag}_final.bin"
    save_checkpoint(final, averaged)
    return TrainResult(final_checkpoint=final, history=history, stopped_early=stopped_early)


def pretrain_encoder(
    model: _Network,
    train_utts,
    dev_utts,
    cfg: TrainConfig,
    out_dir: str | Path,
    log=None,
) -> TrainResult:
    """Train encoder plus posterior head alone; the final checkpoint holds only
    those parameters, ready to load into a full model."""
    return train_model(
        model,
        ctc_only_loss,
        train_utts,
        dev_utts,
        cfg,
        out_dir,
        tag="pretrain",
        max_steps=cfg.pretrain_steps,
        save_subset=encoder_param_names(model.params),
        log=log,
    )


def nat_loss_fn(align_refresh_every: int = 1):
    """joint-objective loss_fn with optional alignment caching across steps."""
    if align_refresh_every <= 1:
        def fresh(model, batch, train=True, rng=None, warn=None):
            return joint_loss(model, batch, train=train, rng=rng, warn=warn)

        return fresh

    cache: dict[str, np.ndarray] = {}
    counter = {"step": 0}

    def cached(model, batch, train=True, rng=None, warn=None):
        if train:
            counter["step"] += 1
        refresh = (not train) or (counter["step"] - 1) % align_refresh_every == 0
        if refresh:
            alignments = None
        else:
            alignments = [cache.get(utt.id) for utt in batch]
        loss, stats = joint_loss(model, batch, train=train, rng=rng, alignments=alignments, warn=warn)
        if refresh and train:
            cache.update({uid: labels for uid, labels in stats.used_alignments})
        return loss, stats

    return cached
