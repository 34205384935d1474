"""Report rendering: JSON, fixed-width tables, delimited histograms, figures.

Metric reports never embed wall-clock values (RTF fields stay null unless a
benchmark filled them), so identical runs produce byte-identical files. The
figures are rendered to files with empty metadata for the same reason.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluate import EvalReport, RtfResult


def report_to_dict(report: EvalReport, include_records: bool = True) -> dict:
    out = {
        "mode": report.mode,
        "ranker": report.ranker,
        "n_utterances": report.n_utterances,
        "wer": report.wer,
        "mr": report.mr,
        "lper": report.lper,
        "substitutions": report.substitutions,
        "deletions": report.deletions,
        "insertions": report.insertions,
        "ref_tokens": report.ref_tokens,
        "rtf": report.rtf,
        "rtf_relative_at": report.rtf_relative_at,
        "length_error_histogram": {
            str(k): {"count": b.count, "wer": b.wer} for k, b in report.histogram.items()
        },
    }
    if include_records:
        out["utterances"] = [
            {
                "id": r.id,
                "reference": r.reference,
                "hypothesis": r.tokens,
                "substitutions": r.counts.substitutions,
                "deletions": r.counts.deletions,
                "insertions": r.counts.insertions,
                "length_error": r.length_error,
                "rank_score": None if r.empty else r.rank_score,
                "empty": r.empty,
            }
            for r in report.records
        ]
    return out


def write_report_json(report: EvalReport, path: str | Path, include_records: bool = True) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report, include_records), indent=2, sort_keys=True) + "\n")


def render_table(reports: list[EvalReport], rtf_rows: dict[str, RtfResult] | None = None) -> str:
    """Fixed-width comparison across decode modes, metrics in percent."""
    header = f"{'Mode':<8}{'Ranker':<8}{'WER%':>8}{'MR%':>8}{'LPER%':>8}{'RTF':>10}"
    rule = "-" * len(header)
    lines = [header, rule]
    for r in reports:
        rtf = r.rtf
        if rtf is None and rtf_rows and r.mode in rtf_rows:
            rtf = rtf_rows[r.mode].rtf
        rtf_s = f"{rtf:.4f}" if rtf is not None else "-"
        lines.append(
            f"{r.mode:<8}{r.ranker:<8}{100 * r.wer:>8.2f}{100 * r.mr:>8.2f}"
            f"{100 * r.lper:>8.2f}{rtf_s:>10}"
        )
    return "\n".join(lines)


def write_histogram_csv(report: EvalReport, path: str | Path) -> None:
    """Length-error buckets as ``bucket,count,wer`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["length_error", "count", "wer"])
        for bucket, b in report.histogram.items():
            writer.writerow([bucket, b.count, f"{b.wer:.6f}"])


def write_hypotheses_tsv(report: EvalReport, path: str | Path) -> None:
    """One decoded utterance per line: id, tokens, reference, rank score."""
    lines = []
    for r in report.records:
        score = "" if r.empty else f"{r.rank_score:.6f}"
        lines.append(
            "\t".join(
                [
                    r.id,
                    " ".join(map(str, r.tokens)),
                    " ".join(map(str, r.reference)),
                    score,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def save_histogram_figure(report: EvalReport, path: str | Path) -> None:
    """Length-error distribution with per-bucket WER annotations."""
    buckets = sorted(report.histogram)
    counts = [report.histogram[b].count for b in buckets]
    wers = [100 * report.histogram[b].wer for b in buckets]

    fig, ax1 = plt.subplots(figsize=(6.0, 3.6))
    ax1.bar(buckets, counts, color="#4878b0", width=0.8)
    ax1.set_xlabel("decoder-input length error (generated - oracle)")
    ax1.set_ylabel("utterances")
    ax1.set_title(f"Length prediction errors and per-bucket WER ({report.mode})")
    ax2 = ax1.twinx()
    ax2.plot(buckets, wers, color="#d1605e", marker="o", linewidth=1.2)
    ax2.set_ylabel("WER (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={})
    plt.close(fig)


def save_training_curve(log_csv: str | Path, path: str | Path) -> None:
    """Train/dev loss and dev WER over steps from a trainer log."""
    steps, train_loss, dev_loss, dev_wer = [], [], [], []
    with open(log_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            train_loss.append(float(row["train_loss"]))
            dev_loss.append(float(row["dev_loss"]))
            dev_wer.append(float(row["dev_wer"]))
    fig, ax1 = plt.subplots(figsize=(6.0, 3.6))
    ax1.plot(steps, train_loss, label="train loss", color="#4878b0")
    ax1.plot(steps, dev_loss, label="dev loss", color="#6aa56a")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right")
    if any(w == w for w in dev_wer):  # skip the axis when all NaN
        ax2 = ax1.twinx()
        ax2.plot(steps, [100 * w for w in dev_wer], label="dev WER", color="#d1605e", linestyle="--")
        ax2.set_ylabel("dev WER (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={})
    plt.close(fig)
