"""Run summaries and figures rendered from logged artifacts.

The report path is read-only with respect to the run's data: it loads the
metrics and embedding logs, prints/writes a text summary including the
trainable-parameter accounting sum, and optionally renders the loss curves to
an SVG. Rendering is deterministic so repeated reports are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .trainer import MetricsLog

matplotlib.rcParams["svg.hashsalt"] = "modetrain"


def load_run(run_dir) -> dict:
    """Load a run directory's artifacts; missing required files are an error."""
    run = Path(run_dir)
    missing = [name for name in ("manifest.json", "metrics.csv") if not (run / name).exists()]
    if missing:
        raise FileNotFoundError(f"missing run artifacts in {run}: {', '.join(missing)}")
    with open(run / "manifest.json") as fh:
        manifest = json.load(fh)
    metrics = MetricsLog.read_csv(run / "metrics.csv")
    embed_rows = []
    embed_path = run / "embedding_log.csv"
    if embed_path.exists():
        import csv

        with open(embed_path, newline="") as fh:
            for row in csv.DictReader(fh):
                embed_rows.append({k: int(v) for k, v in row.items()})
    return {"manifest": manifest, "metrics": metrics, "embedding": embed_rows}


def summarize(run_dir) -> dict:
    data = load_run(run_dir)
    metrics: MetricsLog = data["metrics"]
    manifest = data["manifest"]
    n = None
    trainable = metrics.column("trainable")
    total_trainable = int(sum(trainable))
    last = metrics.rows[-1]
    if data["embedding"]:
        final_trainable = data["embedding"][-1]["trainable_count"]
        n = max(trainable)
        embedded_final = 1.0 - final_trainable / n
    else:
        embedded_final = float(last["embedded_frac"])
    return {
        "run_dir": str(run_dir),
        "method": manifest["config"]["method"],
        "epochs": len(metrics.rows),
        "final_train_loss": last["train_loss"],
        "final_eval_loss": last["eval_loss"],
        "final_eval_rate": last["eval_rate"],
        "final_eval_distortion": last["eval_distortion"],
        "final_embedded_fraction": embedded_final,
        "total_trainable_param_epochs": total_trainable,
        "final_trainable": trainable[-1],
    }


def format_summary(summary: dict) -> str:
    lines = [f"run summary: {summary['run_dir']}"]
    order = ["method", "epochs", "final_train_loss", "final_eval_loss",
             "final_eval_rate", "final_eval_distortion", "final_embedded_fraction",
             "total_trainable_param_epochs", "final_trainable"]
    for key in order:
        lines.append(f"  {key}: {summary[key]}")
    return "\n".join(lines) + "\n"


def render_loss_curve(metrics: MetricsLog, path) -> None:
    """Training and eval loss per epoch, written as a deterministic SVG."""
    epochs = metrics.column("epoch")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, metrics.column("train_loss"), label="train loss", lw=1.2)
    ax.plot(epochs, metrics.column("eval_loss"), label="eval loss", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("rate-distortion loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_report(run_dir, plot: bool = False) -> str:
    """Write summary.txt (and optionally loss_curve.svg) into the run directory."""
    summary = summarize(run_dir)
    text = format_summary(summary)
    run = Path(run_dir)
    with open(run / "summary.txt", "w") as fh:
        fh.write(text)
    if plot:
        data = load_run(run_dir)
        render_loss_curve(data["metrics"], run / "loss_curve.svg")
    return text
