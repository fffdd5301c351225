# src/visualization.py
from __future__ import annotations

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from src.metrics import read_header, read_metrics  # noqa: E402
from src.utils import configure_logging, get_logger  # noqa: E402

logger = get_logger(__name__)

# Consistent palette
C_LOSS = "#1e88e5"     # blue (training loss)
C_SMOOTH = "#0d47a1"   # dark blue (rolling mean)
C_AGREE = "#f57c00"    # orange (local disagreement)
C_HELDOUT = "#2e7d32"  # green (held-out loss)


# ------------------ Loss / disagreement curves ------------------
def plot_metrics(metrics_csv: str | Path, out_path: str | Path | None = None, window: int = 100) -> str | None:
    """
    Loss (with rolling mean) and local disagreement against the trial index.
    XProp-A files (one row per aeon) also get the held-out loss.
    """
    metrics_csv = Path(metrics_csv)
    if not metrics_csv.exists():
        logger.warning("⚠️ No metrics file at %s", metrics_csv)
        return None
    df = read_metrics(metrics_csv)
    if df.empty:
        logger.warning("⚠️ %s has no rows", metrics_csv)
        return None
    header = read_header(metrics_csv)

    fig, ax1 = plt.subplots(figsize=(12, 4.8))
    ax1.plot(df["trial"], df["loss"], color=C_LOSS, lw=0.8, alpha=0.4, label="loss")
    if len(df) > window:
        smooth = df["loss"].rolling(window, min_periods=1).mean()
        ax1.plot(df["trial"], smooth, color=C_SMOOTH, lw=1.8, label=f"loss (mean of {window})")
    if "heldout_loss" in df.columns:
        ax1.plot(df["trial"], df["heldout_loss"], color=C_HELDOUT, marker="o", lw=1.5, label="held-out loss")
    ax1.set_yscale("log")
    ax1.set_xlabel("Trial")
    ax1.set_ylabel("Loss")
    ax1.grid(alpha=0.25, linestyle="--", linewidth=0.6)

    ax2 = ax1.twinx()
    disagreement = pd.to_numeric(df["local_disagreement"], errors="coerce")
    if len(df) > window:
        disagreement = disagreement.rolling(window, min_periods=1).mean()
    ax2.plot(df["trial"], disagreement, color=C_AGREE, lw=1.2, label="local disagreement")
    ax2.set_ylabel("max_v |λ(v) - λ(root)|", color=C_AGREE)
    ax2.tick_params(axis="y", labelcolor=C_AGREE)

    h1, l1 = ax1.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax1.legend(h1 + h2, l1 + l2, loc="upper right")
    plt.title(f"exnet | {header.get('builder', metrics_csv.stem)}")

    out = Path(out_path) if out_path else metrics_csv.with_suffix(".png")
    out.parent.mkdir(parents=True, exist_ok=True)
    plt.tight_layout()
    plt.savefig(out, dpi=150)
    plt.close(fig)
    logger.info("✅ Plot saved to %s", out)
    return str(out)


if __name__ == "__main__":
    configure_logging()
    if len(sys.argv) < 2:
        print("usage: python -m src.visualization <metrics.csv> [out.png]")
        sys.exit(2)
    result = plot_metrics(sys.argv[1], sys.argv[2] if len(sys.argv) > 2 else None)
    sys.exit(0 if result else 1)
