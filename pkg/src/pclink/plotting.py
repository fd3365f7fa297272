"""Plot emission from metrics CSVs.

Plots are a pure function of the CSV contents: the same CSV always renders the
same image bytes, so curves can be regenerated or overlaid after the fact.
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_metrics_csv, summarize_records  # noqa: E402

_METRICS = (("cd", "mean_cd", "Chamfer distance [m^2]"),
            ("d1_psnr", "mean_d1_psnr", "D1 PSNR [dB]"),
            ("d2_psnr", "mean_d2_psnr", "D2 PSNR [dB]"))


def plot_metric_curves(csv_paths: list, labels: list[str] | None = None, out_dir=".") -> list[str]:
    """Render CD / D1-PSNR / D2-PSNR vs SNR line plots from one or more CSVs.

    Multiple CSVs overlay as separate labelled curves. Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = labels or [Path(p).stem for p in csv_paths]
    summaries = []
    for p in csv_paths:
        summaries.append(summarize_records(read_metrics_csv(p)))
    written = []
    for key, skey, ylabel in _METRICS:
        fig, ax = plt.subplots(figsize=(5.0, 3.6), dpi=120)
        for label, summary in zip(labels, summaries):
            pts = sorted(
                (v["snr_db"], v[skey])
                for v in summary["per_snr"].values()
                if v[skey] is not None and math.isfinite(v[skey])
            )
            if not pts:
                continue
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xlabel("SNR [dB]")
        ax.set_ylabel(ylabel)
        if key == "cd":
            ax.set_yscale("log")
        ax.grid(True, which="both", alpha=0.4)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{key}_vs_snr.png"
        fig.savefig(path, metadata={"Software": "pclink"})
        plt.close(fig)
        written.append(str(path))
    return written
