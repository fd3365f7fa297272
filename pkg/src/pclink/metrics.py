"""Reconstruction metrics, the density-preserving training loss, and rate accounting.

Evaluation metrics (Chamfer, D1/D2 PSNR) are numpy; the loss terms are torch so
they can drive training. PSNR of a perfect reconstruction is reported as the
+inf sentinel.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .pcdata import PointCloud, tree_knn

CSV_HEADER = ["frame_id", "snr_db", "bpp", "cd", "d1_psnr", "d2_psnr"]


@dataclass
class LossWeights:
    alpha_density: float = 5e-4
    beta_cardinality: float = 5e-6

    def __post_init__(self):
        if self.alpha_density < 0 or self.beta_cardinality < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MetricRecord:
    frame_id: str
    snr_db: float
    bpp: float
    cd: float
    d1_psnr: float
    d2_psnr: float
    failed: bool = False


def _pts(cloud) -> np.ndarray:
    p = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    return np.asarray(p, dtype=np.float64)


def _nn_sq(a: np.ndarray, b: np.ndarray):
    """Nearest neighbor of each row of a in b: (squared distances, indices).

    Small clouds use the plain exhaustive formula so results agree bitwise with
    a brute-force oracle; beyond that a kd-tree takes over.
    """
    if a.shape[0] * b.shape[0] <= 8_000_000:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        idx = np.argmin(d2, axis=1)
        return d2[np.arange(a.shape[0]), idx], idx
    idx, dists = tree_knn(b, a, 1)
    return dists[:, 0] ** 2, idx[:, 0]


def point_to_point_mse(p, q) -> tuple[float, float]:
    """Mean squared nearest-neighbor distance in both directions: (e_PQ, e_QP)."""
    a, b = _pts(p), _pts(q)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point-to-point MSE needs non-empty clouds")
    e_pq = float(_nn_sq(a, b)[0].mean())
    e_qp = float(_nn_sq(b, a)[0].mean())
    return e_pq, e_qp


def chamfer(p, q) -> float:
    """Symmetric point-to-point Chamfer distance (sum of the two MSEs)."""
    e_pq, e_qp = point_to_point_mse(p, q)
    return e_pq + e_qp


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_psnr(p, q, peak: float = 1.0) -> float:
    """10*log10(3*peak^2 / max(e_PQ, e_QP))."""
    e_pq, e_qp = point_to_point_mse(p, q)
    return psnr_from_mse(max(e_pq, e_qp), peak)


def point_to_plane_mse(p, q, normals_q: np.ndarray, degenerate_q: np.ndarray | None = None):
    """Normal-projected squared errors in both directions.

    Forward: for each point of p, the offset to its nearest neighbor in q is
    projected onto that neighbor's normal. Reverse: each point of q projects
    its offset to the nearest point of p onto its own normal. Points whose
    normal is flagged degenerate are excluded from the means.

    Returns (e_pq, e_qp, n_excluded).
    """
    a, b = _pts(p), _pts(q)
    normals_q = np.asarray(normals_q, dtype=np.float64)
    if degenerate_q is None:
        degenerate_q = np.zeros(b.shape[0], dtype=bool)

    _, idx_ab = _nn_sq(a, b)
    keep_f = ~degenerate_q[idx_ab]
    proj_f = np.einsum("ij,ij->i", a - b[idx_ab], normals_q[idx_ab]) ** 2
    e_pq = float(proj_f[keep_f].mean()) if keep_f.any() else 0.0

    _, idx_ba = _nn_sq(b, a)
    keep_r = ~degenerate_q
    proj_r = np.einsum("ij,ij->i", b - a[idx_ba], normals_q) ** 2
    e_qp = float(proj_r[keep_r].mean()) if keep_r.any() else 0.0

    n_excluded = int(np.count_nonzero(~keep_f) + np.count_nonzero(~keep_r))
    return e_pq, e_qp, n_excluded


def d2_psnr(p, q, normals_q, peak: float = 1.0, degenerate_q=None) -> float:
    """Point-to-plane PSNR: projected MSE symmetrized by max, then the PSNR form."""
    e_pq, e_qp, _ = point_to_plane_mse(p, q, normals_q, degenerate_q)
    return psnr_from_mse(max(e_pq, e_qp), peak)


# ---------------------------------------------------------------------------
# Training losses (torch)
# ---------------------------------------------------------------------------

def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, PointCloud):
        x = x.points
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return torch.as_tensor(x)


def _common_dtype(a: torch.Tensor, b: torch.Tensor):
    dt = torch.promote_types(a.dtype, b.dtype)
    return a.to(dt), b.to(dt)


def chamfer_torch(a, b) -> torch.Tensor:
    """Differentiable symmetric Chamfer distance between (N,3) and (M,3)."""
    a, b = _common_dtype(_tensor(a), _tensor(b))
    d2 = torch.cdist(a, b) ** 2
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def _neighborhood_stats(points: torch.Tensor, radius: float):
    """Per-point neighbor count and mean neighbor distance within `radius`
    (self excluded; empty neighborhoods report mean distance 0)."""
    d = torch.cdist(points, points)
    mask = (d <= radius).to(d.dtype) - torch.eye(d.shape[0], dtype=d.dtype, device=d.device)
    count = mask.sum(dim=1)
    mean_dist = (d * mask).sum(dim=1) / count.detach().clamp(min=1.0)
    return count, mean_dist


def density_target_stats(target, radius: float):
    """Precompute the target-side neighborhood statistics (cacheable per frame)."""
    with torch.no_grad():
        return _neighborhood_stats(_tensor(target), radius)


def density_loss(target, recon, radius: float, k_norm: int = 16, target_stats=None) -> torch.Tensor:
    """Local-density mismatch between matched neighborhoods.

    Each target point is paired with its nearest reconstructed point; the loss
    averages the squared neighborhood-cardinality difference (normalized by
    k_norm) plus the squared difference of mean neighbor distances, with
    neighborhoods taken within `radius` (self excluded). Only the mean-distance
    term is differentiable; the counts are piecewise constant. `target_stats`
    short-circuits the target-side computation with a cached
    density_target_stats result.
    """
    if radius <= 0:
        raise ValueError("density radius must be positive")
    p, q = _common_dtype(_tensor(target), _tensor(recon))
    if target_stats is None:
        count_p, mean_p = _neighborhood_stats(p, radius)
    else:
        count_p, mean_p = (t.to(q.dtype) for t in target_stats)
    count_q, mean_q = _neighborhood_stats(q, radius)
    pair = torch.cdist(p, q).argmin(dim=1)
    count_term = ((count_p - count_q[pair]) / float(k_norm)) ** 2
    dist_term = (mean_p - mean_q[pair]) ** 2
    return (count_term + dist_term).mean()


def cardinality_loss(ground_counts, predicted_counts) -> torch.Tensor:
    """Mean squared difference of per-parent child counts, averaged over stages.

    `predicted_counts` are the softmax-relaxed expected counts so the loss is
    differentiable with respect to the count head.
    """
    if len(ground_counts) != len(predicted_counts):
        raise ValueError("ground and predicted stage lists must align")
    terms = []
    for g, k in zip(ground_counts, predicted_counts):
        k = _tensor(k) if not isinstance(k, torch.Tensor) else k
        g = torch.as_tensor(np.asarray(g), dtype=k.dtype, device=k.device)
        terms.append(((k - g) ** 2).mean())
    return torch.stack(terms).mean()


def total_loss(
    target,
    recon,
    ground_counts,
    predicted_counts,
    weights: LossWeights,
    radius: float = 1.0,
    k_norm: int = 16,
    density_stats=None,
):
    """L = L_cha + alpha * L_den + beta * L_card. Returns (loss, component dict)."""
    l_cha = chamfer_torch(target, recon)
    l_den = density_loss(target, recon, radius, k_norm, target_stats=density_stats)
    if ground_counts:
        l_card = cardinality_loss(ground_counts, predicted_counts)
    else:
        l_card = torch.zeros((), dtype=l_cha.dtype)
    loss = l_cha + weights.alpha_density * l_den + weights.beta_cardinality * l_card
    parts = {
        "chamfer": float(l_cha.detach()),
        "density": float(l_den.detach()),
        "cardinality": float(l_card.detach()),
    }
    return loss, parts


# ---------------------------------------------------------------------------
# Rate accounting and reports
# ---------------------------------------------------------------------------

def bpp(n_latent: int, feat_dim: int, bits: int, n_points: int) -> float:
    """Feature payload bits per original point (anchor coordinates excluded)."""
    if min(n_latent, feat_dim, bits, n_points) <= 0:
        raise ValueError("bpp arguments must be positive")
    return n_latent * feat_dim * bits / n_points


def raw_cloud_bpp(coord_bits: int = 32) -> float:
    """Rate of the uncompressed cloud: three coordinates at `coord_bits` each."""
    return 3.0 * coord_bits


def write_metrics_csv(path, records: list[MetricRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.frame_id, r.snr_db, r.bpp, r.cd, r.d1_psnr, r.d2_psnr])


def read_metrics_csv(path) -> list[MetricRecord]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected metrics CSV header {reader.fieldnames}")
        for row in reader:
            cd = float(row["cd"])
            out.append(
                MetricRecord(
                    frame_id=row["frame_id"],
                    snr_db=float(row["snr_db"]),
                    bpp=float(row["bpp"]),
                    cd=cd,
                    d1_psnr=float(row["d1_psnr"]),
                    d2_psnr=float(row["d2_psnr"]),
                    failed=not math.isfinite(cd),
                )
            )
    return out


def summarize_records(records: list[MetricRecord]) -> dict:
    """Aggregate per SNR: mean/median CD, mean PSNRs, and a separate failure count.

    Frames with a non-finite CD (undecodable reconstructions) are counted as
    failures and excluded from the averages; infinite PSNRs are likewise kept
    out of the means.
    """
    by_snr: dict[float, list[MetricRecord]] = {}
    for r in records:
        by_snr.setdefault(r.snr_db, []).append(r)
    summary = {"per_snr": {}, "n_records": len(records)}
    for snr in sorted(by_snr):
        rows = by_snr[snr]
        ok = [r for r in rows if math.isfinite(r.cd) and not r.failed]
        cds = [r.cd for r in ok]
        d1s = [r.d1_psnr for r in ok if math.isfinite(r.d1_psnr)]
        d2s = [r.d2_psnr for r in ok if math.isfinite(r.d2_psnr)]
        summary["per_snr"][str(snr)] = {
            "snr_db": snr,
            "n_frames": len(rows),
            "n_failed": len(rows) - len(ok),
            "mean_cd": float(np.mean(cds)) if cds else None,
            "median_cd": float(np.median(cds)) if cds else None,
            "mean_d1_psnr": float(np.mean(d1s)) if d1s else None,
            "mean_d2_psnr": float(np.mean(d2s)) if d2s else None,
            "mean_bpp": float(np.mean([r.bpp for r in rows])),
        }
    return summary


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
