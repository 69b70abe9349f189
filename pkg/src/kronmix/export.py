"""Interpretability exports: per-component covariance/precision matrices as CSV and SVG heatmaps.

Kronecker factors are only identified up to ``(nu A) x (B / nu)``. Temporal
covariances are divided by their largest diagonal entry and the spatial
covariance multiplied by the same value; precisions are normalized the same
way using the temporal precision's largest diagonal entry.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .linalg import covariance, precision
from .matnorm import MatnormComponent


def normalized_matrices(comp: MatnormComponent) -> dict[str, np.ndarray]:
    cov_n, cov_q = covariance(comp.spatial), covariance(comp.temporal)
    prec_n, prec_q = precision(comp.spatial), precision(comp.temporal)
    c = float(np.max(np.diag(cov_q)))
    d = float(np.max(np.diag(prec_q)))
    return {
        "spatial_covariance": cov_n * c,
        "temporal_covariance": cov_q / c,
        "spatial_precision": prec_n * d,
        "temporal_precision": prec_q / d,
    }


def partial_correlations(prec: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(prec))
    pc = -prec / np.outer(d, d)
    np.fill_diagonal(pc, 1.0)
    return pc


def sparsity(prec: np.ndarray, tol: float = 0.05) -> float:
    """Fraction of off-diagonal partial correlations with magnitude below ``tol``."""
    dim = prec.shape[0]
    if dim < 2:
        return 1.0
    pc = partial_correlations(prec)
    off = pc[~np.eye(dim, dtype=bool)]
    return float(np.mean(np.abs(off) < tol))


def write_matrix_csv(m: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in m.tolist():
            w.writerow([repr(v) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


def _diverging(t: float) -> str:
    """t in [-1, 1] -> blue (negative) / white / red (positive)."""
    t = max(-1.0, min(1.0, t))
    if t >= 0:
        r, g, b = 255, int(round(255 * (1 - t))), int(round(255 * (1 - t)))
    else:
        r, g, b = int(round(255 * (1 + t))), int(round(255 * (1 + t))), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(m: np.ndarray, title: str, cell: int = 18) -> str:
    """Symmetric diverging heatmap with a labelled colour bar."""
    rows, cols = m.shape
    vmax = float(np.max(np.abs(m))) or 1.0
    top, left = 30, 10
    width = left + cols * cell + 90
    height = max(top + rows * cell + 10, 200)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for i in range(rows):
        for j in range(cols):
            v = float(m[i, j])
            parts.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_diverging(v / vmax)}"><title>[{i},{j}] {v:.6g}</title></rect>')
    bx = left + cols * cell + 15
    steps = 20
    bar_h = 150
    for s in range(steps):
        t = 1.0 - 2.0 * s / (steps - 1)
        parts.append(f'<rect x="{bx}" y="{top + s * bar_h / steps:.2f}" width="14" '
                     f'height="{bar_h / steps + 0.5:.2f}" fill="{_diverging(t)}"/>')
    for label, y in ((f"{vmax:.3g}", top + 8), ("0", top + bar_h / 2 + 4), (f"{-vmax:.3g}", top + bar_h)):
        parts.append(f'<text x="{bx + 18}" y="{y:.1f}" font-family="sans-serif" font-size="10">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export(ckpt: Checkpoint, out_dir, tol: float = 0.05) -> list[Path]:
    """Write ``component{k}_{spatial,temporal}_{covariance,precision}.{csv,svg}`` plus ``sparsity.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = []
    for k, comp in enumerate(ckpt.bank.components):
        mats = normalized_matrices(comp)
        for name, m in mats.items():
            base = out / f"component{k}_{name}"
            write_matrix_csv(m, base.with_suffix(".csv"))
            base.with_suffix(".svg").write_text(heatmap_svg(m, f"component {k}: {name.replace('_', ' ')}"))
            written += [base.with_suffix(".csv"), base.with_suffix(".svg")]
        summary.append({
            "component": k,
            "spatial_precision_sparsity": sparsity(mats["spatial_precision"], tol),
            "temporal_precision_sparsity": sparsity(mats["temporal_precision"], tol),
        })
    path = out / "sparsity.json"
    path.write_text(json.dumps({"tolerance": tol, "components": summary}, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
