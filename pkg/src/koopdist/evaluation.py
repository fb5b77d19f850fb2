"""Metrics for the noise-space structure, teacher/student agreement and outliers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import ConfigError
from .ndmath import make_rng
from .teacher import CheckerboardSpec, boundary_distance

SIGMA_GRID = (0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _mean_pairwise(a: np.ndarray, b: np.ndarray, block: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(a), block):
        blk = a[i:i + block]
        d = np.hypot(blk[:, None, 0] - b[None, :, 0], blk[:, None, 1] - b[None, :, 1]) \
            if a.shape[1] == 2 else np.linalg.norm(blk[:, None, :] - b[None, :, :], axis=2)
        total += d.sum()
    return total / (len(a) * len(b))


def _subsample(x: np.ndarray, max_points: int, seed: int) -> np.ndarray:
    if len(x) <= max_points:
        return x
    idx = make_rng(seed, len(x)).choice(len(x), size=max_points, replace=False)
    return x[np.sort(idx)]


def energy_distance(A, B, max_points: int = 5000, seed: int = 0) -> float:
    """2 E||a-b|| - E||a-a'|| - E||b-b'|| over all ordered pairs (V-statistic).

    Sets larger than ``max_points`` are subsampled deterministically. The
    cross term is always taken in a canonical argument order so that the
    result is exactly symmetric.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.size == 0 or B.size == 0:
        raise ConfigError("energy distance needs two nonempty point sets")
    A = _subsample(A, max_points, seed)
    B = _subsample(B, max_points, seed)
    if (len(A), A.tobytes()) > (len(B), B.tobytes()):
        A, B = B, A
    cross = _mean_pairwise(A, B)
    within = _mean_pairwise(A, A) + _mean_pairwise(B, B)
    return float(max(2.0 * cross - within, 0.0))


@dataclass
class StructureReport:
    k: int
    purity: float
    chance: float
    n_points: int

    @property
    def ratio(self) -> float:
        return self.purity / self.chance


def knn_purity(x_T, cells, k: int = 10, n_cells: int | None = None, block: int = 512) -> StructureReport:
    """Mean fraction of each noise point's k nearest noise neighbours in its own cell.

    Points whose sample fell outside every cell (label < 0) are dropped first.
    """
    x_T = np.asarray(x_T, dtype=np.float64)
    cells = np.asarray(cells)
    keep = cells >= 0
    x, c = x_T[keep], cells[keep]
    if len(x) < k + 1:
        raise ConfigError(f"need at least k+1 = {k + 1} labelled points, got {len(x)}")
    n_cells = n_cells or int(c.max()) + 1
    sq = np.sum(x * x, axis=1)
    hits = 0
    for i in range(0, len(x), block):
        blk = x[i:i + block]
        d2 = sq[i:i + block, None] - 2.0 * blk @ x.T + sq[None, :]
        d2[np.arange(len(blk)), np.arange(i, i + len(blk))] = np.inf
        nn = np.argpartition(d2, k, axis=1)[:, :k]
        hits += int(np.sum(c[nn] == c[i:i + block, None]))
    return StructureReport(k, hits / (k * len(x)), 1.0 / n_cells, len(x))


@dataclass
class OutlierReport:
    eps: float
    min_pts: int
    mask: np.ndarray  # True where the point is density noise

    @property
    def n_outliers(self) -> int:
        return int(self.mask.sum())


def detect_outliers(points, eps: float = 0.15, min_pts: int = 4) -> OutlierReport:
    """DBSCAN noise points: neither core nor within eps of a core point.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``.
    """
    if eps <= 0 or min_pts < 1:
        raise ConfigError("eps must be positive and min_pts >= 1")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        return OutlierReport(eps, min_pts, np.zeros(0, dtype=bool))
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit(pts).labels_
    return OutlierReport(eps, min_pts, labels == -1)


@dataclass
class ProvenanceStats:
    empty: bool
    n_outliers: int = 0
    n_inliers: int = 0
    outlier_mean_norm: float = float("nan")  # ||x_T|| / prior std
    inlier_mean_norm: float = float("nan")
    inlier_median_norm: float = float("nan")
    outlier_median_percentile: float = float("nan")  # of the inlier norm distribution
    outlier_mean_boundary: float = float("nan")
    inlier_mean_boundary: float = float("nan")

    @property
    def tail_cause(self) -> bool:
        return not self.empty and self.outlier_median_percentile > 50.0

    @property
    def boundary_cause(self) -> bool:
        return not self.empty and self.outlier_mean_boundary < self.inlier_mean_boundary

    def rows(self) -> list[tuple[str, float]]:
        return [(k, v) for k, v in self.__dict__.items()]


def outlier_provenance(x_T, x_0, report: OutlierReport, spec: CheckerboardSpec,
                       prior_std: float = 1.0) -> ProvenanceStats:
    """Compare outliers with inliers by prior-tail depth and distance to cell edges."""
    x_T = np.asarray(x_T, dtype=np.float64)
    x_0 = np.asarray(x_0, dtype=np.float64)
    if len(report.mask) != len(x_T) or len(x_T) != len(x_0):
        raise ConfigError("outlier mask is not aligned with the pairs")
    out = report.mask
    if not out.any() or out.all():
        return ProvenanceStats(empty=True, n_outliers=int(out.sum()), n_inliers=int((~out).sum()))
    norm = np.linalg.norm(x_T, axis=1) / prior_std
    bd = boundary_distance(spec, x_0)
    inl = np.sort(norm[~out])
    pct = 100.0 * np.searchsorted(inl, np.median(norm[out])) / len(inl)
    return ProvenanceStats(
        empty=False, n_outliers=int(out.sum()), n_inliers=int((~out).sum()),
        outlier_mean_norm=float(norm[out].mean()), inlier_mean_norm=float(norm[~out].mean()),
        inlier_median_norm=float(np.median(norm[~out])), outlier_median_percentile=float(pct),
        outlier_mean_boundary=float(bd[out].mean()), inlier_mean_boundary=float(bd[~out].mean()))


@dataclass
class SweepResult:
    sigmas: tuple[float, ...]
    outputs: list[np.ndarray]  # one (n, 2) array per sigma
    skipped: list[np.ndarray] = field(default_factory=list)  # per sigma, rows that could not be normalized

    def displacement(self) -> np.ndarray:
        """Mean ||out(sigma) - out(first sigma)|| for each sigma."""
        base = self.outputs[0]
        return np.array([np.mean(np.linalg.norm(o - base, axis=1)) for o in self.outputs])


def normalize_noise(x_hat, reference, mode: str = "norm", prior_std: float = 1.0):
    """Put perturbed noises back on the prior's shell; returns (normalized, degenerate_mask).

    mode "norm" rescales each row to the norm of its unperturbed reference;
    mode "standardize" subtracts the row mean, divides by the row standard
    deviation and multiplies by ``prior_std``.
    """
    x_hat = np.atleast_2d(x_hat)
    if mode == "norm":
        n = np.linalg.norm(x_hat, axis=1, keepdims=True)
        bad = n[:, 0] == 0
        scale = np.linalg.norm(np.atleast_2d(reference), axis=1, keepdims=True)
        return np.where(bad[:, None], x_hat, x_hat / np.where(bad[:, None], 1.0, n) * scale), bad
    if mode == "standardize":
        mu = x_hat.mean(axis=1, keepdims=True)
        sd = x_hat.std(axis=1, keepdims=True)
        bad = sd[:, 0] == 0
        return np.where(bad[:, None], x_hat, (x_hat - mu) / np.where(bad[:, None], 1.0, sd) * prior_std), bad
    raise ConfigError(f"unknown normalization mode {mode!r}")


def perturbation_sweep(sampler: Callable[[np.ndarray], np.ndarray], x_T, sigmas=SIGMA_GRID,
                       seed: int = 0, mode: str = "norm", prior_std: float = 1.0) -> SweepResult:
    """Outputs of ``sampler`` on x_T + sigma * eps (then renormalized) for each sigma.

    The same eps is reused across sigmas so the sweep traces a ray per base
    point; sigma = 0 draws no randomness at all.
    """
    sigmas = tuple(float(s) for s in sigmas)
    if not sigmas:
        raise ConfigError("sigma grid is empty")
    x_T = np.atleast_2d(np.asarray(x_T, dtype=np.float64))
    eps = None
    outputs, skipped = [], []
    for s in sigmas:
        if s == 0.0:
            x_hat = x_T
        else:
            if eps is None:
                eps = make_rng(seed).standard_normal(x_T.shape)
            x_hat = x_T + s * eps
        x_n, bad = normalize_noise(x_hat, x_T, mode, prior_std)
        out = np.asarray(sampler(x_n), dtype=np.float64)
        out[bad] = np.nan
        outputs.append(out)
        skipped.append(bad)
    return SweepResult(sigmas, outputs, skipped)


def derangement(n: int, seed: int) -> np.ndarray:
    """Uniform random cyclic permutation (Sattolo); no index maps to itself for n >= 2."""
    rng = make_rng(seed)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass
class Agreement:
    paired_mse: float
    permuted_mse: float

    @property
    def ratio(self) -> float:
        return self.paired_mse / self.permuted_mse if self.permuted_mse else float("inf")


def agreement(teacher_map, student_map, n: int, seed: int, prior_std: float = 1.0) -> Agreement:
    """Paired vs deranged mean squared distance between two noise->sample maps."""
    if n < 2:
        raise ConfigError("agreement needs n >= 2")
    x_T = prior_std * make_rng(seed).standard_normal((n, 2))
    a = np.asarray(teacher_map(x_T))
    b = np.asarray(student_map(x_T))
    paired = float(np.mean(np.sum((a - b) ** 2, axis=1)))
    perm = derangement(n, seed + 1)
    permuted = float(np.mean(np.sum((a - b[perm]) ** 2, axis=1)))
    return Agreement(paired, permuted)


def in_cell_fraction(spec: CheckerboardSpec, points) -> float:
    from .teacher import cell_of

    return float(np.mean(cell_of(spec, points) >= 0))


# -- standalone SVG figures -------------------------------------------------

def scatter_svg(points, labels=None, size: int = 480, extent: float | None = None,
                title: str = "", radius: float = 1.2) -> str:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ext = extent or (float(np.max(np.abs(pts))) * 1.05 if len(pts) else 1.0)
    sx = (pts[:, 0] + ext) / (2 * ext) * size
    sy = size - (pts[:, 1] + ext) / (2 * ext) * size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}">',
             f'<rect width="{size}" height="{size}" fill="white" stroke="black"/>']
    for i in range(len(pts)):
        lab = -1 if labels is None else int(labels[i])
        color = PALETTE[lab % len(PALETTE)] if lab >= 0 else "#999999"
        parts.append(f'<circle cx="{sx[i]:.2f}" cy="{sy[i]:.2f}" r="{radius}" fill="{color}"/>')
    parts.append(f'<text x="4" y="{size + 15}" font-size="12">{title}</text></svg>')
    return "\n".join(parts)


def line_svg(xs, series: dict[str, np.ndarray], size: int = 480, title: str = "") -> str:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    y_max = float(np.nanmax(ys)) or 1.0
    x_max = float(xs.max()) or 1.0
    pad = 30
    span = size - 2 * pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             f'<text x="{pad}" y="18" font-size="12">{title}</text>']
    for j, (name, v) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        coords = " ".join(f"{pad + x / x_max * span:.1f},{size - pad - y / y_max * span:.1f}"
                          for x, y in zip(xs, np.asarray(v, dtype=np.float64)))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{size - 120}" y="{40 + 15 * j}" font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
