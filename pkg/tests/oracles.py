"""Independent reference implementations used only by the tests."""
import math

import numpy as np
from scipy.special import log_ndtr


def _log_mass(a, b):
    """log(Phi(b) - Phi(a)) for a < b, computed in whichever tail is accurate."""
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi, llo = log_ndtr(hi), log_ndtr(lo)
    return lhi + np.log1p(-np.exp(np.minimum(llo - lhi, 0.0)))


def exact_denoiser(spec, x, sigma):
    """E[x0 | x0 + sigma*eps = x] for x0 uniform on the occupied cells.

    Each cell contributes a product of 1D truncated-normal posteriors,
    weighted by its Gaussian mass around x.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(x),))[:, None]
    s, e = spec.cell_side, spec.extent
    log_w, means = [], []
    for i, j in spec.occupied_cells():
        lo = np.array([-e + i * s, -e + j * s])
        hi = lo + s
        a, b = (lo - x) / sigma, (hi - x) / sigma
        lz = _log_mass(a, b)
        pa = np.exp(-0.5 * a * a - 0.5 * math.log(2 * math.pi) - lz)
        pb = np.exp(-0.5 * b * b - 0.5 * math.log(2 * math.pi) - lz)
        means.append(np.clip(x + sigma * (pa - pb), lo, hi))
        log_w.append(lz.sum(axis=1))
    log_w = np.stack(log_w)
    w = np.exp(log_w - log_w.max(axis=0))
    w /= w.sum(axis=0)
    return np.einsum("cn,cnd->nd", w, np.stack(means))


def segment_distance(p, a, b):
    """Distance from point p to segment ab with plain float arithmetic."""
    (px, py), (ax, ay), (bx, by) = p, a, b
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    return math.hypot(px - ax - t * dx, py - ay - t * dy)


def brute_boundary_distance(spec, p):
    """Minimum over every unit grid segment that separates occupied from unoccupied."""
    g, s, e = spec.grid, spec.cell_side, spec.extent

    def occ(i, j):
        return 0 <= i < g and 0 <= j < g and (i + j) % 2 == 1

    best = math.inf
    for k in range(g + 1):
        for m in range(g):
            x, y0, y1 = -e + k * s, -e + m * s, -e + (m + 1) * s
            if occ(k - 1, m) != occ(k, m):
                best = min(best, segment_distance(p, (x, y0), (x, y1)))
            y, x0, x1 = -e + k * s, -e + m * s, -e + (m + 1) * s
            if occ(m, k - 1) != occ(m, k):
                best = min(best, segment_distance(p, (x0, y), (x1, y)))
    return best


def jacobi_singular_values(A, sweeps=100):
    """One-sided Jacobi SVD: orthogonalize column pairs until they are orthogonal."""
    U = np.array(A, dtype=np.float64, copy=True)
    n = U.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(U[:, p] @ U[:, p])
                beta = float(U[:, q] @ U[:, q])
                gamma = float(U[:, p] @ U[:, q])
                if gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = c * t
                up, uq = U[:, p].copy(), U[:, q].copy()
                U[:, p] = c * up - sn * uq
                U[:, q] = sn * up + c * uq
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


def factorized_apply_complex(P, Pinv, lam, z):
    """Real part of P^-1 diag(lam) P [z; 0] using Python complex scalars."""
    d = len(z)
    m = len(lam)
    y = [sum(P[r][c] * z[c] for c in range(d)) for r in range(m)]
    y = [lam[r] * y[r] for r in range(m)]
    return [sum(Pinv[r][c] * y[c] for c in range(m)).real for r in range(d)]


def scalar_monomial(x, alpha):
    out = 1.0
    for xi, a in zip(x, alpha):
        out *= xi ** int(a)
    return out
