"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def all_pairs_neighbors(pos, h, period=None):
    """Strict ``|x_i - x_j| < h`` neighbour sets by O(N^2) comparison."""
    pos = np.asarray(pos, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    d = pos[:, None, :] - pos[None, :, :]
    if period is not None:
        per = np.asarray(period, dtype=float)
        for k in range(pos.shape[1]):
            if per[k] > 0:
                d[..., k] -= per[k] * np.round(d[..., k] / per[k])
    r = np.sqrt((d**2).sum(-1))
    np.fill_diagonal(r, np.inf)
    return [set(np.flatnonzero(r[i] < h).tolist()) for i in range(len(pos))]


def empty_circumcircle_violations(points, triangles, rel_tol=1e-12):
    """Count (triangle, point) pairs with the point strictly inside the circumcircle."""
    P = np.asarray(points, dtype=float)
    scale = np.ptp(P, axis=0).max()
    bad = 0
    for tri in triangles:
        a, b, c = P[tri]
        d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
        uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
        centre = np.array([ux, uy])
        rad = np.linalg.norm(a - centre)
        dist = np.linalg.norm(P - centre, axis=1)
        mask = np.ones(len(P), bool)
        mask[list(tri)] = False
        bad += int(np.sum(dist[mask] < rad - rel_tol * scale))
    return bad


def nnls_enumeration(A, b):
    """Exact NNLS by trying every passive set (feasible for <= ~10 columns).

    For each subset S the unconstrained least-squares solution on S is a
    candidate when it is non-negative; the best candidate is the global
    minimiser because the NNLS optimum is such a solution for its support.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    best_x, best_r = np.zeros(n), float(np.linalg.norm(b))
    for k in range(1, n + 1):
        for S in itertools.combinations(range(n), k):
            z, *_ = np.linalg.lstsq(A[:, S], b, rcond=None)
            if np.all(z >= 0):
                x = np.zeros(n)
                x[list(S)] = z
                r = float(np.linalg.norm(A @ x - b))
                if r < best_r:
                    best_x, best_r = x, r
    return best_x, best_r


def dense_laplacian_1d(x, a, vols, kernel, n_interior):
    """Hand-assembled Morris operator rows for 1-D particles (double loop)."""
    n = len(x)
    L = np.zeros((n_interior, n))
    for i in range(n_interior):
        for j in range(n):
            if i == j:
                continue
            r = abs(x[i] - x[j])
            if r >= kernel.h:
                continue
            # x_ij . grad_i W_ij / r^2 = dW/dr / r
            coef = vols[j] * (a[i] + a[j]) * kernel.dw_of_r(r) / r
            L[i, j] -= coef
            L[i, i] += coef
    return L
