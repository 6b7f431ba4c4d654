"""Independent reference implementations used as test oracles.

Nothing here imports from the package under test; each routine follows the
textbook definition with plain loops so that it fails differently from the
vectorized code it checks.
"""

import itertools
import math

import numpy as np


def naive_matvec(A, v):
    """Element-by-element product, accumulated in a Python float."""
    rows, cols = len(A), len(A[0])
    out = [0.0] * rows
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc += float(A[i][j]) * float(v[j])
        out[i] = acc
    return np.array(out)


def jacobi_eigenvalues(S, tol=1e-14, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
    return np.sort(np.diag(A))[::-1]


def best_subset_residual(D, y, k):
    """Smallest ``||y - D_S x||^2`` over all supports of size ``k``."""
    D = np.asarray(D, dtype=np.float64)
    best = math.inf
    best_support = None
    for S in itertools.combinations(range(D.shape[1]), k):
        Ds = D[:, S]
        x, *_ = np.linalg.lstsq(Ds, y, rcond=None)
        r = y - Ds @ x
        val = float(r @ r)
        if val < best:
            best, best_support = val, S
    return best, best_support


def direct_ssim(x, y, win=11, sigma=1.5, k1=0.01, k2=0.03, peak=255.0):
    """SSIM straight from its definition, one window at a time."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    half = (win - 1) / 2.0
    w = np.array([[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma))
                   for j in range(win)] for i in range(win)])
    w /= w.sum()
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    H, W = x.shape
    total, count = 0.0, 0
    for r in range(H - win + 1):
        for c in range(W - win + 1):
            bx = x[r:r + win, c:c + win]
            by = y[r:r + win, c:c + win]
            mx = float(np.sum(w * bx))
            my = float(np.sum(w * by))
            vx = float(np.sum(w * (bx - mx) ** 2))
            vy = float(np.sum(w * (by - my) ** 2))
            cxy = float(np.sum(w * (bx - mx) * (by - my)))
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            count += 1
    return total / count


def reference_forward(D, c, w, mlps, T, Y):
    """Learned K-SVD forward pass, one patch and one pixel at a time.

    ``mlps`` is a list of ``(W1, W2, W3)`` tuples.
    """
    D = np.asarray(D, dtype=np.float64)
    p, m = D.shape
    side = int(round(math.sqrt(p)))
    img = np.asarray(Y, dtype=np.float64).copy()
    for W1, W2, W3 in mlps:
        H, Wd = img.shape
        num = np.zeros((H, Wd))
        den = np.zeros((H, Wd))
        for r in range(H - side + 1):
            for col in range(Wd - side + 1):
                y = np.array([img[r + i, col + j] for i in range(side) for j in range(side)])
                h1 = [max(sum(y[a] * W1[a, b] for a in range(p)), 0.0) for b in range(2 * p)]
                h2 = [max(sum(h1[a] * W2[a, b] for a in range(2 * p)), 0.0) for b in range(p)]
                lam = max(sum(h2[a] * W3[a, 0] for a in range(p)), 0.0)
                alpha = np.zeros(m)
                for _ in range(T):
                    resid = D @ alpha - y
                    u = alpha - (D.T @ resid) / c
                    alpha = np.array([math.copysign(max(abs(ui) - lam / c, 0.0), ui) for ui in u])
                x = D @ alpha
                for i in range(side):
                    for j in range(side):
                        wk = max(w[i * side + j], 1e-6)
                        num[r + i, col + j] += wk * x[i * side + j]
                        den[r + i, col + j] += wk
        img = num / den
    return img


def loop_scatter(values, patch_shape, source_shape):
    """``sum_k R_k^T v_k`` with an explicit loop over patches."""
    ph, pw = patch_shape
    H, W = source_shape
    out = np.zeros((H, W))
    k = 0
    for r in range(H - ph + 1):
        for c in range(W - pw + 1):
            out[r:r + ph, c:c + pw] += np.asarray(values[k]).reshape(ph, pw)
            k += 1
    return out
