"""Deliberately naive reference implementations used as test oracles."""
import math

import numpy as np


def contingency_loops(pred, gt, threshold, pool):
    """Triple loop over (t, tile_i, tile_j), scanning every cell of each tile."""
    T, H, W = len(pred), len(pred[0]), len(pred[0][0])
    tp = fn = fp = tn = 0
    for t in range(T):
        for ti in range(H // pool):
            for tj in range(W // pool):
                p_ev = False
                g_ev = False
                for i in range(ti * pool, ti * pool + pool):
                    for j in range(tj * pool, tj * pool + pool):
                        if pred[t][i][j] >= threshold:
                            p_ev = True
                        if gt[t][i][j] >= threshold:
                            g_ev = True
                if p_ev and g_ev:
                    tp += 1
                elif g_ev:
                    fn += 1
                elif p_ev:
                    fp += 1
                else:
                    tn += 1
    return tp, fn, fp, tn


def scores_from_counts(tp, fn, fp, tn):
    def div(a, b):
        return a / b if b != 0 else math.nan

    return {
        "csi": div(tp, tp + fn + fp),
        "pod": div(tp, tp + fn),
        "far": div(fp, tp + fp),
        "hss": div(2 * (tp * tn - fn * fp), (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)),
    }


def ssim_loops(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Per-window weighted statistics evaluated explicitly at every valid position."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    w = [[g[i] * g[j] / (s * s) for j in range(size)] for i in range(size)]
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    H, W = x.shape
    vals = []
    for a in range(H - size + 1):
        for b in range(W - size + 1):
            mx = my = 0.0
            for i in range(size):
                for j in range(size):
                    mx += w[i][j] * x[a + i, b + j]
                    my += w[i][j] * y[a + i, b + j]
            vx = vy = cxy = 0.0
            for i in range(size):
                for j in range(size):
                    dx = x[a + i, b + j] - mx
                    dy = y[a + i, b + j] - my
                    vx += w[i][j] * dx * dx
                    vy += w[i][j] * dy * dy
                    cxy += w[i][j] * dx * dy
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def mae_loop(p, g):
    p = np.asarray(p, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    total = 0.0
    for a, b in zip(p, g):
        total += abs(a - b)
    return total / len(p)


def central_difference(f, x, eps):
    """Elementwise central differences of scalar ``f`` around float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(x)
        flat[k] = orig - eps
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * eps)
    return grad
