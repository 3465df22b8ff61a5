"""Pure-numpy kernels. Reference path and fallback when numba is disabled."""
from __future__ import annotations

import numpy as np


def pair_counts(x: np.ndarray, y: np.ndarray) -> tuple[int, int, int, int, int]:
    """Return (concordant, discordant, tied_x_only, tied_y_only, tied_both)."""
    n = x.shape[0]
    c = d = tx = ty = tb = 0
    for i in range(n - 1):
        dx = np.sign(x[i + 1:] - x[i])
        dy = np.sign(y[i + 1:] - y[i])
        prod = dx * dy
        zx = dx == 0
        zy = dy == 0
        c += int(np.count_nonzero(prod > 0))
        d += int(np.count_nonzero(prod < 0))
        tx += int(np.count_nonzero(zx & ~zy))
        ty += int(np.count_nonzero(zy & ~zx))
        tb += int(np.count_nonzero(zx & zy))
    return c, d, tx, ty, tb


def nearest_centroid(points: np.ndarray, centroids: np.ndarray, chunk: int = 256):
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for s in range(0, n, chunk):
        diff = points[s:s + chunk, None, :] - centroids[None, :, :]
        sq = (diff * diff).sum(axis=2)
        lab = np.argmin(sq, axis=1)
        labels[s:s + chunk] = lab
        dists[s:s + chunk] = sq[np.arange(lab.shape[0]), lab]
    return labels, dists


def batch_gradients(V, y, ptr, lis, sc, batch, W, a, b, E, ch, ce, d,
                    alpha, beta, le):
    """Gradients of alpha*L_ssl + beta*L_le for one minibatch of utterances.

    Scalars ``b`` and ``d`` are length-1 arrays so the kernels can update them
    in place. Returns (gW, ga, gb, gE, gch, gce, gd, loss_ssl, loss_le).
    """
    nb = batch.shape[0]
    Vb = V[batch]
    H = Vb @ W
    res = H @ a + b[0] - y[batch]
    r = (alpha / nb) * np.sign(res)
    ga = r @ H
    gb = np.array([r.sum()])
    gH = np.outer(r, a)
    loss_ssl = float(np.abs(res).mean())

    gE = np.zeros_like(E)
    gch = np.zeros_like(ch)
    gce = np.zeros_like(ce)
    gd = np.zeros(1)
    loss_le = 0.0
    if le:
        counts = ptr[batch + 1] - ptr[batch]
        pair_utt = np.repeat(np.arange(nb), counts)
        pr = np.concatenate([np.arange(ptr[i], ptr[i + 1]) for i in batch])
        li = lis[pr]
        Hp = H[pair_utt]
        Ep = E[li]
        res_l = Hp @ ch + Ep @ ce + d[0] - sc[pr]
        s = (beta / pr.shape[0]) * np.sign(res_l)
        gch = s @ Hp
        gce = s @ Ep
        gd = np.array([s.sum()])
        np.add.at(gE, li, np.outer(s, ce))
        gH = gH + np.outer(np.bincount(pair_utt, weights=s, minlength=nb), ch)
        loss_le = float(np.abs(res_l).mean())
    gW = Vb.T @ gH
    return gW, ga, gb, gE, gch, gce, gd, loss_ssl, loss_le


def sgd_epoch(V, y, ptr, lis, sc, order, batch_size, W, a, b, E, ch, ce, d,
              lr, alpha, beta, le):
    """One pass of plain SGD over ``order``; parameters are updated in place.

    Returns the mean per-batch (loss_ssl, loss_le).
    """
    tot_ssl = 0.0
    tot_le = 0.0
    nbatch = 0
    for s in range(0, order.shape[0], batch_size):
        batch = order[s:s + batch_size]
        gW, ga, gb, gE, gch, gce, gd, l_ssl, l_le = batch_gradients(
            V, y, ptr, lis, sc, batch, W, a, b, E, ch, ce, d, alpha, beta, le)
        W -= lr * gW
        a -= lr * ga
        b -= lr * gb
        if le:
            E -= lr * gE
            ch -= lr * gch
            ce -= lr * gce
            d -= lr * gd
        tot_ssl += l_ssl
        tot_le += l_le
        nbatch += 1
    return tot_ssl / nbatch, tot_le / nbatch


def rmsprop_epoch(X, y, w, v, order, batch_size, lr, rho, eps):
    """One RMSProp pass on mean-squared error of ``X @ w``; ``w``/``v`` in place."""
    tot = 0.0
    nbatch = 0
    for s in range(0, order.shape[0], batch_size):
        idx = order[s:s + batch_size]
        Xb = X[idx]
        res = Xb @ w - y[idx]
        g = (2.0 / idx.shape[0]) * (Xb.T @ res)
        v *= rho
        v += (1.0 - rho) * g * g
        w -= lr * g / (np.sqrt(v) + eps)
        tot += float((res * res).mean())
        nbatch += 1
    return tot / nbatch
