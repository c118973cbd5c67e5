"""Independent reference computations used by the tests.

Written as straight-line loops on purpose; they share no code with the package.
"""

import math

import numpy as np


def raster_iou(a, b):
    """IoU of integer boxes by counting unit cells."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    x0 = int(min(a[0], b[0]))
    y0 = int(min(a[1], b[1]))
    x1 = int(max(a[2], b[2]))
    y1 = int(max(a[3], b[3]))
    inter = union = 0
    for y in range(y0, y1):
        for x in range(x0, x1):
            cx, cy = x + 0.5, y + 0.5
            in_a = a[0] <= cx < a[2] and a[1] <= cy < a[3]
            in_b = b[0] <= cx < b[2] and b[1] <= cy < b[3]
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union if union else 0.0


def dense_attention(x, wq, wk, wv, wo, heads, scaled=True):
    """Multi-head attention with explicit per-row softmax loops."""
    n, d = x.shape
    dh = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            logits = np.array([np.dot(q[i, sl], k[j, sl]) for j in range(n)])
            if scaled:
                logits = logits / math.sqrt(dh)
            e = np.exp(logits - logits.max())
            w = e / e.sum()
            for j in range(n):
                out[i, sl] += w[j] * v[j, sl]
    return out @ wo


def sliding_correlation(fm, ex):
    """Triple-loop zero-padded cross-correlation, divided by C * P * P."""
    c, h, w = fm.shape
    _, ph, pw = ex.shape
    oy, ox = (ph - 1) // 2, (pw - 1) // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for u in range(ph):
                for v in range(pw):
                    y, x = i + u - oy, j + v - ox
                    if 0 <= y < h and 0 <= x < w:
                        s += float(np.dot(fm[:, y, x], ex[:, u, v]))
            out[i, j] = s / (c * ph * pw)
    return out


def topk_reference(counts, ious, k, thresh=0.3):
    counts = list(counts)[:k]
    ious = list(ious)[:k]
    kept = [c for c, o in zip(counts, ious) if o >= thresh]
    pool = kept if kept else counts
    return sum(pool) / len(pool)


def mae_rmse_reference(pairs):
    n = len(pairs)
    abs_sum = 0.0
    sq_sum = 0.0
    for y, yh in pairs:
        abs_sum += abs(y - yh)
        sq_sum += (y - yh) ** 2
    return abs_sum / n, math.sqrt(sq_sum / n)


def central_difference(f, params, eps=1e-6):
    """Numeric gradient of scalar ``f()`` w.r.t. every entry of each float64 tensor in ``params``."""
    grads = []
    for p in params:
        g = np.zeros(p.shape)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
