"""Numpy fallback for the compiled NMS kernels (same results, bit for bit)."""
import math

import numpy as np


def _iou_row(x1, y1, x2, y2, i, js):
    iw = np.minimum(x2[i], x2[js]) - np.maximum(x1[i], x1[js])
    ih = np.minimum(y2[i], y2[js]) - np.maximum(y1[i], y1[js])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = (x2[i] - x1[i]) * (y2[i] - y1[i]) + (x2[js] - x1[js]) * (y2[js] - y1[js]) - inter
    out = np.zeros_like(inter)
    pos = union > 0.0
    out[pos] = inter[pos] / union[pos]
    return out


def iou_matrix(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2):
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = ((ax2 - ax1) * (ay2 - ay1))[:, None] + ((bx2 - bx1) * (by2 - by1))[None] - inter
    out = np.zeros_like(inter)
    pos = union > 0.0
    out[pos] = inter[pos] / union[pos]
    return out


def nms_sorted(x1, y1, x2, y2, order, nt):
    order = np.asarray(order, dtype=np.intp)
    n = order.size
    dead = np.zeros(n, dtype=bool)
    keep = []
    for a in range(n):
        if dead[a]:
            continue
        i = order[a]
        keep.append(i)
        rest = np.arange(a + 1, n)
        rest = rest[~dead[rest]]
        if rest.size:
            dead[rest[_iou_row(x1, y1, x2, y2, i, order[rest]) >= nt]] = True
    return np.asarray(keep, dtype=np.intp)


def soft_nms(x1, y1, x2, y2, scores, nt, gaussian, sigma, floor):
    s = np.array(scores, dtype=np.float64)
    alive = np.ones(s.size, dtype=bool)
    keep, kept = [], []
    while alive.any():
        cand = np.flatnonzero(alive)
        best = cand[np.argmax(s[cand])]
        alive[best] = False
        keep.append(best)
        kept.append(s[best])
        rest = np.flatnonzero(alive)
        if not rest.size:
            break
        ov = _iou_row(x1, y1, x2, y2, best, rest)
        if gaussian:
            # libm exp, as in the compiled kernel (numpy's vectorized exp can differ by an ulp)
            s[rest] = s[rest] * np.array([math.exp(v) for v in -(ov * ov) / sigma])
        else:
            hit = ov >= nt
            s[rest[hit]] = s[rest[hit]] * (1.0 - ov[hit])
        alive[rest[s[rest] < floor]] = False
    return np.asarray(keep, dtype=np.intp), np.asarray(kept, dtype=np.float64)
