# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled NMS kernels. Arithmetic order mirrors ``_pure`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    if iw < 0.0:
        iw = 0.0
    if ih < 0.0:
        ih = 0.0
    cdef double inter = iw * ih
    cdef double union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union > 0.0:
        return inter / union
    return 0.0


def iou_matrix(double[::1] ax1, double[::1] ay1, double[::1] ax2, double[::1] ay2,
               double[::1] bx1, double[::1] by1, double[::1] bx2, double[::1] by2):
    cdef Py_ssize_t n = ax1.shape[0], m = bx1.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(ax1[i], ay1[i], ax2[i], ay2[i], bx1[j], by1[j], bx2[j], by2[j])
    return out


def nms_sorted(double[::1] x1, double[::1] y1, double[::1] x2, double[::1] y2,
               cnp.intp_t[::1] order, double nt):
    cdef Py_ssize_t n = order.shape[0], a, b, i, j, count = 0
    keep = np.empty(n, dtype=np.intp)
    cdef cnp.intp_t[::1] k = keep
    cdef cnp.uint8_t[::1] dead = np.zeros(n, dtype=np.uint8)
    with nogil:
        for a in range(n):
            if dead[a]:
                continue
            i = order[a]
            k[count] = i
            count += 1
            for b in range(a + 1, n):
                if dead[b]:
                    continue
                j = order[b]
                if _iou(x1[i], y1[i], x2[i], y2[i], x1[j], y1[j], x2[j], y2[j]) >= nt:
                    dead[b] = 1
    return keep[:count]


def soft_nms(double[::1] x1, double[::1] y1, double[::1] x2, double[::1] y2,
             double[::1] scores, double nt, int gaussian, double sigma, double floor):
    cdef Py_ssize_t n = scores.shape[0], step, t, best, i, count = 0
    cdef double ov, top
    s_arr = np.array(scores, dtype=np.float64)
    cdef double[::1] s = s_arr
    cdef cnp.uint8_t[::1] alive = np.ones(n, dtype=np.uint8)
    keep = np.empty(n, dtype=np.intp)
    kept_scores = np.empty(n, dtype=np.float64)
    cdef cnp.intp_t[::1] k = keep
    cdef double[::1] ks = kept_scores
    with nogil:
        for step in range(n):
            best = -1
            top = 0.0
            for t in range(n):
                if alive[t] and (best < 0 or s[t] > top):
                    best = t
                    top = s[t]
            if best < 0:
                break
            alive[best] = 0
            k[count] = best
            ks[count] = top
            count += 1
            for i in range(n):
                if not alive[i]:
                    continue
                ov = _iou(x1[best], y1[best], x2[best], y2[best], x1[i], y1[i], x2[i], y2[i])
                if gaussian:
                    s[i] = s[i] * exp(-(ov * ov) / sigma)
                elif ov >= nt:
                    s[i] = s[i] * (1.0 - ov)
                if s[i] < floor:
                    alive[i] = 0
    return keep[:count], kept_scores[:count]
