# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: same contracts as ``_kernels_py`` (the pure-numpy
reference), fused per ray to avoid temporaries. Float64 only."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, erfc, exp, expm1, sin

cnp.import_array()

PDF_BLEND_FLOOR = 1e-6
cdef double _SLO = 1e-6
cdef double _SQRT1_2 = 0.7071067811865476


def positional_encoding(double[:, ::1] x, int n_freq):
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.empty((m, 2 * n_freq * d))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, l, j, base
    cdef double freq, ang
    for i in range(m):
        for l in range(n_freq):
            freq = <double> (1 << l) if l < 63 else 2.0 ** l
            base = 2 * l * d
            for j in range(d):
                ang = freq * x[i, j]
                out[i, base + j] = sin(ang)
                out[i, base + d + j] = cos(ang)
    return out_arr


def composite_fwd(double[:, ::1] t, double[:, ::1] deltas,
                  double[:, ::1] tau, double[:, :, ::1] rgb):
    cdef Py_ssize_t r = t.shape[0]
    cdef Py_ssize_t n = t.shape[1]
    color_arr = np.zeros((r, 3))
    depth_arr = np.empty(r)
    w_arr = np.empty((r, n))
    trans_arr = np.empty((r, n))
    trans_next_arr = np.empty((r, n))
    pdf_arr = np.empty((r, n))
    wsum_arr = np.empty(r)
    cdef double[:, ::1] color = color_arr
    cdef double[::1] depth = depth_arr
    cdef double[:, ::1] w = w_arr
    cdef double[:, ::1] trans = trans_arr
    cdef double[:, ::1] trans_next = trans_next_arr
    cdef double[:, ::1] pdf = pdf_arr
    cdef double[::1] wsum = wsum_arr
    cdef Py_ssize_t i, k
    cdef double acc, a, tk, tn, alpha, wk, s, lam, uni, p, dep
    for i in range(r):
        acc = 0.0
        s = 0.0
        tk = 1.0
        for k in range(n):
            a = tau[i, k] * deltas[i, k]
            trans[i, k] = tk
            alpha = -expm1(-a)
            wk = tk * alpha
            w[i, k] = wk
            s += wk
            acc += a
            tn = exp(-acc)
            trans_next[i, k] = tn
            tk = tn
            color[i, 0] += wk * rgb[i, k, 0]
            color[i, 1] += wk * rgb[i, k, 1]
            color[i, 2] += wk * rgb[i, k, 2]
        wsum[i] = s
        dep = 0.0
        uni = 1.0 / n
        if s <= 0.0:
            for k in range(n):
                pdf[i, k] = uni
                dep += uni * t[i, k]
        elif s < _SLO:
            lam = (1.0 - s / _SLO) * uni
            for k in range(n):
                p = w[i, k] / _SLO + lam
                pdf[i, k] = p
                dep += p * t[i, k]
        else:
            for k in range(n):
                p = w[i, k] / s
                pdf[i, k] = p
                dep += p * t[i, k]
        depth[i] = dep
    return color_arr, depth_arr, w_arr, trans_arr, trans_next_arr, pdf_arr, wsum_arr


def composite_bwd(double[:, ::1] t, double[:, ::1] deltas, double[:, ::1] w,
                  double[:, ::1] trans_next, double[:, ::1] pdf,
                  double[::1] wsum, double[:, :, ::1] rgb,
                  double[:, ::1] d_color, double[::1] d_depth,
                  double[:, ::1] d_pdf):
    cdef Py_ssize_t r = t.shape[0]
    cdef Py_ssize_t n = t.shape[1]
    d_rgb_arr = np.empty((r, n, 3))
    d_tau_arr = np.empty((r, n))
    cdef double[:, :, ::1] d_rgb = d_rgb_arr
    cdef double[:, ::1] d_tau = d_tau_arr
    dw_arr = np.empty(n)
    dp_arr = np.empty(n)
    cdef double[::1] dw = dw_arr
    cdef double[::1] dp = dp_arr
    cdef Py_ssize_t i, k
    cdef double s, inner, suffix, dd, dc0, dc1, dc2
    for i in range(r):
        s = wsum[i]
        dd = d_depth[i]
        for k in range(n):
            dp[k] = d_pdf[i, k] + dd * t[i, k]
        if s <= 0.0:
            for k in range(n):
                dw[k] = 0.0
        elif s < _SLO:
            inner = 0.0
            for k in range(n):
                inner += dp[k]
            inner /= n
            for k in range(n):
                dw[k] = (dp[k] - inner) / _SLO
        else:
            inner = 0.0
            for k in range(n):
                inner += dp[k] * pdf[i, k]
            for k in range(n):
                dw[k] = (dp[k] - inner) / s
        dc0 = d_color[i, 0]
        dc1 = d_color[i, 1]
        dc2 = d_color[i, 2]
        for k in range(n):
            dw[k] += dc0 * rgb[i, k, 0] + dc1 * rgb[i, k, 1] + dc2 * rgb[i, k, 2]
            d_rgb[i, k, 0] = w[i, k] * dc0
            d_rgb[i, k, 1] = w[i, k] * dc1
            d_rgb[i, k, 2] = w[i, k] * dc2
        suffix = 0.0
        for k in range(n - 1, -1, -1):
            d_tau[i, k] = (dw[k] * trans_next[i, k] - suffix) * deltas[i, k]
            suffix += dw[k] * w[i, k]
    return d_rgb_arr, d_tau_arr


def sample_pdf(double[:, ::1] edges, double[:, ::1] weights, double[:, ::1] u):
    cdef Py_ssize_t r = weights.shape[0]
    cdef Py_ssize_t m = weights.shape[1]
    cdef Py_ssize_t k = u.shape[1]
    out_arr = np.empty((r, k))
    cdef double[:, ::1] out = out_arr
    cdf_arr = np.empty(m + 1)
    cdef double[::1] cdf = cdf_arr
    cdef Py_ssize_t i, j, lo, hi, mid
    cdef double total, uu, span, frac
    for i in range(r):
        total = 0.0
        cdf[0] = 0.0
        for j in range(m):
            total += weights[i, j]
            cdf[j + 1] = total
        for j in range(m):
            cdf[j + 1] /= total
        cdf[m] = 1.0
        for j in range(k):
            uu = u[i, j]
            # rightmost index with cdf[idx] <= uu, clipped to [0, m-1]
            lo = 0
            hi = m + 1
            while lo < hi:
                mid = (lo + hi) >> 1
                if cdf[mid] <= uu:
                    lo = mid + 1
                else:
                    hi = mid
            lo -= 1
            if lo > m - 1:
                lo = m - 1
            if lo < 0:
                lo = 0
            span = cdf[lo + 1] - cdf[lo]
            frac = (uu - cdf[lo]) / span if span > 0.0 else 0.0
            out[i, j] = edges[i, lo] + frac * (edges[i, lo + 1] - edges[i, lo])
    return out_arr


def gaussian_bin_masses(double[:, ::1] edges, double[::1] mu, double[::1] sigma):
    cdef Py_ssize_t r = edges.shape[0]
    cdef Py_ssize_t n = edges.shape[1] - 1
    out_arr = np.empty((r, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double inv, prev, cur
    for i in range(r):
        inv = 1.0 / sigma[i]
        prev = 0.5 * erfc(-(edges[i, 0] - mu[i]) * inv * _SQRT1_2)
        for k in range(n):
            cur = 0.5 * erfc(-(edges[i, k + 1] - mu[i]) * inv * _SQRT1_2)
            out[i, k] = cur - prev
            prev = cur
    return out_arr
