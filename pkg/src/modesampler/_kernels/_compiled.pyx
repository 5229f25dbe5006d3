# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels (see _pure.py for semantics)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, log, log1p, sqrt, INFINITY

cnp.import_array()


def gmm_logpdf(double[::1] x, double[:, ::1] means, double[:, :, ::1] precs,
               double[::1] log_norms):
    cdef Py_ssize_t k_count = means.shape[0]
    cdef Py_ssize_t d = means.shape[1]
    cdef Py_ssize_t k, i, j
    cdef double quad, acc, m, total, term
    cdef double[::1] terms = np.empty(k_count)
    cdef double[::1] diff = np.empty(d)

    m = -INFINITY
    for k in range(k_count):
        for i in range(d):
            diff[i] = x[i] - means[k, i]
        quad = 0.0
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += precs[k, i, j] * diff[j]
            quad += diff[i] * acc
        term = log_norms[k] - 0.5 * quad
        terms[k] = term
        if term > m:
            m = term
    total = 0.0
    for k in range(k_count):
        total += exp(terms[k] - m)
    return m + log(total)


def gmm_logpdf_grad(double[::1] x, double[:, ::1] means, double[:, :, ::1] precs,
                    double[::1] log_norms):
    cdef Py_ssize_t k_count = means.shape[0]
    cdef Py_ssize_t d = means.shape[1]
    cdef Py_ssize_t k, i, j
    cdef double quad, m, total, w
    cdef cnp.ndarray[double, ndim=1] grad_arr = np.zeros(d)
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] pulled = np.empty((k_count, d))
    cdef double[::1] terms = np.empty(k_count)
    cdef double[::1] diff = np.empty(d)

    m = -INFINITY
    for k in range(k_count):
        for i in range(d):
            diff[i] = x[i] - means[k, i]
        quad = 0.0
        for i in range(d):
            pulled[k, i] = 0.0
            for j in range(d):
                pulled[k, i] += precs[k, i, j] * diff[j]
            quad += diff[i] * pulled[k, i]
        terms[k] = log_norms[k] - 0.5 * quad
        if terms[k] > m:
            m = terms[k]
    total = 0.0
    for k in range(k_count):
        terms[k] = exp(terms[k] - m)
        total += terms[k]
    for k in range(k_count):
        w = terms[k] / total
        for i in range(d):
            grad[i] -= w * pulled[k, i]
    return m + log(total), grad_arr


def sensor_logpdf(double[::1] x, cnp.int64_t[::1] pi, cnp.int64_t[::1] pj, cnp.uint8_t[::1] obs,
                  double[::1] dist, double inv_2r2, double inv_2s2,
                  double log_pnu_norm):
    cdef Py_ssize_t n_pairs = pi.shape[0]
    cdef Py_ssize_t p
    cdef double dx, dy, r, resid, total
    total = 0.0
    for p in range(n_pairs):
        dx = x[2 * pi[p]] - x[2 * pj[p]]
        dy = x[2 * pi[p] + 1] - x[2 * pj[p] + 1]
        r = sqrt(dx * dx + dy * dy)
        if obs[p]:
            resid = dist[p] - r
            total += -r * r * inv_2r2 - resid * resid * inv_2s2 + log_pnu_norm
        else:
            if r == 0.0:
                return -INFINITY
            total += log(-expm1(-r * r * inv_2r2))
    return total


def sensor_logpdf_grad(double[::1] x, cnp.int64_t[::1] pi, cnp.int64_t[::1] pj,
                       cnp.uint8_t[::1] obs, double[::1] dist, double inv_2r2,
                       double inv_2s2, double log_pnu_norm):
    cdef Py_ssize_t n_pairs = pi.shape[0]
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p, a, b
    cdef double dx, dy, r, resid, total, coef, po, gx, gy
    cdef cnp.ndarray[double, ndim=1] grad_arr = np.zeros(n)
    cdef double[::1] grad = grad_arr

    # zero-density guard: any coincident non-detection pair
    for p in range(n_pairs):
        if not obs[p]:
            dx = x[2 * pi[p]] - x[2 * pj[p]]
            dy = x[2 * pi[p] + 1] - x[2 * pj[p] + 1]
            if dx == 0.0 and dy == 0.0:
                return -INFINITY, np.zeros(n)

    total = 0.0
    for p in range(n_pairs):
        a = pi[p]
        b = pj[p]
        dx = x[2 * a] - x[2 * b]
        dy = x[2 * a + 1] - x[2 * b + 1]
        r = sqrt(dx * dx + dy * dy)
        if obs[p]:
            resid = dist[p] - r
            total += -r * r * inv_2r2 - resid * resid * inv_2s2 + log_pnu_norm
            coef = -2.0 * inv_2r2 * r + 2.0 * inv_2s2 * resid
        else:
            po = exp(-r * r * inv_2r2)
            total += log1p(-po)
            coef = 2.0 * inv_2r2 * r * po / (1.0 - po)
        if r > 0.0:
            gx = coef * dx / r
            gy = coef * dy / r
            grad[2 * a] += gx
            grad[2 * a + 1] += gy
            grad[2 * b] -= gx
            grad[2 * b + 1] -= gy
    return total, grad_arr


def active_wormhole(double[::1] x, double[:, ::1] ends_a, double[:, ::1] ends_b,
                    double[::1] lengths):
    cdef Py_ssize_t w_count = ends_a.shape[0]
    cdef Py_ssize_t d = ends_a.shape[1]
    cdef Py_ssize_t w, i
    cdef double da, db, t, excess, best
    cdef Py_ssize_t best_idx = 0
    best = INFINITY
    for w in range(w_count):
        da = 0.0
        db = 0.0
        for i in range(d):
            t = x[i] - ends_a[w, i]
            da += t * t
            t = ends_b[w, i] - x[i]
            db += t * t
        excess = sqrt(da) + sqrt(db) - lengths[w]
        if excess < best:
            best = excess
            best_idx = w
    return best_idx, best
