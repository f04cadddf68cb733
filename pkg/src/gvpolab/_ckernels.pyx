# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; drop-in twins of the functions in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef inline void _log_softmax_row(const double[::1] z, double[::1] out) noexcept nogil:
    cdef Py_ssize_t j, n = z.shape[0]
    cdef double m = z[0], s = 0.0, lse
    for j in range(1, n):
        if z[j] > m:
            m = z[j]
    for j in range(n):
        s += exp(z[j] - m)
    lse = m + log(s)
    for j in range(n):
        out[j] = z[j] - lse


def log_softmax(z):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty((zv.shape[0], zv.shape[1]))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t x
    with nogil:
        for x in range(zv.shape[0]):
            _log_softmax_row(zv[x], ov[x])
    return out


def flat_weighted_grad(probs, coef):
    cdef const double[:, ::1] pv = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(coef, dtype=np.float64)
    out = np.empty((pv.shape[0], pv.shape[1]))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t x, j, n = pv.shape[1]
    cdef double s
    with nogil:
        for x in range(pv.shape[0]):
            s = 0.0
            for j in range(n):
                s += cv[x, j]
            for j in range(n):
                ov[x, j] = cv[x, j] - s * pv[x, j]
    return out


def sample_inverse_cdf(probs, u):
    cdef const double[:, ::1] pv = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t p = pv.shape[0], n = pv.shape[1], k = uv.shape[1]
    out = np.empty((p, k), dtype=np.int64)
    cdf = np.empty(n)
    cdef long long[:, ::1] ov = out
    cdef double[::1] c = cdf
    cdef Py_ssize_t x, j, lo, hi, mid
    cdef double acc, target
    with nogil:
        for x in range(p):
            acc = 0.0
            for j in range(n):
                acc += pv[x, j]
                c[j] = acc
            for j in range(k):
                target = uv[x, j] * c[n - 1]
                # first index with c > target
                lo = 0
                hi = n
                while lo < hi:
                    mid = (lo + hi) // 2
                    if c[mid] <= target:
                        lo = mid + 1
                    else:
                        hi = mid
                ov[x, j] = lo if lo < n else n - 1
    return out


def centered_weights(a, double scale):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    squeeze = arr.ndim == 1
    cdef const double[:, ::1] av = arr.reshape(1, -1) if squeeze else arr
    out = np.empty((av.shape[0], av.shape[1]))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t x, j, k = av.shape[1]
    cdef double m
    with nogil:
        for x in range(av.shape[0]):
            m = 0.0
            for j in range(k):
                m += av[x, j]
            m /= k
            for j in range(k):
                ov[x, j] = av[x, j] - m
            m = 0.0
            for j in range(k):
                m += ov[x, j]
            m /= k
            for j in range(k):
                ov[x, j] = scale * (ov[x, j] - m)
    return out[0] if squeeze else out


def scatter_coefficients(ids, coef, Py_ssize_t n):
    cdef const long long[:, ::1] iv = np.ascontiguousarray(ids, dtype=np.int64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(coef, dtype=np.float64)
    out = np.zeros((iv.shape[0], n))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t x, j
    with nogil:
        for x in range(iv.shape[0]):
            for j in range(iv.shape[1]):
                ov[x, iv[x, j]] += cv[x, j]
    return out


def exact_gvpo_flat(z, ref_logp, sample_probs, rewards, double beta):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] rl = np.ascontiguousarray(ref_logp, dtype=np.float64)
    cdef const double[:, ::1] ps = np.ascontiguousarray(sample_probs, dtype=np.float64)
    cdef const double[:, ::1] rw = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef Py_ssize_t p = zv.shape[0], n = zv.shape[1], x, j
    grad = np.empty((p, n))
    scratch = np.empty(2 * n)
    terms = np.zeros(3)
    cdef double[:, ::1] gv = grad
    cdef double[::1] d = scratch[:n]
    cdef double[::1] lp = scratch[n:]
    cdef double[::1] tv = terms
    cdef double m, s, lse, loss = 0.0, csum, el, ea, er, lt, la
    with nogil:
        for x in range(p):
            m = zv[x, 0]
            for j in range(1, n):
                if zv[x, j] > m:
                    m = zv[x, j]
            s = 0.0
            for j in range(n):
                s += exp(zv[x, j] - m)
            lse = m + log(s)
            s = 0.0
            el = 0.0
            ea = 0.0
            er = 0.0
            for j in range(n):
                lp[j] = zv[x, j] - lse
                d[j] = beta * (lp[j] - rl[x, j]) - rw[x, j]
                s += ps[x, j] * d[j]
                el += ps[x, j] * (lp[j] - lp[0])
                ea += ps[x, j] * (rl[x, j] - rl[x, 0])
                er += ps[x, j] * rw[x, j]
            csum = 0.0
            for j in range(n):
                d[j] -= s
                loss += 0.5 * ps[x, j] * d[j] * d[j]
                gv[x, j] = beta * ps[x, j] * d[j]
                csum += gv[x, j]
                lt = (lp[j] - lp[0]) - el
                la = (rl[x, j] - rl[x, 0]) - ea
                tv[0] += ps[x, j] * (rw[x, j] - er) * lp[j]
                tv[1] += ps[x, j] * lt * la
                tv[2] += ps[x, j] * lt * lt
            for j in range(n):
                gv[x, j] -= csum * exp(lp[j])
        for j in range(3):
            tv[j] /= p
    return loss, grad, terms


def policy_metrics(logp, opt_logp, aux_logp, rewards):
    cdef const double[:, ::1] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef const double[:, ::1] op = np.ascontiguousarray(opt_logp, dtype=np.float64)
    cdef const double[:, ::1] ap = np.ascontiguousarray(aux_logp, dtype=np.float64)
    cdef const double[:, ::1] rw = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef Py_ssize_t p = lp.shape[0], n = lp.shape[1], x, j
    cdef double mr = 0.0, ko = 0.0, ka = 0.0, a, b, pr
    with nogil:
        for x in range(p):
            a = 0.0
            b = 0.0
            for j in range(n):
                pr = exp(lp[x, j])
                mr += pr * rw[x, j]
                a += exp(op[x, j]) * (op[x, j] - lp[x, j])
                b += pr * (lp[x, j] - ap[x, j])
            ko += a if a > 0.0 else 0.0
            ka += b if b > 0.0 else 0.0
    return mr / p, ko / p, ka / p
