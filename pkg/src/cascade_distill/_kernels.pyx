# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels with the same contract as ``_kernels_py``.

Matrix products go straight to BLAS ``dgemm``; everything else (bias, ReLU,
softmax cross-entropy, the SGD update) is a plain loop, so an epoch runs
without touching the interpreter between batches.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef Py_ssize_t FWD_CHUNK = 4096


cdef inline void _gemm(char ta, char tb, int m, int n, int k,
                       double* A, int lda, double* B, int ldb,
                       double beta, double* C, int ldc) noexcept nogil:
    cdef double alpha = 1.0
    dgemm(&ta, &tb, &m, &n, &k, &alpha, A, &lda, B, &ldb, &beta, C, &ldc)


cdef class _Layout:
    cdef int nl
    cdef int[::1] w
    cdef Py_ssize_t[::1] poff
    cdef Py_ssize_t[::1] cum
    cdef int maxw

    def __init__(self, widths):
        cdef Py_ssize_t i
        self.nl = len(widths) - 1
        self.w = np.asarray(widths, dtype=np.intc)
        self.poff = np.zeros(self.nl + 1, dtype=np.intp)
        self.cum = np.zeros(self.nl + 2, dtype=np.intp)
        self.maxw = 0
        for i in range(self.nl):
            self.poff[i + 1] = self.poff[i] + (self.w[i] + 1) * self.w[i + 1]
        for i in range(self.nl + 1):
            self.cum[i + 1] = self.cum[i] + self.w[i]
            if self.w[i] > self.maxw:
                self.maxw = self.w[i]


cdef void _fwd(double* params, _Layout lay, double* acts, int bs) noexcept nogil:
    cdef int l, r, j, fin, fout
    cdef double* Wp
    cdef double* bp
    cdef double* a_in
    cdef double* out
    cdef double v
    for l in range(lay.nl):
        fin = lay.w[l]
        fout = lay.w[l + 1]
        Wp = params + lay.poff[l]
        bp = Wp + fin * fout
        a_in = acts + bs * lay.cum[l]
        out = acts + bs * lay.cum[l + 1]
        _gemm(b'T', b'N', fout, bs, fin, Wp, fin, a_in, fin, 0.0, out, fout)
        for r in range(bs):
            for j in range(fout):
                v = out[r * fout + j] + bp[j]
                if l < lay.nl - 1 and v < 0.0:
                    v = 0.0
                out[r * fout + j] = v


cdef double _xent_delta(double* Z, double* T, double* dZ, int bs, int K,
                        double tau) noexcept nogil:
    cdef int r, j
    cdef double m, tot, s, loss = 0.0, scale = tau / bs
    for r in range(bs):
        m = tau * Z[r * K]
        for j in range(1, K):
            s = tau * Z[r * K + j]
            if s > m:
                m = s
        tot = 0.0
        for j in range(K):
            s = exp(tau * Z[r * K + j] - m)
            dZ[r * K + j] = s
            tot += s
        for j in range(K):
            s = tau * Z[r * K + j] - m - log(tot)
            loss -= T[r * K + j] * s
            dZ[r * K + j] = scale * (dZ[r * K + j] / tot - T[r * K + j])
    return loss


cdef void _bwd(double* params, _Layout lay, double* acts, double* dZ,
               double* dA, double* grad, int bs) noexcept nogil:
    cdef int l, r, j, fin, fout
    cdef double* Wp
    cdef double* gW
    cdef double* gb
    cdef double* a_in
    cdef double* tmp
    cdef double s
    for l in range(lay.nl - 1, -1, -1):
        fin = lay.w[l]
        fout = lay.w[l + 1]
        Wp = params + lay.poff[l]
        gW = grad + lay.poff[l]
        gb = gW + fin * fout
        a_in = acts + bs * lay.cum[l]
        _gemm(b'N', b'T', fin, fout, bs, a_in, fin, dZ, fout, 0.0, gW, fin)
        for j in range(fout):
            s = 0.0
            for r in range(bs):
                s += dZ[r * fout + j]
            gb[j] = s
        if l > 0:
            _gemm(b'N', b'N', fin, bs, fout, Wp, fin, dZ, fout, 0.0, dA, fin)
            for r in range(bs * fin):
                if a_in[r] <= 0.0:
                    dA[r] = 0.0
            tmp = dZ
            dZ = dA
            dA = tmp


def forward(const double[::1] params, widths, const double[:, ::1] X):
    """Logits for a batch ``X`` of shape (n, widths[0])."""
    cdef _Layout lay = _Layout(widths)
    cdef Py_ssize_t n = X.shape[0], start, r, j
    cdef int d = lay.w[0], K = lay.w[lay.nl], bs
    cdef double[::1] acts = np.empty(FWD_CHUNK * lay.cum[lay.nl + 1])
    out_arr = np.empty((n, K))
    cdef double[:, ::1] out = out_arr
    cdef double* ap = &acts[0]
    cdef double* zp
    with nogil:
        start = 0
        while start < n:
            bs = <int>(n - start) if n - start < FWD_CHUNK else FWD_CHUNK
            for r in range(bs):
                for j in range(d):
                    ap[r * d + j] = X[start + r, j]
            _fwd(<double*>&params[0], lay, ap, bs)
            zp = ap + bs * lay.cum[lay.nl]
            for r in range(bs):
                for j in range(K):
                    out[start + r, j] = zp[r * K + j]
            start += bs
    return out_arr


def sgd_epoch(double[::1] params, widths, const double[:, ::1] X,
              const double[:, ::1] T, const cnp.int64_t[::1] order,
              double lr, double tau, int batch_size):
    """One epoch of mini-batch SGD, updating ``params`` in place.

    Returns the mean per-example loss measured on each batch before its update.
    """
    cdef _Layout lay = _Layout(widths)
    cdef Py_ssize_t n = order.shape[0], P = lay.poff[lay.nl]
    cdef Py_ssize_t start, r, j, i
    cdef int d = lay.w[0], K = lay.w[lay.nl], bs
    cdef double[::1] acts = np.empty(batch_size * lay.cum[lay.nl + 1])
    cdef double[::1] tbuf = np.empty(batch_size * K)
    cdef double[::1] d1 = np.empty(batch_size * lay.maxw)
    cdef double[::1] d2 = np.empty(batch_size * lay.maxw)
    cdef double[::1] grad = np.zeros(P)
    cdef double* ap = &acts[0]
    cdef double* pp = &params[0]
    cdef double* gp = &grad[0]
    cdef double total = 0.0
    with nogil:
        start = 0
        while start < n:
            bs = <int>(n - start) if n - start < batch_size else batch_size
            for r in range(bs):
                i = order[start + r]
                for j in range(d):
                    ap[r * d + j] = X[i, j]
                for j in range(K):
                    tbuf[r * K + j] = T[i, j]
            _fwd(pp, lay, ap, bs)
            total += _xent_delta(ap + bs * lay.cum[lay.nl], &tbuf[0], &d1[0],
                                 bs, K, tau)
            _bwd(pp, lay, ap, &d1[0], &d2[0], gp, bs)
            for j in range(P):
                pp[j] -= lr * gp[j]
            start += bs
    return total / n
