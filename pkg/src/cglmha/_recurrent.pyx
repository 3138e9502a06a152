# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""
Compiled fused recurrent sequence kernels.

Same calling convention and results as ``_recurrent_py``. The time loop,
gate nonlinearities and masked state carry run in C; matrix products go
straight to BLAS through scipy's Cython bindings, operating on strided
views of the (B, L, *) buffers so no per-step copies are made.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, fabs, fabsf
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()


cdef inline void gemm_rm(bint ta, bint tb, int M, int N, int K, floating alpha,
                         floating* A, int lda, floating* B, int ldb,
                         floating beta, floating* C, int ldc) noexcept nogil:
    # row-major C = alpha * op(A) @ op(B) + beta * C via column-major BLAS
    cdef char ca = b'T' if tb else b'N'
    cdef char cb = b'T' if ta else b'N'
    if floating is float:
        sgemm(&ca, &cb, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)
    else:
        dgemm(&ca, &cb, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


# Both nonlinearities go through exp(-|x|), which stays in (0, 1]: no
# overflow, and the loops vectorize against libmvec's exp (its vector tanh
# falls back to scalar code for many inputs).

cdef inline floating sig(floating z) noexcept nogil:
    cdef floating t
    if floating is float:
        t = expf(-fabsf(z))
    else:
        t = exp(-fabs(z))
    return (1 if z >= 0 else t) / (1 + t)


cdef inline floating th(floating z) noexcept nogil:
    cdef floating t, r
    if floating is float:
        t = expf(-2 * fabsf(z))
    else:
        t = exp(-2 * fabs(z))
    r = (1 - t) / (1 + t)
    return r if z >= 0 else -r


# Row kernels. Each works on one batch row of length H through raw pointers
# so the compiler can vectorize the loops.

cdef inline void _gru_gates(floating* a, floating* brz, floating* hp, floating* r,
                            floating* z, floating* rh, int H) noexcept nogil:
    cdef int j
    for j in range(H):
        r[j] = sig(a[j] + brz[j])
    for j in range(H):
        z[j] = sig(a[H + j] + brz[H + j])
    for j in range(H):
        rh[j] = r[j] * hp[j]


cdef inline void _gru_combine(floating* a, floating* bh, floating* hp, floating* z,
                              floating* hc, floating* out, bint live, int H) noexcept nogil:
    cdef int j
    for j in range(H):
        hc[j] = th(a[j] + bh[j])
    if live:
        for j in range(H):
            out[j] = z[j] * hp[j] + (1 - z[j]) * hc[j]
    else:
        for j in range(H):
            out[j] = hp[j]


cdef inline void _gru_back1(floating* dh, floating* dhs, floating* z, floating* hc,
                            floating* hp, floating* dah, floating* daz, bint live,
                            int H) noexcept nogil:
    cdef int j
    for j in range(H):
        dh[j] += dhs[j]
    if live:
        for j in range(H):
            dah[j] = dh[j] * (1 - z[j]) * (1 - hc[j] * hc[j])
            daz[j] = dh[j] * (hp[j] - hc[j]) * z[j] * (1 - z[j])


cdef inline void _gru_back2(floating* dh, floating* drh, floating* r, floating* z,
                            floating* hp, floating* dar, int H) noexcept nogil:
    cdef int j
    for j in range(H):
        dar[j] = drh[j] * hp[j] * r[j] * (1 - r[j])
        dh[j] = dh[j] * z[j] + drh[j] * r[j]


cdef inline void _lstm_cell(floating* a, floating* bias, floating* c, floating* hp,
                            floating* tc, floating* out, bint live, int H) noexcept nogil:
    # a holds pre-activations [i, f, o, c~] on entry and activations on exit
    cdef int j
    for j in range(3 * H):
        a[j] = sig(a[j] + bias[j])
    for j in range(3 * H, 4 * H):
        a[j] = th(a[j] + bias[j])
    for j in range(H):
        tc[j] = th(a[H + j] * c[j] + a[j] * a[3 * H + j])
    if live:
        for j in range(H):
            c[j] = a[H + j] * c[j] + a[j] * a[3 * H + j]
            out[j] = a[2 * H + j] * tc[j]
    else:
        for j in range(H):
            out[j] = hp[j]


cdef inline void _lstm_back(floating* dh, floating* dc, floating* dhs, floating* g,
                            floating* tc, floating* cp, floating* da, bint live,
                            int H) noexcept nogil:
    cdef int j
    cdef floating dcn
    for j in range(H):
        dh[j] += dhs[j]
    if not live:
        return
    for j in range(H):
        dcn = dc[j] + dh[j] * g[2 * H + j] * (1 - tc[j] * tc[j])
        da[j] = dcn * g[3 * H + j] * g[j] * (1 - g[j])
        da[H + j] = dcn * cp[j] * g[H + j] * (1 - g[H + j])
        da[2 * H + j] = dh[j] * tc[j] * g[2 * H + j] * (1 - g[2 * H + j])
        da[3 * H + j] = dcn * g[j] * (1 - g[3 * H + j] * g[3 * H + j])
        dc[j] = dcn * g[H + j]
        dh[j] = 0


def _dtype_of(floating[::1] probe):
    if floating is float:
        return np.float32
    return np.float64


def gru_forward(floating[:, :, ::1] X, floating[:, ::1] Wrz, floating[:, ::1] Wh,
                floating[::1] brz, floating[::1] bh, const unsigned char[:, ::1] mask,
                bint reverse):
    cdef int B = X.shape[0], L = X.shape[1], D = X.shape[2]
    cdef int H = Wh.shape[0], K = H + D
    dt = _dtype_of(brz)
    xrz_a = np.empty((B, L, 2 * H), dt)
    xh_a = np.empty((B, L, H), dt)
    Hs_a = np.empty((B, L, H), dt)
    Hp_a = np.empty((B, L, H), dt)
    R_a = np.empty((B, L, H), dt)
    Z_a = np.empty((B, L, H), dt)
    Hc_a = np.empty((B, L, H), dt)
    RH_a = np.empty((B, L, H), dt)
    h0_a = np.zeros((B, H), dt)
    cdef floating[:, :, ::1] xrz = xrz_a, xh = xh_a, Hs = Hs_a, Hp = Hp_a
    cdef floating[:, :, ::1] R = R_a, Z = Z_a, Hc = Hc_a, RH = RH_a
    cdef floating[:, ::1] h0 = h0_a
    cdef int b, j, s, t, ld_h
    cdef floating* hptr

    with nogil:
        gemm_rm(False, True, B * L, 2 * H, D, 1.0, &X[0, 0, 0], D, &Wrz[0, H], K,
                0.0, &xrz[0, 0, 0], 2 * H)
        gemm_rm(False, True, B * L, H, D, 1.0, &X[0, 0, 0], D, &Wh[0, H], K,
                0.0, &xh[0, 0, 0], H)
        hptr = &h0[0, 0]
        ld_h = H
        for s in range(L):
            t = L - 1 - s if reverse else s
            for b in range(B):
                for j in range(H):
                    Hp[b, t, j] = hptr[b * ld_h + j]
            gemm_rm(False, True, B, 2 * H, H, 1.0, &Hp[0, t, 0], L * H, &Wrz[0, 0], K,
                    1.0, &xrz[0, t, 0], L * 2 * H)
            for b in range(B):
                _gru_gates(&xrz[b, t, 0], &brz[0], &Hp[b, t, 0], &R[b, t, 0], &Z[b, t, 0],
                           &RH[b, t, 0], H)
            gemm_rm(False, True, B, H, H, 1.0, &RH[0, t, 0], L * H, &Wh[0, 0], K,
                    1.0, &xh[0, t, 0], L * H)
            for b in range(B):
                _gru_combine(&xh[b, t, 0], &bh[0], &Hp[b, t, 0], &Z[b, t, 0], &Hc[b, t, 0],
                             &Hs[b, t, 0], mask[b, t], H)
            hptr = &Hs[0, t, 0]
            ld_h = L * H
    return Hs_a, (Hp_a, R_a, Z_a, Hc_a, RH_a)


def gru_backward(floating[:, :, ::1] dHs, floating[:, :, ::1] X, floating[:, ::1] Wrz,
                 floating[:, ::1] Wh, const unsigned char[:, ::1] mask, bint reverse, cache):
    cdef int B = X.shape[0], L = X.shape[1], D = X.shape[2]
    cdef int H = Wh.shape[0], K = H + D
    Hp_a, R_a, Z_a, Hc_a, RH_a = cache
    cdef floating[:, :, ::1] Hp = Hp_a, R = R_a, Z = Z_a, Hc = Hc_a, RH = RH_a
    dt = Hp_a.dtype
    dArz_a = np.zeros((B, L, 2 * H), dt)
    dAh_a = np.zeros((B, L, H), dt)
    dh_a = np.zeros((B, H), dt)
    drh_a = np.empty((B, H), dt)
    dWrz_a = np.empty((2 * H, K), dt)
    dWh_a = np.empty((H, K), dt)
    dX_a = np.empty((B, L, D), dt)
    cdef floating[:, :, ::1] dArz = dArz_a, dAh = dAh_a, dX = dX_a
    cdef floating[:, ::1] dh = dh_a, drh = drh_a, dWrz = dWrz_a, dWh = dWh_a
    cdef int b, s, t

    with nogil:
        for s in range(L):
            t = s if reverse else L - 1 - s
            for b in range(B):
                _gru_back1(&dh[b, 0], &dHs[b, t, 0], &Z[b, t, 0], &Hc[b, t, 0], &Hp[b, t, 0],
                           &dAh[b, t, 0], &dArz[b, t, H], mask[b, t], H)
            gemm_rm(False, False, B, H, H, 1.0, &dAh[0, t, 0], L * H, &Wh[0, 0], K,
                    0.0, &drh[0, 0], H)
            for b in range(B):
                if mask[b, t]:
                    _gru_back2(&dh[b, 0], &drh[b, 0], &R[b, t, 0], &Z[b, t, 0], &Hp[b, t, 0],
                               &dArz[b, t, 0], H)
            gemm_rm(False, False, B, H, 2 * H, 1.0, &dArz[0, t, 0], L * 2 * H, &Wrz[0, 0], K,
                    1.0, &dh[0, 0], H)
        gemm_rm(True, False, 2 * H, H, B * L, 1.0, &dArz[0, 0, 0], 2 * H, &Hp[0, 0, 0], H,
                0.0, &dWrz[0, 0], K)
        gemm_rm(True, False, 2 * H, D, B * L, 1.0, &dArz[0, 0, 0], 2 * H, &X[0, 0, 0], D,
                0.0, &dWrz[0, H], K)
        gemm_rm(True, False, H, H, B * L, 1.0, &dAh[0, 0, 0], H, &RH[0, 0, 0], H,
                0.0, &dWh[0, 0], K)
        gemm_rm(True, False, H, D, B * L, 1.0, &dAh[0, 0, 0], H, &X[0, 0, 0], D,
                0.0, &dWh[0, H], K)
        gemm_rm(False, False, B * L, D, 2 * H, 1.0, &dArz[0, 0, 0], 2 * H, &Wrz[0, H], K,
                0.0, &dX[0, 0, 0], D)
        gemm_rm(False, False, B * L, D, H, 1.0, &dAh[0, 0, 0], H, &Wh[0, H], K,
                1.0, &dX[0, 0, 0], D)
    dbrz = dArz_a.reshape(B * L, 2 * H).sum(axis=0)
    dbh = dAh_a.reshape(B * L, H).sum(axis=0)
    return dX_a, dWrz_a, dWh_a, dbrz, dbh


def lstm_forward(floating[:, :, ::1] X, floating[:, ::1] W, floating[::1] bias,
                 const unsigned char[:, ::1] mask, bint reverse):
    cdef int B = X.shape[0], L = X.shape[1], D = X.shape[2]
    cdef int H = W.shape[0] // 4, K = H + D
    dt = _dtype_of(bias)
    A_a = np.empty((B, L, 4 * H), dt)
    Hs_a = np.empty((B, L, H), dt)
    Hp_a = np.empty((B, L, H), dt)
    Cp_a = np.empty((B, L, H), dt)
    Tc_a = np.empty((B, L, H), dt)
    c_a = np.zeros((B, H), dt)
    h0_a = np.zeros((B, H), dt)
    cdef floating[:, :, ::1] A = A_a, Hs = Hs_a, Hp = Hp_a, Cp = Cp_a, Tc = Tc_a
    cdef floating[:, ::1] c = c_a, h0 = h0_a
    cdef int b, j, s, t, ld_h
    cdef floating* hptr

    with nogil:
        gemm_rm(False, True, B * L, 4 * H, D, 1.0, &X[0, 0, 0], D, &W[0, H], K,
                0.0, &A[0, 0, 0], 4 * H)
        hptr = &h0[0, 0]
        ld_h = H
        for s in range(L):
            t = L - 1 - s if reverse else s
            for b in range(B):
                for j in range(H):
                    Hp[b, t, j] = hptr[b * ld_h + j]
                    Cp[b, t, j] = c[b, j]
            gemm_rm(False, True, B, 4 * H, H, 1.0, &Hp[0, t, 0], L * H, &W[0, 0], K,
                    1.0, &A[0, t, 0], L * 4 * H)
            for b in range(B):
                _lstm_cell(&A[b, t, 0], &bias[0], &c[b, 0], &Hp[b, t, 0], &Tc[b, t, 0],
                           &Hs[b, t, 0], mask[b, t], H)
            hptr = &Hs[0, t, 0]
            ld_h = L * H
    return Hs_a, (Hp_a, Cp_a, A_a, Tc_a)


def lstm_backward(floating[:, :, ::1] dHs, floating[:, :, ::1] X, floating[:, ::1] W,
                  const unsigned char[:, ::1] mask, bint reverse, cache):
    cdef int B = X.shape[0], L = X.shape[1], D = X.shape[2]
    cdef int H = W.shape[0] // 4, K = H + D
    Hp_a, Cp_a, G_a, Tc_a = cache
    cdef floating[:, :, ::1] Hp = Hp_a, Cp = Cp_a, G = G_a, Tc = Tc_a
    dt = Hp_a.dtype
    dA_a = np.zeros((B, L, 4 * H), dt)
    dh_a = np.zeros((B, H), dt)
    dc_a = np.zeros((B, H), dt)
    dW_a = np.empty((4 * H, K), dt)
    dX_a = np.empty((B, L, D), dt)
    cdef floating[:, :, ::1] dA = dA_a, dX = dX_a
    cdef floating[:, ::1] dh = dh_a, dc = dc_a, dW = dW_a
    cdef int b, j, s, t

    with nogil:
        for s in range(L):
            t = s if reverse else L - 1 - s
            for b in range(B):
                _lstm_back(&dh[b, 0], &dc[b, 0], &dHs[b, t, 0], &G[b, t, 0], &Tc[b, t, 0],
                           &Cp[b, t, 0], &dA[b, t, 0], mask[b, t], H)
            gemm_rm(False, False, B, H, 4 * H, 1.0, &dA[0, t, 0], L * 4 * H, &W[0, 0], K,
                    1.0, &dh[0, 0], H)
        gemm_rm(True, False, 4 * H, H, B * L, 1.0, &dA[0, 0, 0], 4 * H, &Hp[0, 0, 0], H,
                0.0, &dW[0, 0], K)
        gemm_rm(True, False, 4 * H, D, B * L, 1.0, &dA[0, 0, 0], 4 * H, &X[0, 0, 0], D,
                0.0, &dW[0, H], K)
        gemm_rm(False, False, B * L, D, 4 * H, 1.0, &dA[0, 0, 0], 4 * H, &W[0, H], K,
                0.0, &dX[0, 0, 0], D)
    db = dA_a.reshape(B * L, 4 * H).sum(axis=0)
    return dX_a, dW_a, db
