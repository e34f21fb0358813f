# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled likelihood-site kernels.

Same contract as :mod:`epmixed._pykernels`; operates directly on the block
arrays of a :class:`~epmixed.sparse.SparseGlobal`.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, log1p, erfc, lgamma, fabs, INFINITY, isfinite, M_PI
from libc.stdlib cimport malloc, free

cnp.import_array()

NAME = "cython"

DEF MODEL_ZIP = 0
DEF MODEL_BINOMIAL = 1
DEF N_SKIP = 4
DEF TILT_RTOL = 1e-8


# ---------------------------------------------------------------- small dense algebra

cdef int chol(int n, const double* A, double* Lo) noexcept nogil:
    """Lower Cholesky factor of row-major ``A``; returns 0 if not PD."""
    cdef int i, j, k
    cdef double s
    for i in range(n * n):
        Lo[i] = 0.0
    for j in range(n):
        s = A[j * n + j]
        for k in range(j):
            s -= Lo[j * n + k] * Lo[j * n + k]
        if not (s > 0.0) or not isfinite(s):
            return 0
        Lo[j * n + j] = sqrt(s)
        for i in range(j + 1, n):
            s = A[i * n + j]
            for k in range(j):
                s -= Lo[i * n + k] * Lo[j * n + k]
            Lo[i * n + j] = s / Lo[j * n + j]
    return 1


cdef void chol_solve(int n, int k, const double* Lo, const double* B, double* X) noexcept nogil:
    """Solve ``(Lo Lo^T) X = B`` for row-major ``n x k`` right-hand sides."""
    cdef int i, j, c
    cdef double s
    for c in range(k):
        for i in range(n):
            s = B[i * k + c]
            for j in range(i):
                s -= Lo[i * n + j] * X[j * k + c]
            X[i * k + c] = s / Lo[i * n + i]
        for i in range(n - 1, -1, -1):
            s = X[i * k + c]
            for j in range(i + 1, n):
                s -= Lo[j * n + i] * X[j * k + c]
            X[i * k + c] = s / Lo[i * n + i]


cdef int pd_inverse(int n, const double* A, double* Ainv, double* work) noexcept nogil:
    """Inverse of a PD matrix; ``work`` needs ``2 n^2`` doubles. Returns 0 if not PD."""
    cdef int i, j
    cdef double* Lo = work
    cdef double* I = work + n * n
    if n == 0:
        return 1
    if not chol(n, A, Lo):
        return 0
    for i in range(n):
        for j in range(n):
            I[i * n + j] = 1.0 if i == j else 0.0
    chol_solve(n, n, Lo, I, Ainv)
    for i in range(n):
        for j in range(i + 1, n):
            Ainv[i * n + j] = 0.5 * (Ainv[i * n + j] + Ainv[j * n + i])
            Ainv[j * n + i] = Ainv[i * n + j]
    return 1


cdef inline void symm(int n, double* A) noexcept nogil:
    cdef int i, j
    for i in range(n):
        for j in range(i + 1, n):
            A[i * n + j] = 0.5 * (A[i * n + j] + A[j * n + i])
            A[j * n + i] = A[i * n + j]


# ---------------------------------------------------------------- log-likelihoods

cdef inline double log_expit(double x) noexcept nogil:
    if x >= 0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


cdef double log_ndtr(double x) noexcept nogil:
    cdef double x2, s
    if x > 0.0:
        return log1p(-0.5 * erfc(x / sqrt(2.0)))
    if x > -37.0:
        return log(0.5 * erfc(-x / sqrt(2.0)))
    x2 = 1.0 / (x * x)
    s = 1.0 - x2 * (1.0 - 3.0 * x2 * (1.0 - 5.0 * x2 * (1.0 - 7.0 * x2)))
    return -0.5 * x * x - log(-x) - 0.5 * log(2.0 * M_PI) + log(s)


cdef inline double zip_piece_logf(int piece, double eta, double lam, double y, double o) noexcept nogil:
    # piece 0: Poisson branch; piece 1: structural zero (only used when y = 0)
    if piece == 1:
        return log_expit(lam)
    return log_expit(-lam) + y * (eta + o) - exp(eta + o) - lgamma(y + 1.0)


cdef inline double binom_logf(double eta, double y, double trials) noexcept nogil:
    cdef double out = lgamma(trials + 1.0) - lgamma(y + 1.0) - lgamma(trials - y + 1.0)
    if y != 0.0:
        out += y * log_ndtr(eta)
    if trials - y != 0.0:
        out += (trials - y) * log_ndtr(-eta)
    return out


# ---------------------------------------------------------------- workspace

cdef struct Work:
    int Q, K, D, m, R
    double* Sa      # D*D marginal covariance
    double* ma      # D
    double* A       # D*m
    double* tmpDm   # D*m
    double* Sd      # m*m
    double* Qd
    double* rd      # m
    double* Qc
    double* rc
    double* Sc
    double* mc
    double* Qh
    double* rh
    double* Sh
    double* mh
    double* dQs     # m*m
    double* drs     # m
    double* Lc      # m*m
    double* cen     # m
    double* Sg      # m*m
    double* Lg      # m*m
    double* logk    # R^m
    double* pts     # m * R^m
    double* B11inv  # Q*Q
    double* BtT     # Q*K
    double* me      # K
    double* dQ      # D*D lifted
    double* dr      # D
    double* nB11    # Q*Q
    double* nB12    # Q*K
    double* nB22    # K*K
    double* nd1     # Q
    double* nd2     # K
    double* nBt     # Q*K
    double* nBbar   # K*K
    double* nS      # K*K
    double* nT      # K*K
    double* LB      # Q*Q
    double* inv_work  # 2 * max(D, K)^2


cdef double* _grab(double** cursor, int n) noexcept nogil:
    cdef double* p = cursor[0]
    cursor[0] = cursor[0] + n
    return p


cdef double* work_alloc(Work* w, int Q, int K, int m, int R):
    cdef int D = Q + K
    cdef int Rm = R if m == 1 else R * R
    cdef int big = D if D > K else K
    cdef int total = (D * D + D + 2 * D * m + 16 * m * m + 8 * m + Rm + m * Rm
                      + Q * Q + Q * K + K + D * D + D
                      + Q * Q + Q * K + K * K + Q + K + Q * K + 3 * K * K + Q * Q
                      + 2 * big * big + 2 * m * m + m + 16)
    cdef double* buf = <double*> malloc(total * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* c = buf
    w.Q = Q; w.K = K; w.D = D; w.m = m; w.R = R
    w.Sa = _grab(&c, D * D); w.ma = _grab(&c, D)
    w.A = _grab(&c, D * m); w.tmpDm = _grab(&c, D * m)
    w.Sd = _grab(&c, m * m); w.Qd = _grab(&c, m * m); w.rd = _grab(&c, m)
    w.Qc = _grab(&c, m * m); w.rc = _grab(&c, m); w.Sc = _grab(&c, m * m); w.mc = _grab(&c, m)
    w.Qh = _grab(&c, m * m); w.rh = _grab(&c, m); w.Sh = _grab(&c, m * m); w.mh = _grab(&c, m)
    w.dQs = _grab(&c, m * m); w.drs = _grab(&c, m); w.Lc = _grab(&c, m * m)
    w.cen = _grab(&c, m); w.Sg = _grab(&c, m * m); w.Lg = _grab(&c, m * m)
    w.logk = _grab(&c, Rm); w.pts = _grab(&c, m * Rm)
    w.B11inv = _grab(&c, Q * Q); w.BtT = _grab(&c, Q * K); w.me = _grab(&c, K)
    w.dQ = _grab(&c, D * D); w.dr = _grab(&c, D)
    w.nB11 = _grab(&c, Q * Q); w.nB12 = _grab(&c, Q * K); w.nB22 = _grab(&c, K * K)
    w.nd1 = _grab(&c, Q); w.nd2 = _grab(&c, K); w.nBt = _grab(&c, Q * K)
    w.nBbar = _grab(&c, K * K); w.nS = _grab(&c, K * K); w.nT = _grab(&c, K * K)
    w.LB = _grab(&c, Q * Q)
    w.inv_work = _grab(&c, 2 * big * big)
    return buf


# ---------------------------------------------------------------- marginal and site step

cdef int marginal_alpha(Work* w, int l, const double* B11, const double* Bt12, const double* T,
                        const double* d1, const double* d2, const double* dt1) noexcept nogil:
    cdef int Q = w.Q, K = w.K, D = w.D
    cdef int i, j, k
    cdef double s
    cdef const double* Bt = Bt12 + l * Q * K
    if not pd_inverse(Q, B11 + l * Q * Q, w.B11inv, w.inv_work):
        return 0
    for i in range(Q):
        for j in range(K):
            s = 0.0
            for k in range(K):
                s += Bt[i * K + k] * T[k * K + j]
            w.BtT[i * K + j] = s
    for i in range(Q):
        for j in range(Q):
            s = w.B11inv[i * Q + j]
            for k in range(K):
                s += w.BtT[i * K + k] * Bt[j * K + k]
            w.Sa[i * D + j] = s
        for j in range(K):
            w.Sa[i * D + Q + j] = -w.BtT[i * K + j]
            w.Sa[(Q + j) * D + i] = -w.BtT[i * K + j]
    for i in range(K):
        for j in range(K):
            w.Sa[(Q + i) * D + Q + j] = T[i * K + j]
    symm(D, w.Sa)
    for i in range(K):
        s = 0.0
        for k in range(K):
            s += T[i * K + k] * (d2[k] - dt1[k])
        w.me[i] = s
        w.ma[Q + i] = s
    for i in range(Q):
        s = 0.0
        for k in range(Q):
            s += w.B11inv[i * Q + k] * d1[l * Q + k]
        for k in range(K):
            s -= Bt[i * K + k] * w.me[k]
        w.ma[i] = s
    return 1


cdef void build_A(Work* w, const double* z, const double* x) noexcept nogil:
    cdef int Q = w.Q, D = w.D, m = w.m, H = w.m - 1
    cdef int i, h
    for i in range(D * m):
        w.A[i] = 0.0
    for i in range(Q):
        w.A[i * m] = z[i]
    for i in range(D - Q - H):
        w.A[(Q + H + i) * m] = x[i]
    for h in range(H):
        w.A[(Q + h) * m + 1 + h] = 1.0


cdef inline double mills(double x) noexcept nogil:
    return exp(-0.5 * x * x - 0.5 * log(2.0 * M_PI) - log_ndtr(x))


cdef int laplace_center(Work* w, int model, double y, double extra, int piece) noexcept nogil:
    """Mode and inverse curvature of one kernel piece times the cavity into ``w.cen``/``w.Sg``.

    Returns 0 on numerical failure, 1 on success.
    """
    cdef int m = w.m
    cdef int it
    cdef double Qc0, Qc1, Qc3, det, a0, a1, d0, d1, f, fb, cur, new, t
    cdef double g0, g1, h0, h3, G0, G1, H0, H1, H3, s0, s1, b0, b1, rate, pr, rp, rm
    if m == 1:
        Qc0 = 1.0 / w.Sc[0]
        a0 = w.mc[0]
        f = binom_logf(a0, y, extra)
        cur = f
        for it in range(100):
            rp = mills(a0)
            rm = mills(-a0)
            g0 = y * rp - (extra - y) * rm
            h0 = -y * rp * (a0 + rp) - (extra - y) * rm * (rm - a0)
            H0 = Qc0 - h0
            G0 = g0 - Qc0 * (a0 - w.mc[0])
            s0 = G0 / H0
            t = 1.0
            while True:
                b0 = a0 + t * s0
                fb = binom_logf(b0, y, extra)
                new = fb - 0.5 * Qc0 * (b0 - w.mc[0]) * (b0 - w.mc[0])
                if new >= cur or t < 1e-10:
                    break
                t *= 0.5
            d0 = fabs(b0 - a0)
            a0 = b0
            cur = new
            if d0 <= 1e-12 * (1.0 + fabs(a0)):
                break
        rp = mills(a0)
        rm = mills(-a0)
        h0 = -y * rp * (a0 + rp) - (extra - y) * rm * (rm - a0)
        H0 = Qc0 - h0
        if not (H0 > 0.0 and isfinite(H0) and isfinite(a0)):
            return 0
        w.cen[0] = a0
        w.Sg[0] = 1.0 / H0
        return 1
    # ZIP pieces: separable and log-concave
    det = w.Sc[0] * w.Sc[3] - w.Sc[1] * w.Sc[2]
    Qc0 = w.Sc[3] / det
    Qc1 = -w.Sc[1] / det
    Qc3 = w.Sc[0] / det
    a0 = w.mc[0]
    a1 = w.mc[1]
    cur = zip_piece_logf(piece, a0, a1, y, extra)
    for it in range(100):
        rate = 0.0 if piece == 1 else exp(a0 + extra)
        pr = 1.0 / (1.0 + exp(-a1))
        d0 = a0 - w.mc[0]
        d1 = a1 - w.mc[1]
        G0 = (0.0 if piece == 1 else y - rate) - (Qc0 * d0 + Qc1 * d1)
        G1 = (1.0 - pr if piece == 1 else -pr) - (Qc1 * d0 + Qc3 * d1)
        H0 = Qc0 + rate
        H1 = Qc1
        H3 = Qc3 + pr * (1.0 - pr)
        det = H0 * H3 - H1 * H1
        s0 = (H3 * G0 - H1 * G1) / det
        s1 = (H0 * G1 - H1 * G0) / det
        t = 1.0
        while True:
            b0 = a0 + t * s0
            b1 = a1 + t * s1
            d0 = b0 - w.mc[0]
            d1 = b1 - w.mc[1]
            new = zip_piece_logf(piece, b0, b1, y, extra) - 0.5 * (Qc0 * d0 * d0 + 2.0 * Qc1 * d0 * d1 + Qc3 * d1 * d1)
            if new >= cur or t < 1e-10:
                break
            t *= 0.5
        d0 = fabs(b0 - a0)
        if fabs(b1 - a1) > d0:
            d0 = fabs(b1 - a1)
        t = fabs(a0) if fabs(a0) > fabs(a1) else fabs(a1)
        a0 = b0
        a1 = b1
        cur = new
        if d0 <= 1e-12 * (1.0 + t):
            break
    rate = 0.0 if piece == 1 else exp(a0 + extra)
    pr = 1.0 / (1.0 + exp(-a1))
    H0 = Qc0 + rate
    H1 = Qc1
    H3 = Qc3 + pr * (1.0 - pr)
    det = H0 * H3 - H1 * H1
    if not (det > 0.0 and H0 > 0.0 and isfinite(det) and isfinite(a0) and isfinite(a1)):
        return 0
    w.cen[0] = a0
    w.cen[1] = a1
    w.Sg[0] = H3 / det
    w.Sg[1] = -H1 / det
    w.Sg[2] = -H1 / det
    w.Sg[3] = H0 / det
    return 1


cdef int tilted(Work* w, int model, double y, double extra,
                const double* nodes, const double* weights) noexcept nogil:
    """Normalised tilted moments into ``w.mh``/``w.Sh``; returns 0 on failure.

    Each log-concave piece of the kernel gets its own grid centred on the
    mode of that piece times the cavity.  Piece sums are combined on a common
    log scale.
    """
    cdef int m = w.m, R = w.R
    cdef int i, j, p, piece, npieces
    cdef double M = -INFINITY, mx, c
    cdef double I0 = 0.0, I1a = 0.0, I1b = 0.0, I2aa = 0.0, I2ab = 0.0, I2bb = 0.0
    cdef double J0, J1a, J1b, J2aa, J2ab, J2bb
    cdef double wt, a, b, sd, sg, lk, z0, z1, adj0
    if m == 1:
        if not (w.Sc[0] > 0.0):
            return 0
        sd = sqrt(w.Sc[0])
    elif not chol(2, w.Sc, w.Lc):
        return 0
    npieces = 2 if (model == MODEL_ZIP and y == 0.0) else 1
    for piece in range(npieces):
        if not laplace_center(w, model, y, extra, piece):
            return 0
        mx = -INFINITY
        if m == 1:
            sg = sqrt(w.Sg[0])
            for i in range(R):
                a = w.cen[0] + sg * nodes[i]
                w.pts[i] = a
                z0 = (a - w.mc[0]) / sd
                lk = binom_logf(a, y, extra) - 0.5 * (z0 * z0 - nodes[i] * nodes[i]) + log(sg) - log(sd)
                if lk != lk or lk == INFINITY:
                    return 0
                w.logk[i] = lk
                if lk > mx:
                    mx = lk
        else:
            if not chol(2, w.Sg, w.Lg):
                return 0
            adj0 = log(w.Lg[0]) + log(w.Lg[3]) - log(w.Lc[0]) - log(w.Lc[3])
            for i in range(R):
                for j in range(R):
                    p = i * R + j
                    a = w.cen[0] + w.Lg[0] * nodes[i]
                    b = w.cen[1] + w.Lg[2] * nodes[i] + w.Lg[3] * nodes[j]
                    w.pts[2 * p] = a
                    w.pts[2 * p + 1] = b
                    z0 = (a - w.mc[0]) / w.Lc[0]
                    z1 = (b - w.mc[1] - w.Lc[2] * z0) / w.Lc[3]
                    lk = (zip_piece_logf(piece, a, b, y, extra)
                          - 0.5 * (z0 * z0 + z1 * z1 - nodes[i] * nodes[i] - nodes[j] * nodes[j]) + adj0)
                    if lk != lk or lk == INFINITY:
                        return 0
                    w.logk[p] = lk
                    if lk > mx:
                        mx = lk
        if not isfinite(mx):
            return 0
        J0 = J1a = J1b = J2aa = J2ab = J2bb = 0.0
        if m == 1:
            for i in range(R):
                wt = weights[i] * exp(w.logk[i] - mx)
                a = w.pts[i]
                J0 += wt
                J1a += wt * a
                J2aa += wt * a * a
        else:
            for i in range(R):
                for j in range(R):
                    p = i * R + j
                    wt = weights[i] * weights[j] * exp(w.logk[p] - mx)
                    a = w.pts[2 * p]
                    b = w.pts[2 * p + 1]
                    J0 += wt
                    J1a += wt * a
                    J1b += wt * b
                    J2aa += wt * a * a
                    J2ab += wt * a * b
                    J2bb += wt * b * b
        if mx > M:
            c = exp(M - mx)
            I0 *= c; I1a *= c; I1b *= c; I2aa *= c; I2ab *= c; I2bb *= c
            M = mx
            c = 1.0
        else:
            c = exp(mx - M)
        I0 += c * J0; I1a += c * J1a; I1b += c * J1b
        I2aa += c * J2aa; I2ab += c * J2ab; I2bb += c * J2bb
    if not (isfinite(M) and I0 > 0.0 and isfinite(I0)):
        return 0
    if m == 1:
        w.mh[0] = I1a / I0
        w.Sh[0] = I2aa / I0 - w.mh[0] * w.mh[0]
    else:
        w.mh[0] = I1a / I0
        w.mh[1] = I1b / I0
        w.Sh[0] = I2aa / I0 - w.mh[0] * w.mh[0]
        w.Sh[1] = I2ab / I0 - w.mh[0] * w.mh[1]
        w.Sh[2] = w.Sh[1]
        w.Sh[3] = I2bb / I0 - w.mh[1] * w.mh[1]
    for i in range(m):
        if not isfinite(w.mh[i]):
            return 0
    for i in range(m * m):
        if not isfinite(w.Sh[i]):
            return 0
    return 1


cdef double relative_min_eig(Work* w) noexcept nogil:
    """Smallest eigenvalue of ``Sc^{-1/2} Sh Sc^{-1/2}``; needs ``w.Lc`` for m = 2."""
    cdef double i00, i10, i11, x00, x01, x10, x11, p, q, r
    if w.m == 1:
        return w.Sh[0] / w.Sc[0]
    i00 = 1.0 / w.Lc[0]
    i11 = 1.0 / w.Lc[3]
    i10 = -w.Lc[2] * i00 * i11
    x00 = i00 * w.Sh[0]
    x01 = i00 * w.Sh[1]
    x10 = i10 * w.Sh[0] + i11 * w.Sh[2]
    x11 = i10 * w.Sh[1] + i11 * w.Sh[3]
    p = x00 * i00
    q = x00 * i10 + x01 * i11
    r = x10 * i10 + x11 * i11
    return 0.5 * (p + r) - sqrt(0.25 * (p - r) * (p - r) + q * q)


cdef int site_step(Work* w, const double* rf, const double* Qf, int model, double y, double extra,
                   const double* nodes, const double* weights, double damping) noexcept nogil:
    """Fill ``w.drs``/``w.dQs`` with the damped site change.  Returns skip category + 1 on failure, 0 on success."""
    cdef int D = w.D, m = w.m
    cdef int i, j, k
    cdef double s
    # S_dot = A^T Sa A
    for i in range(D):
        for j in range(m):
            s = 0.0
            for k in range(D):
                s += w.Sa[i * D + k] * w.A[k * m + j]
            w.tmpDm[i * m + j] = s
    for i in range(m):
        for j in range(m):
            s = 0.0
            for k in range(D):
                s += w.A[k * m + i] * w.tmpDm[k * m + j]
            w.Sd[i * m + j] = s
    symm(m, w.Sd)
    if not pd_inverse(m, w.Sd, w.Qd, w.inv_work):
        return 1
    for i in range(m):
        s = 0.0
        for k in range(D):
            s += w.A[k * m + i] * w.ma[k]
        w.rc[i] = s   # temporarily mu_dot
    for i in range(m):
        s = 0.0
        for k in range(m):
            s += w.Qd[i * m + k] * w.rc[k]
        w.rd[i] = s
    for i in range(m * m):
        w.Qc[i] = w.Qd[i] - Qf[i]
    for i in range(m):
        w.rc[i] = w.rd[i] - rf[i]
    if not pd_inverse(m, w.Qc, w.Sc, w.inv_work):
        return 1
    for i in range(m):
        s = 0.0
        for k in range(m):
            s += w.Sc[i * m + k] * w.rc[k]
        w.mc[i] = s
    if not tilted(w, model, y, extra, nodes, weights):
        return 2
    if not pd_inverse(m, w.Sh, w.Qh, w.inv_work):
        return 3
    if relative_min_eig(w) < TILT_RTOL:
        return 3
    for i in range(m):
        s = 0.0
        for k in range(m):
            s += w.Qh[i * m + k] * w.mh[k]
        w.rh[i] = s
    for i in range(m):
        w.drs[i] = damping * ((w.rh[i] - w.rc[i]) - rf[i])
    for i in range(m * m):
        w.dQs[i] = damping * ((w.Qh[i] - w.Qc[i]) - Qf[i])
    symm(m, w.dQs)
    return 0


cdef void lift(Work* w) noexcept nogil:
    """``w.dQ = A dQs A^T``, ``w.dr = A drs``."""
    cdef int D = w.D, m = w.m
    cdef int i, j, k
    cdef double s
    for i in range(D):
        for j in range(m):
            s = 0.0
            for k in range(m):
                s += w.A[i * m + k] * w.dQs[k * m + j]
            w.tmpDm[i * m + j] = s
    for i in range(D):
        for j in range(i, D):
            s = 0.0
            for k in range(m):
                s += w.tmpDm[i * m + k] * w.A[j * m + k]
            w.dQ[i * D + j] = s
            w.dQ[j * D + i] = s
        s = 0.0
        for k in range(m):
            s += w.A[i * m + k] * w.drs[k]
        w.dr[i] = s


cdef int apply_alpha(Work* w, int l, double* B11, double* B12, double* B22, double* d1, double* d2,
                     double* Bt12, double* Bbar12, double* dt1, double* S, double* T) noexcept nogil:
    """Incremental block update with rollback; returns 0 (nothing changed) if improper."""
    cdef int Q = w.Q, K = w.K, D = w.D
    cdef int i, j, k
    cdef double s
    cdef double* oB12 = B12 + l * Q * K
    cdef double* oBt = Bt12 + l * Q * K
    cdef double* od1 = d1 + l * Q
    for i in range(Q):
        for j in range(Q):
            w.nB11[i * Q + j] = B11[l * Q * Q + i * Q + j] + w.dQ[i * D + j]
        for j in range(K):
            w.nB12[i * K + j] = oB12[i * K + j] + w.dQ[i * D + Q + j]
        w.nd1[i] = od1[i] + w.dr[i]
    symm(Q, w.nB11)
    for i in range(K):
        for j in range(K):
            w.nB22[i * K + j] = B22[i * K + j] + w.dQ[(Q + i) * D + Q + j]
        w.nd2[i] = d2[i] + w.dr[Q + i]
    symm(K, w.nB22)
    if not chol(Q, w.nB11, w.LB):
        return 0
    chol_solve(Q, K, w.LB, w.nB12, w.nBt)
    for i in range(K):
        for j in range(K):
            s = Bbar12[i * K + j]
            for k in range(Q):
                s += w.nB12[k * K + i] * w.nBt[k * K + j] - oB12[k * K + i] * oBt[k * K + j]
            w.nBbar[i * K + j] = s
    symm(K, w.nBbar)
    for i in range(K * K):
        w.nS[i] = w.nB22[i] - w.nBbar[i]
    if K > 0 and not pd_inverse(K, w.nS, w.nT, w.inv_work):
        return 0
    # commit
    for i in range(K):
        s = dt1[i]
        for k in range(Q):
            s += w.nBt[k * K + i] * w.nd1[k] - oBt[k * K + i] * od1[k]
        dt1[i] = s
    for i in range(Q * Q):
        B11[l * Q * Q + i] = w.nB11[i]
    for i in range(Q * K):
        oB12[i] = w.nB12[i]
        oBt[i] = w.nBt[i]
    for i in range(Q):
        od1[i] = w.nd1[i]
    for i in range(K * K):
        B22[i] = w.nB22[i]
        Bbar12[i] = w.nBbar[i]
        S[i] = w.nS[i]
        T[i] = w.nT[i]
    for i in range(K):
        d2[i] = w.nd2[i]
    return 1


cdef double _norm(const double* v, int n) noexcept nogil:
    cdef double s = 0.0
    cdef int i
    for i in range(n):
        s += v[i] * v[i]
    return sqrt(s)


# ---------------------------------------------------------------- entry points

def like_pass_sequential(g, double[:, ::1] like_r, double[:, :, ::1] like_Q,
                         const double[::1] y, const double[::1] extra,
                         const double[:, ::1] X, const double[:, ::1] Z,
                         const long long[::1] group, const long long[::1] order,
                         int model, rule, double damping,
                         double[::1] change_r, double[::1] change_Q):
    cdef double[:, :, ::1] B11 = g.B11
    cdef double[:, :, ::1] B12 = g.B12
    cdef double[:, ::1] B22 = g.B22
    cdef double[:, ::1] d1 = g.d1
    cdef double[::1] d2 = g.d2
    cdef double[:, :, ::1] Bt12 = g.Bt12
    cdef double[:, ::1] Bbar12 = g.Bbar12
    cdef double[::1] dt1 = g.dt1
    cdef double[:, ::1] S = g.S
    cdef double[:, ::1] T = g.T
    cdef const double[::1] nodes = np.ascontiguousarray(rule.nodes, dtype=np.float64)
    cdef const double[::1] weights = np.ascontiguousarray(rule.weights, dtype=np.float64)
    cdef int Q = g.Q, K = g.K, m = like_r.shape[1]
    cdef int R = nodes.shape[0]
    cdef long long[::1] skips = np.zeros(N_SKIP, dtype=np.int64)
    cdef Work w
    cdef double* buf = work_alloc(&w, Q, K, m, R)
    cdef Py_ssize_t t, n, i
    cdef int l, res
    cdef double* dummy = NULL
    try:
        with nogil:
            for t in range(order.shape[0]):
                n = order[t]
                l = <int> group[n]
                change_r[n] = 0.0
                change_Q[n] = 0.0
                if not marginal_alpha(&w, l, &B11[0, 0, 0], &Bt12[0, 0, 0], &T[0, 0] if K else dummy,
                                      &d1[0, 0], &d2[0] if K else dummy, &dt1[0] if K else dummy):
                    skips[0] += 1
                    continue
                build_A(&w, &Z[n, 0], &X[n, 0] if X.shape[1] else dummy)
                res = site_step(&w, &like_r[n, 0], &like_Q[n, 0, 0], model, y[n], extra[n],
                                &nodes[0], &weights[0], damping)
                if res:
                    skips[res - 1] += 1
                    continue
                lift(&w)
                if not apply_alpha(&w, l, &B11[0, 0, 0], &B12[0, 0, 0] if K else dummy,
                                   &B22[0, 0] if K else dummy, &d1[0, 0], &d2[0] if K else dummy,
                                   &Bt12[0, 0, 0] if K else dummy, &Bbar12[0, 0] if K else dummy,
                                   &dt1[0] if K else dummy, &S[0, 0] if K else dummy,
                                   &T[0, 0] if K else dummy):
                    skips[3] += 1
                    continue
                for i in range(m):
                    like_r[n, i] += w.drs[i]
                for i in range(m * m):
                    like_Q[n, i // m, i % m] += w.dQs[i]
                change_r[n] = _norm(w.drs, m)
                change_Q[n] = _norm(w.dQs, m * m)
    finally:
        free(buf)
    g.rollbacks += skips[3]
    return np.asarray(skips)


def like_deltas_parallel(g, double[:, ::1] like_r, double[:, :, ::1] like_Q,
                         const double[::1] y, const double[::1] extra,
                         const double[:, ::1] X, const double[:, ::1] Z,
                         const long long[::1] group, const long long[::1] idx,
                         int model, rule, double damping,
                         double[:, :, ::1] dB11, double[:, :, ::1] dB12, double[:, ::1] dB22,
                         double[:, ::1] dd1, double[::1] dd2,
                         double[::1] change_r, double[::1] change_Q):
    cdef const double[:, :, ::1] B11 = g.B11
    cdef const double[:, ::1] d1 = g.d1
    cdef const double[::1] d2 = g.d2
    cdef const double[:, :, ::1] Bt12 = g.Bt12
    cdef const double[::1] dt1 = g.dt1
    cdef const double[:, ::1] T = g.T
    cdef const double[::1] nodes = np.ascontiguousarray(rule.nodes, dtype=np.float64)
    cdef const double[::1] weights = np.ascontiguousarray(rule.weights, dtype=np.float64)
    cdef int Q = g.Q, K = g.K, m = like_r.shape[1]
    cdef int D = Q + K
    cdef int R = nodes.shape[0]
    cdef long long[::1] skips = np.zeros(N_SKIP, dtype=np.int64)
    cdef Work w
    cdef double* buf = work_alloc(&w, Q, K, m, R)
    cdef Py_ssize_t t, n, i, j
    cdef int l, res
    cdef const double* cdummy = NULL
    cdef double* dummy = NULL
    try:
        with nogil:
            for t in range(idx.shape[0]):
                n = idx[t]
                l = <int> group[n]
                change_r[t] = 0.0
                change_Q[t] = 0.0
                if not marginal_alpha(&w, l, &B11[0, 0, 0], &Bt12[0, 0, 0] if K else cdummy,
                                      &T[0, 0] if K else cdummy, &d1[0, 0],
                                      &d2[0] if K else cdummy, &dt1[0] if K else cdummy):
                    skips[0] += 1
                    continue
                build_A(&w, &Z[n, 0], &X[n, 0] if X.shape[1] else cdummy)
                res = site_step(&w, &like_r[n, 0], &like_Q[n, 0, 0], model, y[n], extra[n],
                                &nodes[0], &weights[0], damping)
                if res:
                    skips[res - 1] += 1
                    continue
                lift(&w)
                for i in range(Q):
                    for j in range(Q):
                        dB11[l, i, j] += w.dQ[i * D + j]
                    for j in range(K):
                        dB12[l, i, j] += w.dQ[i * D + Q + j]
                    dd1[l, i] += w.dr[i]
                for i in range(K):
                    for j in range(K):
                        dB22[i, j] += w.dQ[(Q + i) * D + Q + j]
                    dd2[i] += w.dr[Q + i]
                for i in range(m):
                    like_r[n, i] += w.drs[i]
                for i in range(m * m):
                    like_Q[n, i // m, i % m] += w.dQs[i]
                change_r[t] = _norm(w.drs, m)
                change_Q[t] = _norm(w.dQs, m * m)
    finally:
        free(buf)
    return np.asarray(skips)
