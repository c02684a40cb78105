# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sweeps for neural DDE fields with constant histories.

Mirrors the reference path in ``ddekit.solver`` / ``ddekit.adjoint`` step
for step: same tableaux, breakpoint splitting, one-sided limits and node
snapping. A whole batch advances together, and the dense layers go through
BLAS ``dgemm``. Results agree with the Python path to rounding.

Array layout is ``(N+1, B, d)`` throughout (node-major, like the Python solver).
"""

import numpy as np

from libc.math cimport tanh, floor, fabs, isfinite
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

cdef double NODE_SNAP = 1e-12

cdef enum:
    MAX_STAGES = 4
    MAX_DELAYS = 64


cdef class _Net:
    """Batched MLP with cached activations of the last forward call."""
    cdef int n_layers, act, n_in, n_out, B
    cdef int[::1] sizes, w_off, b_off, a_off
    cdef double[::1] params, act_buf, pre_buf, ga, gb

    def __init__(self, double[::1] params, int[::1] sizes, int act, int B):
        cdef int L = sizes.shape[0] - 1
        cdef int l, off = 0, aoff = 0, widest = 0
        self.n_layers = L
        self.act = act
        self.params = params
        self.sizes = sizes
        self.B = B
        self.n_in = sizes[0]
        self.n_out = sizes[L]
        self.w_off = np.zeros(L, dtype=np.intc)
        self.b_off = np.zeros(L, dtype=np.intc)
        self.a_off = np.zeros(L + 1, dtype=np.intc)
        for l in range(L):
            self.w_off[l] = off
            off += sizes[l] * sizes[l + 1]
            self.b_off[l] = off
            off += sizes[l + 1]
        for l in range(L + 1):
            self.a_off[l] = aoff
            aoff += sizes[l] * B
            if sizes[l] > widest:
                widest = sizes[l]
        if off > params.shape[0]:
            raise ValueError("parameter vector shorter than the layer sizes imply")
        self.act_buf = np.zeros(aoff)
        self.pre_buf = np.zeros(aoff)
        self.ga = np.zeros(widest * B)
        self.gb = np.zeros(widest * B)

    cdef double* forward(self, double* inp) noexcept nogil:
        """``inp`` is ``(B, n_in)`` row-major; returns a ``(B, n_out)`` buffer."""
        cdef int l, o, r, fi, fo, B = self.B
        cdef double z, one = 1.0, zero = 0.0
        cdef double* P = &self.params[0]
        cdef double* A = &self.act_buf[0]
        cdef double* Z = &self.pre_buf[0]
        cdef double* out
        cdef double* pre
        cdef double* bias
        memcpy(A, inp, B * self.n_in * sizeof(double))
        for l in range(self.n_layers):
            fi = self.sizes[l]
            fo = self.sizes[l + 1]
            out = A + self.a_off[l + 1]
            pre = Z + self.a_off[l + 1]
            bias = P + self.b_off[l]
            dgemm("T", "N", &fo, &B, &fi, &one, P + self.w_off[l], &fi,
                  A + self.a_off[l], &fi, &zero, pre, &fo)
            for r in range(B):
                for o in range(fo):
                    z = pre[r * fo + o] + bias[o]
                    pre[r * fo + o] = z
                    if l == self.n_layers - 1 or self.act == 2:
                        out[r * fo + o] = z
                    elif self.act == 0:
                        out[r * fo + o] = tanh(z)
                    else:
                        out[r * fo + o] = z if z > 0.0 else 0.0
        return A + self.a_off[self.n_layers]

    cdef void backward(self, double* cot, double* gin, double* gparam, double scale) noexcept nogil:
        """VJP at the last ``forward`` input; adds ``scale *`` batch-summed param grads."""
        cdef int l, o, r, fi, fo, B = self.B
        cdef double a, s, one = 1.0, zero = 0.0
        cdef double* P = &self.params[0]
        cdef double* A = &self.act_buf[0]
        cdef double* Z = &self.pre_buf[0]
        cdef double* g = &self.ga[0]
        cdef double* gn = &self.gb[0]
        cdef double* tmp
        memcpy(g, cot, B * self.n_out * sizeof(double))
        for l in range(self.n_layers - 1, -1, -1):
            fi = self.sizes[l]
            fo = self.sizes[l + 1]
            if l < self.n_layers - 1 and self.act != 2:
                for r in range(B * fo):
                    if self.act == 0:
                        a = A[self.a_off[l + 1] + r]
                        g[r] = g[r] * (1.0 - a * a)
                    elif not Z[self.a_off[l + 1] + r] > 0.0:
                        g[r] = 0.0
            if gparam != NULL:
                dgemm("N", "T", &fi, &fo, &B, &scale, A + self.a_off[l], &fi, g, &fo,
                      &one, gparam + self.w_off[l], &fi)
                for o in range(fo):
                    s = 0.0
                    for r in range(B):
                        s += g[r * fo + o]
                    gparam[self.b_off[l] + o] += scale * s
            if l > 0 or gin != NULL:
                dgemm("N", "N", &fi, &B, &fo, &one, P + self.w_off[l], &fi, g, &fo, &zero, gn, &fi)
            tmp = g
            g = gn
            gn = tmp
        if gin != NULL:
            memcpy(gin, g, B * self.n_in * sizeof(double))


cdef inline void hermite(double* out, double* y0, double* y1, double* f0, double* f1,
                         double h, double th, int n) noexcept nogil:
    cdef double th2 = th * th
    cdef double th3 = th2 * th
    cdef double c00 = 2 * th3 - 3 * th2 + 1
    cdef double c10 = th3 - 2 * th2 + th
    cdef double c01 = -2 * th3 + 3 * th2
    cdef double c11 = th3 - th2
    cdef int q
    for q in range(n):
        out[q] = c00 * y0[q] + c10 * h * f0[q] + c01 * y1[q] + c11 * h * f1[q]


cdef inline void hermite_deriv(double* out, double* y0, double* y1, double* f0, double* f1,
                               double h, double th, int n) noexcept nogil:
    cdef double th2 = th * th
    cdef double e = 6 * th2 - 6 * th
    cdef double c10 = 3 * th2 - 4 * th + 1
    cdef double c11 = 3 * th2 - 2 * th
    cdef int q
    for q in range(n):
        out[q] = e * (y0[q] - y1[q]) / h + c10 * f0[q] + c11 * f1[q]


cdef inline void combine(double* out, double* x, double h, double* coeffs, int nk,
                         double* K, int n) noexcept nogil:
    """``x + h * sum(c_j K_j)`` skipping zero coefficients; ``K_j`` has stride ``n``."""
    cdef int q, j
    cdef bint started
    cdef double acc
    for q in range(n):
        started = False
        acc = 0.0
        for j in range(nk):
            if coeffs[j] == 0.0:
                continue
            if not started:
                acc = coeffs[j] * K[j * n + q]
                started = True
            else:
                acc = acc + coeffs[j] * K[j * n + q]
        out[q] = x[q] + h * acc if started else x[q]


cdef class _Sweep:
    cdef _Net net
    cdef int d, k, n, ns, n_in, B, bd
    cdef bint use_time
    cdef double t0, dt
    cdef double[::1] delays
    cdef double cc[MAX_STAGES]
    cdef double aa[MAX_STAGES][MAX_STAGES]
    cdef double bb[MAX_STAGES]
    cdef double* st
    cdef double* dv
    cdef double* x0
    cdef double* lp
    cdef double* lm
    cdef double* dlp
    cdef double* dlm
    cdef double[::1] inp, xd, gmain, gtmp, lu, K, Kt, xs, xa, xb, yb, xu

    def __init__(self, _Net net, double[::1] delays, int d, int n, double t0, double dt,
                 c, a, b, bint use_time, int B):
        cdef int j, l
        if len(c) > MAX_STAGES:
            raise ValueError("too many Runge-Kutta stages")
        if delays.shape[0] > MAX_DELAYS:
            raise ValueError(f"at most {MAX_DELAYS} delays are supported")
        self.net = net
        self.delays = delays
        self.k = delays.shape[0]
        self.d = d
        self.n = n
        self.B = B
        self.bd = B * d
        self.t0 = t0
        self.dt = dt
        self.use_time = use_time
        self.ns = len(c)
        for j in range(MAX_STAGES):
            self.cc[j] = 0.0
            self.bb[j] = 0.0
            for l in range(MAX_STAGES):
                self.aa[j][l] = 0.0
        for j in range(self.ns):
            self.cc[j] = c[j]
            self.bb[j] = b[j]
            for l in range(len(a[j])):
                self.aa[j][l] = a[j][l]
        self.n_in = net.n_in
        self.inp = np.zeros(B * self.n_in)
        self.gmain = np.zeros(B * self.n_in)
        self.gtmp = np.zeros(B * self.n_in)
        self.xd = np.zeros(self.bd)
        self.lu = np.zeros(self.bd)
        self.K = np.zeros(MAX_STAGES * self.bd)
        self.Kt = np.zeros(MAX_STAGES * max(self.k, 1))
        self.xs = np.zeros(self.bd)
        self.xa = np.zeros(self.bd)
        self.xb = np.zeros(self.bd)
        self.yb = np.zeros(self.bd)
        self.xu = np.zeros(self.bd)

    cdef void x_value(self, double t, double* out) noexcept nogil:
        cdef double u, th
        cdef int m, node = -1, bd = self.bd
        if t <= self.t0:
            memcpy(out, self.x0, bd * sizeof(double))
            return
        u = (t - self.t0) / self.dt
        m = <int>floor(u)
        th = u - m
        if th < NODE_SNAP:
            node = m
        elif th > 1.0 - NODE_SNAP:
            node = m + 1
        if node >= 0:
            if node > self.n:
                node = self.n
            memcpy(out, self.st + node * bd, bd * sizeof(double))
            return
        if m + 1 > self.n:
            m = self.n - 1
        hermite(out, self.st + m * bd, self.st + (m + 1) * bd,
                self.dv + m * bd, self.dv + (m + 1) * bd, self.dt, th, bd)

    cdef void x_deriv(self, double t, int side, double* out) noexcept nogil:
        cdef double u, th
        cdef int m, node = -1, bd = self.bd
        if fabs(t - self.t0) <= NODE_SNAP * self.dt:
            if side > 0:
                memcpy(out, self.dv, bd * sizeof(double))
            else:
                memset(out, 0, bd * sizeof(double))
            return
        if t <= self.t0:
            memset(out, 0, bd * sizeof(double))
            return
        u = (t - self.t0) / self.dt
        m = <int>floor(u)
        th = u - m
        if th < NODE_SNAP:
            node = m
        elif th > 1.0 - NODE_SNAP:
            node = m + 1
        if node >= 0:
            if node > self.n:
                node = self.n
            memcpy(out, self.dv + node * bd, bd * sizeof(double))
            return
        if m + 1 > self.n:
            m = self.n - 1
        hermite_deriv(out, self.st + m * bd, self.st + (m + 1) * bd,
                      self.dv + m * bd, self.dv + (m + 1) * bd, self.dt, th, bd)

    cdef bint lam_value(self, double t, int side, double* out) noexcept nogil:
        """Co-state lookup; returns False when it is identically zero."""
        cdef double u, th
        cdef int m, q, bd = self.bd
        u = (t - self.t0) / self.dt
        m = <int>floor(u)
        th = u - m
        if th > 1.0 - NODE_SNAP:
            m = m + 1
            th = 0.0
        if th < NODE_SNAP:
            if m > self.n or (m == self.n and side >= 0):
                return False
            if side < 0:
                memcpy(out, self.lm + m * bd, bd * sizeof(double))
            else:
                memcpy(out, self.lp + m * bd, bd * sizeof(double))
        else:
            if m >= self.n:
                return False
            hermite(out, self.lp + m * bd, self.lm + (m + 1) * bd,
                    self.dlp + m * bd, self.dlm + (m + 1) * bd, self.dt, th, bd)
        for q in range(bd):
            if out[q] != 0.0:
                return True
        return False

    cdef void build_input(self, double s, double* x) noexcept nogil:
        cdef int i, r, q, d = self.d, w = self.n_in
        cdef double* inp = &self.inp[0]
        cdef double* y = &self.yb[0]
        for r in range(self.B):
            for q in range(d):
                inp[r * w + q] = x[r * d + q]
        for i in range(self.k):
            self.x_value(s - self.delays[i], y)
            for r in range(self.B):
                for q in range(d):
                    inp[r * w + d * (i + 1) + q] = y[r * d + q]
        if self.use_time:
            for r in range(self.B):
                inp[r * w + w - 1] = s

    cdef void field(self, double s, double* x, double* out) noexcept nogil:
        self.build_input(s, x)
        memcpy(out, self.net.forward(&self.inp[0]), self.bd * sizeof(double))

    cdef void rk_forward(self, double s0, double* x, double h, double* first, double* out) noexcept nogil:
        cdef int j, bd = self.bd
        cdef double* K = &self.K[0]
        cdef double* xs = &self.xs[0]
        for j in range(self.ns):
            if j == 0 and first != NULL:
                memcpy(K, first, bd * sizeof(double))
            elif j == 0:
                self.field(s0, x, K)
            else:
                combine(xs, x, h, self.aa[j], j, K, bd)
                self.field(s0 + self.cc[j] * h, xs, K + j * bd)
        combine(out, x, h, self.bb, self.ns, K, bd)

    cdef int forward_all(self, double* breaks, long* cut_lo, long* cut_hi) noexcept nogil:
        """Fill ``st``/``dv``; returns 0, or the first node holding a non-finite value."""
        cdef int i, q, bd = self.bd
        cdef long c
        cdef double t, tn, e0, e1
        cdef double* k0
        cdef double* st = self.st
        cdef double* dv = self.dv
        cdef double* pa = &self.xa[0]
        cdef double* pb = &self.xb[0]
        cdef double* sw
        memcpy(st, self.x0, bd * sizeof(double))
        for i in range(self.n):
            t = self.t0 + i * self.dt
            self.field(t, st + i * bd, dv + i * bd)
            k0 = dv + i * bd
            tn = self.t0 + (i + 1) * self.dt
            if cut_hi[i] == cut_lo[i]:
                self.rk_forward(t, st + i * bd, self.dt, k0, st + (i + 1) * bd)
            else:
                memcpy(pa, st + i * bd, bd * sizeof(double))
                e0 = t
                for c in range(cut_lo[i], cut_hi[i] + 1):
                    e1 = breaks[c] if c < cut_hi[i] else tn
                    self.rk_forward(e0, pa, e1 - e0, k0 if e0 == t else NULL, pb)
                    sw = pa
                    pa = pb
                    pb = sw
                    e0 = e1
                memcpy(st + (i + 1) * bd, pa, bd * sizeof(double))
            for q in range(bd):
                if not isfinite(st[(i + 1) * bd + q]):
                    return i + 1
        self.field(self.t0 + self.n * self.dt, st + self.n * bd, dv + self.n * bd)
        return 0

    cdef void rhs(self, double s, double* lam, int side, bint grads, double* gw,
                  double wscale, double* dtau, double* dlam) noexcept nogil:
        cdef int i, q, r, d = self.d, w = self.n_in
        cdef double u, acc
        cdef double* gmain = &self.gmain[0]
        cdef double* gtmp = &self.gtmp[0]
        cdef double* lu = &self.lu[0]
        cdef double* xu = &self.xu[0]
        cdef double* xd = &self.xd[0]
        self.x_value(s, xu)
        self.build_input(s, xu)
        self.net.forward(&self.inp[0])
        self.net.backward(lam, gmain, gw if grads else NULL, wscale)
        for r in range(self.B):
            for q in range(d):
                dlam[r * d + q] = -gmain[r * w + q]
        for i in range(self.k):
            u = s + self.delays[i]
            if not self.lam_value(u, side, lu):
                continue
            self.x_value(u, xu)
            self.build_input(u, xu)
            self.net.forward(&self.inp[0])
            self.net.backward(lu, gtmp, NULL, 0.0)
            for r in range(self.B):
                for q in range(d):
                    dlam[r * d + q] = dlam[r * d + q] - gtmp[r * w + d * (i + 1) + q]
        if grads:
            for i in range(self.k):
                self.x_deriv(s - self.delays[i], side, xd)
                acc = 0.0
                for r in range(self.B):
                    for q in range(d):
                        acc += gmain[r * w + d * (i + 1) + q] * xd[r * d + q]
                dtau[i] = -acc

    cdef int backward_all(self, double* breaks, long* cut_lo, long* cut_hi,
                          unsigned char* on_break, long* jump_index, double* jumps,
                          double* gw, double* gtau) noexcept nogil:
        """Integrate the co-state down to ``t0``; returns 0, or ``m`` if node ``m - 1`` blew up."""
        cdef int m, j, q, i, ns = self.ns, bd = self.bd, kk = self.k, n = self.n, side
        cdef long cidx
        cdef double tm, tb, e0, e1, h
        cdef double* K = &self.K[0]
        cdef double* Kt = &self.Kt[0]
        cdef double* lp = self.lp
        cdef double* lm = self.lm
        cdef double* cur = &self.xa[0]
        cdef double* nxt = &self.xb[0]
        cdef double* ls = &self.xs[0]
        cdef double* sw
        cdef double scratch[MAX_DELAYS]
        cdef double gtstep[MAX_DELAYS]
        cdef double zerok[MAX_DELAYS]
        for i in range(MAX_DELAYS):
            zerok[i] = 0.0
        memset(self.dlp, 0, (n + 1) * bd * sizeof(double))
        memset(self.dlm, 0, (n + 1) * bd * sizeof(double))
        if jump_index[n] >= 0:
            for q in range(bd):
                lm[n * bd + q] = lp[n * bd + q] - jumps[jump_index[n] * bd + q]
        memcpy(cur, lm + n * bd, bd * sizeof(double))
        for m in range(n, 0, -1):
            tm = self.t0 + m * self.dt
            tb = self.t0 + (m - 1) * self.dt
            e0 = tm
            for cidx in range(cut_hi[m - 1], cut_lo[m - 1] - 1, -1):
                e1 = breaks[cidx - 1] if cidx > cut_lo[m - 1] else tb
                h = e1 - e0
                for j in range(ns):
                    if j == 0:
                        memcpy(ls, cur, bd * sizeof(double))
                    else:
                        combine(ls, cur, h, self.aa[j], j, K, bd)
                    side = -1 if self.cc[j] == 0.0 else (1 if self.cc[j] == 1.0 else 0)
                    self.rhs(e0 + self.cc[j] * h, ls, side, self.bb[j] != 0.0, gw,
                             h * self.bb[j], Kt + j * kk if kk > 0 else scratch, K + j * bd)
                    if j == 0 and e0 == tm:
                        # top of the step: left limit of the co-state slope
                        memcpy(self.dlm + m * bd, K, bd * sizeof(double))
                        if m < n and jump_index[m] < 0 and not on_break[m]:
                            memcpy(self.dlp + m * bd, K, bd * sizeof(double))
                combine(nxt, cur, h, self.bb, ns, K, bd)
                if kk > 0:
                    combine(gtstep, zerok, h, self.bb, ns, Kt, kk)
                    for i in range(kk):
                        gtau[i] = gtau[i] + gtstep[i]
                sw = cur
                cur = nxt
                nxt = sw
                e0 = e1
            for q in range(bd):
                if not isfinite(cur[q]):
                    return m
            memcpy(lp + (m - 1) * bd, cur, bd * sizeof(double))
            if jump_index[m - 1] >= 0 or on_break[m - 1]:
                self.rhs(tb, cur, 1, False, NULL, 0.0, scratch, self.dlp + (m - 1) * bd)
            if jump_index[m - 1] >= 0:
                for q in range(bd):
                    cur[q] = cur[q] - jumps[jump_index[m - 1] * bd + q]
            memcpy(lm + (m - 1) * bd, cur, bd * sizeof(double))
        return 0


def forward(double[::1] params, int[::1] sizes, int act, double[::1] delays,
            double[:, ::1] x0, double t0, double dt, int nsteps, c, a, b,
            double[::1] breaks, long[::1] cut_lo, long[::1] cut_hi, bint use_time):
    """Return ``(states, derivs, bad_step)`` shaped ``(N+1, B, d)``; ``bad_step`` is 0 when finite.

    ``breaks`` must hold at least one entry (pad with a sentinel when empty).
    """
    cdef int B = x0.shape[0], d = x0.shape[1], rc
    net = _Net(params, sizes, act, B)
    cdef _Sweep sw = _Sweep(net, delays, d, nsteps, t0, dt, c, a, b, use_time, B)
    states = np.zeros((nsteps + 1, B, d))
    derivs = np.zeros((nsteps + 1, B, d))
    cdef double[:, :, ::1] S = states
    cdef double[:, :, ::1] D = derivs
    sw.st = &S[0, 0, 0]
    sw.dv = &D[0, 0, 0]
    sw.x0 = &x0[0, 0]
    with nogil:
        rc = sw.forward_all(&breaks[0], &cut_lo[0], &cut_hi[0])
    return states, derivs, rc


def adjoint(double[::1] params, int[::1] sizes, int act, double[::1] delays,
            double[:, :, ::1] states, double[:, :, ::1] derivs, double[:, ::1] x0,
            double t0, double dt, c, a, b,
            double[::1] breaks, long[::1] cut_lo, long[::1] cut_hi,
            unsigned char[::1] on_break, long[::1] jump_index, double[:, :, ::1] jumps,
            bint use_time):
    """Backward sweep for a batch laid out ``(N+1, B, d)``; ``jumps`` is ``(S, B, d)``.

    Returns ``(grad_params, grad_delays, lam_plus, lam_minus, bad)`` with the
    gradients summed over the batch; ``bad`` is 0 unless the co-state blew up.
    """
    cdef int n = states.shape[0] - 1, B = states.shape[1], d = states.shape[2]
    cdef int kk = delays.shape[0], rc
    net = _Net(params, sizes, act, B)
    cdef _Sweep sw = _Sweep(net, delays, d, n, t0, dt, c, a, b, use_time, B)
    gw_np = np.zeros(params.shape[0])
    gtau_np = np.zeros(max(kk, 1))
    lam_plus = np.zeros((n + 1, B, d))
    lam_minus = np.zeros((n + 1, B, d))
    dlp = np.zeros((n + 1, B, d))
    dlm = np.zeros((n + 1, B, d))
    cdef double[::1] gw = gw_np
    cdef double[::1] gtau = gtau_np
    cdef double[:, :, ::1] LP = lam_plus
    cdef double[:, :, ::1] LM = lam_minus
    cdef double[:, :, ::1] DLP = dlp
    cdef double[:, :, ::1] DLM = dlm
    cdef double* jp = NULL
    if jumps.shape[0] > 0:
        jp = &jumps[0, 0, 0]
    sw.st = &states[0, 0, 0]
    sw.dv = &derivs[0, 0, 0]
    sw.x0 = &x0[0, 0]
    sw.lp = &LP[0, 0, 0]
    sw.lm = &LM[0, 0, 0]
    sw.dlp = &DLP[0, 0, 0]
    sw.dlm = &DLM[0, 0, 0]
    with nogil:
        rc = sw.backward_all(&breaks[0], &cut_lo[0], &cut_hi[0], &on_break[0],
                             &jump_index[0], jp, &gw[0], &gtau[0])
    return gw_np, gtau_np[:kk], lam_plus, lam_minus, rc
