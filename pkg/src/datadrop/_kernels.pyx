# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-sample kernels for loss, gradient and Hessian-vector products.

Same call signatures as ``datadrop._kernels_py``. Rows are processed one at a
time with fixed summation order, so results are reproducible bit-for-bit.
"""
from libc.math cimport exp, log, tanh
from libc.stdlib cimport calloc, free
from libc.string cimport memset

cdef enum:
    LINEAR = 0
    SOFTMAX = 1
    MLP = 2

cdef enum:
    TANH = 0
    RELU = 1


cdef struct Layout:
    int kind
    int act
    Py_ssize_t d
    Py_ssize_t h
    Py_ssize_t o
    int bias
    Py_ssize_t w1
    Py_ssize_t b1
    Py_ssize_t w2
    Py_ssize_t b2
    Py_ssize_t p


cdef Layout make_layout(tuple lay) except *:
    cdef Layout L
    L.kind = lay[0]
    L.act = lay[1]
    L.d = lay[2]
    L.h = lay[3]
    L.o = lay[4]
    L.bias = 1 if lay[5] else 0
    L.w1 = 0
    if L.kind == MLP:
        L.b1 = L.h * L.d
        L.w2 = L.b1 + (L.h if L.bias else 0)
        L.b2 = L.w2 + L.o * L.h
        L.p = L.b2 + (L.o if L.bias else 0)
    else:
        L.b1 = L.o * L.d
        L.w2 = L.b1
        L.b2 = L.b1
        L.p = L.b1 + (L.o if L.bias else 0)
    return L


cdef inline double dense_row(const double* w, const double* x, Py_ssize_t m) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t k
    for k in range(m):
        acc += w[k] * x[k]
    return acc


cdef inline double softmax_inplace(const double* z, double* p, Py_ssize_t o) noexcept nogil:
    """Writes softmax(z) into p and returns log-sum-exp(z)."""
    cdef Py_ssize_t c
    cdef double m = z[0], s = 0.0
    for c in range(1, o):
        if z[c] > m:
            m = z[c]
    for c in range(o):
        p[c] = exp(z[c] - m)
        s += p[c]
    for c in range(o):
        p[c] /= s
    return log(s) + m


cdef struct Work:
    double* z
    double* p
    double* dz
    double* a
    double* hh
    double* d1
    double* d2
    double* dh
    double* ra
    double* rh
    double* rz
    double* rdz
    double* rda


cdef int work_alloc(Work* w, Layout* L) except -1:
    cdef Py_ssize_t h = L.h if L.h > 0 else 1
    cdef Py_ssize_t o = L.o
    cdef double* buf = <double*> calloc(5 * o + 8 * h, sizeof(double))
    if buf == NULL:
        raise MemoryError()
    w.z = buf
    w.p = buf + o
    w.dz = buf + 2 * o
    w.rz = buf + 3 * o
    w.rdz = buf + 4 * o
    w.a = buf + 5 * o
    w.hh = w.a + h
    w.d1 = w.hh + h
    w.d2 = w.d1 + h
    w.dh = w.d2 + h
    w.ra = w.dh + h
    w.rh = w.ra + h
    w.rda = w.rh + h
    return 0


cdef inline void activate(Layout* L, Work* w) noexcept nogil:
    cdef Py_ssize_t j
    cdef double t
    for j in range(L.h):
        if L.act == TANH:
            t = tanh(w.a[j])
            w.hh[j] = t
            w.d1[j] = 1.0 - t * t
            w.d2[j] = -2.0 * t * w.d1[j]
        else:
            if w.a[j] > 0.0:
                w.hh[j] = w.a[j]
                w.d1[j] = 1.0
            else:
                w.hh[j] = 0.0
                w.d1[j] = 0.0
            w.d2[j] = 0.0


cdef void forward(Layout* L, const double* th, const double* x, Work* w) noexcept nogil:
    """Fills w.z (and the hidden cache for mlp)."""
    cdef Py_ssize_t c, j
    if L.kind == MLP:
        for j in range(L.h):
            w.a[j] = dense_row(th + L.w1 + j * L.d, x, L.d)
            if L.bias:
                w.a[j] += th[L.b1 + j]
        activate(L, w)
        for c in range(L.o):
            w.z[c] = dense_row(th + L.w2 + c * L.h, w.hh, L.h)
            if L.bias:
                w.z[c] += th[L.b2 + c]
    else:
        for c in range(L.o):
            w.z[c] = dense_row(th + c * L.d, x, L.d)
            if L.bias:
                w.z[c] += th[L.b1 + c]


cdef double output_delta(Layout* L, double y, Work* w) noexcept nogil:
    """Per-row loss; fills w.dz with dloss/dz (and w.p for softmax heads)."""
    cdef Py_ssize_t c
    cdef int cls
    cdef double r, lse
    if L.kind == LINEAR:
        r = w.z[0] - y
        w.dz[0] = r
        return 0.5 * r * r
    cls = <int> y
    lse = softmax_inplace(w.z, w.p, L.o)
    for c in range(L.o):
        w.dz[c] = w.p[c]
    w.dz[cls] -= 1.0
    return lse - w.z[cls]


cdef void accumulate_grad(Layout* L, const double* th, const double* x,
                          Work* w, double* g, double s) noexcept nogil:
    """g += s * dloss/dtheta for the row whose forward/delta is in w."""
    cdef Py_ssize_t c, j, k
    cdef double t
    if L.kind == MLP:
        for j in range(L.h):
            t = 0.0
            for c in range(L.o):
                t += th[L.w2 + c * L.h + j] * w.dz[c]
            w.dh[j] = t * w.d1[j]
        for j in range(L.h):
            t = s * w.dh[j]
            for k in range(L.d):
                g[L.w1 + j * L.d + k] += t * x[k]
            if L.bias:
                g[L.b1 + j] += t
        for c in range(L.o):
            t = s * w.dz[c]
            for j in range(L.h):
                g[L.w2 + c * L.h + j] += t * w.hh[j]
            if L.bias:
                g[L.b2 + c] += t
    else:
        for c in range(L.o):
            t = s * w.dz[c]
            for k in range(L.d):
                g[c * L.d + k] += t * x[k]
            if L.bias:
                g[L.b1 + c] += t


cdef void accumulate_hvp(Layout* L, const double* th, const double* x, double y,
                         const double* v, Work* w, double* out, double s) noexcept nogil:
    """out += s * (per-row Hessian) @ v. Requires forward() and output_delta() on w."""
    cdef Py_ssize_t c, j, k
    cdef double t, dot
    if L.kind == LINEAR:
        t = dense_row(v, x, L.d)
        if L.bias:
            t += v[L.b1]
        t *= s
        for k in range(L.d):
            out[k] += t * x[k]
        if L.bias:
            out[L.b1] += t
        return

    if L.kind == SOFTMAX:
        dot = 0.0
        for c in range(L.o):
            w.rz[c] = dense_row(v + c * L.d, x, L.d)
            if L.bias:
                w.rz[c] += v[L.b1 + c]
            dot += w.p[c] * w.rz[c]
        for c in range(L.o):
            t = s * w.p[c] * (w.rz[c] - dot)
            for k in range(L.d):
                out[c * L.d + k] += t * x[k]
            if L.bias:
                out[L.b1 + c] += t
        return

    # mlp: R-operator through both layers
    for j in range(L.h):
        t = dense_row(v + L.w1 + j * L.d, x, L.d)
        if L.bias:
            t += v[L.b1 + j]
        w.ra[j] = t
        w.rh[j] = w.d1[j] * t
    dot = 0.0
    for c in range(L.o):
        t = dense_row(v + L.w2 + c * L.h, w.hh, L.h) + dense_row(th + L.w2 + c * L.h, w.rh, L.h)
        if L.bias:
            t += v[L.b2 + c]
        w.rz[c] = t
        dot += w.p[c] * t
    for c in range(L.o):
        w.rdz[c] = w.p[c] * (w.rz[c] - dot)
    for j in range(L.h):
        t = 0.0
        dot = 0.0
        for c in range(L.o):
            t += v[L.w2 + c * L.h + j] * w.dz[c] + th[L.w2 + c * L.h + j] * w.rdz[c]
            dot += th[L.w2 + c * L.h + j] * w.dz[c]
        w.rda[j] = t * w.d1[j] + dot * w.d2[j] * w.ra[j]
    for j in range(L.h):
        t = s * w.rda[j]
        for k in range(L.d):
            out[L.w1 + j * L.d + k] += t * x[k]
        if L.bias:
            out[L.b1 + j] += t
    for c in range(L.o):
        for j in range(L.h):
            out[L.w2 + c * L.h + j] += s * (w.rdz[c] * w.hh[j] + w.dz[c] * w.rh[j])
        if L.bias:
            out[L.b2 + c] += s * w.rdz[c]


def sample_losses(tuple lay, const double[::1] params, const double[:, ::1] X,
                  const double[::1] y, double[::1] out):
    cdef Layout L = make_layout(lay)
    cdef Work w
    cdef Py_ssize_t i, n = X.shape[0]
    work_alloc(&w, &L)
    try:
        with nogil:
            for i in range(n):
                forward(&L, &params[0], &X[i, 0], &w)
                out[i] = output_delta(&L, y[i], &w)
    finally:
        free(w.z)


def sample_grads(tuple lay, const double[::1] params, const double[:, ::1] X,
                 const double[::1] y, double[:, ::1] out):
    cdef Layout L = make_layout(lay)
    cdef Work w
    cdef Py_ssize_t i, n = X.shape[0]
    work_alloc(&w, &L)
    try:
        with nogil:
            for i in range(n):
                memset(&out[i, 0], 0, L.p * sizeof(double))
                forward(&L, &params[0], &X[i, 0], &w)
                output_delta(&L, y[i], &w)
                accumulate_grad(&L, &params[0], &X[i, 0], &w, &out[i, 0], 1.0)
    finally:
        free(w.z)


def loss_grad(tuple lay, const double[::1] params, const double[:, ::1] X,
              const double[::1] y, double[::1] grad_out):
    """Mean loss over rows; mean gradient written into ``grad_out``."""
    cdef Layout L = make_layout(lay)
    cdef Work w
    cdef Py_ssize_t i, n = X.shape[0]
    cdef double total = 0.0, s = 1.0 / n
    work_alloc(&w, &L)
    try:
        with nogil:
            memset(&grad_out[0], 0, L.p * sizeof(double))
            for i in range(n):
                forward(&L, &params[0], &X[i, 0], &w)
                total += output_delta(&L, y[i], &w)
                accumulate_grad(&L, &params[0], &X[i, 0], &w, &grad_out[0], s)
    finally:
        free(w.z)
    return total / n


def hvp_mean(tuple lay, const double[::1] params, const double[:, ::1] X,
             const double[::1] y, const double[::1] v, double[::1] out):
    cdef Layout L = make_layout(lay)
    cdef Work w
    cdef Py_ssize_t i, n = X.shape[0]
    cdef double s = 1.0 / n
    work_alloc(&w, &L)
    try:
        with nogil:
            memset(&out[0], 0, L.p * sizeof(double))
            for i in range(n):
                forward(&L, &params[0], &X[i, 0], &w)
                output_delta(&L, y[i], &w)
                accumulate_hvp(&L, &params[0], &X[i, 0], y[i], &v[0], &w, &out[0], s)
    finally:
        free(w.z)


def logits(tuple lay, const double[::1] params, const double[:, ::1] X, double[:, ::1] out):
    cdef Layout L = make_layout(lay)
    cdef Work w
    cdef Py_ssize_t i, c, n = X.shape[0]
    work_alloc(&w, &L)
    try:
        with nogil:
            for i in range(n):
                forward(&L, &params[0], &X[i, 0], &w)
                for c in range(L.o):
                    out[i, c] = w.z[c]
    finally:
        free(w.z)


def neg_dots(const double[:, ::1] G, const double[::1] s, double[::1] out):
    cdef Py_ssize_t i, n = G.shape[0], m = G.shape[1]
    with nogil:
        for i in range(n):
            out[i] = -dense_row(&G[i, 0], &s[0], m)
