# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Euler-Maruyama inner loops.

Each call advances a block of paths through the columns of ``z`` (one column
per step); the normals are drawn by the caller so both backends consume the
same random stream.
"""
from libc.math cimport pow, sqrt, isfinite


cdef inline double _term(double x, double p) noexcept nogil:
    # small integer powers by multiplication, pow() otherwise
    if p == 1.0:
        return x
    if p == -1.0:
        return 1.0 / x
    if p == 0.0:
        return 1.0
    if p == 2.0:
        return x * x
    if p == 3.0:
        return x * x * x
    return pow(x, p)


cdef inline double _poly(double x, const double[::1] powers, const double[::1] coefs,
                         Py_ssize_t nt) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t k
    for k in range(nt):
        acc = acc + coefs[k] * _term(x, powers[k])
    return acc


def killed_poly(double[::1] x, unsigned char[::1] alive, const double[:, ::1] z,
                double dt, const double[::1] powers, const double[::1] coefs,
                double kill_level):
    """Advance alive paths; kill at the first step with ``x <= kill_level``.

    Returns the number of paths killed because the drift or position
    stopped being finite.
    """
    cdef Py_ssize_t n = x.shape[0], S = z.shape[1], nt = powers.shape[0]
    cdef Py_ssize_t i, s
    cdef double sq = sqrt(dt), xi, d
    cdef long overflow = 0
    with nogil:
        for i in range(n):
            if not alive[i]:
                continue
            xi = x[i]
            for s in range(S):
                d = _poly(xi, powers, coefs, nt)
                xi = xi - d * dt + sq * z[i, s]
                if not isfinite(xi):
                    alive[i] = 0
                    overflow += 1
                    break
                if xi <= kill_level:
                    alive[i] = 0
                    break
            x[i] = xi
    return overflow


def reflected_table(double[::1] x, const double[:, ::1] z, double dt,
                    const double[::1] xs, const double[::1] qs, double eps):
    """Advance with a tabulated drift (linear interpolation, flat outside) and fold at ``eps``."""
    cdef Py_ssize_t n = x.shape[0], S = z.shape[1], m = xs.shape[0]
    cdef Py_ssize_t i, s, j
    cdef double sq = sqrt(dt), xi, d, w
    cdef long overflow = 0
    with nogil:
        for i in range(n):
            xi = x[i]
            if not isfinite(xi):
                continue
            j = 0
            for s in range(S):
                if xi <= xs[0]:
                    d = qs[0]
                elif xi >= xs[m - 1]:
                    d = qs[m - 1]
                else:
                    # walk from the previous cell: paths move a few cells per step
                    while j > 0 and xs[j] > xi:
                        j -= 1
                    while j < m - 2 and xs[j + 1] < xi:
                        j += 1
                    w = (xi - xs[j]) / (xs[j + 1] - xs[j])
                    d = qs[j] + w * (qs[j + 1] - qs[j])
                xi = xi - d * dt + sq * z[i, s]
                if xi < eps:
                    xi = 2.0 * eps - xi
                if not isfinite(xi):
                    overflow += 1
                    break
            x[i] = xi
    return overflow
