# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled rollout kernels for the recurrent equilibrium cell.

Same contracts as python_ref; the hot inner loops (forward substitution over
neurons, recursion over time) run in C.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()


cdef inline double _sigma(double x, int act_id) nogil:
    if act_id == 0:
        return tanh(x)
    return x if x > 0.0 else 0.0


cdef void _step(const double[:, ::1] A1, const double[:, ::1] B1,
                const double[:, ::1] B2, const double[:, ::1] C1,
                const double[:, ::1] D11, const double[:, ::1] D12,
                const double[:, ::1] C2, const double[:, ::1] D21,
                const double[:, ::1] D22, const double[::1] xi,
                const double[::1] v, int act_id,
                double[::1] sig, double[::1] xi_next, double[::1] z) nogil:
    cdef Py_ssize_t c = A1.shape[0]
    cdef Py_ssize_t s = C1.shape[0]
    cdef Py_ssize_t q = B2.shape[1]
    cdef Py_ssize_t r = C2.shape[0]
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(s):
        acc = 0.0
        for j in range(c):
            acc += C1[i, j] * xi[j]
        for j in range(q):
            acc += D12[i, j] * v[j]
        for j in range(i):
            acc += D11[i, j] * sig[j]
        sig[i] = _sigma(acc, act_id)
    for i in range(c):
        acc = 0.0
        for j in range(c):
            acc += A1[i, j] * xi[j]
        for j in range(s):
            acc += B1[i, j] * sig[j]
        for j in range(q):
            acc += B2[i, j] * v[j]
        xi_next[i] = acc
    for i in range(r):
        acc = 0.0
        for j in range(c):
            acc += C2[i, j] * xi[j]
        for j in range(s):
            acc += D21[i, j] * sig[j]
        for j in range(q):
            acc += D22[i, j] * v[j]
        z[i] = acc


def ren_step_kernel(cnp.ndarray A1, cnp.ndarray B1, cnp.ndarray B2,
                    cnp.ndarray C1, cnp.ndarray D11, cnp.ndarray D12,
                    cnp.ndarray C2, cnp.ndarray D21, cnp.ndarray D22,
                    cnp.ndarray xi, cnp.ndarray v, str act):
    cdef int act_id = 0 if act == "tanh" else 1
    cdef double[:, ::1] mA1 = np.ascontiguousarray(A1)
    cdef double[:, ::1] mB1 = np.ascontiguousarray(B1)
    cdef double[:, ::1] mB2 = np.ascontiguousarray(B2)
    cdef double[:, ::1] mC1 = np.ascontiguousarray(C1)
    cdef double[:, ::1] mD11 = np.ascontiguousarray(D11)
    cdef double[:, ::1] mD12 = np.ascontiguousarray(D12)
    cdef double[:, ::1] mC2 = np.ascontiguousarray(C2)
    cdef double[:, ::1] mD21 = np.ascontiguousarray(D21)
    cdef double[:, ::1] mD22 = np.ascontiguousarray(D22)
    cdef double[::1] mxi = np.ascontiguousarray(xi)
    cdef double[::1] mv = np.ascontiguousarray(v)
    sig = np.empty(mC1.shape[0])
    xi_next = np.empty(mA1.shape[0])
    z = np.empty(mC2.shape[0])
    cdef double[::1] msig = sig
    cdef double[::1] mxn = xi_next
    cdef double[::1] mz = z
    _step(mA1, mB1, mB2, mC1, mD11, mD12, mC2, mD21, mD22,
          mxi, mv, act_id, msig, mxn, mz)
    return xi_next, z


def ren_rollout_kernel(cnp.ndarray A1, cnp.ndarray B1, cnp.ndarray B2,
                       cnp.ndarray C1, cnp.ndarray D11, cnp.ndarray D12,
                       cnp.ndarray C2, cnp.ndarray D21, cnp.ndarray D22,
                       cnp.ndarray inputs, str act):
    cdef int act_id = 0 if act == "tanh" else 1
    cdef double[:, ::1] mA1 = np.ascontiguousarray(A1)
    cdef double[:, ::1] mB1 = np.ascontiguousarray(B1)
    cdef double[:, ::1] mB2 = np.ascontiguousarray(B2)
    cdef double[:, ::1] mC1 = np.ascontiguousarray(C1)
    cdef double[:, ::1] mD11 = np.ascontiguousarray(D11)
    cdef double[:, ::1] mD12 = np.ascontiguousarray(D12)
    cdef double[:, ::1] mC2 = np.ascontiguousarray(C2)
    cdef double[:, ::1] mD21 = np.ascontiguousarray(D21)
    cdef double[:, ::1] mD22 = np.ascontiguousarray(D22)
    cdef double[:, ::1] mV = np.ascontiguousarray(inputs)
    cdef Py_ssize_t T = mV.shape[0]
    cdef Py_ssize_t c = mA1.shape[0]
    cdef Py_ssize_t r = mC2.shape[0]
    Z = np.empty((T, r))
    Xi = np.empty((T, c))
    cdef double[:, ::1] mZ = Z
    cdef double[:, ::1] mXi = Xi
    sig = np.empty(mC1.shape[0])
    xi = np.zeros(c)
    xi_next = np.empty(c)
    cdef double[::1] msig = sig
    cdef double[::1] mxi = xi
    cdef double[::1] mxn = xi_next
    cdef Py_ssize_t t, i
    with nogil:
        for t in range(T):
            _step(mA1, mB1, mB2, mC1, mD11, mD12, mC2, mD21, mD22,
                  mxi, mV[t], act_id, msig, mxn, mZ[t])
            for i in range(c):
                mxi[i] = mxn[i]
                mXi[t, i] = mxn[i]
    return Z, Xi
