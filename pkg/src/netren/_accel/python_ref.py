"""Pure-numpy reference kernels; fallback when the Cython extension is absent."""
import numpy as np


def _sigma(x, act):
    if act == "tanh":
        return np.tanh(x)
    return np.maximum(x, 0.0)


def ren_step_kernel(A1, B1, B2, C1, D11, D12, C2, D21, D22, xi, v, act):
    s = C1.shape[0]
    base = C1 @ xi + D12 @ v
    sig = np.empty(s)
    for i in range(s):
        nu_i = base[i] + D11[i, :i] @ sig[:i]
        sig[i] = _sigma(nu_i, act)
    xi_next = A1 @ xi + B1 @ sig + B2 @ v
    z = C2 @ xi + D21 @ sig + D22 @ v
    return xi_next, z


def ren_rollout_kernel(A1, B1, B2, C1, D11, D12, C2, D21, D22, inputs, act):
    T = inputs.shape[0]
    c, r = A1.shape[0], C2.shape[0]
    Z = np.empty((T, r))
    Xi = np.empty((T, c))
    xi = np.zeros(c)
    for t in range(T):
        xi, z = ren_step_kernel(A1, B1, B2, C1, D11, D12, C2, D21, D22,
                                xi, inputs[t], act)
        Z[t] = z
        Xi[t] = xi
    return Z, Xi
