"""L2-gain-bounded recurrent equilibrium cells.

A cell with hidden state ``xi``, implicit neuron layer ``nu`` and input ``v``
evolves as::

    nu_t      = C1 xi_{t-1} + D11 sigma(nu_t) + D12 v_t
    xi_t      = A1 xi_{t-1} + B1 sigma(nu_t) + B2 v_t
    z_t       = C2 xi_{t-1} + D21 sigma(nu_t) + D22 v_t

with ``xi_{-1} = 0``.  ``D11`` is kept strictly lower triangular so the
implicit layer resolves in a single forward substitution (acyclic cell).

:func:`build_ren` maps an *unconstrained* parameter vector ``theta`` to cell
matrices whose input/output map has L2 gain at most ``gamma`` for every value
of ``theta``.  The construction assembles a positive semidefinite dissipation
certificate by design (see :func:`build_ren_torch`), so no constraint ever has
to be enforced during optimization.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from ._accel import ren_rollout_kernel, ren_step_kernel

_EPS_DEFAULT = 1e-2


class ActivationKind(enum.Enum):
    """Scalar nonlinearity: slope in [0, 1] and sigma(0) = 0."""

    TANH = "tanh"
    RELU = "relu"

    def apply(self, x):
        if self is ActivationKind.TANH:
            return np.tanh(x)
        return np.maximum(x, 0.0)

    def derivative(self, x):
        if self is ActivationKind.TANH:
            return 1.0 / np.cosh(x) ** 2
        # subgradient 0 at the kink
        return (np.asarray(x) > 0).astype(float)

    def apply_torch(self, x):
        if self is ActivationKind.TANH:
            return torch.tanh(x)
        return torch.relu(x)


@dataclass(frozen=True)
class RenDims:
    """Cell sizes: state ``c``, neurons ``s``, input ``q``, output ``r``."""

    c: int
    s: int
    q: int
    r: int

    def __post_init__(self):
        for name in ("c", "s", "q", "r"):
            if getattr(self, name) < 1:
                raise ValueError(f"dimension {name} must be >= 1")

    @property
    def n_theta(self) -> int:
        """Length of the unconstrained parameter vector.

        Layout (row-major flattened segments, in order):

        == ==============  ================  =========================
        #  name            shape             role
        == ==============  ================  =========================
        1  X               (2c+s, 2c+s)      certificate Gram factor
        2  Y1              (c, c)            skew part of E
        3  B2f             (c, q)            implicit input matrix
        4  C2f             (r, c)            output matrix
        5  D21f            (r, s)            output neuron matrix
        6  D12f            (s, q)            implicit neuron input
        7  X3              (k, k)            feedthrough Cayley factor
        8  Y3              (k, k)            feedthrough skew factor
        9  Z3              (max(q,r)-k, k)   feedthrough tall block
        == ==============  ================  =========================

        where ``k = min(q, r)``.
        """
        c, s, q, r = self.c, self.s, self.q, self.r
        d = 2 * c + s
        k = min(q, r)
        a = max(q, r)
        return d * d + c * c + c * q + r * c + r * s + s * q + 2 * k * k + (a - k) * k


@dataclass(frozen=True)
class RenMatrices:
    """Explicit cell matrices (numpy, float64).  Immutable after build."""

    A1: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2: np.ndarray
    D21: np.ndarray
    D22: np.ndarray
    dims: RenDims = field(repr=False)

    def __post_init__(self):
        c, s, q, r = self.dims.c, self.dims.s, self.dims.q, self.dims.r
        expected = {
            "A1": (c, c), "B1": (c, s), "B2": (c, q),
            "C1": (s, c), "D11": (s, s), "D12": (s, q),
            "C2": (r, c), "D21": (r, s), "D22": (r, q),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if np.any(np.triu(self.D11) != 0.0):
            raise ValueError("D11 must be strictly lower triangular")


@dataclass
class RenState:
    """Hidden state of one cell; starts at zero."""

    xi: np.ndarray

    @classmethod
    def zero(cls, dims: RenDims) -> "RenState":
        return cls(xi=np.zeros(dims.c))


def _split_theta(theta: torch.Tensor, dims: RenDims):
    c, s, q, r = dims.c, dims.s, dims.q, dims.r
    d = 2 * c + s
    k = min(q, r)
    a = max(q, r)
    shapes = [(d, d), (c, c), (c, q), (r, c), (r, s), (s, q), (k, k), (k, k), (a - k, k)]
    out, pos = [], 0
    for shape in shapes:
        num = shape[0] * shape[1]
        out.append(theta[pos:pos + num].reshape(shape))
        pos += num
    return out


def build_ren_torch(theta: torch.Tensor, gamma, dims: RenDims, eps: float = _EPS_DEFAULT):
    """Differentiable parameter-to-matrices map (torch graph preserved).

    Returns a dict with keys A1..D22 plus the certificate pieces ``P`` (storage
    matrix), ``Lambda`` (multipliers) and ``E``.  The construction equates the
    Schur complement of the dissipation matrix with ``X^T X + eps*I``, which
    makes the L2-gain-at-most-gamma supply inequality hold identically in
    ``theta``; see :func:`dissipation_kernel` for the assembled certificate.
    """
    if theta.numel() != dims.n_theta:
        raise ValueError(f"theta has length {theta.numel()}, expected {dims.n_theta}")
    theta = theta.to(torch.float64)
    if not torch.is_tensor(gamma):
        gamma = torch.tensor(float(gamma), dtype=torch.float64)
    c, s, q, r = dims.c, dims.s, dims.q, dims.r
    k = min(q, r)
    X, Y1, B2f, C2f, D21f, D12f, X3, Y3, Z3 = _split_theta(theta, dims)

    # Feedthrough with ||D22|| < gamma via a Cayley transform.  The +I offset
    # puts D22 = 0 at theta = 0.
    M = X3.T @ X3 + Y3 - Y3.T + Z3.T @ Z3 + torch.eye(k, dtype=torch.float64)
    Ik = torch.eye(k, dtype=torch.float64)
    IpM = Ik + M
    top = torch.linalg.solve(IpM.T, (Ik - M).T).T
    bottom = -2.0 * torch.linalg.solve(IpM.T, Z3.T).T
    n_big = torch.cat([top, bottom], dim=0)           # (max(q,r), k), ||.|| < 1
    D22 = gamma * (n_big if r >= q else n_big.T)

    # Coupling of the (v, z) channels into the certificate.
    Iq = torch.eye(q, dtype=torch.float64)
    Ir = torch.eye(r, dtype=torch.float64)
    K_uu = torch.cat([
        torch.cat([gamma ** 2 * Iq, D22.T], dim=1),
        torch.cat([D22, Ir], dim=1),
    ], dim=0)
    K_yu = torch.cat([
        torch.cat([torch.zeros(c, q, dtype=torch.float64), C2f.T], dim=1),
        torch.cat([-D12f, D21f.T], dim=1),
        torch.cat([B2f, torch.zeros(c, r, dtype=torch.float64)], dim=1),
    ], dim=0)
    psi = K_yu @ torch.linalg.solve(K_uu, K_yu.T)

    d = 2 * c + s
    H = X.T @ X + eps * torch.eye(d, dtype=torch.float64) + psi
    H11 = H[:c, :c]
    H21 = H[c:c + s, :c]
    H22 = H[c:c + s, c:c + s]
    H31 = H[c + s:, :c]
    H32 = H[c + s:, c:c + s]
    H33 = H[c + s:, c + s:]

    P = H11
    lam = 0.5 * torch.diagonal(H22)
    D11t = -torch.tril(H22, diagonal=-1)
    E = 0.5 * (H33 + P) + (Y1 - Y1.T)

    A1 = torch.linalg.solve(E, H31)
    B1 = torch.linalg.solve(E, H32)
    B2 = torch.linalg.solve(E, B2f)
    C1 = -H21 / lam[:, None]
    D11 = D11t / lam[:, None]
    D12 = D12f / lam[:, None]

    return {
        "A1": A1, "B1": B1, "B2": B2,
        "C1": C1, "D11": D11, "D12": D12,
        "C2": C2f, "D21": D21f, "D22": D22,
        "P": P, "Lambda": lam, "E": E,
    }


def build_ren(theta: np.ndarray, gamma: float, dims: RenDims,
              eps: float = _EPS_DEFAULT) -> RenMatrices:
    """Map unconstrained ``theta`` and gain budget ``gamma`` to cell matrices."""
    theta = np.asarray(theta, dtype=float).ravel()
    with torch.no_grad():
        mats = build_ren_torch(torch.from_numpy(theta), gamma, dims, eps=eps)
    pick = {k: mats[k].numpy().copy() for k in
            ("A1", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22")}
    # forward substitution assumes exact zeros above the diagonal
    pick["D11"] = np.tril(pick["D11"], k=-1)
    return RenMatrices(dims=dims, **pick)


def dissipation_kernel(theta: np.ndarray, gamma: float, dims: RenDims,
                       eps: float = _EPS_DEFAULT) -> np.ndarray:
    """Assembled certificate matrix; positive semidefinite for every theta.

    Block order (xi, sigma(nu), v, xi_next, z).  Its PSD-ness implies
    ``V(xi') - V(xi) <= gamma^2 |v|^2 - |z|^2`` with ``V(xi) = xi' P xi``
    along every trajectory of the cell; used as an exactness oracle in tests.
    """
    theta_t = torch.from_numpy(np.asarray(theta, dtype=float).ravel())
    with torch.no_grad():
        m = build_ren_torch(theta_t, gamma, dims, eps=eps)
    c, s, q, r = dims.c, dims.s, dims.q, dims.r
    P, lam, E = m["P"].numpy(), m["Lambda"].numpy(), m["E"].numpy()
    C1t = lam[:, None] * m["C1"].numpy()
    D11t = lam[:, None] * m["D11"].numpy()
    D12t = lam[:, None] * m["D12"].numpy()
    F = E @ m["A1"].numpy()
    B1f = E @ m["B1"].numpy()
    B2f = E @ m["B2"].numpy()
    C2, D21, D22 = m["C2"].numpy(), m["D21"].numpy(), m["D22"].numpy()
    W = 2.0 * np.diag(lam) - D11t - D11t.T
    gam2 = float(gamma) ** 2

    n_tot = c + s + q + c + r
    K = np.zeros((n_tot, n_tot))
    i_xi = slice(0, c)
    i_w = slice(c, c + s)
    i_v = slice(c + s, c + s + q)
    i_xn = slice(c + s + q, c + s + q + c)
    i_z = slice(c + s + q + c, n_tot)
    K[i_xi, i_xi] = P
    K[i_w, i_w] = W
    K[i_v, i_v] = gam2 * np.eye(q)
    K[i_xn, i_xn] = E + E.T - P
    K[i_z, i_z] = np.eye(r)
    K[i_xi, i_w] = -C1t.T
    K[i_w, i_v] = -D12t
    K[i_xi, i_xn] = F.T
    K[i_w, i_xn] = B1f.T
    K[i_v, i_xn] = B2f.T
    K[i_xi, i_z] = C2.T
    K[i_w, i_z] = D21.T
    K[i_v, i_z] = D22.T
    K = np.triu(K) + np.triu(K, k=1).T
    return K


def storage_matrix(theta: np.ndarray, gamma: float, dims: RenDims,
                   eps: float = _EPS_DEFAULT) -> np.ndarray:
    """Storage-function weight P of the cell built from theta."""
    theta_t = torch.from_numpy(np.asarray(theta, dtype=float).ravel())
    with torch.no_grad():
        return build_ren_torch(theta_t, gamma, dims, eps=eps)["P"].numpy()


def equilibrium_solve(mat: RenMatrices, xi_prev: np.ndarray, v: np.ndarray,
                      act: ActivationKind) -> np.ndarray:
    """Resolve the implicit neuron layer by forward substitution.

    With D11 strictly lower triangular the equation
    ``nu = C1 xi + D11 sigma(nu) + D12 v`` is solved exactly row by row.
    """
    base = mat.C1 @ xi_prev + mat.D12 @ v
    nu = np.empty(mat.dims.s)
    sig = np.empty(mat.dims.s)
    for i in range(mat.dims.s):
        nu[i] = base[i] + mat.D11[i, :i] @ sig[:i]
        sig[i] = act.apply(nu[i])
    return nu


def ren_step(mat: RenMatrices, xi_prev: np.ndarray, v: np.ndarray,
             act: ActivationKind) -> tuple[np.ndarray, np.ndarray]:
    """One cell update: returns (xi_next, z)."""
    xi_prev = np.asarray(xi_prev, dtype=float)
    v = np.asarray(v, dtype=float)
    if xi_prev.shape != (mat.dims.c,) or v.shape != (mat.dims.q,):
        raise ValueError("state/input shape mismatch with cell dims")
    return ren_step_kernel(
        mat.A1, mat.B1, mat.B2, mat.C1, mat.D11, mat.D12,
        mat.C2, mat.D21, mat.D22, xi_prev, v, act.value)


def ren_rollout(mat: RenMatrices, inputs: np.ndarray,
                act: ActivationKind) -> tuple[np.ndarray, float]:
    """Run the cell from xi_{-1}=0 over an input sequence.

    ``inputs`` is (T, q).  Returns the (T, r) output sequence and the
    truncated-norm ratio ||z||_2 / ||v||_2, an empirical lower bound on the
    cell's L2 gain.  Raises ValueError on a zero-norm input sequence.
    """
    inputs = np.ascontiguousarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != mat.dims.q:
        raise ValueError("inputs must be (T, q)")
    if inputs.shape[0] < 1:
        raise ValueError("need at least one time step")
    v_norm = float(np.linalg.norm(inputs))
    if v_norm == 0.0:
        raise ValueError("gain ratio undefined for a zero-norm input sequence")
    z, _ = ren_rollout_kernel(
        mat.A1, mat.B1, mat.B2, mat.C1, mat.D11, mat.D12,
        mat.C2, mat.D21, mat.D22, inputs, act.value)
    return z, float(np.linalg.norm(z)) / v_norm
