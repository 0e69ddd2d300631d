"""Interconnection of cell sub-operators and the network stability certificate.

The ``N`` cells exchange signals through constant matrices::

    v = M_vz z + M_vw w_hat        (cell inputs)
    u = M_uz z                     (network output)

where ``w_hat`` is the reconstructed disturbance and ``z`` the stacked cell
outputs.  Structural requirements on the coupling matrices:

* ``M_vw`` is 0/1 with exactly one 1 per column and at most one per row, so
  each disturbance component lands in exactly one input slot;
* ``M_uz^T M_uz = H`` is diagonal (mutually orthogonal output columns);
* the block sparsity of ``M_vz`` follows the communication graph.

Under these, :func:`allocate_gains` produces per-cell budgets
``(alpha_i, gamma_i)`` from free scalars ``b_i`` such that the network-level
dissipativity matrix built by :func:`assemble_lmi` is negative semidefinite
for *every* choice of the ``b_i`` (Gershgorin argument).  The certificate is
only ever verified numerically here, never solved for.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

_SYM_TOL = 1e-12


class InterconnectionError(ValueError):
    """Raised when coupling matrices violate the structural requirements."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Topology:
    """Undirected communication graph over agents 0..n_agents-1."""

    n_agents: int
    edges: frozenset

    def __init__(self, n_agents: int, edges):
        if n_agents < 1:
            raise ValueError("need at least one agent")
        norm = set()
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop on agent {i}")
            if not (0 <= i < n_agents and 0 <= j < n_agents):
                raise ValueError(f"edge ({i},{j}) out of range")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "n_agents", n_agents)
        object.__setattr__(self, "edges", frozenset(norm))

    def neighbors(self, i: int) -> list[int]:
        """Neighbor set of agent i, including i itself, sorted."""
        out = {i}
        for a, b in self.edges:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return sorted(out)


@dataclass(frozen=True)
class AgentDims:
    """Per-agent sizes: state n, input m, cell input q, cell output r."""

    n: int
    m: int
    q: int
    r: int

    def __post_init__(self):
        if min(self.n, self.m, self.q, self.r) < 1:
            raise ValueError("agent dimensions must be >= 1")
        if self.q < self.n:
            raise ValueError(f"q={self.q} must be >= n={self.n}")
        if self.r < self.m:
            raise ValueError(f"r={self.r} must be >= m={self.m}")


@dataclass(frozen=True)
class InterconnectionSpec:
    """Coupling matrices plus per-agent partitions of the stacked vectors."""

    topology: Topology
    agent_dims: tuple
    M_vz: np.ndarray
    M_vw: np.ndarray
    M_uz: np.ndarray

    @property
    def n_agents(self) -> int:
        return len(self.agent_dims)

    @property
    def q(self) -> int:
        return sum(d.q for d in self.agent_dims)

    @property
    def r(self) -> int:
        return sum(d.r for d in self.agent_dims)

    @property
    def n(self) -> int:
        return sum(d.n for d in self.agent_dims)

    @property
    def m(self) -> int:
        return sum(d.m for d in self.agent_dims)

    def _offsets(self, attr):
        sizes = [getattr(d, attr) for d in self.agent_dims]
        off = np.concatenate([[0], np.cumsum(sizes)])
        return off

    def v_slice(self, i: int) -> slice:
        off = self._offsets("q")
        return slice(int(off[i]), int(off[i + 1]))

    def z_slice(self, i: int) -> slice:
        off = self._offsets("r")
        return slice(int(off[i]), int(off[i + 1]))

    def x_slice(self, i: int) -> slice:
        off = self._offsets("n")
        return slice(int(off[i]), int(off[i + 1]))

    def u_slice(self, i: int) -> slice:
        off = self._offsets("m")
        return slice(int(off[i]), int(off[i + 1]))

    @property
    def H(self) -> np.ndarray:
        """Diagonal of M_uz^T M_uz."""
        return np.diag(self.M_uz.T @ self.M_uz).copy()


@dataclass(frozen=True)
class IndexSets:
    """Partition of each agent's input rows by exposure to the disturbance.

    ``a1[i]``: rows of agent i's v-block whose M_vw row is nonzero (fed by a
    disturbance component); ``a0[i]``: the remaining rows.  ``out_connected``
    lists agents with nonempty ``a1``.
    """

    a1: tuple
    a0: tuple
    out_connected: tuple


@dataclass(frozen=True)
class GainAllocation:
    """Per-agent supply weights and gain budgets from the free scalars b."""

    gamma_R: float
    b: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    h: np.ndarray           # per-agent scalar used in alpha


@dataclass(frozen=True)
class LmiReport:
    matrix: np.ndarray = field(repr=False)
    max_eigenvalue: float
    feasible: bool
    tolerance: float

    def to_json(self) -> str:
        return json.dumps({
            "size": int(self.matrix.shape[0]),
            "max_eigenvalue": self.max_eigenvalue,
            "feasible": self.feasible,
            "tolerance": self.tolerance,
        }, indent=2)


def build_from_topology(topo: Topology, agent_dims) -> InterconnectionSpec:
    """Canonical coupling layout for a given graph.

    Agent i's input block: first ``n_i`` slots receive its own disturbance,
    the following slots receive each neighbor's full output block (unit
    entries), neighbors in ascending order.  ``M_uz`` picks the first ``m_i``
    outputs of each agent.  The structural assumptions hold by construction.
    """
    agent_dims = tuple(agent_dims)
    if len(agent_dims) != topo.n_agents:
        raise ValueError("one AgentDims required per agent")
    q_off = np.concatenate([[0], np.cumsum([d.q for d in agent_dims])])
    r_off = np.concatenate([[0], np.cumsum([d.r for d in agent_dims])])
    n_off = np.concatenate([[0], np.cumsum([d.n for d in agent_dims])])
    m_off = np.concatenate([[0], np.cumsum([d.m for d in agent_dims])])
    q, r = int(q_off[-1]), int(r_off[-1])
    n, m = int(n_off[-1]), int(m_off[-1])

    M_vz = np.zeros((q, r))
    M_vw = np.zeros((q, n))
    M_uz = np.zeros((m, r))
    for i, d in enumerate(agent_dims):
        others = [j for j in topo.neighbors(i) if j != i]
        need = d.n + sum(agent_dims[j].r for j in others)
        if d.q < need:
            raise InterconnectionError([
                f"agent {i}: q={d.q} too small for the default layout, "
                f"need at least {need} (own n plus neighbor outputs)"])
        base = int(q_off[i])
        M_vw[base:base + d.n, int(n_off[i]):int(n_off[i + 1])] = np.eye(d.n)
        pos = base + d.n
        for j in others:
            rj = agent_dims[j].r
            M_vz[pos:pos + rj, int(r_off[j]):int(r_off[j + 1])] = np.eye(rj)
            pos += rj
        M_uz[int(m_off[i]):int(m_off[i + 1]),
             int(r_off[i]):int(r_off[i]) + d.m] = np.eye(d.m)
    spec = InterconnectionSpec(topology=topo, agent_dims=agent_dims,
                               M_vz=M_vz, M_vw=M_vw, M_uz=M_uz)
    return validate_interconnection(spec)


def interconnection_violations(spec: InterconnectionSpec) -> list[str]:
    """All structural violations, each with the offending rows/columns."""
    out = []
    M_vw, M_uz, M_vz = spec.M_vw, spec.M_uz, spec.M_vz
    if M_vw.shape != (spec.q, spec.n):
        out.append(f"M_vw shape {M_vw.shape} != ({spec.q}, {spec.n})")
    if M_vz.shape != (spec.q, spec.r):
        out.append(f"M_vz shape {M_vz.shape} != ({spec.q}, {spec.r})")
    if M_uz.shape != (spec.m, spec.r):
        out.append(f"M_uz shape {M_uz.shape} != ({spec.m}, {spec.r})")
    if out:
        return out

    bad_entries = np.argwhere((M_vw != 0.0) & (M_vw != 1.0))
    if bad_entries.size:
        out.append(f"M_vw entries outside {{0,1}} at {bad_entries.tolist()}")
    else:
        col_sums = M_vw.sum(axis=0)
        bad_cols = np.nonzero(col_sums != 1.0)[0]
        if bad_cols.size:
            out.append(f"M_vw columns with sum != 1: {bad_cols.tolist()}")
        row_sums = M_vw.sum(axis=1)
        bad_rows = np.nonzero(row_sums > 1.0)[0]
        if bad_rows.size:
            out.append(f"M_vw rows with sum > 1: {bad_rows.tolist()}")

    gram = M_uz.T @ M_uz
    off = gram - np.diag(np.diag(gram))
    if np.abs(off).max(initial=0.0) > _SYM_TOL:
        jj, kk = np.unravel_index(np.abs(off).argmax(), off.shape)
        out.append(f"M_uz columns {jj} and {kk} not orthogonal "
                   f"(inner product {gram[jj, kk]:.3e})")

    for i in range(spec.n_agents):
        allowed = set(spec.topology.neighbors(i))
        vi = spec.v_slice(i)
        for j in range(spec.n_agents):
            if j in allowed:
                continue
            block = M_vz[vi, spec.z_slice(j)]
            if np.any(block != 0.0):
                out.append(f"M_vz block ({i},{j}) nonzero but {j} is not a "
                           f"neighbor of {i}")
    return out


def validate_interconnection(spec: InterconnectionSpec) -> InterconnectionSpec:
    """Return the spec unchanged or raise with the full violation list."""
    violations = interconnection_violations(spec)
    if violations:
        raise InterconnectionError(violations)
    return spec


def compute_index_sets(spec: InterconnectionSpec) -> IndexSets:
    row_fed = spec.M_vw.sum(axis=1) > 0.0
    a1, a0 = [], []
    for i in range(spec.n_agents):
        vi = spec.v_slice(i)
        rows = np.arange(vi.start, vi.stop)
        a1.append(tuple(int(k) for k in rows[row_fed[vi]]))
        a0.append(tuple(int(k) for k in rows[~row_fed[vi]]))
    out = tuple(i for i in range(spec.n_agents) if a1[i])
    return IndexSets(a1=tuple(a1), a0=tuple(a0), out_connected=out)


def _max_row_sum(M_vz, rows):
    if len(rows) == 0:
        return 0.0
    return float(np.abs(M_vz[list(rows), :]).sum(axis=1).max())


def agent_gain_constants(spec: InterconnectionSpec, sets: IndexSets):
    """Per-agent constants entering the gain formulas.

    Returns (h, col_max, row1_max, row0_max): the agent's largest diagonal
    entry of H over its output columns, the largest absolute column sum of
    M_vz over its output columns, and the largest absolute row sums of M_vz
    over its disturbance-fed and non-fed input rows.
    """
    H = spec.H
    h = np.empty(spec.n_agents)
    col_max = np.empty(spec.n_agents)
    row1_max = np.empty(spec.n_agents)
    row0_max = np.empty(spec.n_agents)
    for i in range(spec.n_agents):
        zi = spec.z_slice(i)
        h[i] = float(H[zi].max())
        col_max[i] = float(np.abs(spec.M_vz[:, zi]).sum(axis=0).max())
        row1_max[i] = _max_row_sum(spec.M_vz, sets.a1[i])
        row0_max[i] = _max_row_sum(spec.M_vz, sets.a0[i])
    return h, col_max, row1_max, row0_max


def allocate_gains(spec: InterconnectionSpec, sets: IndexSets,
                   b, gamma_R: float) -> GainAllocation:
    """Free map from scalars b to certified per-agent gain budgets.

    ``alpha_i = h_i + colmax_i + b_i^2`` and ``gamma_i`` takes the two-branch
    closed form; a bound over an empty row set is treated as +inf and dropped.
    The resulting allocation keeps the network supply matrix negative
    semidefinite for every b (verified by :func:`assemble_lmi`).
    """
    if gamma_R <= 0:
        raise ValueError("gamma_R must be positive")
    b = np.asarray(b, dtype=float).ravel()
    if b.shape != (spec.n_agents,):
        raise ValueError("need one b per agent")
    h, col_max, row1_max, row0_max = agent_gain_constants(spec, sets)
    alpha = h + col_max + b ** 2
    gamma = np.empty(spec.n_agents)
    for i in range(spec.n_agents):
        bound0 = math.inf if row0_max[i] == 0.0 else 1.0 / row0_max[i]
        if i in sets.out_connected:
            bound1 = gamma_R ** 2 / (row1_max[i] * gamma_R ** 2 + 1.0)
            budget = min(bound1, bound0)
            gamma[i] = math.sqrt(budget / alpha[i])
        else:
            gamma[i] = math.inf if bound0 == math.inf \
                else math.sqrt(bound0 / alpha[i])
    return GainAllocation(gamma_R=float(gamma_R), b=b.copy(),
                          alpha=alpha, gamma=gamma, h=h)


def _supply_blocks(spec: InterconnectionSpec, alloc: GainAllocation):
    pi_v = np.concatenate([
        np.full(d.q, alloc.alpha[i] * alloc.gamma[i] ** 2)
        for i, d in enumerate(spec.agent_dims)])
    pi_z = np.concatenate([
        np.full(d.r, alloc.alpha[i]) for i, d in enumerate(spec.agent_dims)])
    return pi_v, pi_z


def assemble_lmi(spec: InterconnectionSpec, alloc: GainAllocation) -> np.ndarray:
    """Network dissipativity matrix over (z, w_hat); feasible means <= 0.

    Stacks the map (z, w_hat) -> (v, z, w_hat, u) and sandwiches the block
    supply weights: +alpha_i gamma_i^2 on v, -alpha_i on z, -gamma_R^2 on
    w_hat, +1 on u.
    """
    if alloc.alpha.shape != (spec.n_agents,):
        raise ValueError("allocation does not match the spec")
    if not np.all(np.isfinite(alloc.gamma)):
        raise ValueError("allocation contains an unbounded gain budget")
    pi_v, pi_z = _supply_blocks(spec, alloc)
    q, r, n, m = spec.q, spec.r, spec.n, spec.m
    T = np.zeros((q + r + n + m, r + n))
    T[:q, :r] = spec.M_vz
    T[:q, r:] = spec.M_vw
    T[q:q + r, :r] = np.eye(r)
    T[q + r:q + r + n, r:] = np.eye(n)
    T[q + r + n:, :r] = spec.M_uz
    middle = np.concatenate([
        pi_v, -pi_z, np.full(n, -alloc.gamma_R ** 2), np.ones(m)])
    lmi = T.T @ (middle[:, None] * T)
    return 0.5 * (lmi + lmi.T)


def check_negative_semidefinite(matrix: np.ndarray, tol: float = 1e-8):
    """(feasible, lambda_max) with a tolerance relative to the matrix scale."""
    matrix = np.asarray(matrix, dtype=float)
    asym = np.abs(matrix - matrix.T).max(initial=0.0)
    if asym > _SYM_TOL * max(1.0, np.abs(matrix).max(initial=0.0)):
        raise ValueError(f"matrix not symmetric (max asymmetry {asym:.3e})")
    lam_max = float(scipy.linalg.eigvalsh(0.5 * (matrix + matrix.T)).max())
    scale = max(1.0, float(np.linalg.norm(matrix, "fro")))
    return lam_max <= tol * scale, lam_max


def certify(spec: InterconnectionSpec, alloc: GainAllocation,
            tol: float = 1e-8) -> LmiReport:
    matrix = assemble_lmi(spec, alloc)
    feasible, lam_max = check_negative_semidefinite(matrix, tol=tol)
    return LmiReport(matrix=matrix, max_eigenvalue=lam_max,
                     feasible=feasible, tolerance=tol)


def with_scaled_gamma(alloc: GainAllocation, factor) -> GainAllocation:
    """Copy of an allocation with per-agent gains multiplied by factor."""
    factor = np.broadcast_to(np.asarray(factor, dtype=float), alloc.gamma.shape)
    return GainAllocation(gamma_R=alloc.gamma_R, b=alloc.b,
                          alpha=alloc.alpha, gamma=alloc.gamma * factor,
                          h=alloc.h)


# -- intermediate reductions of the certificate, used as transcription checks --

def schur_chain_conditions(spec: InterconnectionSpec, alloc: GainAllocation,
                           tol: float = 1e-9):
    """Eigenvalue margins of the two equivalent Schur reductions.

    Returns ((first_ok, second_ok), (pair_ok, d_ok)): the one-step Schur pair
    over the disturbance block, and the second reduction built from the
    diagonal matrices P2/D.  Only meaningful strictly off the feasibility
    boundary (the chain inverts matrices that are singular exactly on it);
    callers should scale the gains slightly inward or outward first.
    """
    pi_v, pi_z = _supply_blocks(spec, alloc)
    M_vz, M_vw, M_uz = spec.M_vz, spec.M_vw, spec.M_uz
    g2 = alloc.gamma_R ** 2
    H = M_uz.T @ M_uz

    inner = g2 * np.eye(spec.n) - M_vw.T @ (pi_v[:, None] * M_vw)
    second_ok = float(np.linalg.eigvalsh(inner).min()) > -tol
    first = (-M_vz.T @ (pi_v[:, None] * M_vz) + np.diag(pi_z) - H
             - M_vz.T @ (pi_v[:, None] * (M_vw @ np.linalg.solve(
                 inner, M_vw.T @ (pi_v[:, None] * M_vz)))))
    first_ok = float(np.linalg.eigvalsh(0.5 * (first + first.T)).min()) > -tol

    P2 = M_vw @ np.linalg.solve(inner, M_vw.T)
    D = -np.diag(pi_v) - (pi_v[:, None] * P2) * pi_v[None, :]
    d_diag = np.diag(D)
    d_ok = float(d_diag.max()) < tol
    big = np.block([[np.diag(pi_z) - H, M_vz.T],
                    [M_vz, np.diag(-1.0 / d_diag)]])
    pair_ok = float(np.linalg.eigvalsh(0.5 * (big + big.T)).min()) > -tol
    return (first_ok, second_ok), (pair_ok, d_ok)


# ------------------------------- serialization -------------------------------

def spec_to_json(spec: InterconnectionSpec) -> str:
    """Human-readable round-trippable form: dimension table + matrix literals."""
    return json.dumps({
        "n_agents": spec.n_agents,
        "edges": sorted(list(e) for e in spec.topology.edges),
        "agent_dims": [{"n": d.n, "m": d.m, "q": d.q, "r": d.r}
                       for d in spec.agent_dims],
        "M_vz": spec.M_vz.tolist(),
        "M_vw": spec.M_vw.tolist(),
        "M_uz": spec.M_uz.tolist(),
    }, indent=2)


def spec_from_json(text: str) -> InterconnectionSpec:
    data = json.loads(text)
    topo = Topology(data["n_agents"], [tuple(e) for e in data["edges"]])
    dims = tuple(AgentDims(**d) for d in data["agent_dims"])
    spec = InterconnectionSpec(
        topology=topo, agent_dims=dims,
        M_vz=np.asarray(data["M_vz"], dtype=float),
        M_vw=np.asarray(data["M_vw"], dtype=float),
        M_uz=np.asarray(data["M_uz"], dtype=float))
    return validate_interconnection(spec)
