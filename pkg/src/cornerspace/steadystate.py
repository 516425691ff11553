"""Deterministic Lindblad dynamics and the exact null-space oracle."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .numerics import dagger, rk4_step, to_dense

__all__ = [
    "DensityMatrix",
    "SolverControls",
    "SteadyStateReport",
    "LindbladGenerator",
    "DegenerateSteadyStateError",
    "lindblad_rhs",
    "integrate",
    "evolve_to_steady_state",
    "steady_state_nullspace",
    "liouvillian",
]

log = logging.getLogger(__name__)

NULLSPACE_DIM_CAP = 64


class DegenerateSteadyStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, unit-trace state in the basis named by ``basis``."""

    matrix: np.ndarray
    basis: str = "fock"

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("density matrix must be square")
        scale = max(1.0, float(np.abs(m).max()))
        if np.abs(m - m.conj().T).max() > 1e-10 * scale:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1.0) > 1e-10:
            raise ValueError(f"density matrix trace is {np.trace(m)}, expected 1")

    @classmethod
    def from_matrix(cls, m, basis: str = "fock") -> "DensityMatrix":
        """Hermitize and trace-normalize `m`."""
        m = to_dense(m).astype(complex)
        m = 0.5 * (m + m.conj().T)
        tr = np.trace(m).real
        if not tr > 0:
            raise ValueError("cannot normalize a matrix with non-positive trace")
        return cls(m / tr, basis)

    @classmethod
    def pure(cls, psi, basis: str = "fock") -> "DensityMatrix":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls.from_matrix(np.outer(psi, psi.conj()), basis)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SolverControls:
    """Time-integration settings (times in units of 1/gamma).

    ``dt=None`` picks ``dt_factor / Omega`` with ``Omega`` the spread of the
    Hamiltonian spectrum plus the total loss rate.
    """

    dt: Optional[float] = None
    dt_factor: float = 2.0
    check_window: float = 5.0
    rel_tol: float = 1e-6
    abs_floor: float = 1e-2
    max_time: float = 1000.0
    record_every: float = 0.25


@dataclass
class SteadyStateReport:
    rho: DensityMatrix
    elapsed: float
    history: list = field(default_factory=list)
    reason: str = "converged"
    dt: float = 0.0

    @property
    def converged(self) -> bool:
        return self.reason == "converged"


def _matmul_right_dagger(x: np.ndarray, c) -> np.ndarray:
    # x @ c^dagger for dense x and dense or sparse c
    if sp.issparse(c):
        return dagger(c @ dagger(x))
    return x @ dagger(c)


class LindbladGenerator:
    """``rho -> i[rho, H] + sum_j D[C_j] rho`` with precomputed ``H_eff``.

    ``H_eff = H - (i/2) sum_j C_j^dagger C_j`` uses the products of the jump
    operators actually passed in, so the generator is trace preserving in any
    (truncated) basis.
    """

    def __init__(self, H, jumps, blocks=None):
        self.dim = H.shape[0]
        for c in jumps:
            if c.shape != H.shape:
                raise ValueError(f"jump operator shape {c.shape} does not match H {H.shape}")
        self.jumps = list(jumps)
        loss = None
        for c in self.jumps:
            cc = dagger(c) @ c
            loss = cc if loss is None else loss + cc
        self.loss = to_dense(loss) if loss is not None else np.zeros(H.shape, dtype=complex)
        self.H = to_dense(H).astype(complex)
        self.heff = self.H - 0.5j * self.loss
        self._stack = None
        self._blocks = None
        if blocks is not None:
            self._blocks = [_BlockGroup(self.jumps, idx, groups) for idx, groups in blocks]
            covered = sorted(i for idx, _ in blocks for i in idx)
            if covered != list(range(len(self.jumps))):
                raise ValueError("block groups must cover every jump operator exactly once")
        elif self.jumps and not any(sp.issparse(c) for c in self.jumps):
            self._stack = np.stack([np.asarray(c, dtype=complex) for c in self.jumps])

    def __call__(self, rho: np.ndarray, hermitian: bool = False) -> np.ndarray:
        x = self.heff @ rho
        if hermitian:
            out = -1j * (x - dagger(x))
        else:
            out = -1j * (x - dagger(self.heff @ dagger(rho)))
        if self._blocks is not None:
            for group in self._blocks:
                out += group.sandwich(rho)
        elif self._stack is not None:
            y = np.matmul(self._stack, rho)
            out += np.matmul(y, self._stack.conj().transpose(0, 2, 1)).sum(axis=0)
        else:
            for c in self.jumps:
                out += _matmul_right_dagger(c @ rho, c)
        return out

    def frequency_scale(self) -> float:
        """Upper estimate of the generator's spectral radius."""
        if self.dim <= 3000:
            e = la.eigvalsh(self.H)
            spread = e[-1] - e[0]
        else:
            row = np.abs(self.H).sum(axis=1)
            spread = 2 * row.max()
        gamma_tot = float(np.abs(np.linalg.eigvalsh(self.loss)).max()) if self.dim <= 3000 else float(
            np.abs(self.loss).sum(axis=1).max())
        return float(spread + gamma_tot)


class _BlockGroup:
    """Jump operators sharing one block-diagonal pattern.

    ``groups`` partitions the basis; every operator in the group has no
    entries outside the diagonal blocks ``groups[g] x groups[g]``, so
    ``sum_j C_j rho C_j^dag`` costs ``sum_g |g|^2 * dim`` per operator.
    """

    def __init__(self, jumps, idx, groups):
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.blocks = []
        for g in self.groups:
            self.blocks.append(np.stack([to_dense(jumps[i])[np.ix_(g, g)] for i in idx]))
        self.k = len(idx)

    def sandwich(self, rho):
        k, dim = self.k, rho.shape[0]
        y = np.empty((k, dim, dim), dtype=complex)
        for g, blk in zip(self.groups, self.blocks):
            y[:, g, :] = np.matmul(blk, rho[g, :])
        out = np.empty((dim, dim), dtype=complex)
        for g, blk in zip(self.groups, self.blocks):
            yg = y[:, :, g].transpose(1, 0, 2).reshape(dim, k * len(g))
            out[:, g] = yg @ blk.conj().transpose(0, 2, 1).reshape(k * len(g), len(g))
        return out


def lindblad_rhs(rho, H, jumps) -> np.ndarray:
    """Time derivative of `rho` under the Lindblad master equation (hbar = 1)."""
    rho = getattr(rho, "matrix", rho)
    if rho.shape != H.shape:
        raise ValueError(f"rho shape {rho.shape} does not match H {H.shape}")
    return LindbladGenerator(H, jumps)(np.asarray(rho, dtype=complex))


def liouvillian(H, jumps) -> np.ndarray:
    """Dense superoperator acting on column-stacked ``vec(rho)``.

    Uses ``vec(A X B) = (B^T kron A) vec(X)``.
    """
    H = to_dense(H).astype(complex)
    d = H.shape[0]
    eye = np.eye(d, dtype=complex)
    L = -1j * (np.kron(eye, H) - np.kron(H.T, eye))
    for c in jumps:
        c = to_dense(c).astype(complex)
        cc = dagger(c) @ c
        L += np.kron(c.conj(), c) - 0.5 * (np.kron(eye, cc) + np.kron(cc.T, eye))
    return L


def steady_state_nullspace(H, jumps, cap: int = NULLSPACE_DIM_CAP,
                           degeneracy_tol: float = 1e-10) -> DensityMatrix:
    """Exact steady state as the null vector of the Liouvillian.

    Raises :class:`DegenerateSteadyStateError` when the null space has more
    than one dimension (relative singular-value threshold `degeneracy_tol`).
    """
    d = H.shape[0]
    if d > cap:
        raise ValueError(f"null-space oracle limited to dimension {cap}, got {d}")
    L = liouvillian(H, jumps)
    _, s, vh = la.svd(L)
    small = int(np.sum(s <= degeneracy_tol * s[0]))
    if small > 1:
        raise DegenerateSteadyStateError(f"steady-state manifold has dimension {small}")
    vec = vh[-1].conj()
    rho = vec.reshape(d, d, order="F")
    rho = rho / np.trace(rho)
    return DensityMatrix.from_matrix(rho)


def _auto_dt(gen: LindbladGenerator, controls: SolverControls, gamma_unit: float) -> float:
    if controls.dt is not None:
        return controls.dt
    omega = max(gen.frequency_scale(), gamma_unit)
    return controls.dt_factor / omega


def integrate(
    gen: LindbladGenerator,
    rho0: np.ndarray,
    observe: Callable,
    controls: SolverControls = SolverControls(),
    basis: str = "fock",
    gamma: float = 1.0,
) -> SteadyStateReport:
    """RK4 evolution of `rho0` until the observables returned by `observe`
    stop changing.

    Every ``check_window`` the state is re-Hermitized and trace-normalized
    and each observable ``x`` is compared with its value one window earlier;
    convergence requires ``|dx| < rel_tol * max(|x|, abs_floor)`` for all.
    """
    dt_max = _auto_dt(gen, controls, gamma)
    window = controls.check_window
    steps = max(1, math.ceil(window / dt_max))
    dt = window / steps
    rec_stride = max(1, round(controls.record_every / dt))

    def f(_t, y):
        return gen(y, hermitian=True)

    rho = np.array(rho0, dtype=complex)
    t = 0.0
    prev = observe(rho)
    history = [(0.0, prev)]
    reason = "max_time"
    step = 0
    while t < controls.max_time - 1e-12:
        for _ in range(steps):
            rho = rk4_step(f, rho, t, dt)
            step += 1
            t = step * dt
            if step % rec_stride == 0 and step % steps:
                history.append((t, observe(rho)))
        rho = 0.5 * (rho + dagger(rho))
        rho /= np.trace(rho).real
        cur = observe(rho)
        history.append((t, cur))
        vals = [v for v in cur.values() if v is not None]
        if not all(np.isfinite(v) for v in vals):
            reason = "diverged"
            break
        done = True
        for k, v in cur.items():
            p = prev.get(k)
            if v is None or p is None:
                if (v is None) != (p is None):
                    done = False
                continue
            if abs(v - p) >= controls.rel_tol * max(abs(v), controls.abs_floor):
                done = False
        prev = cur
        if done:
            reason = "converged"
            break
    if reason == "diverged":
        return SteadyStateReport(rho=None, elapsed=t, history=history, reason=reason, dt=dt)
    return SteadyStateReport(rho=DensityMatrix.from_matrix(rho, basis), elapsed=t,
                             history=history, reason=reason, dt=dt)


def evolve_to_steady_state(cluster, params, rho0=None, controls: SolverControls = SolverControls(),
                           ) -> SteadyStateReport:
    """Integrate the cluster's master equation from `rho0` to its steady state.

    Without `rho0`, leaves start from the Gutzwiller mean-field product
    state and merged clusters from their diagonal joint-probability state.
    """
    from .corner import default_initial_state
    from .model import assemble_hamiltonian, jump_operators
    from .observables import monitored

    from .corner import jump_block_structure

    H = assemble_hamiltonian(cluster.ops, cluster.geometry, params, exact=cluster.mode == "exact")
    jumps = jump_operators(cluster.ops, params)
    gen = LindbladGenerator(H, jumps, blocks=jump_block_structure(cluster))
    if rho0 is None:
        rho0 = default_initial_state(cluster, params)
    rho0 = getattr(rho0, "matrix", rho0)
    report = integrate(gen, rho0, lambda r: monitored(cluster.ops, cluster.geometry, r),
                       controls, basis=cluster.provenance, gamma=params.gamma)
    if report.reason == "diverged":
        log.error("direct integration diverged for %s", cluster.geometry.label())
    elif report.reason == "max_time":
        log.warning("direct integration hit max_time=%g without convergence", controls.max_time)
    return report
