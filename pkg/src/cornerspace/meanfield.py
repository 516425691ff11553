"""Gutzwiller mean-field baseline: a self-consistent single-site problem."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, fock_site_operators
from .numerics import kron
from .steadystate import DensityMatrix, steady_state_nullspace
from .observables import expect

__all__ = ["MeanFieldSolution", "MeanFieldError", "gutzwiller_fixed_point", "product_state",
           "mean_field_hamiltonian"]

log = logging.getLogger(__name__)


class MeanFieldError(RuntimeError):
    pass


@dataclass
class MeanFieldSolution:
    rho: DensityMatrix
    b: complex
    n: float
    g2: float | None
    iterations: int
    residual: float
    trace: list = field(default_factory=list)
    converged: bool = True


def mean_field_hamiltonian(params: ModelParams, field_b: complex) -> np.ndarray:
    b, n, n2 = fock_site_operators(params.N_max)
    bd = b.conj().T
    h = -params.delta_omega * n + params.F * (b + bd) - params.J * (field_b * bd + np.conj(field_b) * b)
    if not params.hardcore:
        h = h + 0.5 * params.U * n2
    return h


def _single_site(params: ModelParams, field_b: complex) -> DensityMatrix:
    b, _, _ = fock_site_operators(params.N_max)
    h = mean_field_hamiltonian(params, field_b)
    return steady_state_nullspace(h, [np.sqrt(params.gamma) * b])


def gutzwiller_fixed_point(
    params: ModelParams,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 2000,
    b0: complex | None = None,
    raise_on_failure: bool = False,
) -> MeanFieldSolution:
    """Damped fixed-point iteration of the mean field ``<b>``.

    Each neighbour contributes ``J/z``, so the ``z`` neighbours collapse to a
    single field term ``-J(<b> b^dag + h.c.)``. The iteration starts from the
    linear-cavity guess ``F / (dw + J + i gamma/2)`` unless `b0` is given.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    b_op, n_op, n2_op = fock_site_operators(params.N_max)
    if b0 is None:
        b0 = params.F / (params.delta_omega + params.J + 0.5j * params.gamma)
    cur = complex(b0)
    trace = []
    rho = None
    residual = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rho = _single_site(params, cur)
        new = expect(rho.matrix, b_op)
        residual = abs(new - cur)
        trace.append((cur, residual))
        if residual < tol:
            cur = new
            converged = True
            break
        cur = (1 - damping) * cur + damping * new
    if not converged:
        msg = f"mean-field iteration did not converge in {max_iter} steps (residual {residual:.2e})"
        tail = [r for _, r in trace[-20:]]
        if len(tail) > 4 and np.std(tail) > 0.1 * np.mean(tail):
            msg += "; residual oscillates"
        if raise_on_failure:
            raise MeanFieldError(msg)
        log.warning(msg)
    else:
        rho = _single_site(params, cur)
    n = expect(rho.matrix, n_op).real
    g2 = expect(rho.matrix, n2_op).real / n ** 2 if n > 1e-14 else None
    return MeanFieldSolution(rho=rho, b=expect(rho.matrix, b_op), n=n, g2=g2, iterations=it,
                             residual=residual, trace=trace, converged=converged)


def product_state(solution: MeanFieldSolution, n_sites: int) -> np.ndarray:
    """Dense ``rho_site^{(x) n_sites}`` in the Fock ordering of base clusters."""
    out = np.ones((1, 1), dtype=complex)
    for _ in range(n_sites):
        out = kron(out, solution.rho.matrix)
    return out
