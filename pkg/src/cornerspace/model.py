"""Driven-dissipative Bose-Hubbard model: site operators, clusters, H and jumps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import scipy.sparse as sp

from .lattice import Geometry
from .numerics import dagger, kron, to_sparse

__all__ = [
    "ModelParams",
    "OperatorSet",
    "Cluster",
    "CapExceededError",
    "MissingOperatorError",
    "fock_site_operators",
    "build_base_cluster",
    "assemble_hamiltonian",
    "jump_operators",
    "hop_operator",
    "density_pair_operator",
]

DEFAULT_BRUTE_FORCE_CAP = 4096


class CapExceededError(ValueError):
    pass


class MissingOperatorError(KeyError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Bose-Hubbard parameters in units of the loss rate.

    ``U`` is ignored when ``hardcore`` is set (infinite repulsion, one boson
    per site at most).
    """

    delta_omega: float
    U: float
    J: float
    F: float
    gamma: float = 1.0
    N_max: int = 1
    z: int = 4
    hardcore: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.N_max < 1:
            raise ValueError("N_max must be >= 1")
        if self.hardcore and self.N_max != 1:
            raise ValueError("hard-core bosons require N_max = 1")
        if self.hardcore and self.U is not None and math.isfinite(self.U):
            raise ValueError("hard-core bosons take U = inf (or None), not a finite U")
        if not self.hardcore and (self.U is None or not math.isfinite(self.U)):
            raise ValueError("infinite U requires hardcore=True")
        if self.z < 1:
            raise ValueError("coordination number z must be >= 1")
        for name in ("delta_omega", "J", "F"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def local_dim(self) -> int:
        return self.N_max + 1

    @classmethod
    def hard_core(cls, delta_omega, J, F, gamma=1.0, z=4):
        return cls(delta_omega=delta_omega, U=math.inf, J=J, F=F, gamma=gamma, N_max=1, z=z,
                   hardcore=True)


@dataclass
class OperatorSet:
    """Site and pair operators of a cluster, all ``dim x dim`` in one basis.

    ``hop[(j, l)]`` (``j < l``) is ``b_j^dagger b_l``; ``dens[(j, l)]`` is
    ``n_j n_l``. Matrices are dense arrays or CSR matrices.
    """

    dim: int
    b: dict
    n: dict
    n2: dict
    hop: dict = field(default_factory=dict)
    dens: dict = field(default_factory=dict)

    @property
    def sites(self) -> list:
        return sorted(self.b)


def hop_operator(ops: OperatorSet, j: int, l: int, exact: bool = True):
    """``b_j^dagger b_l`` from the tracked set, or as a product of site operators."""
    key = (min(j, l), max(j, l))
    if key in ops.hop:
        k = ops.hop[key]
        return k if j < l else dagger(k)
    if exact:
        raise MissingOperatorError(f"hopping operator for pair {key} is not tracked")
    return dagger(ops.b[j]) @ ops.b[l]


def density_pair_operator(ops: OperatorSet, j: int, l: int, exact: bool = True):
    key = (min(j, l), max(j, l))
    if key in ops.dens:
        return ops.dens[key]
    if exact:
        raise MissingOperatorError(f"density-density operator for pair {key} is not tracked")
    return ops.n[j] @ ops.n[l]


@dataclass
class Cluster:
    """A lattice fragment with its basis, operators and (once solved) state.

    ``rho`` and ``eig`` stay ``None`` until the cluster's steady state has
    been computed. ``pairs`` holds the selected ``(r, r')`` product states
    when the basis is a corner of two merged children.
    """

    geometry: Geometry
    dim: int
    ops: OperatorSet
    rho: Any = None
    eig: Any = None
    provenance: str = "leaf"
    m: Optional[int] = None
    mode: str = "exact"
    pairs: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.rho is not None


def fock_site_operators(N_max: int):
    """Truncated single-site ``(b, n, b^dag b^dag b b)`` in the Fock basis."""
    if N_max < 1:
        raise ValueError("N_max must be >= 1")
    k = np.arange(N_max + 1)
    b = np.diag(np.sqrt(k[1:]).astype(complex), 1)
    n = np.diag(k.astype(complex))
    n2 = np.diag((k * (k - 1)).astype(complex))
    return b, n, n2


def _place(op, j: int, n_sites: int, d: int):
    left = sp.identity(d ** j, dtype=complex, format="csr")
    right = sp.identity(d ** (n_sites - j - 1), dtype=complex, format="csr")
    return to_sparse(kron(kron(left, sp.csr_matrix(op)), right))


def build_base_cluster(
    geom: Geometry,
    params: ModelParams,
    tracked=None,
    cap: int = DEFAULT_BRUTE_FORCE_CAP,
) -> Cluster:
    """Full-Fock-space cluster with sparse operators placed by Kronecker products.

    `tracked` is the list of site pairs whose hopping and density-density
    operators are materialized (defaults to the geometry's bonds).
    """
    d = params.local_dim
    ns = geom.n_sites
    dim = d ** ns
    if dim > cap:
        raise CapExceededError(f"cluster dimension {d}^{ns} = {dim} exceeds the cap {cap}")
    b1, n1, n21 = fock_site_operators(params.N_max)
    b = {j: _place(b1, j, ns, d) for j in range(ns)}
    n = {j: _place(n1, j, ns, d) for j in range(ns)}
    n2 = {j: _place(n21, j, ns, d) for j in range(ns)}
    pairs = geom.pairs() if tracked is None else [tuple(sorted(p)) for p in tracked]
    hop = {(j, l): to_sparse(dagger(b[j]) @ b[l]) for j, l in pairs}
    dens = {(j, l): to_sparse(n[j] @ n[l]) for j, l in pairs}
    ops = OperatorSet(dim=dim, b=b, n=n, n2=n2, hop=hop, dens=dens)
    return Cluster(geometry=geom, dim=dim, ops=ops, provenance="leaf")


def assemble_hamiltonian(ops: OperatorSet, geom: Geometry, params: ModelParams,
                         exact: bool = True):
    """Rotating-frame Bose-Hubbard Hamiltonian in the basis of `ops`.

    Hopping is ``-(J/z) * sum_bonds multiplicity * (K + K^dagger)``. Pairs
    missing from ``ops.hop`` are rebuilt as ``b_j^dagger b_l`` products when
    ``exact`` is False; otherwise they raise :class:`MissingOperatorError`.
    """
    sparse = any(sp.issparse(m) for m in ops.b.values())
    h = sp.csr_matrix((ops.dim, ops.dim), dtype=complex) if sparse else np.zeros(
        (ops.dim, ops.dim), dtype=complex)
    for j in ops.sites:
        bj = ops.b[j]
        h = h + (-params.delta_omega) * ops.n[j] + params.F * (bj + dagger(bj))
        if not params.hardcore and params.U != 0:
            h = h + (0.5 * params.U) * ops.n2[j]
    if params.J != 0:
        coupling = params.J / params.z
        for j, l, mult in sorted(geom.bonds):
            k = hop_operator(ops, j, l, exact=exact)
            h = h - (coupling * mult) * (k + dagger(k))
    if sparse:
        return to_sparse(h)
    return 0.5 * (h + dagger(h))


def jump_operators(ops: OperatorSet, params: ModelParams) -> list:
    """Loss operators ``sqrt(gamma) * b_j``, one per site in site order."""
    g = math.sqrt(params.gamma)
    return [g * ops.b[j] for j in ops.sites]
