"""Expectation values, correlation functions and the probability spectrum."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .model import Cluster, OperatorSet
from .lattice import Geometry

__all__ = [
    "ObservableRecord",
    "expect",
    "site_expectations",
    "g2_functions",
    "evaluate",
    "monitored",
    "probability_spectrum",
    "MONITORED",
    "G2_NN_ESTIMATORS",
]

log = logging.getLogger(__name__)

MONITORED = ("n", "re_b", "im_b", "g2", "g2_nn")
VANISHING_DENSITY = 1e-14
G2_NN_ESTIMATORS = ("tracked", "product")


@dataclass
class ObservableRecord:
    """Site-averaged observables of a solved cluster.

    Ratios that are undefined (vanishing density) are ``None``; ``*_err``
    are ``None`` for deterministic solvers.
    """

    n: float
    re_b: float
    im_b: float
    g2: Optional[float]
    g2_nn: Optional[float]
    n_err: Optional[float] = None
    re_b_err: Optional[float] = None
    im_b_err: Optional[float] = None
    g2_err: Optional[float] = None
    g2_nn_err: Optional[float] = None
    per_site: list = field(default_factory=list)
    per_bond: list = field(default_factory=list)
    g2_nn_mode: str = "exact"
    g2_nn_estimator: str = "tracked"
    g2_nn_tracked: Optional[float] = None
    g2_nn_tracked_err: Optional[float] = None
    g2_nn_product: Optional[float] = None
    g2_nn_product_err: Optional[float] = None

    def select_g2_nn(self, estimator: str) -> None:
        """Point ``g2_nn`` at the tracked or the product estimate."""
        if estimator not in G2_NN_ESTIMATORS:
            raise ValueError(f"unknown g2_nn estimator {estimator!r}")
        self.g2_nn_estimator = estimator
        self.g2_nn = getattr(self, f"g2_nn_{estimator}")
        self.g2_nn_err = getattr(self, f"g2_nn_{estimator}_err")

    def values(self) -> dict:
        return {k: getattr(self, k) for k in MONITORED}

    def as_dict(self) -> dict:
        return asdict(self)


def expect(rho: np.ndarray, op) -> complex:
    """``Tr(rho @ op)`` without forming the product."""
    if sp.issparse(op):
        return complex(op.multiply(rho.T).sum())
    return complex(np.sum(rho.T * op))


def _rho_matrix(rho):
    return getattr(rho, "matrix", rho)


def site_expectations(cluster: Cluster) -> dict:
    """Per-site ``n_j`` and ``<b_j>`` plus their site averages."""
    rho = _rho_matrix(cluster.rho)
    ops = cluster.ops
    n = np.array([expect(rho, ops.n[j]).real for j in ops.sites])
    b = np.array([expect(rho, ops.b[j]) for j in ops.sites])
    return {"n_j": n, "b_j": b, "n": float(n.mean()), "b": complex(b.mean())}


def _ratio(num, den):
    return None if den <= VANISHING_DENSITY else num / den


def _bond_mean(ratios, bonds):
    if any(r is None for r in ratios):
        return None
    total = sum(m for _, _, m in bonds)
    return sum(m * r for r, (_, _, m) in zip(ratios, bonds)) / total if total else None


def _evaluate(ops: OperatorSet, geom: Geometry, rho: np.ndarray,
              estimator: str = "tracked") -> ObservableRecord:
    sites = ops.sites
    n = {j: expect(rho, ops.n[j]).real for j in sites}
    b = {j: expect(rho, ops.b[j]) for j in sites}
    n2 = {j: expect(rho, ops.n2[j]).real for j in sites}
    g2_site = [_ratio(n2[j], n[j] ** 2) for j in sites]
    g2 = None if any(v is None for v in g2_site) else float(np.mean(g2_site))

    modes = set()
    per_bond = []
    tracked, product = [], []
    for j, l, mult in geom.bonds:
        mode = "exact" if (j, l) in ops.dens else "product"
        modes.add(mode)
        prod_op = ops.n[j] @ ops.n[l]
        dp = expect(rho, prod_op).real
        dt = expect(rho, ops.dens[(j, l)]).real if mode == "exact" else dp
        rt, rp = _ratio(dt, n[j] * n[l]), _ratio(dp, n[j] * n[l])
        tracked.append(rt)
        product.append(rp)
        per_bond.append({"j": j, "l": l, "multiplicity": mult, "g2_nn": rt, "g2_nn_product": rp,
                         "mode": mode})
    if "product" in modes:
        log.debug("g2_nn uses product-mode density pairs on %d bonds",
                  sum(1 for p in per_bond if p["mode"] == "product"))
    nbar = float(np.mean(list(n.values())))
    bbar = complex(np.mean(list(b.values())))
    rec = ObservableRecord(
        n=nbar, re_b=bbar.real, im_b=bbar.imag, g2=g2, g2_nn=None,
        per_site=[{"site": j, "n": n[j], "re_b": b[j].real, "im_b": b[j].imag, "g2": g} for j, g in
                  zip(sites, g2_site)],
        per_bond=per_bond,
        g2_nn_mode="+".join(sorted(modes)) if modes else "none",
        g2_nn_tracked=_bond_mean(tracked, geom.bonds),
        g2_nn_product=_bond_mean(product, geom.bonds),
    )
    rec.select_g2_nn(estimator)
    return rec


def evaluate(cluster: Cluster, rho=None, estimator: str = "tracked") -> ObservableRecord:
    """Full observable record of `cluster` (optionally for another state `rho`).

    ``g2_nn`` comes from the tracked density-density operators
    (``estimator="tracked"``) or from products ``n_j n_l`` of the site
    operators in the cluster basis (``"product"``). Both are always stored.
    Bonds without a tracked operator use the product in either case;
    ``per_bond`` records which.
    """
    rho = _rho_matrix(cluster.rho if rho is None else rho)
    return _evaluate(cluster.ops, cluster.geometry, rho, estimator)


def g2_functions(cluster: Cluster):
    """``(g2_onsite, g2_nn)``; either is ``None`` where a density vanishes."""
    rec = evaluate(cluster)
    return rec.g2, rec.g2_nn


def monitored(ops: OperatorSet, geom: Geometry, rho, estimator: str = "tracked") -> dict:
    """The observables watched for convergence, as a plain dict."""
    return _evaluate(ops, geom, _rho_matrix(rho), estimator).values()


def probability_spectrum(cluster: Cluster) -> list:
    """Rows ``(rank, p_r, <n_tot>_r)`` for the eigenvectors of rho, rank from 1.

    Eigenvalues at rounding level (below ``dim * eps * p_1``) are not states
    of the mixture and are left out.
    """
    from .corner import cluster_eig

    eig = cluster_eig(cluster)
    ops = cluster.ops
    ntot = sum(ops.n[j] for j in ops.sites)
    v = eig.vectors
    nv = ntot @ v
    pops = np.real(np.sum(v.conj() * nv, axis=0))
    floor = len(eig.values) * np.finfo(float).eps * eig.values[0]
    rows = []
    for r, (p, pop) in enumerate(zip(eig.values, pops), start=1):
        if p <= floor and r > 1:
            break
        rows.append((r, float(p), float(pop)))
    return rows
