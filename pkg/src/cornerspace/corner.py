"""Corner-space renormalization: pair selection, cluster merging, M-convergence.

Merging clusters ``A`` and ``B`` keeps the ``M`` product states
``|phi_r^A>|phi_r'^B>`` of largest joint probability ``p_r^A p_r'^B``.
Operators are carried into that corner exactly:

* an operator living in ``A`` has corner entries
  ``[V_A^dag O V_A]_{r_s r_s'} * delta(r'_s, r'_s')`` (symmetrically for B);
* a pair operator straddling the cut factorizes,
  ``[V_A^dag X V_A]_{r_s r_s'} * [V_B^dag Y V_B]_{r'_s r'_s'}``.
"""

from __future__ import annotations

import heapq
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .lattice import Geometry, MergeNode, MergeSchedule
from .meanfield import gutzwiller_fixed_point, product_state
from .model import (Cluster, ModelParams, OperatorSet, assemble_hamiltonian, build_base_cluster,
                    density_pair_operator, hop_operator, jump_operators, fock_site_operators)
from .numerics import EigenDecomposition, dagger, hermitian_eig, to_dense
from .observables import MONITORED, ObservableRecord, evaluate
from .steadystate import (DensityMatrix, SolverControls, evolve_to_steady_state,
                          steady_state_nullspace)
from .trajectories import (TrajectoryConfig, estimate_density_matrix, observable_stats,
                           run_ensemble)

__all__ = [
    "NegativityError",
    "SolverError",
    "PairSelection",
    "PipelineControls",
    "SolveResult",
    "ConvergenceReport",
    "diagonalize_rho",
    "cluster_eig",
    "select_top_m_pairs",
    "merge_clusters",
    "default_initial_state",
    "solve_cluster",
    "converge_in_m",
    "save_cluster",
    "load_cluster",
]

log = logging.getLogger(__name__)

DEGENERACY_RTOL = 1e-12


class NegativityError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


def diagonalize_rho(rho, clip_tol: float = 1e-8) -> EigenDecomposition:
    """Probabilities (descending) and eigenvectors of a density matrix.

    Eigenvalues in ``[-clip_tol * tr, 0)`` are set to zero and the spectrum
    renormalized; anything more negative raises :class:`NegativityError`.
    """
    m = getattr(rho, "matrix", rho)
    eig = hermitian_eig(m, hermiticity_tol=1e-8)
    tr = float(np.trace(m).real)
    p = np.array(eig.values, dtype=float)
    if p[-1] < -clip_tol * tr:
        raise NegativityError(f"density matrix has eigenvalue {p[-1]:.3e} below -{clip_tol:g}")
    p[p < 0] = 0.0
    p /= p.sum()
    return EigenDecomposition(values=p, vectors=np.array(eig.vectors))


def cluster_eig(cluster: Cluster, clip_tol: float = 1e-8) -> EigenDecomposition:
    if cluster.eig is None:
        if cluster.rho is None:
            raise SolverError(f"cluster {cluster.geometry.label()} has not been solved")
        cluster.eig = diagonalize_rho(cluster.rho, clip_tol)
    return cluster.eig


@dataclass(frozen=True)
class PairSelection:
    r: np.ndarray
    rp: np.ndarray
    probs: np.ndarray
    degenerate_shell: Optional[float] = None

    def __len__(self):
        return len(self.r)

    @property
    def captured(self) -> float:
        return float(self.probs.sum())


def select_top_m_pairs(pA: Sequence[float], pB: Sequence[float], M: int) -> PairSelection:
    """The `M` index pairs with the largest products ``pA[i] * pB[j]``.

    Both inputs must be sorted descending. A frontier max-heap seeded at
    ``(0, 0)`` only ever expands ``(i+1, j)`` and ``(i, j+1)``; equal
    products come out in lexicographic ``(i, j)`` order.
    """
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    for name, p in (("pA", pA), ("pB", pB)):
        if p.ndim != 1 or len(p) == 0:
            raise ValueError(f"{name} must be a non-empty vector")
        if np.any(np.diff(p) > 0):
            raise ValueError(f"{name} is not sorted in descending order")
        if p.sum() > 1 + 1e-9:
            raise ValueError(f"{name} sums to {p.sum()} > 1")
    na, nb = len(pA), len(pB)
    if not 1 <= M <= na * nb:
        raise ValueError(f"M = {M} outside [1, {na * nb}]")
    want = min(M + 1, na * nb)
    heap = [(-pA[0] * pB[0], 0, 0)]
    seen = {(0, 0)}
    out = []
    while len(out) < want:
        negp, i, j = heapq.heappop(heap)
        out.append((i, j, -negp))
        for a, b in ((i + 1, j), (i, j + 1)):
            if a < na and b < nb and (a, b) not in seen:
                seen.add((a, b))
                heapq.heappush(heap, (-pA[a] * pB[b], a, b))
    shell = None
    if len(out) > M:
        last, nxt = out[M - 1][2], out[M][2]
        if last > 0 and abs(last - nxt) <= DEGENERACY_RTOL * last:
            shell = last
            log.warning("corner cut at M=%d splits a degenerate shell at p=%.6e", M, last)
        out = out[:M]
    arr = np.array(out)
    return PairSelection(r=arr[:, 0].astype(int), rp=arr[:, 1].astype(int),
                         probs=arr[:, 2].astype(float), degenerate_shell=shell)


class _Side:
    """One child seen from the corner: rotated operators restricted to used states."""

    def __init__(self, cluster: Cluster, idx: np.ndarray, vectors: np.ndarray):
        used, inv = np.unique(idx, return_inverse=True)
        self.cluster = cluster
        self.v = np.ascontiguousarray(vectors[:, used])
        self.inv = inv
        self._cache = {}

    def rotate(self, op) -> np.ndarray:
        x = op @ self.v
        return dagger(self.v) @ to_dense(x)

    def site(self, kind: str, j: int) -> np.ndarray:
        key = (kind, j)
        if key not in self._cache:
            self._cache[key] = self.rotate(getattr(self.cluster.ops, kind)[j])
        return self._cache[key]

    def take(self, rotated: np.ndarray) -> np.ndarray:
        return rotated[np.ix_(self.inv, self.inv)]


def merge_clusters(A: Cluster, B: Cluster, node: MergeNode, M: int, mode: str = "exact",
                   clip_tol: float = 1e-8) -> Cluster:
    """Corner cluster for `node` spanned by the `M` most probable pairs of A and B.

    In ``"exact"`` mode every pair in ``node.tracked`` is carried as an exact
    projection; in ``"fast"`` mode only the pairs first realized at this node
    are stored and other pair operators are later rebuilt from site operators.
    """
    if node.is_leaf:
        raise ValueError("cannot merge into a leaf node")
    ga, gb = node.children[0].geometry, node.children[1].geometry
    if A.geometry.shape != ga.shape or B.geometry.shape != gb.shape:
        raise ValueError("child clusters do not match the schedule node")
    if mode not in ("exact", "fast"):
        raise ValueError(f"unknown operator mode {mode!r}")
    if M > A.dim * B.dim:
        raise ValueError(f"M = {M} exceeds the product dimension {A.dim * B.dim}")
    ea, eb = cluster_eig(A, clip_tol), cluster_eig(B, clip_tol)
    sel = select_top_m_pairs(ea.values, eb.values, M)
    sa, sb = _Side(A, sel.r, ea.vectors), _Side(B, sel.rp, eb.vectors)
    same_b = sel.rp[:, None] == sel.rp[None, :]
    same_a = sel.r[:, None] == sel.r[None, :]

    def lift_a(rot):
        return sa.take(rot) * same_b

    def lift_b(rot):
        return sb.take(rot) * same_a

    inv_a = {p: c for c, p in enumerate(node.embed_a)}
    inv_b = {p: c for c, p in enumerate(node.embed_b)}
    b, n, n2 = {}, {}, {}
    for side, emb, lift in ((sa, node.embed_a, lift_a), (sb, node.embed_b, lift_b)):
        for local, j in enumerate(emb):
            b[j] = lift(side.site("b", local))
            n[j] = lift(side.site("n", local))
            n2[j] = lift(side.site("n2", local))

    hop, dens = {}, {}
    pairs = node.tracked if mode == "exact" else node.cross
    for j, l in pairs:
        if j in inv_a and l in inv_a:
            child, inv, side, lift = A, inv_a, sa, lift_a
        elif j in inv_b and l in inv_b:
            child, inv, side, lift = B, inv_b, sb, lift_b
        else:
            child = None
        if child is not None:
            cj, cl = inv[j], inv[l]
            key = (min(cj, cl), max(cj, cl))
            if key not in child.ops.hop:
                log.debug("pair %s untracked in child %s; using site-operator product",
                          key, child.geometry.label())
            k = hop_operator(child.ops, cj, cl, exact=False)
            hop[(j, l)] = lift(side.rotate(k))
            dens[(j, l)] = lift(side.rotate(density_pair_operator(child.ops, cj, cl, exact=False)))
            continue
        if j in inv_a:
            ka = dagger(sa.site("b", inv_a[j]))
            kb = sb.site("b", inv_b[l])
        else:
            ka = sa.site("b", inv_a[l])
            kb = dagger(sb.site("b", inv_b[j]))
        na = sa.site("n", inv_a[j] if j in inv_a else inv_a[l])
        nb = sb.site("n", inv_b[l] if l in inv_b else inv_b[j])
        hop[(j, l)] = sa.take(ka) * sb.take(kb)
        dens[(j, l)] = sa.take(na) * sb.take(nb)

    ops = OperatorSet(dim=M, b=b, n=n, n2=n2, hop=hop, dens=dens)
    return Cluster(geometry=node.geometry, dim=M, ops=ops, provenance="merged", m=M, mode=mode,
                   pairs=np.stack([sel.r, sel.rp], axis=1),
                   info={"children": (A, B), "selection": sel, "node": node})


def jump_block_structure(cluster: Cluster):
    """Block pattern of a merged cluster's site operators, or ``None``.

    Operators of sites in child A only connect corner states with the same
    B label ``r'`` (and vice versa), so they are block diagonal once the
    corner is grouped by the other child's label.
    """
    if cluster.provenance != "merged" or cluster.pairs is None:
        return None
    node = cluster.info.get("node")
    if node is None:
        return None
    sites = cluster.ops.sites
    r, rp = cluster.pairs[:, 0], cluster.pairs[:, 1]

    def groups(labels):
        order = np.argsort(labels, kind="stable")
        cuts = np.nonzero(np.diff(labels[order]))[0] + 1
        return np.split(order, cuts)

    in_a = set(node.embed_a)
    idx_a = [i for i, j in enumerate(sites) if j in in_a]
    idx_b = [i for i, j in enumerate(sites) if j not in in_a]
    out = []
    if idx_a:
        out.append((idx_a, groups(rp)))
    if idx_b:
        out.append((idx_b, groups(r)))
    return out


def default_initial_state(cluster: Cluster, params: ModelParams) -> np.ndarray:
    """Diagonal joint-probability state for merged clusters, mean-field product for leaves."""
    if cluster.provenance == "merged":
        p = cluster.info["selection"].probs
        return np.diag(p / p.sum()).astype(complex)
    mf = gutzwiller_fixed_point(params)
    return product_state(mf, cluster.geometry.n_sites)


def _mean_field_sampler(params: ModelParams, n_sites: int) -> Callable:
    mf = gutzwiller_fixed_point(params)
    eig = hermitian_eig(mf.rho.matrix)
    p = np.clip(eig.values, 0, None)
    cdf = np.cumsum(p / p.sum())

    def sample(rng):
        psi = np.ones(1, dtype=complex)
        for _ in range(n_sites):
            r = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)
            psi = np.kron(psi, eig.vectors[:, r])
        return psi
    return sample


@dataclass(frozen=True)
class PipelineControls:
    solver: SolverControls = SolverControls()
    trajectories: TrajectoryConfig = TrajectoryConfig()
    direct_cap: int = 400
    nullspace_cap: int = 32
    leaf_cap: int = 4096
    mode: str = "auto"
    fast_above: int = 2000
    clip_tol: float = 1e-8
    g2_nn_estimator: str = "tracked"


@dataclass
class SolveResult:
    record: ObservableRecord
    solver: str
    seconds: float
    timeseries: list = field(default_factory=list)
    converged: bool = True
    detail: object = None


def _site_average(ops: OperatorSet, kind: str):
    mats = [getattr(ops, kind)[j] for j in ops.sites]
    return to_dense(sum(mats)) / len(mats)


def _bond_average(ops: OperatorSet, geom: Geometry, product: bool = False):
    total = sum(m for _, _, m in geom.bonds)
    acc = np.zeros((ops.dim, ops.dim), dtype=complex)
    for j, l, m in geom.bonds:
        op = ops.n[j] @ ops.n[l] if product else density_pair_operator(ops, j, l, exact=False)
        acc += m * to_dense(op)
    return acc / total


def _node_seed(master: int, cluster: Cluster) -> int:
    tag = f"{master}:{cluster.geometry.label()}:{cluster.dim}:{cluster.provenance}"
    return zlib.crc32(tag.encode()) ^ (master & 0xFFFFFFFF)


def choose_solver(cluster: Cluster, controls: PipelineControls) -> str:
    if cluster.provenance == "leaf" and cluster.dim <= controls.nullspace_cap:
        return "nullspace"
    return "direct" if cluster.dim <= controls.direct_cap else "mcwf"


def solve_cluster(cluster: Cluster, params: ModelParams, controls: PipelineControls = PipelineControls(),
                  solver: Optional[str] = None, rho0=None) -> SolveResult:
    """Steady state of `cluster` in place; returns observables and diagnostics."""
    solver = solver or choose_solver(cluster, controls)
    t0 = time.perf_counter()
    timeseries = []
    converged = True
    detail = None
    exact = cluster.mode == "exact"
    est = controls.g2_nn_estimator
    if solver == "nullspace":
        H = assemble_hamiltonian(cluster.ops, cluster.geometry, params, exact=exact)
        rho = steady_state_nullspace(H, jump_operators(cluster.ops, params), cap=max(64, cluster.dim))
        cluster.rho = rho
        record = evaluate(cluster, estimator=est)
    elif solver == "direct":
        report = evolve_to_steady_state(cluster, params, rho0=rho0, controls=controls.solver)
        if report.reason == "diverged":
            raise SolverError(f"direct integration diverged on {cluster.geometry.label()} (M={cluster.dim})")
        converged = report.converged
        cluster.rho = report.rho
        record = evaluate(cluster, estimator=est)
        timeseries = [(t, o["n"], o["g2"]) for t, o in report.history]
        detail = report
    elif solver == "mcwf":
        H = assemble_hamiltonian(cluster.ops, cluster.geometry, params, exact=exact)
        jumps = jump_operators(cluster.ops, params)
        obs = {"n": _site_average(cluster.ops, "n"), "b": _site_average(cluster.ops, "b"),
               "n2": _site_average(cluster.ops, "n2"), "nn": _bond_average(cluster.ops, cluster.geometry)}
        if cluster.geometry.bonds and any((j, l) in cluster.ops.dens for j, l, _ in cluster.geometry.bonds):
            obs["nn_product"] = _bond_average(cluster.ops, cluster.geometry, product=True)
        if rho0 is not None:
            psi0 = rho0
        elif cluster.provenance == "merged":
            psi0 = DensityMatrix.from_matrix(default_initial_state(cluster, params), "corner")
        else:
            psi0 = _mean_field_sampler(params, cluster.geometry.n_sites)
        cfg = replace(controls.trajectories,
                      master_seed=_node_seed(controls.trajectories.master_seed, cluster))
        ens = run_ensemble(H, jumps, psi0, cfg, obs)
        cluster.rho = estimate_density_matrix(ens, cluster.provenance)
        stats = observable_stats(ens)
        record = evaluate(cluster, estimator=est)
        record.n, record.n_err = stats["n"].mean, stats["n"].err
        record.re_b, record.re_b_err = stats["b_re"].mean, stats["b_re"].err
        record.im_b, record.im_b_err = stats["b_im"].mean, stats["b_im"].err
        if "g2" in stats:
            record.g2, record.g2_err = stats["g2"].mean, stats["g2"].err
        if "g2_nn" in stats:
            record.g2_nn_tracked, record.g2_nn_tracked_err = stats["g2_nn"].mean, stats["g2_nn"].err
            prod = stats.get("g2_nn_product", stats["g2_nn"])
            record.g2_nn_product, record.g2_nn_product_err = prod.mean, prod.err
        record.select_g2_nn(est)
        avg = ens.samples.mean(axis=0).real
        i_n, i_n2 = ens.column("n"), ens.column("n2")
        timeseries = [(float(t), float(row[i_n]), float(row[i_n2] / row[i_n] ** 2) if row[i_n] > 1e-14 else None)
                      for t, row in zip(ens.times, avg)]
        detail = ens
    else:
        raise ValueError(f"unknown solver {solver!r}")
    cluster.eig = diagonalize_rho(cluster.rho, controls.clip_tol)
    cluster.info["solver"] = solver
    return SolveResult(record=record, solver=solver, seconds=time.perf_counter() - t0,
                       timeseries=timeseries, converged=converged, detail=detail)


@dataclass
class ConvergenceReport:
    """Rows (one per solved node and M) plus warnings and final status."""

    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    node_status: dict = field(default_factory=dict)
    spectrum_cluster: Optional[Cluster] = None

    @property
    def converged(self) -> bool:
        return all(s in ("converged", "exact", "leaf", "fixed") for s in self.node_status.values())


def _relative_change(a: ObservableRecord, b: ObservableRecord, floor: float = 1e-3) -> float:
    worst = 0.0
    for k in MONITORED:
        x, y = getattr(a, k), getattr(b, k)
        if x is None or y is None:
            if (x is None) != (y is None):
                return float("inf")
            continue
        diff = abs(x - y)
        ex, ey = getattr(a, f"{k}_err"), getattr(b, f"{k}_err")
        if ex is not None or ey is not None:
            sigma = np.hypot(ex or 0.0, ey or 0.0)
            diff = max(0.0, diff - 2 * sigma)
        worst = max(worst, diff / max(abs(y), floor))
    return worst


def _node_key(node: MergeNode):
    if node.is_leaf:
        return (node.geometry.shape, node.tracked)
    return (node.geometry.shape, node.tracked, node.axis, _node_key(node.children[0]),
            _node_key(node.children[1]))


def converge_in_m(
    schedule: MergeSchedule,
    params: ModelParams,
    m_list: Sequence[int],
    obs_tol: float = 1e-3,
    controls: PipelineControls = PipelineControls(),
    on_row: Optional[Callable] = None,
    sweep: bool = False,
    inner_m: str = "converge",
):
    """Solve every node of `schedule`, increasing M through `m_list` at each merge.

    A merged node stops at the first M whose observables differ from the
    previous M by less than `obs_tol` (relative), or when M reaches the full
    product dimension. Identical sub-trees are solved once.

    ``sweep=True`` solves the root at every M of `m_list` (a convergence
    table); its status is then judged on the last two M values.
    ``inner_m="max"`` solves intermediate nodes once, at the largest M of
    `m_list` (capped at their full dimension), instead of converging them.
    A node whose schedule entry fixes M (``node.m``) is solved at that M only.
    """
    m_list = sorted(int(m) for m in m_list)
    if not m_list:
        raise ValueError("m_list must not be empty")
    if inner_m not in ("converge", "max"):
        raise ValueError(f"inner_m must be 'converge' or 'max', not {inner_m!r}")
    report = ConvergenceReport()
    cache = {}

    def emit(cluster, res, status, captured=None, label=None):
        row = {"Lx": cluster.geometry.Lx, "Ly": cluster.geometry.Ly, "M": cluster.dim,
               "solver": res.solver, "mode": cluster.mode, "record": res.record,
               "seconds": res.seconds, "timeseries": res.timeseries, "status": status,
               "captured": captured, "node": label, "converged": res.converged}
        report.rows.append(row)
        if on_row is not None:
            on_row(row)

    def solve(node: MergeNode, label: str):
        key = _node_key(node)
        if key in cache:
            return cache[key]
        if node.is_leaf:
            cl = build_base_cluster(node.geometry, params, tracked=node.tracked, cap=controls.leaf_cap)
            res = solve_cluster(cl, params, controls)
            report.node_status[label] = "leaf"
            emit(cl, res, "leaf", label=label)
            if not res.converged:
                report.warnings.append(f"{label}: leaf solve reached max_time")
                report.node_status[label] = "limits"
            cache[key] = cl
            return cl
        A = solve(node.children[0], label + ".0")
        B = solve(node.children[1], label + ".1")
        full = A.dim * B.dim
        is_root = node is schedule.root
        if node.m is not None:
            ms = [min(node.m, full)]
        elif inner_m == "max" and not is_root:
            ms = [min(m_list[-1], full)]
        else:
            ms = sorted({min(m, full) for m in m_list})
        keep_going = sweep and is_root
        prev = None
        changes = []
        status = "exhausted"
        cl = None
        for M in ms:
            mode = controls.mode if controls.mode != "auto" else (
                "exact" if M <= controls.fast_above else "fast")
            cl = merge_clusters(A, B, node, M, mode=mode, clip_tol=controls.clip_tol)
            sel = cl.info["selection"]
            if sel.degenerate_shell is not None:
                report.warnings.append(
                    f"{label} {node.geometry.label()} M={M}: cut through degenerate shell p={sel.degenerate_shell:.6e}")
            if mode == "fast":
                report.warnings.append(f"{label} {node.geometry.label()} M={M}: fast operator mode")
            res = solve_cluster(cl, params, controls)
            if not res.converged:
                report.warnings.append(f"{label} {node.geometry.label()} M={M}: solver reached max_time")
            emit(cl, res, "partial", captured=sel.captured, label=label)
            if prev is not None:
                change = _relative_change(res.record, prev)
                changes.append(change)
                status = "converged" if change < obs_tol else "exhausted"
                if change < obs_tol and not keep_going:
                    break
            if M == full:
                status = "exact"
                break
            prev = res.record
        if len(ms) == 1 and status != "exact":
            status = "fixed"
        if not res.converged:
            status = "limits"
        if len(changes) >= 3 and changes[-1] > changes[-2] > changes[-3]:
            report.warnings.append(f"{label} {node.geometry.label()}: observables oscillate with growing M")
        report.rows[-1]["status"] = status
        report.node_status[label] = status
        cl.info["children"] = (A, B)
        cache[key] = cl
        return cl

    root = solve(schedule.root, "root")
    report.spectrum_cluster = root
    return root, report


# -- checkpoints ---------------------------------------------------------------------
#
# Layout (little-endian):
#   b"CNRS"                magic
#   u32 version            CHECKPOINT_VERSION
#   u32 header_len         length of the UTF-8 JSON header that follows
#   header                 {"geometry", "mode", "provenance", "m", "pairs", "arrays": [names]}
#   for each named array:  u64 rows, u64 cols, rows*cols complex128 (row-major)

CHECKPOINT_MAGIC = b"CNRS"
CHECKPOINT_VERSION = 1


def _cluster_arrays(cluster: Cluster):
    ops = cluster.ops
    for kind in ("b", "n", "n2"):
        for j in ops.sites:
            yield f"{kind}:{j}", getattr(ops, kind)[j]
    for kind in ("hop", "dens"):
        for (j, l), m in sorted(getattr(ops, kind).items()):
            yield f"{kind}:{j},{l}", m
    if cluster.rho is not None:
        yield "rho", cluster.rho.matrix


def save_cluster(path, cluster: Cluster) -> None:
    g = cluster.geometry
    arrays = list(_cluster_arrays(cluster))
    header = {
        "geometry": [g.Lx, g.Ly, g.periodic_x, g.periodic_y, [list(b) for b in g.bonds]],
        "mode": cluster.mode, "provenance": cluster.provenance, "m": cluster.m, "dim": cluster.dim,
        "pairs": None if cluster.pairs is None else cluster.pairs.tolist(),
        "arrays": [name for name, _ in arrays],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for _, m in arrays:
            a = np.ascontiguousarray(to_dense(m), dtype="<c16")
            fh.write(struct.pack("<QQ", *a.shape))
            fh.write(a.tobytes())


def load_cluster(path) -> Cluster:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a cluster checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        arrays = {}
        for name in header["arrays"]:
            rows, cols = struct.unpack("<QQ", fh.read(16))
            buf = fh.read(16 * rows * cols)
            arrays[name] = np.frombuffer(buf, dtype="<c16").reshape(rows, cols).astype(complex)
    Lx, Ly, px, py, bonds = header["geometry"]
    geom = Geometry(Lx, Ly, px, py, tuple(tuple(b) for b in bonds))
    ops = OperatorSet(dim=header["dim"], b={}, n={}, n2={}, hop={}, dens={})
    rho = None
    for name, a in arrays.items():
        if name == "rho":
            rho = DensityMatrix.from_matrix(a, header["provenance"])
            continue
        kind, idx = name.split(":")
        if kind in ("hop", "dens"):
            j, l = (int(x) for x in idx.split(","))
            getattr(ops, kind)[(j, l)] = a
        else:
            getattr(ops, kind)[int(idx)] = a
    pairs = None if header["pairs"] is None else np.array(header["pairs"], dtype=int)
    return Cluster(geometry=geom, dim=header["dim"], ops=ops, rho=rho, provenance=header["provenance"],
                   m=header["m"], mode=header["mode"], pairs=pairs)
