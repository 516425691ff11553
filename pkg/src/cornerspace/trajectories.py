"""Monte Carlo wavefunction (quantum-jump) sampling of the master equation.

Trajectories evolve under ``H_eff = H - (i/2) sum_j C_j^dag C_j``. A jump
happens when the squared norm falls below a uniform threshold ``r``; the jump
instant is located by bisection down to ``jump_time_tol``. Two propagators
are available:

``"expm"``
    exact step propagators ``exp(-i H_eff dt / 2^k)`` precomputed once; the
    bisection walks the dyadic levels (one matvec per level). Trajectories
    are advanced in fixed-size batches so one step is a single matmul.
``"rk4"``
    classical RK4 steps; bisection re-integrates sub-steps from the start
    of the step. One trajectory at a time; meant for small systems.

Every trajectory ``i`` draws from its own Philox stream keyed by
``(master_seed, i)``, so results do not depend on scheduling.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .numerics import dagger, rk4_step, to_dense, hermitian_eig
from .steadystate import DensityMatrix

__all__ = [
    "TrajectoryConfig",
    "TrajectoryEnsemble",
    "Estimate",
    "NormGrowthError",
    "trajectory_rng",
    "run_trajectory",
    "run_ensemble",
    "estimate_density_matrix",
    "observable_stats",
    "jackknife_ratio",
    "worker_count",
]

log = logging.getLogger(__name__)

NORM_GROWTH_TOL = 1e-8
THREADS_ENV = "CORNERSPACE_THREADS"


class NormGrowthError(FloatingPointError):
    """The no-jump evolution increased the norm: H_eff is not dissipative."""


@dataclass(frozen=True)
class TrajectoryConfig:
    n_trajectories: int = 100
    dt: Optional[float] = None
    t_relax: float = 30.0
    t_sample: float = 100.0
    sample_stride: float = 0.5
    master_seed: int = 0
    jump_time_tol: float = 1e-4
    integrator: str = "expm"
    batch_size: int = 64
    record_snapshots: bool = True

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        for name in ("t_relax", "t_sample", "sample_stride", "jump_time_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_sample < self.sample_stride:
            raise ValueError("t_sample must be at least one sample_stride")
        if self.integrator not in ("expm", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")

    @property
    def t_total(self) -> float:
        return self.t_relax + self.t_sample


@dataclass
class Estimate:
    mean: float
    err: float


@dataclass
class TrajectoryEnsemble:
    """Samples of every trajectory at the common sample times.

    ``samples[i, k, o]`` is observable ``o`` of trajectory ``i`` at
    ``times[k]`` on the normalized state. ``rho_sum`` accumulates
    ``|psi><psi|`` over the steady window (``times >= t_relax``).
    """

    times: np.ndarray
    names: list
    samples: np.ndarray
    t_relax: float
    seeds: list
    jump_times: list = field(default_factory=list)
    rho_sum: Optional[np.ndarray] = None
    n_snapshots: int = 0

    @property
    def n_trajectories(self) -> int:
        return self.samples.shape[0]

    @property
    def steady(self) -> np.ndarray:
        return self.times >= self.t_relax - 1e-9

    def trajectory_means(self) -> np.ndarray:
        """Per-trajectory averages over the steady window, shape (n_traj, n_obs)."""
        return self.samples[:, self.steady, :].mean(axis=1)

    def column(self, name: str) -> int:
        return self.names.index(name)


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([master_seed, index])))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _as_sampler(psi0, dim: int) -> Callable:
    if callable(psi0):
        return psi0
    if isinstance(psi0, DensityMatrix) or (hasattr(psi0, "ndim") and np.ndim(psi0) == 2):
        mat = getattr(psi0, "matrix", psi0)
        diag = np.diag(mat)
        if np.allclose(mat, np.diag(diag), atol=1e-14):
            p = np.clip(diag.real, 0, None)
            vecs = None
        else:
            eig = hermitian_eig(mat)
            p = np.clip(eig.values, 0, None)
            vecs = eig.vectors
        p = p / p.sum()
        cdf = np.cumsum(p)

        def sample(rng):
            r = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), dim - 1)
            while p[r] == 0:
                r -= 1
            if vecs is None:
                v = np.zeros(dim, dtype=complex)
                v[r] = 1.0
                return v
            return vecs[:, r].copy()
        return sample
    vec = np.asarray(psi0, dtype=complex)
    nrm = np.linalg.norm(vec)
    if abs(nrm - 1) > 1e-8:
        raise ValueError(f"initial state must be normalized, norm = {nrm}")
    return lambda rng: vec.copy()


def _effective_hamiltonian(H, jumps) -> np.ndarray:
    heff = to_dense(H).astype(complex)
    for c in jumps:
        heff = heff - 0.5j * to_dense(dagger(c) @ c)
    return heff


def _choose_jump(psi, jumps, rng):
    outs = [c @ psi for c in jumps]
    w = np.array([np.vdot(o, o).real for o in outs])
    tot = w.sum()
    if not tot > 0:
        raise FloatingPointError("no jump channel has non-zero weight")
    j = min(int(np.searchsorted(np.cumsum(w), rng.random() * tot, side="right")), len(w) - 1)
    while w[j] == 0:
        j -= 1
    return outs[j] / math.sqrt(w[j]), j


def _grid(config: TrajectoryConfig, dt_default: float):
    stride = config.sample_stride
    dt = config.dt if config.dt is not None else dt_default
    per_sample = max(1, math.ceil(stride / dt - 1e-9))
    dt = stride / per_sample
    n_samples = int(round(config.t_total / stride))
    times = np.arange(n_samples + 1) * stride
    return dt, per_sample, times


class _Propagators:
    def __init__(self, heff: np.ndarray, dt: float, tol: float):
        self.levels = max(0, math.ceil(math.log2(dt / tol))) if dt > tol else 0
        self.dt = dt
        finest = la.expm(-1j * heff * (dt / 2 ** self.levels))
        mats = [finest]
        for _ in range(self.levels):
            mats.append(mats[-1] @ mats[-1])
        self.u = mats[::-1]  # u[k] advances by dt / 2**k


def _norm2(x):
    return float(np.vdot(x, x).real)


class _Runner:
    """Shared read-only data for one ensemble."""

    def __init__(self, H, jumps, config: TrajectoryConfig, observables: dict, dt_default: float):
        self.jumps = [c if sp.issparse(c) else np.asarray(c, dtype=complex) for c in jumps]
        self.heff = _effective_hamiltonian(H, jumps)
        self.dim = self.heff.shape[0]
        self.config = config
        self.names = list(observables)
        self.obs = [to_dense(observables[k]).astype(complex) for k in self.names]
        self.dt, self.per_sample, self.times = _grid(config, dt_default)
        self.n_steps = self.per_sample * (len(self.times) - 1)
        self.steady = self.times >= config.t_relax - 1e-9
        self.prop = _Propagators(self.heff, self.dt, config.jump_time_tol) if config.integrator == "expm" else None

    def measure(self, psi):
        # psi: (dim, B) normalized columns -> (B, n_obs)
        out = np.empty((psi.shape[1], len(self.obs)), dtype=complex)
        for o, op in enumerate(self.obs):
            out[:, o] = np.sum(psi.conj() * (op @ psi), axis=0)
        return out

    # -- exact dyadic propagation -------------------------------------------------
    def _advance(self, psi, r, k, t0, rng, jumps_log):
        cand = self.prop.u[k] @ psi
        nc = _norm2(cand)
        if nc > _norm2(psi) * (1 + NORM_GROWTH_TOL) + 1e-300:
            raise NormGrowthError("norm increased during no-jump evolution")
        if nc >= r:
            return cand, r
        half = self.dt / 2 ** (k + 1)
        if k == self.prop.levels:
            psi, _ = _choose_jump(cand, self.jumps, rng)
            jumps_log.append(t0 + self.dt / 2 ** k)
            return psi, 1.0 - rng.random()
        psi, r = self._advance(psi, r, k + 1, t0, rng, jumps_log)
        return self._advance(psi, r, k + 1, t0 + half, rng, jumps_log)

    def run_batch(self, indices: Sequence[int], sampler: Callable):
        cfg = self.config
        rngs = [trajectory_rng(cfg.master_seed, i) for i in indices]
        B = len(indices)
        psi = np.empty((self.dim, B), dtype=complex)
        for c, rng in enumerate(rngs):
            psi[:, c] = sampler(rng)
            psi[:, c] /= np.linalg.norm(psi[:, c])
        r = np.array([1.0 - rng.random() for rng in rngs])
        logs = [[] for _ in range(B)]
        samples = np.empty((B, len(self.times), len(self.obs)), dtype=complex)
        rho_sum = np.zeros((self.dim, self.dim), dtype=complex) if cfg.record_snapshots else None
        n_snap = 0

        def record(k):
            nonlocal n_snap
            normed = psi / np.linalg.norm(psi, axis=0)
            samples[:, k, :] = self.measure(normed)
            if rho_sum is not None and self.steady[k]:
                rho_sum[...] += normed @ dagger(normed)
                n_snap += B

        record(0)
        u0 = self.prop.u[0]
        norms = np.sum(np.abs(psi) ** 2, axis=0)
        for step in range(1, self.n_steps + 1):
            t0 = (step - 1) * self.dt
            new = u0 @ psi
            nn = np.sum(np.abs(new) ** 2, axis=0)
            if np.any(nn > norms * (1 + NORM_GROWTH_TOL)):
                raise NormGrowthError("norm increased during no-jump evolution")
            if not np.all(np.isfinite(nn)):
                raise FloatingPointError("trajectory state became non-finite")
            for c in np.nonzero(nn < r)[0]:
                half = self.dt / 2
                if self.prop.levels == 0:
                    v, _ = _choose_jump(new[:, c], self.jumps, rngs[c])
                    logs[c].append(t0 + self.dt)
                    r[c] = 1.0 - rngs[c].random()
                else:
                    v, rc = self._advance(psi[:, c], r[c], 1, t0, rngs[c], logs[c])
                    v, rc = self._advance(v, rc, 1, t0 + half, rngs[c], logs[c])
                    r[c] = rc
                new[:, c] = v
                nn[c] = _norm2(v)
            psi = new
            norms = nn
            if step % self.per_sample == 0:
                record(step // self.per_sample)
        return samples, rho_sum, n_snap, logs

    # -- RK4 propagation, one trajectory -------------------------------------------
    def run_rk4(self, index: int, sampler: Callable):
        cfg = self.config
        rng = trajectory_rng(cfg.master_seed, index)
        heff = self.heff

        def f(_t, y):
            return -1j * (heff @ y)

        psi = sampler(rng).astype(complex)
        psi /= np.linalg.norm(psi)
        r = 1.0 - rng.random()
        log_ = []
        samples = np.empty((1, len(self.times), len(self.obs)), dtype=complex)
        rho_sum = np.zeros((self.dim, self.dim), dtype=complex) if cfg.record_snapshots else None
        n_snap = 0

        def record(k, psi):
            nonlocal n_snap
            v = psi / np.linalg.norm(psi)
            samples[0, k, :] = self.measure(v[:, None])[0]
            if rho_sum is not None and self.steady[k]:
                rho_sum[...] += np.outer(v, v.conj())
                n_snap += 1

        def advance(psi, r, t0, h):
            new = rk4_step(f, psi, t0, h)
            nn = _norm2(new)
            if nn > _norm2(psi) * (1 + NORM_GROWTH_TOL):
                raise NormGrowthError("norm increased during no-jump evolution")
            if nn >= r:
                return new, r
            lo, hi = 0.0, h
            while hi - lo > cfg.jump_time_tol:
                mid = 0.5 * (lo + hi)
                if _norm2(rk4_step(f, psi, t0, mid)) >= r:
                    lo = mid
                else:
                    hi = mid
            at = rk4_step(f, psi, t0, hi)
            jumped, _ = _choose_jump(at, self.jumps, rng)
            log_.append(t0 + hi)
            r = 1.0 - rng.random()
            if h - hi > 1e-15:
                return advance(jumped, r, t0 + hi, h - hi)
            return jumped, r

        record(0, psi)
        for step in range(1, self.n_steps + 1):
            psi, r = advance(psi, r, (step - 1) * self.dt, self.dt)
            if not np.all(np.isfinite(psi)):
                raise FloatingPointError("trajectory state became non-finite")
            if step % self.per_sample == 0:
                record(step // self.per_sample, psi)
        return samples, rho_sum, n_snap, [log_]


def _default_dt(H, jumps, config: TrajectoryConfig) -> float:
    if config.integrator == "expm":
        return min(0.05, config.sample_stride)
    heff = _effective_hamiltonian(H, jumps)
    scale = float(np.abs(heff).sum(axis=1).max()) or 1.0
    return min(0.2 / scale, config.sample_stride)


def run_ensemble(H, jumps, psi0, config: TrajectoryConfig, observables: dict,
                 workers: Optional[int] = None) -> TrajectoryEnsemble:
    """Sample ``config.n_trajectories`` trajectories.

    Parameters
    ----------
    H, jumps
        Hamiltonian and jump operators (dense or sparse).
    psi0
        Initial state vector, a density matrix (each trajectory starts from
        one of its eigenvectors drawn with its probability) or a callable
        ``rng -> vector``.
    observables
        ``name -> operator``; values are recorded on the normalized state at
        every sample time.
    workers
        Threads for batches (default: ``$CORNERSPACE_THREADS`` or 1).
    """
    runner = _Runner(H, jumps, config, observables, _default_dt(H, jumps, config))
    sampler = _as_sampler(psi0, runner.dim)
    n = config.n_trajectories
    if config.integrator == "expm":
        chunks = [list(range(s, min(n, s + config.batch_size))) for s in range(0, n, config.batch_size)]
        job = lambda idx: runner.run_batch(idx, sampler)
    else:
        chunks = [[i] for i in range(n)]
        job = lambda idx: runner.run_rk4(idx[0], sampler)
    workers = workers or worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, chunks))
    else:
        results = [job(c) for c in chunks]
    samples = np.concatenate([r[0] for r in results], axis=0)
    rho_sum = None
    if config.record_snapshots:
        rho_sum = sum(r[1] for r in results)
    n_snap = sum(r[2] for r in results)
    logs = [np.array(l) for r in results for l in r[3]]
    return TrajectoryEnsemble(times=runner.times, names=runner.names, samples=samples,
                              t_relax=config.t_relax, seeds=[(config.master_seed, i) for i in range(n)],
                              jump_times=logs, rho_sum=rho_sum, n_snapshots=n_snap)


def run_trajectory(H, jumps, psi0, config: TrajectoryConfig, seed: int,
                   observables: Optional[dict] = None) -> TrajectoryEnsemble:
    """A single trajectory using stream ``(config.master_seed, seed)``."""
    observables = observables or {}
    runner = _Runner(H, jumps, config, observables, _default_dt(H, jumps, config))
    sampler = _as_sampler(psi0, runner.dim)
    if config.integrator == "expm":
        samples, rho_sum, n_snap, logs = runner.run_batch([seed], sampler)
    else:
        samples, rho_sum, n_snap, logs = runner.run_rk4(seed, sampler)
    return TrajectoryEnsemble(times=runner.times, names=runner.names, samples=samples,
                              t_relax=config.t_relax, seeds=[(config.master_seed, seed)],
                              jump_times=[np.array(l) for l in logs], rho_sum=rho_sum,
                              n_snapshots=n_snap)


def estimate_density_matrix(ensemble: TrajectoryEnsemble, basis: str = "corner") -> DensityMatrix:
    """Average of ``|psi><psi|`` over trajectories and steady-window samples."""
    if ensemble.rho_sum is None or ensemble.n_snapshots == 0:
        raise ValueError("ensemble holds no state snapshots")
    return DensityMatrix.from_matrix(ensemble.rho_sum / ensemble.n_snapshots, basis)


def jackknife_ratio(num: np.ndarray, den: np.ndarray, power: int = 2) -> Estimate:
    """``mean(num) / mean(den)**power`` with a leave-one-out error estimate."""
    n = len(num)
    est = num.mean() / den.mean() ** power
    if n < 2:
        return Estimate(float(est), float("nan"))
    loo_num = (num.sum() - num) / (n - 1)
    loo_den = (den.sum() - den) / (n - 1)
    loo = loo_num / loo_den ** power
    err = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return Estimate(float(est), float(err))


def observable_stats(ensemble: TrajectoryEnsemble) -> dict:
    """Means and standard errors, with trajectories as the statistical unit.

    Each observable yields ``<name>`` (real part), ``<name>_re`` and
    ``<name>_im``. When
    the ensemble recorded ``n`` together with ``n2``, ``nn`` or ``nn_product``,
    the ratios ``g2``, ``g2_nn`` and ``g2_nn_product`` are added (jackknife
    errors).
    """
    n_traj = ensemble.n_trajectories
    if n_traj < 2:
        raise ValueError("standard errors need at least two trajectories")
    means = ensemble.trajectory_means()
    out = {}
    for o, name in enumerate(ensemble.names):
        col = means[:, o]
        for key, x in ((name, col.real), (f"{name}_re", col.real), (f"{name}_im", col.imag)):
            out[key] = Estimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(n_traj)))
    if "n" in ensemble.names:
        dens = means[:, ensemble.column("n")].real
        if dens.mean() > 1e-14:
            for src, dst in (("n2", "g2"), ("nn", "g2_nn"), ("nn_product", "g2_nn_product")):
                if src in ensemble.names:
                    out[dst] = jackknife_ratio(means[:, ensemble.column(src)].real, dens)
    return out
