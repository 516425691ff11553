"""Acceptance criteria 1 to 9, one PASS/FAIL line each.

Run alone with ``pytest -v -s tests/test_acceptance.py`` (or execute this
file). The lines are also repeated in the pytest terminal summary.
"""

import math

import numpy as np
import pytest

from cornerspace.cli import PRESET_SEED, preset_runs, run_experiment
from cornerspace.corner import (PipelineControls, converge_in_m, merge_clusters, select_top_m_pairs,
                                solve_cluster)
from cornerspace.lattice import build_geometry, plan_merge_schedule
from cornerspace.meanfield import gutzwiller_fixed_point
from cornerspace.model import ModelParams, assemble_hamiltonian, build_base_cluster, jump_operators
from cornerspace.numerics import to_dense
from cornerspace.observables import evaluate
from cornerspace.steadystate import evolve_to_steady_state, lindblad_rhs, steady_state_nullspace
from cornerspace.trajectories import TrajectoryConfig, observable_stats, run_ensemble

from conftest import acceptance_report, random_density

HARDCORE = ModelParams.hard_core(delta_omega=5.0, J=1.0, F=2.0)


def _check(number, checks):
    """`checks` is a list of (ok, text); report one line and assert all."""
    ok = all(c for c, _ in checks)
    acceptance_report(number, ok, "; ".join(t for _, t in checks))
    failed = [t for c, t in checks if not c]
    assert ok, "; ".join(failed)


def _within(value, target, tol):
    return abs(value - target) <= tol


def _lift(root):
    """Density matrix of a one-level merge mapped back to the Fock basis."""
    A, B = root.info["children"]
    cols = np.array([np.kron(A.eig.vectors[:, r], B.eig.vectors[:, rp]) for r, rp in root.pairs]).T
    return cols @ root.rho.matrix @ cols.conj().T


# 1 -------------------------------------------------------------------------------


def test_criterion_1_full_m_exactness():
    schedule = plan_merge_schedule(build_geometry(2, 2), build_geometry(2, 1, False, False))
    root, report = converge_in_m(schedule, HARDCORE, [16])
    full = build_base_cluster(build_geometry(2, 2), HARDCORE)
    oracle = steady_state_nullspace(assemble_hamiltonian(full.ops, full.geometry, HARDCORE),
                                    jump_operators(full.ops, HARDCORE))
    drho = np.abs(_lift(root) - oracle.matrix).max()
    got, want = report.rows[-1]["record"], evaluate(full, oracle)
    checks = [(drho <= 1e-6, f"max|drho| = {drho:.2e} (<= 1e-6)")]
    for k in ("n", "re_b", "g2_nn"):
        d = abs(getattr(got, k) - getattr(want, k))
        checks.append((d <= 1e-6, f"{k} {getattr(got, k):.8f} vs {getattr(want, k):.8f}"))
    _check(1, checks)


# 2 -------------------------------------------------------------------------------

# exact full-space row: n, Re<b>, g2_nn with their quoted standard errors
TABLE1_EXACT = {"n": (0.0954, 1e-4), "re_b": (0.2764, 2e-4), "g2_nn": (1.0643, 3e-4)}


@pytest.mark.slow
def test_criterion_2_hardcore_4x4():
    schedule = plan_merge_schedule(build_geometry(4, 4), build_geometry(2, 2))
    controls = PipelineControls(
        trajectories=TrajectoryConfig(n_trajectories=128, master_seed=PRESET_SEED),
        g2_nn_estimator="product")
    _, report = converge_in_m(schedule, HARDCORE, [400, 800], controls=controls, sweep=True,
                              inner_m="max")
    at = {r["M"]: r for r in report.rows if r["node"] == "root"}
    direct, conv = at[400], at[800]
    d = direct["record"]
    checks = [(direct["solver"] == "direct", f"M=400 solver {direct['solver']}"),
              (_within(d.n, 0.09544, 0.001), f"M=400 n {d.n:.5f} (0.09544 +- 0.001)"),
              (_within(d.re_b, 0.2767, 0.001), f"Re<b> {d.re_b:.5f} (0.2767 +- 0.001)"),
              (_within(d.g2_nn, 1.06, 0.03), f"g2_nn {d.g2_nn:.4f} (1.06 +- 0.03)")]
    c = conv["record"]
    for k, (ref, ref_err) in TABLE1_EXACT.items():
        val, err = getattr(c, k), getattr(c, f"{k}_err")
        comb = math.hypot(err, ref_err)
        checks.append((abs(val - ref) <= 3 * comb,
                       f"M=800 {conv['solver']} {k} {val:.5f}({err:.1e}) vs exact {ref} "
                       f"({abs(val - ref) / comb:.1f} sigma)"))
    _check(2, checks)


# 3 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_full_space_cross_check():
    geom = build_geometry(3, 3)
    traj = TrajectoryConfig(n_trajectories=128, master_seed=PRESET_SEED)
    full = build_base_cluster(geom, HARDCORE)
    brute = solve_cluster(full, HARDCORE, PipelineControls(trajectories=traj), solver="mcwf").record
    schedule = plan_merge_schedule(geom, build_geometry(3, 1, False, False))
    _, report = converge_in_m(schedule, HARDCORE, [100, 200, 300, 400],
                              controls=PipelineControls(trajectories=traj))
    corner = report.rows[-1]
    rec = corner["record"]
    checks = [(report.node_status["root"] == "converged",
               f"corner converged at M={corner['M']} ({report.node_status['root']})")]
    for k in ("n", "g2_nn"):
        b, be = getattr(brute, k), getattr(brute, f"{k}_err")
        v, ve = getattr(rec, k), getattr(rec, f"{k}_err") or 0.0
        comb = math.hypot(be, ve)
        rel = abs(v - b) / abs(b)
        checks.append((abs(v - b) <= 3 * comb and rel <= 0.01,
                       f"{k} corner {v:.5f} vs full {b:.5f}({be:.1e}): "
                       f"{abs(v - b) / comb:.1f} sigma, {100 * rel:.2f}%"))
    _check(3, checks)


# 4 -------------------------------------------------------------------------------


def _soft(U, J, N_max):
    return ModelParams(delta_omega=5.0, U=U, J=J, F=2.0, N_max=N_max)


def test_criterion_4_mean_field():
    rows = [("hard-core", HARDCORE, 0.0953, None),
            ("U=20 J=1", _soft(20.0, 1.0, 3), 0.125, 0.836),
            ("U=20 J=3", _soft(20.0, 3.0, 3), 0.0768, 0.8879),
            ("U=10", _soft(10.0, 1.0, 5), 0.9587, 0.6088),
            ("U=1", _soft(1.0, 1.0, 4), 0.1156, 1.265)]
    checks = []
    for label, params, n, g2 in rows:
        sol = gutzwiller_fixed_point(params)
        rel_n = abs(sol.n - n) / n
        checks.append((sol.converged and rel_n <= 0.01, f"{label} n {sol.n:.4f}/{n}"))
        if g2 is not None:
            rel_g = abs(sol.g2 - g2) / g2
            checks.append((rel_g <= 0.01, f"g2 {sol.g2:.4f}/{g2}"))
    _check(4, checks)


# 5 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_softcore_convergence():
    (_, cfg), = preset_runs("table2", m_max=800)
    cfg.m_schedule = [200, 400, 800]
    out = run_experiment(cfg, write=False)
    rows = {r["M"]: r for r in out.rows if (r["Lx"], r["Ly"]) == (4, 4)}
    top = rows[800]
    checks = [(top["solver"] == "mcwf", f"M=800 solver {top['solver']}"),
              (_within(top["n"], 0.101, 0.004), f"n {top['n']:.4f} (0.101 +- 0.004)"),
              (_within(top["re_b"], 0.190, 0.003), f"Re<b> {top['re_b']:.4f} (0.190 +- 0.003)"),
              (1.4 <= top["g2_nn"] <= 1.7, f"g2_nn {top['g2_nn']:.3f} in [1.4, 1.7]")]
    for k in ("n", "re_b", "g2", "g2_nn"):
        v = [rows[m][k] for m in (200, 400, 800)]
        d1, d2 = abs(v[1] - v[0]), abs(v[2] - v[1])
        checks.append((d2 < d1, f"{k} " + " -> ".join(f"{x:.4f}" for x in v)
                       + f" (steps {d1:.1e}, {d2:.1e})"))
    _check(5, checks)


# 6 -------------------------------------------------------------------------------

_B = np.array([[0, 1], [0, 0]], dtype=complex)
_N = np.diag([0, 1]).astype(complex)


def _decay(n_traj, seed):
    cfg = TrajectoryConfig(n_trajectories=n_traj, t_relax=0.5, t_sample=4.5, sample_stride=0.5,
                           master_seed=seed)
    return run_ensemble(np.zeros((2, 2)), [_B], np.array([0, 1], dtype=complex), cfg, {"n": _N})


DECAY_SEED = 7


def test_criterion_6_trajectory_statistics():
    ens = _decay(10_000, DECAY_SEED)
    pop = ens.samples[:, :, 0].real
    worst = 0.0
    for k in range(1, 11):
        se = pop[:, k].std(ddof=1) / math.sqrt(pop.shape[0])
        worst = max(worst, abs(pop[:, k].mean() - math.exp(-ens.times[k])) / se)
    sizes = [100, 400, 1600]
    errs = [observable_stats(_decay(n, DECAY_SEED + 1))["n"].err for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
    _check(6, [(worst <= 3, f"decay at 10 times, worst {worst:.2f} SE"),
               (abs(slope + 0.5) <= 0.1, f"error slope {slope:.3f} (-0.5)")])


# 7 -------------------------------------------------------------------------------


def test_criterion_7_invariants():
    rng = np.random.default_rng(PRESET_SEED)
    checks = []
    # trace and Hermiticity in the Fock basis
    soft = _soft(20.0, 3.0, 2)
    fock = build_base_cluster(build_geometry(2, 2), soft)
    H = assemble_hamiltonian(fock.ops, fock.geometry, soft)
    jumps = jump_operators(fock.ops, soft)
    worst_tr = worst_h = 0.0
    for _ in range(5):
        out = lindblad_rhs(random_density(rng, fock.dim), H, jumps)
        worst_tr = max(worst_tr, abs(np.trace(out)))
        worst_h = max(worst_h, np.abs(out - out.conj().T).max())
    # ... and in a corner basis
    schedule = plan_merge_schedule(build_geometry(4, 2), build_geometry(2, 2))
    leaf = build_base_cluster(schedule.root.children[0].geometry, HARDCORE,
                              tracked=schedule.root.children[0].tracked)
    solve_cluster(leaf, HARDCORE)
    captures = []
    positive = [np.linalg.eigvalsh(leaf.rho.matrix).min()]
    for M in (8, 16, 32, 64, 128):
        cl = merge_clusters(leaf, leaf, schedule.root, M)
        captures.append(cl.info["selection"].captured)
        if M in (16, 64):
            Hc = assemble_hamiltonian(cl.ops, cl.geometry, HARDCORE)
            out = lindblad_rhs(random_density(rng, M), Hc, jump_operators(cl.ops, HARDCORE))
            worst_tr = max(worst_tr, abs(np.trace(out)))
            worst_h = max(worst_h, np.abs(out - out.conj().T).max())
            solve_cluster(cl, HARDCORE)
            positive.append(np.linalg.eigvalsh(cl.rho.matrix).min())
    checks.append((worst_tr < 1e-12, f"|Tr rhs| {worst_tr:.1e}"))
    checks.append((worst_h < 1e-12, f"rhs Hermiticity {worst_h:.1e}"))
    checks.append((min(positive) > -1e-10, f"min eigenvalue after solves {min(positive):.1e}"))
    # pair selection against a brute-force sort
    mismatches = 0
    for _ in range(1000):
        na, nb = rng.integers(1, 40, size=2)
        pa = np.sort(rng.random(na))[::-1]
        pb = np.sort(rng.random(nb))[::-1]
        if rng.random() < 0.3:
            pa, pb = np.round(pa * 3) + 1, np.round(pb * 3) + 1
            pa, pb = np.sort(pa)[::-1], np.sort(pb)[::-1]
        pa, pb = pa / pa.sum(), pb / pb.sum()
        M = int(rng.integers(1, na * nb + 1))
        sel = select_top_m_pairs(pa, pb, M)
        brute = sorted((-(a * b), i, j) for i, a in enumerate(pa) for j, b in enumerate(pb))[:M]
        mismatches += list(zip(sel.r.tolist(), sel.rp.tolist())) != [(i, j) for _, i, j in brute]
    checks.append((mismatches == 0, f"top-M selection vs sort: {mismatches}/1000 mismatches"))
    mono = all(b >= a for a, b in zip(captures, captures[1:]))
    checks.append((mono, "capture " + ", ".join(f"{c:.4f}" for c in captures)))
    _check(7, checks)


# 8 -------------------------------------------------------------------------------


def test_criterion_8_linear_cavity():
    params = ModelParams(delta_omega=5.0, U=0.0, J=0.0, F=2.0, N_max=12)
    cav = build_base_cluster(build_geometry(1, 1), params)
    H = to_dense(assemble_hamiltonian(cav.ops, cav.geometry, params))
    null = steady_state_nullspace(H, [to_dense(c) for c in jump_operators(cav.ops, params)])
    rep = evolve_to_steady_state(cav, params)
    checks = []
    for label, rho in (("nullspace", null), ("integration", rep.rho)):
        rec = evaluate(cav, rho)
        checks.append((_within(rec.n, 0.15841584, 1e-6) and _within(rec.re_b, 0.39603960, 1e-6),
                       f"{label} n {rec.n:.8f} Re<b> {rec.re_b:.8f}"))
    _check(8, checks)


# 9 -------------------------------------------------------------------------------


def _plateaus(p, spread=0.1, min_len=3):
    """Maximal runs of consecutive ranks whose relative spread stays below `spread`."""
    runs, start = [], 0
    for i in range(1, len(p) + 1):
        if i == len(p) or (p[start] - p[i]) / p[start] >= spread:
            if i - start >= min_len:
                runs.append((start + 1, i))
            start = i
    return runs


@pytest.mark.slow
def test_criterion_9_spectrum_shape():
    runs = dict(preset_runs("fig3", rows=["6x3-hardcore"]))
    out = run_experiment(runs["6x3-hardcore"], write=False)
    p = np.array([row[1] for row in out.spectrum])
    decades = math.log10(p[0] / p[-1])
    plateaus = _plateaus(p)
    _check(9, [(decades >= 4, f"{len(p)} ranks spanning {decades:.1f} decades"),
               (p[0] == p.max() and p[0] > p[1], f"p_1 = {p[0]:.3f} > p_2 = {p[1]:.3f}"),
               (len(plateaus) >= 2, f"plateaus (ranks) {plateaus[:6]}")])


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
