"""Acceptance criteria 1-11 at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL ...`` line to the terminal.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from hsclusters.cli import run as cli_run
from hsclusters.clusters import (
    IBFOverlapError,
    all_root_sizes,
    backward_cluster,
    construct_ibf,
    dynamical_clusters,
    far_spectators,
    forward_cluster,
    ghost_conflicts,
    ibf_round_trip,
    random_ibf_variables,
)
from hsclusters.dynamics import evolve, evolve_backward
from hsclusters.ensemble import EnsembleConfig, sample_equilibrium
from hsclusters.harness import cluster_size_experiment, kinetic_mean_free_time, percolation_experiment
from hsclusters.theory import count_trees, tree_weight, truncation_for, wild_cluster_pmf, wild_mean_size
from hsclusters.torus import collision_time, minimal_image
from oracles import random_prediction_instance, rescan_backward_cluster, rescan_forward_cluster, stepping_collision_time
from test_clusters import overlapping_vars, random_log
from test_theory import time_ordered_weight


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def tau_kinetic(n, beta=1.0):
    return kinetic_mean_free_time(n, n**-0.5, beta)


def test_criterion_01_conservation(report):
    s = sample_equilibrium(EnsembleConfig(500, 1.0, 1))
    e0, p0 = s.kinetic_energy(), s.momentum()
    start = time.perf_counter()
    out, log = evolve(s, math.inf, max_events=100_000)
    wall = time.perf_counter() - start
    de = abs(out.kinetic_energy() - e0) / e0
    dp = float(np.abs(out.momentum() - p0).max())
    ok = len(log) == 100_000 and de < 1e-9 and dp < 1e-9 and wall < 60
    report(1, ok, f"events={len(log)} dE/E={de:.2e} |dP|={dp:.2e} wall={wall:.1f}s")


def test_criterion_02_reversibility(report):
    worst_x = worst_v = 0.0
    float_fail = 0
    for seed in range(100):
        s = sample_equilibrium(EnsembleConfig(10, 1.0, seed))
        _, probe = evolve(s, math.inf, max_events=21, precision=256)
        t_mid = 0.5 * (probe.times[19] + probe.times[20])
        fwd, log = evolve(s, t_mid, precision=256)
        back, _ = evolve_backward(fwd, t_mid)
        b = back.to_float()
        worst_x = max(worst_x, float(np.abs(minimal_image(b.positions, s.positions)).max()))
        worst_v = max(worst_v, float(np.abs(b.velocities - s.velocities).max()))
        # float64 diagnostic only: chaotic error growth makes it fail
        ff, _ = evolve(s, t_mid)
        fb, _ = evolve_backward(ff, t_mid)
        if np.abs(minimal_image(fb.positions, s.positions)).max() > 1e-5:
            float_fail += 1
    ok = worst_x < 1e-5 and worst_v < 1e-6
    report(2, ok, f"precise(256 bit) max|dx|={worst_x:.1e} max|dv|={worst_v:.1e}; "
                  f"float64 diagnostic: {float_fail}/100 seeds exceed 1e-5")


def test_criterion_03_collision_time_oracle(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    wraps = mismatched = 0
    for k in range(10_000):
        x, v, eps = random_prediction_instance(rng, aimed=bool(k % 2))
        ours = collision_time(x, v, eps)
        ref = stepping_collision_time(x, v, eps)
        if ref < 0:
            mismatched += ours is not None
            continue
        if ours is None:
            mismatched += 1
            continue
        worst = max(worst, abs(ours - ref))
        wraps += bool(np.any(np.abs(x + v * ref) > math.pi))
    ok = mismatched == 0 and worst < 1e-8 and wraps >= 100
    report(3, ok, f"instances=10000 max|ds|={worst:.1e} hit/miss mismatches={mismatched} wrap-arounds={wraps}")


def test_criterion_04_cluster_extraction(report):
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(1000):
        log = random_log(rng)
        root = int(rng.integers(log.n_particles))
        t = float(rng.uniform(0, log.duration))
        b = backward_cluster(log, root, t)
        f = forward_cluster(log, root, t)
        bad += dict(zip(b.members, b.creation_times)) != rescan_backward_cluster(log.times, log.pairs, root, t)
        bad += dict(zip(f.members, f.creation_times)) != rescan_forward_cluster(log.times, log.pairs, root, t)
        bad += not all(1 <= k <= r for tree in (b, f) for r, k in enumerate(tree.parents, start=1))
    violations = 0
    for j in range(5):
        s = sample_equilibrium(EnsembleConfig(200, 1.0, 40 + j))
        _, log = evolve(s, 70.0)
        for t in (17.5, 35.0, 70.0):
            part = dynamical_clusters(log, t)
            for root in range(200):
                tree = backward_cluster(log, root, t)
                violations += not set(tree.members) | {root} <= part.block_of(root)
    ok = bad == 0 and violations == 0
    report(4, ok, f"oracle/parent mismatches on 1000 logs={bad}; containment violations (5x3x200)={violations}")


T_VALUES = [0.1, 0.5, 1.0, 2.0, 5.0]


def sum_and_mean_errors(t, K):
    pmf = [wild_cluster_pmf(k, t) for k in range(K + 1)]
    return abs(math.fsum(pmf) - 1), abs(math.fsum(k * p for k, p in enumerate(pmf)) - math.expm1(t))


def test_criterion_05_theory_identities(report):
    errs = []
    for t in T_VALUES:
        stated = math.ceil(50 * (1 + t))
        # the stated truncation is used where it suffices; t in {2, 5} need a longer sum
        K = stated if t < 2 else truncation_for(t, 1e-18)
        s_err, m_err = sum_and_mean_errors(t, K)
        errs.append((s_err < 1e-12 and m_err < 1e-8, t, K, s_err, m_err))
    counts = all(count_trees(k) == math.factorial(k) for k in range(9))
    weights = max(abs(math.factorial(k) * tree_weight((1,) * k, t) - wild_cluster_pmf(k, t))
                  for k in range(9) for t in T_VALUES)
    quad = max(abs(time_ordered_weight(k, t) - tree_weight((1,) * k, t)) for k in range(4) for t in (0.5, 1.0, 2.0))
    assert all(abs(wild_mean_size(t) - math.expm1(t)) < 1e-12 for t in T_VALUES)
    ok = all(e[0] for e in errs) and counts and weights < 1e-12 and quad < 1e-6
    worst_sum = max(e[3] for e in errs)
    worst_mean = max(e[4] for e in errs)
    report(5, ok, f"max|sum-1|={worst_sum:.1e} max|mean-(e^t-1)|={worst_mean:.1e} "
                  f"(K stated for t<2, K={errs[3][2]},{errs[4][2]} for t=2,5); count_trees=k! {counts}; "
                  f"k!*weight err={weights:.1e}; quadrature err={quad:.1e}; "
                  "stated K at t=2,5 reported as xfail below")


@pytest.mark.xfail(strict=True, reason="K=ceil(50(1+t)) leaves out 2.9e-10 (t=2) and 0.131 (t=5) of the mass")
@pytest.mark.parametrize("t", [2.0, 5.0])
def test_criterion_05_identities_at_stated_truncation(t, capsys):
    s_err, m_err = sum_and_mean_errors(t, math.ceil(50 * (1 + t)))
    with capsys.disabled():
        print(f"\ncriterion 5 (stated K, t={t}): FAIL  |sum-1|={s_err:.1e} |mean-(e^t-1)|={m_err:.1e}")
    assert s_err < 1e-12 and m_err < 1e-8


def test_criterion_06_ibf_round_trip(report):
    rng = np.random.default_rng(6)
    eps = 0.1
    done = skipped = failed = 0
    worst = 0.0
    while done < 100:
        n = int(rng.integers(0, 5))
        vars = random_ibf_variables(rng, n, eps, t=2.0)
        res = construct_ibf(vars, eps)
        if ghost_conflicts(res, vars):
            skipped += 1
            continue
        rt = ibf_round_trip(vars, eps, far_spectators(rng, res, vars, 4))
        failed += not (rt.ok and rt.tree.parents == vars.gamma)
        worst = max(worst, rt.max_time_error)
        done += 1
    rejected = 0
    for r_bad in (2, 3, 4):
        try:
            construct_ibf(overlapping_vars(np.random.default_rng(100 + r_bad), r_bad), eps)
        except IBFOverlapError as err:
            rejected += err.r == r_bad
    ok = failed == 0 and worst < 1e-8 and rejected == 3
    report(6, ok, f"round trips={done} failures={failed} max|dt|={worst:.1e} "
                  f"(ambiguous draws skipped={skipped}); overlap rejected with right index {rejected}/3")


def _equilibrium_sample(seed):
    t_end = 2 * tau_kinetic(500)
    out, _ = evolve(sample_equilibrium(EnsembleConfig(500, 1.0, seed)), t_end)
    return out.velocities


def test_criterion_07_equilibrium_stationarity(report):
    from hsclusters.harness import map_trajectories

    vels = map_trajectories(_equilibrium_sample, [(7000 + j,) for j in range(200)], workers=4)
    ke = np.array([0.5 * np.sum(v**2) / 500 for v in vels])
    z_ke = (ke.mean() - 1.5) / (ke.std(ddof=1) / math.sqrt(len(ke)))
    comp = np.concatenate([v.ravel() for v in vels])
    m4 = comp**4
    z_m4 = (m4.mean() - 3.0) / (m4.std(ddof=1) / math.sqrt(len(m4)))
    ks = stats.kstest(comp, "norm").pvalue
    ok = abs(z_ke) < 4 and abs(z_m4) < 4 and ks > 1e-3
    report(7, ok, f"<KE>/N={ke.mean():.4f} (z={z_ke:+.2f}); <v^4>={m4.mean():.4f} vs 3 (z={z_m4:+.2f}); KS p={ks:.3f}")


@pytest.fixture(scope="module")
def wild_run():
    tau = tau_kinetic(1000)
    grid = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.45, 2.0]
    start = time.perf_counter()
    ex = cluster_size_experiment(EnsembleConfig(1000, 1.0, 8), [g * tau for g in grid], 10_000,
                                 root_average=True, workers=4)
    return ex, time.perf_counter() - start


def tv_to_geometric(h):
    p = h.pmf()
    q = np.array([wild_cluster_pmf(k, h.t_hat) for k in range(len(p))])
    return 0.5 * (np.abs(p - q).sum() + max(0.0, 1 - math.fsum(q)))


def test_criterion_08_wild_sum_comparison(report, wild_run):
    ex, wall = wild_run
    rows = []
    worst = 0.0
    for h in ex.histograms:
        if 0 < h.t_hat <= 1.5:
            rel = h.mean / math.expm1(h.t_hat) - 1
            worst = max(worst, abs(rel))
            rows.append(f"t^={h.t_hat:.2f}:S={h.mean:.3f}/{math.expm1(h.t_hat):.3f}")
    at1 = min(ex.histograms, key=lambda h: abs(h.t_hat - 1))
    tv = tv_to_geometric(at1)
    ok = worst < 0.15 and tv < 0.1 and abs(at1.t_hat - 1) < 0.05
    report(8, ok, f"samples={ex.histograms[0].n_samples} trajectories={ex.n_trajectories} "
                  f"tau(measured)={1 / ex.rate:.2f}; max rel dev={worst:.3f}; TV(t^={at1.t_hat:.3f})={tv:.3f}; "
                  f"wall={wall:.0f}s; " + " ".join(rows))


def test_criterion_09_monotone_growth(report, wild_run):
    ex, _ = wild_run
    S = [h.mean for h in ex.histograms]
    aggregate = all(b >= a for a, b in zip(S, S[1:]))
    drops = 0
    tau = tau_kinetic(500)
    grid = np.linspace(0, 3 * tau, 25)
    for j in range(10):
        _, log = evolve(sample_equilibrium(EnsembleConfig(500, 1.0, 900 + j)), float(grid[-1]))
        sizes, _, _ = all_root_sizes(log, grid, kmax=1)
        drops += int(np.sum(np.diff(sizes, axis=0) < 0))
    ok = aggregate and drops == 0 and bool(np.all(np.diff(ex.per_trajectory_mean, axis=1) >= 0))
    report(9, ok, f"|BC| decreases over 10 trajectories x 500 roots x 25 times={drops}; "
                  f"aggregate S non-decreasing={aggregate}")


def test_criterion_10_percolation(report):
    tau = tau_kinetic(2000)
    grid = np.linspace(0, 6, 61) * tau
    res = percolation_experiment(EnsembleConfig(2000, 1.0, 10), grid, 3, workers=3)
    tc = res.crossing_times / tau
    ratios = []
    for j in range(len(tc)):
        a = int(np.searchsorted(grid, res.crossing_times[j]))
        a = min(a, len(grid) - 1)
        ratios.append(res.max_backward[j, a] / 2000)
    ok = bool(np.all((tc >= 0.2) & (tc <= 5))) and max(ratios) < 0.1
    report(10, ok, f"crossing times / tau={np.round(tc, 3).tolist()}; "
                   f"max |BC|/N at first grid time after crossing={np.round(ratios, 4).tolist()}")


def test_criterion_11_manifest_replay(report, tmp_path):
    commands = {
        "simulate": ["--n", "20", "--t", "30"],
        "clusters": ["--n", "200", "--grid", "0.5,1,2", "--units", "tau", "--samples", "1000",
                     "--root-average", "true"],
        "percolation": ["--n", "300", "--grid", "0.5,1,2,4", "--units", "tau", "--samples", "2"],
        "mfp": ["--n", "100", "--samples", "10"],
        "theory": ["--t", "1.5", "--kmax", "30"],
        "ibf-roundtrip": ["--samples", "5"],
    }
    differing = []
    for cmd, args in commands.items():
        first, second = tmp_path / cmd / "a", tmp_path / cmd / "b"
        assert cli_run([cmd, *args, "--seed", "11", "--out", str(first)]) == 0
        assert cli_run([cmd, "--from-manifest", str(first / "manifest.json"), "--out", str(second)]) == 0
        for f in first.iterdir():
            if f.name != "manifest.json" and f.read_bytes() != (second / f.name).read_bytes():
                differing.append(f"{cmd}/{f.name}")
    ok = not differing
    report(11, ok, f"replayed {len(commands)} commands; differing output files={differing}")
