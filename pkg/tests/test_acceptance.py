"""Acceptance checks; each test prints one PASS/FAIL line with the measured values.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines are printed
even while pytest captures output).
"""
import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from qdmeta import arm
from qdmeta.archive import BehaviourMap
from qdmeta.cmaes import CmaState
from qdmeta.control import GENERATIONS, MUTATION_RATE, RANGES, anneal
from qdmeta.database import KBestDatabase, build_map
from qdmeta.experiment import (
    DEFAULT_TOLERANCE,
    EvolveConfig,
    all_conditions,
    cliffs_delta,
    run_damage_test,
    run_evolve,
    target_grid,
)
from qdmeta.featuremaps import BASELINES, decode, gene_box, genome_length
from qdmeta.metaloop import map_elites_iterations, seed_map

import oracles

TESTS = Path(__file__).parent
ACCEPT_BUDGET = 200_000
SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, detail

    return emit


def test_1_invariant_suites(report):
    t = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-m", "invariant", "-p", "no:cacheprovider", str(TESTS)],
        capture_output=True,
        text=True,
    )
    elapsed = time.perf_counter() - t
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    report(1, proc.returncode == 0 and elapsed < 120, f"invariant suites '{tail}' in {elapsed:.1f}s (< 120s)")


def test_2_oracle_equivalences(report):
    rng = np.random.default_rng(2024)
    g = arm.random_genotypes(rng, 10_000)
    ours = arm.positions_from_angles(arm.joint_angles(g))
    ref = np.array([oracles.kinematics_complex(row) for row in g])
    kin_err = float(np.abs(ours - ref).max())

    fit_exact = all(arm.fitness(row) == float(oracles.fitness_exact(row)) for row in g[:10_000])

    maps_exact = True
    for kind in ("selection", "linear", "nonlinear"):
        db = KBestDatabase(k=40)
        cand = arm.random_genotypes(rng, 3000)
        res = arm.evaluate_batch(cand)
        s = np.flatnonzero(res.safe)[:1000]
        db.insert_many(cand[s], res.base_features[s], res.fitness[s])
        lo, hi = gene_box(kind)
        fmap = decode(rng.uniform(lo, hi, genome_length(kind)), kind)
        m = build_map(db, fmap, 8)
        cells, order = oracles.build_map_reference(db, fmap, 8)
        maps_exact &= list(m.cells) == order and all(
            np.array_equal(m.cells[k].genotype, r.genotype) and m.cells[k].fitness == r.fitness
            for k, r in cells.items()
        )

    cliff_exact = True
    for _ in range(200):
        a = rng.integers(-10, 10, rng.integers(1, 40))
        b = rng.integers(-10, 10, rng.integers(1, 40))
        cliff_exact &= cliffs_delta(a, b) == oracles.cliffs_delta_pairs(a.tolist(), b.tolist())

    ok = kin_err < 1e-9 and fit_exact and maps_exact and cliff_exact
    report(
        2,
        ok,
        f"kinematics max error {kin_err:.2e} m (< 1e-9); fitness exact={fit_exact}; "
        f"build_map exact={maps_exact}; Cliff's delta exact={cliff_exact}",
    )


def _sphere(seed, target, box=(-1.0, 3.0), dim=8, generations=300):
    rng = np.random.default_rng(seed)
    state = CmaState.init(dim, box)
    best = np.inf
    for gen in range(1, generations + 1):
        w = state.ask(rng)
        d = np.linalg.norm(w - target, axis=1)
        best = min(best, float(d.min()))
        state.tell(-(d**2))
        if best < 1e-3:
            return best, gen
    return best, generations


def test_3_cmaes_sphere(report):
    t = time.perf_counter()
    plain = [_sphere(seed, np.zeros(8)) for seed in range(10)]
    shifts = np.random.default_rng(99).uniform(-0.5, 2.5, (10, 8))
    shifted = [_sphere(100 + seed, shifts[seed]) for seed in range(10)]
    elapsed = time.perf_counter() - t
    n_plain = sum(b < 1e-3 for b, _ in plain)
    n_shift = sum(b < 1e-3 for b, _ in shifted)
    gens = max(g for _, g in plain + shifted)
    ok = n_plain == 10 and n_shift == 10 and elapsed < 30
    report(
        3,
        ok,
        f"sphere {n_plain}/10, shifted sphere {n_shift}/10 reach best distance < 1e-3 "
        f"(slowest {gens} generations <= 300) in {elapsed:.1f}s (< 30s)",
    )


def test_4_anneal_endpoints(report):
    budget = ACCEPT_BUDGET
    checks = []
    for which in (GENERATIONS, MUTATION_RATE):
        lo, hi = RANGES[which]
        checks += [anneal(which, 0, budget) == hi, anneal(which, budget, budget) == lo]
    report(4, all(checks), f"P(0) = M_P and P(M_E) = m_P exactly for both parameters: {checks}")


def _final(path, column):
    import csv

    rows = list(csv.DictReader(open(path / "metrics.csv")))
    return rows, float(rows[-1][column])


def test_5_scaled_qualitative(report, tmp_path):
    t = time.perf_counter()
    rn_cov, polar_cov, improved, detail = [], [], [], []
    for seed in SEEDS:
        out = run_evolve(EvolveConfig("random-nonlinear", budget=ACCEPT_BUDGET, seed=seed, out=str(tmp_path / f"rn{seed}")))
        rn_cov.append(_final(out, "coverage")[1])
        out = run_evolve(EvolveConfig("polar", budget=ACCEPT_BUDGET, seed=seed, out=str(tmp_path / f"po{seed}")))
        polar_cov.append(_final(out, "coverage")[1])
        out = run_evolve(EvolveConfig("meta-selection", budget=ACCEPT_BUDGET, seed=seed, out=str(tmp_path / f"ms{seed}")))
        rows, _ = _final(out, "meta_fitness_mean")
        ev = np.array([float(r["evaluations"]) for r in rows])
        mf = np.array([float(r["meta_fitness_mean"]) for r in rows])
        first = mf[ev <= 0.2 * ACCEPT_BUDGET].mean()
        last = mf[ev >= 0.8 * ACCEPT_BUDGET].mean()
        improved.append(last > first)
        detail.append(f"{first:.0f}->{last:.0f}")
    elapsed = time.perf_counter() - t
    ok_a = max(rn_cov) < 50 and min(polar_cov) > 2000
    ok_b = sum(improved) >= 2
    report(
        "5a",
        ok_a,
        f"Random-NonLinear coverage {[int(c) for c in rn_cov]} (< 50); Polar coverage {[int(c) for c in polar_cov]} (> 2000)",
    )
    report(
        "5b",
        ok_b and elapsed < 900,
        f"Meta-Selection mean meta-fitness first 20% -> last 20%: {detail}, improved in {sum(improved)}/3 (>= 2); "
        f"all 9 runs {elapsed:.0f}s (< 900s)",
    )


def _exhaustive_polar_archive(seed=0):
    rng = np.random.default_rng(seed)
    polar = BASELINES["polar"]
    archive = BehaviourMap(2, 64)
    seed_map(archive, polar, 200_000, rng)
    map_elites_iterations(archive, polar, 500, 0.125, rng)
    return archive


def _oracle_reachable(tolerance):
    """Targets within tolerance of some safe pose on a 5-level-per-gene genotype grid."""
    levels = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    grid = np.array(list(itertools.product(levels, repeat=8)))
    reached = np.zeros(len(target_grid()), dtype=bool)
    from scipy.spatial import cKDTree

    for chunk in np.array_split(grid, 8):
        ee, safe = arm.end_effectors(chunk)
        d, _ = cKDTree(ee[safe]).query(target_grid())
        reached |= d <= tolerance
    return reached


def test_6_damage_harness(report):
    archive = _exhaustive_polar_archive()
    res = run_damage_test(archive, DEFAULT_TOLERANCE, no_damage=True)
    pct = res.rows[0]["percent"]
    oracle = _oracle_reachable(DEFAULT_TOLERANCE)
    tolerances = [0.25 * DEFAULT_TOLERANCE, 0.5 * DEFAULT_TOLERANCE, DEFAULT_TOLERANCE,
                  1.5 * DEFAULT_TOLERANCE, 2 * DEFAULT_TOLERANCE]
    per_tol = [run_damage_test(archive, tol).percentages for tol in tolerances]
    per_tol_nd = [run_damage_test(archive, tol, no_damage=True).percentages for tol in tolerances]
    monotone = all(np.all(b >= a) for a, b in zip(per_tol, per_tol[1:])) and all(
        np.all(b >= a) for a, b in zip(per_tol_nd, per_tol_nd[1:])
    )
    means = ", ".join(f"{p.mean():.1f}" for p in per_tol)
    report(
        6,
        pct >= 90 and monotone,
        f"exhaustive Polar archive ({len(archive)} cells) reaches {pct:.1f}% of targets undamaged (>= 90); "
        f"coarse reachability oracle {100 * oracle.mean():.1f}%; monotone over 5 tolerances={monotone} "
        f"(mean % under test damages: {means})",
    )


def test_7_determinism(report, tmp_path):
    runs = [(c, "static") for c in all_conditions()]
    runs += [("meta-linear", "anneal-gen"), ("meta-nonlinear", "endo-mr"), ("meta-selection", "rl-gen"),
             ("meta-selection", "static-mr:0.25"), ("polar", "anneal-mr")]
    mismatched = []
    for cond, control in runs:
        blobs = []
        for rep in "ab":
            out = tmp_path / f"{cond}-{control.replace(':', '_')}-{rep}"
            run_evolve(EvolveConfig(cond, control=control, budget=25_000, seed=7, out=str(out)))
            blobs.append((out / "metrics.csv").read_bytes())
        if blobs[0] != blobs[1]:
            mismatched.append(f"{cond}/{control}")
    report(7, not mismatched, f"{len(runs) - len(mismatched)}/{len(runs)} condition/control pairs byte-identical "
                              f"metrics CSVs across equal-seed runs{'; differing: ' + ', '.join(mismatched) if mismatched else ''}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
