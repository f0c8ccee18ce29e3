"""End-to-end acceptance criteria, each run through the experiment harness.

Every test prints one PASS/FAIL line (visible in the terminal even under
output capture) and then asserts the same condition.
"""

import time

import pytest

from dyadlab.cli import execute, parse_manifest


def _run(tmp_path, text):
    manifest = parse_manifest(text)
    start = time.perf_counter()
    result, _, _ = execute(manifest, str(tmp_path))
    return result, time.perf_counter() - start


def _report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")


def test_criterion_01_haar_roundtrip_orthonormality(tmp_path, capsys):
    res, elapsed = _run(tmp_path, "experiment = haar-check\ndims = 1,2\nmax_n_1d = 8\nmax_n_2d = 5\ntol = 1e-12\n")
    ok = res.passed and elapsed < 10
    _report(capsys, 1, "Haar round trip and Gram identity", ok,
            f"roundtrip {res.summary['max_roundtrip_error']:.2e}, gram {res.summary['max_gram_error']:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_shift_normalization(tmp_path, capsys):
    res, elapsed = _run(tmp_path, "experiment = shift-norms\nd = 1\nN = 8\ncount = 100\nmax_i = 3\nmax_j = 3\ntol = 1e-9\n")
    ok = res.passed and len(res.rows) == 100 and elapsed < 60
    _report(capsys, 2, "cancellative shift norms at most one", ok,
            f"max power-iteration norm {res.summary['max_norm']:.12f}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_badness_probability(tmp_path, capsys):
    res, elapsed = _run(
        tmp_path,
        "experiment = badness-mc\ndims = 1,2\nr_values = 6,8,10\nphi = power:0.5\nsamples = 100000\n"
        "independence_seeds = 20\nsignificance = 0.01\n",
    )
    ok = res.passed and elapsed < 120
    worst = max(r["estimate"] - r["bound"] - 3 * r["stderr"] for r in res.rows)
    pmin = min(r["median_pvalue"] for r in res.rows)
    _report(capsys, 3, "bad-cube probability bound and independence", ok,
            f"max(estimate - bound - 3se) {worst:.3f}, smallest median p {pmin:.3f}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_weak_type(tmp_path, capsys):
    res, elapsed = _run(tmp_path, "experiment = weak11\nd = 1\nN = 8\ncount = 200\ninputs_per_shift = 20\n")
    ok = res.passed and elapsed < 120
    _report(capsys, 4, "weak-type (1,1) constant", ok,
            f"max ratio {res.summary['max_ratio']:.4f} vs {res.summary['bound']:g}, {elapsed:.1f}s")
    assert ok


def test_criterion_05_representation_exactness(tmp_path, capsys):
    res, elapsed = _run(tmp_path, "experiment = represent\nmode = exact\nN = 8\nr = 6\nexact_systems = 3\nexact_tol = 1e-9\n")
    per_system = elapsed / 3
    ok = res.passed and per_system < 60
    _report(capsys, 5, "double Haar sum and class re-assembly", ok,
            f"max relative error {res.summary['max_relative_error']:.2e}, {per_system:.2f}s per system")
    assert ok


def test_criterion_06_good_filtered_monte_carlo(tmp_path, capsys):
    res, elapsed = _run(
        tmp_path,
        "experiment = represent\nmode = mc\nN = 8\nr = 6\nsamples = 200\nruns = 20\ncutoffs = 2,4,6,none\n"
        "confidence_z = 2.576\nmin_covered = 19\n",
    )
    ok = res.passed and elapsed < 600
    _report(capsys, 6, "good-filtered Monte Carlo identity", ok,
            f"{res.summary['covered_runs']}/20 runs covered, residual monotone "
            f"{res.criteria['residual_monotone']}, {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def two_weight_corpus(tmp_path_factory):
    manifest = parse_manifest("experiment = two-weight-sweep\ntrials = 200\nn_values = 6,7,8\nmax_i = 2\nmax_j = 2\n")
    start = time.perf_counter()
    result, _, _ = execute(manifest, str(tmp_path_factory.mktemp("two_weight")))
    return result, time.perf_counter() - start


def test_criterion_07_two_weight_ratios(two_weight_corpus, capsys):
    res, elapsed = two_weight_corpus
    ok = (res.criteria["lower_bound"] and res.criteria["two_weight_constant_stable"]
          and len(res.rows) == 200 and elapsed < 300)
    by_n = ", ".join(f"N={k}: {v:.3f}" for k, v in res.summary["two_weight_constant_by_N"].items())
    _report(capsys, 7, "two-weight norm ratios and lower bound", ok,
            f"corpus C {res.summary['two_weight_constant']:.3f} ({by_n}), {elapsed:.1f}s")
    assert ok


def test_criterion_08_testing_constant_bound(two_weight_corpus, capsys):
    res, elapsed = two_weight_corpus
    ok = res.criteria["testing_constant_stable"] and res.criteria["carleson"] and elapsed < 300
    by_n = ", ".join(f"N={k}: {v:.3f}" for k, v in res.summary["testing_constant_by_N"].items())
    _report(capsys, 8, "testing constants and principal-cube packing", ok,
            f"corpus C {res.summary['testing_constant']:.3f} ({by_n}), Carleson on all {len(res.rows)} instances "
            f"{res.criteria['carleson']}")
    assert ok


def test_criterion_09_a2_scaling(tmp_path, capsys):
    res, elapsed = _run(tmp_path, "experiment = a2-scaling\nN = 8\nalpha_min = 0\nalpha_max = 2.2\nalpha_count = 23\n")
    s = res.summary
    ok = res.passed and s["fit_points"] >= 2 and s["max_a2_in_fit"] > 500 and elapsed < 600
    _report(capsys, 9, "A2 scaling slopes", ok,
            f"slope vs mixed characteristic {s['slope_characteristic']:.3f}, vs A2 {s['slope_a2']:.3f}, "
            f"A2 up to {s['max_a2_in_fit']:.0f}, {elapsed:.1f}s")
    assert ok


def test_criterion_10_beurling_powers(tmp_path, capsys):
    res, elapsed = _run(tmp_path, "experiment = beurling-powers\ngrid = 64\nn_max = 16\nalpha = 0.5\n")
    s = res.summary
    ok = res.passed and elapsed < 300
    failed = [k for k, v in res.criteria.items() if not v]
    _report(capsys, 10, "Beurling powers", ok,
            f"isometry {s['max_isometry_error']:.1e}, C0 rel err {s['c0_relative_error']:.1e}, "
            f"CZ exponent {s['cz_alpha_exponent']:.3f} in {s['exponent_window']}, failed {failed}, {elapsed:.1f}s")
    assert ok
