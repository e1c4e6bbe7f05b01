"""The twelve acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL`` line before asserting;
the lines are repeated in the pytest terminal summary.
"""

import copy
import math
import time

import numpy as np

from conftest import record
from oracles import cusum_max_form, sr_sum_of_products
from qcdkit.base import run_batch, trace
from qcdkit.calibration import MCConfig, estimate_arl, estimate_pfa
from qcdkit.estimators import JSPlus
from qcdkit.experiments import resolve_config, run_fig1a, run_fig1b, run_fig2
from qcdkit.fdr import bayes_common_threshold_ensemble, fdr_estimate
from qcdkit.model import RngStream
from qcdkit.multi import GlrBankDetector, MixtureDetector, ThetaBank
from qcdkit.registry import DetectorSpec
from qcdkit.sampling import (ActionModel, ChernoffDetector, CyclicScanDetector, SrRandomizedDetector,
                             TopLDeltaDetector)
from qcdkit.single import (CusumDetector, CusumState, ExpCusumDetector, ShiryaevState, SrState, cusum_step,
                           shiryaev_step, sr_step)


def _scalar_path(step, state, values, attr):
    out = np.empty(len(values))
    for i, v in enumerate(values):
        state = step(state, v)
        out[i] = getattr(state, attr)
    return out


def test_01_recursion_closed_form():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_c = worst_s = 0.0
    for _ in range(1000):
        ll = rng.normal(0.0, 1.0, 200) * 0.5 - 0.125
        w = _scalar_path(cusum_step, CusumState(), ll, "w")
        worst_c = max(worst_c, np.max(np.abs(w - cusum_max_form(ll))))
        lr = np.exp(ll)
        r = _scalar_path(sr_step, SrState(), lr, "r")
        ref = sr_sum_of_products(lr)
        worst_s = max(worst_s, np.max(np.abs(r - ref) / np.maximum(1.0, ref)))
    elapsed = time.perf_counter() - t0
    ok = worst_c <= 1e-9 and worst_s <= 1e-9 and elapsed < 10
    record(1, "recursion vs closed form", ok,
           f"max err CuSum {worst_c:.2e}, SR {worst_s:.2e}, {elapsed:.1f}s")
    assert ok


def test_02_arl_bound():
    t0 = time.perf_counter()
    r = estimate_arl(DetectorSpec.make("cusum", theta=0.5), math.log(200), MCConfig(2000, seed=202))
    elapsed = time.perf_counter() - t0
    lo = r.ci()[0]
    ok = lo >= 180 and elapsed < 60
    record(2, "CuSum ARL at b = log 200", ok, f"ARL {r.estimate:.1f} +- {r.std_error:.1f}, "
           f"lower CI {lo:.1f}, {elapsed:.1f}s")
    assert ok


def test_03_fig1b_slope():
    t0 = time.perf_counter()
    cfg = resolve_config({"experiment": "fig1b", "gammas": [100, 300, 1000], "replications": 2000,
                          "seed": 303})
    table = run_fig1b(cfg)
    elapsed = time.perf_counter() - t0
    fits = table.summary["fits"]
    slope = fits["cusum"]["slope"]
    ok = abs(slope / 8.0 - 1) <= 0.2 and elapsed < 300
    record(3, "delay vs log ARL slope", ok, f"CuSum slope {slope:.3f}, SR slope {fits['sr']['slope']:.3f}, "
           f"target 8.0 +- 20%, {elapsed:.0f}s")
    assert ok


def test_04_fig1a_ordering():
    cfg = resolve_config({"experiment": "fig1a", "replications": 2000, "seed": 404})
    table = run_fig1a(cfg)
    names = [d["name"] for d in cfg["detectors"]]
    first = {n: table.select(n, "nu")[0] for n in names}
    c = first["cusum"]
    minimal = all(c["estimate"] <= r["estimate"] + 2 * math.hypot(c["std_error"], r["std_error"])
                  for r in first.values())
    peak = True
    for n in names:
        rows = table.select(n, "nu")
        top = rows[0]
        assert top["value"] == 1
        for r in rows[1:]:
            if r["estimate"] > top["estimate"] + 2 * math.hypot(r["std_error"], top["std_error"]):
                peak = False
    ok = minimal and peak
    record(4, "ordering at common ARL 1000", ok,
           ", ".join(f"{n} {first[n]['estimate']:.2f}" for n in names) + " at nu = 1")
    assert ok


def test_05_shiryaev_pfa():
    alpha = 0.1
    r = estimate_pfa(DetectorSpec.make("shiryaev", theta=0.5, rho=0.01), 1 - alpha, 0.01,
                     MCConfig(2000, seed=505))
    ok = r.estimate <= alpha + 2 * r.std_error
    record(5, "Shiryaev PFA at b = 1 - alpha", ok, f"PFA {r.estimate:.4f} +- {r.std_error:.4f}")
    assert ok


def test_06_shiryaev_sr_limit():
    rng = np.random.default_rng(606)
    lr = np.exp(0.5 * rng.normal(0.0, 1.0, 50) - 0.125)
    sr = sr_sum_of_products(lr)
    gaps = []
    for rho in (1e-2, 1e-3, 1e-4):
        s = ShiryaevState.initial(rho)
        odds = np.empty(50)
        for i, v in enumerate(lr):
            s = shiryaev_step(s, v)
            odds[i] = s.odds / rho
        gaps.append(float(np.max(np.abs(odds - sr))))
    ok = gaps[0] > gaps[1] > gaps[2]
    record(6, "Shiryaev odds tend to SR", ok, ", ".join(f"{g:.3e}" for g in gaps))
    assert ok


def test_07_exp_cusum_equivalence():
    x = np.random.default_rng(707).normal(0.0, 1.0, (1000, 400, 1))
    mismatches = 0
    for b in (1.0, 3.0):
        a = run_batch(CusumDetector(1000, 1, 0.5), x, b)
        e = run_batch(ExpCusumDetector(1000, 1, 0.5, beta=1.0), x, b)
        mismatches += sum(p.stop_time != q.stop_time for p, q in zip(a, e))
    ok = mismatches == 0
    record(7, "exponential CuSum with beta = 1", ok, f"{mismatches} mismatches over 2000 runs")
    assert ok


def test_08_stein_dominance():
    rng = np.random.default_rng(808)
    w, reps = 20, 5000
    out = []
    ok = True
    for K in (3, 10, 100):
        theta = rng.normal(0.0, 1.0, K)
        theta /= np.linalg.norm(theta)
        windows = theta + rng.standard_normal((reps, w, K))
        xbar = windows.mean(axis=1)
        mse_ml = np.mean(np.sum((xbar - theta) ** 2, axis=1))
        mse_js = np.mean(np.sum((JSPlus().apply(xbar, w) - theta) ** 2, axis=1))
        ok &= mse_js < mse_ml
        out.append(f"K={K}: JS+ {mse_js:.4f} < ML {mse_ml:.4f}")
    record(8, "James-Stein dominance", ok, "; ".join(out))
    assert ok


def test_09_fig2_desk():
    t0 = time.perf_counter()
    cfg = resolve_config({"experiment": "fig2"}, scale="desk", seed=0)
    table = run_fig2(cfg)
    elapsed = time.perf_counter() - t0
    K = cfg["model"]["K"]

    def at(name, L):
        [r] = [r for r in table.select(name, "L") if r["value"] == L]
        return r

    def below(a, b):
        return b["estimate"] - a["estimate"] >= 2 * math.hypot(a["std_error"], b["std_error"])

    xs1, js1 = at("xs", 1), at("wl_js", 1)
    jsK, mlK = at("wl_js", K), at("wl_ml", K)
    glr = [r["estimate"] for r in table.select("glr", "L")]
    spread = (max(glr) - min(glr)) / np.mean(glr)
    a, b, c = below(xs1, js1), below(jsK, mlK), spread <= 0.25
    ok = a and b and c and elapsed < 1800
    record(9, "sparsity comparison at desk scale", ok,
           f"(a) XS {xs1['estimate']:.1f} vs WL-JS {js1['estimate']:.1f}: {a}; "
           f"(b) WL-JS {jsK['estimate']:.1f} vs WL-ML {mlK['estimate']:.1f}: {b}; "
           f"(c) GLR spread {spread:.1%}: {c}; {elapsed:.0f}s")
    assert ok


def test_10_fdr_control():
    out = []
    ok = True
    for alpha in (0.1, 0.2):
        ens = bayes_common_threshold_ensemble(20, 0.5, 0.01, alpha, 2000, 2000, seed=1010)
        e = fdr_estimate(ens, 2000)
        ok &= e.estimate <= alpha + 2 * e.std_error
        out.append(f"alpha={alpha}: FDR {e.estimate:.4f} +- {e.std_error:.4f}")
    record(10, "FDR control of the common threshold", ok, "; ".join(out))
    assert ok


def _policies(n, K, L):
    streams = [RngStream(1111, i) for i in range(n)]
    return {
        "cyclic": CyclicScanDetector(n, K),
        "top_l": TopLDeltaDetector(n, K, L, 0.01),
        "sr_random": SrRandomizedDetector(n, K, L, streams=streams),
        "chernoff": ChernoffDetector(n, K, L, window=20, explore_every=5, streams=streams),
        "chernoff_actions": ChernoffDetector(n, K, L, window=20, explore_every=5, streams=streams,
                                             actions=ActionModel.subsets(K, L)),
    }


def test_11_sampling_properties():
    rng = np.random.default_rng(1111)
    x = rng.normal(0.0, 1.0, (200, 3000, 1))
    a = [r.stop_time for r in run_batch(CyclicScanDetector(200, 1, 0.5), x, 3.0)]
    c = [r.stop_time for r in run_batch(CusumDetector(200, 1, 0.5), x, 3.0)]
    part_a = a == c

    K, L = 10, 1
    covered = 0
    for rep in range(20):
        det = TopLDeltaDetector(1, K, L, 0.01)
        seen = np.zeros(K, dtype=bool)
        for row in np.random.default_rng(2000 + rep).normal(0.0, 1.0, (10_000, K)):
            det.step(row)
            seen |= det.last_action[0]
            if seen.all():
                break
        covered += bool(seen.all())
    part_b = covered == 20

    part_c = True
    n, K, L = 4, 6, 2
    for name, det in _policies(n, K, L).items():
        for _ in range(200):
            xt = rng.normal(0.3, 1.0, (n, K))
            twin = copy.deepcopy(det)
            det.step(xt)
            twin.step(xt + rng.normal(0.0, 10.0, xt.shape))
            if not np.array_equal(det.last_action, twin.last_action):
                part_c = False
    ok = part_a and part_b and part_c
    record(11, "sampling policies", ok,
           f"(a) cyclic = CuSum: {part_a}; (b) coverage {covered}/20; (c) causal: {part_c}")
    assert ok


def test_12_bank_reductions():
    rng = np.random.default_rng(1212)
    x = rng.normal(0.2, 1.0, (50, 300, 1))
    single = ThetaBank.uniform([[0.5]])
    w = trace(CusumDetector(50, 1, 0.5), x)
    same = (np.array_equal(trace(MixtureDetector(50, single), x), w)
            and np.array_equal(trace(GlrBankDetector(50, single), x), w))

    bank = ThetaBank.uniform([[0.5, 0.0], [0.0, 0.5], [0.5, 0.5], [1.0, -0.3]])
    x2 = rng.normal(0.0, 1.0, (500, 600, 2))
    x2[:, 200:] += [0.4, 0.2]
    ordered = True
    for b in (1.0, 3.0, 5.0):
        tm = run_batch(MixtureDetector(500, bank), x2, b)
        tg = run_batch(GlrBankDetector(500, bank), x2, b)
        for m, g in zip(tm, tg):
            if (m.stop_time or math.inf) > (g.stop_time or math.inf):
                ordered = False
    ok = same and ordered
    record(12, "mixture and GLR reductions", ok, f"singleton exact: {same}; T_mix <= T_glr: {ordered}")
    assert ok
