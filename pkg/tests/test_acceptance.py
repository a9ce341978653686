"""Acceptance criteria 1-9.

Each test records one ``CRITERION n: PASS|FAIL ...`` line, printed in the
pytest terminal summary, before asserting. Criterion 9 needs the Cali
case and landmark files, given via ``STDPG_CALI_CASES`` and
``STDPG_CALI_LANDMARKS``; it is skipped otherwise.
"""

import datetime as dt
import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES, CALI, stationary_cases
from stdpg.data import Dataset, load_cases, load_landmarks, nearest_landmarks
from stdpg.model import OMEGA_FLOOR, ClusterCenters, RangeParams, StickState
from stdpg.rolling import build_prior, init_window_state, run_rolling
from stdpg.sampler import (
    ChainState,
    SamplerConfig,
    concentration_posterior,
    gibbs_sweep,
    run_chain,
    sample_centers,
    sample_concentration,
    sample_memberships,
    sample_sticks,
    summarize,
    write_trace_csv,
)
from stdpg.assess import assess
from stdpg.synth import SynthSpec, random_catalog, simulate

pytestmark = pytest.mark.acceptance


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def state_of(cs, ct, g, U, b_u, theta):
    return ChainState(ClusterCenters(cs, ct), np.asarray(g, dtype=int), StickState.from_sticks(U, b_u), theta)


# 1 ----------------------------------------------------------------------

def test_criterion_1_conjugate_conditionals():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    M, N, K = 6, 200, 10_000
    g = rng.choice(M, N, p=[0.4, 0.25, 0.15, 0.1, 0.07, 0.03])
    U = np.append(rng.uniform(0.1, 0.5, M - 1), 1.0)
    b_u = 1.3
    st = state_of(np.zeros((M, 2)), np.full(M, 0.5), g, U, b_u, RangeParams(1, 1, []))
    crit = stats.kstwo.ppf(0.99, K)
    draws = np.array([sample_sticks(st, rng).U for _ in range(K)])
    n = np.bincount(g, minlength=M)
    worst = 0.0
    for j in range(M - 1):
        ref = stats.beta(1 + n[j], b_u + n[j + 1:].sum())
        worst = max(worst, stats.kstest(draws[:, j], ref.cdf).statistic)
    bu = np.array([sample_concentration(st, rng) for _ in range(K)])
    shape = M - 1 + 1
    rate = 0.25 - np.sum(np.log(1 - U[:-1]))
    assert concentration_posterior(U) == (shape, pytest.approx(rate))
    d_b = stats.kstest(bu, stats.gamma(shape, scale=1 / rate).cdf).statistic
    el = time.perf_counter() - t0
    ok = worst < crit and d_b < crit and el < 10
    report(1, ok, f"max KS(U)={worst:.4f} KS(b_u)={d_b:.4f} crit={crit:.4f} time={el:.1f}s")
    assert ok


# 2 ----------------------------------------------------------------------

def test_criterion_2_center_conditional_tv():
    t0 = time.perf_counter()
    ws, wl = 0.01, 0.015
    theta = RangeParams(ws, 0.1, [wl])
    # three members close to the western face so the truncation is active
    x = np.array([[-76.596, 3.40], [-76.590, 3.405], [-76.598, 3.396]])
    z = np.array([[[-76.594, 3.41]], [[-76.585, 3.40]], [[-76.594, 3.41]]])
    data = Dataset(x=x, t=[0.3, 0.4, 0.5], z=z, domain=CALI)
    st = state_of([[-76.5, 3.4], [-76.5, 3.4]], [0.5, 0.5], [0, 0, 0], [0.5, 1.0], 1.0, theta)

    prec = 3 * (1 / ws ** 2 + 1 / wl ** 2)
    sd = 1 / math.sqrt(prec)
    mean = (x.sum(0) / ws ** 2 + z[:, 0].sum(0) / wl ** 2) / prec
    lo = np.maximum(mean - 6 * sd, CALI.lower)
    hi = np.minimum(mean + 6 * sd, CALI.upper)
    nb, sub = 10, 200

    # brute-force oracle: product of the raw member factors on a fine grid
    fx = np.linspace(lo[0], hi[0], nb * sub + 1)
    fy = np.linspace(lo[1], hi[1], nb * sub + 1)
    cx, cy = 0.5 * (fx[1:] + fx[:-1]), 0.5 * (fy[1:] + fy[:-1])
    logf = np.zeros((len(cx), len(cy)))
    for i in range(3):
        logf -= ((cx[:, None] - x[i, 0]) ** 2 + (cy[None, :] - x[i, 1]) ** 2) / (2 * ws ** 2)
        logf -= ((cx[:, None] - z[i, 0, 0]) ** 2 + (cy[None, :] - z[i, 0, 1]) ** 2) / (2 * wl ** 2)
    f = np.exp(logf - logf.max())
    oracle = f.reshape(nb, sub, nb, sub).sum(axis=(1, 3))
    oracle /= oracle.sum()

    rng = np.random.default_rng(202)
    K = 100_000
    draws = np.empty((K, 2))
    for k in range(K):
        draws[k] = sample_centers(st, data, rng).cs[0]
    h, _, _ = np.histogram2d(draws[:, 0], draws[:, 1],
                             bins=[np.linspace(lo[0], hi[0], nb + 1), np.linspace(lo[1], hi[1], nb + 1)])
    outside = K - h.sum()
    tv = 0.5 * (np.abs(h / K - oracle).sum() + outside / K)
    el = time.perf_counter() - t0
    ok = tv < 0.02 and el < 30
    report(2, ok, f"TV={tv:.4f} (10x10 bins, 1e5 draws, truncated at the west face) time={el:.1f}s")
    assert ok


# 3 ----------------------------------------------------------------------

def test_criterion_3_membership_frequencies():
    theta = RangeParams(0.02, 0.2, [0.03])
    cs = np.array([[-76.55, 3.38], [-76.53, 3.40], [-76.50, 3.42]])
    ct = np.array([0.3, 0.5, 0.6])
    U = np.array([0.35, 0.5, 1.0])
    x = np.array([[-76.54, 3.39], [-76.52, 3.41], [-76.51, 3.40], [-76.55, 3.42]])
    t = np.array([0.4, 0.55, 0.35, 0.5])
    z = np.array([[[-76.545, 3.395]], [[-76.52, 3.40]], [[-76.50, 3.41]], [[-76.54, 3.41]]])
    data = Dataset(x=x, t=t, z=z, domain=CALI)
    st = state_of(cs, ct, [0, 0, 0, 0], U, 1.0, theta)
    q = np.array([0.35, 0.65 * 0.5, 0.65 * 0.5])

    # oracle: weight times kernel, in linear space
    expect = np.empty((4, 3))
    for i in range(4):
        for j in range(3):
            k = 1 / (theta.omega_s ** 2 * theta.omega_t * theta.omega_l[0])
            k *= math.exp(-np.sum((x[i] - cs[j]) ** 2) / (2 * theta.omega_s ** 2)
                          - (t[i] - ct[j]) ** 2 / (2 * theta.omega_t ** 2)
                          - np.sum((z[i, 0] - cs[j]) ** 2) / (2 * theta.omega_l[0] ** 2))
            expect[i, j] = q[j] * k
    expect /= expect.sum(axis=1, keepdims=True)

    rng = np.random.default_rng(303)
    R = 10_000
    counts = np.zeros((4, 3))
    for _ in range(R):
        g = sample_memberships(st, data, rng)
        counts[np.arange(4), g] += 1
    freq = counts / R
    z_scores = (freq - expect) / np.sqrt(expect * (1 - expect) / R)
    worst = float(np.max(np.abs(z_scores)))
    # 3-sigma family-wise level shared over the 12 cells
    z_crit = stats.norm.isf(stats.norm.sf(3.0) / z_scores.size)
    ok = worst <= z_crit
    report(3, ok, f"max |z| = {worst:.2f} (family-wise 3-sigma bound {z_crit:.2f}; "
                  f"per-cell 3 exceeded: {worst > 3}) over 4 obs x 3 clusters, 1e4 resamples")
    assert ok


# 4 & 5 ------------------------------------------------------------------

@pytest.fixture(scope="module")
def recovery_fit():
    # true centers sit at least 3 ranges inside every face of the domain
    spec = SynthSpec(M_star=5, theta=RangeParams(0.01, 0.08, []), b_u=4.0, N=2000, domain=CALI,
                     seed=0, center_margin=3.0)
    data, truth = simulate(spec)
    cfg = SamplerConfig(M=60, n_iter=20_000, n_burn=10_000, seed=0)
    init = init_window_state(None, data, None, 60, np.random.default_rng(0))
    t0 = time.perf_counter()
    trace = run_chain(cfg, data, None, init)
    return data, truth, trace, time.perf_counter() - t0


def test_criterion_4_parameter_recovery(recovery_fit):
    data, truth, trace, el = recovery_fit
    s = summarize(trace)
    ps, pt = s.params["omega_s"], s.params["omega_t"]
    covers = ps.hpd_lo <= 0.01 <= ps.hpd_hi and pt.hpd_lo <= 0.08 <= pt.hpd_hi
    close = abs(ps.mean / 0.01 - 1) < 0.15 and abs(pt.mean / 0.08 - 1) < 0.15
    mstar = abs(s.m_star_mean - 5) <= 2
    ok = covers and close and mstar and el < 900
    report(4, ok, f"omega_s {ps.mean:.5f} [{ps.hpd_lo:.5f}, {ps.hpd_hi:.5f}]  "
                  f"omega_t {pt.mean:.4f} [{pt.hpd_lo:.4f}, {pt.hpd_hi:.4f}]  "
                  f"M* {s.m_star_mean:.2f}  time={el:.0f}s")
    assert ok


def test_criterion_5_assessment_fidelity(recovery_fit):
    data, _, trace, _ = recovery_fit
    a = assess(trace, data)
    ok = a.mse < 5e-5 and a.qq_correlation > 0.99
    report(5, ok, f"MSE={a.mse:.3e}  Q-Q r={a.qq_correlation:.5f}  ({a.grid.size} cubes)")
    assert ok


# 6 ----------------------------------------------------------------------

def test_criterion_6_state_invariants():
    violations = 0
    master = np.random.default_rng(606)
    for r in range(1000):
        rng = np.random.default_rng(master.integers(2**63))
        M = int(rng.integers(2, 30))
        N = int(rng.integers(1, 60))
        p = int(rng.integers(0, 4))
        x = rng.uniform(CALI.lower, CALI.upper, (N, 2))
        z = rng.uniform(CALI.lower, CALI.upper, (N, p, 2))
        data = Dataset(x=x, t=rng.uniform(0, 1, N), z=z, domain=CALI)
        U = np.append(rng.uniform(1e-3, 0.999, M - 1), 1.0)
        theta = RangeParams(rng.uniform(0.003, 0.1), rng.uniform(0.02, 0.5), rng.uniform(0.003, 0.1, p))
        st = state_of(rng.uniform(CALI.lower, CALI.upper, (M, 2)), rng.uniform(0, 1, M),
                      rng.integers(0, M, N), U, rng.gamma(1, 4), theta)
        st = gibbs_sweep(st, data, None, rng)
        bad = (abs(st.stick.q.sum() - 1) > 1e-12 or np.any(st.theta.vector <= OMEGA_FLOOR)
               or np.any(st.centers.cs < CALI.lower) or np.any(st.centers.cs > CALI.upper)
               or np.any(st.centers.ct < 0) or np.any(st.centers.ct > 1) or st.m_star > st.M
               or st.stick.U[-1] != 1.0 or st.g.min() < 0 or st.g.max() >= M)
        violations += bool(bad)
    ok = violations == 0
    report(6, ok, f"{violations} violations over 1000 random states")
    assert ok


# 7 ----------------------------------------------------------------------

def _summary(means, variances):
    from stdpg.sampler import ParamSummary, PosteriorSummary

    names = ["omega_s", "omega_t"]
    params = {n: ParamSummary(m, v, m, m) for n, m, v in zip(names, means, variances)}
    return PosteriorSummary(params, params, 1.0, {}, 1)


def test_criterion_7_rolling_mechanics():
    # density ratios of the truncated prior against a hand-written normal
    mu, var = np.array([0.006, 0.18]), np.array([2.5e-7, 4e-4])
    prior = build_prior(_summary(mu, var), 2.0)
    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(200):
        a, b = rng.uniform(1e-4, 2 * mu), rng.uniform(1e-4, 2 * mu)
        got = np.exp(prior.logpdf(a) - prior.logpdf(b))
        hand = np.array([stats.norm(mu[k], math.sqrt(2 * var[k])).pdf(a[k]) /
                         stats.norm(mu[k], math.sqrt(2 * var[k])).pdf(b[k]) for k in range(2)])
        worst = max(worst, float(np.max(np.abs(got / hand - 1))))
    ratio_ok = worst < 1e-12

    # paired two-window drift: sequential prior vs independent flat fits
    start = dt.date(2020, 3, 2)
    cfg = SamplerConfig(M=10, n_iter=2000, n_burn=1000, seed=0, draw_thin=50)
    drift = {"sequential": [], "independent": []}
    for rep in range(10):
        cases = stationary_cases(np.random.default_rng(7000 + rep), start, 2, 250)
        for mode, kw in (("sequential", {}), ("independent", dict(use_prior=False, carry_centers=False))):
            res = run_rolling(cases, None, start, start + dt.timedelta(days=28), 14,
                              SamplerConfig(**{**cfg.__dict__, "seed": rep}), **kw)
            m0, m1 = res[0].summary.theta_mean(), res[1].summary.theta_mean()
            drift[mode].append((m1 - m0) / m0)
    seq = np.mean(np.square(drift["sequential"]), axis=0)
    ind = np.mean(np.square(drift["independent"]), axis=0)
    drift_ok = bool(np.all(seq < ind))
    ok = ratio_ok and drift_ok
    report(7, ok, f"max prior ratio rel err={worst:.1e}; mean sq relative drift "
                  f"omega_s {seq[0]:.2e} vs {ind[0]:.2e}, omega_t {seq[1]:.2e} vs {ind[1]:.2e} "
                  f"(sequential vs independent, 10 paired studies)")
    assert ok


# 8 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def paper_scale():
    catalog = random_catalog(CALI, [3, 48, 79, 143, 65, 71], np.random.default_rng(1))
    spec = SynthSpec(M_star=8, theta=RangeParams(0.006, 0.1, []), b_u=4.0, N=3000, domain=CALI, seed=2)
    d0, _ = simulate(spec)
    data = Dataset(x=d0.x, t=d0.t, z=nearest_landmarks(d0.x, catalog), domain=CALI,
                   landmark_types=catalog.types)
    return data, catalog


def test_criterion_8_determinism_and_scale(paper_scale, tmp_path):
    data, catalog = paper_scale
    init = init_window_state(None, data, catalog, 120, np.random.default_rng(0))
    files = []
    for threads in (1, 4):
        cfg = SamplerConfig(M=120, n_iter=300, n_burn=100, seed=8, threads=threads)
        write_trace_csv(run_chain(cfg, data, None, init), tmp_path / f"t{threads}.csv")
        files.append((tmp_path / f"t{threads}.csv").read_bytes())
    same = files[0] == files[1]

    cfg = SamplerConfig(M=120, n_iter=20_000, n_burn=10_000, seed=8, threads=os.cpu_count() or 1)
    t0 = time.perf_counter()
    trace = run_chain(cfg, data, None, init)
    el = time.perf_counter() - t0
    ok = same and el < 600 and trace.m_star.max() < 120
    report(8, ok, f"threads 1 vs 4 byte-identical={same}; N=3000 M=120 p=6 20k iterations "
                  f"in {el:.0f}s on {cfg.threads} thread(s); final M*={trace.m_star[-1]}")
    assert ok


# 9 ----------------------------------------------------------------------

def test_criterion_9_cali_first_window():
    cases_path = os.environ.get("STDPG_CALI_CASES")
    lm_path = os.environ.get("STDPG_CALI_LANDMARKS")
    if not (cases_path and lm_path and os.path.isfile(cases_path) and os.path.isfile(lm_path)):
        ACCEPTANCE_LINES.append("CRITERION 9: SKIP  Cali data not available "
                                "(set STDPG_CALI_CASES and STDPG_CALI_LANDMARKS)")
        pytest.skip("Cali data not available")
    start = dt.date(2020, 3, 2)
    cases = load_cases(cases_path)
    catalog = load_landmarks(lm_path)
    cfg = SamplerConfig(M=120, n_iter=20_000, n_burn=10_000, seed=0, threads=os.cpu_count() or 1)
    res = run_rolling([c for c in cases if start <= c.date < start + dt.timedelta(days=14)],
                      catalog, start, start + dt.timedelta(days=14), 14, cfg)[0]
    space = res.summary.converted["omega_s"].mean
    days = res.summary.converted["omega_t"].mean
    mse = assess(res.trace, res.data).mse
    ok = 0.59 <= space <= 0.74 and 4.46 <= days <= 5.54 and mse <= 2 * 4.157e-5
    report(9, ok, f"space {space:.2f} km, time {days:.2f} days, MSE={mse:.2e}")
    assert ok
