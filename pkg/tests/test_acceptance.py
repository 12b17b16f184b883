"""Acceptance gate: one PASS/FAIL line per criterion, echoed in the terminal summary.

The heavier criteria run the bundled configs end to end; each config is run
once per session through a module-scoped fixture.
"""

import math
import time
from importlib import resources

import numpy as np
import pytest
import scipy.linalg
import scipy.signal

from conftest import ACCEPTANCE_LINES, tiny_instance
from ssanc.cli import EXIT_OK, main
from ssanc.design import (
    ConstrainedSolver,
    DesignSpec,
    compute_regularizers,
    constraint_residual,
    covariance_set,
    estimate_covariance,
    kkt_oracle,
    largest_eigenvalue,
    secondary_quadratic,
    solve_control_filter,
)
from ssanc.dsp import Signal, load_band_importance
from ssanc.experiment import ExperimentRunner, load_config, read_csv, run_experiment
from ssanc.metrics import evaluate
from ssanc.reir import estimate_reirs, misalignment, true_reirs
from ssanc.scenario import (
    SPEED_OF_SOUND,
    MicSpec,
    SceneConfig,
    SecondaryPathSpec,
    SourceSpec,
    apply_control,
    probe_scene,
    simulate_closed_loop,
    synth_paths,
    synth_secondary_path,
)
from ssanc.structures import (
    AcausalFir,
    ControlFilter,
    build_reir_matrix,
    build_secondary_path_matrix,
    build_selection_vectors,
)

pytestmark = pytest.mark.slow


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def config_path(name):
    return str(resources.files("ssanc").joinpath("configs", name))


def explicit_lag(src, ref):
    """Eardrum first arrival minus reference first arrival, from explicit arrivals."""
    return min(d for d, _ in src.arrivals[-1]) - min(d for d, _ in src.arrivals[ref])


def geometric_lag(scene):
    """Same quantity from geometry: source distance over the speed of sound."""
    src = scene.desired
    az, el = math.radians(src.azimuth_deg), math.radians(src.elevation_deg)
    pos = src.distance_m * np.array([math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)])

    def delay(mic):
        return np.linalg.norm(pos - np.asarray(mic.position)) / SPEED_OF_SOUND * scene.sample_rate_hz + mic.extra_delay_samples

    return delay(scene.error_mic) - delay(scene.microphones[scene.reference_channel])


def timed_run(name, **kw):
    t0 = time.perf_counter()
    rows = run_experiment(load_config(config_path(name)), **kw)
    return rows, time.perf_counter() - t0


# ------------------------------------------------------------------ fixtures


@pytest.fixture(scope="module")
def threshold_run():
    return timed_run("threshold.cfg")


@pytest.fixture(scope="module")
def la_run():
    return timed_run("la_plateau.cfg")


@pytest.fixture(scope="module")
def desk_cli(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    codes, times = [], []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        codes.append(main(["run", config_path("desk_scale.cfg"), "--out", str(out / name)]))
        times.append(time.perf_counter() - t0)
    return out, codes, times


@pytest.fixture(scope="module")
def threshold_runner():
    return ExperimentRunner(load_config(config_path("threshold.cfg")))


def realizable_instance(K, L_w, L_g, L_h, L_a, Delta, len_v, rng, analytic):
    """An instance whose constraint ``H(q + G w) = delta`` has an exact solution.

    Channel 1 is the reference, channel 2 is a pure advance by ``L_a``, and the
    leakage ReIR is ``delta_Delta - h_2 * g * v``; then ``w_2 = v`` (all other
    blocks zero) satisfies the constraint.
    """
    g = synth_secondary_path(SecondaryPathSpec(bulk_delay=2, min_phase=True), L_g, 16000).taps
    G = build_secondary_path_matrix(g, L_w, K)
    L = G.L
    v = rng.standard_normal(len_v)
    gv = np.convolve(g, v)
    assert gv.size <= L_a + L_h
    leak = np.zeros(L_a + L_h)
    leak[L_a + Delta] = 1.0
    leak[: gv.size] -= gv
    reirs = [AcausalFir.impulse(0, L_a, L_h), AcausalFir.impulse(-L_a, L_a, L_h)]
    reirs += [AcausalFir(rng.standard_normal(L_a + L_h), L_a, L_h) for _ in range(K - 2)]
    reirs.append(AcausalFir(leak, L_a, L_h))
    H = build_reir_matrix(reirs, L)
    sel = build_selection_vectors(K, L, L_a, L_h, Delta)
    if analytic:
        # block-diagonal AR(1) covariance: exact Toeplitz blocks, no estimation
        blocks = [scipy.linalg.toeplitz(a ** np.arange(L)) for a in np.linspace(0.3, 0.9, K + 1)]
        Phi = scipy.linalg.block_diag(*blocks)
    else:
        x = scipy.signal.lfilter([1.0], [1.0, -0.7], rng.standard_normal((K + 1, 8 * L)), axis=1)
        Phi = estimate_covariance(x, L)
    w_true = np.zeros((K + 1, L_w))
    w_true[1, :len_v] = v
    assert np.abs(constraint_residual(G, H, sel, ControlFilter(w_true))).max() < 1e-12
    return G, H, sel, Phi


def near_exact_design(G, H, sel, Phi):
    GtPG = secondary_quadratic(Phi, G)
    lam1 = largest_eigenvalue(GtPG)
    A = ConstrainedSolver.hg(G, H)
    spec = DesignSpec(sel.Delta, H.L_a, H.L_h, G.L_w, G.L_g, 1e12, 1e12)
    reg = compute_regularizers(spec, GtPG, A, lam1)
    cov = covariance_set(Phi, G, sel, reg.beta, reg.rho, GtPG, lam1)
    return cov, A, solve_control_filter(cov, G, H, sel)


def worst_feasible_change(cov, A, sel, w, rng, n_dirs=50, step=1e-3):
    """Most negative relative change in the regularised objective along null(A) steps."""
    N = scipy.linalg.null_space(A)
    x = w.flat

    def J(x):
        return sel.q @ cov.Phi_xx @ sel.q + 2 * cov.phi @ x + x @ cov.Phi_rr @ x

    J0 = J(x)
    worst = math.inf
    for _ in range(n_dirs):
        d = N @ rng.standard_normal(N.shape[1])
        d *= step / np.linalg.norm(d)
        worst = min(worst, (J(x + d) - J0) / abs(J0))
    return worst, N.shape[1]


# ------------------------------------------------------------------ 1


def test_closed_form_matches_kkt_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        K = int(rng.integers(1, 3))
        L_w, L_g = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        L_a, L_h = int(rng.integers(0, 3)), int(rng.integers(1, 4))
        L = L_w + L_g - 1
        Delta = int(rng.integers(0, L_h + L - 1))
        inst = tiny_instance(rng, K, L_w, L_g, L_a, L_h, Delta)
        w = solve_control_filter(inst.cov, inst.G, inst.H, inst.sel).flat
        ref = kkt_oracle(inst.cov, inst.G, inst.H, inst.sel).flat
        worst = max(worst, np.linalg.norm(w - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-6 and elapsed < 10, f"20 instances, max rel error {worst:.2e} (<= 1e-6), {elapsed:.2f} s (< 10 s)")


# ------------------------------------------------------------------ 2


@pytest.fixture(scope="module")
def desk_realizable():
    rng = np.random.default_rng(7)
    G, H, sel, Phi = realizable_instance(2, 128, 64, 64, 22, 32, 16, rng, analytic=False)
    cov, A, w = near_exact_design(G, H, sel, Phi)
    return G, H, sel, cov, A, w


def test_constraint_exactly_satisfiable(desk_realizable):
    G, H, sel, _, _, w = desk_realizable
    r = np.abs(constraint_residual(G, H, sel, w)).max()
    report(2, r <= 1e-6, f"desk dims, beta = rho-scale = 1e-12, ||H(q+Gw) - delta||_inf = {r:.2e} (<= 1e-6)")


# ------------------------------------------------------------------ 3


def test_closed_loop_reconstructs_leakage(threshold_runner):
    st = threshold_runner.scene_state(0)
    sc = threshold_runner.cfg.scene
    sel = build_selection_vectors(sc.K, st.G.L, 0, threshold_runner.cfg.design.L_h, 8)
    w = threshold_runner.solver(0, 0, 5e3, 1e5).solve(sel)
    x = st.scene.stacked("mix")
    g = st.scene.g.taps
    loop = simulate_closed_loop(x[: sc.K], x[sc.K], w, g, g)
    err = np.abs(loop.p_hat[: x.shape[1]] - x[sc.K]).max()
    report(3, err <= 1e-10, f"g_hat = g over {x.shape[1]} samples, max|p_hat - p| = {err:.2e} (<= 1e-10)")


# ------------------------------------------------------------------ 4


def test_causality_threshold(threshold_run):
    rows, elapsed = threshold_run
    cfg = load_config(config_path("threshold.cfg"))
    d = explicit_lag(cfg.scene.desired, cfg.scene.reference_channel)
    sd = {r.delta: r.sd_db for r in rows}
    quarter = cfg.design.L_w // 4
    below = max(sd[k] for k in sd if k < d)
    above = max(sd[k] for k in sd if d <= k <= quarter)
    drop = sd[d - 1] - sd[d]
    ok = below > -5 and above <= -15 and drop >= 10 and elapsed < 120 and not any(r.failed for r in rows)
    report(
        4,
        ok,
        f"d={d:g}: min SD below d {min(sd[k] for k in sd if k < d):.2f} dB (> -5), "
        f"worst SD on [d, {quarter}] {above:.2f} dB (<= -15), drop {drop:.1f} dB (>= 10), {elapsed:.1f} s",
    )


# ------------------------------------------------------------------ 5


def test_acausal_dominates_causal(desk_cli):
    out, codes, times = desk_cli
    rows = read_csv(out / "a" / "results.csv")
    cfg = load_config(config_path("desk_scale.cfg"))
    failed = sum(r.failed for r in rows)
    lines, ok = [], codes[0] == EXIT_OK and failed == 0 and times[0] < 300
    for scene in cfg.scenes:
        d = math.ceil(geometric_lag(scene))
        sub = [r for r in rows if r.scenario_id == scene.id and r.delta >= d]
        by = {(r.delta, r.l_a, r.beta_divisor): r for r in sub}
        la_hi = max(cfg.sweep.la_list)
        sd_margin = dsnr_margin = math.inf
        sd_gain = dsnr_gain = math.inf
        for (delta, la, bd), r in by.items():
            if la != la_hi:
                continue
            c = by[(delta, 0, bd)]
            sd_margin = min(sd_margin, c.sd_db + 0.5 - r.sd_db)
            dsnr_margin = min(dsnr_margin, r.dsnr_db - (c.dsnr_db - 0.5))
            if bd == max(cfg.sweep.beta_divisors):
                sd_gain = min(sd_gain, c.sd_db - r.sd_db)
                dsnr_gain = min(dsnr_gain, r.dsnr_db - c.dsnr_db)
        ok &= sd_margin >= 0 and dsnr_margin >= 0 and sd_gain >= 3 and dsnr_gain >= 1
        lines.append(
            f"{scene.id} (d={d}): min SD gain {sd_gain:.2f} dB (>= 3), min dSNR gain {dsnr_gain:.2f} dB (>= 1), "
            f"dominance slack SD {sd_margin:.2f} / dSNR {dsnr_margin:.2f} dB"
        )
    report(5, ok, "; ".join(lines) + f"; {failed} failed rows, {times[0]:.1f} s (< 300 s)")


# ------------------------------------------------------------------ 6


def test_reir_extent_plateau(la_run):
    rows, _ = la_run
    cfg = load_config(config_path("la_plateau.cfg"))
    src, ref = cfg.scene.desired, cfg.scene.reference_channel
    first = [min(d for d, _ in arr) for arr in src.arrivals]
    a = int(first[ref] - min(first))
    d = int(explicit_lag(src, ref))
    at = {r.l_a: r for r in rows if r.delta == d}
    las = sorted(at)
    rising = [at[k].sd_db for k in las if k <= a]
    plateau = [at[k].sd_db for k in las if k >= a]
    nr = [at[k].nr_db for k in las]
    ok = (
        all(y < x for x, y in zip(rising, rising[1:]))
        and max(plateau) - min(plateau) < 1
        and max(nr) - min(nr) < 1
        and not any(r.failed for r in rows)
    )
    report(
        6,
        ok,
        f"a={a}, Delta={d}: SD {' > '.join(f'{v:.1f}' for v in rising)} dB up to L_a=a, "
        f"plateau range {max(plateau) - min(plateau):.2f} dB (< 1), NR range {max(nr) - min(nr):.2f} dB (< 1)",
    )
    late = {r.l_a: r for r in rows if r.delta == max(cfg.sweep.delta_list)}
    late_sd = [late[k].sd_db for k in las if k >= a]
    late_nr = [late[k].nr_db for k in las]
    ACCEPTANCE_LINES.append(
        f"INFO criterion 6: at Delta={max(cfg.sweep.delta_list)} plateau SD range "
        f"{max(late_sd) - min(late_sd):.2f} dB, NR range {max(late_nr) - min(late_nr):.2f} dB"
    )


# ------------------------------------------------------------------ 7


def test_metric_identities(threshold_runner):
    st = threshold_runner.scene_state(0)
    sc = threshold_runner.cfg.scene
    worst = 0.0
    for Delta in (0, 4, 12, 32):
        sel = build_selection_vectors(sc.K, st.G.L, 0, threshold_runner.cfg.design.L_h, Delta)
        w = threshold_runner.solver(0, 0, 5e3, 1e5).solve(sel)
        out = apply_control(st.scene, w, st.G, st.hp, Delta)
        n0 = st.G.L + Delta
        m = evaluate(out.e_s, out.e_v, st.scene.p_s, st.scene.p_v, out.e_s_filtered, out.target, discard=n0)
        e_s, p_s = out.e_s.samples[n0:], st.scene.p_s.samples[n0:]
        speech_change = 10 * math.log10(e_s @ e_s) - 10 * math.log10(p_s @ p_s)
        worst = max(worst, abs(m.dsnr_db - (m.nr_db + speech_change)))
    zero = ControlFilter(np.zeros((sc.K + 1, threshold_runner.cfg.design.L_w)))
    out = apply_control(st.scene, zero, st.G, st.hp, 0)
    m0 = evaluate(out.e_s, out.e_v, st.scene.p_s, st.scene.p_v, out.e_s_filtered, out.target, discard=st.G.L)
    total_importance = load_band_importance().importance.sum()
    # zero filtered speech gives eps = -target: unit ratio in every band
    no_speech = Signal(np.zeros(len(out.target)), out.target.sample_rate_hz)
    silent = evaluate(out.e_s, out.e_v, st.scene.p_s, st.scene.p_v, no_speech, out.target, discard=st.G.L).sd_db
    ok = worst <= 1e-9 and m0.nr_db == 0.0 and m0.dsnr_db == 0.0 and abs(total_importance - 1) <= 1e-12
    ok &= abs(silent) <= 1e-9
    report(
        7,
        ok,
        f"dSNR = NR + speech change within {worst:.1e}; w=0 gives NR={m0.nr_db:g}, dSNR={m0.dsnr_db:g}; "
        f"sum I = 1 {abs(total_importance - 1):+.0e}; unit band ratios give SD={silent:.1e}",
    )


# ------------------------------------------------------------------ 8


def test_reir_estimation_quality():
    # delays relative to the reference: -2, +1, +5 at the outer mics, +3.5 at the eardrum
    desired = SourceSpec(
        0.0, arrivals=(((2.0, 1.0),), ((0.0, 0.3),), ((3.0, 1.0),), ((7.0, 0.5),), ((5.5, 0.8),))
    )
    cfg = SceneConfig(
        microphones=tuple(MicSpec((0, 0, 0), n) for n in ("ref", "a", "b", "c")),
        error_mic=MicSpec((0, 0, 0), "ear"),
        desired=desired,
        duration_s=1.0,
    )
    L_a, L_h = 4, 32
    est = estimate_reirs(probe_scene(cfg, duration_s=10.0), 0, L_a, L_h)
    truth = true_reirs([p.taps for p in synth_paths(cfg).desired], 0, L_a, L_h)
    mis = [misalignment(h, t) for h, t in zip(est.reirs, truth)]
    self_err = np.abs(est.reirs[0].taps - AcausalFir.impulse(0, L_a, L_h).taps).max()
    ok = max(mis) <= -30 and self_err <= 1e-3
    report(
        8,
        ok,
        f"misalignment per channel {', '.join(f'{m:.1f}' for m in mis)} dB (<= -30), self-ReIR error {self_err:.1e} (<= 1e-3)",
    )


# ------------------------------------------------------------------ 9


def test_runs_are_reproducible(desk_cli):
    out, codes, _ = desk_cli
    a = (out / "a" / "results.csv").read_bytes()
    b = (out / "b" / "results.csv").read_bytes()
    report(9, codes == [EXIT_OK, EXIT_OK] and a == b, f"two desk_scale runs, results.csv byte-identical: {a == b}")


# ------------------------------------------------------------------ 10


def test_full_size_config(desk_realizable):
    rows, elapsed = timed_run("paper_scale.cfg")
    finite = all(np.isfinite([r.sd_db, r.nr_db, r.dsnr_db]).all() for r in rows)
    ok_run = rows and not any(r.failed for r in rows) and finite and elapsed < 1800

    rng = np.random.default_rng(8)
    G, H, sel, Phi = realizable_instance(4, 600, 280, 262, 22, 32, 4, rng, analytic=True)
    cov, A, w = near_exact_design(G, H, sel, Phi)
    resid = np.abs(constraint_residual(G, H, sel, w)).max()
    full_worst, null_dim = worst_feasible_change(cov, A, sel, w, rng)
    _, _, dsel, dcov, dA, dw = desk_realizable
    desk_worst, _ = worst_feasible_change(dcov, dA, dsel, dw, rng)
    ok = ok_run and resid <= 1e-6 and full_worst >= -1e-9 and desk_worst >= -1e-9
    report(
        10,
        ok,
        f"paper_scale {len(rows)} row(s) in {elapsed:.1f} s (< 1800), no failures: {not any(r.failed for r in rows)}; "
        f"full-size dims residual {resid:.1e} (<= 1e-6); worst relative objective change along null(A) "
        f"{full_worst:.1e} (full size, dim {null_dim}) / {desk_worst:.1e} (desk) (>= -1e-9)",
    )
