"""Acceptance gate: ten end-to-end criteria with stated tolerances.

Each test prints one PASS/FAIL line. Oracles here are written independently
of the package internals (plain-math tracing, explicit-dummy OLS, direct
sandwich formulas) so that agreement is evidence, not tautology.
"""

import datetime as dt
import math
import time

import numpy as np
import pandas as pd
from scipy import stats

from drift_attrib.econometrics import PRESETS, cluster_vcov, ols, run_spec
from drift_attrib.exposure import assemble_panel
from drift_attrib.grid import GridSpec, parse_month
from drift_attrib.pipeline import run_traces
from drift_attrib.synth import (
    DgpConfig,
    border_land_mask,
    gen_current_field,
    gen_mp_field,
    gen_panel_frame,
    read_truth,
    write_truth,
)
from drift_attrib.transport import (
    ReceiverIndex,
    TraceState,
    TransportParams,
    aggregate_daily,
    aggregate_monthly,
    score_step,
    trace_positions,
)

from test_econometrics import cr1_oracle, dummy_ols, multiway_oracle


def report(num, description, passed, detail=""):
    line = f"{'PASS' if passed else 'FAIL'}: criterion {num} - {description}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert passed, line


# -- independent straight-line transport oracle ---------------------------

def oracle_haversine_km(lon1, lat1, lon2, lat2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    a = math.sin((p2 - p1) / 2) ** 2 \
        + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2
    return 2.0 * 6371.0 * math.asin(min(math.sqrt(a), 1.0))


def oracle_score(lon, lat, u, v, rad, rlon, rlat, params):
    dist = oracle_haversine_km(lon, lat, rlon, rlat) / 111.195
    if dist > rad:
        return 0.0
    lx, ly = rlon - lon, rlat - lat
    speed = math.hypot(u, v)
    if speed == 0.0:
        return math.exp(-params.alpha * rad) if dist < 1e-12 else 0.0
    un, vn = u / speed, v / speed
    lnorm = math.hypot(lx, ly)
    if lnorm > 0.0:
        cosang = min(max((lx * un + ly * vn) / lnorm, -1.0), 1.0)
        if math.acos(cosang) > params.theta_cutoff:
            return 0.0
    theta = abs(vn * lx - un * ly)
    return math.exp(-params.alpha * rad - params.beta * theta - params.gamma * dist)


def oracle_bilinear(series, day_index, lon, lat):
    spec = series.spec
    fx = min(max((lon - spec.lon0) / spec.dlon, 0.0), spec.nlon - 1.0)
    fy = min(max((lat - spec.lat0) / spec.dlat, 0.0), spec.nlat - 1.0)
    ix0 = min(int(math.floor(fx)), spec.nlon - 2)
    iy0 = min(int(math.floor(fy)), spec.nlat - 2)
    wx, wy = fx - ix0, fy - iy0
    usum = vsum = wsum = 0.0
    for iy, ix, w in ((iy0, ix0, (1 - wy) * (1 - wx)),
                      (iy0, ix0 + 1, (1 - wy) * wx),
                      (iy0 + 1, ix0, wy * (1 - wx)),
                      (iy0 + 1, ix0 + 1, wy * wx)):
        if w == 0.0:
            continue
        usum += w * series.u[day_index, iy, ix]
        vsum += w * series.v[day_index, iy, ix]
        wsum += w
    return usum / wsum, vsum / wsum


def oracle_complete_months(start, end, max_steps):
    months = []
    first = dt.date(start.year, start.month, 1)
    while first <= end:
        following = (first + dt.timedelta(days=32)).replace(day=1)
        if first >= start + dt.timedelta(days=max_steps) \
                and following - dt.timedelta(days=1) <= end:
            months.append(first.year * 12 + first.month - 1)
        first = following
    return months


def oracle_score_matrix(series, senders, receivers, params):
    """Brute-force ScoreMatrix: no spatial index, naive group-by."""
    spec = series.spec
    iy, ix = np.nonzero(series.mask)
    lon_lo, lon_hi = spec.lons[ix.min()], spec.lons[ix.max()]
    lat_lo, lat_hi = spec.lats[iy.min()], spec.lats[iy.max()]
    centers = {rc: spec.cell_center(rc) for rc in receivers}

    daily = {}
    for sender in senders:
        for day0 in series.days:
            lon, lat = spec.cell_center(sender)
            for t in range(params.max_steps):
                day_index = series.day_index(day0 + dt.timedelta(days=t))
                if day_index is None:
                    break
                u, v = oracle_bilinear(series, day_index, lon, lat)
                rad = params.rad0 + t * params.rad_step
                arrival = day0 + dt.timedelta(days=t)
                for rc, (rlon, rlat) in centers.items():
                    val = oracle_score(lon, lat, u, v, rad, rlon, rlat, params)
                    if val > 0.0:
                        key = (sender, rc, arrival)
                        daily[key] = daily.get(key, 0.0) + val
                meters = math.pi / 180 * 6371.0e3 * math.cos(math.radians(lat))
                nxt_lon = lon + 86400.0 * u / meters
                nxt_lat = lat + 86400.0 * v / meters
                if not (lon_lo <= nxt_lon <= lon_hi and lat_lo <= nxt_lat <= lat_hi):
                    break
                lon, lat = nxt_lon, nxt_lat

    months = oracle_complete_months(series.days[0], series.days[-1], params.max_steps)
    pairs = sorted({(s, r) for (s, r, _) in daily})
    values = {}
    for pair in pairs:
        row = []
        for ym in months:
            month_first = dt.date(ym // 12, ym % 12 + 1, 1)
            nxt = (month_first + dt.timedelta(days=32)).replace(day=1)
            ndays = (nxt - month_first).days
            total = sum(daily.get((*pair, month_first + dt.timedelta(days=d)), 0.0)
                        for d in range(ndays))
            row.append(total / ndays)
        values[pair] = row
    return months, values, daily


def interior_ring(mask):
    from drift_attrib.grid import coastal_cells
    return coastal_cells(mask)


class TestCriterion1TransportOracle:
    def test_pipeline_equals_brute_force(self):
        started = time.monotonic()
        spec = GridSpec(lon0=0.0, lat0=0.0, nlon=10, nlat=10)
        mask = border_land_mask(spec)
        cfg = DgpConfig(seed=42, spec=spec, field_kind="random_divfree",
                        field_speed=0.4, n_days=60,
                        start_day=dt.date(2017, 6, 8))
        series = gen_current_field(cfg, mask)
        params = TransportParams(max_steps=20)
        senders = [(2, 2), (4, 5), (6, 3)]
        receivers = interior_ring(mask)

        index = ReceiverIndex(spec, receivers)
        scores = run_traces(series, senders, series.days, index, params,
                            "faithful", workers=1)
        daily = aggregate_daily(scores)
        matrix = aggregate_monthly(daily, spec, series.days[0], series.days[-1],
                                   params.max_steps)

        months, values, daily_oracle = oracle_score_matrix(
            series, senders, receivers, params)

        assert set(daily) == set(daily_oracle)
        daily_err = max(abs(daily[k] - daily_oracle[k]) for k in daily_oracle)
        assert list(matrix.months) == months and months
        assert sorted(matrix.values) == sorted(values)
        month_err = max(abs(float(matrix.values[p][i]) - values[p][i])
                        for p in values for i in range(len(months)))
        elapsed = time.monotonic() - started
        report(1, "transport pipeline equals brute-force oracle to 1e-12, <10s",
               month_err <= 1e-12 and daily_err <= 1e-12 and elapsed < 10.0,
               f"{len(values)} pairs, max err {month_err:.2e}, {elapsed:.1f}s")


class TestCriterion2ClosedFormTrajectory:
    def test_uniform_eastward_step(self):
        spec = GridSpec(lon0=0.0, lat0=-1.0, nlon=95, nlat=3, dlon=1.0, dlat=1.0)
        u_speed = 1.2884
        days = 90
        cfg = DgpConfig(spec=spec, field_kind="uniform", field_speed=u_speed,
                        n_days=days, start_day=dt.date(2017, 4, 1))
        series = gen_current_field(cfg)
        params = TransportParams()  # 90 steps
        positions = trace_positions(series, (1, 0), dt.date(2017, 4, 1), params)

        # hand evaluation of the advection formula with R = 6371 km; the
        # per-step displacement at the equator is 86400*1.2884/111195 deg
        want = 86400.0 * u_speed / 111195.0
        assert len(positions) == 90
        steps = [b[1] - a[1] for a, b in zip(positions, positions[1:])]
        steps.append(want)  # the final advection has no successor; pad
        rel_err = max(abs(s - want) / want for s in steps[:-1])
        lats_flat = all(p[2] == -0.0 or p[2] == 0.0 for p in positions)
        report(2, "uniform eastward trajectory matches closed form to 1e-6 "
                  "relative over 90 steps",
               len(positions) == 90 and rel_err <= 1e-6 and lats_flat,
               f"step {steps[0]:.7f} deg vs {want:.7f}, rel err {rel_err:.2e}")


class TestCriterion3ScorePointCheck:
    def test_colocated_receiver(self):
        params = TransportParams()
        state = TraceState(sender=(0, 0), day=dt.date(2017, 4, 1), t=0,
                           lon=0.0, lat=0.0, rad=params.rad(0), u=1.0, v=0.0)
        got = score_step(state, 0.0, 0.0, params)
        err = abs(got - math.exp(-0.8))
        report(3, "co-located receiver at t=0 scores exp(-0.8) within 1e-9",
               err <= 1e-9, f"got {got:.9f}, err {err:.2e}")


class TestCriterion4ZeroFill:
    def test_exhaustive_entry_count(self):
        spec = GridSpec(lon0=0.0, lat0=0.0, nlon=8, nlat=8)
        mask = border_land_mask(spec)
        cfg = DgpConfig(seed=7, spec=spec, field_kind="gyre", field_speed=0.3,
                        n_days=180, start_day=dt.date(2017, 4, 1))
        series = gen_current_field(cfg, mask)
        params = TransportParams()  # 90-day lead rule
        receivers = interior_ring(mask)
        index = ReceiverIndex(spec, receivers)
        scores = run_traces(series, [(2, 2), (4, 4)], series.days, index,
                            params, "faithful", workers=1)
        matrix = aggregate_monthly(aggregate_daily(scores), spec,
                                   series.days[0], series.days[-1],
                                   params.max_steps)

        months = oracle_complete_months(series.days[0], series.days[-1], 90)
        assert months == [parse_month("2017-07"), parse_month("2017-08")]
        ok = list(matrix.months) == months and len(matrix.values) > 0
        count_ok = all(len(vec) == len(months) and np.all(np.isfinite(vec))
                       and np.all(np.asarray(vec) >= 0)
                       for vec in matrix.values.values())
        report(4, "every scored pair carries exactly one entry per complete "
                  "month (90-day lead rule)",
               ok and count_ok,
               f"{len(matrix.values)} pairs x {len(months)} months")


def passthrough_panel(seed, n_senders=20, n_receivers=15, n_months=24,
                      noise_sd=0.1):
    """Receiver concentration as a true transported mixture plus noise; the
    passthrough slope rises with transport strength."""
    rng = np.random.default_rng([seed, 55])
    current = rng.random((n_senders, n_receivers))
    passthrough = 0.1 + 0.8 * current
    pair_fx = rng.normal(scale=0.3, size=(n_senders, n_receivers))
    month_fx = rng.normal(scale=0.3, size=n_months)
    log_mp_sender = rng.normal(size=(n_senders, n_months))
    noise = rng.normal(scale=noise_sd, size=(n_senders, n_receivers, n_months))
    s_idx, r_idx, m_idx = np.meshgrid(np.arange(n_senders),
                                      np.arange(n_receivers),
                                      np.arange(n_months), indexing="ij")
    s_idx, r_idx, m_idx = s_idx.ravel(), r_idx.ravel(), m_idx.ravel()
    x = log_mp_sender[s_idx, m_idx]
    y = pair_fx[s_idx, r_idx] + month_fx[m_idx] \
        + passthrough[s_idx, r_idx] * x + noise[s_idx, r_idx, m_idx]
    return pd.DataFrame({
        "log_mp_receiver": y, "log_mp_sender": x,
        "current": current[s_idx, r_idx],
        "pair": [f"p{s}_{r}" for s, r in zip(s_idx, r_idx)],
        "month": [f"m{m:02d}" for m in m_idx],
        "sender": [f"s{s}" for s in s_idx],
        "receiver": [f"r{r}" for r in r_idx],
    })


class TestCriterion5PassthroughMonotonicity:
    def test_decile_profile(self):
        started = time.monotonic()
        rhos = []
        for seed in range(20):
            result = run_spec(passthrough_panel(seed), PRESETS["eq5"])
            coefs = [result.coef_for(f"current_bin{j}_x_log_mp_sender")
                     for j in range(1, 10)]
            rhos.append(float(stats.spearmanr(np.arange(1, 10), coefs).statistic))
            assert coefs[0] > coefs[-1]  # strongest decile above weakest
        elapsed = time.monotonic() - started
        worst = max(rhos)
        report(5, "eq5 interaction coefficients fall from decile 1 to 10; "
                  "Spearman rho <= -0.8 over 20 seeds, <60s",
               worst <= -0.8 and elapsed < 60.0,
               f"worst rho {worst:.3f}, {elapsed:.1f}s")


GRID12 = GridSpec(lon0=0.0, lat0=0.0, nlon=12, nlat=12)


def monte_carlo_panel(seed, betas, **dgp_kwargs):
    dgp_kwargs.setdefault("panel_size", 50_000)
    cfg = DgpConfig(seed=seed, spec=GRID12, true_betas=betas, **dgp_kwargs)
    mp = gen_mp_field(cfg)
    iy, ix = np.nonzero(mp.mask)
    exposure = {c: mp.cell_series(c) for c in zip(iy.tolist(), ix.tolist())}
    return gen_panel_frame(cfg, exposure)


class TestCriterion6SlopeRecovery:
    def test_eq1_coverage(self, tmp_path):
        betas = {"full": 0.00037}  # 0.37 per 1,000 births
        covered = 0
        truth_value = None
        for seed in range(100):
            frame, truth, clamped = monte_carlo_panel(seed, betas)
            assert clamped == 0
            if truth_value is None:
                # truth is consumed through the sidecar, never hard-coded
                write_truth(truth, tmp_path / "truth.csv")
                truth_value = read_truth(tmp_path / "truth.csv")["log_mp_local_full"]
            result = run_spec(frame, PRESETS["eq1"])
            est = result.coef_for("log_mp_local_full")
            se = result.se_for("log_mp_local_full")
            if abs(est - truth_value) <= 2.0 * se:
                covered += 1
        report(6, "eq1 estimate within 2 clustered SEs of the 0.37 per-1,000 "
                  "truth in >=95 of 100 seeds",
               covered >= 95, f"covered {covered}/100, truth {truth_value}")


class TestCriterion7PlaceboPattern:
    def test_eq2_window_profile(self):
        betas = {"trimester2": 0.008, "trimester3": 0.008}
        placebo_within = {"log_mp_local_preconception": 0,
                          "log_mp_local_postpartum": 0}
        t3_rejections = 0
        for seed in range(100):
            frame, _, _ = monte_carlo_panel(seed, betas, n_admin1=120)
            result = run_spec(frame, PRESETS["eq2"])
            for term in placebo_within:
                if abs(result.t_for(term)) < 1.96:
                    placebo_within[term] += 1
            if abs(result.t_for("log_mp_local_trimester3")) > 1.96:
                t3_rejections += 1
        ok = all(v >= 90 for v in placebo_within.values()) and t3_rejections >= 80
        report(7, "eq2 placebo windows stay insignificant (>=90/100) while "
                  "trimester 3 rejects (>=80/100)",
               ok, f"placebo {dict(placebo_within)}, trimester3 {t3_rejections}/100")


class TestCriterion8EconometricsOracle:
    def test_fe_cr1_and_multiway(self):
        rng = np.random.default_rng(2024)
        n = 2000
        g1 = rng.integers(0, 30, size=n)
        g2 = rng.integers(0, 20, size=n)
        X = rng.normal(size=(n, 3))
        y = X @ np.array([1.0, -2.0, 0.5]) + 0.4 * g1 - 0.2 * g2 \
            + rng.normal(size=n)
        panel = pd.DataFrame(X, columns=["x1", "x2", "x3"])
        panel["y"] = y
        panel["fe1"] = [f"a{v}" for v in g1]
        panel["fe2"] = [f"b{v}" for v in g2]
        panel["cl"] = [f"c{v}" for v in rng.integers(0, 15, size=n)]
        spec = PRESETS["eq1"].__class__(
            outcome="y", regressors=("x1", "x2", "x3"), fe=("fe1", "fe2"),
            clusters=("cl",), scale=1.0)
        result = run_spec(panel, spec)
        want = dummy_ols(y, X, [g1, g2])
        fe_err = float(np.abs(result.coef - want).max())

        cl = rng.integers(0, 12, size=n)
        beta, resid, _, _ = ols(X, y)
        vcov_one, _, _ = cluster_vcov(X, resid, [cl])
        cr1_err = float(np.abs(vcov_one - cr1_oracle(X, resid, cl)).max())

        dims = [rng.integers(0, 10, size=n), rng.integers(0, 9, size=n),
                rng.integers(0, 11, size=n)]
        vcov_three, _, repaired = cluster_vcov(X, resid, dims)
        assert not repaired  # this draw needs no PSD repair; compare raw sums
        multi_err = float(np.abs(vcov_three - multiway_oracle(X, resid, dims)).max())

        report(8, "FE OLS equals dummy OLS (1e-8); CR1 and 3-way CGM equal "
                  "direct sandwich oracles (1e-10)",
               fe_err <= 1e-8 and cr1_err <= 1e-10 and multi_err <= 1e-10,
               f"errs {fe_err:.1e}/{cr1_err:.1e}/{multi_err:.1e}")


class TestCriterion9InvarianceSuite:
    def test_scaling_and_shift(self):
        lam = 5.3
        cfg = DgpConfig(seed=31, spec=GRID12, panel_size=4000,
                        true_betas={"full": 0.002})
        mp = gen_mp_field(cfg)
        receivers = list(zip(*[a.tolist() for a in np.nonzero(mp.mask)]))
        exposure = {c: mp.cell_series(c) for c in receivers}
        frame, _, _ = monte_carlo_panel(31, {"full": 0.002}, panel_size=4000)
        base = run_spec(frame, PRESETS["eq1"])

        # regressor scaling: t unchanged to 1e-9
        scaled = frame.copy()
        scaled["log_mp_local_full"] = scaled["log_mp_local_full"] * 12.5
        after = run_spec(scaled, PRESETS["eq1"])
        t_err = abs(after.t_for("log_mp_local_full") - base.t_for("log_mp_local_full"))

        # exposure scaling by lambda: logged exposures shift by ln(lambda)
        # and the slope estimate is unchanged
        from drift_attrib.synth import gen_birth_panel
        births, _, _ = gen_birth_panel(cfg, exposure)
        scaled_exposure = {c: {m: v * lam for m, v in s.items()}
                           for c, s in exposure.items()}
        p1, _ = assemble_panel(births, {"local": exposure}, GRID12, mp.mask)
        p2, _ = assemble_panel(births, {"local": scaled_exposure}, GRID12, mp.mask)
        shift_err = float(np.abs(
            (p2["log_mp_local_full"] - p1["log_mp_local_full"]) - math.log(lam)
        ).max())
        r1 = run_spec(p1, PRESETS["eq1"])
        r2 = run_spec(p2, PRESETS["eq1"])
        slope_err = abs(r2.coef_for("log_mp_local_full")
                        - r1.coef_for("log_mp_local_full"))
        report(9, "regressor scaling preserves t (1e-9); exposure scaling "
                  "shifts logs by ln(lambda) and preserves the slope (1e-9)",
               t_err <= 1e-9 and shift_err <= 1e-12 and slope_err <= 1e-9,
               f"t err {t_err:.1e}, shift err {shift_err:.1e}, "
               f"slope err {slope_err:.1e}")


DETERMINISM_CONFIG = """\
out = "{out}"
workers = {workers}
seed = 11

[grid]
lon0 = 0.0
lat0 = 0.0
nlon = 10
nlat = 10

[transport]
max_steps = 20

[senders]
buffer_km = 30.0
spacing_km = 100.0

[period]
start = "2017-03-01"
end = "2017-08-31"

[windows]
full = [-2, -1]
postpartum = [0, 0]

[files]
mask = "{out}/mask.csv"
currents = "{out}/currents.csv"
concentration = "{out}/mp.csv"
births = "{out}/births.csv"

[regress]
specs = ["eq1"]

[synth]
field_kind = "random_divfree"
field_speed = 0.35
n_days = 150
start_day = "2017-03-01"
n_months = 12
start_month = "2017-01"
panel_size = 2000
land_border = 1
"""


class TestCriterion10Determinism:
    def test_byte_identical_output_trees(self, tmp_path):
        from click.testing import CliRunner
        from drift_attrib.cli import main

        def run_tree(out_dir, workers):
            config = tmp_path / f"run_{out_dir.name}.toml"
            config.write_text(DETERMINISM_CONFIG.format(out=out_dir.name,
                                                        workers=workers))
            runner = CliRunner()
            for step in ("synth", "score", "exposure", "regress"):
                result = runner.invoke(main, [step, "--config", str(config)],
                                       catch_exceptions=False)
                assert result.exit_code == 0, result.output
            return {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())}

        tree_a = run_tree(tmp_path / "a", 1)
        tree_b = run_tree(tmp_path / "b", 1)
        tree_c = run_tree(tmp_path / "c", 8)
        same_names = set(tree_a) == set(tree_b) == set(tree_c)
        identical = same_names and all(
            tree_a[k] == tree_b[k] == tree_c[k] for k in tree_a)
        report(10, "synth->score->exposure->regress is byte-identical across "
                   "reruns and at worker counts 1 and 8",
               identical, f"{len(tree_a)} files compared")
