import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from bohmvel import povm
from bohmvel import protocol as pr
from bohmvel import sampler as sm
from bohmvel import wavecore as wc
from bohmvel.wavecore import ProtocolParams, WavePacket

from conftest import ENSEMBLE_SIZE

KS_LEVEL = 0.01


def fidelity(a: WavePacket, b: WavePacket, lo: float, hi: float, n: int = 2**16) -> float:
    """|<a|b>|^2 / (<a|a><b|b>) by a grid sum."""
    x = np.linspace(lo, hi, n)
    va, vb = wc.evaluate(a, x), wc.evaluate(b, x)
    return float(np.abs(np.vdot(va, vb)) ** 2 / (np.vdot(va, va).real * np.vdot(vb, vb).real))


def gauss_legendre_cells(edges, k):
    """Nodes and weights of a k-point rule on every cell, shape (cells, k)."""
    t, w = np.polynomial.legendre.leggauss(k)
    a, b = edges[:-1, None], edges[1:, None]
    return 0.5 * (a + b) + 0.5 * (b - a) * t, 0.5 * (b - a) * w


def tabulated(psi, sigma):
    return sm.tabulate_outcomes(psi.alpha[None], psi.beta[None], psi.gamma[None], sigma)


# ---------------------------------------------------------------------------
# first stage
# ---------------------------------------------------------------------------

class TestDrawFirst:
    def test_weak_limit_mean(self, rng):
        psi = WavePacket.gaussian(30e-9, 1e-9)
        p = ProtocolParams(tau=1e-12, sigma_w=1e-6, sigma_s=1e-10)
        x = sm.draw_first(psi, p, rng, size=100_000)
        assert abs(x.mean() - 30e-9) < 4 * x.std() / np.sqrt(x.size)
        assert x.std() == pytest.approx(1e-6 / np.sqrt(2), rel=0.01)

    def test_parity_mean(self, slit_psi_w, slit, rng):
        x = sm.draw_first(slit_psi_w, slit.params, rng, size=100_000)
        assert abs(x.mean()) < 4 * x.std() / np.sqrt(x.size)

    def test_ks_against_table(self, slit_psi_w, slit, rng):
        table = tabulated(slit_psi_w, slit.params.sigma_w)
        x = sm.draw_first(slit_psi_w, slit.params, rng, size=10_000)
        assert stats.kstest(x, lambda c: table.cdf_at(c)).pvalue > KS_LEVEL

    def test_ks_against_marginal(self, slit_psi_w, slit, rng):
        lo, hi = povm.outcome_window(slit_psi_w, slit.params.sigma_w)
        grid = np.linspace(lo, hi, 2**15)
        pdf = povm.first_marginal(slit_psi_w, grid, slit.params)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
        x = sm.draw_first(slit_psi_w, slit.params, rng, size=10_000)
        assert stats.kstest(x, lambda c: np.interp(c, grid, cdf)).pvalue > KS_LEVEL

    def test_scalar_draw(self, slit_psi_w, slit, rng):
        assert isinstance(sm.draw_first(slit_psi_w, slit.params, rng), float)


class TestOutcomeTables:
    def test_cdf_endpoints_and_monotone(self, slit_psi_w, slit):
        table = tabulated(slit_psi_w, slit.params.sigma_w)
        assert table.cdf[0, 0] == 0.0 and table.cdf[0, -1] == 1.0
        assert np.all(np.diff(table.cdf[0]) >= 0)
        assert table.cdf_at(-1.0) == 0.0 and table.cdf_at(1.0) == 1.0

    def test_invert_is_inverse(self, slit_psi_w, slit):
        table = tabulated(slit_psi_w, slit.params.sigma_w)
        u = np.linspace(0.01, 0.99, 99)
        x = table.invert(u, np.zeros(u.size, dtype=int))
        assert np.all(np.diff(x) > 0)
        u_eff = sm.TAIL_MASS + (1 - 2 * sm.TAIL_MASS) * u
        assert np.allclose(table.cdf_at(x), u_eff, atol=1e-12)

    def test_rows_must_match(self, slit_psi_w, slit):
        table = tabulated(slit_psi_w, slit.params.sigma_w)
        with pytest.raises(ValueError):
            table.invert(np.array([0.5, 0.5]), np.array([0]))


# ---------------------------------------------------------------------------
# collapse
# ---------------------------------------------------------------------------

class TestCollapse:
    def test_weak_limit_fidelity(self):
        psi = WavePacket.gaussian(0.0, 1e-9)
        p = ProtocolParams(tau=1e-12, sigma_w=1e-5, sigma_s=1e-10)
        out = sm.collapse(psi, 2e-6, p)
        assert fidelity(psi, out, -2e-8, 2e-8) > 1 - 1e-6

    def test_selects_one_slit(self, slit):
        psi = slit.initial_packet()
        p = slit.params.replace(sigma_w=10e-9)
        left = slit.terms[0] if slit.terms[0].center_m < 0 else slit.terms[1]
        single = WavePacket.gaussian(left.center_m, left.sigma0_m)
        out = sm.collapse(psi, left.center_m, p)
        assert fidelity(single, out, -1.5e-7, 1.5e-7) > 0.99

    @settings(max_examples=40, deadline=None)
    @given(xw=st.floats(-1e-6, 1e-6))
    def test_normalized(self, slit_psi_w, slit, xw):
        assert wc.norm_squared(sm.collapse(slit_psi_w, xw, slit.params)) == pytest.approx(1.0, abs=1e-12)

    def test_zero_probability_rejected(self, slit_psi_w, slit):
        with pytest.raises(ValueError):
            sm.collapse(slit_psi_w, 1.0, slit.params)

    def test_is_windowed_state(self, slit_psi_w, slit):
        out = sm.collapse(slit_psi_w, 1e-7, slit.params)
        x = np.linspace(-5e-7, 5e-7, 101)
        ratio = wc.evaluate(out, x) / wc.evaluate(slit_psi_w, x)
        window = np.exp(-(x - 1e-7) ** 2 / (2 * slit.params.sigma_w**2))
        assert np.allclose(ratio / window, ratio[50] / window[50], rtol=1e-9)


# ---------------------------------------------------------------------------
# second stage
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def evolved(slit_psi_w, slit):
    """Centre-collapsed double slit, evolved to t_s."""
    return wc.free_evolve(sm.collapse(slit_psi_w, 0.0, slit.params), slit.params.tau, slit.params)


class TestDrawSecond:
    def test_ks_against_grid_density(self, slit, evolved, rng):
        p = slit.params
        x = np.linspace(-3e-6, 3e-6, 2**16, endpoint=False)
        dx = x[1] - x[0]
        g = oracles.slit_pair(x, slit.prep_time_s, slit.terms[0].sigma0_m)
        g = g * np.exp(-x**2 / (2 * p.sigma_w**2))
        rho = np.abs(oracles.spectral_evolve(g, dx, p.tau)) ** 2
        pdf = oracles.convolve_gaussian(rho, dx, p.sigma_s**2 / 2)
        cdf = np.cumsum(pdf)
        cdf /= cdf[-1]
        draws = sm.draw_second(evolved, p, rng, size=10_000)
        assert stats.kstest(draws, lambda c: np.interp(c, x + 0.5 * dx, cdf)).pvalue > KS_LEVEL

    def test_mean_at_centroid(self, slit, evolved, rng):
        draws = sm.draw_second(evolved, slit.params, rng, size=100_000)
        centroid = wc.position_moments(evolved)[0]
        assert abs(draws.mean() - centroid) < 4 * draws.std() / np.sqrt(draws.size)

    def test_broad_detector_envelope(self, slit, evolved, rng):
        p = slit.params.replace(sigma_s=1e-4)
        draws = sm.draw_second(evolved, p, rng, size=10_000)
        centroid = wc.position_moments(evolved)[0]
        assert stats.kstest(draws, stats.norm(centroid, 1e-4 / np.sqrt(2)).cdf).pvalue > KS_LEVEL


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

class TestRunEnsemble:
    def test_deterministic(self, slit_psi_w, slit):
        a = sm.run_ensemble(slit_psi_w, slit.params, 200, seed=7)
        b = sm.run_ensemble(slit_psi_w, slit.params, 200, seed=7)
        assert np.array_equal(a.x_w, b.x_w) and np.array_equal(a.x_s, b.x_s)
        c = sm.run_ensemble(slit_psi_w, slit.params, 200, seed=8)
        assert not np.array_equal(a.x_w, c.x_w)

    def test_prefix_and_batch_invariant(self, slit_psi_w, slit):
        full = sm.run_ensemble(slit_psi_w, slit.params, 150, seed=3)
        short = sm.run_ensemble(slit_psi_w, slit.params, 60, seed=3, batch=7)
        assert np.array_equal(full.x_s[:60], short.x_s)
        assert np.array_equal(full.x_w[:60], short.x_w)

    def test_records(self, slit_psi_w, slit):
        r = sm.run_ensemble(slit_psi_w, slit.params, 20, seed=1)
        assert len(r) == 20 and not r.failures
        assert list(r.seed_id) == list(range(20))
        recs = list(r)
        assert recs[3].seed_id == 3 and recs[3].x_w == r.x_w[3]
        assert len(r.head(5)) == 5

    def test_rejects_empty(self, slit_psi_w, slit):
        with pytest.raises(ValueError):
            sm.run_ensemble(slit_psi_w, slit.params, 0, seed=1)

    def test_record_must_be_finite(self):
        with pytest.raises(ValueError):
            sm.MeasurementRecord(np.nan, 0.0, 0)
        with pytest.raises(ValueError):
            sm.Records([0, 1], [0.0], [0.0, 1.0])

    def test_marginal_chi2(self, broad_psi, broad_params, broad_ensemble):
        xs = broad_ensemble.x_s
        sd = xs.std()
        edges = np.concatenate([[-12 * sd], np.linspace(-3 * sd, 3 * sd, 41), [12 * sd]])
        nodes, wts = gauss_legendre_cells(edges, 16)
        probs = np.sum(pr.second_marginal(broad_psi, nodes.ravel(), broad_params).reshape(nodes.shape) * wts,
                       axis=1)
        assert probs.sum() == pytest.approx(1.0, abs=1e-8)
        counts, _ = np.histogram(xs, edges)
        assert counts.sum() == len(broad_ensemble)
        expected = probs * counts.sum() / probs.sum()
        assert stats.chisquare(counts, expected).pvalue > KS_LEVEL

    def test_joint_chi2(self, broad_psi, broad_params, broad_ensemble):
        xs = broad_ensemble.x_s
        d = broad_ensemble.x_s - broad_ensemble.x_w
        q = np.linspace(0, 1, 21)[1:-1]

        def edges_of(v):
            sd = v.std()
            return np.concatenate([[v.mean() - 12 * sd], np.quantile(v, q), [v.mean() + 12 * sd]])

        ex, ed = edges_of(xs), edges_of(d)
        nx, wx = gauss_legendre_cells(ex, 12)
        nd, wd = gauss_legendre_cells(ed, 12)
        xs_n = nx[:, :, None, None]
        d_n = nd[None, None, :, :]
        dens = pr.joint_probability(broad_psi, xs_n - d_n, xs_n, broad_params)
        probs = np.einsum("aibj,ai,bj->ab", dens, wx, wd)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        counts, _, _ = np.histogram2d(xs, d, [ex, ed])
        expected = probs * counts.sum() / probs.sum()
        assert expected.min() > 5
        assert stats.chisquare(counts.ravel(), expected.ravel()).pvalue > KS_LEVEL

    def test_conditional_variance_matches_exact(self, broad_psi, broad_params, broad_ensemble):
        width = 0.25e-6
        sel = np.abs(broad_ensemble.x_s) < 1e-6
        sub = sm.Records(broad_ensemble.seed_id[sel], broad_ensemble.x_w[sel], broad_ensemble.x_s[sel])
        pooled = sm.pooled_conditional_variance(sub, width, broad_params, origin=-1e-6)
        centres = np.arange(-1e-6 + width / 2, 1e-6, width)
        exact = pr.velocity_variance(broad_psi, centres, broad_params)
        assert pooled == pytest.approx(np.mean(exact), rel=0.05)


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

class TestEstimateProfile:
    WIDTH = 0.2e-6

    def test_stderr_rule(self, broad_params, broad_ensemble):
        est = sm.estimate_profile(broad_ensemble, self.WIDTH, broad_params)
        big = est.counts >= 1000
        rule = broad_params.sigma_w / (broad_params.tau * np.sqrt(2 * est.counts[big]))
        assert big.sum() >= 5
        assert np.allclose(est.stderr[big], rule, rtol=0.15)

    def test_centre_bin_zero(self, broad_params, broad_ensemble):
        est = sm.estimate_profile(broad_ensemble, self.WIDTH, broad_params, origin=-self.WIDTH / 2)
        i = np.argmin(np.abs(est.bin_centers))
        assert abs(est.bin_centers[i]) < 1e-15
        assert abs(est.v_hat[i]) < 4 * est.stderr[i]

    def test_doubling_shrinks_stderr(self, broad_params, broad_ensemble):
        half = sm.estimate_profile(broad_ensemble.head(ENSEMBLE_SIZE // 2), self.WIDTH, broad_params)
        full = sm.estimate_profile(broad_ensemble, self.WIDTH, broad_params)
        common, i_h, i_f = np.intersect1d(half.bin_centers, full.bin_centers, return_indices=True)
        ok = half.counts[i_h] >= 100
        ratio = np.median(half.stderr[i_h][ok] / full.stderr[i_f][ok])
        assert ratio == pytest.approx(np.sqrt(2), rel=0.10)

    def test_bookkeeping(self, broad_params, broad_ensemble):
        est = sm.estimate_profile(broad_ensemble, self.WIDTH, broad_params)
        assert est.counts.sum() == len(broad_ensemble)
        assert np.all(est.stderr[est.counts >= 2] > 0)
        assert np.all(np.isnan(est.stderr[est.counts == 1]))
        assert np.array_equal(est.low_statistics, est.counts < sm.LOW_COUNT)
        assert np.all(np.diff(est.bin_centers) > 0)

    def test_rejects_bad_input(self, broad_params, broad_ensemble):
        with pytest.raises(ValueError):
            sm.estimate_profile(broad_ensemble.head(0), self.WIDTH, broad_params)
        with pytest.raises(ValueError):
            sm.estimate_profile(broad_ensemble, 0.0, broad_params)

    def test_double_slit_bins_match_ensemble_current(self, slit_psi_w, slit):
        p = slit.params
        records = sm.run_ensemble(slit_psi_w, p, 20_000, seed=99)
        width = 15e-9
        est = sm.estimate_profile(records, width, p)
        ok = est.counts >= 30
        edges = np.stack([est.bin_centers[ok] - width / 2, est.bin_centers[ok] + width / 2], axis=1)
        nodes, wts = gauss_legendre_cells(edges.ravel(), 8)
        nodes, wts = nodes[::2], wts[::2]
        m = pr.xw_moments(slit_psi_w, nodes.ravel(), p)
        prob = np.sum(m.prob.reshape(nodes.shape) * wts, axis=1)
        flux = np.sum((m.prob * m.offset).reshape(nodes.shape) * wts, axis=1) / p.tau
        z = (est.v_hat[ok] - flux / prob) / est.stderr[ok]
        assert ok.sum() > 50
        assert np.all(np.abs(z) < 4.5)
        assert np.std(z) == pytest.approx(1.0, abs=0.2)


class TestCsv:
    def test_round_trip(self, slit_psi_w, slit, tmp_path):
        r = sm.run_ensemble(slit_psi_w, slit.params, 50, seed=5)
        path = tmp_path / "records.csv"
        sm.write_records_csv(r, path, comment="manifest_sha256: abc")
        assert path.read_text().splitlines()[:2] == ["# manifest_sha256: abc", "seed_id,x_w_m,x_s_m"]
        back = sm.read_records_csv(path)
        assert np.array_equal(back.x_w, r.x_w) and np.array_equal(back.x_s, r.x_s)
        assert np.array_equal(back.seed_id, r.seed_id)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            sm.read_records_csv(path)
