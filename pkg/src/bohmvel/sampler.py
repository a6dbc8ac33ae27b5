"""
Monte Carlo laboratory runs of the two-measurement protocol.

Each run draws x_w from the weak detector's outcome density, collapses the
state onto that outcome, evolves it freely for ``tau`` and draws x_s from the
sharp detector's outcome density. Both one-dimensional densities are closed
form, so they are tabulated on a fixed grid and sampled by inverting a
monotone cubic (PCHIP) interpolant of the CDF.

Randomness: run ``i`` of an ensemble with master seed ``s`` uses its own
stream ``SeedSequence(s, spawn_key=(i,))``. Records therefore do not depend
on batching or on how many runs are requested (the first N runs of a larger
ensemble are the N-run ensemble).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import povm
from .wavecore import (MAX_EXPONENT, ProtocolParams, WavePacket, evolve_coeffs,
                       norm_squared_coeffs, pair_integrals, shift_coeffs, window_coeffs,
                       window_norm_quadratics)

TABLE_POINTS = 2**14
TAIL_MASS = 1e-12
# tabulation window: per-term centre and whole-state centroid +- this many
# amplitude standard deviations, padded by WINDOW_MARGIN detector widths
WINDOW_STD = 8.0
WINDOW_MARGIN = 10.0
# relative size of negative rounding noise tolerated in a tabulated density
NEGATIVE_TOL = 1e-10
BISECT_STEPS = 60
STENCIL = 6
BATCH = 32
LOW_COUNT = 10


class SamplingError(RuntimeError):
    """Outcome density could not be tabulated into a valid CDF."""


# ---------------------------------------------------------------------------
# batched tabulation and inversion
# ---------------------------------------------------------------------------

def _support_windows(alpha, beta, gamma, margin: float):
    """(lo, hi) per row for coefficient arrays of shape (B, K)."""
    m = pair_integrals(alpha, beta, gamma, order=2).sum(axis=(-2, -3)).real
    mean = m[:, 1] / m[:, 0]
    std = np.sqrt(np.maximum(m[:, 2] / m[:, 0] - mean**2, 0.0))
    ar = alpha.real
    centers = -beta.real / (2.0 * ar)
    widths = WINDOW_STD * np.sqrt(-1.0 / (2.0 * ar))
    reach = WINDOW_STD * np.sqrt(2.0) * std
    lo = np.minimum(mean - reach, np.min(centers - widths, axis=-1)) - margin
    hi = np.maximum(mean + reach, np.max(centers + widths, axis=-1)) + margin
    return lo, hi


@dataclass(frozen=True)
class OutcomeTables:
    """Tabulated outcome CDFs for a batch of states (one row per state)."""

    lo: np.ndarray
    dx: np.ndarray
    cdf: np.ndarray = field(repr=False)

    def invert(self, u, rows=None) -> np.ndarray:
        """x with CDF(x) = u, tails trimmed by ``TAIL_MASS``.

        ``rows[i]`` names the table row used for ``u[i]``; by default there
        is one uniform per row. The CDF between grid nodes is the PCHIP
        interpolant of the tabulated values. PCHIP node slopes depend only on
        the neighbouring secants, so the interpolant is built on a six-node
        stencil around the located cell, which reproduces the full-grid
        cubic on that cell.
        """
        u = TAIL_MASS + (1.0 - 2.0 * TAIL_MASS) * np.asarray(u, dtype=float).ravel()
        b, n = self.cdf.shape
        rows = np.arange(b) if rows is None else np.asarray(rows).ravel()
        if rows.size != u.size:
            raise ValueError("need one table row per uniform")
        cell = np.empty(u.size, dtype=np.int64)
        for r in np.unique(rows):
            sel = rows == r
            cell[sel] = np.searchsorted(self.cdf[r], u[sel], side="right") - 1
        cell = np.clip(cell, 0, n - 2)
        start = np.clip(cell - 2, 0, n - STENCIL)
        nodes = start[:, None] + np.arange(STENCIL)
        local = PchipInterpolator(np.arange(STENCIL, dtype=float), self.cdf[rows[:, None], nodes],
                                  axis=1)
        c = local.c[:, cell - start, np.arange(u.size)]
        lo_t = np.zeros(u.size)
        hi_t = np.ones(u.size)
        for _ in range(BISECT_STEPS):
            mid = 0.5 * (lo_t + hi_t)
            below = ((c[0] * mid + c[1]) * mid + c[2]) * mid + c[3] < u
            lo_t = np.where(below, mid, lo_t)
            hi_t = np.where(below, hi_t, mid)
        return self.lo[rows] + (cell + 0.5 * (lo_t + hi_t)) * self.dx[rows]

    def cdf_at(self, x, row: int = 0) -> np.ndarray:
        """Interpolated CDF of one row at positions ``x`` (0 and 1 outside the grid)."""
        n = self.cdf.shape[1]
        t = np.clip((np.asarray(x, dtype=float) - self.lo[row]) / self.dx[row], 0.0, n - 1.0)
        return PchipInterpolator(np.arange(n, dtype=float), self.cdf[row])(t)


def tabulate_outcomes(alpha, beta, gamma, sigma: float, n: int = TABLE_POINTS) -> OutcomeTables:
    """Tabulate <psi|K_c^dagger K_c|psi> over c for a batch of states.

    Coefficient arrays have shape (B, K). Raises ``SamplingError`` if any
    row's density has negative values beyond rounding noise or zero mass.
    """
    alpha, beta, gamma = (np.atleast_2d(np.asarray(v, dtype=complex)) for v in (alpha, beta, gamma))
    alpha = np.broadcast_to(alpha, beta.shape)
    lo, hi = _support_windows(alpha, beta, gamma, WINDOW_MARGIN * sigma)
    dx = (hi - lo) / (n - 1)
    # exponents are expanded about the window midpoint so grid offsets stay small
    mid = 0.5 * (lo + hi)
    x = (lo - mid)[:, None] + dx[:, None] * np.arange(n)
    sa, sb, sg = shift_coeffs(alpha, beta, gamma, mid[:, None])
    q2, q1, q0 = window_norm_quadratics(sa, sb, sg, sigma, np.log(povm.kraus_norm(sigma)))
    k = alpha.shape[-1]
    pdf = np.zeros(x.shape)
    # diagonal pairs are real; off-diagonal ones come in conjugate pairs
    for j in range(k):
        for i in range(j, k):
            if i == j:
                expo = (q2[:, j, j, None].real * x + q1[:, j, j, None].real) * x
                expo += q0[:, j, j, None].real
                if np.any(expo > MAX_EXPONENT):
                    raise SamplingError("outcome density overflow")
                pdf += np.exp(expo)
            else:
                expo = (q2[:, j, i, None] * x + q1[:, j, i, None]) * x + q0[:, j, i, None]
                if np.any(expo.real > MAX_EXPONENT):
                    raise SamplingError("outcome density overflow")
                pdf += 2.0 * np.exp(expo).real
    peak = pdf.max(axis=1, keepdims=True)
    if np.any(~(peak > 0)) or np.any(pdf < -NEGATIVE_TOL * peak):
        raise SamplingError("tabulated outcome density is not a valid density")
    pdf = np.maximum(pdf, 0.0)
    cdf = np.concatenate([np.zeros((pdf.shape[0], 1)),
                          np.cumsum(0.5 * (pdf[:, 1:] + pdf[:, :-1]), axis=1)], axis=1)
    cdf /= cdf[:, -1:]
    if np.any(np.diff(cdf, axis=1) < 0):
        raise SamplingError("tabulated CDF is not monotone")
    return OutcomeTables(lo, dx, cdf)


# ---------------------------------------------------------------------------
# single-draw operations
# ---------------------------------------------------------------------------

def _uniforms(rng, size):
    return rng.random() if size is None else rng.random(size)


def _draw(packet: WavePacket, sigma: float, rng, size):
    table = tabulate_outcomes(packet.alpha[None], packet.beta[None], packet.gamma[None], sigma)
    u = np.atleast_1d(_uniforms(rng, size)).ravel()
    x = table.invert(u, np.zeros(u.size, dtype=np.int64))
    return float(x[0]) if size is None else x.reshape(size)


def draw_first(psi: WavePacket, params: ProtocolParams, rng: np.random.Generator, size=None):
    """Sample x_w from the weak detector's outcome density."""
    return _draw(psi, params.sigma_w, rng, size)


def collapse(psi: WavePacket, x_w: float, params: ProtocolParams) -> WavePacket:
    """Normalized post-measurement state W(x_w)psi / ||W(x_w)psi||."""
    out = povm.apply_kraus(psi, povm.make_kraus(x_w, params.sigma_w))
    p = float(norm_squared_coeffs(out.alpha, out.beta, out.gamma))
    if not p > 0:
        raise ValueError(f"outcome x_w = {x_w!r} has zero probability")
    return WavePacket(out.alpha, out.beta, out.gamma - 0.5 * np.log(p), psi.time_label)


def draw_second(collapsed_evolved: WavePacket, params: ProtocolParams,
                rng: np.random.Generator, size=None):
    """Sample x_s from the sharp detector's outcome density on the given state."""
    return _draw(collapsed_evolved, params.sigma_s, rng, size)


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementRecord:
    x_w: float
    x_s: float
    seed_id: int

    def __post_init__(self):
        if not (np.isfinite(self.x_w) and np.isfinite(self.x_s)):
            raise ValueError("measurement record must be finite")


@dataclass(frozen=True)
class Records:
    """Column storage for an ensemble of runs, plus runs that failed."""

    seed_id: np.ndarray
    x_w: np.ndarray
    x_s: np.ndarray
    failures: tuple = ()

    def __post_init__(self):
        for name, dt in (("seed_id", np.int64), ("x_w", float), ("x_s", float)):
            a = np.array(getattr(self, name), dtype=dt).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not (self.seed_id.size == self.x_w.size == self.x_s.size):
            raise ValueError("record columns must have equal length")

    def __len__(self):
        return self.seed_id.size

    def __iter__(self) -> Iterator[MeasurementRecord]:
        for i, xw, xs in zip(self.seed_id, self.x_w, self.x_s):
            yield MeasurementRecord(float(xw), float(xs), int(i))

    def head(self, n: int) -> "Records":
        return Records(self.seed_id[:n], self.x_w[:n], self.x_s[:n],
                       tuple(f for f in self.failures if f[0] < n))


def run_uniforms(seed: int, n: int) -> np.ndarray:
    """(n, 2) uniforms; row i comes from the stream keyed by (seed, i)."""
    out = np.empty((n, 2))
    for i in range(n):
        out[i] = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))).random(2)
    return out


def run_ensemble(psi: WavePacket, params: ProtocolParams, n: int, seed: int,
                 batch: int = BATCH) -> Records:
    """``n`` independent runs on fresh copies of ``psi`` (the state at t_w).

    Runs whose second stage cannot be sampled are excluded and listed in
    ``Records.failures`` as (run index, reason).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    u = run_uniforms(seed, n)
    first = tabulate_outcomes(psi.alpha[None], psi.beta[None], psi.gamma[None], params.sigma_w)
    x_w = first.invert(u[:, 0], np.zeros(n, dtype=np.int64))
    x_s = np.full(n, np.nan)
    failures = []
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        a, b, g = window_coeffs(psi.alpha, psi.beta, psi.gamma, x_w[sl, None], params.sigma_w)
        a, b, g = evolve_coeffs(np.broadcast_to(a, b.shape), b, g, params.tau, params.mass,
                                params.hbar)
        norm = norm_squared_coeffs(a, b, g)
        ok = np.isfinite(norm) & (norm > 0)
        g = g - 0.5 * np.log(np.where(ok, norm, 1.0))[:, None]
        idx = np.flatnonzero(ok)
        for i in np.flatnonzero(~ok):
            failures.append((start + int(i), "zero-probability first outcome"))
        if idx.size == 0:
            continue
        try:
            table = tabulate_outcomes(a[idx], b[idx], g[idx], params.sigma_s)
            x_s[start + idx] = table.invert(u[start + idx, 1])
        except SamplingError:
            # retry one run at a time so only the offending runs are dropped
            for i in idx:
                try:
                    t1 = tabulate_outcomes(a[i:i + 1], b[i:i + 1], g[i:i + 1], params.sigma_s)
                    x_s[start + i] = t1.invert(u[start + i:start + i + 1, 1])[0]
                except SamplingError as exc:
                    failures.append((start + int(i), str(exc)))
    good = np.isfinite(x_s)
    return Records(np.flatnonzero(good), x_w[good], x_s[good], tuple(sorted(failures)))


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleEstimate:
    bin_centers: np.ndarray
    v_hat: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    low_statistics: np.ndarray

    def __len__(self):
        return self.bin_centers.size


def _bin_index(x_s, bin_width, origin):
    return np.floor((np.asarray(x_s) - origin) / bin_width).astype(np.int64)


def estimate_profile(records: Records, bin_width: float, params: ProtocolParams,
                     origin: float = 0.0) -> EnsembleEstimate:
    """Per-bin v_hat = mean(x_s - x_w)/tau and its standard error.

    Bins are [origin + k w, origin + (k+1) w); only occupied bins are
    returned. Bins with fewer than ``LOW_COUNT`` records are flagged; the
    standard error is NaN for single-record bins.
    """
    if len(records) == 0:
        raise ValueError("no records to estimate from")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    k = _bin_index(records.x_s, bin_width, origin)
    keys, inv, counts = np.unique(k, return_inverse=True, return_counts=True)
    d = (records.x_s - records.x_w) / params.tau
    s1 = np.bincount(inv, d)
    mean = s1 / counts
    ss = np.bincount(inv, (d - mean[inv]) ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(counts > 1, ss / (counts - 1), np.nan)
        stderr = np.sqrt(var / counts)
    return EnsembleEstimate(origin + (keys + 0.5) * bin_width, mean, stderr, counts,
                            counts < LOW_COUNT)


def pooled_conditional_variance(records: Records, bin_width: float, params: ProtocolParams,
                                origin: float = 0.0) -> float:
    """Within-bin variance of (x_s - x_w)/tau pooled over x_s bins."""
    k = _bin_index(records.x_s, bin_width, origin)
    _, inv, counts = np.unique(k, return_inverse=True, return_counts=True)
    d = (records.x_s - records.x_w) / params.tau
    mean = np.bincount(inv, d) / counts
    ss = np.bincount(inv, (d - mean[inv]) ** 2)
    dof = np.sum(counts - 1)
    if dof < 1:
        raise ValueError("not enough records for a pooled variance")
    return float(np.sum(ss) / dof)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

RECORD_COLUMNS = ("seed_id", "x_w_m", "x_s_m")


def write_records_csv(records: Records, path, comment: str | None = None) -> None:
    """Write records with full float precision; ``comment`` becomes a leading
    ``# ...`` line (used for the scenario manifest hash)."""
    with open(path, "w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for i, xw, xs in zip(records.seed_id, records.x_w, records.x_s):
            w.writerow([int(i), repr(float(xw)), repr(float(xs))])


def read_records_csv(path) -> Records:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if tuple(rows[0]) != RECORD_COLUMNS:
        raise ValueError(f"unexpected header {rows[0]!r}")
    data = rows[1:]
    return Records([int(r[0]) for r in data], [float(r[1]) for r in data],
                   [float(r[2]) for r in data])
