"""
Two-measurement velocity protocol: probabilities, conditional moments,
ensemble velocity and current, variance, and error bounds.

A weak detector (resolution ``sigma_w``) records x_w at t_w, the state then
evolves freely for ``tau``, and a sharp detector (``sigma_s``) records x_s.
The ensemble velocity is

    v_e(x_s) = (x_s - E[x_w | x_s]) / tau

and the pipeline here computes it without any weak or sharp limit: the joint
probability P(x_w, x_s) is closed form (windows and free evolution keep the
Gaussian family), and the outer x_w integrals are done by adaptive
quadrature. Error bounds use analytic derivatives of rho and v at t_s.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import integrate

from . import povm
from .wavecore import (RHO_FLOOR_REL, NodeProximityError, ProtocolParams, QuadratureError,
                       WavePacket, default_window, evolve_coeffs, free_evolve, local_fields,
                       norm_squared_coeffs, shift_coeffs, smoothed_fields, window_coeffs)

# quadrature over x_w: integrands are normalized so that the zeroth moment is
# O(1); tolerances apply to these normalized moments
MOMENT_EPSABS = 1e-12
MOMENT_EPSREL = 1e-10
MOMENT_MARGIN = 10.0  # x_w window padding in units of sigma_w
MOMENT_LIMIT = 2000

# P(x_s) below this is treated as outside the support
PROB_FLOOR = 1e-300

# bound flagging: the sharp-detector correction sigma_s^2 rho''/4 in the
# denominator of eps_s is allowed to be at most this fraction of rho
NODE_RESOLUTION = 0.01

PROFILE_POINTS = 2048
PROFILE_SUPPORT_REL = 1e-6
SCAN_POINTS = 2**14

# regime thresholds
R1_MIN = 10.0
R2_MAX = 1.0
LAMBDA_SUPPORT_REL = 1e-3


class OutOfSupportError(ValueError):
    """Conditional quantity requested where P(x_s) is numerically zero."""


# ---------------------------------------------------------------------------
# probabilities and conditional moments
# ---------------------------------------------------------------------------

def joint_probability(psi: WavePacket, x_w, x_s, params: ProtocolParams):
    """P(x_w, x_s) = || S(x_s) U(tau) W(x_w) psi ||^2, broadcasting x_w and x_s.

    ``psi`` is the (normalized) state at t_w. Everything is computed in
    coordinates centred on x_s (free evolution and the windows commute with
    translations), which keeps the sharp window's large exponents from
    cancelling against each other.
    """
    x_w, x_s = np.broadcast_arrays(np.asarray(x_w, dtype=float), np.asarray(x_s, dtype=float))
    cw = np.log(povm.kraus_norm(params.sigma_w))
    cs = np.log(povm.kraus_norm(params.sigma_s))
    a, b, g = shift_coeffs(psi.alpha, psi.beta, psi.gamma, x_s[..., None])
    a, b, g = window_coeffs(a, b, g, (x_w - x_s)[..., None], params.sigma_w, cw)
    a, b, g = evolve_coeffs(a, b, g, params.tau, params.mass, params.hbar)
    a, b, g = window_coeffs(a, b, g, 0.0, params.sigma_s, cs)
    return norm_squared_coeffs(np.broadcast_to(a, b.shape), b, g)


def kick_variance(params: ProtocolParams) -> float:
    """Variance of the Gaussian that blurs rho(t_s) into P(x_s).

    sigma_s^2/2 from the sharp detector plus (hbar tau / m sigma_w)^2 / 2 from
    the momentum kick of the weak one.
    """
    kick = params.hbar * params.tau / (params.mass * params.sigma_w)
    return 0.5 * params.sigma_s**2 + 0.5 * kick**2


class ConditionalMoments(NamedTuple):
    """x_w statistics conditioned on x_s (arrays over x_s)."""

    x_s: np.ndarray
    prob: np.ndarray     # P(x_s)
    offset: np.ndarray   # E[x_s - x_w | x_s]
    var: np.ndarray      # var(x_w | x_s)

    @property
    def mean(self) -> np.ndarray:
        return self.x_s - self.offset


def xw_moments(psi: WavePacket, x_s, params: ProtocolParams, epsabs: float = MOMENT_EPSABS,
               epsrel: float = MOMENT_EPSREL) -> ConditionalMoments:
    """Zeroth to second x_w moments of P(x_w, x_s) for every x_s at once.

    Substituting x_w = x_s + u sigma_w puts every integrand's peak near
    u = 0, so one vector-valued adaptive quadrature serves all x_s. The
    integrand is divided by the peak of a smooth density estimate (rho(t_s)
    blurred by ``kick_variance``), so the absolute tolerance is relative to
    the largest P(x_s) in the batch; the scale cancels in the returned
    values. Per-point normalization is avoided on purpose: at fringe minima
    the closed-form P(x_w, x_s) is a near-cancelling sum of interference
    terms whose rounding noise would then dominate the tolerance.
    """
    x_s = np.atleast_1d(np.asarray(x_s, dtype=float))
    sw = params.sigma_w
    lo, hi = default_window(psi)
    u_lo = (lo - MOMENT_MARGIN * sw - x_s.max()) / sw
    u_hi = (hi + MOMENT_MARGIN * sw - x_s.min()) / sw
    psi_ts = free_evolve(psi, params.tau, params)
    scale = np.max(smoothed_fields(psi_ts, x_s, kick_variance(params), params)["rho"])
    if not scale > PROB_FLOOR:
        raise OutOfSupportError("requested x_s lie entirely outside the support")
    n = x_s.size

    def integrand(u):
        p = joint_probability(psi, x_s + u * sw, x_s, params) * (sw / scale)
        return np.concatenate([p, u * p, u * u * p])

    pts = (0.0,) if u_lo < 0.0 < u_hi else None
    res, err, info = integrate.quad_vec(integrand, u_lo, u_hi, epsabs=epsabs, epsrel=epsrel,
                                        norm="max", limit=MOMENT_LIMIT, points=pts,
                                        full_output=True)
    if not info.success:
        raise QuadratureError(f"x_w moment quadrature failed: {info.message}", res, err)
    i0, i1, i2 = res[:n], res[n:2 * n], res[2 * n:]
    with np.errstate(divide="ignore", invalid="ignore"):
        eu = i1 / i0
        varu = i2 / i0 - eu**2
    return ConditionalMoments(x_s, scale * i0, -sw * eu, sw**2 * varu)


def _checked(m: ConditionalMoments) -> ConditionalMoments:
    if np.any(~(m.prob > PROB_FLOOR)):
        raise OutOfSupportError("P(x_s) is numerically zero at some requested x_s")
    return m


def _shape_like(x, arr):
    return arr.reshape(np.shape(x)) if np.ndim(x) else float(arr[0])


def second_marginal(psi: WavePacket, x_s, params: ProtocolParams):
    """P(x_s) = integral dx_w P(x_w, x_s)."""
    return _shape_like(x_s, xw_moments(psi, x_s, params).prob)


def conditional_mean(psi: WavePacket, x_s, params: ProtocolParams):
    """E[x_w | x_s]."""
    return _shape_like(x_s, _checked(xw_moments(psi, x_s, params)).mean)


def ensemble_velocity(psi: WavePacket, x_s, params: ProtocolParams):
    """v_e = (x_s - E[x_w | x_s]) / tau."""
    return _shape_like(x_s, _checked(xw_moments(psi, x_s, params)).offset / params.tau)


def ensemble_current(psi: WavePacket, x_s, params: ProtocolParams):
    """J_e = [P(x_s) x_s - integral x_w P(x_w, x_s) dx_w] / tau = v_e P(x_s)."""
    m = xw_moments(psi, x_s, params)
    return _shape_like(x_s, m.prob * np.where(m.prob > PROB_FLOOR, m.offset, 0.0) / params.tau)


def velocity_variance(psi: WavePacket, x_s, params: ProtocolParams, mode: str = "exact"):
    """Conditional variance of (x_s - x_w)/tau.

    ``exact``: var(x_w | x_s) / tau^2 from second-moment quadrature.
    ``asymptotic``: sigma_w^2 / (2 tau^2) + (2/m) Q_B(x_s, t_s).
    ``local_momentum``: sigma_w^2 / (2 tau^2) + Q_B/m + u^2/2 with the
    osmotic velocity u = (hbar/2m) rho'/rho. The last two terms are the
    phase-space conditional momentum variance at x_s divided by m^2, which
    is what the exact mode tends to as sigma_s and the weak kick go to zero.
    """
    if mode == "exact":
        return _shape_like(x_s, _checked(xw_moments(psi, x_s, params)).var / params.tau**2)
    lead = params.sigma_w**2 / (2 * params.tau**2)
    if mode in ("asymptotic", "local_momentum"):
        psi_ts = free_evolve(psi, params.tau, params)
        f = local_fields(psi_ts, np.atleast_1d(x_s), params)
        if mode == "asymptotic":
            return _shape_like(x_s, lead + 2.0 * f["Q_B"] / params.mass)
        u = params.hbar / (2.0 * params.mass) * f["drho"] / f["rho"]
        return _shape_like(x_s, lead + f["Q_B"] / params.mass + 0.5 * u**2)
    raise ValueError(f"unknown mode {mode!r}")


def smeared_velocity(psi_at_ts: WavePacket, x_s, params: ProtocolParams, rho_floor=None):
    """J_bar / rho_bar with kernel exp(-(x - x_s)^2 / sigma_s^2) at t_s."""
    f = smoothed_fields(psi_at_ts, np.atleast_1d(x_s), 0.5 * params.sigma_s**2, params)
    if rho_floor is not None and np.any(f["rho"] <= rho_floor):
        raise NodeProximityError("smeared density below floor")
    return _shape_like(x_s, f["J"] / f["rho"])


# ---------------------------------------------------------------------------
# error bounds
# ---------------------------------------------------------------------------

def weak_kick_factor(params: ProtocolParams) -> float:
    """tau^2 hbar^2 / (4 m^2 sigma_w^2)."""
    return (params.tau * params.hbar / (2.0 * params.mass * params.sigma_w)) ** 2


def node_mask(fields: dict, params: ProtocolParams, rho_floor=None) -> np.ndarray:
    """Points where the velocity bounds are not trusted.

    A point is flagged when rho is below the node floor, when either bound's
    denominator is non-positive, or when the sharp-detector term
    sigma_s^2 |rho''| / 4 exceeds ``NODE_RESOLUTION`` times rho, i.e. the
    detector does not resolve the local curvature of the density. The last
    rule depends on sigma_s only, so the flagged set does not move when
    sigma_w or tau change.
    """
    rho, d2rho = fields["rho"], fields["d2rho"]
    if rho_floor is None:
        rho_floor = RHO_FLOOR_REL * np.max(rho)
    den_w = rho + weak_kick_factor(params) * d2rho
    den_s = 4.0 * rho + params.sigma_s**2 * d2rho
    with np.errstate(divide="ignore", invalid="ignore"):
        curvature = params.sigma_s**2 * np.abs(d2rho) / (4.0 * rho)
    return (rho <= rho_floor) | (den_w <= 0) | (den_s <= 0) | ~(curvature <= NODE_RESOLUTION)


def _fields(psi_at_ts, x_s, params, fields):
    return local_fields(psi_at_ts, np.atleast_1d(x_s), params) if fields is None else fields


def eps_w(psi_at_ts: WavePacket, x_s, params: ProtocolParams, fields=None, rho_floor=None):
    """Weak-detector velocity error bound, inf where flagged by ``node_mask``.

    eps_w = (k/tau) |[2(1 - tau v') rho' - tau rho v''] / [rho + k rho'']|,
    k = tau^2 hbar^2 / (4 m^2 sigma_w^2).
    """
    f = _fields(psi_at_ts, x_s, params, fields)
    k = weak_kick_factor(params)
    t = params.tau
    num = 2.0 * (1.0 - t * f["dv"]) * f["drho"] - t * f["rho"] * f["d2v"]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = k / t * np.abs(num / (f["rho"] + k * f["d2rho"]))
    return np.where(node_mask(f, params, rho_floor), np.inf, out)


def eps_s(psi_at_ts: WavePacket, x_s, params: ProtocolParams, fields=None, rho_floor=None,
          cross_sign: float = -1.0):
    """Sharp-detector velocity error bound, inf where flagged by ``node_mask``.

    eps_s = sigma_s^2 |[(2/tau) rho' + c 2 rho' v' - rho v''] / [4 rho + sigma_s^2 rho'']|

    with c = ``cross_sign``. The default c = -1 is what the second-order
    expansion of v_e - v gives, and with it eps_w + eps_s reproduces that
    expansion exactly. c = +1 is the alternative sign sometimes quoted; it
    is kept for comparison.
    """
    f = _fields(psi_at_ts, x_s, params, fields)
    ss = params.sigma_s**2
    num = 2.0 / params.tau * f["drho"] + cross_sign * 2.0 * f["drho"] * f["dv"] - f["rho"] * f["d2v"]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ss * np.abs(num / (4.0 * f["rho"] + ss * f["d2rho"]))
    return np.where(node_mask(f, params, rho_floor), np.inf, out)


def _d2_current(f):
    return f["d2rho"] * f["v"] + 2.0 * f["drho"] * f["dv"] + f["rho"] * f["d2v"]


def eps_current_w(psi_at_ts: WavePacket, x_s, params: ProtocolParams, fields=None):
    """Weak-detector bound on |J_e - J|: (k/tau) |2 rho' - tau J''|. Finite at nodes."""
    f = _fields(psi_at_ts, x_s, params, fields)
    k = weak_kick_factor(params)
    return k / params.tau * np.abs(2.0 * f["drho"] - params.tau * _d2_current(f))


def eps_current_s(psi_at_ts: WavePacket, x_s, params: ProtocolParams, fields=None):
    """Sharp-detector bound on |J_e - J|: (sigma_s^2/4) |(2/tau) rho' - J''|."""
    f = _fields(psi_at_ts, x_s, params, fields)
    return params.sigma_s**2 / 4.0 * np.abs(2.0 / params.tau * f["drho"] - _d2_current(f))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeReport:
    weak_speed: float        # sigma_w / tau
    sharp_speed: float       # hbar / (m sigma_s)
    r1: float                # weak_speed / sharp_speed
    sigma_s: float
    wavelength: float        # h / (m max|v|)
    r2: float                # sigma_s / wavelength
    max_velocity: float
    r1_ok: bool
    r2_ok: bool

    @property
    def ok(self) -> bool:
        return self.r1_ok and self.r2_ok

    def as_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                for k, v in self.__dict__.items()}


def regime_report(psi: WavePacket, params: ProtocolParams) -> RegimeReport:
    """Where the parameters sit relative to the weak/sharp validity conditions.

    ``psi`` is the state at t_w; velocities are taken at t_s over the region
    where rho exceeds ``LAMBDA_SUPPORT_REL`` of its maximum.
    """
    weak = params.sigma_w / params.tau
    sharp = params.hbar / (params.mass * params.sigma_s)
    psi_ts = free_evolve(psi, params.tau, params)
    lo, hi = default_window(psi_ts)
    x = np.linspace(lo, hi, SCAN_POINTS)
    f = local_fields(psi_ts, x, params)
    keep = f["rho"] > LAMBDA_SUPPORT_REL * f["rho"].max()
    vmax = float(np.max(np.abs(f["v"][keep])))
    h = 2.0 * np.pi * params.hbar
    lam = h / (params.mass * vmax) if vmax > 0 else np.inf
    r1 = weak / sharp
    r2 = params.sigma_s / lam
    return RegimeReport(weak, sharp, r1, params.sigma_s, lam, r2, vmax,
                        bool(r1 > R1_MIN), bool(r2 < R2_MAX))


def required_samples(eps_target: float, params: ProtocolParams) -> int:
    """Smallest N with sigma_w / (tau sqrt(2N)) <= eps_target."""
    if not eps_target > 0:
        raise ValueError("eps_target must be positive")
    n = (params.sigma_w / params.tau) ** 2 / (2.0 * eps_target**2)
    # guard against n landing a rounding error above an integer
    return max(1, int(np.ceil(n * (1.0 - 1e-12))))


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

def profile_positions(psi_at_ts: WavePacket, params: ProtocolParams,
                      n: int = PROFILE_POINTS) -> np.ndarray:
    """Uniform x_s grid over the region where the smeared density exceeds
    ``PROFILE_SUPPORT_REL`` of its maximum."""
    lo, hi = default_window(psi_at_ts)
    x = np.linspace(lo, hi, SCAN_POINTS)
    rho = smoothed_fields(psi_at_ts, x, 0.5 * params.sigma_s**2, params)["rho"]
    idx = np.flatnonzero(rho > PROFILE_SUPPORT_REL * rho.max())
    return np.linspace(x[idx[0]], x[idx[-1]], n)


@dataclass(frozen=True)
class VelocityProfile:
    """Reconstructed and exact velocities/currents on an x_s grid, with bounds."""

    positions: np.ndarray
    v_e: np.ndarray
    v_exact: np.ndarray
    v_smeared: np.ndarray
    J_e: np.ndarray
    J_exact: np.ndarray
    rho: np.ndarray
    prob: np.ndarray
    eps_w_bound: np.ndarray
    eps_s_bound: np.ndarray
    eps_J_w: np.ndarray
    eps_J_s: np.ndarray
    params: ProtocolParams = field(repr=False)

    _ARRAYS = ("positions", "v_e", "v_exact", "v_smeared", "J_e", "J_exact", "rho", "prob",
               "eps_w_bound", "eps_s_bound", "eps_J_w", "eps_J_s")

    def __post_init__(self):
        n = None
        for name in self._ARRAYS:
            a = np.array(getattr(self, name), dtype=float).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            if n is None:
                n = a.size
            elif a.size != n:
                raise ValueError(f"{name} has length {a.size}, expected {n}")
        if n < 2 or not np.all(np.diff(self.positions) > 0):
            raise ValueError("positions must be strictly increasing with at least two points")

    def __len__(self):
        return self.positions.size

    @property
    def flagged(self) -> np.ndarray:
        return ~np.isfinite(self.eps_w_bound) | ~np.isfinite(self.eps_s_bound)


def compute_profile(psi: WavePacket, params: ProtocolParams, positions=None,
                    n: int = PROFILE_POINTS, quadrature: bool = True,
                    cross_sign: float = -1.0) -> VelocityProfile:
    """Full profile for the state ``psi`` at t_w.

    With ``quadrature=False`` the ensemble columns (v_e, J_e, prob) are NaN
    and only the exact fields and bounds are evaluated.
    """
    psi_ts = free_evolve(psi, params.tau, params)
    x = profile_positions(psi_ts, params, n) if positions is None else np.asarray(positions, float)
    f = local_fields(psi_ts, x, params)
    if quadrature:
        m = xw_moments(psi, x, params)
        with np.errstate(invalid="ignore"):
            v_e = np.where(m.prob > PROB_FLOOR, m.offset / params.tau, np.nan)
        prob = m.prob
        j_e = prob * np.nan_to_num(v_e)
    else:
        v_e = prob = j_e = np.full(x.shape, np.nan)
    return VelocityProfile(
        positions=x, v_e=v_e, v_exact=f["v"],
        v_smeared=smeared_velocity(psi_ts, x, params),
        J_e=j_e, J_exact=f["J"], rho=f["rho"], prob=prob,
        eps_w_bound=eps_w(psi_ts, x, params, fields=f),
        eps_s_bound=eps_s(psi_ts, x, params, fields=f, cross_sign=cross_sign),
        eps_J_w=eps_current_w(psi_ts, x, params, fields=f),
        eps_J_s=eps_current_s(psi_ts, x, params, fields=f),
        params=params)


class IntegratedError(NamedTuple):
    value: float
    excluded_fraction: float


def integrated_error(profile: VelocityProfile, which: str = "total",
                     quantity: str = "velocity") -> IntegratedError:
    """(sum eps(x)^2 / sum ref(x)^2)^(1/2) over the profile's uniform grid.

    ``which`` selects the bound ("w", "s", "total" = eps_w + eps_s) or the
    realized error ("observed" = |v_e - v|, or |J_e - J| for currents).
    ``quantity`` is "velocity" (reference v) or "current" (reference J).
    Flagged positions are left out of both sums for velocities; current
    bounds are finite at nodes and nothing is excluded for them.
    """
    if quantity == "velocity":
        ref = profile.v_exact
        parts = {"w": profile.eps_w_bound, "s": profile.eps_s_bound,
                 "observed": np.abs(profile.v_e - profile.v_exact)}
        excluded = profile.flagged
    elif quantity == "current":
        ref = profile.J_exact
        parts = {"w": profile.eps_J_w, "s": profile.eps_J_s,
                 "observed": np.abs(profile.J_e - profile.J_exact)}
        excluded = np.zeros(len(profile), dtype=bool)
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    if which == "total":
        eps = parts["w"] + parts["s"]
    elif which in parts:
        eps = parts[which]
    else:
        raise ValueError(f"unknown error kind {which!r}")
    excluded = excluded | ~np.isfinite(eps)
    keep = ~excluded
    denom = np.sum(ref[keep] ** 2)
    if not denom > 0:
        raise ValueError("reference profile vanishes on the unflagged points")
    return IntegratedError(float(np.sqrt(np.sum(eps[keep] ** 2) / denom)),
                           float(excluded.mean()))


def integrated_bounds(psi_at_ts: WavePacket, params: ProtocolParams, positions,
                      fields=None) -> dict:
    """Integrated eps_w, eps_s and their sum for velocity and current, without
    running the quadrature pipeline (the bounds depend on the t_s state only)."""
    f = _fields(psi_at_ts, positions, params, fields)
    ew = eps_w(psi_at_ts, positions, params, fields=f)
    es = eps_s(psi_at_ts, positions, params, fields=f)
    keep = np.isfinite(ew) & np.isfinite(es)
    v2 = np.sum(f["v"][keep] ** 2)
    jw = eps_current_w(psi_at_ts, positions, params, fields=f)
    js = eps_current_s(psi_at_ts, positions, params, fields=f)
    j2 = np.sum(f["J"] ** 2)

    def ratio(e, keep_, ref2):
        return float(np.sqrt(np.sum(e[keep_] ** 2) / ref2))

    everything = np.ones_like(keep)
    return {
        "eps_w_int": ratio(ew, keep, v2), "eps_s_int": ratio(es, keep, v2),
        "eps_total_int": ratio(ew + es, keep, v2), "excluded_fraction": float(1.0 - keep.mean()),
        "current_eps_w_int": ratio(jw, everything, j2), "current_eps_s_int": ratio(js, everything, j2),
        "current_eps_total_int": ratio(jw + js, everything, j2),
    }


def total_probability(psi: WavePacket, params: ProtocolParams, n: int = 2**14,
                      tol: float = 1e-10) -> float:
    """Double integral of P(x_w, x_s): x_w by ``xw_moments``, then x_s by the
    trapezoid rule on a uniform grid of ``n`` + 1 points.

    The x_s integrand is smooth and decays like a Gaussian, where the
    trapezoid rule converges spectrally; the half-resolution sum (every other
    point) serves as the error estimate and must agree to ``tol``.
    """
    psi_ts = free_evolve(psi, params.tau, params)
    lo, hi = default_window(psi_ts)
    pad = MOMENT_MARGIN * np.sqrt(kick_variance(params))
    x = np.linspace(lo - pad, hi + pad, n + 1)
    p = xw_moments(psi, x, params).prob
    dx = x[1] - x[0]
    full = dx * (p.sum() - 0.5 * (p[0] + p[-1]))
    half = 2.0 * dx * (p[::2].sum() - 0.5 * (p[0] + p[-1]))
    if abs(full - half) > tol:
        raise QuadratureError("total probability not resolved on the x_s grid", full,
                              abs(full - half))
    return float(full)
