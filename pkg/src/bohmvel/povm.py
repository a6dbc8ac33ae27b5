"""
Gaussian Kraus operators for imprecise position detectors.

A detector with resolution ``sigma`` that reports ``center`` acts as

    K = C * integral dx exp(-(center - x)^2 / (2 sigma^2)) |x><x|,
    C = (sqrt(pi) sigma)^(-1/2),

so that integrating K^dagger K over all outcomes gives the identity. On the
Gaussian-superposition representation K is just a window on every term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .wavecore import (ProtocolParams, QuadratureError, WavePacket, default_window,
                       gaussian_window, norm_squared_coeffs, shift_coeffs,
                       window_coeffs)

# outer-integral controls for integrals over detector outcomes
OUTCOME_EPSABS = 1e-10
OUTCOME_EPSREL = 1e-12
OUTCOME_MARGIN = 10.0  # window half-width padding, in units of sigma


def kraus_norm(sigma: float) -> float:
    """C = (sqrt(pi) sigma)^(-1/2)."""
    return float((np.sqrt(np.pi) * sigma) ** -0.5)


@dataclass(frozen=True)
class KrausGaussian:
    """Gaussian position-measurement operator for one outcome ``center``."""

    center: float
    sigma: float
    norm_const: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if not np.isfinite(self.center):
            raise ValueError("center must be finite")
        expected = kraus_norm(self.sigma)
        if abs(self.norm_const / expected - 1.0) > 1e-14:
            raise ValueError("norm_const inconsistent with sigma")

    @property
    def log_norm(self) -> float:
        return float(np.log(self.norm_const))


def make_kraus(center: float, sigma: float) -> KrausGaussian:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    return KrausGaussian(float(center), float(sigma), kraus_norm(sigma))


def apply_kraus(packet: WavePacket, k: KrausGaussian) -> WavePacket:
    """K|psi>, unnormalized; its squared norm is the outcome density."""
    return gaussian_window(packet, k.center, k.sigma, k.log_norm)


def outcome_density(packet: WavePacket, centers, sigma: float):
    """<psi|K^dagger K|psi> for an array of outcomes, vectorized."""
    centers = np.asarray(centers, dtype=float)
    # move each outcome to the origin first: windowing far from the origin
    # builds exponent terms of size (center/sigma)^2 that cancel in the norm
    a, b, g = shift_coeffs(packet.alpha, packet.beta, packet.gamma, centers[..., None])
    a, b, g = window_coeffs(a, b, g, 0.0, sigma, np.log(kraus_norm(sigma)))
    a = np.broadcast_to(a, b.shape)
    return norm_squared_coeffs(a, b, g)


def outcome_window(packet: WavePacket, sigma: float) -> tuple[float, float]:
    """Range of outcomes holding essentially all of the outcome probability."""
    lo, hi = default_window(packet)
    return lo - OUTCOME_MARGIN * sigma, hi + OUTCOME_MARGIN * sigma


def _term_centers(packet: WavePacket):
    return np.sort(-packet.beta.real / (2.0 * packet.alpha.real))


def completeness_residual(sigma: float, probe: WavePacket, epsabs: float = OUTCOME_EPSABS,
                          epsrel: float = OUTCOME_EPSREL, limit: int = 500) -> float:
    """|integral dc <probe|K_c^dagger K_c|probe> - 1| by adaptive quadrature.

    Raises ``QuadratureError`` (with the achieved estimate) if the
    integrator reports non-convergence.
    """
    lo, hi = outcome_window(probe, sigma)
    pts = [c for c in _term_centers(probe) if lo < c < hi]
    val, err, info, *rest = integrate.quad(lambda c: float(outcome_density(probe, c, sigma)),
                                           lo, hi, points=pts or None, epsabs=epsabs,
                                           epsrel=epsrel, limit=limit, full_output=1)
    if rest:
        raise QuadratureError(f"completeness integral did not converge: {rest[0]}", val, err)
    return abs(val - 1.0)


def first_marginal(psi: WavePacket, x_w, params: ProtocolParams):
    """P(x_w) = <psi|W^dagger W|psi> for the weak detector (array-friendly)."""
    return outcome_density(psi, x_w, params.sigma_w)
