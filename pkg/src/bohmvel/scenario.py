"""
Scenario files: JSON with SI unit suffixes in every dimensional key.

Example (the built-in double slit)::

    {
      "name": "double_slit",
      "packet": {"terms": [
          {"center_m": -5e-08, "sigma0_m": 2.88e-09, "momentum_kg_m_per_s": 0.0,
           "amplitude": 1.0, "phase_rad": 0.0}, ...]},
      "sigma0_source": "calibrated",
      "prep_time_s": 1e-11,
      "params": {"tau_s": 1e-12, "sigma_w_m": 1.5e-07, "sigma_s_m": 2e-10,
                 "mass_kg": 9.1093837015e-31, "hbar_J_s": 1.054571817e-34},
      "sweep": {"axis1": {"key": "sigma_w_m", "min": 3e-08, "max": 1e-06,
                          "count": 25, "scale": "log"},
                "axis2": {"key": "tau_s", ...}}
    }

The initial packet lives at t = 0, the weak measurement happens at
``prep_time_s`` and the sharp one ``tau_s`` later. Sweeps over ``tau_s``
keep the sharp-measurement time fixed and move the weak one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .wavecore import ELECTRON_MASS, HBAR, ProtocolParams, WavePacket, free_evolve

PARAM_KEYS = {"tau_s": "tau", "sigma_w_m": "sigma_w", "sigma_s_m": "sigma_s",
              "mass_kg": "mass", "hbar_J_s": "hbar"}
AXIS_KEYS = ("sigma_w_m", "sigma_s_m", "tau_s")

# double-slit reference configuration
SLIT_SEPARATION = 100e-9
SNAPSHOT_TIME = 11e-12
TARGET_SUPPORT = 2000e-9
SUPPORT_REL = 1e-4
DEFAULT_TAU = 1e-12
DEFAULT_SIGMA_W = 150e-9
DEFAULT_SIGMA_S = 0.2e-9


class ScenarioError(ValueError):
    """Scenario content is missing, malformed or unphysical."""


@dataclass(frozen=True)
class TermSpec:
    center_m: float
    sigma0_m: float
    momentum_kg_m_per_s: float = 0.0
    amplitude: float = 1.0
    phase_rad: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma0_m) and self.sigma0_m > 0):
            raise ScenarioError(f"sigma0_m must be positive, got {self.sigma0_m!r}")
        for name in ("center_m", "momentum_kg_m_per_s", "amplitude", "phase_rad"):
            if not np.isfinite(getattr(self, name)):
                raise ScenarioError(f"{name} must be finite")


@dataclass(frozen=True)
class Axis:
    key: str
    min: float
    max: float
    count: int
    scale: str = "log"

    def __post_init__(self):
        if self.key not in AXIS_KEYS:
            raise ScenarioError(f"axis key must be one of {AXIS_KEYS}, got {self.key!r}")
        if not (0 < self.min < self.max) or self.count < 2:
            raise ScenarioError(f"bad axis range for {self.key}")
        if self.scale not in ("log", "linear"):
            raise ScenarioError("axis scale must be 'log' or 'linear'")

    def values(self) -> np.ndarray:
        if self.scale == "log":
            return np.geomspace(self.min, self.max, self.count)
        return np.linspace(self.min, self.max, self.count)


@dataclass(frozen=True)
class Scenario:
    name: str
    terms: tuple[TermSpec, ...]
    prep_time_s: float
    params: ProtocolParams
    sigma0_source: str = "user"
    sweep: tuple[Axis, Axis] | None = None
    profile_points: int = 2048
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.terms:
            raise ScenarioError("a scenario needs at least one packet term")
        if not (np.isfinite(self.prep_time_s) and self.prep_time_s >= 0):
            raise ScenarioError("prep_time_s must be non-negative")
        if self.profile_points < 2:
            raise ScenarioError("profile n_points must be at least 2")

    # -- states ------------------------------------------------------------
    def initial_packet(self) -> WavePacket:
        packets = [WavePacket.gaussian(t.center_m, t.sigma0_m, t.momentum_kg_m_per_s,
                                       self.params.hbar, t.amplitude * np.exp(1j * t.phase_rad))
                   for t in self.terms]
        out = packets[0]
        for p in packets[1:]:
            out = out + p
        return out.normalized()

    def state_at_weak(self) -> WavePacket:
        """State just before the weak measurement (lab time prep_time_s)."""
        psi0 = self.initial_packet()
        return free_evolve(psi0, self.prep_time_s, self.params) if self.prep_time_s > 0 else psi0

    def state_at_sharp(self) -> WavePacket:
        return free_evolve(self.initial_packet(), self.snapshot_time, self.params)

    @property
    def snapshot_time(self) -> float:
        """Lab time of the sharp measurement."""
        return self.prep_time_s + self.params.tau

    # -- derived scenarios ---------------------------------------------------
    def with_params(self, **changes) -> "Scenario":
        """Copy with protocol parameters replaced. A new ``tau`` keeps the
        sharp-measurement time fixed and moves the weak one."""
        t_s = self.snapshot_time
        params = self.params.replace(**changes)
        prep = self.prep_time_s
        if "tau" in changes:
            prep = t_s - params.tau
            if prep < 0:
                raise ScenarioError("tau exceeds the sharp-measurement time")
        params = params.replace(t_w=prep)
        return Scenario(self.name, self.terms, prep, params, self.sigma0_source, self.sweep,
                        self.profile_points, self.extra)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "packet": {"terms": [t.__dict__.copy() for t in self.terms]},
            "sigma0_source": self.sigma0_source,
            "prep_time_s": self.prep_time_s,
            "params": {k: getattr(self.params, v) for k, v in PARAM_KEYS.items()},
            "profile": {"n_points": self.profile_points},
        }
        if self.sweep is not None:
            d["sweep"] = {f"axis{i + 1}": a.__dict__.copy() for i, a in enumerate(self.sweep)}
        d.update(self.extra)
        return d

    def manifest_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def scenario_from_dict(d: dict) -> Scenario:
    try:
        terms = tuple(TermSpec(**{k: float(v) for k, v in t.items()}) for t in d["packet"]["terms"])
        p = d["params"]
        unknown = set(p) - set(PARAM_KEYS)
        if unknown:
            raise ScenarioError(f"unknown params keys {sorted(unknown)}")
        kw = {PARAM_KEYS[k]: float(v) for k, v in p.items()}
        kw.setdefault("mass", ELECTRON_MASS)
        kw.setdefault("hbar", HBAR)
        prep = float(d.get("prep_time_s", 0.0))
        params = ProtocolParams(t_w=prep, **kw)
        sweep = None
        if "sweep" in d:
            s = d["sweep"]
            sweep = (Axis(**s["axis1"]), Axis(**s["axis2"]))
        known = {"name", "packet", "params", "prep_time_s", "sigma0_source", "sweep", "profile"}
        extra = {k: v for k, v in d.items() if k not in known}
        return Scenario(str(d.get("name", "unnamed")), terms, prep, params,
                        str(d.get("sigma0_source", "user")), sweep,
                        int(d.get("profile", {}).get("n_points", 2048)), extra)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc


def load_scenario(path) -> Scenario:
    with open(Path(path)) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"not valid JSON: {exc}") from exc
    return scenario_from_dict(d)


def save_scenario(scenario: Scenario, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(scenario.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# double slit
# ---------------------------------------------------------------------------

def spread_width(sigma0: float, t: float, mass: float = ELECTRON_MASS, hbar: float = HBAR) -> float:
    """Density std of a free Gaussian: sigma0 sqrt(1 + (hbar t / 2 m sigma0^2)^2)."""
    return sigma0 * np.sqrt(1.0 + (hbar * t / (2.0 * mass * sigma0**2)) ** 2)


def calibrate_sigma0(separation: float = SLIT_SEPARATION, support: float = TARGET_SUPPORT,
                     t: float = SNAPSHOT_TIME, rel: float = SUPPORT_REL,
                     mass: float = ELECTRON_MASS, hbar: float = HBAR) -> float:
    """Initial slit width whose evolved pair spans ``support`` at time ``t``.

    Each packet's density falls to ``rel`` of its peak at sigma(t)
    sqrt(2 ln(1/rel)) from its centre, so the pair spans
    separation + 2 sigma(t) sqrt(2 ln(1/rel)). sigma(t) is not monotone in
    sigma0: it has a minimum at sigma0 = sqrt(hbar t / 2m). The root is
    bracketed below that minimum (narrow slits, strong diffraction); the
    wide-slit root barely spreads and gives no overlap fringes.
    """
    reach = np.sqrt(2.0 * np.log(1.0 / rel))
    turn = np.sqrt(hbar * t / (2.0 * mass))

    def excess(s0):
        return separation + 2.0 * reach * spread_width(s0, t, mass, hbar) - support

    if excess(turn) >= 0:
        raise ScenarioError("requested support is narrower than any free spreading allows")
    return float(brentq(excess, 1e-4 * turn, turn, xtol=1e-16, rtol=1e-14))


def build_double_slit(separation: float = SLIT_SEPARATION, sigma0: float | None = None,
                      momenta: tuple[float, float] = (0.0, 0.0), tau: float = DEFAULT_TAU,
                      sigma_w: float = DEFAULT_SIGMA_W, sigma_s: float = DEFAULT_SIGMA_S,
                      snapshot_time: float = SNAPSHOT_TIME, mass: float = ELECTRON_MASS,
                      hbar: float = HBAR, sweep: tuple[Axis, Axis] | None = None) -> Scenario:
    """Equal, in-phase Gaussians at +-separation/2; sharp measurement at ``snapshot_time``.

    Without ``sigma0`` the width comes from ``calibrate_sigma0`` and is
    labelled "calibrated" in the scenario.
    """
    if not separation > 0:
        raise ScenarioError("separation must be positive")
    source = "user"
    if sigma0 is None:
        sigma0 = calibrate_sigma0(separation, t=snapshot_time, mass=mass, hbar=hbar)
        source = "calibrated"
    if not sigma0 > 0:
        raise ScenarioError("sigma0 must be positive")
    prep = snapshot_time - tau
    if prep < 0:
        raise ScenarioError("tau exceeds the snapshot time")
    terms = (TermSpec(-separation / 2, sigma0, momenta[0]), TermSpec(separation / 2, sigma0, momenta[1]))
    params = ProtocolParams(tau=tau, sigma_w=sigma_w, sigma_s=sigma_s, t_w=prep, mass=mass, hbar=hbar)
    if sweep is None:
        sweep = (Axis("sigma_w_m", 30e-9, 1e-6, 25, "log"), Axis("tau_s", 1e-13, 1e-11, 9, "log"))
    return Scenario("double_slit", terms, prep, params, source, sweep)


def support_span(packet: WavePacket, rel: float = SUPPORT_REL, n: int = 2**16) -> float:
    """Width of the region where rho exceeds ``rel`` of its maximum."""
    from .wavecore import default_window, density
    lo, hi = default_window(packet)
    x = np.linspace(lo, hi, n)
    rho = density(packet, x)
    idx = np.flatnonzero(rho > rel * rho.max())
    return float(x[idx[-1]] - x[idx[0]])
