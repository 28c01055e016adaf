"""Electrode geometry, voltage control, and pulse scheduling.

The simulation is formulated in dimensionless units (hbar = m = 1).  A
:class:`UnitSystem` fixes how dimensionless energies, times, lengths and
electrode voltages map onto GHz, ns, micrometres and millivolts.  The
channel potential seen by an electron is a voltage-weighted sum of
per-electrode coupling profiles alpha_k(x); profiles are either the
analytic grounded-strip model or tabulated data interpolated by a cubic
spline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_ELECTRODES = 7

# Default strip geometry (micrometres): seven electrodes on a uniform
# pitch centred on the origin, buried one strip-width below the surface.
DEFAULT_PITCH_UM = 0.4
DEFAULT_WIDTH_UM = 0.2
DEFAULT_DEPTH_UM = 0.2

# Voltage working points (mV, electrodes 1..7) for the low residual-ZZ
# ("zeta") family: I = idle, II = swap resonance, III = conditional-phase
# resonance.  The "beta" family has no packaged values; supply your own.
ZETA_VOLTAGES_MV = {
    "I": (389.50, 200.70, 400.36, -290.61, 398.59, 200.15, 381.40),
    "II": (388.68, 206.69, 404.88, -288.37, 401.04, 192.98, 382.57),
    "III": (388.17, 194.01, 401.87, -289.10, 398.95, 198.82, 382.44),
}


def as_voltage_vector(values) -> np.ndarray:
    """Validate and return a copy of 7 electrode voltages in mV."""
    v = np.asarray(values, dtype=float)
    if v.shape != (N_ELECTRODES,):
        raise ValueError(f"expected {N_ELECTRODES} electrode voltages, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("voltages must be finite")
    return v.copy()


@dataclass(frozen=True)
class UnitSystem:
    """Conversion factors between dimensionless quantities and lab units.

    Parameters
    ----------
    length_unit_um : float
        Micrometres per dimensionless length unit.
    energy_to_ghz : float
        GHz (ordinary frequency, E/h) per dimensionless energy unit.
    voltage_to_energy : float
        Dimensionless energy units per mV of electrode voltage.  This is
        a model parameter of the effective 1D channel, not derived from
        fundamental constants; see the package defaults.

    The time unit is derived: ``time_of_unit_ns = 1/(2*pi*energy_to_ghz)``,
    so that a dimensionless energy E advances phase at E radians per
    dimensionless time unit.
    """

    length_unit_um: float = 1.0
    energy_to_ghz: float = 1.0
    voltage_to_energy: float = 1.0

    def __post_init__(self):
        if self.length_unit_um <= 0 or self.energy_to_ghz <= 0:
            raise ValueError("unit conversions must be positive")
        if self.voltage_to_energy <= 0:
            raise ValueError("voltage_to_energy must be positive")

    @property
    def time_of_unit_ns(self) -> float:
        return 1.0 / (2.0 * math.pi * self.energy_to_ghz)

    def energy_from_mv(self, v_mv):
        return np.asarray(v_mv, dtype=float) * self.voltage_to_energy

    def ghz_from_energy(self, e):
        return np.asarray(e, dtype=float) * self.energy_to_ghz

    def energy_from_ghz(self, f):
        return np.asarray(f, dtype=float) / self.energy_to_ghz

    def ns_from_time(self, t):
        return np.asarray(t, dtype=float) * self.time_of_unit_ns

    def time_from_ns(self, t_ns):
        return np.asarray(t_ns, dtype=float) / self.time_of_unit_ns

    @classmethod
    def calibrated(cls) -> "UnitSystem":
        """Default channel calibration used by the bundled demos.

        Positions are measured directly in micrometres.  The two energy
        factors were tuned together so that, with the packaged electrode
        layout and voltage tables, the in-well splittings land in the
        5-15 GHz band and gate times come out at nanoseconds.
        """
        return cls(length_unit_um=1.0, energy_to_ghz=0.02, voltage_to_energy=64.0)


@dataclass(frozen=True)
class ElectrodeLayout:
    """Positions (um) of the electrode strips along the channel."""

    centers_um: tuple = field(
        default_factory=lambda: tuple(DEFAULT_PITCH_UM * (k - 3) for k in range(N_ELECTRODES))
    )
    widths_um: tuple = field(default_factory=lambda: (DEFAULT_WIDTH_UM,) * N_ELECTRODES)
    depth_um: float = DEFAULT_DEPTH_UM

    def __post_init__(self):
        if len(self.centers_um) != N_ELECTRODES or len(self.widths_um) != N_ELECTRODES:
            raise ValueError(f"layout requires {N_ELECTRODES} electrodes")
        c = np.asarray(self.centers_um, dtype=float)
        if not np.all(np.diff(c) > 0):
            raise ValueError("electrode centers must be strictly increasing")
        if self.depth_um <= 0 or any(w <= 0 for w in self.widths_um):
            raise ValueError("widths and depth must be positive")


class CouplingProfile:
    """Fraction alpha_k(x) of electrode k's voltage felt at position x.

    Analytic profiles use the grounded-strip result
    ``alpha_k(x) = (1/pi) * (atan((x-c+w/2)/d) - atan((x-c-w/2)/d))``.
    Tabulated profiles interpolate sampled columns with a natural cubic
    spline, clamped to [0, 1]; evaluation outside the tabulated domain is
    an error.  Positions are in micrometres.
    """

    def __init__(self, layout: ElectrodeLayout | None = None,
                 x_um=None, alphas=None):
        if (layout is None) == (x_um is None):
            raise ValueError("provide either a layout (analytic) or tabulated data")
        self.layout = layout
        if layout is not None:
            self._splines = None
            self.x_min = -math.inf
            self.x_max = math.inf
        else:
            from scipy.interpolate import CubicSpline

            x = np.asarray(x_um, dtype=float)
            a = np.asarray(alphas, dtype=float)
            if x.ndim != 1 or x.size < 4:
                raise ValueError("tabulated profile needs at least 4 sample points")
            if not np.all(np.diff(x) > 0):
                raise ValueError("tabulated positions must be strictly increasing")
            if a.shape != (x.size, N_ELECTRODES):
                raise ValueError(f"alpha table must have shape (n, {N_ELECTRODES})")
            if np.any(a < 0.0) or np.any(a > 1.0):
                raise ValueError("tabulated couplings must lie in [0, 1]")
            self._splines = [CubicSpline(x, a[:, k]) for k in range(N_ELECTRODES)]
            self.x_min = float(x[0])
            self.x_max = float(x[-1])

    @classmethod
    def analytic(cls, layout: ElectrodeLayout) -> "CouplingProfile":
        return cls(layout=layout)

    @classmethod
    def tabulated(cls, x_um, alphas) -> "CouplingProfile":
        return cls(x_um=x_um, alphas=alphas)


def alpha_eval(profile: CouplingProfile, x_um) -> np.ndarray:
    """Evaluate all couplings at x (um); shape (7,) or (n, 7)."""
    x = np.asarray(x_um, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if profile._splines is None:
        c = np.asarray(profile.layout.centers_um)
        w = np.asarray(profile.layout.widths_um)
        d = profile.layout.depth_um
        dx = x[:, None] - c[None, :]
        out = (np.arctan((dx + 0.5 * w) / d) - np.arctan((dx - 0.5 * w) / d)) / math.pi
    else:
        if np.any(x < profile.x_min) or np.any(x > profile.x_max):
            raise ValueError(
                f"position outside tabulated domain [{profile.x_min}, {profile.x_max}] um"
            )
        out = np.column_stack([s(x) for s in profile._splines])
        np.clip(out, 0.0, 1.0, out=out)
    return out[0] if scalar else out


def surface_potential(profile: CouplingProfile, voltages_mv, x_um,
                      units: UnitSystem) -> np.ndarray:
    """Channel potential -sum_k alpha_k(x) V_k as dimensionless energy.

    ``x_um`` is in micrometres; the electron coordinate in dimensionless
    units is ``x_um / units.length_unit_um``.
    """
    v = as_voltage_vector(voltages_mv)
    a = alpha_eval(profile, x_um)
    return -(a @ v) * units.voltage_to_energy


@dataclass(frozen=True)
class Device:
    """Electrostatic model plus interaction constants for one channel.

    ``kappa`` is the dimensionless Coulomb strength and ``epsilon`` the
    short-range softening length (in dimensionless coordinates) of the
    screened interaction kappa / sqrt(dx^2 + epsilon^2).
    """

    profile: CouplingProfile
    units: UnitSystem
    kappa: float = 2326.0
    epsilon: float = 0.01

    def __post_init__(self):
        if self.kappa < 0 or self.epsilon <= 0:
            raise ValueError("kappa must be nonnegative and epsilon positive")

    def potential(self, voltages_mv, x_dimless):
        """Dimensionless channel potential at dimensionless coordinates."""
        x_um = np.asarray(x_dimless, dtype=float) * self.units.length_unit_um
        return surface_potential(self.profile, voltages_mv, x_um, self.units)


@dataclass(frozen=True)
class VoltageFunction:
    """Affine path between two voltage working points.

    ``family`` names the optimization family of the endpoints ("zeta" =
    endpoints optimized with the residual-ZZ term, "beta" = without) and
    ``target`` the destination working point ("II" = swap resonance,
    "III" = conditional-phase resonance).  The pulse amplitude lambda_max
    is fixed by that choice: the zeta family always drives to lambda = 1;
    the beta family reaches the swap resonance already at lambda = 0.46.
    """

    start_mv: np.ndarray
    end_mv: np.ndarray
    family: str = "zeta"
    target: str = "II"

    def __post_init__(self):
        object.__setattr__(self, "start_mv", as_voltage_vector(self.start_mv))
        object.__setattr__(self, "end_mv", as_voltage_vector(self.end_mv))
        if self.family not in ("beta", "zeta"):
            raise ValueError("family must be 'beta' or 'zeta'")
        if self.target not in ("II", "III"):
            raise ValueError("target must be 'II' or 'III'")

    @property
    def lambda_max(self) -> float:
        if self.family == "beta" and self.target == "II":
            return 0.46
        return 1.0


def voltage_at(vf: VoltageFunction, lam: float) -> np.ndarray:
    """Interpolated voltages V(lambda) = V_start + lambda (V_end - V_start)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return vf.start_mv + lam * (vf.end_mv - vf.start_mv)


@dataclass(frozen=True)
class RampSchedule:
    """Smooth ramp-hold-ramp pulse envelope, all times in ns.

    The envelope is a difference of error functions,

        lambda(t) = (lambda_max/2) [erf((t - t_ramp/2)/(sqrt(2) sigma))
                                    - erf((t - t_gate + t_ramp/2)/(sqrt(2) sigma))]

    with sigma = t_ramp/(4 sqrt(2)), so the rise occupies four standard
    deviations and t_gate = t_hold + 2 t_ramp.
    """

    t_ramp_ns: float
    t_hold_ns: float

    def __post_init__(self):
        if self.t_ramp_ns <= 0:
            raise ValueError("t_ramp must be positive")
        if self.t_hold_ns < 0:
            raise ValueError("t_hold must be nonnegative")

    @property
    def sigma_ns(self) -> float:
        return self.t_ramp_ns / (4.0 * math.sqrt(2.0))

    @property
    def t_gate_ns(self) -> float:
        return self.t_hold_ns + 2.0 * self.t_ramp_ns


def lambda_at(schedule: RampSchedule, t_ns: float, lambda_max: float = 1.0) -> float:
    """Pulse amplitude lambda(t) in [0, lambda_max)."""
    s = schedule.t_ramp_ns / 4.0  # sqrt(2)*sigma
    up = math.erf((t_ns - 0.5 * schedule.t_ramp_ns) / s)
    down = math.erf((t_ns - schedule.t_gate_ns + 0.5 * schedule.t_ramp_ns) / s)
    return 0.5 * lambda_max * (up - down)
