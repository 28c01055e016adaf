"""Sinc-DVR discretization of two electrons in a double well.

Each electron is confined to its own well and discretized on a uniform
sinc-DVR grid; the pair state is a complex coefficient matrix C of shape
(left.count, right.count) over the tensor-product basis.  Electrons are
treated as distinguishable (one per well), so no exchange symmetrization
is applied.  All positions and energies are dimensionless; see
:class:`heligate.electrostatics.UnitSystem`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .electrostatics import Device, alpha_eval, as_voltage_vector


@dataclass(frozen=True)
class DvrGrid:
    """Uniform grid; point i sits exactly at start + i*spacing."""

    start: float
    spacing: float
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("grid needs at least 2 points")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    @property
    def points(self) -> np.ndarray:
        return self.start + self.spacing * np.arange(self.count)


@dataclass(frozen=True)
class TwoBodyBasis:
    """Tensor product of a left-well and a right-well grid."""

    left: DvrGrid
    right: DvrGrid

    def __post_init__(self):
        if self.left.points[-1] >= self.right.points[0]:
            raise ValueError("left and right grids must be disjoint (left < right)")

    @property
    def shape(self) -> tuple:
        return (self.left.count, self.right.count)


@dataclass
class TwoBodyState:
    """Coefficient matrix C over a two-body DVR basis.

    ``coeffs[a, b]`` multiplies the product of left grid function a and
    right grid function b.  The array is owned by the state and may be
    updated in place by a propagator; copy before sharing.
    """

    coeffs: np.ndarray
    basis: TwoBodyBasis

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != self.basis.shape:
            raise ValueError(f"coefficient shape {c.shape} does not match basis {self.basis.shape}")
        if not np.all(np.isfinite(c.view(np.float64))):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def normalized(self) -> "TwoBodyState":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize the zero state")
        return TwoBodyState(self.coeffs / n, self.basis)

    def copy(self) -> "TwoBodyState":
        return TwoBodyState(self.coeffs.copy(), self.basis)


def kinetic_matrix(grid: DvrGrid) -> np.ndarray:
    """One-body kinetic matrix -(1/2) d^2/dx^2 in the sinc-DVR basis.

    T_ii = pi^2 / (6 dx^2), T_ij = (-1)^(i-j) / (dx^2 (i-j)^2).
    """
    n, dx = grid.count, grid.spacing
    i = np.arange(n)
    diff = i[:, None] - i[None, :]
    with np.errstate(divide="ignore"):
        t = np.where(diff == 0, math.pi**2 / 6.0, (-1.0) ** diff / diff.astype(float) ** 2)
    return t / dx**2


def coulomb_diagonal(basis: TwoBodyBasis, kappa: float, epsilon: float) -> np.ndarray:
    """Screened interaction kappa/sqrt(dx^2+eps^2) on the product grid."""
    dx = basis.left.points[:, None] - basis.right.points[None, :]
    return kappa / np.sqrt(dx**2 + epsilon**2)


def potential_diagonals(basis: TwoBodyBasis, device: Device, voltages_mv):
    """One-body potential samples (v_left, v_right) for given voltages."""
    return (device.potential(voltages_mv, basis.left.points),
            device.potential(voltages_mv, basis.right.points))


class OperatorCache:
    """Precomputed operator pieces for repeated Hamiltonian application.

    Holds the two kinetic matrices, the interaction diagonal, and the
    coupling samples needed to rebuild the potential diagonals when the
    control voltages change.  ``refresh`` updates the potential terms in
    place; between refreshes the cache is read-only and safe to share.
    """

    def __init__(self, device: Device, basis: TwoBodyBasis, voltages_mv=None):
        self.device = device
        self.basis = basis
        self.kinetic_left = kinetic_matrix(basis.left)
        self.kinetic_right = kinetic_matrix(basis.right)
        self.coulomb = coulomb_diagonal(basis, device.kappa, device.epsilon)
        lu = device.units.length_unit_um
        self._alpha_left = alpha_eval(device.profile, basis.left.points * lu)
        self._alpha_right = alpha_eval(device.profile, basis.right.points * lu)
        self.potential_left = np.zeros(basis.left.count)
        self.potential_right = np.zeros(basis.right.count)
        self._diag = self.coulomb.copy()
        self.refresh(np.zeros(7) if voltages_mv is None else voltages_mv)

    def refresh(self, voltages_mv) -> None:
        """Rebuild potential diagonals for new electrode voltages."""
        v = as_voltage_vector(voltages_mv)
        scale = self.device.units.voltage_to_energy
        self.potential_left = -(self._alpha_left @ v) * scale
        self.potential_right = -(self._alpha_right @ v) * scale
        np.add(self.coulomb, self.potential_left[:, None], out=self._diag)
        self._diag += self.potential_right[None, :]

    @property
    def diagonal_two_body(self) -> np.ndarray:
        """Full diagonal v_L + v_R + u on the product grid."""
        return self._diag

    def hamiltonian_diagonal(self) -> np.ndarray:
        """Diagonal of H in the product basis (kinetic + potential)."""
        tkin = self.kinetic_left[0, 0] + self.kinetic_right[0, 0]
        return self._diag + tkin

    def apply(self, c: np.ndarray, out: np.ndarray = None) -> np.ndarray:
        """Apply H to raw coefficient arrays without forming the operator.

        ``c`` has shape (n_left, n_right) or (batch, n_left, n_right).
        The kinetic terms act as matrix products on each index; the
        potential and interaction act elementwise.
        """
        if c.ndim == 2:
            out = np.matmul(self.kinetic_left, c, out=out)
            out += np.matmul(c, self.kinetic_right)
            out += self._diag * c
            return out
        # batched: unfold so each kinetic term is one large matrix product
        # rather than a stack of small ones (this loop is the hot path of
        # time propagation)
        nb, nl, nr = c.shape
        if out is None:
            out = np.empty_like(c)
        if not out.flags.c_contiguous:
            out[...] = np.matmul(self.kinetic_left, c)
            out += np.matmul(c, self.kinetic_right)
            out += self._diag * c
            return out
        left = self.kinetic_left @ c.transpose(1, 0, 2).reshape(nl, nb * nr)
        out[...] = left.reshape(nl, nb, nr).transpose(1, 0, 2)
        flat = out.reshape(nb * nl, nr)
        flat += c.reshape(nb * nl, nr) @ self.kinetic_right
        out += self._diag * c
        return out


def apply_hamiltonian(cache: OperatorCache, state: TwoBodyState) -> TwoBodyState:
    """Apply the cached Hamiltonian to a state, returning a new state."""
    if state.basis != cache.basis:
        raise ValueError("state basis does not match operator cache basis")
    return TwoBodyState(cache.apply(state.coeffs), state.basis)


def inner(a: TwoBodyState, b: TwoBodyState) -> complex:
    """Inner product <a|b> = sum. conj(A) * B over the product basis."""
    if a.basis != b.basis:
        raise ValueError("states live on different bases")
    return complex(np.vdot(a.coeffs, b.coeffs))


def norm(a: TwoBodyState) -> float:
    return a.norm()


def _refine_extremum(f, x_lo, x_hi, sign=1.0):
    res = minimize_scalar(lambda x: sign * f(x), bounds=(x_lo, x_hi), method="bounded",
                          options={"xatol": 1e-12})
    return float(res.x)


def locate_wells(device: Device, voltages_mv, x_span_dimless=None, samples=4001):
    """Find the double-well structure of the channel potential.

    Returns a dict with the two minima positions, the barrier position,
    the local curvatures v'' at the minima and the harmonic lengths
    (all dimensionless).  Raises if the potential has no double well.
    """
    v = as_voltage_vector(voltages_mv)
    if x_span_dimless is None:
        if device.profile.layout is not None:
            c = device.profile.layout.centers_um
            lo, hi = c[0] - 0.5, c[-1] + 0.5
        else:
            lo, hi = device.profile.x_min, device.profile.x_max
        lu = device.units.length_unit_um
        lo, hi = lo / lu, hi / lu
    else:
        lo, hi = x_span_dimless

    def pot(x):
        return float(device.potential(v, x))

    xs = np.linspace(lo, hi, samples)
    vs = device.potential(v, xs)
    minima = np.nonzero((vs[1:-1] < vs[:-2]) & (vs[1:-1] <= vs[2:]))[0] + 1
    maxima = np.nonzero((vs[1:-1] > vs[:-2]) & (vs[1:-1] >= vs[2:]))[0] + 1
    if len(minima) < 2 or len(maxima) < 1:
        raise ValueError("potential does not form a double well")
    # operating wells are the pair bracketing the barrier nearest the
    # middle of the scan window (the designated barrier electrode)
    x_mid = 0.5 * (lo + hi)
    i_bar = maxima[np.argmin(np.abs(xs[maxima] - x_mid))]
    left_c = minima[minima < i_bar]
    right_c = minima[minima > i_bar]
    if len(left_c) == 0 or len(right_c) == 0:
        raise ValueError("potential does not form a double well around the barrier")
    i_left, i_right = left_c[-1], right_c[0]
    dx = xs[1] - xs[0]
    x_left = _refine_extremum(pot, xs[i_left] - dx, xs[i_left] + dx)
    x_right = _refine_extremum(pot, xs[i_right] - dx, xs[i_right] + dx)
    x_barrier = _refine_extremum(pot, x_left, x_right, sign=-1.0)

    out = {"x_left": x_left, "x_right": x_right, "x_barrier": x_barrier}
    h = 1e-4 * (x_right - x_left)
    for side, x0 in (("left", x_left), ("right", x_right)):
        curv = (pot(x0 - h) - 2.0 * pot(x0) + pot(x0 + h)) / h**2
        if curv <= 0:
            raise ValueError(f"{side} well has nonpositive curvature")
        out[f"curvature_{side}"] = curv
        out[f"harmonic_length_{side}"] = curv**-0.25
    return out


def build_basis(device: Device, idle_voltages_mv, points_per_well: int = 32,
                extent_harmonic_lengths: float = 4.0) -> TwoBodyBasis:
    """Per-well grids centred on the idle minima.

    Each grid spans its well minimum plus/minus ``extent_harmonic_lengths``
    local harmonic lengths, truncated short of the barrier so the two
    grids never overlap.
    """
    wells = locate_wells(device, idle_voltages_mv)
    gap = 1e-3 * (wells["x_right"] - wells["x_left"])
    grids = []
    for side in ("left", "right"):
        x0 = wells[f"x_{side}"]
        ext = extent_harmonic_lengths * wells[f"harmonic_length_{side}"]
        lo, hi = x0 - ext, x0 + ext
        if side == "left":
            hi = min(hi, wells["x_barrier"] - gap)
        else:
            lo = max(lo, wells["x_barrier"] + gap)
        spacing = (hi - lo) / (points_per_well - 1)
        grids.append(DvrGrid(start=lo, spacing=spacing, count=points_per_well))
    return TwoBodyBasis(left=grids[0], right=grids[1])
