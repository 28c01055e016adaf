"""Gate matrices, virtual Z rotations, and fidelity metrics.

The computational states are the four labeled two-electron eigenstates in
the order (00, 01, 10, 11); in the conventional six-state ladder those sit
at eigenindices (0, 1, 2, 4), with a doubly excited intruder at index 3
deliberately excluded.  Where an actual spectrum orders the levels
differently, the labeling step supplies the true indices and everything
here depends only on the four labeled states.  The gate matrix is the
overlap of propagated states with the idle eigenstates; virtual Z
rotations then strip the single-qubit phase accumulation, after which the
fidelity, swap and leakage metrics quantify what remains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

QUBIT_BASIS_ORDER = ("00", "01", "10", "11")
QUBIT_EIGENINDICES = (0, 1, 2, 4)

_TARGET_KINDS = ("sqrt_iswap", "cz", "identity")


def _wrap_angle(x: float) -> float:
    """Reduce an angle to (-pi, pi]."""
    # modular reduction keeps exact multiples of pi on the boundary,
    # where angle(exp(ix)) would wobble by rounding of exp
    w = (float(x) + np.pi) % (2.0 * np.pi) - np.pi
    return np.pi if w == -np.pi else float(w)


@dataclass
class GateMatrix:
    """A 4x4 matrix over the computational states (00, 01, 10, 11).

    Columns may lose norm to leakage but never gain it.
    """

    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=complex)
        if entries.shape != (4, 4):
            raise ValueError("gate matrix must be 4x4")
        if not np.all(np.isfinite(entries.view(float))):
            raise ValueError("gate matrix entries must be finite")
        norms = np.linalg.norm(entries, axis=0)
        if np.any(norms > 1.0 + 1e-8):
            raise ValueError(f"column norms exceed unity: {norms}")
        self.entries = entries

    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.entries, axis=0)


@dataclass(frozen=True)
class RotationAngles:
    """Virtual Z angles (radians), each reduced to (-pi, pi]."""

    theta_left: float
    theta_right: float
    global_phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta_left", _wrap_angle(self.theta_left))
        object.__setattr__(self, "theta_right", _wrap_angle(self.theta_right))
        object.__setattr__(self, "global_phase", _wrap_angle(self.global_phase))


@dataclass
class FidelityReport:
    """Fidelity and error metrics of a rotation-corrected gate."""

    fidelity: float
    angles: RotationAngles
    swap_error: float
    leakage_error: float
    gate: GateMatrix
    flat_landscape: bool = False

    def __post_init__(self):
        for name in ("fidelity", "swap_error", "leakage_error"):
            value = getattr(self, name)
            if not -1e-9 <= value <= 1.0 + 1e-9:
                raise ValueError(f"{name}={value} outside [0, 1]")


def target_gate(kind: str) -> GateMatrix:
    """The ideal entangling (or identity) gate matrix."""
    if kind == "sqrt_iswap":
        r = 1.0 / np.sqrt(2.0)
        entries = np.array(
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, r, 1j * r, 0.0],
                [0.0, 1j * r, r, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            dtype=complex,
        )
    elif kind == "cz":
        entries = np.diag([1.0, 1.0, 1.0, -1.0]).astype(complex)
    elif kind == "identity":
        entries = np.eye(4, dtype=complex)
    else:
        raise ValueError(f"unknown gate kind {kind!r}; expected one of {_TARGET_KINDS}")
    return GateMatrix(entries)


def overlap_gate_matrix(eigenstates, finals) -> GateMatrix:
    """U_ij = <eigenstate_i | final_j> over the four computational states.

    ``eigenstates`` are the labeled idle states in (00, 01, 10, 11) order;
    ``finals`` are the propagated states started from those same four.
    """
    eigenstates = list(eigenstates)
    finals = list(finals)
    if len(eigenstates) != 4 or len(finals) != 4:
        raise ValueError("need exactly four eigenstates and four finals")
    basis = eigenstates[0].basis
    for s in (*eigenstates, *finals):
        if s.basis != basis:
            raise ValueError("all states must share one basis")
    rows = np.array([s.coeffs.ravel() for s in eigenstates])
    gram = rows.conj() @ rows.T
    if np.max(np.abs(gram - np.eye(4))) > 1e-6:
        raise ValueError("eigenstates are not orthonormal")
    cols = np.array([s.coeffs.ravel() for s in finals])
    return GateMatrix(rows.conj() @ cols.T)


def apply_z_rotations(u: GateMatrix, a: RotationAngles) -> GateMatrix:
    """G = e^{i global} diag(1, e^{i theta_R}, e^{i theta_L}, e^{i(theta_L+theta_R)}) U."""
    d = np.exp(
        1j
        * np.array([0.0, a.theta_right, a.theta_left, a.theta_left + a.theta_right])
    )
    return GateMatrix(np.exp(1j * a.global_phase) * d[:, None] * u.entries)


def canonical_angles(u: GateMatrix) -> RotationAngles:
    """Angles that make the first three diagonal entries real nonnegative.

    theta_L cancels the 10 phase relative to 00, theta_R the 01 phase, and
    the global phase zeroes the 00 phase, so applying them leaves
    G_00, G_11, G_22 real and the 11 entry carrying the entangling phase.
    """
    diag = np.diagonal(u.entries)
    if np.any(np.abs(diag[:3]) < 1e-12):
        raise ValueError("canonical angles need nonvanishing 00, 01, 10 diagonal entries")
    phases = np.angle(diag)
    return RotationAngles(
        theta_left=phases[0] - phases[2],
        theta_right=phases[0] - phases[1],
        global_phase=-phases[0],
    )


def _require_unitary(target: GateMatrix):
    defect = np.max(np.abs(target.entries.conj().T @ target.entries - np.eye(4)))
    if defect > 1e-10:
        raise ValueError(f"target gate is not unitary (defect {defect:.2e})")


def average_fidelity(g: GateMatrix, target: GateMatrix) -> float:
    """(Tr(M M-dagger) + |Tr M|^2) / 20 with M = target-dagger g."""
    _require_unitary(target)
    m = target.entries.conj().T @ g.entries
    return float((np.einsum("ij,ij->", m, m.conj()).real + abs(np.trace(m)) ** 2) / 20.0)


def swap_error(u: GateMatrix) -> float:
    """Distance of the central 2x2 population block from a full swap mix."""
    block = np.abs(u.entries[1:3, 1:3]) ** 2
    return float(np.sum(np.abs(0.5 - block)) / 2.0)


def leakage_error(u: GateMatrix) -> float:
    """Population lost from the 11 state: 1 - |U_33|^2."""
    return float(1.0 - abs(u.entries[3, 3]) ** 2)


def _trace_coefficients(u: GateMatrix, target: GateMatrix) -> np.ndarray:
    # Tr(target^dag diag(d) U) = sum_i d_i c_i with these row sums
    return (target.entries.conj() * u.entries).sum(axis=1)


def optimize_rotations(u: GateMatrix, target: GateMatrix) -> FidelityReport:
    """Maximize the average fidelity over the two virtual Z angles.

    Only |Tr M| depends on the angles (the Frobenius term is invariant and
    the global phase drops out of the modulus), so the search runs on the
    closed-form trace c_0 + c_1 e^{i theta_R} + c_2 e^{i theta_L}
    + c_3 e^{i(theta_L + theta_R)}, polished by simplex descent from the
    canonical angles and the best of an 8x8 grid.  The result never falls
    below the canonical-angle fidelity.
    """
    _require_unitary(target)
    c = _trace_coefficients(u, target)
    flat = bool(np.all(np.abs(c[1:]) < 1e-12))

    def trace_mod2(theta):
        t_left, t_right = theta
        total = (
            c[0]
            + c[1] * np.exp(1j * t_right)
            + c[2] * np.exp(1j * t_left)
            + c[3] * np.exp(1j * (t_left + t_right))
        )
        return abs(total) ** 2

    starts = []
    try:
        canon = canonical_angles(u)
        starts.append((canon.theta_left, canon.theta_right))
    except ValueError:
        canon = None
    grid = np.linspace(-np.pi, np.pi, 8, endpoint=False)
    grid_pts = [(tl, tr) for tl in grid for tr in grid]
    grid_pts.sort(key=trace_mod2, reverse=True)
    starts.extend(grid_pts[:3])

    best = max(starts, key=trace_mod2)
    if not flat:
        for start in starts:
            res = minimize(
                lambda th: -trace_mod2(th),
                x0=np.asarray(start),
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 600},
            )
            if trace_mod2(res.x) > trace_mod2(best):
                best = tuple(res.x)
    if canon is not None and trace_mod2((canon.theta_left, canon.theta_right)) > trace_mod2(best):
        best = (canon.theta_left, canon.theta_right)

    rotated = apply_z_rotations(u, RotationAngles(best[0], best[1], 0.0))
    g00 = rotated.entries[0, 0]
    global_phase = -float(np.angle(g00)) if abs(g00) > 1e-12 else 0.0
    angles = RotationAngles(best[0], best[1], global_phase)
    gate = apply_z_rotations(u, angles)
    return FidelityReport(
        fidelity=average_fidelity(gate, target),
        angles=angles,
        swap_error=swap_error(gate),
        leakage_error=leakage_error(gate),
        gate=gate,
        flat_landscape=flat,
    )


@dataclass
class ElementwiseReport:
    """Per-element amplitudes and deviations after canonical rotations."""

    target_kind: str
    amplitude: np.ndarray
    amplitude_deviation: np.ndarray
    phase_deviation: np.ndarray


def elementwise_report(u: GateMatrix, target_kind: str) -> ElementwiseReport:
    """Canonically rotate, then compare each element to the ideal gate.

    Amplitudes are squared moduli, i.e. the population each element
    transfers, matching the swap-error convention: a half swap's four
    central elements have ideal amplitude 0.5.  Phase deviations are
    reduced to (-pi, pi]; where the ideal element vanishes the raw phase
    is reported (its amplitude row tells whether that matters).
    """
    if target_kind not in ("sqrt_iswap", "cz"):
        raise ValueError("element-wise comparison is defined for sqrt_iswap or cz")
    ideal = target_gate(target_kind).entries
    rotated = apply_z_rotations(u, canonical_angles(u)).entries
    amplitude = np.abs(rotated) ** 2
    deviation = amplitude - np.abs(ideal) ** 2
    phase = np.angle(np.exp(1j * (np.angle(rotated) - np.angle(ideal))))
    return ElementwiseReport(
        target_kind=target_kind,
        amplitude=amplitude,
        amplitude_deviation=deviation,
        phase_deviation=phase,
    )


def gate_json_payload(g: GateMatrix, eigenindex_map=QUBIT_EIGENINDICES) -> dict:
    """JSON-ready dict with rectangular and polar forms of the matrix.

    ``eigenindex_map`` records where the four computational labels sat in
    the spectrum the gate was measured against; it defaults to the
    conventional ladder positions.
    """
    entries = [
        [[float(z.real), float(z.imag)] for z in row] for row in g.entries
    ]
    polar = [
        [[float(abs(z)), float(np.angle(z) / np.pi)] for z in row] for row in g.entries
    ]
    return {
        "basis_order": list(QUBIT_BASIS_ORDER),
        "eigenindex_map": [int(i) for i in eigenindex_map],
        "entries_re_im": entries,
        "polar_modulus_phase_over_pi": polar,
    }


def write_gate_json(path, g: GateMatrix, extra: dict = None,
                    eigenindex_map=QUBIT_EIGENINDICES):
    """Write the gate matrix (and optional metrics) to a JSON file."""
    payload = {"gate": gate_json_payload(g, eigenindex_map)}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
