"""Loss functions and derivative-free search over electrode voltages.

Every configuration minimizes the squared conditional-phase coupling and
adds its own spectral shaping terms: config I keeps the two qubit
splittings inside the 5-15 GHz band and at least 3 GHz apart, config II
drives the first and second excited states together while holding the
next gaps open, and config III enforces a symmetric triple degeneracy of
the three upper states while keeping the lower pair split.  All terms are
built from sorted eigenenergies in GHz, so the loss is invariant under
relabeling of degenerate states.

The search is a bounded simplex descent: each candidate is clipped to a
box of half-width 50 mV around the initial vector (vectors outside pay a
quadratic penalty), and converged descents restart from the incumbent
with a smaller simplex while the evaluation budget lasts.  Spectra enter
through an injected solver callable, which keeps the loss testable
against synthetic spectra and lets callers evaluate distinct candidates
concurrently; the bundled solver builds a fresh operator cache per call
and is safe to share.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .dvr import OperatorCache, TwoBodyBasis
from .electrostatics import Device, as_voltage_vector
from .spectrum import DavidsonError, solve_spectrum, zz_coupling

BOX_HALF_WIDTH_MV = 50.0
RESTART_RADII_MV = (5.0, 1.0, 0.2)

LOSS_CONFIGS = ("zeta", "I", "II", "III")

_DEFAULT_WEIGHTS = {
    "zeta": {"zeta": 1.0},
    "I": {"zeta": 1.0, "band": 1e-2, "detuning": 1e-2},
    "II": {"zeta": 1.0, "swap_gap": 1e-4, "gap_43": 1e-2, "gap_54": 1e-2},
    "III": {
        "zeta": 1.0,
        "degeneracy_54": 1.0,
        "degeneracy_43": 1.0,
        "degeneracy_symmetry": 1.0,
        "lower_gap": 1e4,
    },
}


def default_weights(config: str) -> dict[str, float]:
    """Per-term weights for a configuration, keyed by term name."""
    if config not in _DEFAULT_WEIGHTS:
        raise ValueError(f"unknown loss config {config!r}")
    return dict(_DEFAULT_WEIGHTS[config])


def hinge(gap: float, threshold: float) -> float:
    """Quadratic one-sided penalty: max(0, threshold - gap) squared."""
    return max(0.0, threshold - gap) ** 2


@dataclass
class LossSpec:
    """Loss configuration: term weights and spectral thresholds in GHz.

    ``config`` selects the term set ("zeta" is the bare conditional-phase
    loss; "I", "II", "III" add their shaping terms).  Omitted weights take
    the standard table for the configuration.
    """

    config: str
    weights: dict[str, float] | None = None
    band_ghz: tuple[float, float] = (5.0, 15.0)
    min_detuning_ghz: float = 3.0
    min_gap_ghz: float = 1.5

    def __post_init__(self):
        if self.config not in LOSS_CONFIGS:
            raise ValueError(f"unknown loss config {self.config!r}")
        defaults = _DEFAULT_WEIGHTS[self.config]
        if self.weights is None:
            self.weights = dict(defaults)
        else:
            self.weights = {k: float(v) for k, v in self.weights.items()}
            if set(self.weights) != set(defaults):
                raise ValueError(
                    f"weights for config {self.config} must have terms "
                    f"{sorted(defaults)}, got {sorted(self.weights)}"
                )
        if any(w < 0.0 for w in self.weights.values()):
            raise ValueError("weights must be nonnegative")
        lo, hi = self.band_ghz
        if not (0.0 < lo < hi):
            raise ValueError("band must satisfy 0 < low < high")
        if self.min_detuning_ghz <= 0.0 or self.min_gap_ghz <= 0.0:
            raise ValueError("thresholds must be positive")

    @property
    def term_names(self) -> tuple[str, ...]:
        return tuple(_DEFAULT_WEIGHTS[self.config])


def _band_violation(freq: float, lo: float, hi: float) -> float:
    return max(0.0, lo - freq) ** 2 + max(0.0, freq - hi) ** 2


def loss_value(
    spec: LossSpec,
    voltages_mv: Sequence[float] | np.ndarray,
    solver: Callable[[np.ndarray], np.ndarray],
) -> tuple[float, dict[str, float]]:
    """Evaluate the loss at a voltage vector.

    ``solver`` maps a voltage vector to at least the six lowest
    eigenenergies in GHz.  Returns the total and the weighted per-term
    breakdown, which sums to the total.
    """
    v = as_voltage_vector(voltages_mv)
    energies = np.sort(np.asarray(solver(v), dtype=float))
    if energies.ndim != 1 or energies.size < 6:
        raise ValueError("solver must return at least six energies")
    e = energies[:6]
    w = spec.weights

    breakdown = {"zeta": w["zeta"] * zz_coupling(e) ** 2}
    if spec.config == "I":
        lo, hi = spec.band_ghz
        f1 = e[1] - e[0]
        f2 = e[2] - e[0]
        breakdown["band"] = w["band"] * (
            _band_violation(f1, lo, hi) + _band_violation(f2, lo, hi)
        )
        breakdown["detuning"] = w["detuning"] * hinge(f2 - f1, spec.min_detuning_ghz)
    elif spec.config == "II":
        breakdown["swap_gap"] = w["swap_gap"] * (e[2] - e[1]) ** 2
        breakdown["gap_43"] = w["gap_43"] * hinge(e[4] - e[3], spec.min_gap_ghz)
        breakdown["gap_54"] = w["gap_54"] * hinge(e[5] - e[4], spec.min_gap_ghz)
    elif spec.config == "III":
        gap_54_sq = (e[5] - e[4]) ** 2
        gap_43_sq = (e[4] - e[3]) ** 2
        breakdown["degeneracy_54"] = w["degeneracy_54"] * gap_54_sq
        breakdown["degeneracy_43"] = w["degeneracy_43"] * gap_43_sq
        breakdown["degeneracy_symmetry"] = (
            w["degeneracy_symmetry"] * (gap_54_sq - gap_43_sq) ** 2
        )
        breakdown["lower_gap"] = w["lower_gap"] * hinge(e[2] - e[1], spec.min_gap_ghz)
    breakdown = {name: float(value) for name, value in breakdown.items()}
    return sum(breakdown.values()), breakdown


def energy_solver(
    device: Device,
    basis: TwoBodyBasis,
    *,
    k: int = 6,
    tol: float = 1e-9,
) -> Callable[[np.ndarray], np.ndarray]:
    """Build a solver mapping voltages (mV) to eigenenergies in GHz.

    Each call constructs its own operator cache, so one solver instance
    may evaluate distinct candidates concurrently.
    """
    to_ghz = device.units.energy_to_ghz

    def solve(voltages_mv: np.ndarray) -> np.ndarray:
        cache = OperatorCache(device, basis, voltages_mv)
        return solve_spectrum(cache, k=k, tol=tol).energies * to_ghz

    return solve


@dataclass
class OptimizationTrace:
    """Record of a voltage search: accepted iterates and the best found.

    ``iterates`` holds (voltage vector, loss) pairs in acceptance order
    with nonincreasing loss; ``breakdown`` is the weighted per-term split
    at ``best`` and sums to ``best_loss``.
    """

    iterates: list[tuple[np.ndarray, float]]
    best: np.ndarray
    best_loss: float
    breakdown: dict[str, float]
    evaluations: int = 0
    exhausted: bool = False

    def __post_init__(self):
        if not self.iterates:
            raise ValueError("trace must contain at least one iterate")
        losses = [loss for _, loss in self.iterates]
        if np.any(np.diff(losses) > 1e-12):
            raise ValueError("iterate losses must be nonincreasing")
        if abs(losses[-1] - self.best_loss) > 1e-12:
            raise ValueError("best loss must close the iterate sequence")
        total = sum(self.breakdown.values())
        if abs(total - self.best_loss) > 1e-10:
            raise ValueError("breakdown must sum to the best loss")


def optimize_voltages(
    initial: Sequence[float] | np.ndarray,
    spec: LossSpec,
    budget: int,
    solver: Callable[[np.ndarray], np.ndarray],
) -> OptimizationTrace:
    """Minimize the loss by bounded simplex descent with restarts.

    Runs at most ``budget`` loss evaluations inside a box of half-width
    50 mV around ``initial``; candidates outside are clipped and pay a
    quadratic penalty.  After a descent converges, the search restarts
    from the incumbent with a smaller simplex until the budget runs out,
    and the best vector found so far is always returned (``exhausted``
    flags a run stopped by the budget rather than by convergence).
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    x0 = as_voltage_vector(initial)
    lo = x0 - BOX_HALF_WIDTH_MV
    hi = x0 + BOX_HALF_WIDTH_MV

    evaluations = 0
    best_loss = np.inf
    best_x: np.ndarray | None = None
    best_breakdown: dict[str, float] = {}
    iterates: list[tuple[np.ndarray, float]] = []

    class _BudgetExhausted(Exception):
        pass

    def objective(x: np.ndarray) -> float:
        nonlocal evaluations, best_loss, best_x, best_breakdown
        if evaluations >= budget:
            raise _BudgetExhausted
        evaluations += 1
        clipped = np.clip(x, lo, hi)
        penalty = float(np.sum((np.asarray(x, dtype=float) - clipped) ** 2))
        try:
            total, breakdown = loss_value(spec, clipped, solver)
        except (DavidsonError, np.linalg.LinAlgError):
            return np.inf
        if total < best_loss:
            best_loss = total
            best_x = clipped.copy()
            best_breakdown = breakdown
            iterates.append((clipped.copy(), total))
        return total + 1e3 * penalty

    exhausted = False
    try:
        if not np.isfinite(objective(x0)):
            raise DavidsonError("loss not evaluable at the initial vector")
        for radius in RESTART_RADII_MV:
            if evaluations >= budget:
                break
            simplex = np.tile(best_x, (8, 1))
            for kk in range(7):
                step = radius if best_x[kk] + radius <= hi[kk] else -radius
                simplex[kk + 1, kk] += step
            minimize(
                objective,
                best_x,
                method="Nelder-Mead",
                options={
                    "initial_simplex": simplex,
                    "maxfev": budget - evaluations,
                    "xatol": 1e-7,
                    "fatol": 1e-13,
                },
            )
    except _BudgetExhausted:
        exhausted = True
    exhausted = exhausted or evaluations >= budget

    return OptimizationTrace(
        iterates=iterates,
        best=best_x,
        best_loss=best_loss,
        breakdown=best_breakdown,
        evaluations=evaluations,
        exhausted=exhausted,
    )


def write_voltages_csv(path, voltages_mv) -> None:
    """Write a voltage vector as ``electrode,mV`` rows (electrodes 1-7)."""
    v = as_voltage_vector(voltages_mv)
    lines = ["electrode,mV"]
    lines += [f"{k + 1},{float(val)!r}" for k, val in enumerate(v)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_voltages_csv(path) -> np.ndarray:
    """Read a voltage vector written by :func:`write_voltages_csv`."""
    rows = Path(path).read_text().strip().splitlines()
    if not rows or rows[0].strip() != "electrode,mV":
        raise ValueError("expected header 'electrode,mV'")
    values: dict[int, float] = {}
    for line in rows[1:]:
        key, _, val = line.partition(",")
        values[int(key)] = float(val)
    if sorted(values) != list(range(1, 8)):
        raise ValueError("expected exactly electrodes 1..7")
    return np.array([values[k] for k in range(1, 8)])


def write_trace_json(path, trace: OptimizationTrace, extra: dict | None = None) -> None:
    """Write an optimization trace as JSON, merging any extra metadata."""
    payload = {
        "best_mv": [float(v) for v in trace.best],
        "best_loss": trace.best_loss,
        "breakdown": trace.breakdown,
        "evaluations": trace.evaluations,
        "exhausted": trace.exhausted,
        "iterates": [
            {"mv": [float(v) for v in x], "loss": loss} for x, loss in trace.iterates
        ],
    }
    if extra:
        payload = {**payload, **extra}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
