"""Grid searches over pulse timings with warm-started hold extension.

A sweep evaluates gate fidelity over a (t_ramp, t_hold) grid.  Cells in
one row (fixed ramp time) describe pulses whose control histories agree
to machine precision from t = 0 until just past the shorter hold, which
a warm-started row exploits three ways:

* one base run per row covers the longest hold, recording the state
  stack at every earlier hold value on the way;
* cells whose shutdown window overlaps the rise (hold < 2 t_ramp) resume
  from the base stack at their own hold time and only step the remaining
  2 t_ramp window;
* once the rise is fully saturated (hold >= 2 t_ramp) the shutdown
  window is one shared operator, so a single backward pass over it turns
  the four reference states into adjoint probes and every remaining cell
  reduces to inner products with the recorded stacks.

All four computational-basis trajectories advance in lockstep, sharing
every solve.  Warm rows agree with cold evaluation to well under the
1e-8 contract; the canonical single-cell pipeline (`evaluate_cell`) is a
deterministic function of its arguments and anchors the bit-level
reproducibility guarantees (degenerate grids, optimum re-evaluation,
sensitivity center cells, serialized output).
"""

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dvr import OperatorCache, TwoBodyBasis
from .electrostatics import Device, RampSchedule, VoltageFunction, voltage_at
from .gates import (
    FidelityReport,
    optimize_rotations,
    overlap_gate_matrix,
    target_gate,
)
from .propagation import (
    PropagationError,
    PropagationPlan,
    evolve_window,
    propagate_states,
    resume_states_from,
)
from .spectrum import label_states, solve_spectrum

GRID_TOL_REL = 1e-6  # how close to a whole step a duration must land


def snap_to_grid(values, dt_ns: float):
    """Round durations to the nearest whole multiple of the step size.

    Sweep values must sit on the time-step grid so every pulse length is
    a whole number of steps; use this to regularize analytically derived
    values (for example multiples of an irrational ramp unit).
    """
    if dt_ns <= 0.0:
        raise ValueError("dt_ns must be positive")
    return tuple(round(float(v) / dt_ns) * dt_ns for v in values)


def _on_grid(value: float, dt_ns: float) -> bool:
    ratio = value / dt_ns
    return abs(ratio - round(ratio)) <= GRID_TOL_REL * max(1.0, abs(ratio))


def _steps(span_ns: float, dt_ns: float) -> int:
    return int(round(abs(span_ns) / dt_ns))


@dataclass(frozen=True)
class SweepSpec:
    """A (t_ramp, t_hold) grid, the pulse family to sweep, and the target.

    ``ramp_values_ns`` and ``hold_values_ns`` must be strictly ascending,
    nonempty, and whole multiples of ``dt_ns``; hold values must also be
    uniformly spaced, which is what lets one base run per row serve every
    cell of that row.
    """

    ramp_values_ns: tuple
    hold_values_ns: tuple
    voltage_fn: VoltageFunction
    target: str
    dt_ns: float = 0.002

    def __post_init__(self):
        object.__setattr__(
            self, "ramp_values_ns", tuple(float(v) for v in self.ramp_values_ns)
        )
        object.__setattr__(
            self, "hold_values_ns", tuple(float(v) for v in self.hold_values_ns)
        )
        object.__setattr__(self, "dt_ns", float(self.dt_ns))
        if self.dt_ns <= 0.0:
            raise ValueError("dt_ns must be positive")
        target_gate(self.target)  # validates the gate kind
        for name, values in (("ramp", self.ramp_values_ns),
                             ("hold", self.hold_values_ns)):
            if not values:
                raise ValueError(f"{name} values must be nonempty")
            if any(np.diff(values) <= 0.0):
                raise ValueError(f"{name} values must be strictly ascending")
            off = [v for v in values if not _on_grid(v, self.dt_ns)]
            if off:
                raise ValueError(
                    f"{name} values {off} are not whole multiples of "
                    f"dt={self.dt_ns} ns; snap_to_grid can regularize them"
                )
        if self.ramp_values_ns[0] <= 0.0:
            raise ValueError("ramp values must be positive")
        if self.hold_values_ns[0] < 0.0:
            raise ValueError("hold values must be nonnegative")
        steps = np.diff(self.hold_values_ns)
        if steps.size and (steps.max() - steps.min()) > 1e-9:
            raise ValueError("hold values must be uniformly spaced")

    @property
    def shape(self) -> tuple:
        return (len(self.ramp_values_ns), len(self.hold_values_ns))


@dataclass(frozen=True)
class CellOutcome:
    """One grid cell: either a fidelity report or an explicit error."""

    t_ramp_ns: float
    t_hold_ns: float
    report: FidelityReport = None
    error: str = None

    def __post_init__(self):
        if (self.report is None) == (self.error is None):
            raise ValueError("a cell carries exactly one of report or error")

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class SweepResult:
    """A complete fidelity surface with its provenance.

    ``cells[i][j]`` is the outcome at ramp value i, hold value j; every
    cell is present (failures carry explicit error markers, never gaps).
    ``optimum`` is (t_ramp_ns, t_hold_ns, fidelity) at the grid argmax of
    the surface, with ties broken toward the faster gate; its fidelity is
    re-evaluated through the canonical single-cell pipeline, so it is a
    pure function of the winning parameters and agrees with the stored
    cell to solver accuracy.  None when every cell failed.
    """

    spec: SweepSpec
    cells: list
    optimum: tuple
    config_hash: str
    unit_system: dict
    wall_time_s: float = 0.0
    total_steps: int = 0
    warm: bool = True

    def __post_init__(self):
        n_ramp, n_hold = self.spec.shape
        if len(self.cells) != n_ramp:
            raise ValueError("one row of cells per ramp value required")
        for i, row in enumerate(self.cells):
            if len(row) != n_hold:
                raise ValueError(f"row {i} is incomplete")
            for j, cell in enumerate(row):
                if (cell.t_ramp_ns != self.spec.ramp_values_ns[i]
                        or cell.t_hold_ns != self.spec.hold_values_ns[j]):
                    raise ValueError(f"cell ({i}, {j}) is out of place")
        if self.optimum is not None:
            i = self.spec.ramp_values_ns.index(self.optimum[0])
            j = self.spec.hold_values_ns.index(self.optimum[1])
            if not self.cells[i][j].ok:
                raise ValueError("optimum points at a failed cell")

    def cell(self, t_ramp_ns: float, t_hold_ns: float) -> CellOutcome:
        i = self.spec.ramp_values_ns.index(t_ramp_ns)
        j = self.spec.hold_values_ns.index(t_hold_ns)
        return self.cells[i][j]

    @property
    def failures(self) -> list:
        return [
            {"t_ramp_ns": c.t_ramp_ns, "t_hold_ns": c.t_hold_ns, "error": c.error}
            for row in self.cells
            for c in row
            if not c.ok
        ]

    @property
    def provenance(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "dt_ns": self.spec.dt_ns,
            "grid": list(self.spec.shape),
            "wall_time_s": self.wall_time_s,
            "total_steps": self.total_steps,
            "warm": self.warm,
        }


def _profile_payload(profile) -> dict:
    if profile.layout is not None:
        layout = profile.layout
        return {
            "kind": "analytic",
            "centers_um": list(layout.centers_um),
            "widths_um": list(layout.widths_um),
            "depth_um": layout.depth_um,
        }
    from .electrostatics import alpha_eval

    knots = profile._splines[0].x
    return {
        "kind": "tabulated",
        "x_um": knots.tolist(),
        "alphas": alpha_eval(profile, knots).tolist(),
    }


def config_payload(spec: SweepSpec, device: Device, basis: TwoBodyBasis) -> dict:
    """Everything that determines a sweep's numbers, as plain JSON data."""
    vf = spec.voltage_fn
    return {
        "dt_ns": spec.dt_ns,
        "ramp_values_ns": list(spec.ramp_values_ns),
        "hold_values_ns": list(spec.hold_values_ns),
        "target": spec.target,
        "voltage": {
            "start_mv": np.asarray(vf.start_mv, dtype=float).tolist(),
            "end_mv": np.asarray(vf.end_mv, dtype=float).tolist(),
            "family": vf.family,
            "target": vf.target,
        },
        "device": {
            "kappa": device.kappa,
            "epsilon": device.epsilon,
            "units": {
                "length_unit_um": device.units.length_unit_um,
                "energy_to_ghz": device.units.energy_to_ghz,
                "voltage_to_energy": device.units.voltage_to_energy,
            },
            "profile": _profile_payload(device.profile),
        },
        "basis": {
            "left": [basis.left.start, basis.left.spacing, basis.left.count],
            "right": [basis.right.start, basis.right.spacing, basis.right.count],
        },
    }


def config_hash(spec: SweepSpec, device: Device, basis: TwoBodyBasis) -> str:
    """SHA-256 over the canonical serialization of the sweep configuration."""
    text = json.dumps(config_payload(spec, device, basis), sort_keys=True,
                      separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def idle_computational_states(device: Device, basis: TwoBodyBasis,
                              voltage_fn: VoltageFunction) -> list:
    """The labeled (00, 01, 10, 11) eigenstates at the pulse's idle point."""
    cache = OperatorCache(device, basis, voltage_at(voltage_fn, 0.0))
    sol = solve_spectrum(cache, k=6)
    labels = label_states(sol, cache)
    return [sol.states[i] for i in labels.qubit_indices]


def _cell_plan(spec: SweepSpec, device: Device, t_ramp_ns: float,
               t_hold_ns: float, snapshot_times_ns=()) -> PropagationPlan:
    return PropagationPlan(
        schedule=RampSchedule(t_ramp_ns=t_ramp_ns, t_hold_ns=t_hold_ns),
        voltage_fn=spec.voltage_fn,
        device=device,
        dt_ns=spec.dt_ns,
        snapshot_times_ns=snapshot_times_ns,
    )


def evaluate_cell(spec: SweepSpec, device: Device, t_ramp_ns: float,
                  t_hold_ns: float, idle_states, *,
                  eigen_table: dict = None) -> FidelityReport:
    """Canonical cold evaluation of one grid cell.

    Propagates the four computational states over the full pulse in one
    lockstep batch and scores the overlap matrix against the target gate.
    The result is a deterministic function of the arguments alone, which
    every bit-level reproducibility guarantee leans on.
    """
    plan = _cell_plan(spec, device, t_ramp_ns, t_hold_ns)
    runs = propagate_states(plan, idle_states, eigen_table=eigen_table)
    u = overlap_gate_matrix(idle_states, [r.final for r in runs])
    return optimize_rotations(u, target_gate(spec.target))


def _outcome(t_ramp_ns, t_hold_ns, build):
    try:
        return CellOutcome(t_ramp_ns, t_hold_ns, report=build())
    except (PropagationError, ValueError) as exc:
        return CellOutcome(t_ramp_ns, t_hold_ns, error=f"{type(exc).__name__}: {exc}")


def _cold_row(spec: SweepSpec, device: Device, t_ramp_ns: float, idle_states):
    table = {}
    cells, steps = [], 0
    for h in spec.hold_values_ns:
        cells.append(_outcome(t_ramp_ns, h, lambda h=h: evaluate_cell(
            spec, device, t_ramp_ns, h, idle_states, eigen_table=table)))
        steps += _steps(2.0 * t_ramp_ns + h, spec.dt_ns)
    return cells, steps


def _warm_row(spec: SweepSpec, device: Device, t_ramp_ns: float, idle_states):
    """Evaluate one fixed-ramp row through the shared base run.

    Returns (cells ordered by hold value, total time steps advanced).
    """
    holds = spec.hold_values_ns
    r = t_ramp_ns
    h_max = holds[-1]
    table = {}
    target = target_gate(spec.target)
    steps = 0

    # earlier hold values are recorded along the base run; t = 0 never is
    # (nothing has stepped yet), so a zero hold is evaluated directly
    record = tuple(h for h in holds[:-1] if h > 0.0)
    base_plan = _cell_plan(spec, device, r, h_max, snapshot_times_ns=record)
    try:
        base_runs = propagate_states(base_plan, idle_states, eigen_table=table)
    except (PropagationError, ValueError) as exc:
        reason = f"base run failed, {type(exc).__name__}: {exc}"
        return [CellOutcome(r, h, error=reason) for h in holds], steps
    steps += _steps(base_plan.t_gate_ns, spec.dt_ns)
    e_ref = base_runs[0].reference_energy
    stacks = {
        t: [run.snapshots[k][1] for run in base_runs]
        for k, (t, _) in enumerate(base_runs[0].snapshots)
    }

    adjoint_band = [h for h in record if h >= 2.0 * r]
    probes, probe_error = None, None
    if adjoint_band:
        # one backward pass over the shared shutdown window; opening is
        # saturated there, so the window operator is hold-independent
        try:
            probes = evolve_window(
                base_plan, idle_states, base_plan.t_gate_ns, h_max,
                reference_energy=e_ref, eigen_table=table,
            )
            steps += _steps(2.0 * r, spec.dt_ns)
        except (PropagationError, ValueError) as exc:
            probe_error = (
                f"shared shutdown pass failed, {type(exc).__name__}: {exc}"
            )

    outcomes = {}
    for h in holds:
        if h == h_max:
            outcomes[h] = _outcome(r, h, lambda: optimize_rotations(
                overlap_gate_matrix(idle_states, [b.final for b in base_runs]),
                target))
        elif h == 0.0:
            outcomes[h] = _outcome(r, h, lambda h=h: evaluate_cell(
                spec, device, r, h, idle_states, eigen_table=table))
            steps += _steps(2.0 * r, spec.dt_ns)
        elif h in adjoint_band:
            if probes is None:
                outcomes[h] = CellOutcome(r, h, error=probe_error)
            else:
                outcomes[h] = _outcome(r, h, lambda h=h: optimize_rotations(
                    overlap_gate_matrix(probes, stacks[h]), target))
        else:

            def closing_leg(h=h):
                plan = _cell_plan(spec, device, r, h)
                trajs = resume_states_from(
                    [(h, s) for s in stacks[h]], plan, donor_hold_ns=h_max,
                    reference_energy=e_ref, eigen_table=table,
                )
                u = overlap_gate_matrix(idle_states, [t.final for t in trajs])
                return optimize_rotations(u, target)

            outcomes[h] = _outcome(r, h, closing_leg)
            steps += _steps(2.0 * r, spec.dt_ns)
    return [outcomes[h] for h in holds], steps


def _row_worker(args):
    spec, device, basis, t_ramp_ns, idle_coeffs, warm = args
    # states are shipped as bare arrays; rebind them to the basis locally
    from .dvr import TwoBodyState

    idle_states = [TwoBodyState(c, basis) for c in idle_coeffs]
    row_fn = _warm_row if warm else _cold_row
    return row_fn(spec, device, t_ramp_ns, idle_states)


def _run_rows(spec, device, basis, idle_states, warm, workers):
    tasks = [
        (spec, device, basis, r, [s.coeffs for s in idle_states], warm)
        for r in spec.ramp_values_ns
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_row_worker, tasks))
    else:
        results = [_row_worker(t) for t in tasks]
    cells = [row for row, _ in results]
    steps = sum(s for _, s in results)
    return cells, steps


def _argmax_cell(spec, cells):
    best = None
    for row in cells:
        for c in row:
            if not c.ok:
                continue
            gate_time = 2.0 * c.t_ramp_ns + c.t_hold_ns
            key = (-c.report.fidelity, gate_time, c.t_ramp_ns, c.t_hold_ns)
            if best is None or key < best[0]:
                best = (key, c)
    return None if best is None else best[1]


def grid_search(spec: SweepSpec, device: Device, basis: TwoBodyBasis, *,
                warm: bool = True, workers: int = 1) -> SweepResult:
    """Evaluate the full (t_ramp, t_hold) fidelity surface.

    Rows are independent work units (``workers`` > 1 runs them in
    separate processes; results merge by grid index, so the outcome is
    identical either way).  ``warm=False`` forces the canonical cold
    pipeline on every cell, which the warm rows must match to 1e-8.
    Failed cells carry error markers and never interrupt the sweep.
    """
    t0 = time.perf_counter()
    idle_states = idle_computational_states(device, basis, spec.voltage_fn)
    cells, steps = _run_rows(spec, device, basis, idle_states, warm, workers)
    best = _argmax_cell(spec, cells)
    optimum = None
    if best is not None:
        report = evaluate_cell(spec, device, best.t_ramp_ns, best.t_hold_ns,
                               idle_states)
        steps += _steps(2.0 * best.t_ramp_ns + best.t_hold_ns, spec.dt_ns)
        optimum = (best.t_ramp_ns, best.t_hold_ns, report.fidelity)
    units = device.units
    return SweepResult(
        spec=spec,
        cells=cells,
        optimum=optimum,
        config_hash=config_hash(spec, device, basis),
        unit_system={
            "length_unit_um": units.length_unit_um,
            "energy_to_ghz": units.energy_to_ghz,
            "voltage_to_energy": units.voltage_to_energy,
        },
        wall_time_s=time.perf_counter() - t0,
        total_steps=steps,
        warm=warm,
    )


def sensitivity_sweep(center, window_ns: float, resolution_ns: float,
                      spec: SweepSpec, device: Device, basis: TwoBodyBasis, *,
                      workers: int = 1) -> SweepResult:
    """Dense fidelity map in a square window around a grid optimum.

    ``center`` is (t_ramp_ns, t_hold_ns); the window spans center values
    plus/minus ``window_ns`` sampled every ``resolution_ns`` on each
    axis.  Every cell runs the canonical cold pipeline, so the center
    cell reproduces the optimum's re-evaluated fidelity bit for bit.
    Axis-aligned cross sections through the center come from
    ``cross_sections``.
    """
    if window_ns <= 0.0:
        raise ValueError("window must be positive")
    if resolution_ns <= 0.0:
        raise ValueError("resolution must be positive")
    n = window_ns / resolution_ns
    if abs(n - round(n)) > 1e-9:
        raise ValueError("resolution must divide the window evenly")
    n = int(round(n))
    r0, h0 = float(center[0]), float(center[1])
    offsets = [(k - n) * resolution_ns for k in range(2 * n + 1)]
    ramps = snap_to_grid((r0 + d for d in offsets), spec.dt_ns)
    holds = snap_to_grid((h0 + d for d in offsets), spec.dt_ns)
    if ramps[0] <= 0.0:
        raise ValueError("window reaches nonpositive ramp times; shrink it")
    if holds[0] < 0.0:
        raise ValueError("window reaches negative hold times; shrink it")
    local = SweepSpec(
        ramp_values_ns=ramps,
        hold_values_ns=holds,
        voltage_fn=spec.voltage_fn,
        target=spec.target,
        dt_ns=spec.dt_ns,
    )
    return grid_search(local, device, basis, warm=False, workers=workers)


def cross_sections(result: SweepResult, center) -> tuple:
    """The two axis-aligned 1D cuts through a center cell.

    Returns (hold_cut, ramp_cut): outcomes along the hold axis at the
    center's ramp value, and along the ramp axis at the center's hold.
    """
    i = result.spec.ramp_values_ns.index(float(center[0]))
    j = result.spec.hold_values_ns.index(float(center[1]))
    hold_cut = list(result.cells[i])
    ramp_cut = [row[j] for row in result.cells]
    return hold_cut, ramp_cut


def write_cells_csv(path, cells):
    """One row per cell, in the given order; failed cells carry `failed`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_ramp_ns,t_hold_ns,fidelity,swap_error,leak_error,"
                 "theta_L,theta_R\n")
        for c in cells:
            if c.ok:
                rep = c.report
                fields = (c.t_ramp_ns, c.t_hold_ns, rep.fidelity,
                          rep.swap_error, rep.leakage_error,
                          rep.angles.theta_left, rep.angles.theta_right)
                fh.write(",".join(repr(float(v)) for v in fields) + "\n")
            else:
                fh.write(f"{c.t_ramp_ns!r},{c.t_hold_ns!r},failed,,,,\n")


def write_sweep_csv(path, result: SweepResult):
    """Whole grid, ramp-major; failed cells carry the token `failed`."""
    write_cells_csv(path, (c for row in result.cells for c in row))


def write_sweep_manifest(path, result: SweepResult, extra: dict = None):
    """JSON provenance: the sweep's inputs, hash, timing, and failures."""
    spec = result.spec
    vf = spec.voltage_fn
    payload = {
        "schema_version": 1,
        "target": spec.target,
        "dt_ns": spec.dt_ns,
        "ramp_values_ns": list(spec.ramp_values_ns),
        "hold_values_ns": list(spec.hold_values_ns),
        "voltage_family": vf.family,
        "voltage_target": vf.target,
        "voltage_start_mv": np.asarray(vf.start_mv, dtype=float).tolist(),
        "voltage_end_mv": np.asarray(vf.end_mv, dtype=float).tolist(),
        "unit_system": result.unit_system,
        "config_hash": result.config_hash,
        "grid": list(spec.shape),
        "wall_time_s": result.wall_time_s,
        "total_steps": result.total_steps,
        "warm": result.warm,
        "optimum": None if result.optimum is None else {
            "t_ramp_ns": result.optimum[0],
            "t_hold_ns": result.optimum[1],
            "fidelity": result.optimum[2],
        },
        "failures": result.failures,
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
