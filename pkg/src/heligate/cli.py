"""Command-line entry point wiring config files to the simulation workflows.

One binary with subcommands: `spectrum`, `propagate`, `gate-search`,
`sensitivity`, `volt-opt`, `analyze`.  Runs are driven by a TOML config
with an explicit schema version; unknown keys are rejected, every run is
stamped with the config's SHA-256, and each command writes its outputs
plus a run manifest (input digests, output digests, wall time, solver
statistics) atomically into the output directory.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .dvr import OperatorCache, build_basis
from .electrostatics import (
    ZETA_VOLTAGES_MV,
    CouplingProfile,
    Device,
    ElectrodeLayout,
    RampSchedule,
    UnitSystem,
    VoltageFunction,
    as_voltage_vector,
    voltage_at,
)
from .gates import (
    GateMatrix,
    elementwise_report,
    overlap_gate_matrix,
    target_gate,
    write_gate_json,
)
from .propagation import (
    PropagationError,
    PropagationPlan,
    propagate_states,
    write_trajectory_csv,
)
from .search import (
    SweepSpec,
    cross_sections,
    grid_search,
    sensitivity_sweep,
    snap_to_grid,
    write_cells_csv,
    write_sweep_csv,
    write_sweep_manifest,
)
from .spectrum import (
    DavidsonError,
    LabelingError,
    label_states,
    solve_spectrum,
    spectrum_vs_lambda,
    write_spectrum_csv,
)
from .voltopt import (
    LossSpec,
    OptimizationTrace,
    energy_solver,
    loss_value,
    optimize_voltages,
    write_trace_json,
    write_voltages_csv,
)

SCHEMA_VERSION = 1

# allowed keys per table; None marks tables with free-form keys
_SCHEMA = {
    "schema_version": None,
    "device": {
        "profile": None,
        "kappa": None,
        "epsilon": None,
        "centers_um": None,
        "widths_um": None,
        "depth_um": None,
        "positions_um": None,
        "alphas": None,
        "units": {
            "calibrated": None,
            "length_unit_um": None,
            "energy_to_ghz": None,
            "voltage_to_energy": None,
        },
    },
    "voltages": None,
    "voltage_function": {"family": None, "target": None, "start": None, "end": None},
    "numerics": {
        "points_per_well": None,
        "extent_harmonic_lengths": None,
        "dt_ns": None,
    },
    "spectrum": {"lambdas": None, "kappa_zero": None},
    "propagate": {"t_ramp_ns": None, "t_hold_ns": None, "overlap_stride": None},
    "sweep": {
        "target": None,
        "ramp_values_ns": None,
        "hold_values_ns": None,
        "warm": None,
        "snap": None,
    },
    "sensitivity": {"center": None, "window_ns": None, "resolution_ns": None},
    "volt_opt": {"config": None, "initial": None, "budget": None},
}


class ConfigError(ValueError):
    """Invalid config file, flag combination, or malformed input file."""


def _check_keys(table: dict, schema: dict, path: str):
    for key, value in table.items():
        if key not in schema:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                where = f"{path}.{key}" if path else key
                raise ConfigError(f"config key {where!r} must be a table")
            _check_keys(value, sub, f"{path}.{key}" if path else key)


def load_config(path) -> dict:
    """Parse and schema-validate a TOML run config."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}")
    _check_keys(data, _SCHEMA, "")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )
    return data


def config_digest(cfg: dict) -> str:
    """SHA-256 of the canonical JSON serialization of a parsed config."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """Reproducibility record for one command invocation."""

    command: str
    config_hash: str
    artifact_version: str
    inputs: dict
    outputs: list = field(default_factory=list)
    wall_time_s: float = 0.0
    solver_stats: dict = field(default_factory=dict)
    seed: int = None

    def add_output(self, path):
        path = Path(path)
        self.outputs.append({"path": path.name, "sha256": _file_digest(path)})

    def payload(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "artifact_version": self.artifact_version,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": self.wall_time_s,
            "solver_stats": self.solver_stats,
            "seed": self.seed,
        }

    def write(self, path):
        """Serialize atomically: a partial manifest never replaces a good one."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.payload(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def load_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def verify_manifest(path) -> dict:
    """Re-digest every listed output; raises if any file drifted or vanished."""
    data = load_manifest(path)
    base = Path(path).parent
    for entry in data["outputs"]:
        target = base / entry["path"]
        if not target.exists():
            raise ConfigError(f"manifest output missing: {target}")
        digest = _file_digest(target)
        if digest != entry["sha256"]:
            raise ConfigError(f"manifest digest mismatch for {target}")
    return data


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing required config key {where}.{key}")
    return table[key]


def build_units(cfg: dict) -> UnitSystem:
    dev = cfg.get("device", {})
    units_cfg = dev.get("units", {})
    base = UnitSystem.calibrated()
    if units_cfg.get("calibrated", False):
        if len(units_cfg) > 1:
            raise ConfigError("device.units: calibrated=true excludes explicit values")
        return base
    if not units_cfg:
        return base
    try:
        return UnitSystem(
            length_unit_um=float(units_cfg.get("length_unit_um", base.length_unit_um)),
            energy_to_ghz=float(units_cfg.get("energy_to_ghz", base.energy_to_ghz)),
            voltage_to_energy=float(
                units_cfg.get("voltage_to_energy", base.voltage_to_energy)
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"device.units: {exc}")


def build_device(cfg: dict) -> Device:
    dev = cfg.get("device", {})
    kind = dev.get("profile", "analytic")
    try:
        if kind == "analytic":
            defaults = ElectrodeLayout()
            layout = ElectrodeLayout(
                centers_um=tuple(dev.get("centers_um", defaults.centers_um)),
                widths_um=tuple(dev.get("widths_um", defaults.widths_um)),
                depth_um=float(dev.get("depth_um", defaults.depth_um)),
            )
            profile = CouplingProfile.analytic(layout)
        elif kind == "tabulated":
            profile = CouplingProfile.tabulated(
                _require(dev, "positions_um", "device"),
                _require(dev, "alphas", "device"),
            )
        else:
            raise ConfigError(f"device.profile must be analytic or tabulated, got {kind!r}")
        return Device(
            profile=profile,
            units=build_units(cfg),
            kappa=float(dev.get("kappa", 2326.0)),
            epsilon=float(dev.get("epsilon", 0.01)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"device: {exc}")


def resolve_voltages(cfg: dict, value, where: str) -> np.ndarray:
    """A voltage entry is an inline 7-vector or a name.

    Names resolve first against the config's [voltages] table, then
    against the packaged working points ("I", "II", "III").
    """
    if isinstance(value, str):
        named = cfg.get("voltages", {})
        if value in named:
            value = named[value]
        elif value in ZETA_VOLTAGES_MV:
            value = ZETA_VOLTAGES_MV[value]
        else:
            raise ConfigError(f"{where}: unknown voltage name {value!r}")
    try:
        return as_voltage_vector(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}")


def build_voltage_fn(cfg: dict) -> VoltageFunction:
    vf = cfg.get("voltage_function")
    if vf is None:
        raise ConfigError("missing [voltage_function] section")
    start = resolve_voltages(cfg, _require(vf, "start", "voltage_function"),
                             "voltage_function.start")
    end = resolve_voltages(cfg, _require(vf, "end", "voltage_function"),
                           "voltage_function.end")
    try:
        return VoltageFunction(
            start_mv=start,
            end_mv=end,
            family=vf.get("family", "zeta"),
            target=vf.get("target", "II"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"voltage_function: {exc}")


def _numerics(cfg: dict, dt_override=None) -> dict:
    num = cfg.get("numerics", {})
    out = {
        "points_per_well": int(num.get("points_per_well", 24)),
        "extent_harmonic_lengths": float(num.get("extent_harmonic_lengths", 4.0)),
        "dt_ns": float(num.get("dt_ns", 0.002)),
    }
    if dt_override is not None:
        out["dt_ns"] = float(dt_override)
    if out["dt_ns"] <= 0.0:
        raise ConfigError("numerics.dt_ns must be positive")
    return out


def _build_stage(cfg: dict, dt_override=None):
    """Device, idle-point basis, voltage function, and numerics in one go."""
    device = build_device(cfg)
    vf = build_voltage_fn(cfg)
    num = _numerics(cfg, dt_override)
    try:
        basis = build_basis(
            device,
            voltage_at(vf, 0.0),
            points_per_well=num["points_per_well"],
            extent_harmonic_lengths=num["extent_harmonic_lengths"],
        )
    except ValueError as exc:
        raise ConfigError(f"basis construction failed: {exc}")
    return device, basis, vf, num


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("HELIGATE_OUT") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(args, cfg, command) -> RunManifest:
    inputs = {}
    if args.config:
        inputs[Path(args.config).name] = _file_digest(args.config)
    return RunManifest(
        command=command,
        config_hash=config_digest(cfg) if cfg else "",
        artifact_version=__version__,
        inputs=inputs,
        seed=args.seed,
    )


def _parse_lambdas(spec) -> np.ndarray:
    if isinstance(spec, dict):
        for key in spec:
            if key not in ("start", "stop", "step"):
                raise ConfigError(f"spectrum.lambdas: unknown key {key!r}")
        start = float(spec.get("start", 0.0))
        stop = float(spec.get("stop", 1.0))
        step = float(spec.get("step", 0.01))
        if step <= 0.0 or stop < start:
            raise ConfigError("spectrum.lambdas: need step > 0 and stop >= start")
        count = int(round((stop - start) / step)) + 1
        return start + step * np.arange(count)
    values = np.asarray(spec, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ConfigError("spectrum.lambdas must be a nonempty list")
    return values


def _parse_lambda_flag(text: str) -> np.ndarray:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError("--lambdas range must be start:stop:step")
        return _parse_lambdas(
            {"start": float(parts[0]), "stop": float(parts[1]), "step": float(parts[2])}
        )
    return _parse_lambdas([float(v) for v in text.split(",") if v])


def cmd_spectrum(args, cfg) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    device, basis, vf, _ = _build_stage(cfg, args.dt)
    sec = cfg.get("spectrum", {})
    if args.lambdas is not None:
        lambdas = _parse_lambda_flag(args.lambdas)
    else:
        lambdas = _parse_lambdas(sec.get("lambdas", [0.0]))
    if sec.get("kappa_zero", False):
        device = dataclasses.replace(device, kappa=0.0)
    cache = OperatorCache(device, basis, voltage_at(vf, 0.0))
    energies, zetas = spectrum_vs_lambda(cache, vf, lambdas)
    to_ghz = device.units.energy_to_ghz
    path = out / "spectrum.csv"
    write_spectrum_csv(path, lambdas, energies * to_ghz, zetas * to_ghz)
    manifest = _manifest(args, cfg, "spectrum")
    manifest.add_output(path)
    manifest.solver_stats = {"rows": int(lambdas.size)}
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    manifest_path = out / "manifest.json"
    print(f"wrote {path} ({lambdas.size} rows, energies and zeta in GHz)")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_propagate(args, cfg) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    device, basis, vf, num = _build_stage(cfg, args.dt)
    sec = cfg.get("propagate", {})
    t_ramp = float(_require(sec, "t_ramp_ns", "propagate"))
    t_hold = float(_require(sec, "t_hold_ns", "propagate"))
    stride = int(sec.get("overlap_stride", 50))
    cache = OperatorCache(device, basis, voltage_at(vf, 0.0))
    sol = solve_spectrum(cache, k=6)
    labels = label_states(sol, cache)
    qubit_states = [sol.states[i] for i in labels.qubit_indices]
    try:
        plan = PropagationPlan(
            schedule=RampSchedule(t_ramp_ns=t_ramp, t_hold_ns=t_hold),
            voltage_fn=vf,
            device=device,
            dt_ns=num["dt_ns"],
            overlap_states=sol.states,
            overlap_stride=stride,
        )
    except ValueError as exc:
        raise ConfigError(f"propagate: {exc}")
    runs = propagate_states(plan, qubit_states)
    gate = overlap_gate_matrix(qubit_states, [r.final for r in runs])
    manifest = _manifest(args, cfg, "propagate")
    drift = max(r.norm_drift for r in runs)
    gate_path = out / "gate.json"
    write_gate_json(
        gate_path,
        gate,
        extra={
            "t_ramp_ns": t_ramp,
            "t_hold_ns": t_hold,
            "dt_ns": num["dt_ns"],
            "norm_drift": drift,
            "config_hash": manifest.config_hash,
            "spectrum_in_expected_order": labels.matches_expected_order,
        },
        eigenindex_map=labels.qubit_indices,
    )
    manifest.add_output(gate_path)
    for label, run in zip(("00", "01", "10", "11"), runs):
        path = out / f"overlaps_{label}.csv"
        write_trajectory_csv(path, run.overlap_times_ns, run.overlaps)
        manifest.add_output(path)
    manifest.solver_stats = {"norm_drift": drift, "overlap_stride": stride}
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    print(f"wrote {gate_path} and four overlap series (max norm drift {drift:.3g})")
    return 0


def _sweep_spec(cfg, dt_override, for_sensitivity=False) -> SweepSpec:
    vf = build_voltage_fn(cfg)
    num = _numerics(cfg, dt_override)
    sweep = cfg.get("sweep")
    if sweep is None:
        raise ConfigError("missing [sweep] section")
    target = _require(sweep, "target", "sweep")
    ramps = _require(sweep, "ramp_values_ns", "sweep")
    holds = _require(sweep, "hold_values_ns", "sweep")
    if sweep.get("snap", False):
        ramps = snap_to_grid(ramps, num["dt_ns"])
        holds = snap_to_grid(holds, num["dt_ns"])
    try:
        return SweepSpec(
            ramp_values_ns=tuple(float(v) for v in ramps),
            hold_values_ns=tuple(float(v) for v in holds),
            voltage_fn=vf,
            target=target,
            dt_ns=num["dt_ns"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep: {exc}")


def cmd_gate_search(args, cfg) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    spec = _sweep_spec(cfg, args.dt)
    device, basis, _, _ = _build_stage(cfg, args.dt)
    warm = cfg.get("sweep", {}).get("warm", True)
    result = grid_search(spec, device, basis, warm=bool(warm), workers=args.workers)
    csv_path = out / "sweep.csv"
    sweep_manifest_path = out / "sweep_manifest.json"
    write_sweep_csv(csv_path, result)
    write_sweep_manifest(sweep_manifest_path, result)
    manifest = _manifest(args, cfg, "gate-search")
    manifest.add_output(csv_path)
    manifest.add_output(sweep_manifest_path)
    manifest.solver_stats = {
        "total_steps": result.total_steps,
        "failed_cells": len(result.failures),
        "sweep_config_hash": result.config_hash,
    }
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    if result.optimum is None:
        print("every cell failed; see failure markers in sweep.csv", file=sys.stderr)
        return 2
    r, h, fid = result.optimum
    print(f"F={fid:.3f}, t_ramp={r:g} ns, t_hold={h:g} ns")
    if result.failures:
        print(f"{len(result.failures)} cells failed; markers persisted", file=sys.stderr)
    return 0


def cmd_sensitivity(args, cfg) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    spec = _sweep_spec(cfg, args.dt)
    device, basis, _, _ = _build_stage(cfg, args.dt)
    sec = cfg.get("sensitivity", {})
    if args.center is not None:
        try:
            parts = [float(v) for v in args.center.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--center: {exc}")
        center = tuple(parts)
    else:
        center = tuple(float(v) for v in _require(sec, "center", "sensitivity"))
    if len(center) != 2:
        raise ConfigError("sensitivity center must be (t_ramp_ns, t_hold_ns)")
    if not (spec.ramp_values_ns[0] <= center[0] <= spec.ramp_values_ns[-1]
            and spec.hold_values_ns[0] <= center[1] <= spec.hold_values_ns[-1]):
        raise ConfigError("sensitivity center lies outside the sweep domain")
    window = float(sec.get("window_ns", 0.1))
    resolution = float(sec.get("resolution_ns", 0.01))
    try:
        result = sensitivity_sweep(center, window, resolution, spec, device,
                                   basis, workers=args.workers)
    except ValueError as exc:
        raise ConfigError(f"sensitivity: {exc}")
    snapped = (snap_to_grid([center[0]], spec.dt_ns)[0],
               snap_to_grid([center[1]], spec.dt_ns)[0])
    hold_cut, ramp_cut = cross_sections(result, snapped)
    window_path = out / "window.csv"
    hold_path = out / "cross_section_hold.csv"
    ramp_path = out / "cross_section_ramp.csv"
    write_sweep_csv(window_path, result)
    write_cells_csv(hold_path, hold_cut)
    write_cells_csv(ramp_path, ramp_cut)
    manifest = _manifest(args, cfg, "sensitivity")
    for path in (window_path, hold_path, ramp_path):
        manifest.add_output(path)
    manifest.solver_stats = {
        "total_steps": result.total_steps,
        "failed_cells": len(result.failures),
        "center": list(snapped),
        "window_ns": window,
        "resolution_ns": resolution,
    }
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    n_ramp, n_hold = result.spec.shape
    print(f"wrote {window_path} ({n_ramp}x{n_hold} cells) plus two cross sections")
    return 0


def cmd_volt_opt(args, cfg) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    sec = cfg.get("volt_opt", {})
    kind = args.kind or sec.get("config")
    if kind is None:
        raise ConfigError("volt-opt needs volt_opt.config or --kind")
    try:
        loss_spec = LossSpec(config=kind)
    except ValueError as exc:
        raise ConfigError(f"volt_opt: {exc}")
    initial_cfg = sec.get("initial")
    if initial_cfg is None and kind in ZETA_VOLTAGES_MV:
        initial_cfg = kind
    if initial_cfg is None:
        raise ConfigError("volt-opt needs volt_opt.initial for this config kind")
    initial = resolve_voltages(cfg, initial_cfg, "volt_opt.initial")
    budget = int(sec.get("budget", 400))
    device = build_device(cfg)
    num = _numerics(cfg, args.dt)
    try:
        basis = build_basis(device, initial,
                            points_per_well=num["points_per_well"],
                            extent_harmonic_lengths=num["extent_harmonic_lengths"])
    except ValueError as exc:
        raise ConfigError(f"basis construction failed: {exc}")
    solver = energy_solver(device, basis)
    exhausted_warning = False
    if budget == 0:
        loss, breakdown = loss_value(loss_spec, initial, solver)
        trace = OptimizationTrace(
            iterates=[(initial, loss)],
            best=initial.copy(),
            best_loss=loss,
            breakdown=breakdown,
            evaluations=1,
            exhausted=True,
        )
        exhausted_warning = True
    else:
        trace = optimize_voltages(initial, loss_spec, budget, solver)
        exhausted_warning = trace.exhausted
    voltages_path = out / "voltages.csv"
    trace_path = out / "trace.json"
    write_voltages_csv(voltages_path, trace.best)
    manifest = _manifest(args, cfg, "volt-opt")
    write_trace_json(
        trace_path,
        trace,
        extra={"config": kind, "config_hash": manifest.config_hash},
    )
    manifest.add_output(voltages_path)
    manifest.add_output(trace_path)
    manifest.solver_stats = {
        "evaluations": trace.evaluations,
        "best_loss": trace.best_loss,
        "exhausted": trace.exhausted,
    }
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    print(f"config {kind}: best loss {trace.best_loss:.6g} "
          f"after {trace.evaluations} evaluations")
    if exhausted_warning:
        print("warning: evaluation budget exhausted before convergence",
              file=sys.stderr)
    return 0


def _read_gate_json(path) -> tuple:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read gate file {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    try:
        entries = payload["gate"]["entries_re_im"]
        matrix = np.array(
            [[complex(re, im) for re, im in row] for row in entries]
        )
        return GateMatrix(matrix), payload
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: gate.entries_re_im malformed ({exc})")


def cmd_analyze(args, cfg) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    if args.gate is None:
        raise ConfigError("analyze needs --gate <gate.json>")
    gate, _ = _read_gate_json(args.gate)
    try:
        report = elementwise_report(gate, args.target)
    except ValueError as exc:
        raise ConfigError(f"analyze: {exc}")
    ideal = np.abs(target_gate(args.target).entries) ** 2
    labels = ("00", "01", "10", "11")
    path = out / "elementwise.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("row,col,amplitude,ideal_amplitude,amplitude_deviation,"
                 "phase_deviation_rad\n")
        for i in range(4):
            for j in range(4):
                fields = (report.amplitude[i, j], ideal[i, j],
                          report.amplitude_deviation[i, j],
                          report.phase_deviation[i, j])
                values = ",".join(repr(float(v)) for v in fields)
                fh.write(f"{labels[i]},{labels[j]},{values}\n")
    manifest = _manifest(args, cfg, "analyze")
    manifest.inputs[Path(args.gate).name] = _file_digest(args.gate)
    manifest.add_output(path)
    overlap_stats = {}
    for overlap_file in args.overlaps or []:
        rows = _validate_overlaps(overlap_file)
        manifest.inputs[Path(overlap_file).name] = _file_digest(overlap_file)
        overlap_stats[Path(overlap_file).name] = rows
    manifest.solver_stats = {
        "max_amplitude_deviation": float(np.max(np.abs(report.amplitude_deviation))),
        "max_phase_deviation_rad": float(np.max(np.abs(report.phase_deviation))),
        "overlap_rows": overlap_stats,
    }
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    print(
        f"max |amplitude deviation| {manifest.solver_stats['max_amplitude_deviation']:.3g}, "
        f"max |phase deviation| {manifest.solver_stats['max_phase_deviation_rad']:.3g} rad"
    )
    return 0


def _validate_overlaps(path) -> int:
    """Check an overlap CSV: header shape, probability budget, indicator start."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read overlaps {path}: {exc}")
    if not lines or not lines[0].startswith("t,"):
        raise ConfigError(f"{path}:1: expected overlap header starting with 't,'")
    width = len(lines[0].split(","))
    rows = 0
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != width:
            raise ConfigError(f"{path}:{n}: expected {width} columns")
        try:
            values = [float(v) for v in parts]
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: {exc}")
        total = sum(values[1:])
        if total > 1.0 + 1e-6:
            raise ConfigError(f"{path}:{n}: overlaps sum to {total} > 1")
        if rows == 0 and values[0] == 0.0:
            if abs(max(values[1:]) - 1.0) > 1e-6:
                raise ConfigError(f"{path}:{n}: t=0 row is not an indicator row")
        rows += 1
    return rows


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="heligate",
        description="Electrode-gated two-electron qubit gate simulations.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, needs_config=True, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", required=needs_config,
                       help="TOML run config" + ("" if needs_config else " (optional)"))
        p.add_argument("--out", default=None,
                       help="output directory (fallback: $HELIGATE_OUT, then CWD)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="parallel row workers for sweeps")
        p.add_argument("--dt", type=float, default=None,
                       help="override numerics.dt_ns")
        p.add_argument("--seed", type=int, default=None,
                       help="recorded in the manifest; packaged workflows are "
                            "deterministic and ignore it")
        p.set_defaults(func=func)
        return p

    p = add("spectrum", cmd_spectrum, help="eigenenergies and residual coupling vs pulse amplitude")
    p.add_argument("--lambdas", default=None,
                   help="comma list or start:stop:step (overrides config)")

    add("propagate", cmd_propagate, help="run one pulse; write gate matrix and overlap series")
    add("gate-search", cmd_gate_search, help="grid search over ramp and hold times")

    p = add("sensitivity", cmd_sensitivity, help="dense fidelity map around an optimum")
    p.add_argument("--center", default=None, help="t_ramp_ns,t_hold_ns (overrides config)")

    p = add("volt-opt", cmd_volt_opt, help="optimize electrode voltages for a loss configuration")
    p.add_argument("--kind", default=None, choices=("zeta", "I", "II", "III"),
                   help="loss configuration (overrides config)")

    p = add("analyze", cmd_analyze, needs_config=False,
            help="element-wise gate report and overlap validation")
    p.add_argument("--gate", default=None, help="gate JSON from `propagate`")
    p.add_argument("--target", default="cz", choices=("sqrt_iswap", "cz"),
                   help="ideal gate for the element-wise comparison")
    p.add_argument("--overlaps", nargs="*", default=None,
                   help="overlap CSVs to validate and digest")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config) if args.config else {}
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PropagationError, DavidsonError, LabelingError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
