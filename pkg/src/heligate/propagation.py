"""Norm-preserving time evolution under the ramped control voltages.

Each step applies the Cayley form of Crank-Nicolson,
(1 + i dt/2 H) psi' = (1 - i dt/2 H) psi, with H evaluated at the step
midpoint lambda(t + dt/2).  The linear system is solved matrix-free by a
batched GMRES iteration, preconditioned by the inverse Cayley factor of
a separable (left + right) approximation to H and warm-started from the
explicit half of the step.  A constant reference energy is subtracted
while stepping to keep the phase advanced per step small; the discarded
global phase is restored exactly on every state that leaves the engine.
The restoration is exact, but the Cayley factor is not shift-invariant,
so the small discretization error does depend on the reference; runs
meant to agree to solver precision (a resumed hold against a cold start)
must therefore share one reference energy, which trajectories record.

Time arguments are in nanoseconds; the unit system on the device converts
to the dimensionless energy/time units of the Hamiltonian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dvr import OperatorCache, TwoBodyState
from .electrostatics import lambda_at, voltage_at


class PropagationError(RuntimeError):
    """Step failure; carries solver residuals and any partial trajectory."""

    def __init__(self, message, residuals=None, partial=None):
        super().__init__(message)
        self.residuals = None if residuals is None else np.asarray(residuals)
        self.partial = partial


@dataclass
class PropagationPlan:
    """Everything needed to evolve states over one gate pulse.

    ``snapshot_times_ns`` must lie on the step grid inside [0, t_gate].
    ``overlap_states`` (optional) is an orthonormal reference basis; the
    squared overlaps of the evolving state against it are recorded every
    ``overlap_stride`` steps.  ``reference_energy`` (dimensionless) is the
    constant subtracted during stepping; by default the mean energy of
    the initial states is used.
    """

    schedule: object
    voltage_fn: object
    device: object
    dt_ns: float = 0.001
    snapshot_times_ns: tuple = ()
    reference_energy: float = None
    overlap_states: list = None
    overlap_stride: int = 0
    solver_tol: float = 1e-12
    solver_maxiter: int = 60

    def __post_init__(self):
        if self.dt_ns <= 0:
            raise ValueError("dt must be positive")
        if self.solver_tol <= 0 or self.solver_maxiter < 1:
            raise ValueError("solver settings must be positive")
        t_gate = self.schedule.t_gate_ns
        for t in (t_gate, *self.snapshot_times_ns):
            steps = t / self.dt_ns
            if abs(steps - round(steps)) > 1e-6:
                raise ValueError(
                    f"time {t} ns does not fall on the dt={self.dt_ns} ns step grid"
                )
        for t in self.snapshot_times_ns:
            if t < 0 or t > t_gate + 1e-12:
                raise ValueError("snapshot times must lie within [0, t_gate]")
        if self.overlap_stride < 0:
            raise ValueError("overlap_stride must be nonnegative")
        if self.overlap_stride and self.overlap_states is None:
            raise ValueError("overlap recording requires overlap_states")

    @property
    def t_gate_ns(self) -> float:
        return self.schedule.t_gate_ns

    def lambda_of(self, t_ns: float) -> float:
        return lambda_at(self.schedule, t_ns, self.voltage_fn.lambda_max)


@dataclass
class Trajectory:
    """Result of evolving one state over [start_time_ns, end_time_ns].

    ``reference_energy`` is the shift the steps actually used; pass it to
    ``resume_from`` so a continued run steps with the same discretization.
    """

    final: TwoBodyState
    snapshots: list
    norm_drift: float
    start_time_ns: float = 0.0
    end_time_ns: float = 0.0
    reference_energy: float = 0.0
    overlap_times_ns: np.ndarray = None
    overlaps: np.ndarray = None

    def __post_init__(self):
        if self.overlaps is not None:
            sums = self.overlaps.sum(axis=1)
            if np.any(sums > 1.0 + 1e-8):
                raise ValueError("overlap rows exceed unit total probability")


class _SeparablePreconditioner:
    """Approximate inverse Cayley factor built from a split Hamiltonian.

    The interaction diagonal is absorbed in mean-field form, u(a, b) ~
    u_row(a) + u_col(b) - mean(u); the remaining diagonal residual is
    handled by sandwiching the separable inverse between two half-step
    diagonal factors, which cancels the leading error of the mean-field
    split and keeps the Krylov iteration at a handful of steps.  Rebuilt
    only when lambda has moved appreciably.
    """

    def __init__(self, cache: OperatorCache, delta: float, e_ref: float):
        u = cache.coulomb
        mean = float(u.mean())
        row = u.mean(axis=1) - 0.5 * mean
        col = u.mean(axis=0) - 0.5 * mean
        h_left = cache.kinetic_left + np.diag(cache.potential_left + row)
        h_right = cache.kinetic_right + np.diag(cache.potential_right + col)
        lam_left, self.u_left = np.linalg.eigh(h_left)
        lam_right, self.u_right = np.linalg.eigh(h_right)
        self.u_left_t = np.ascontiguousarray(self.u_left.T)
        self.u_right_t = np.ascontiguousarray(self.u_right.T)
        pair = lam_left[:, None] + lam_right[None, :] - e_ref
        self.inv_factor = (1.0 / (1.0 + 1j * delta * pair))[:, None, :]
        resid = u - row[:, None] - col[None, :]
        self.inv_half = 1.0 / (1.0 + 1j * (0.5 * delta) * resid)

    def apply(self, states: np.ndarray, out: np.ndarray = None) -> np.ndarray:
        # states shaped (batch, n_left, n_right); both mode transforms run
        # as single products over the stacked batch (hot path of the
        # Krylov iteration, so no per-slice broadcasting)
        nb, nl, nr = states.shape
        if out is None:
            out = np.empty(states.shape, dtype=complex)
        if not out.flags.c_contiguous:
            out[...] = self.apply(states)
            return out
        np.multiply(states, self.inv_half, out=out)
        modes = out.reshape(nb * nl, nr) @ self.u_right
        modes = self.u_left_t @ modes.reshape(nb, nl, nr).transpose(1, 0, 2).reshape(nl, nb * nr)
        folded = modes.reshape(nl, nb, nr)
        folded *= self.inv_factor
        back = self.u_left @ modes
        back = back.reshape(nl, nb, nr).transpose(1, 0, 2).reshape(nb * nl, nr)
        np.matmul(back, self.u_right_t, out=out.reshape(nb * nl, nr))
        out *= self.inv_half
        return out


def _givens(h1, h2):
    denom = np.sqrt(np.abs(h1) ** 2 + np.abs(h2) ** 2)
    safe = np.where(denom == 0.0, 1.0, denom)
    return h1 / safe, h2 / safe, denom


class CrankNicolsonEngine:
    """Batched Cayley stepping of several states in lockstep.

    ``lambda_of`` maps a midpoint time (ns) to the ramp value and
    ``voltages_of`` maps a ramp value to the electrode voltages (mV);
    passing None for either freezes the cache's present potentials, which
    is the single-step and static-well mode.  The engine owns scratch
    buffers and refreshes the supplied operator cache in place, so one
    engine (and one cache) must not be shared between concurrent
    propagations.  ``evolve`` integrates forward when t_to > t_from and
    backward (the adjoint propagator) when t_to < t_from.

    Over runs of steps whose ramp value is bitwise constant (holds and
    saturated ramp tails) the Hamiltonian does not change, so the engine
    applies the same Cayley step through its spectral decomposition,
    jumping whole segments at once instead of solving per-step linear
    systems; segments shorter than ``eigen_min_steps`` fall back to the
    Krylov path.  ``eigen_table`` (a dict) may be shared between engines
    that use the same device, basis, and voltage path so the dense
    eigendecomposition per ramp value is done once; entries are keyed by
    ramp value alone, so never share a table across different voltage
    interpolations.
    """

    rebuild_dlambda = 0.05
    eigen_min_steps = 128

    def __init__(self, cache: OperatorCache, dt_ns: float, e_ref: float = 0.0, *,
                 lambda_of=None, voltages_of=None, tol: float = 1e-12,
                 maxiter: int = 60, eigen_table: dict = None):
        if dt_ns <= 0:
            raise ValueError("dt must be positive")
        self.cache = cache
        self.dt_ns = dt_ns
        self.e_ref = float(e_ref)
        self.lambda_of = lambda_of
        self.voltages_of = voltages_of
        self.time_unit_ns = cache.device.units.time_of_unit_ns
        self.tol = tol
        self.maxiter = maxiter
        self._precond = None
        self._precond_lambda = None
        self._precond_delta = None
        self._cache_lambda = None
        self._scratch = {}
        self._krylov = None
        self._corr = None
        self._eigen_table = {} if eigen_table is None else eigen_table

    # -- linear algebra --------------------------------------------------

    def _buf(self, name, shape):
        buf = self._scratch.get(name)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape, dtype=complex)
            self._scratch[name] = buf
        return buf

    def _workspace(self, nb, n):
        ws = self._krylov
        if ws is None or ws["basis"].shape[1:] != (nb, n):
            m = self.maxiter
            ws = {
                "basis": np.empty((m + 1, nb, n), dtype=complex),
                "basisc": np.empty((m + 1, nb, n), dtype=complex),
                "hess": np.empty((nb, m + 1, m), dtype=complex),
                "giv_c": np.empty((nb, m), dtype=complex),
                "giv_s": np.empty((nb, m), dtype=complex),
                "g": np.empty((nb, m + 1), dtype=complex),
                "y": np.empty((nb, m), dtype=complex),
            }
            self._krylov = ws
        return ws

    def _cayley_pair(self, states, scale, out=None):
        # (1 + scale (H - e_ref)) psi built as scale H psi
        # + (1 - scale e_ref) psi; out must not alias states
        h = self.cache.apply(states, out=out)
        h *= scale
        shifted = np.multiply(
            states, 1.0 - scale * self.e_ref, out=self._buf("shift", states.shape)
        )
        h += shifted
        return h

    def _apply_cayley(self, states, delta, out=None):
        """(1 + i delta (H - e_ref)) acting on (batch, nL, nR) states."""
        return self._cayley_pair(states, 1j * delta, out)

    def _rhs(self, states, delta, out=None):
        return self._cayley_pair(states, -1j * delta, out)

    def _ensure_preconditioner(self, lam, delta):
        stale = (
            self._precond is None
            or self._precond_delta != delta
            or abs(lam - self._precond_lambda) > self.rebuild_dlambda
        )
        if stale:
            self._precond = _SeparablePreconditioner(self.cache, delta, self.e_ref)
            self._precond_lambda = lam
            self._precond_delta = delta

    def _solve(self, rhs, x0, delta):
        """Batched right-preconditioned GMRES for the Cayley system."""
        nb = rhs.shape[0]
        n = rhs.shape[1] * rhs.shape[2]
        target = self.tol * np.linalg.norm(rhs.reshape(nb, -1), axis=1)
        residual = self._apply_cayley(x0, delta, out=self._buf("resid", rhs.shape))
        np.subtract(rhs, residual, out=residual)
        beta = np.linalg.norm(residual.reshape(nb, -1), axis=1)
        if np.all(beta <= target):
            return x0
        m = self.maxiter
        ws = self._workspace(nb, n)
        basis, basisc, hess = ws["basis"], ws["basisc"], ws["hess"]
        giv_c, giv_s, g, y = ws["giv_c"], ws["giv_s"], ws["g"], ws["y"]
        beta_safe = np.where(beta == 0.0, 1.0, beta)
        np.divide(residual.reshape(nb, -1), beta_safe[:, None], out=basis[0])
        np.conjugate(basis[0], out=basisc[0])
        g[:, 0] = beta
        used = 0
        ptmp = self._buf("precond", rhs.shape)
        for j in range(m):
            used = j + 1
            self._precond.apply(basis[j].reshape(rhs.shape), out=ptmp)
            wf = self._apply_cayley(
                ptmp, delta, out=basis[j + 1].reshape(rhs.shape)
            ).reshape(nb, n)
            w_norm = np.linalg.norm(wf, axis=1)
            proj = np.einsum("ibn,bn->bi", basisc[: j + 1], wf)
            wf -= np.einsum("bi,ibn->bn", proj, basis[: j + 1])
            hess[:, : j + 1, j] = proj
            h_next = np.linalg.norm(wf, axis=1)
            if np.any(h_next < 0.7071 * w_norm):
                # heavy cancellation: run Gram-Schmidt once more
                proj = np.einsum("ibn,bn->bi", basisc[: j + 1], wf)
                wf -= np.einsum("bi,ibn->bn", proj, basis[: j + 1])
                hess[:, : j + 1, j] += proj
                h_next = np.linalg.norm(wf, axis=1)
            hess[:, j + 1, j] = h_next
            wf /= np.where(h_next == 0.0, 1.0, h_next)[:, None]
            np.conjugate(basis[j + 1], out=basisc[j + 1])
            for i in range(j):  # accumulated rotations on the new column
                hi = hess[:, i, j].copy()
                hj = hess[:, i + 1, j].copy()
                hess[:, i, j] = np.conj(giv_c[:, i]) * hi + np.conj(giv_s[:, i]) * hj
                hess[:, i + 1, j] = -giv_s[:, i] * hi + giv_c[:, i] * hj
            c, s, rho = _givens(hess[:, j, j], hess[:, j + 1, j])
            giv_c[:, j], giv_s[:, j] = c, s
            hess[:, j, j] = rho
            hess[:, j + 1, j] = 0.0
            g[:, j + 1] = -s * g[:, j]
            g[:, j] = np.conj(c) * g[:, j]
            if np.all(np.abs(g[:, j + 1]) <= target):
                break
        else:
            raise PropagationError(
                f"linear solve stalled at residual {np.abs(g[:, used])} "
                f"(target {target}) after {self.maxiter} iterations",
                residuals=np.abs(g[:, used]),
            )
        for i in range(used - 1, -1, -1):
            acc = g[:, i] - np.einsum("bk,bk->b", hess[:, i, i + 1 : used], y[:, i + 1 : used])
            y[:, i] = acc / hess[:, i, i]
        combo = np.einsum("bi,ibn->bn", y[:, :used], basis[:used])
        return x0 + self._precond.apply(combo.reshape(rhs.shape), out=ptmp)

    # -- time stepping ---------------------------------------------------

    def _refresh(self, t_mid_ns, delta):
        if self.lambda_of is None:
            self._ensure_preconditioner(0.0, delta)
            return
        lam = self.lambda_of(t_mid_ns)
        if self.voltages_of is not None and lam != self._cache_lambda:
            self.cache.refresh(self.voltages_of(lam))
            self._cache_lambda = lam
        self._ensure_preconditioner(lam, delta)

    def _eigen_factors(self, lam, delta):
        """Spectral form of the Cayley step for the cache's current H."""
        hit = self._eigen_table.get(lam)
        if hit is None:
            n_left, n_right = self.cache.basis.shape
            h = np.kron(self.cache.kinetic_left, np.eye(n_right))
            h += np.kron(np.eye(n_left), self.cache.kinetic_right)
            h[np.diag_indices_from(h)] += self.cache.diagonal_two_body.ravel()
            theta, w = np.linalg.eigh(h)
            hit = (theta, w, np.ascontiguousarray(w.T))
            self._eigen_table[lam] = hit
        theta, w, wt = hit
        # (1 - i d k)/(1 + i d k) = exp(-2i arctan(d k)), exactly unit modulus
        phi = -2.0 * np.arctan(delta * (theta - self.e_ref))
        return w, wt, phi

    def step(self, states, t_ns, *, backward=False):
        """One Cayley step of a (batch, nL, nR) stack starting at t_ns."""
        sign = -1.0 if backward else 1.0
        delta = sign * 0.5 * self.dt_ns / self.time_unit_ns
        self._refresh(t_ns + 0.5 * sign * self.dt_ns, delta)
        rhs = self._rhs(states, delta, out=self._buf("rhs", states.shape))
        guess = 2.0 * rhs - states
        corr = self._corr
        if corr is not None and corr[0] == delta and corr[1].shape == guess.shape:
            # carrying over the previous step's solver correction starts
            # the iteration closer during smooth ramps
            x0 = guess + corr[1]
        else:
            x0 = guess
        sol = self._solve(rhs, x0, delta)
        self._corr = (delta, sol - guess)
        return sol

    def evolve(self, states, t_from_ns, t_to_ns, *, snapshot_times_ns=(),
               overlap_rows=None, overlap_stride=0):
        """Integrate a (batch, nL, nR) stack from t_from to t_to.

        Returns (final_states, snapshots, overlap_times, overlap_series,
        norm_drift); snapshots and finals carry the restored global phase
        exp(-i e_ref (t - t_from)).  overlap_series has shape
        (n_records, batch, n_reference).
        """
        span = t_to_ns - t_from_ns
        n_steps = int(round(abs(span) / self.dt_ns))
        if abs(abs(span) - n_steps * self.dt_ns) > 1e-6 * self.dt_ns * max(1, n_steps):
            raise ValueError("segment length is not a whole number of steps")
        sign = 1.0 if span >= 0 else -1.0
        psi = np.array(states, dtype=complex)
        norms_in = np.linalg.norm(psi.reshape(psi.shape[0], -1), axis=1)

        snap_steps = {}
        for t in snapshot_times_ns:
            k = round((t - t_from_ns) / (sign * self.dt_ns))
            on_grid = abs((t - t_from_ns) - k * sign * self.dt_ns) <= 1e-6 * self.dt_ns
            if not on_grid or not 0 <= k <= n_steps:
                raise ValueError(f"snapshot time {t} ns not on this segment's step grid")
            snap_steps.setdefault(int(k), t)

        snapshots = []
        overlap_times = []
        overlap_series = []

        def restore_phase(block, step):
            t_rel = step * sign * self.dt_ns / self.time_unit_ns
            return block * np.exp(-1j * self.e_ref * t_rel)

        def record(step, block):
            if step in snap_steps:
                snapshots.append((snap_steps[step], restore_phase(block, step)))
            if overlap_rows is not None and overlap_stride and (
                step % overlap_stride == 0 or step == n_steps
            ):
                amps = np.einsum(
                    "kn,bn->bk", overlap_rows.conj(), block.reshape(block.shape[0], -1)
                )
                overlap_times.append(t_from_ns + step * sign * self.dt_ns)
                overlap_series.append(np.abs(amps) ** 2)

        lams = None
        if self.lambda_of is not None:
            lams = [
                self.lambda_of(t_from_ns + (j + 0.5) * sign * self.dt_ns)
                for j in range(n_steps)
            ]

        record(0, psi)
        k = 0
        while k < n_steps:
            if lams is None:
                run_end = n_steps
            else:
                run_end = k + 1
                while run_end < n_steps and lams[run_end] == lams[k]:
                    run_end += 1
            if run_end - k >= self.eigen_min_steps:
                # constant-H segment: apply the Cayley step spectrally,
                # jumping straight between recording points
                delta = sign * 0.5 * self.dt_ns / self.time_unit_ns
                self._refresh(t_from_ns + (k + 0.5) * sign * self.dt_ns, delta)
                lam_key = None if lams is None else lams[k]
                w, wt, phi = self._eigen_factors(lam_key, delta)
                stops = {run_end}
                stops.update(s for s in snap_steps if k < s <= run_end)
                if overlap_rows is not None and overlap_stride:
                    first = (k // overlap_stride + 1) * overlap_stride
                    stops.update(range(first, run_end + 1, overlap_stride))
                flat = psi.reshape(psi.shape[0], -1)
                for s in sorted(stops):
                    phase = np.exp((1j * (s - k)) * phi)
                    modes = (flat.real @ w) + 1j * (flat.imag @ w)
                    modes *= phase
                    flat = (modes.real @ wt) + 1j * (modes.imag @ wt)
                    psi = flat.reshape(psi.shape)
                    record(s, psi)
                    k = s
                self._corr = None
            else:
                for j in range(k, run_end):
                    t_now = t_from_ns + j * sign * self.dt_ns
                    try:
                        psi = self.step(psi, t_now, backward=sign < 0)
                    except PropagationError as err:
                        err.partial = (t_now, restore_phase(psi, j))
                        raise
                    record(j + 1, psi)
                k = run_end

        norms_out = np.linalg.norm(psi.reshape(psi.shape[0], -1), axis=1)
        drift = np.abs(norms_out - norms_in)
        final = restore_phase(psi, n_steps)
        overlap_times = np.asarray(overlap_times)
        overlap_series = np.asarray(overlap_series) if overlap_series else None
        return final, snapshots, overlap_times, overlap_series, drift


def _mean_energy(cache, stack):
    h = cache.apply(stack)
    num = np.einsum("bij,bij->b", stack.conj(), h).real
    den = np.einsum("bij,bij->b", stack.conj(), stack).real
    return float(np.mean(num / den))


def _overlap_rows(plan):
    if plan.overlap_states is None:
        return None
    return np.array([s.coeffs.ravel() for s in plan.overlap_states])


def _prepare(plan, initials, t_start_ns, e_ref=None, eigen_table=None):
    basis = initials[0].basis
    for s in initials:
        if s.basis != basis:
            raise ValueError("all initial states must share one basis")
        if abs(s.norm() - 1.0) > 1e-8:
            raise ValueError("initial states must be normalized")
    cache = OperatorCache(plan.device, basis)
    stack = np.array([s.coeffs for s in initials], dtype=complex)
    cache.refresh(voltage_at(plan.voltage_fn, plan.lambda_of(t_start_ns)))
    if e_ref is None:
        e_ref = plan.reference_energy
    if e_ref is None:
        e_ref = _mean_energy(cache, stack)
    engine = CrankNicolsonEngine(
        cache,
        plan.dt_ns,
        e_ref,
        lambda_of=plan.lambda_of,
        voltages_of=lambda lam: voltage_at(plan.voltage_fn, lam),
        tol=plan.solver_tol,
        maxiter=plan.solver_maxiter,
        eigen_table=eigen_table,
    )
    return stack, engine


def _package(basis, result, index, t_start_ns, t_end_ns, e_ref):
    final, snapshots, times, series, drift = result
    per_state = [(t, TwoBodyState(block[index].copy(), basis)) for t, block in snapshots]
    overlaps = None if series is None else series[:, index, :]
    return Trajectory(
        final=TwoBodyState(final[index].copy(), basis),
        snapshots=per_state,
        norm_drift=float(drift[index]),
        start_time_ns=t_start_ns,
        end_time_ns=t_end_ns,
        reference_energy=e_ref,
        overlap_times_ns=times if len(times) else None,
        overlaps=overlaps,
    )


def propagate_states(plan: PropagationPlan, initials, *, eigen_table: dict = None) -> list:
    """Evolve several states in lockstep over the full pulse [0, t_gate]."""
    initials = list(initials)
    stack, engine = _prepare(plan, initials, 0.0, eigen_table=eigen_table)
    result = engine.evolve(
        stack,
        0.0,
        plan.t_gate_ns,
        snapshot_times_ns=plan.snapshot_times_ns,
        overlap_rows=_overlap_rows(plan),
        overlap_stride=plan.overlap_stride,
    )
    basis = initials[0].basis
    return [
        _package(basis, result, i, 0.0, plan.t_gate_ns, engine.e_ref)
        for i in range(len(initials))
    ]


def propagate(plan: PropagationPlan, initial: TwoBodyState) -> Trajectory:
    """Evolve one state over the full pulse [0, t_gate]."""
    return propagate_states(plan, [initial])[0]


def crank_nicolson_step(cache: OperatorCache, state: TwoBodyState, t_ns: float,
                        dt_ns: float, *, tol: float = 1e-12,
                        maxiter: int = 60) -> TwoBodyState:
    """One Cayley step with whatever potentials the cache currently holds.

    The caller is responsible for refreshing the cache at the midpoint
    time t + dt/2 before calling; ``t_ns`` only documents where the step
    sits in the caller's schedule.  Negative ``dt_ns`` takes the adjoint
    (time-reversed) step.
    """
    if state.basis != cache.basis:
        raise ValueError("state basis does not match operator cache basis")
    del t_ns  # potentials are frozen in the cache; see docstring
    engine = CrankNicolsonEngine(cache, abs(dt_ns), tol=tol, maxiter=maxiter)
    out = engine.step(state.coeffs[None, :, :], 0.0, backward=dt_ns < 0)
    return TwoBodyState(out[0], state.basis)


def resume_from(snapshot, plan: PropagationPlan, donor_hold_ns: float = None,
                reference_energy: float = None, *,
                eigen_table: dict = None) -> Trajectory:
    """Continue a trajectory from a like pulse's snapshot to plan's t_gate.

    Valid when the donor run shares this plan's ramp time and voltage
    path and differs only in hold length: their control histories are
    then identical to machine precision from t = 0 until just past the
    shorter hold (the opening stage does not depend on the hold, and the
    shutdown erf is still saturated flat there), so any snapshot with
    t_snap <= min(t_hold, donor_hold_ns) seeds the longer pulse exactly.
    Snapshots taken mid-ramp work just as well as plateau ones; only the
    shared ramp shape matters.  Pass the donor trajectory's
    ``reference_energy`` to step with the donor's discretization; without
    it the continuation agrees with a cold start only to the (small)
    shift-dependent part of the dt^2 stepping error.
    """
    return resume_states_from(
        [snapshot], plan, donor_hold_ns, reference_energy, eigen_table=eigen_table
    )[0]


def resume_states_from(snapshots, plan: PropagationPlan,
                       donor_hold_ns: float = None,
                       reference_energy: float = None, *,
                       eigen_table: dict = None) -> list:
    """Continue several same-time snapshots in lockstep to plan's t_gate.

    The batched sibling of ``resume_from`` (see there for the window
    rules): all snapshots must be taken at the same time, and the whole
    set shares every per-step solve.  Returns one Trajectory per
    snapshot, in order.
    """
    snaps = list(snapshots)
    if not snaps:
        raise ValueError("no snapshots to resume")
    times = sorted({float(t) for t, _ in snaps})
    if len(times) != 1:
        raise ValueError(f"snapshots must share one time, got {times}")
    t_snap = times[0]
    t_hold = plan.schedule.t_hold_ns
    if t_snap < -1e-12:
        raise ValueError(f"snapshot time {t_snap} ns is negative")
    if t_snap > t_hold + 1e-12:
        raise ValueError(
            f"snapshot at {t_snap} ns is too close to this plan's shutdown ramp "
            f"(latest reusable time is t_hold={t_hold} ns)"
        )
    if donor_hold_ns is not None and t_snap > donor_hold_ns + 1e-12:
        raise ValueError(
            f"snapshot at {t_snap} ns postdates the donor's reusable window "
            f"(donor hold {donor_hold_ns} ns)"
        )
    states = [state for _, state in snaps]
    stack, engine = _prepare(
        plan, states, t_snap, e_ref=reference_energy, eigen_table=eigen_table
    )
    keep = tuple(t for t in plan.snapshot_times_ns if t >= t_snap - 1e-12)
    result = engine.evolve(
        stack,
        t_snap,
        plan.t_gate_ns,
        snapshot_times_ns=keep,
        overlap_rows=_overlap_rows(plan),
        overlap_stride=plan.overlap_stride,
    )
    basis = states[0].basis
    return [
        _package(basis, result, i, t_snap, plan.t_gate_ns, engine.e_ref)
        for i in range(len(states))
    ]


def evolve_window(plan: PropagationPlan, states, t_from_ns: float,
                  t_to_ns: float, reference_energy: float = None, *,
                  eigen_table: dict = None) -> list:
    """Evolve states over one window of plan's pulse, backward if t_to < t_from.

    Uses the same stepping a full-pulse run would apply over that window,
    so a backward window applies the exact adjoint of the matching
    forward window: the step midpoints coincide and each Cayley factor is
    the forward one's inverse.  Finals carry the restored phase
    exp(-i e_ref (t_to - t_from)); pass ``reference_energy`` to share a
    discretization with another run.  Returns bare states, in order.
    """
    states = list(states)
    stack, engine = _prepare(
        plan, states, t_from_ns, e_ref=reference_energy, eigen_table=eigen_table
    )
    final, _, _, _, _ = engine.evolve(stack, t_from_ns, t_to_ns)
    basis = states[0].basis
    return [TwoBodyState(final[i].copy(), basis) for i in range(len(states))]


def write_trajectory_csv(path, times_ns, overlaps):
    """CSV export `t,|<Psi_i|Phi_0>|^2,...` for one propagated state."""
    overlaps = np.asarray(overlaps)
    header = "t," + ",".join(f"|<Psi_i|Phi_{k}>|^2" for k in range(overlaps.shape[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for t, row in zip(times_ns, overlaps):
            vals = ",".join(f"{v:.12g}" for v in row)
            fh.write(f"{t:.12g},{vals}\n")
