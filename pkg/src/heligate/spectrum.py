"""Lowest eigenpairs, state labels, and the ZZ interaction measure.

The six lowest two-electron levels are found with a block Davidson
iteration built directly on the matrix-free Hamiltonian application; a
full dense diagonalization is only ever used in tests as an oracle.
Levels are identified with per-well excitation labels by node counting
on the dominant natural orbital of each reduced one-body density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dvr import OperatorCache, TwoBodyState

EXPECTED_ORDER = ("00", "01", "10", "02", "11", "20")
QUBIT_LABELS = ("00", "01", "10", "11")


class DavidsonError(RuntimeError):
    """Eigensolver failure; carries the last residual norms."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = None if residuals is None else np.asarray(residuals)


class LabelingError(RuntimeError):
    """State labeling failure; carries the attempted assignment."""

    def __init__(self, message, assignment=None):
        super().__init__(message)
        self.assignment = assignment


@dataclass
class EigenSolution:
    """Ascending eigenpairs of a Hermitian operator.

    ``states`` holds TwoBodyState objects when the solve was performed
    over a two-body basis, otherwise raw coefficient vectors.
    """

    energies: np.ndarray
    states: list
    residuals: np.ndarray
    iterations: int = 0

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        self.residuals = np.asarray(self.residuals, dtype=float)
        if np.any(np.diff(self.energies) < -1e-12):
            raise ValueError("energies must be ascending")
        if len(self.states) != self.energies.size:
            raise ValueError("one state per energy required")


@dataclass(frozen=True)
class QubitLabels:
    """Bijection between excitation labels and eigenstate indices.

    Any permutation of the six labels is a valid map; whether the spectrum
    follows the conventional ladder (00, 01, 10, 02, 11, 20) is reported by
    ``matches_expected_order``, not enforced.  Well asymmetry can push the
    doubly excited pair below 11, in which case 11 sits at index 5.

    ``ambiguous`` lists labels whose assignment needed the near-degeneracy
    tie-break rather than plain node counting.
    """

    indices: dict
    ambiguous: tuple = ()

    def __post_init__(self):
        if set(self.indices) != set(EXPECTED_ORDER):
            raise ValueError(f"labels must be exactly {EXPECTED_ORDER}")
        if sorted(self.indices.values()) != list(range(6)):
            raise ValueError("label map must be a bijection onto 0..5")

    @property
    def qubit_indices(self) -> tuple:
        """Eigenstate indices of (00, 01, 10, 11)."""
        return tuple(self.indices[lab] for lab in QUBIT_LABELS)

    @property
    def matches_expected_order(self) -> bool:
        return all(self.indices[lab] == i for i, lab in enumerate(EXPECTED_ORDER))


def davidson_lowest(apply, dim_hint, k, tol, *, diagonal=None, initial=None,
                    basis=None, max_iter=200, max_subspace=None):
    """Lowest ``k`` eigenpairs of a real symmetric operator.

    Parameters
    ----------
    apply : callable
        Maps a stack of row vectors (m, dim_hint) to the operator applied
        to each row.  Must be linear and symmetric.
    dim_hint : int
        Dimension of the vector space.
    k : int
        Number of eigenpairs requested.
    tol : float
        Convergence threshold on the 2-norm of each residual H psi - E psi.
    diagonal : array, optional
        Operator diagonal used for preconditioning; without it a plain
        residual correction is used (slower but still converges).
    initial : array (m0, dim_hint), optional
        Rows spanning the starting subspace.  Defaults to unit vectors on
        the smallest diagonal entries.  The iteration is deterministic
        given this subspace.
    basis : TwoBodyBasis, optional
        When given, returned states are TwoBodyState objects on it.

    Returns
    -------
    EigenSolution
    """
    n = int(dim_hint)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError("cannot request more eigenpairs than the dimension")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    if diagonal is not None:
        diagonal = np.asarray(diagonal, dtype=float).ravel()
        if diagonal.size != n:
            raise ValueError("diagonal length must equal dim_hint")

    if max_subspace is None:
        max_subspace = min(n, max(6 * k, 36))
    max_subspace = max(max_subspace, 2 * k + 2)
    if max_subspace > n:
        max_subspace = n

    # starting block: supplied rows, else unit vectors on the smallest
    # diagonal entries (plain unit vectors if no diagonal either)
    if initial is not None:
        block = np.array(np.atleast_2d(np.asarray(initial, dtype=float)))
    else:
        m0 = min(n, k + 2)
        if diagonal is not None:
            cols = np.argsort(diagonal, kind="stable")[:m0]
        else:
            cols = np.arange(m0)
        block = np.zeros((m0, n))
        block[np.arange(m0), cols] = 1.0

    V = np.zeros((max_subspace, n))
    W = np.zeros((max_subspace, n))
    m = 0

    def append_rows(rows):
        nonlocal m
        added = 0
        for row in rows:
            t = row.astype(float, copy=True)
            scale = np.linalg.norm(t)
            if scale == 0.0:
                continue
            for _ in range(2):  # double Gram-Schmidt keeps orthogonality at 1e-14
                if m + added:
                    t -= (V[: m + added] @ t) @ V[: m + added]
            nrm = np.linalg.norm(t)
            if nrm < 1e-8 * scale or nrm == 0.0 or m + added >= max_subspace:
                continue
            V[m + added] = t / nrm
            added += 1
        if added:
            W[m : m + added] = apply(V[m : m + added].copy())
            m += added
        return added

    if append_rows(block) == 0:
        raise DavidsonError("initial subspace is degenerate")

    theta = np.zeros(k)
    res_norms = np.full(k, np.inf)
    for iteration in range(1, max_iter + 1):
        while m < k:  # pad a too-small starting subspace
            pad = np.zeros((k - m, n))
            pad[np.arange(k - m), np.arange(k - m) % n] = 1.0
            if append_rows(pad) == 0:
                raise DavidsonError("subspace collapse while padding", res_norms)
        S = V[:m] @ W[:m].T
        S = 0.5 * (S + S.T)
        theta_all, Y = np.linalg.eigh(S)
        theta = theta_all[:k]
        ritz = Y[:, :k].T @ V[:m]
        ritz_w = Y[:, :k].T @ W[:m]
        residual = ritz_w - theta[:, None] * ritz
        res_norms = np.linalg.norm(residual, axis=1)
        if np.all(res_norms < tol):
            states = _package_states(ritz, basis)
            return EigenSolution(theta.copy(), states, res_norms, iterations=iteration)
        if m >= max_subspace:  # collapse to the best Ritz vectors and refill
            keep = min(2 * k + 2, m)
            V[:keep] = Y[:, :keep].T @ V[:m]
            W[:keep] = Y[:, :keep].T @ W[:m]
            m = keep
        new_rows = []
        for i in range(k):
            if res_norms[i] < tol:
                continue
            if diagonal is not None:
                denom = diagonal - theta[i]
                floor = 1e-10 * (1.0 + abs(theta[i]))
                denom = np.where(np.abs(denom) < floor, np.copysign(floor, denom), denom)
                new_rows.append(residual[i] / denom)
            else:
                new_rows.append(residual[i])
        if append_rows(np.array(new_rows)) == 0:
            raise DavidsonError(
                f"subspace collapse after {iteration} iterations; residuals {res_norms}",
                res_norms,
            )
    raise DavidsonError(
        f"no convergence within {max_iter} iterations; residuals {res_norms}", res_norms
    )


def _package_states(rows, basis):
    if basis is None:
        return [row.copy() for row in rows]
    return [TwoBodyState(row.reshape(basis.shape), basis) for row in rows]


def one_body_hamiltonians(cache: OperatorCache):
    """Dense per-well one-body Hamiltonians (kinetic + channel potential)."""
    h_left = cache.kinetic_left + np.diag(cache.potential_left)
    h_right = cache.kinetic_right + np.diag(cache.potential_right)
    return h_left, h_right


def product_guess(cache: OperatorCache, count: int) -> np.ndarray:
    """Rows spanning the lowest products of one-body eigenvectors.

    With the interaction off these are the exact eigenstates; with it on
    they remain an excellent, deterministic starting subspace.
    """
    h_left, h_right = one_body_hamiltonians(cache)
    e_left, u_left = np.linalg.eigh(h_left)
    e_right, u_right = np.linalg.eigh(h_right)
    per_side = min(cache.basis.left.count, cache.basis.right.count, count)
    pair_energy = e_left[:per_side, None] + e_right[None, :per_side]
    order = np.argsort(pair_energy.ravel(), kind="stable")[:count]
    rows = np.empty((len(order), cache.basis.left.count * cache.basis.right.count))
    for j, flat in enumerate(order):
        a, b = divmod(int(flat), per_side)
        rows[j] = np.outer(u_left[:, a], u_right[:, b]).ravel()
    return rows


def solve_spectrum(cache: OperatorCache, k: int = 6, tol: float = 1e-9,
                   max_iter: int = 200, initial=None) -> EigenSolution:
    """Davidson solve of the cached two-body Hamiltonian."""
    shape = cache.basis.shape
    n = shape[0] * shape[1]

    def apply_rows(rows):
        return cache.apply(rows.reshape((-1,) + shape)).reshape(rows.shape)

    if initial is None:
        initial = product_guess(cache, k + 4)
    elif initial and isinstance(initial[0], TwoBodyState):
        initial = np.array([np.real(s.coeffs).ravel() for s in initial])
    return davidson_lowest(
        apply_rows, n, k, tol,
        diagonal=cache.hamiltonian_diagonal().ravel(),
        initial=initial,
        basis=cache.basis,
        max_iter=max_iter,
    )


def zz_coupling(energies) -> float:
    """ZZ interaction measure E4 - E2 - E1 + E0 (any consistent units)."""
    e = np.asarray(energies, dtype=float)
    if e.size < 5:
        raise ValueError("need at least five energies")
    return float(e[4] - e[2] - e[1] + e[0])


def _count_nodes(orbital, cutoff=1e-3):
    """Sign changes of a one-body orbital, ignoring numerically dead points."""
    vec = np.asarray(orbital)
    j = int(np.argmax(np.abs(vec)))
    aligned = np.real(vec * np.exp(-1j * np.angle(vec[j]))) if np.iscomplexobj(vec) else vec
    live = aligned[np.abs(aligned) > cutoff * np.abs(aligned[j])]
    signs = np.sign(live)
    return int(np.sum(signs[1:] != signs[:-1]))


def _excitation_pair(state: TwoBodyState):
    """(left, right) excitation counts plus the dominant natural occupation."""
    c = state.coeffs
    rho_left = c @ c.conj().T
    rho_right = c.T @ c.conj()
    occ_left, orb_left = np.linalg.eigh(rho_left)
    occ_right, orb_right = np.linalg.eigh(rho_right)
    n_left = _count_nodes(orb_left[:, -1])
    n_right = _count_nodes(orb_right[:, -1])
    dominance = float(min(occ_left[-1], occ_right[-1]))
    return n_left, n_right, dominance


def label_states(sol: EigenSolution, cache: OperatorCache = None, *,
                 degeneracy_tol: float = 1e-6) -> QubitLabels:
    """Identify the six lowest states with per-well excitation labels.

    Labels come from node counting on each state's dominant natural
    orbitals.  Within clusters of near-degenerate energies (closer than
    ``degeneracy_tol``) the eigensolver may return arbitrary mixtures, so
    those labels are reassigned by overlap with interaction-free product
    references (requires ``cache``) and reported in ``ambiguous``.

    The ordering of the labels along the energy axis is a property of the
    voltage setting, not an assumption here: the returned map records where
    each label actually landed, and ``matches_expected_order`` reports
    whether the conventional ladder holds.
    """
    if len(sol.states) < 6:
        raise ValueError("labeling requires six states")
    if not isinstance(sol.states[0], TwoBodyState):
        raise ValueError("labeling requires TwoBodyState solutions")
    states = sol.states[:6]
    raw = [_excitation_pair(s) for s in states]
    labels = [f"{nl}{nr}" for nl, nr, _ in raw]

    # cluster consecutive near-degenerate levels
    clusters, current = [], [0]
    for i in range(1, 6):
        if sol.energies[i] - sol.energies[i - 1] < degeneracy_tol:
            current.append(i)
        else:
            clusters.append(current)
            current = [i]
    clusters.append(current)

    ambiguous = []
    for cluster in clusters:
        if len(cluster) == 1:
            continue
        if cache is None:
            raise LabelingError(
                f"states {cluster} are nearly degenerate; supply the operator "
                "cache so labels can be resolved against product references",
                assignment=dict(enumerate(labels)),
            )
        taken = {labels[i] for i in range(6) if i not in cluster}
        candidates = [lab for lab in EXPECTED_ORDER if lab not in taken]
        if len(candidates) < len(cluster):
            raise LabelingError(
                "near-degenerate cluster cannot be assigned distinct labels",
                assignment=dict(enumerate(labels)),
            )
        refs = _product_references(cache, candidates)
        overlap = np.zeros((len(cluster), len(candidates)))
        for a, i in enumerate(cluster):
            for b, ref in enumerate(refs):
                overlap[a, b] = abs(np.vdot(ref, states[i].coeffs)) ** 2
        rows, cols = linear_sum_assignment(-overlap)
        for a, b in zip(rows, cols):
            labels[cluster[a]] = candidates[b]
            ambiguous.append(candidates[b])

    assignment = {lab: i for i, lab in enumerate(labels)}
    if sorted(labels) != sorted(EXPECTED_ORDER):
        raise LabelingError(
            f"found labels {labels}, expected a permutation of {EXPECTED_ORDER}",
            assignment=dict(enumerate(labels)),
        )
    return QubitLabels(indices=assignment, ambiguous=tuple(sorted(set(ambiguous))))


def _product_references(cache: OperatorCache, labels):
    h_left, h_right = one_body_hamiltonians(cache)
    _, u_left = np.linalg.eigh(h_left)
    _, u_right = np.linalg.eigh(h_right)
    refs = []
    for lab in labels:
        a, b = int(lab[0]), int(lab[1])
        refs.append(np.outer(u_left[:, a], u_right[:, b]))
    return refs


def spectrum_vs_lambda(cache: OperatorCache, voltage_fn, lambdas, k: int = 6,
                       tol: float = 1e-9):
    """Eigenvalues along a control path, warm-starting each solve.

    Returns (energies, zetas) with energies of shape (len(lambdas), k),
    all in dimensionless units.  The cache is refreshed in place.
    """
    from .electrostatics import voltage_at

    lambdas = np.asarray(lambdas, dtype=float)
    energies = np.empty((lambdas.size, k))
    zetas = np.empty(lambdas.size)
    previous = None
    for i, lam in enumerate(lambdas):
        cache.refresh(voltage_at(voltage_fn, lam))
        sol = solve_spectrum(cache, k=k, tol=tol, initial=previous)
        energies[i] = sol.energies
        zetas[i] = zz_coupling(sol.energies) if k >= 5 else np.nan
        previous = sol.states
    return energies, zetas


def write_spectrum_csv(path, lambdas, energies, zetas):
    """CSV export `lambda,E0..E5,zeta` (caller chooses the unit system)."""
    energies = np.asarray(energies)
    with open(path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"E{i}" for i in range(energies.shape[1]))
        fh.write(f"lambda,{cols},zeta\n")
        for lam, row, zeta in zip(lambdas, energies, zetas):
            vals = ",".join(f"{v:.12g}" for v in row)
            fh.write(f"{lam:.12g},{vals},{zeta:.12g}\n")
