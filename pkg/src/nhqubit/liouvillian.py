"""Liouvillian of the post-selected f-e qubit and deterministic reference evolutions.

Discarding every e -> g jump leaves the f-e manifold evolving under the
non-trace-preserving generator

    drho/dt = -i[H, rho] - (gamma_g/2){|e><e|, rho} + gamma_e D[|e><f|] rho

which, vectorized in the order (rho_ff, rho_fe, rho_ef, rho_ee) with the
row-major convention vec(A rho B) = kron(A, B^T) vec(rho), is the 4x4 matrix

    L = -i (H x I - I x H^T)
        - (gamma_g/2)(P_e x I + I x P_e) - (gamma_e/2)(P_f x I + I x P_f)
        + gamma_e (|e><f| x |e><f|).

A second-order exceptional point of L separates the overdamped regime
(all eigenvalues real) from the underdamped one (a complex-conjugate
pair); `find_ep` locates it by eigenvalue-gap minimization certified by
eigenvector coalescence.  `evolve_spectral`, `evolve_ode` and
`evolve_normalized` provide three mutually checkable reference evolutions,
plus the full three-level Lindblad generator for unconditioned averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IDX_E, IDX_F, SystemParams

#: vectorization order of the 2x2 qubit density matrix
VEC_ORDER = ("rho_ff", "rho_fe", "rho_ef", "rho_ee")

#: smallest right-eigenvector singular value below which the spectral
#: decomposition is refused as numerically defective
CONDITIONING_FLOOR = 1e-6


class DegenerateSpectrumError(RuntimeError):
    """Eigenvectors are (numerically) parallel; the spectral form is invalid."""


class EPNotFoundError(RuntimeError):
    """No interior eigenvalue-gap minimum exists in the scanned drive range."""


class OdeAccuracyError(RuntimeError):
    """The integrator could not meet the local error tolerance."""


def qubit_hamiltonian(omega: float, axis: str = "x") -> np.ndarray:
    """2x2 drive Hamiltonian on the (|f>, |e>) basis."""
    if axis == "x":
        return omega * np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
    if axis == "y":
        return omega * np.array([[0.0, -1j], [1j, 0.0]], dtype=complex)
    raise ValueError(f"unknown drive axis {axis!r}")


def _left_mult(a: np.ndarray) -> np.ndarray:
    return np.kron(a, np.eye(a.shape[0]))


def _right_mult(b: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(b.shape[0]), b.T)


def liouvillian_matrix(params: SystemParams, axis: str = "x") -> np.ndarray:
    """4x4 generator of the post-selected qubit in the VEC_ORDER convention."""
    h = qubit_hamiltonian(params.omega, axis)
    p_f = np.diag([1.0, 0.0]).astype(complex)
    p_e = np.diag([0.0, 1.0]).astype(complex)
    lower = np.zeros((2, 2), dtype=complex)
    lower[1, 0] = 1.0  # |e><f|
    liou = -1j * (_left_mult(h) - _right_mult(h))
    liou -= 0.5 * params.gamma_g * (_left_mult(p_e) + _right_mult(p_e))
    liou -= 0.5 * params.gamma_e * (_left_mult(p_f) + _right_mult(p_f))
    liou += params.gamma_e * np.kron(lower, lower)
    return liou


def lindblad3_superoperator(params: SystemParams, axis: str = "x") -> np.ndarray:
    """9x9 generator of the unconditioned three-level master equation.

    drho/dt = -i[H, rho] + gamma_g D[|g><e|] rho + gamma_e D[|e><f|] rho,
    row-major vectorization of the 3x3 density matrix.
    """
    h3 = np.zeros((3, 3), dtype=complex)
    h2 = qubit_hamiltonian(params.omega, axis)
    h3[:2, :2] = h2
    eye = np.eye(3)
    liou = -1j * (np.kron(h3, eye) - np.kron(eye, h3.T))
    for rate, (i, j) in ((params.gamma_e, (IDX_E, IDX_F)), (params.gamma_g, (2, IDX_E))):
        lop = np.zeros((3, 3), dtype=complex)
        lop[i, j] = 1.0
        ldl = lop.conj().T @ lop
        liou += rate * (
            np.kron(lop, lop.conj())
            - 0.5 * np.kron(ldl, eye)
            - 0.5 * np.kron(eye, ldl.T)
        )
    return liou


@dataclass
class LiouvillianSpectrum:
    """Eigen-decomposition of the qubit Liouvillian for one initial state.

    eigenvalues  : the four (complex) rates, MHz
    right        : right eigenvectors as 2x2 matrices, shape (4, 2, 2)
    left         : biorthonormal left eigenvectors, Tr[L_j R_k] = delta_jk
    weights      : C_k = Tr[L_k rho0]
    conditioning : smallest singular value of the right-eigenvector matrix
    """

    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    weights: np.ndarray
    conditioning: float


def spectral_decompose(liou: np.ndarray, rho0: np.ndarray) -> LiouvillianSpectrum:
    """Eigen-decompose the 4x4 Liouvillian with weights for initial state rho0.

    Raises DegenerateSpectrumError near an exceptional point, where the
    right-eigenvector matrix loses rank and the spectral form is invalid;
    use `evolve_ode` there instead.
    """
    eigenvalues, v = np.linalg.eig(liou)
    v = v / np.linalg.norm(v, axis=0, keepdims=True)
    conditioning = float(np.linalg.svd(v, compute_uv=False)[-1])
    if conditioning < CONDITIONING_FLOOR:
        raise DegenerateSpectrumError(
            f"right-eigenvector conditioning {conditioning:.2e} below "
            f"{CONDITIONING_FLOOR:.0e}; spectrum is defective (exceptional "
            "point) -- integrate with evolve_ode instead"
        )
    w = np.linalg.inv(v)
    right = v.T.reshape(4, 2, 2)
    # Tr[L R] pairing: vec(L^T) . vec(R), so the left matrices are the
    # transposed rows of the inverse eigenvector matrix.
    left = np.transpose(w.reshape(4, 2, 2), (0, 2, 1))
    weights = w @ np.asarray(rho0, dtype=complex).reshape(4)
    return LiouvillianSpectrum(eigenvalues, right, left, weights, conditioning)


def evolve_spectral(spectrum: LiouvillianSpectrum, t: float) -> np.ndarray:
    """Sub-normalized qubit state sum_k C_k exp(lambda_k t) R_k at time t >= 0."""
    if t < 0:
        raise ValueError("t must be non-negative")
    phases = spectrum.weights * np.exp(spectrum.eigenvalues * t)
    return np.tensordot(phases, spectrum.right, axes=(0, 0))


def rk4_solve(rhs, y0: np.ndarray, t_grid: np.ndarray, tol: float = 1e-8):
    """Classical RK4 over a uniform grid with step-doubling error control.

    Each grid interval is integrated with internal substeps; a substep is
    rejected and halved whenever the Richardson local-error estimate exceeds
    its share tol*h/T of the global budget.  Raises OdeAccuracyError if the
    substep underflows.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if len(t_grid) < 2:
        return np.asarray([y0])
    spans = np.diff(t_grid)
    if not np.allclose(spans, spans[0], rtol=1e-9, atol=1e-15):
        raise ValueError("time grid must be uniform")
    total = t_grid[-1] - t_grid[0]
    out = np.empty((len(t_grid),) + np.shape(y0), dtype=complex)
    out[0] = y0
    y = np.asarray(y0, dtype=complex)
    for i, t in enumerate(t_grid[:-1]):
        y = _rk4_span(rhs, y, t, spans[i], tol / total)
        out[i + 1] = y
    return out


def _rk4_step(rhs, y, t, h):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_span(rhs, y, t0, span, tol_per_time):
    t_end = t0 + span
    t, h = t0, span
    while t < t_end - 1e-15 * max(1.0, abs(t_end)):
        h = min(h, t_end - t)
        full = _rk4_step(rhs, y, t, h)
        half = _rk4_step(rhs, y, t, 0.5 * h)
        two_half = _rk4_step(rhs, half, t + 0.5 * h, 0.5 * h)
        err = np.max(np.abs(full - two_half)) / 15.0
        if err > tol_per_time * h:
            if h < 1e-12:
                raise OdeAccuracyError(
                    f"local error {err:.2e} at t={t:.6f} not reducible below "
                    f"budget even at h={h:.2e}"
                )
            h *= 0.5
            continue
        # Richardson extrapolation of the accepted composite step
        y = two_half + (two_half - full) / 15.0
        t += h
    return y


def evolve_ode(generator: np.ndarray, rho0: np.ndarray, t_grid, tol: float = 1e-8) -> np.ndarray:
    """Integrate drho/dt = L rho for a vectorized generator of any dimension.

    Accepts the 4x4 qubit Liouvillian with a 2x2 initial state or the 9x9
    three-level generator with a 3x3 initial state; returns densities on the
    grid, shape (n_times, d, d).
    """
    generator = np.asarray(generator, dtype=complex)
    d = int(round(np.sqrt(generator.shape[0])))
    y0 = np.asarray(rho0, dtype=complex).reshape(d * d)
    flat = rk4_solve(lambda t, y: generator @ y, y0, t_grid, tol)
    return flat.reshape(len(flat), d, d)


def evolve_normalized(
    params: SystemParams, axis: str, rho0: np.ndarray, t_grid, tol: float = 1e-9
) -> np.ndarray:
    """Unit-trace qubit evolution with the gamma_g <P_e> rho feedback term.

    Integrates drho/dt = L rho + gamma_g rho_ee rho, the nonlinear equation
    whose solution is the trace-normalized Liouvillian evolution.
    """
    liou = liouvillian_matrix(params, axis)
    gg = params.gamma_g

    def rhs(t, y):
        return liou @ y + gg * y[3].real * y

    flat = rk4_solve(rhs, np.asarray(rho0, dtype=complex).reshape(4), t_grid, tol)
    return flat.reshape(len(flat), 2, 2)


def normalized_f_population(densities: np.ndarray) -> np.ndarray:
    """rho_ff / (rho_ff + rho_ee) for a stack of 2x2 (possibly sub-normalized) states."""
    ff = densities[:, 0, 0].real
    ee = densities[:, 1, 1].real
    return ff / (ff + ee)


def _min_gap_pair(eigenvalues: np.ndarray):
    """Closest non-trivial eigenvalue pair.

    Pairs whose separation sits at numerical zero are structural
    degeneracies (symmetry crossings, e.g. the doubly degenerate
    -gamma_g/2 branch of the gamma_e = 0 generator) and are excluded: a
    scan can never land exactly on the square-root cusp of an actual
    coalescence, so a vanishing gap on a grid point is never the EP pair.
    """
    gaps = np.abs(eigenvalues[:, None] - eigenvalues[None, :])
    gaps[np.diag_indices(len(eigenvalues))] = np.inf
    spread = gaps[np.isfinite(gaps)].max()
    floor = 1e-10 * max(spread, 1.0)
    candidates = np.where(gaps <= floor, np.inf, gaps)
    if not np.isfinite(candidates).any():
        candidates = gaps
    i, j = np.unravel_index(np.argmin(candidates), gaps.shape)
    return gaps[i, j], i, j


def _gap_and_overlap(liou: np.ndarray):
    eigenvalues, v = np.linalg.eig(liou)
    gap, i, j = _min_gap_pair(eigenvalues)
    overlap = abs(np.vdot(v[:, i], v[:, j])) / (
        np.linalg.norm(v[:, i]) * np.linalg.norm(v[:, j])
    )
    return gap, float(overlap), eigenvalues


def spectrum_scan(
    gamma_e: float,
    gamma_g: float,
    omegas: np.ndarray,
    axis: str = "x",
    dt: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Eigenvalues, minimal gap and coalescence overlap over a drive scan.

    Eigenvalues at each omega are sorted by (real, imaginary) part; gap and
    overlap refer to the closest pair.
    """
    omegas = np.asarray(omegas, dtype=float)
    eigenvalues = np.empty((len(omegas), 4), dtype=complex)
    gaps = np.empty(len(omegas))
    overlaps = np.empty(len(omegas))
    for k, omega in enumerate(omegas):
        params = SystemParams(gamma_e, gamma_g, omega, dt=dt)
        gap, overlap, ev = _gap_and_overlap(liouvillian_matrix(params, axis))
        order = np.lexsort((ev.imag, ev.real))
        eigenvalues[k] = ev[order]
        gaps[k] = gap
        overlaps[k] = overlap
    return {"omega": omegas, "eigenvalues": eigenvalues, "gap": gaps, "overlap": overlaps}


def _golden_minimize(fun, a, b, tol):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def find_ep(
    gamma_e: float,
    gamma_g: float,
    omega_range: tuple[float, float] = (0.05, 3.0),
    axis: str = "x",
    n_scan: int = 400,
    refine_tol: float = 1e-8,
    dt: float = 1e-3,
) -> dict[str, float]:
    """Locate the exceptional point of the qubit Liouvillian by gap minimization.

    The scan minimizes the coalescence measure gap + spread * (1 - overlap)
    over the closest non-trivial eigenvalue pair; the overlap penalty keeps
    plain crossings (small gap, independent eigenvectors) from masquerading
    as the EP.  The gap is then golden-section refined inside the bracket
    around the interior scan minimum, and the result is returned as
    {"omega_ep", "gap", "overlap"}.  Overlap > 0.999 certifies a
    second-order coalescence; at higher-order degeneracies (for instance
    the gamma_e = 0 limit, where all four branches meet) the location is
    still found but the reported pair overlap is limited by the numerical
    conditioning of a defective eigenproblem.
    """
    lo, hi = omega_range
    if not (0 < lo < hi):
        raise ValueError("omega_range must be positive and increasing")
    omegas = np.linspace(lo, hi, n_scan)

    def analyze(omega):
        params = SystemParams(gamma_e, gamma_g, omega, dt=dt)
        gap, overlap, ev = _gap_and_overlap(liouvillian_matrix(params, axis))
        pair_dist = np.abs(ev[:, None] - ev[None, :])
        spread = pair_dist.max()
        return gap, overlap, gap + spread * (1.0 - overlap)

    measures = np.array([analyze(w)[2] for w in omegas])
    if measures.max() - measures.min() < 1e-12 * max(1.0, measures.max()):
        raise EPNotFoundError("coalescence measure is flat over the scan range")
    k = int(np.argmin(measures))
    if k in (0, n_scan - 1):
        raise EPNotFoundError(
            "no interior coalescence-measure minimum in the scanned range"
        )
    omega_min = _golden_minimize(
        lambda w: analyze(w)[0], omegas[k - 1], omegas[k + 1], refine_tol
    )
    gap, overlap, _ = analyze(omega_min)
    return {"omega_ep": float(omega_min), "gap": float(gap), "overlap": overlap}
