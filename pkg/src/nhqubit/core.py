"""States, parameters and measurement operators of the monitored three-level system.

Conventions used throughout the package
---------------------------------------
Basis ordering: every 3x3 matrix acts on the ordered basis (|f>, |e>, |g>),
i.e. index 0 is the second excited state |f>, index 1 the first excited
state |e>, index 2 the ground state |g>.  Decay channels are |f> -> |e|
at rate ``gamma_e`` and |e> -> |g> at rate ``gamma_g`` (no direct f -> g
transition).

Bloch vector of the f-e manifold:

    x = (rho_fe + rho_ef) / (rho_ff + rho_ee)
    y = i (rho_fe - rho_ef) / (rho_ff + rho_ee)
    z = (rho_ff - rho_ee) / (rho_ff + rho_ee)

so z = +1 is |f> and z = -1 is |e>.  This sign choice is the one under
which the Stratonovich trajectory equations implemented in
:mod:`nhqubit.trajectory` hold verbatim; the agreement is enforced by a
dedicated single-step cross-check in the test suite rather than assumed.

Units: rates in MHz, times in microseconds, so ``gamma * dt`` and
``omega * dt`` are dimensionless.  No 2*pi factors are inserted anywhere.

Measurement operators
---------------------
Photon-counting scheme (both transitions counted), with p_e = gamma_e*dt
and p_g = gamma_g*dt:

    K0  = diag(sqrt(1-p_e), sqrt(1-p_g), 1)
    K1e = sqrt(p_e) |e><f|
    K1g = sqrt(p_g) |g><e|

These close exactly: K0+K0 + K1e+K1e + K1g+K1g = identity.

Hybrid scheme (f -> e homodyned with local-oscillator phase theta,
e -> g photon-counted), with N = sqrt(dt / 2*pi):

    KH(r) = sqrt(N) exp(-r^2 dt/4) [[sqrt(1-gamma_e dt), 0,                 0],
                                    [r dt sqrt(gamma_e) e^{-i theta},
                                                    sqrt(1-gamma_g dt),    0],
                                    [0,              0,                    1]]
    KJ(r) = sqrt(N) exp(-r^2 dt/4) sqrt(gamma_g dt) |g><e|

and integral dr (KH+KH + KJ+KJ) = identity under exact Gaussian moments.

State update for outcome K with drive unitary U:

    rho' = U K rho K+ U+ / tr(U K rho K+ U+)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IDX_F, IDX_E, IDX_G = 0, 1, 2

KET_F = np.array([1.0, 0.0, 0.0], dtype=complex)
KET_E = np.array([0.0, 1.0, 0.0], dtype=complex)
KET_G = np.array([0.0, 0.0, 1.0], dtype=complex)

#: maximal gamma*dt accepted by SystemParams (detector must stay Markovian)
MARKOV_LIMIT = 0.1


class ImpossibleOutcomeError(ValueError):
    """The sampled measurement outcome has vanishing probability for this state."""


class ManifoldDepletedError(ValueError):
    """The f-e manifold carries no population; the Bloch vector is undefined."""


@dataclass(frozen=True)
class SystemParams:
    """Physical parameters of one simulation.

    gamma_e : |f> -> |e> decay rate (MHz), the homodyned transition
    gamma_g : |e> -> |g> decay rate (MHz), the photon-counted transition
    omega   : coherent drive strength on the f-e manifold (MHz)
    theta   : homodyne local-oscillator phase (rad)
    dt      : measurement/update interval (us)
    """

    gamma_e: float
    gamma_g: float
    omega: float
    theta: float = 0.0
    dt: float = 0.01

    def __post_init__(self):
        if self.gamma_e < 0 or self.gamma_g < 0:
            raise ValueError("decay rates must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.gamma_e * self.dt > MARKOV_LIMIT or self.gamma_g * self.dt > MARKOV_LIMIT:
            raise ValueError(
                f"gamma*dt exceeds {MARKOV_LIMIT}: the coarse-grained detector "
                "model is only valid for gamma*dt << 1"
            )


def density_from_amplitudes(c_g: complex, c_e: complex, c_f: complex) -> np.ndarray:
    """Pure-state projector of c_f|f> + c_e|e> + c_g|g> as a 3x3 density matrix."""
    norm2 = abs(c_g) ** 2 + abs(c_e) ** 2 + abs(c_f) ** 2
    if abs(norm2 - 1.0) > 1e-9:
        raise ValueError(f"amplitudes not normalized: |c|^2 = {norm2!r}")
    psi = np.array([c_f, c_e, c_g], dtype=complex)
    return np.outer(psi, psi.conj())


def check_density(rho: np.ndarray, atol_herm: float = 1e-12, atol_pos: float = 1e-10) -> None:
    """Raise ValueError unless rho is Hermitian, positive and has trace in (0, 1]."""
    rho = np.asarray(rho)
    if np.max(np.abs(rho - rho.conj().T)) > atol_herm:
        raise ValueError("density matrix is not Hermitian")
    ev = np.linalg.eigvalsh(rho)
    if ev.min() < -atol_pos:
        raise ValueError(f"density matrix has negative eigenvalue {ev.min()}")
    tr = rho.trace().real
    if not (0.0 < tr <= 1.0 + 1e-12):
        raise ValueError(f"density matrix trace {tr} outside (0, 1]")


def photon_counting_kraus(params: SystemParams) -> dict[str, np.ndarray]:
    """Kraus operators of the pure photon-counting scheme.

    Returns {"K0": no-click, "K1e": f->e click, "K1g": e->g click}; the three
    operators satisfy sum K+K = identity exactly.
    """
    p_e = params.gamma_e * params.dt
    p_g = params.gamma_g * params.dt
    k0 = np.diag([np.sqrt(1.0 - p_e), np.sqrt(1.0 - p_g), 1.0]).astype(complex)
    k1e = np.zeros((3, 3), dtype=complex)
    k1e[IDX_E, IDX_F] = np.sqrt(p_e)
    k1g = np.zeros((3, 3), dtype=complex)
    k1g[IDX_G, IDX_E] = np.sqrt(p_g)
    return {"K0": k0, "K1e": k1e, "K1g": k1g}


def hybrid_kraus(params: SystemParams, r: float) -> dict[str, np.ndarray]:
    """Kraus operators of the hybrid scheme at homodyne readout value r.

    Returns {"KH": no-jump (homodyne), "KJ": e->g jump}, both carrying the
    Gaussian record prefactor sqrt(N) exp(-r^2 dt/4) with N = sqrt(dt/2pi).
    """
    if not np.isfinite(r):
        raise ValueError("readout r must be finite")
    dt = params.dt
    pref = (dt / (2.0 * np.pi)) ** 0.25 * np.exp(-r * r * dt / 4.0)
    kh = np.zeros((3, 3), dtype=complex)
    kh[IDX_F, IDX_F] = np.sqrt(1.0 - params.gamma_e * dt)
    kh[IDX_E, IDX_F] = r * dt * np.sqrt(params.gamma_e) * np.exp(-1j * params.theta)
    kh[IDX_E, IDX_E] = np.sqrt(1.0 - params.gamma_g * dt)
    kh[IDX_G, IDX_G] = 1.0
    kj = np.zeros((3, 3), dtype=complex)
    kj[IDX_G, IDX_E] = np.sqrt(params.gamma_g * dt)
    return {"KH": pref * kh, "KJ": pref * kj}


def photon_counting_completeness_residual(params: SystemParams) -> float:
    """Max-norm of sum K+K - identity for the photon-counting scheme."""
    ops = photon_counting_kraus(params)
    total = sum(k.conj().T @ k for k in ops.values())
    return float(np.max(np.abs(total - np.eye(3))))


def hybrid_completeness_residual(params: SystemParams, n_nodes: int = 801) -> float:
    """Max-norm of integral dr (KH+KH + KJ+KJ) - identity, by Gauss-Legendre.

    The readout integral runs over r in [-40, 40] / sqrt(dt), wide enough to
    hold all the mass of the variance-1/dt Gaussian factor.
    """
    half_width = 40.0 / np.sqrt(params.dt)
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    r_vals = nodes * half_width
    total = np.zeros((3, 3), dtype=complex)
    for r, w in zip(r_vals, weights):
        ops = hybrid_kraus(params, r)
        integrand = sum(k.conj().T @ k for k in ops.values())
        total += w * half_width * integrand
    return float(np.max(np.abs(total - np.eye(3))))


def drive_unitary(omega: float, dt: float, axis: str = "x") -> np.ndarray:
    """Coherent-drive unitary exp(-i H dt) on the f-e manifold.

    H = omega (|f><e| + |e><f|) for the x axis and
    H = omega (-i |f><e| + i |e><f|) for the y axis; |g> is untouched.
    The 2x2 block exponential is exact: cos(omega dt) - i sin(omega dt) sigma.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    c, s = np.cos(omega * dt), np.sin(omega * dt)
    u = np.eye(3, dtype=complex)
    u[IDX_F, IDX_F] = c
    u[IDX_E, IDX_E] = c
    if axis == "x":
        u[IDX_F, IDX_E] = -1j * s
        u[IDX_E, IDX_F] = -1j * s
    elif axis == "y":
        u[IDX_F, IDX_E] = -s
        u[IDX_E, IDX_F] = s
    else:
        raise ValueError(f"unknown drive axis {axis!r}")
    return u


def apply_update(rho: np.ndarray, kraus: np.ndarray, unitary: np.ndarray) -> np.ndarray:
    """One measurement-conditioned state update rho -> U K rho K+ U+ / tr."""
    out = unitary @ kraus @ rho @ kraus.conj().T @ unitary.conj().T
    tr = out.trace().real
    if tr <= 1e-300:
        raise ImpossibleOutcomeError(
            "update trace vanished: this outcome has zero probability and "
            "must not have been sampled"
        )
    out /= tr
    return 0.5 * (out + out.conj().T)


def bloch_from_rho(rho: np.ndarray) -> np.ndarray:
    """Bloch vector (x, y, z) of the f-e manifold block of rho."""
    pop = (rho[IDX_F, IDX_F] + rho[IDX_E, IDX_E]).real
    if pop <= 1e-12:
        raise ManifoldDepletedError("no population left in the f-e manifold")
    x = (rho[IDX_F, IDX_E] + rho[IDX_E, IDX_F]).real / pop
    y = (1j * (rho[IDX_F, IDX_E] - rho[IDX_E, IDX_F])).real / pop
    z = (rho[IDX_F, IDX_F] - rho[IDX_E, IDX_E]).real / pop
    return np.array([x, y, z])


def rho_from_bloch(q) -> np.ndarray:
    """Unit-trace 3x3 density matrix with Bloch vector q and empty |g> level."""
    x, y, z = q
    rho = np.zeros((3, 3), dtype=complex)
    rho[IDX_F, IDX_F] = (1.0 + z) / 2.0
    rho[IDX_E, IDX_E] = (1.0 - z) / 2.0
    rho[IDX_F, IDX_E] = (x - 1j * y) / 2.0
    rho[IDX_E, IDX_F] = (x + 1j * y) / 2.0
    return rho
