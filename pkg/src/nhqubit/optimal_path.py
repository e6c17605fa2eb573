"""Most-likely measurement paths by extremization of the trajectory action.

Each no-jump record realization r(.) carries a log-probability rate
G(q, r) = -r^2/2 - gamma_e (1+z)/2 - gamma_g (1-z)/2
          + sqrt(gamma_e) r (x cos(th) - y sin(th)),
the trace term of the expanded state update.  Extremizing the action

    S = int_0^T ( -p . qdot + H(q, p, r) ) dt,      H = p . F[q, r] + G[q, r]

over paths between fixed endpoints gives Hamilton's equations
qdot = dH/dp, pdot = -dH/dq together with the stationarity 0 = dH/dr,
which eliminates the record self-consistently:

    r* = p . dF/dr + sqrt(gamma_e) (x cos(th) - y sin(th)).

F is the Stratonovich drift of the post-selected qubit, so dF/dr is the
measurement-backaction vector.  H is conserved along optimal paths, which
makes the y = 0 great circle (x, z) = (sin(tb), cos(tb)) a one-dimensional
phase space with H = A(tb) p^2 + B(tb) p + C(tb); fixed points and
separatrices of that reduced flow classify the families of optimal paths.

All derivatives here are generated from F and G programmatically for any
axis and measurement phase; the analytic forms are cross-checked against
central finite differences of H in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .core import SystemParams
from .trajectory import bloch_step_stratonovich


class NoConvergenceError(RuntimeError):
    """The boundary-value search did not reach the endpoint tolerance."""


#: default integration step for optimal-path ODEs (us); deterministic
#: Hamiltonian flow tolerates much finer steps than the SDE pipelines
PATH_DT = 1e-3

#: endpoint residual above which shooting reports failure
RESIDUAL_TOL = 1e-3


def measurement_cost(q, r, params: SystemParams) -> float:
    """Log-probability rate G of readout r at manifold state q."""
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    quad = np.sqrt(params.gamma_e) * (
        x * np.cos(params.theta) - y * np.sin(params.theta)
    )
    return (
        -0.5 * np.asarray(r) ** 2
        - 0.5 * params.gamma_e * (1.0 + z)
        - 0.5 * params.gamma_g * (1.0 - z)
        + np.asarray(r) * quad
    )


def _backaction_vector(q, params):
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    ct, st = np.cos(params.theta), np.sin(params.theta)
    ge = np.sqrt(params.gamma_e)
    return np.stack(
        [
            ge * ((1.0 + z - x * x) * ct + x * y * st),
            ge * ((y * y - z - 1.0) * st - x * y * ct),
            ge * (y * st - x * ct) * (z + 1.0),
        ],
        axis=-1,
    )


def optimal_record(q, p, params: SystemParams) -> float:
    """Stationary readout r* = p . dF/dr + sqrt(gamma_e)(x cos th - y sin th).

    The unique maximum of H in r (the Gaussian cost makes H strictly
    concave in r); independent of the drive axis because the drive terms
    carry no readout dependence.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    quad = np.sqrt(params.gamma_e) * (
        q[..., 0] * np.cos(params.theta) - q[..., 1] * np.sin(params.theta)
    )
    return np.sum(p * _backaction_vector(q, params), axis=-1) + quad


def hamiltonian(q, p, r, params: SystemParams, axis: str = "x") -> float:
    """H(q, p, r) = p . F[q, r] + G[q, r]."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    drift = bloch_step_stratonovich(q, r, params, axis)
    return np.sum(p * drift, axis=-1) + measurement_cost(q, r, params)


def reduced_hamiltonian_value(q, p, params: SystemParams, axis: str = "x") -> float:
    """H with the record already eliminated: H(q, p, r*(q, p))."""
    return hamiltonian(q, p, optimal_record(q, p, params), params, axis)


def hamilton_rhs(q, p, params: SystemParams, axis: str = "x"):
    """(qdot, pdot) of the optimal-path flow, record eliminated.

    qdot = F(q, r*) and pdot_j = -(sum_i p_i dF_i/dq_j + dG/dq_j) at fixed
    r = r* (the total q-derivative equals the partial one because
    dH/dr = 0 there).
    """
    x, y, z = float(q[0]), float(q[1]), float(q[2])
    px, py, pz = float(p[0]), float(p[1]), float(p[2])
    ge, gg, w = params.gamma_e, params.gamma_g, params.omega
    g = ge - gg
    sge = math.sqrt(ge)
    ct, st = math.cos(params.theta), math.sin(params.theta)

    bx = sge * ((1.0 + z - x * x) * ct + x * y * st)
    by = sge * ((y * y - z - 1.0) * st - x * y * ct)
    bz = sge * (y * st - x * ct) * (z + 1.0)
    r = px * bx + py * by + pz * bz + sge * (x * ct - y * st)

    if axis == "x":
        f0x = 0.5 * g * x * z
        f0y = 0.5 * g * y * z - 2.0 * w * z
        f0z = 0.5 * g * (z * z - 1.0) + 2.0 * w * y
        j0 = (
            (0.5 * g * z, 0.0, 0.5 * g * x),
            (0.0, 0.5 * g * z, 0.5 * g * y - 2.0 * w),
            (0.0, 2.0 * w, g * z),
        )
    elif axis == "y":
        f0x = 2.0 * w * z + 0.5 * g * x * z
        f0y = 0.5 * g * y * z
        f0z = 0.5 * g * (z * z - 1.0) - 2.0 * w * x
        j0 = (
            (0.5 * g * z, 0.0, 2.0 * w + 0.5 * g * x),
            (0.0, 0.5 * g * z, 0.5 * g * y),
            (-2.0 * w, 0.0, g * z),
        )
    else:
        raise ValueError(f"unknown drive axis {axis!r}")

    jb = (
        (sge * (-2.0 * x * ct + y * st), sge * x * st, sge * ct),
        (sge * (-y * ct), sge * (2.0 * y * st - x * ct), -sge * st),
        (-sge * ct * (z + 1.0), sge * st * (z + 1.0), sge * (y * st - x * ct)),
    )
    qdot = (f0x + r * bx, f0y + r * by, f0z + r * bz)
    gq = (sge * r * ct, -sge * r * st, -0.5 * g)
    pvec = (px, py, pz)
    pdot = tuple(
        -(
            sum(pvec[i] * (j0[i][j] + r * jb[i][j]) for i in range(3))
            + gq[j]
        )
        for j in range(3)
    )
    return np.array(qdot), np.array(pdot)


@dataclass
class PathSolution:
    """One integrated optimal path.

    times, q, p, r : grid and phase-space history (r is the eliminated
                     record along the path)
    energy         : H at t = 0 (conserved along the path)
    energy_drift   : max |H(t) - H(0)| over the grid
    action         : S = int G dt (the -p.qdot and p.dH/dp parts cancel)
    action_cumulative : running S on the grid
    endpoint_residual : |q(T) - q_f| for shooting solutions, else nan
    """

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    r: np.ndarray
    energy: float
    energy_drift: float
    action: float
    action_cumulative: np.ndarray
    endpoint_residual: float = float("nan")


def _rhs6(state, params, axis):
    qdot, pdot = hamilton_rhs(state[:3], state[3:], params, axis)
    return np.concatenate([qdot, pdot])


def integrate_path(
    q0, p0, t_final: float, params: SystemParams, axis: str = "x", dt: float = PATH_DT
) -> PathSolution:
    """Fixed-step RK4 integration of Hamilton's equations from (q0, p0)."""
    n_steps = max(1, int(round(t_final / dt)))
    h = t_final / n_steps
    state = np.concatenate([np.asarray(q0, float), np.asarray(p0, float)])
    states = np.empty((n_steps + 1, 6))
    states[0] = state
    for k in range(n_steps):
        k1 = _rhs6(state, params, axis)
        k2 = _rhs6(state + 0.5 * h * k1, params, axis)
        k3 = _rhs6(state + 0.5 * h * k2, params, axis)
        k4 = _rhs6(state + h * k3, params, axis)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states[k + 1] = state
    times = np.arange(n_steps + 1) * h
    qs, ps = states[:, :3], states[:, 3:]
    rs = optimal_record(qs, ps, params)
    energies = hamiltonian(qs, ps, rs, params, axis)
    costs = measurement_cost(qs, rs, params)
    cumulative = np.concatenate(
        [[0.0], np.cumsum(0.5 * (costs[1:] + costs[:-1]) * np.diff(times))]
    )
    return PathSolution(
        times=times,
        q=qs,
        p=ps,
        r=rs,
        energy=float(energies[0]),
        energy_drift=float(np.max(np.abs(energies - energies[0]))),
        action=float(cumulative[-1]),
        action_cumulative=cumulative,
    )


def _endpoint(q0, p0, t_final, params, axis, dt):
    n_steps = max(1, int(round(t_final / dt)))
    h = t_final / n_steps
    state = np.concatenate([np.asarray(q0, float), np.asarray(p0, float)])
    for _ in range(n_steps):
        k1 = _rhs6(state, params, axis)
        k2 = _rhs6(state + 0.5 * h * k1, params, axis)
        k3 = _rhs6(state + 0.5 * h * k2, params, axis)
        k4 = _rhs6(state + h * k3, params, axis)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return state[:3]


def shoot(
    q_i,
    q_f,
    t_final: float,
    params: SystemParams,
    axis: str = "x",
    starts: int = 64,
    seed: int = 0,
    p_bound: float = 6.0,
    refine: int = 8,
    dt: float = PATH_DT,
) -> PathSolution:
    """Boundary-value search for the optimal path from q_i to q_f in time T.

    Quasi-random (Sobol) initial momenta in [-p_bound, p_bound]^3 plus the
    zero start are integrated once, the most promising `refine` candidates
    get a Nelder-Mead polish of p(0) against |q(T) - q_f|, and the winner
    is returned (smallest residual; ties broken by smaller |action|, then
    smaller |p(0)| -- momentum directions the endpoint map is blind to
    would otherwise make the result arbitrary).  Raises NoConvergenceError
    with the best-found diagnostics if the residual stays above
    RESIDUAL_TOL.
    """
    q_i = np.asarray(q_i, dtype=float)
    q_f = np.asarray(q_f, dtype=float)
    sampler = qmc.Sobol(d=3, scramble=True, seed=seed)
    exponent = max(0, int(np.ceil(np.log2(max(starts, 2)))))
    sobol = sampler.random_base2(exponent)[: max(starts - 1, 1)]
    p_starts = np.vstack([np.zeros(3), (sobol * 2.0 - 1.0) * p_bound])
    coarse_dt = 4.0 * dt

    def residual(p0, step):
        return float(np.linalg.norm(_endpoint(q_i, p0, t_final, params, axis, step) - q_f))

    ranked = sorted(range(len(p_starts)), key=lambda k: residual(p_starts[k], coarse_dt))
    candidates = []
    for k in ranked[:refine]:
        res = minimize(
            lambda p0: residual(p0, coarse_dt),
            p_starts[k],
            method="Nelder-Mead",
            options={"xatol": 1e-7, "fatol": 1e-10, "maxiter": 400},
        )
        candidates.append(res.x)
    solutions = []
    for p0 in candidates:
        sol = integrate_path(q_i, p0, t_final, params, axis, dt)
        sol.endpoint_residual = float(np.linalg.norm(sol.q[-1] - q_f))
        solutions.append(sol)
    solutions.sort(
        key=lambda s: (
            round(s.endpoint_residual, 9),
            round(abs(s.action), 9),
            np.linalg.norm(s.p[0]),
        )
    )
    best = solutions[0]
    if best.endpoint_residual > RESIDUAL_TOL:
        raise NoConvergenceError(
            f"endpoint residual {best.endpoint_residual:.3e} > {RESIDUAL_TOL} "
            f"after {starts} starts (best p(0) = {best.p[0]!r}); the target "
            f"may be unreachable in T = {t_final}"
        )
    return best


def action_functional(times, qs, ps, params: SystemParams, axis: str = "x") -> float:
    """S = int (-p . qdot + H) dt for arbitrary discretized (q, p) paths.

    qdot is taken by centered differences on the grid; the record is
    eliminated pointwise.  Used to verify that integrated paths are
    stationary points of the action.
    """
    qs = np.asarray(qs, float)
    ps = np.asarray(ps, float)
    qdot = np.gradient(qs, times, axis=0)
    rs = optimal_record(qs, ps, params)
    h_vals = hamiltonian(qs, ps, rs, params, axis)
    integrand = -np.sum(ps * qdot, axis=1) + h_vals
    return float(np.trapezoid(integrand, times))


# ---------------------------------------------------------------------------
# One-dimensional reduction on the y = 0 great circle
# ---------------------------------------------------------------------------


def reduce_1d(theta_b: float, params: SystemParams) -> tuple[float, float, float]:
    """Coefficients (A, B, C) of H = A p^2 + B p + C on the y = 0 circle.

    theta_b parametrizes (x, z) = (sin tb, cos tb); it is the Bloch polar
    angle, unrelated to the measurement phase.
    """
    ge, gg, w = params.gamma_e, params.gamma_g, params.omega
    c, s = np.cos(theta_b), np.sin(theta_b)
    a = 0.5 * ge * (1.0 + c) ** 2
    b = 2.0 * w + (1.5 * ge - 0.5 * gg) * s + 0.5 * ge * np.sin(2.0 * theta_b)
    cc = (
        0.5 * ge * (1.0 - c)
        + 0.25 * ge * (1.0 - np.cos(2.0 * theta_b))
        - ge
        - 0.5 * gg * (1.0 - c)
    )
    return a, b, cc


def _reduce_1d_derivatives(theta_b: float, params: SystemParams):
    """(A', B', C') and (A'', B'', C'') at theta_b."""
    ge, gg = params.gamma_e, params.gamma_g
    g = ge - gg
    c, s = np.cos(theta_b), np.sin(theta_b)
    c2, s2 = np.cos(2.0 * theta_b), np.sin(2.0 * theta_b)
    d1 = (
        -ge * s * (1.0 + c),
        (1.5 * ge - 0.5 * gg) * c + ge * c2,
        0.5 * g * s + 0.5 * ge * s2,
    )
    d2 = (
        -ge * (c * (1.0 + c) - s * s),
        -(1.5 * ge - 0.5 * gg) * s - 2.0 * ge * s2,
        0.5 * g * c + ge * c2,
    )
    return d1, d2


def reduced_record(theta_b: float, p: float, params: SystemParams) -> float:
    """r* on the reduced circle: sqrt(gamma_e)(p (1 + cos tb) + sin tb)."""
    return np.sqrt(params.gamma_e) * (p * (1.0 + np.cos(theta_b)) + np.sin(theta_b))


def reduced_rhs(theta_b: float, p: float, params: SystemParams):
    """(tb_dot, p_dot) of the one-dimensional optimal-path flow."""
    a, b, _ = reduce_1d(theta_b, params)
    (da, db, dc), _ = _reduce_1d_derivatives(theta_b, params)
    return 2.0 * a * p + b, -(da * p * p + db * p + dc)


def find_fixed_points(
    params: SystemParams,
    theta_range: tuple[float, float] = (0.0, 2.0 * np.pi),
    n_theta: int = 81,
    n_p: int = 41,
    p_bound: float = 10.0,
) -> list[dict]:
    """All roots of the reduced flow with Jacobian classification.

    Damped Newton iterations are seeded from a (theta_b, p) grid; converged
    roots inside the search window are deduplicated to 1e-6.  The flow is
    Hamiltonian so the Jacobian is traceless: det < 0 gives a saddle,
    det > 0 a center, and |det| below 1e-16 is reported as marginal.
    """
    lo, hi = theta_range
    seeds_t = np.linspace(lo, hi, n_theta)
    seeds_p = np.linspace(-p_bound, p_bound, n_p)
    roots: list[tuple[float, float]] = []

    def newton(tb, p):
        for _ in range(60):
            f1, f2 = reduced_rhs(tb, p, params)
            res = math.hypot(f1, f2)
            if res < 1e-12:
                return tb, p
            a, b, _ = reduce_1d(tb, params)
            (da, db, dc), (dda, ddb, ddc) = _reduce_1d_derivatives(tb, params)
            j11 = 2.0 * da * p + db
            j12 = 2.0 * a
            j21 = -(dda * p * p + ddb * p + ddc)
            j22 = -(2.0 * da * p + db)
            det = j11 * j22 - j12 * j21
            if abs(det) < 1e-14:
                return None
            step_t = (f1 * j22 - f2 * j12) / det
            step_p = (j11 * f2 - j21 * f1) / det
            scale = 1.0
            for _ in range(30):
                t_new, p_new = tb - scale * step_t, p - scale * step_p
                g1, g2 = reduced_rhs(t_new, p_new, params)
                if math.hypot(g1, g2) < res:
                    tb, p = t_new, p_new
                    break
                scale *= 0.5
            else:
                return None
        return None

    for tb0 in seeds_t:
        for p0 in seeds_p:
            root = newton(tb0, p0)
            if root is None:
                continue
            tb, p = root
            if not (lo - 1e-9 <= tb <= hi + 1e-9) or abs(p) > 2.0 * p_bound:
                continue
            if any(abs(tb - t) < 1e-6 and abs(p - q) < 1e-6 for t, q in roots):
                continue
            roots.append((tb, p))

    out = []
    for tb, p in sorted(roots):
        a, b, c = reduce_1d(tb, params)
        (da, db, dc), (dda, ddb, ddc) = _reduce_1d_derivatives(tb, params)
        j11 = 2.0 * da * p + db
        j12 = 2.0 * a
        j21 = -(dda * p * p + ddb * p + ddc)
        det = -j11 * j11 - j12 * j21
        if abs(det) < 1e-16:
            kind = "marginal"
        elif det < 0:
            kind = "saddle"
        else:
            kind = "center"
        energy = a * p * p + b * p + c
        out.append(
            {
                "theta_b": float(tb),
                "p": float(p),
                "classification": kind,
                "energy": float(energy),
            }
        )
    return out


def phase_portrait(
    energies,
    params: SystemParams,
    theta_grid=None,
) -> list[dict]:
    """Constant-energy contours p(theta_b) of the reduced Hamiltonian.

    For each energy E the quadratic A p^2 + B p + (C - E) = 0 is solved on
    the grid; branches are NaN where the discriminant is negative, and the
    linear A = 0 points fall back to p = (E - C)/B.  Contours at the energy
    of a located saddle are flagged as separatrices.
    """
    if theta_grid is None:
        theta_grid = np.linspace(0.0, 2.0 * np.pi, 721)
    theta_grid = np.asarray(theta_grid, dtype=float)
    saddles = [
        fp for fp in find_fixed_points(params) if fp["classification"] == "saddle"
    ]
    saddle_energies = {round(fp["energy"], 9) for fp in saddles}
    out = []
    for energy in energies:
        p_hi = np.full_like(theta_grid, np.nan)
        p_lo = np.full_like(theta_grid, np.nan)
        for k, tb in enumerate(theta_grid):
            a, b, c = reduce_1d(tb, params)
            if abs(a) < 1e-12:
                if abs(b) > 1e-12:
                    p_hi[k] = p_lo[k] = (energy - c) / b
                continue
            disc = b * b - 4.0 * a * (c - energy)
            if disc < 0.0:
                continue
            root = np.sqrt(disc)
            p_hi[k] = (-b + root) / (2.0 * a)
            p_lo[k] = (-b - root) / (2.0 * a)
        is_sep = any(abs(energy - e) < 1e-9 for e in saddle_energies)
        out.append(
            {
                "energy": float(energy),
                "theta_b": theta_grid,
                "p_plus": p_hi,
                "p_minus": p_lo,
                "is_separatrix": is_sep,
            }
        )
    return out
