"""Stochastic measurement trajectories of the hybrid-detected three-level system.

Two distinct pipelines are deliberately kept apart, because their
disagreement near the exceptional point is the interesting physics:

* the *hybrid Kraus pipeline* iterates the exact 3x3 update
  rho -> U K rho K+ U+ / tr with K = KH(r) (no jump, r Gaussian) or
  K = KJ (e -> g jump, after which the state is |g><g| for good); the
  per-step jump probability integrates the readout out analytically,
  P_jump = gamma_g dt rho_ee;

* the *no-jump Bloch pipeline* integrates the Stratonovich equations of
  the post-selected f-e manifold (rho_gg pinned to zero).  For the x-axis
  drive at local-oscillator phase theta,

      dx/dt = (g/2) x z + r ge [ (1 + z - x^2) cos(th) + x y sin(th) ]
      dy/dt = (g/2) y z - 2 w z + r ge [ (y^2 - z - 1) sin(th) - x y cos(th) ]
      dz/dt = (g/2)(z^2 - 1) + 2 w y + r ge (y sin(th) - x cos(th)) (z + 1)

  with g = gamma_e - gamma_g, ge = sqrt(gamma_e), and the y-axis drive
  replacing the 2wz / 2wy drive terms by +2wz in dx/dt and -2wx in dz/dt.
  The record is r = sqrt(gamma_e) (x cos(th) - y sin(th)) + zeta, zeta
  white with variance 1/dt.  The production integrator composes the exact
  normalized flow of the frozen-record generator over each interval
  (piecewise-constant-record construction, whose dt -> 0 limit is the
  Stratonovich solution, and which keeps pure states exactly on the unit
  sphere); the explicit-midpoint rule on the printed derivative and the
  equivalent Ito increments (Euler-Maruyama) are available as alternative
  schemes for convergence studies.  Jumps can optionally be superposed on
  the Bloch pipeline as a termination process of intensity
  gamma_g (1 - z)/2 dt per step.

Ensembles are deterministic for a fixed (seed, n, grid): trajectory i
draws from its own counter-based Philox stream keyed by (seed, i),
trajectories are processed in fixed-size blocks, and reductions sum block
results in fixed index order, so the worker count never changes a bit of
the output.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    IDX_E,
    IDX_F,
    IDX_G,
    SystemParams,
    bloch_from_rho,
    drive_unitary,
)

#: trajectories per vectorized block; fixed so that results do not depend on
#: how blocks are distributed over workers
BLOCK_SIZE = 256

#: abort threshold for the Bloch-norm integrator diagnostic (production scheme)
NORM_LIMIT = 1.0 + 1e-3

#: looser blow-up guard for the midpoint/Euler-Maruyama diagnostic schemes,
#: whose transient excursions off the unit sphere are expected at finite dt
#: and are precisely what convergence studies measure
DIAGNOSTIC_NORM_LIMIT = 1.5


class EmptySelectionError(ValueError):
    """Post-selection removed every trajectory; enlarge n or the tolerance."""


class BlochNormError(RuntimeError):
    """A Bloch trajectory left the unit ball; the step size is too coarse."""


@dataclass
class TrajectoryRecord:
    """One stochastic run.

    times   : grid of length n_steps + 1 (us)
    rhos    : states on the grid, shape (n_steps + 1, 3, 3); only stored by
              the Kraus pipeline (None for Bloch runs)
    bloch   : manifold Bloch vectors on the grid, NaN once the manifold is
              empty, shape (n_steps + 1, 3)
    records : homodyne readouts, one per step, NaN on and after the jump step
    jump_time : time of the e -> g jump, or None
    survived  : True iff no jump occurred before the final time
    """

    times: np.ndarray
    rhos: np.ndarray | None
    bloch: np.ndarray
    records: np.ndarray
    jump_time: float | None
    survived: bool


@dataclass
class EnsembleStats:
    """Survival-weighted population statistics of a trajectory ensemble.

    Population means/standard errors are unconditioned (jumped trajectories
    count with P_g = 1); pf_norm is the survivor-conditioned normalized |f>
    population rho_ff / (rho_ff + rho_ee), averaged at each time over the
    trajectories that have not jumped yet, and n_survived counts them.
    """

    times: np.ndarray
    pf_mean: np.ndarray
    pf_se: np.ndarray
    pe_mean: np.ndarray
    pe_se: np.ndarray
    pg_mean: np.ndarray
    pg_se: np.ndarray
    pf_norm: np.ndarray
    n_survived: np.ndarray
    n_total: int
    bloch: np.ndarray | None = field(default=None, repr=False)
    survived: np.ndarray | None = field(default=None, repr=False)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for trajectory `index` of ensemble `seed`."""
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, index], dtype=np.uint64))
    )


def record_mean(rho: np.ndarray, theta: float, gamma_e: float) -> float:
    """Homodyne record mean sqrt(gamma_e) (rho_ef e^{i th} + rho_fe e^{-i th}) / tr."""
    tr = rho.trace().real
    cross = (
        rho[IDX_E, IDX_F] * np.exp(1j * theta) + rho[IDX_F, IDX_E] * np.exp(-1j * theta)
    ).real
    return np.sqrt(gamma_e) * cross / tr


def measurement_record(q, theta: float, gamma_e: float, zeta: float) -> float:
    """Readout r = sqrt(gamma_e) (x cos(theta) - y sin(theta)) + zeta."""
    x, y, _ = q
    return np.sqrt(gamma_e) * (x * np.cos(theta) - y * np.sin(theta)) + zeta


def sample_step(rho: np.ndarray, params: SystemParams, rng: np.random.Generator, axis: str = "x"):
    """One hybrid-detection step from a unit-trace state.

    Returns a dict {"outcome": "jump" | "no-jump", "r": float | None,
    "rho_next": ndarray}.  The jump branch collapses to |g><g| exactly; the
    no-jump branch draws r from the Gaussian readout law and applies KH(r)
    followed by the drive unitary.
    """
    dt = params.dt
    p_jump = params.gamma_g * dt * rho[IDX_E, IDX_E].real / rho.trace().real
    u = drive_unitary(params.omega, dt, axis)
    if rng.random() < p_jump:
        rho_next = np.zeros((3, 3), dtype=complex)
        rho_next[IDX_G, IDX_G] = 1.0
        return {"outcome": "jump", "r": None, "rho_next": rho_next}
    mean = record_mean(rho, params.theta, params.gamma_e)
    r = mean + rng.standard_normal() / np.sqrt(dt)
    kh = _bare_kh(params, np.array([r]))[0]
    out = u @ kh @ rho @ kh.conj().T @ u.conj().T
    out /= out.trace().real
    return {"outcome": "no-jump", "r": r, "rho_next": 0.5 * (out + out.conj().T)}


def _bare_kh(params: SystemParams, r: np.ndarray) -> np.ndarray:
    """Stack of no-jump Kraus matrices without the scalar Gaussian prefactor.

    The prefactor sqrt(N) exp(-r^2 dt/4) cancels in the normalized update,
    so the trajectory code drops it.
    """
    n = len(r)
    kh = np.zeros((n, 3, 3), dtype=complex)
    kh[:, IDX_F, IDX_F] = np.sqrt(1.0 - params.gamma_e * params.dt)
    kh[:, IDX_E, IDX_F] = (
        r * params.dt * np.sqrt(params.gamma_e) * np.exp(-1j * params.theta)
    )
    kh[:, IDX_E, IDX_E] = np.sqrt(1.0 - params.gamma_g * params.dt)
    kh[:, IDX_G, IDX_G] = 1.0
    return kh


def _kraus_block(rho0, params, n_steps, axis, seed, indices, jumps=True, noise=None, store_rho=False):
    """Lock-step hybrid-pipeline propagation of one block of trajectories.

    Returns (pops, bloch, records, jump_step, rhos) with pops (B, n+1, 3)
    real populations, bloch (B, n+1, 3) (NaN after depletion), records
    (B, n), jump_step (B,) = step index of the jump or n_steps + 1, and
    rhos (B, n+1, 3, 3) when store_rho else None.  `noise` may carry
    pre-drawn (normals, uniforms) arrays in place of the per-index streams.
    """
    n_traj = len(indices)
    if noise is None:
        normals = np.empty((n_traj, n_steps))
        uniforms = np.empty((n_traj, n_steps))
        for k, idx in enumerate(indices):
            rng = trajectory_rng(seed, idx)
            normals[k] = rng.standard_normal(n_steps)
            uniforms[k] = rng.random(n_steps)
    else:
        normals, uniforms = noise

    dt = params.dt
    sqrt_ge = np.sqrt(params.gamma_e)
    u = drive_unitary(params.omega, dt, axis)
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (n_traj, 3, 3)).copy()
    alive = np.ones(n_traj, dtype=bool)
    jump_step = np.full(n_traj, n_steps + 1, dtype=int)

    pops = np.empty((n_traj, n_steps + 1, 3))
    bloch = np.full((n_traj, n_steps + 1, 3), np.nan)
    records = np.full((n_traj, n_steps), np.nan)
    rhos = np.empty((n_traj, n_steps + 1, 3, 3), dtype=complex) if store_rho else None
    _store(rho, alive, pops, bloch, 0)
    if store_rho:
        rhos[:, 0] = rho

    g_state = np.zeros((3, 3), dtype=complex)
    g_state[IDX_G, IDX_G] = 1.0
    for step in range(n_steps):
        p_jump = np.where(alive, params.gamma_g * dt * rho[:, IDX_E, IDX_E].real, 0.0)
        jump_now = jumps & (uniforms[:, step] < p_jump)
        cross = (
            rho[:, IDX_E, IDX_F] * np.exp(1j * params.theta)
            + rho[:, IDX_F, IDX_E] * np.exp(-1j * params.theta)
        ).real
        r = sqrt_ge * cross + normals[:, step] / np.sqrt(dt)
        kh = _bare_kh(params, r)
        out = u @ kh @ rho @ kh.conj().transpose(0, 2, 1) @ u.conj().T
        tr = np.einsum("nii->n", out).real
        out /= tr[:, None, None]
        out = 0.5 * (out + out.conj().transpose(0, 2, 1))
        rho = np.where(jump_now[:, None, None], g_state, out)
        records[:, step] = np.where(alive & ~jump_now, r, np.nan)
        jump_step[jump_now] = step
        alive &= ~jump_now
        _store(rho, alive, pops, bloch, step + 1)
        if store_rho:
            rhos[:, step + 1] = rho
    return pops, bloch, records, jump_step, rhos


def _store(rho, alive, pops, bloch, t_index):
    pops[:, t_index, 0] = rho[:, IDX_F, IDX_F].real
    pops[:, t_index, 1] = rho[:, IDX_E, IDX_E].real
    pops[:, t_index, 2] = rho[:, IDX_G, IDX_G].real
    manifold = pops[:, t_index, 0] + pops[:, t_index, 1]
    safe = np.where(manifold > 1e-12, manifold, 1.0)
    bloch[:, t_index, 0] = np.where(
        alive, (rho[:, IDX_F, IDX_E] + rho[:, IDX_E, IDX_F]).real / safe, np.nan
    )
    bloch[:, t_index, 1] = np.where(
        alive, (1j * (rho[:, IDX_F, IDX_E] - rho[:, IDX_E, IDX_F])).real / safe, np.nan
    )
    bloch[:, t_index, 2] = np.where(
        alive, (pops[:, t_index, 0] - pops[:, t_index, 1]) / safe, np.nan
    )


def simulate_trajectory(
    rho0: np.ndarray,
    params: SystemParams,
    t_final: float,
    axis: str = "x",
    rng_or_seed=0,
    jumps: bool = True,
) -> TrajectoryRecord:
    """One hybrid-pipeline trajectory up to time t_final (a multiple of dt).

    `rng_or_seed` may be an integer seed (stream index 0 of that seed, the
    layout used by `simulate_ensemble`) or a ready generator.  With
    jumps=False the run is conditioned on the no-jump outcome at every step.
    """
    n_steps = _steps_for(t_final, params.dt)
    if isinstance(rng_or_seed, np.random.Generator):
        noise = (
            rng_or_seed.standard_normal(n_steps)[None, :],
            rng_or_seed.random(n_steps)[None, :],
        )
        seed = 0
    else:
        noise = None
        seed = int(rng_or_seed)
    pops, bloch, records, jump_step, rhos = _kraus_block(
        rho0, params, n_steps, axis, seed, [0], jumps=jumps, noise=noise, store_rho=True
    )
    jumped = jump_step[0] <= n_steps
    return TrajectoryRecord(
        times=np.arange(n_steps + 1) * params.dt,
        rhos=rhos[0],
        bloch=bloch[0],
        records=records[0],
        jump_time=float((jump_step[0] + 1) * params.dt) if jumped else None,
        survived=not jumped,
    )


def _steps_for(t_final: float, dt: float) -> int:
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer multiple of dt")
    return n_steps


def simulate_ensemble(
    n: int,
    rho0: np.ndarray,
    params: SystemParams,
    t_final: float,
    axis: str = "x",
    seed: int = 0,
    workers: int = 1,
    store_bloch: bool = False,
) -> EnsembleStats:
    """Hybrid-pipeline ensemble statistics over n trajectories."""
    if n < 1:
        raise ValueError("n must be at least 1")
    n_steps = _steps_for(t_final, params.dt)
    blocks = [list(range(b, min(b + BLOCK_SIZE, n))) for b in range(0, n, BLOCK_SIZE)]
    results = _map_blocks(
        _kraus_block_worker,
        [(rho0, params, n_steps, axis, seed, idx) for idx in blocks],
        workers,
    )
    return _reduce_blocks(results, n, n_steps, params.dt, store_bloch)


def _kraus_block_worker(args):
    pops, bloch, records, jump_step, _ = _kraus_block(*args)
    return pops, bloch, records, jump_step


def _map_blocks(worker, argument_list, workers):
    if workers <= 1 or len(argument_list) <= 1:
        return [worker(a) for a in argument_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, argument_list))


def _reduce_blocks(results, n, n_steps, dt, store_bloch):
    # fixed-order pairwise reductions: stack per-block partial sums, then
    # np.sum along the block axis
    pop_sums = np.sum([res[0].sum(axis=0) for res in results], axis=0)
    pop_sqs = np.sum([(res[0] ** 2).sum(axis=0) for res in results], axis=0)
    alive_masks = []
    norm_sums = []
    for pops, bloch, records, jump_step in results:
        steps = np.arange(n_steps + 1)
        alive = steps[None, :] <= jump_step[:, None]
        manifold = pops[:, :, 0] + pops[:, :, 1]
        safe = np.where(manifold > 1e-12, manifold, 1.0)
        pf_norm = np.where(alive, pops[:, :, 0] / safe, 0.0)
        alive_masks.append(alive.sum(axis=0))
        norm_sums.append(pf_norm.sum(axis=0))
    n_survived = np.sum(alive_masks, axis=0)
    pf_norm_sum = np.sum(norm_sums, axis=0)

    mean = pop_sums / n
    if n > 1:
        var = (pop_sqs - n * mean**2) / (n - 1)
        se = np.sqrt(np.maximum(var, 0.0) / n)
    else:
        se = np.zeros_like(mean)
    with np.errstate(invalid="ignore", divide="ignore"):
        pf_norm = np.where(n_survived > 0, pf_norm_sum / n_survived, np.nan)
    stats = EnsembleStats(
        times=np.arange(n_steps + 1) * dt,
        pf_mean=mean[:, 0],
        pf_se=se[:, 0],
        pe_mean=mean[:, 1],
        pe_se=se[:, 1],
        pg_mean=mean[:, 2],
        pg_se=se[:, 2],
        pf_norm=pf_norm,
        n_survived=n_survived,
        n_total=n,
    )
    if store_bloch:
        stats.bloch = np.concatenate([res[1] for res in results], axis=0)
        stats.survived = np.concatenate(
            [res[3] > n_steps for res in results], axis=0
        )
    return stats


# ---------------------------------------------------------------------------
# Bloch SDE pipeline (post-selected manifold, rho_gg = 0)
# ---------------------------------------------------------------------------


def _drift_terms(q, params, axis):
    """Drive + deterministic damping part of the Stratonovich drift."""
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    g = params.gamma_e - params.gamma_g
    w = params.omega
    if axis == "x":
        dx = 0.5 * g * x * z
        dy = 0.5 * g * y * z - 2.0 * w * z
        dz = 0.5 * g * (z * z - 1.0) + 2.0 * w * y
    elif axis == "y":
        dx = 2.0 * w * z + 0.5 * g * x * z
        dy = 0.5 * g * y * z
        dz = 0.5 * g * (z * z - 1.0) - 2.0 * w * x
    else:
        raise ValueError(f"unknown drive axis {axis!r}")
    return np.stack([dx, dy, dz], axis=-1)


def _backaction(q, params):
    """Coefficient of r in the Stratonovich equations (times sqrt(gamma_e))."""
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    ct, st = np.cos(params.theta), np.sin(params.theta)
    ge = np.sqrt(params.gamma_e)
    bx = ge * ((1.0 + z - x * x) * ct + x * y * st)
    by = ge * ((y * y - z - 1.0) * st - x * y * ct)
    bz = ge * (y * st - x * ct) * (z + 1.0)
    return np.stack([bx, by, bz], axis=-1)


def bloch_step_stratonovich(q, r, params: SystemParams, axis: str = "x") -> np.ndarray:
    """Stratonovich time-derivative (dx/dt, dy/dt, dz/dt) at readout r."""
    q = np.asarray(q, dtype=float)
    return _drift_terms(q, params, axis) + np.asarray(r)[..., None] * _backaction(q, params)


def _backaction_jacobian(q, params):
    """d(backaction_i)/d(q_j), shape (..., 3, 3)."""
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    ct, st = np.cos(params.theta), np.sin(params.theta)
    ge = np.sqrt(params.gamma_e)
    ones = np.ones_like(x)
    jac = np.stack(
        [
            np.stack([-2.0 * x * ct + y * st, x * st, ct * ones], axis=-1),
            np.stack([-y * ct, 2.0 * y * st - x * ct, -st * ones], axis=-1),
            np.stack(
                [-ct * (z + 1.0), st * (z + 1.0), (y * st - x * ct)], axis=-1
            ),
        ],
        axis=-2,
    )
    return ge * jac


def bloch_step_ito(q, dw, params: SystemParams, axis: str = "x") -> np.ndarray:
    """Euler-Maruyama increment of the equivalent Ito equations.

    The Ito drift is the Stratonovich drift at the mean record plus the
    noise-induced correction  (1/2) (b . grad) b; at theta = 0 this
    reproduces, e.g. for the x-axis drive,

        dx = (-gamma_e x / 2 - gamma_g x z / 2) dt + sqrt(gamma_e)(1+z-x^2) dW.
    """
    q = np.asarray(q, dtype=float)
    mean_r = np.sqrt(params.gamma_e) * (
        q[..., 0] * np.cos(params.theta) - q[..., 1] * np.sin(params.theta)
    )
    strat_drift = _drift_terms(q, params, axis) + mean_r[..., None] * _backaction(q, params)
    b = _backaction(q, params)
    jac = _backaction_jacobian(q, params)
    correction = 0.5 * np.einsum("...ij,...j->...i", jac, b)
    return (strat_drift + correction) * params.dt + b * np.asarray(dw)[..., None]


def _frozen_record_propagators(r: np.ndarray, params: SystemParams, axis: str) -> np.ndarray:
    """exp((-iH + S) dt) for a batch of readouts r, shape (n, 2, 2).

    S = [[-gamma_e/2, 0], [sqrt(gamma_e) r e^{-i theta}, -gamma_g/2]] is the
    manifold block of the no-jump generator; the closed 2x2 exponential uses
    exp(a I + B) = e^a (cosh(mu dt) I + sinh(mu dt)/mu B) with B traceless,
    mu^2 = -det B.
    """
    n = len(r)
    gen = np.zeros((n, 2, 2), dtype=complex)
    h = params.omega * (
        np.array([[0, 1], [1, 0]]) if axis == "x" else np.array([[0, -1j], [1j, 0]])
    )
    gen += -1j * h
    gen[:, 0, 0] += -0.5 * params.gamma_e
    gen[:, 1, 1] += -0.5 * params.gamma_g
    gen[:, 1, 0] += np.sqrt(params.gamma_e) * r * np.exp(-1j * params.theta)
    alpha = 0.5 * (gen[:, 0, 0] + gen[:, 1, 1])
    b = gen - alpha[:, None, None] * np.eye(2)
    mu2 = b[:, 0, 0] ** 2 + b[:, 0, 1] * b[:, 1, 0]
    mu = np.sqrt(mu2.astype(complex))
    dt = params.dt
    small = np.abs(mu) * dt < 1e-6
    ratio = np.where(
        small,
        dt * (1.0 + mu2 * dt * dt / 6.0),
        np.sinh(np.where(small, 1.0, mu) * dt) / np.where(small, 1.0, mu),
    )
    return np.exp(alpha * dt)[:, None, None] * (
        np.cosh(mu * dt)[:, None, None] * np.eye(2) + ratio[:, None, None] * b
    )


def _rho2_from_bloch(q: np.ndarray) -> np.ndarray:
    rho = np.empty(q.shape[:-1] + (2, 2), dtype=complex)
    rho[..., 0, 0] = 0.5 * (1.0 + q[..., 2])
    rho[..., 1, 1] = 0.5 * (1.0 - q[..., 2])
    rho[..., 0, 1] = 0.5 * (q[..., 0] - 1j * q[..., 1])
    rho[..., 1, 0] = rho[..., 0, 1].conj()
    return rho


def _bloch_from_rho2(rho: np.ndarray) -> np.ndarray:
    tr = (rho[..., 0, 0] + rho[..., 1, 1]).real
    return np.stack(
        [
            (rho[..., 0, 1] + rho[..., 1, 0]).real / tr,
            (1j * (rho[..., 0, 1] - rho[..., 1, 0])).real / tr,
            (rho[..., 0, 0] - rho[..., 1, 1]).real / tr,
        ],
        axis=-1,
    )


def _sde_block(q0, params, n_steps, axis, seed, indices, scheme, jumps, records_in=None, noise=None):
    """Lock-step Bloch-pipeline propagation of one block.

    Returns (paths, records, jump_step); paths (B, n+1, 3) with NaN after a
    jump, records (B, n) NaN on jump steps and afterwards.

    scheme="stratonovich" composes the exact normalized flow of the
    frozen-record generator over each interval (piecewise-constant-record
    a.k.a. Wong-Zakai construction, so the dt -> 0 limit is the
    Stratonovich solution) and therefore keeps pure states exactly on the
    unit sphere.  scheme="midpoint" is the explicit midpoint rule on the
    printed derivative, and scheme="ito" the Euler-Maruyama form; both are
    kept for convergence studies and both trip the norm guard if dt is too
    coarse for them.
    """
    n_traj = len(indices)
    if records_in is None and noise is None:
        normals = np.empty((n_traj, n_steps))
        uniforms = np.empty((n_traj, n_steps))
        for k, idx in enumerate(indices):
            rng = trajectory_rng(seed, idx)
            normals[k] = rng.standard_normal(n_steps)
            uniforms[k] = rng.random(n_steps)
    elif noise is not None:
        normals, uniforms = noise
    else:
        normals = uniforms = None

    dt = params.dt
    ct, st = np.cos(params.theta), np.sin(params.theta)
    ge = np.sqrt(params.gamma_e)
    q = np.broadcast_to(np.asarray(q0, dtype=float), (n_traj, 3)).copy()
    alive = np.ones(n_traj, dtype=bool)
    jump_step = np.full(n_traj, n_steps + 1, dtype=int)
    paths = np.full((n_traj, n_steps + 1, 3), np.nan)
    records = np.full((n_traj, n_steps), np.nan)
    paths[:, 0] = q

    for step in range(n_steps):
        if jumps:
            p_jump = np.where(alive, params.gamma_g * dt * 0.5 * (1.0 - q[:, 2]), 0.0)
            jump_now = uniforms[:, step] < p_jump
            jump_step[jump_now] = step
            alive &= ~jump_now
        if records_in is None:
            mean_r = ge * (q[:, 0] * ct - q[:, 1] * st)
            r = mean_r + normals[:, step] * (1.0 / np.sqrt(dt))
        else:
            r = records_in[:, step]
        if scheme == "stratonovich":
            prop = _frozen_record_propagators(r, params, axis)
            rho = prop @ _rho2_from_bloch(q) @ prop.conj().transpose(0, 2, 1)
            q_new = _bloch_from_rho2(rho)
        elif scheme == "midpoint":
            q_mid = q + 0.5 * dt * bloch_step_stratonovich(q, r, params, axis)
            q_new = q + dt * bloch_step_stratonovich(q_mid, r, params, axis)
        elif scheme == "ito":
            dw = (r - ge * (q[:, 0] * ct - q[:, 1] * st)) * dt
            q_new = q + bloch_step_ito(q, dw, params, axis)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        q = np.where(alive[:, None], q_new, q)
        limit = NORM_LIMIT if scheme == "stratonovich" else DIAGNOSTIC_NORM_LIMIT
        norms = np.linalg.norm(q[alive], axis=-1) if alive.any() else np.zeros(0)
        if norms.size and norms.max() > limit:
            raise BlochNormError(
                f"|q| reached {norms.max():.6f} > {limit} at step {step} "
                f"({scheme}); reduce dt below {dt}"
            )
        records[:, step] = np.where(alive, r, np.nan)
        paths[:, step + 1] = np.where(alive[:, None], q, np.nan)
    return paths, records, jump_step


def simulate_bloch_trajectory(
    q0,
    params: SystemParams,
    t_final: float,
    axis: str = "x",
    seed: int = 0,
    scheme: str = "stratonovich",
    jumps: bool = False,
    records=None,
    noise=None,
) -> TrajectoryRecord:
    """One Bloch-pipeline trajectory.

    Pass `records` to replay a given readout stream, or `noise` as
    (normals, uniforms) row vectors to drive the run with externally drawn
    standard noise (shared-noise convergence studies).
    """
    n_steps = _steps_for(t_final, params.dt)
    records_in = None if records is None else np.asarray(records)[None, :]
    paths, recs, jump_step = _sde_block(
        q0, params, n_steps, axis, seed, [0], scheme, jumps, records_in, noise
    )
    jumped = jump_step[0] <= n_steps
    return TrajectoryRecord(
        times=np.arange(n_steps + 1) * params.dt,
        rhos=None,
        bloch=paths[0],
        records=recs[0],
        jump_time=float((jump_step[0] + 1) * params.dt) if jumped else None,
        survived=not jumped,
    )


def _sde_block_worker(args):
    return _sde_block(*args)


def simulate_bloch_ensemble(
    n: int,
    q0,
    params: SystemParams,
    t_final: float,
    axis: str = "x",
    seed: int = 0,
    scheme: str = "stratonovich",
    jumps: bool = False,
    workers: int = 1,
    store_paths: bool = False,
) -> EnsembleStats:
    """Bloch-pipeline ensemble; population stats are survivor-conditioned.

    Without jumps every trajectory survives and pf_mean is the plain mean of
    (1 + z)/2.  With jumps the unconditioned populations treat terminated
    trajectories as P_g = 1.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    n_steps = _steps_for(t_final, params.dt)
    blocks = [list(range(b, min(b + BLOCK_SIZE, n))) for b in range(0, n, BLOCK_SIZE)]
    results = _map_blocks(
        _sde_block_worker,
        [(q0, params, n_steps, axis, seed, idx, scheme, jumps, None) for idx in blocks],
        workers,
    )
    pops_blocks = []
    for paths, records, jump_step in results:
        pf = 0.5 * (1.0 + paths[:, :, 2])
        pe = 0.5 * (1.0 - paths[:, :, 2])
        dead = np.isnan(paths[:, :, 2])
        pops = np.stack(
            [np.where(dead, 0.0, pf), np.where(dead, 0.0, pe), np.where(dead, 1.0, 0.0)],
            axis=-1,
        )
        pops_blocks.append((pops, paths, records, jump_step))
    return _reduce_blocks(pops_blocks, n, n_steps, params.dt, store_paths)


def postselect(records, mode: str = "no-jump", q_f=None, tolerance: float = 0.05):
    """Filter a sequence of TrajectoryRecord.

    mode="no-jump" keeps survivors; mode="final-state" keeps trajectories
    whose terminal Bloch vector lies within Euclidean `tolerance` of q_f
    (0 < tolerance < 1).  Raises EmptySelectionError when nothing survives
    the filter.
    """
    records = list(records)
    if mode == "no-jump":
        kept = [rec for rec in records if rec.survived]
    elif mode == "final-state":
        if q_f is None:
            raise ValueError("final-state mode needs a target q_f")
        if not 0.0 < tolerance < 1.0:
            raise ValueError("tolerance must lie in (0, 1)")
        q_f = np.asarray(q_f, dtype=float)
        kept = [
            rec
            for rec in records
            if rec.survived and np.linalg.norm(rec.bloch[-1] - q_f) < tolerance
        ]
    else:
        raise ValueError(f"unknown post-selection mode {mode!r}")
    if not kept:
        raise EmptySelectionError(
            f"post-selection ({mode}) kept none of {len(records)} trajectories"
        )
    return kept


def final_state_mask(paths: np.ndarray, q_f, tolerance: float) -> np.ndarray:
    """Vectorized final-state filter over an ensemble path array (n, steps, 3)."""
    finals = paths[:, -1, :]
    dist = np.linalg.norm(finals - np.asarray(q_f, dtype=float), axis=1)
    return ~np.isnan(dist) & (dist < tolerance)
