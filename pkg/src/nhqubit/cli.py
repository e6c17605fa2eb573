"""Batch front-end: run configurations in, reproducible data artifacts out.

Subcommands map to the experiment families: `spectrum` (Liouvillian
eigenvalue scan + exceptional-point search), `ensemble` (hybrid-detection
trajectory ensemble), `compare` (trajectory vs Liouvillian normalized |f>
population for both drive axes), `sde` (Bloch-pipeline runs with
per-trajectory output), `optimal-path` (boundary-value shooting, optionally
against a post-selected ensemble mean), `phase-portrait` (reduced 1-D
contours + fixed points) and `povm-check` (measurement-operator
completeness residuals).

Option precedence is command line > config file > defaults.  Every run
writes `manifest.json`; replaying it (``--config manifest.json``) with any
worker count reproduces the CSV artifacts byte for byte.  Exit codes:
0 success, 2 configuration error, 3 empty post-selection, 4 solver
no-convergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import parse_config_text, write_csv, write_json, write_manifest
from .core import (
    SystemParams,
    density_from_amplitudes,
    hybrid_completeness_residual,
    photon_counting_completeness_residual,
)
from .liouvillian import (
    evolve_ode,
    find_ep,
    lindblad3_superoperator,
    liouvillian_matrix,
    normalized_f_population,
    spectrum_scan,
)
from .optimal_path import NoConvergenceError, find_fixed_points, phase_portrait, shoot
from .trajectory import (
    EmptySelectionError,
    final_state_mask,
    simulate_bloch_ensemble,
    simulate_ensemble,
)


class ConfigError(ValueError):
    """A run configuration failed schema validation."""


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_vec3(text):
    if isinstance(text, (list, tuple, np.ndarray)):
        vec = [float(v) for v in text]
    else:
        vec = [float(part) for part in str(text).split(",")]
    if len(vec) != 3:
        raise ValueError(f"expected three comma-separated numbers, got {text!r}")
    return vec


def _parse_floats(text):
    if isinstance(text, (list, tuple, np.ndarray)):
        return [float(v) for v in text]
    return [float(part) for part in str(text).split(",") if part.strip()]


#: field -> (parser, default); the single source of truth for RunConfig
CONFIG_SCHEMA = {
    "experiment": (str, None),
    "gamma_e": (float, 0.2),
    "gamma_g": (float, 1.0),
    "omega": (float, 2.0),
    "theta": (float, 0.0),
    "dt": (float, 0.01),
    "axis": (str, "x"),
    "n": (int, 1000),
    "T": (float, 3.0),
    "seed": (int, 0),
    "postselect": (str, "none"),
    "qf": (_parse_vec3, [0.0, -1.0, 0.0]),
    "qi": (_parse_vec3, [0.0, 0.0, 1.0]),
    "final_tol": (float, 0.05),
    "pipeline": (str, "hybrid"),
    "scheme": (str, "stratonovich"),
    "workers": (int, 1),
    "out": (str, "out"),
    "plot": (_parse_bool, False),
    "omega_min": (float, 0.05),
    "omega_max": (float, 3.0),
    "n_scan": (int, 400),
    "energies": (_parse_floats, []),
    "starts": (int, 64),
    "save_trajectories": (int, 5),
}

_CHOICES = {
    "experiment": {
        "spectrum",
        "ensemble",
        "compare",
        "sde",
        "optimal-path",
        "phase-portrait",
        "povm-check",
    },
    "axis": {"x", "y"},
    "postselect": {"none", "no-jump", "final"},
    "pipeline": {"hybrid", "bloch"},
    "scheme": {"stratonovich", "midpoint", "ito"},
}


def build_config(overrides: dict, file_values: dict | None = None) -> dict:
    """Merge defaults, config-file values and CLI overrides into a RunConfig."""
    config = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    for source_name, source in (("config file", file_values or {}), ("option", overrides)):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown {source_name} field {key!r}")
            parser, _ = CONFIG_SCHEMA[key]
            try:
                config[key] = parser(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"field {key!r}: {exc}") from exc
    for key, choices in _CHOICES.items():
        if config[key] is not None and config[key] not in choices:
            raise ConfigError(
                f"field {key!r}: {config[key]!r} not one of {sorted(choices)}"
            )
    if config["experiment"] is None:
        raise ConfigError("field 'experiment': missing")
    try:
        _params_from(config)
    except ValueError as exc:
        raise ConfigError(f"system parameters: {exc}") from exc
    return config


def _params_from(config) -> SystemParams:
    return SystemParams(
        gamma_e=config["gamma_e"],
        gamma_g=config["gamma_g"],
        omega=config["omega"],
        theta=config["theta"],
        dt=config["dt"],
    )


def run(config: dict) -> Path:
    """Execute one experiment; returns the output directory."""
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", config, __version__)
    {
        "spectrum": _run_spectrum,
        "ensemble": _run_ensemble,
        "compare": _run_compare,
        "sde": _run_sde,
        "optimal-path": _run_optimal_path,
        "phase-portrait": _run_phase_portrait,
        "povm-check": _run_povm_check,
    }[config["experiment"]](config, out)
    if config["plot"]:
        from . import plots

        plots.render(config["experiment"], out)
    return out


def _run_spectrum(config, out):
    omegas = np.linspace(config["omega_min"], config["omega_max"], config["n_scan"])
    scan = spectrum_scan(
        config["gamma_e"], config["gamma_g"], omegas, config["axis"], dt=config["dt"]
    )
    ev = scan["eigenvalues"]
    write_csv(
        out / "spectrum.csv",
        ["omega"]
        + [f"re_l{k}" for k in range(1, 5)]
        + [f"im_l{k}" for k in range(1, 5)]
        + ["gap", "overlap"],
        [scan["omega"]]
        + [ev[:, k].real for k in range(4)]
        + [ev[:, k].imag for k in range(4)]
        + [scan["gap"], scan["overlap"]],
    )
    ep = find_ep(
        config["gamma_e"],
        config["gamma_g"],
        (config["omega_min"], config["omega_max"]),
        config["axis"],
        n_scan=config["n_scan"],
        dt=config["dt"],
    )
    write_json(out / "exceptional_point.json", ep)


def _run_ensemble(config, out):
    params = _params_from(config)
    rho0 = density_from_amplitudes(0, 0, 1)
    stats = simulate_ensemble(
        config["n"],
        rho0,
        params,
        config["T"],
        config["axis"],
        seed=config["seed"],
        workers=config["workers"],
    )
    _write_ensemble_csv(out / "ensemble.csv", stats)


def _write_ensemble_csv(path, stats):
    write_csv(
        path,
        [
            "t",
            "Pf_mean",
            "Pf_se",
            "Pe_mean",
            "Pe_se",
            "Pg_mean",
            "Pg_se",
            "Pf_norm",
            "n_survived",
        ],
        [
            stats.times,
            stats.pf_mean,
            stats.pf_se,
            stats.pe_mean,
            stats.pe_se,
            stats.pg_mean,
            stats.pg_se,
            stats.pf_norm,
            stats.n_survived,
        ],
    )


def _run_compare(config, out):
    params = _params_from(config)
    columns = None
    for axis in ("x", "y"):
        if config["pipeline"] == "hybrid":
            stats = simulate_ensemble(
                config["n"],
                density_from_amplitudes(0, 0, 1),
                params,
                config["T"],
                axis,
                seed=config["seed"],
                workers=config["workers"],
            )
        else:
            stats = simulate_bloch_ensemble(
                config["n"],
                [0.0, 0.0, 1.0],
                params,
                config["T"],
                axis,
                seed=config["seed"],
                scheme=config["scheme"],
                workers=config["workers"],
            )
        reference = evolve_ode(
            liouvillian_matrix(params, axis),
            np.diag([1.0, 0.0]).astype(complex),
            stats.times,
        )
        pf_liou = normalized_f_population(reference)
        if columns is None:
            columns = {"t": stats.times}
        columns[f"pf_liou_{axis}"] = pf_liou
        columns[f"pf_traj_{axis}"] = stats.pf_norm
        columns[f"pf_se_{axis}"] = stats.pf_se
        columns[f"n_survived_{axis}"] = stats.n_survived
    write_csv(out / "compare.csv", list(columns), list(columns.values()))


def _run_sde(config, out):
    params = _params_from(config)
    jumps = config["postselect"] == "no-jump"
    stats = simulate_bloch_ensemble(
        config["n"],
        config["qi"],
        params,
        config["T"],
        config["axis"],
        seed=config["seed"],
        scheme=config["scheme"],
        jumps=jumps,
        workers=config["workers"],
        store_paths=config["postselect"] == "final",
    )
    _write_ensemble_csv(out / "ensemble.csv", stats)
    if config["postselect"] == "final":
        mask = final_state_mask(stats.bloch, config["qf"], config["final_tol"])
        if not mask.any():
            raise EmptySelectionError(
                f"no trajectory ended within {config['final_tol']} of {config['qf']}"
            )
        mean = stats.bloch[mask].mean(axis=0)
        write_csv(
            out / "postselected_mean.csv",
            ["t", "x_mean", "y_mean", "z_mean", "n_selected"],
            [
                stats.times,
                mean[:, 0],
                mean[:, 1],
                mean[:, 2],
                np.full(len(stats.times), int(mask.sum())),
            ],
        )
    for k in range(min(config["save_trajectories"], config["n"])):
        rec = _bloch_member(config, params, jumps, k)
        write_csv(
            out / f"trajectory_{k:03d}.csv",
            ["t", "x", "y", "z", "r", "jumped"],
            [
                rec.times,
                rec.bloch[:, 0],
                rec.bloch[:, 1],
                rec.bloch[:, 2],
                np.append(rec.records, np.nan),
                np.isnan(rec.bloch[:, 2]).astype(int),
            ],
        )


def _bloch_member(config, params, jumps, index):
    from .trajectory import TrajectoryRecord, _sde_block, _steps_for

    n_steps = _steps_for(config["T"], params.dt)
    paths, recs, jump_step = _sde_block(
        config["qi"],
        params,
        n_steps,
        config["axis"],
        config["seed"],
        [index],
        config["scheme"],
        jumps,
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


def _run_optimal_path(config, out):
    params = _params_from(config)
    solution = shoot(
        config["qi"],
        config["qf"],
        config["T"],
        params,
        config["axis"],
        starts=config["starts"],
        seed=config["seed"],
    )
    energies = np.full(len(solution.times), solution.energy)
    write_csv(
        out / "path.csv",
        ["t", "x", "y", "z", "px", "py", "pz", "r", "H", "S_cumulative"],
        [
            solution.times,
            solution.q[:, 0],
            solution.q[:, 1],
            solution.q[:, 2],
            solution.p[:, 0],
            solution.p[:, 1],
            solution.p[:, 2],
            solution.r,
            energies,
            solution.action_cumulative,
        ],
    )
    summary = {
        "endpoint_residual": solution.endpoint_residual,
        "energy": solution.energy,
        "energy_drift": solution.energy_drift,
        "action": solution.action,
    }
    if config["postselect"] == "final":
        stats = simulate_bloch_ensemble(
            config["n"],
            config["qi"],
            params,
            config["T"],
            config["axis"],
            seed=config["seed"],
            workers=config["workers"],
            store_paths=True,
        )
        mask = final_state_mask(stats.bloch, config["qf"], config["final_tol"])
        if not mask.any():
            raise EmptySelectionError(
                f"no trajectory ended within {config['final_tol']} of {config['qf']}"
            )
        mean = stats.bloch[mask].mean(axis=0)
        write_csv(
            out / "postselected_mean.csv",
            ["t", "x_mean", "y_mean", "z_mean", "n_selected"],
            [
                stats.times,
                mean[:, 0],
                mean[:, 1],
                mean[:, 2],
                np.full(len(stats.times), int(mask.sum())),
            ],
        )
        stride = max(1, (len(solution.times) - 1) // (len(stats.times) - 1))
        on_grid = solution.q[::stride]
        summary["rms_to_postselected_mean"] = float(
            np.sqrt(np.mean(np.sum((on_grid - mean) ** 2, axis=1)))
        )
        summary["n_selected"] = int(mask.sum())
    write_json(out / "summary.json", summary)


def _run_phase_portrait(config, out):
    params = _params_from(config)
    fixed_points = find_fixed_points(params)
    write_json(out / "fixed_points.json", fixed_points)
    energies = config["energies"]
    if not energies:
        saddle_e = [
            fp["energy"] for fp in fixed_points if fp["classification"] == "saddle"
        ]
        base = saddle_e[0] if saddle_e else 0.0
        energies = sorted({base + offset for offset in (-6.0, -3.0, 0.0, 3.0, 6.0)})
    contours = phase_portrait(energies, params)
    theta_col, p1_col, p2_col, e_col = [], [], [], []
    for contour in contours:
        theta_col.append(contour["theta_b"])
        p1_col.append(contour["p_plus"])
        p2_col.append(contour["p_minus"])
        e_col.append(np.full(len(contour["theta_b"]), contour["energy"]))
    write_csv(
        out / "portrait.csv",
        ["theta_b", "p_branch1", "p_branch2", "E"],
        [
            np.concatenate(theta_col),
            np.concatenate(p1_col),
            np.concatenate(p2_col),
            np.concatenate(e_col),
        ],
    )


def _run_povm_check(config, out):
    params = _params_from(config)
    counting = photon_counting_completeness_residual(params)
    hybrid = hybrid_completeness_residual(params)
    write_csv(
        out / "povm.csv",
        ["scheme", "residual"],
        [np.array([0, 1]), np.array([counting, hybrid])],
    )
    print(
        f"povm-check: photon-counting residual {counting:.3e}, "
        f"hybrid residual {hybrid:.3e} (dt = {params.dt})"
    )


def _add_common(parser):
    parser.add_argument("--config", help="flat key=value file or manifest JSON")
    parser.add_argument("--gamma-e", dest="gamma_e", type=float)
    parser.add_argument("--gamma-g", dest="gamma_g", type=float)
    parser.add_argument("--omega", type=float)
    parser.add_argument("--theta", type=float)
    parser.add_argument("--axis", choices=("x", "y"))
    parser.add_argument("--dt", type=float)
    parser.add_argument("--T", dest="T", type=float)
    parser.add_argument("--n", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--postselect", choices=("none", "no-jump", "final"))
    parser.add_argument("--qf", help="target Bloch vector as x,y,z")
    parser.add_argument("--qi", help="initial Bloch vector as x,y,z")
    parser.add_argument(
        "--lambda", dest="final_tol", type=float, help="final-state tolerance"
    )
    parser.add_argument("--pipeline", choices=("hybrid", "bloch"))
    parser.add_argument("--scheme", choices=("stratonovich", "midpoint", "ito"))
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out")
    parser.add_argument("--plot", action="store_const", const=True, default=None)
    parser.add_argument("--omega-min", dest="omega_min", type=float)
    parser.add_argument("--omega-max", dest="omega_max", type=float)
    parser.add_argument("--n-scan", dest="n_scan", type=int)
    parser.add_argument("--energies", help="comma-separated contour energies")
    parser.add_argument("--starts", type=int)
    parser.add_argument(
        "--save-trajectories", dest="save_trajectories", type=int
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nhqubit",
        description="post-selected non-Hermitian qubit simulations",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="experiment", required=True)
    for name in sorted(_CHOICES["experiment"]):
        _add_common(subparsers.add_parser(name))
    args = parser.parse_args(argv)

    overrides = {
        key: value
        for key, value in vars(args).items()
        if key in CONFIG_SCHEMA and value is not None
    }
    try:
        file_values = None
        if args.config:
            file_values = parse_config_text(Path(args.config).read_text())
        config = build_config(overrides, file_values)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        out = run(config)
    except EmptySelectionError as exc:
        print(f"empty post-selection: {exc}", file=sys.stderr)
        return 3
    except NoConvergenceError as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return 4
    print(f"wrote artifacts to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
