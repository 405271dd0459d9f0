"""Command-line entry points and run orchestration.

Subcommands: dispersion, basis, critical, neutral-curve, slip-sweep,
evolve, ensemble, diagnose, export-field. Runs are driven by a YAML/JSON
config file (--config) merged with command-line overrides; every run
writes its resolved config next to its outputs and stamps every file with
the config hash and basis checksum. Exit codes: 0 success, 2 usage or
config error, 3 numeric failure, 4 partial ensemble.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__, diagnostics, reports
from .basis import (BasisSelection, BasisSet, Cell, DispersionError,
                    FlowConfig, build_basis, dispersion_roots, poiseuille)
from .evolution import (Checkpoint, InitialSpec, PartialEnsembleWarning,
                        TrajectoryAbort, default_excited_indices,
                        default_time_step, ensemble_run, evolve,
                        evolve_from_checkpoint, sample_initial)
from .operators import CouplingTensor, LinearOperator, assemble_linear, assemble_tensor
from .projection import gram_matrix
from .stability import (BracketError, critical_search, critical_state_frames,
                        max_growth, neutral_curve, slip_sweep)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "flow": {"reynolds": 10000.0, "slip_length": 0.0},
    "cell": {"delta_m": 1.0203, "delta_k": 1.0203},
    "basis": {
        "octaves": 3,
        "include_3d": False,
        "lattice": None,            # explicit [[i_m, i_k], ...] overrides octaves
        "lattice_extra": [],        # extra lattice points, e.g. 3D pairs
        "roots_1d": 48,
        "roots_2d": 6,
        "roots_3d": 2,
        "onedim_branches": ["x", "y"],
    },
    "search": {
        "m_window": [1.00, 1.04],
        "re_bracket": [4000.0, 8000.0],
        "n_roots": 64,
        "dm_coarse": 1e-3,
        "re_tol": 0.01,
        "k": 0.0,
        "convention": "variable",
        "extrapolate": True,
    },
    "evolution": {
        "dt": None,                 # None -> default_time_step bound
        "t_end": 100.0,
        "cadence": 10,
        "k_trajectories": 4,
        "epsilon_sq": 0.04,
        "seed": 0,
        "checkpoint_every": None,
        "excited": "2d-antisym",    # or explicit list of basis indices
        "base_amplitude": 1.0,
        "octave_filter": False,
    },
    "output": {"directory": "out", "format": "csv", "figures": True},
}


def _deep_update(base: dict, extra: dict) -> dict:
    for key, val in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            _deep_update(base[key], val)
        else:
            base[key] = val
    return base


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        _deep_update(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        cfg[section][key] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    flow = cfg["flow"]
    if not flow["reynolds"] > 0:
        raise ConfigError("flow.reynolds must be positive")
    if flow["slip_length"] < 0:
        raise ConfigError("flow.slip_length must be >= 0")
    for key in ("delta_m", "delta_k"):
        if not cfg["cell"][key] > 0:
            raise ConfigError(f"cell.{key} must be positive")
    b = cfg["basis"]
    for key in ("roots_1d", "roots_2d", "roots_3d"):
        if b[key] < 0:
            raise ConfigError(f"basis.{key} must be >= 0")
    for br in b["onedim_branches"]:
        if br not in ("x", "y"):
            raise ConfigError("basis.onedim_branches entries must be 'x' or 'y'")
    ev = cfg["evolution"]
    if ev["dt"] is not None and not ev["dt"] > 0:
        raise ConfigError("evolution.dt must be positive")
    if ev["epsilon_sq"] <= 0:
        raise ConfigError("evolution.epsilon_sq must be positive")
    if ev["k_trajectories"] < 1:
        raise ConfigError("evolution.k_trajectories must be >= 1")
    if cfg["search"]["convention"] not in ("variable", "constant"):
        raise ConfigError("search.convention must be 'variable' or 'constant'")
    if cfg["output"]["format"] not in ("csv", "json"):
        raise ConfigError("output.format must be 'csv' or 'json'")


def config_hash(cfg: dict) -> str:
    """Hash of the physics-determining sections (output routing excluded)."""
    physics = {k: v for k, v in cfg.items() if k != "output"}
    payload = json.dumps(physics, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def selection_from_config(cfg: dict) -> BasisSelection:
    b = cfg["basis"]
    if b["lattice"]:
        lattice = tuple((int(i), int(j)) for i, j in b["lattice"])
    else:
        octs = [2 ** i for i in range(int(b["octaves"]))]
        pts = [(0, 0)] + [(o, 0) for o in octs] + [(0, o) for o in octs]
        if b["include_3d"]:
            pts += [(a, c) for a in octs for c in octs]
        lattice = tuple(pts)
    lattice = tuple(sorted(set(lattice)
                           | {(int(i), int(j)) for i, j in b["lattice_extra"]}))
    return BasisSelection(lattice=lattice, roots_1d=int(b["roots_1d"]),
                          roots_2d=int(b["roots_2d"]), roots_3d=int(b["roots_3d"]),
                          onedim_branches=tuple(b["onedim_branches"]))


def flow_from_config(cfg: dict) -> tuple[FlowConfig, Cell]:
    return (FlowConfig(reynolds=float(cfg["flow"]["reynolds"]),
                       slip_length=float(cfg["flow"]["slip_length"])),
            Cell(delta_m=float(cfg["cell"]["delta_m"]),
                 delta_k=float(cfg["cell"]["delta_k"])))


def prepare_outdir(cfg: dict, out_override: str | None) -> tuple[Path, str]:
    outdir = Path(out_override or cfg["output"]["directory"])
    outdir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    with open(outdir / "config.resolved.json", "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    return outdir, chash


def build_operators(basis: BasisSet, fcfg: FlowConfig, cache_dir: Path | None,
                    base_amplitude: float = 1.0,
                    octave_filter: bool = False) -> tuple[LinearOperator, CouplingTensor]:
    """Assemble L and N, reusing a disk cache keyed by (basis, Re, l_s)."""
    tag = None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        tag = (f"{basis.checksum[:16]}_re{fcfg.reynolds:g}_ls{fcfg.slip_length:g}"
               f"_a{base_amplitude:g}_f{int(octave_filter)}")
        lpath = cache_dir / f"L_{tag}.npz"
        tpath = cache_dir / f"T_{tag}.npz"
        if lpath.exists() and tpath.exists():
            linop = LinearOperator.load_npz(lpath)
            tensor = CouplingTensor.load_npz(tpath)
            if (linop.basis_checksum == basis.checksum
                    and tensor.basis_checksum == basis.checksum):
                return linop, tensor
    linop = assemble_linear(basis, fcfg, base_amplitude=base_amplitude)
    tensor = assemble_tensor(basis, octave_filter=octave_filter)
    if tag is not None:
        linop.save_npz(cache_dir / f"L_{tag}.npz")
        tensor.save_npz(cache_dir / f"T_{tag}.npz")
    return linop, tensor


def _series_writer(fmt: str):
    def write(path_base: Path, columns: dict, meta: dict):
        if fmt == "json":
            reports.write_json(path_base.with_suffix(".json"),
                               {"series": {k: np.asarray(v).tolist()
                                           for k, v in columns.items()}}, meta)
        else:
            reports.write_csv(path_base.with_suffix(".csv"), columns, meta)
    return write


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_FAMILIES = {"1d-antisym": (0, 0), "1d-sym": (1, 0),
             "2d-antisym": (0, 1), "2d-sym": (1, 1),
             "3d-antisym": (0, 1), "3d-sym": (1, 1)}


def cmd_dispersion(args, cfg) -> int:
    if args.family not in _FAMILIES:
        print(f"error: unknown family {args.family!r}; choose from "
              f"{sorted(_FAMILIES)}", file=sys.stderr)
        return EXIT_USAGE
    s, d = _FAMILIES[args.family]
    m = args.m if d else 0.0
    k = args.k if d else 0.0
    if d and (m <= 0 and k <= 0):
        print("error: 2D/3D families need --m and/or --k > 0", file=sys.stderr)
        return EXIT_USAGE
    outdir, chash = prepare_outdir(cfg, args.out)
    re = float(cfg["flow"]["reynolds"])
    mus = dispersion_roots(s, d, m, k, args.ls, args.n)
    from .basis import dispersion_residual
    nu = float(np.hypot(m, k))
    rows = {
        "m": np.full(args.n, m), "k": np.full(args.n, k),
        "n": np.arange(1, args.n + 1, dtype=float), "mu": mus,
        "lambda": (mus ** 2 + nu ** 2) / re,
        "residual": np.asarray([dispersion_residual(s, d, mu, nu, args.ls)
                                for mu in mus]),
    }
    meta = reports.meta_header(chash, extra={"family": args.family,
                                             "slip_length": args.ls,
                                             "reynolds": re})
    _series_writer(cfg["output"]["format"])(outdir / "dispersion", rows, meta)
    if cfg["output"]["figures"]:
        reports.line_figure(outdir / "dispersion.png", rows["n"],
                            {"mu": rows["mu"]}, "root ordinal n", "mu",
                            title=f"{args.family} dispersion roots")
    print(f"wrote {args.n} roots of {args.family} to {outdir}")
    return EXIT_OK


def cmd_basis(args, cfg) -> int:
    outdir, chash = prepare_outdir(cfg, args.out)
    fcfg, cell = flow_from_config(cfg)
    basis = build_basis(fcfg, cell, selection_from_config(cfg))
    report = gram_matrix(basis)
    basis.save(outdir / "basis.json")
    print(f"built {len(basis)} modes; gram max offdiag {report.max_offdiag:.2e}; "
          f"saved to {outdir / 'basis.json'}")
    if not report.orthonormal:
        print("warning: gram audit failed; projection falls back to the "
              "mass-matrix path", file=sys.stderr)
    return EXIT_OK


def cmd_critical(args, cfg) -> int:
    outdir, chash = prepare_outdir(cfg, args.out)
    s = cfg["search"]
    state = critical_search(
        ls=float(cfg["flow"]["slip_length"]),
        m_window=tuple(s["m_window"]), re_bracket=tuple(s["re_bracket"]),
        n_roots=int(s["n_roots"]), dm_coarse=float(s["dm_coarse"]),
        re_tol=float(s["re_tol"]), k=float(s["k"]),
        convention=s["convention"], extrapolate=bool(s["extrapolate"]))
    meta = reports.meta_header(chash)
    reports.write_json(outdir / "critical.json", {"critical": state.to_json_dict()},
                       meta)
    print(f"Re_c = {state.re_c:.2f}  m_c = {state.m_c:.5f}  "
          f"Imag(sigma) = {state.imag_sigma:.4f}  period = {state.period:.2f}")
    if cfg["output"]["figures"]:
        md = state.metadata
        reports.line_figure(outdir / "critical_scan.png",
                            np.asarray(md["coarse_m"]),
                            {"Re*": np.asarray(md["coarse_re"])},
                            "wavevector m", "neutral Reynolds number",
                            title=f"minimum {state.re_c:.1f} at m = {state.m_c:.4f}")
    if args.frames:
        framedir = outdir / "frames"
        framedir.mkdir(exist_ok=True)
        frames = critical_state_frames(state, nx=args.grid[0], nz=args.grid[1],
                                       n_frames=args.frames)
        for i, fr in enumerate(frames):
            X, Z = np.meshgrid(fr["x"], fr["z"], indexing="ij")
            reports.write_csv(framedir / f"frame_{i:03d}.csv",
                              {"x": X.ravel(), "z": Z.ravel(),
                               "u_x": fr["u_x"].ravel(), "u_z": fr["u_z"].ravel(),
                               "vorticity": fr["vorticity"].ravel()},
                              reports.meta_header(chash, extra={"t": fr["t"]}))
            if cfg["output"]["figures"]:
                reports.frame_figure(framedir / f"frame_{i:03d}.png", fr)
        print(f"wrote {len(frames)} frames over one period {state.period:.2f}")
    return EXIT_OK


def cmd_neutral_curve(args, cfg) -> int:
    outdir, chash = prepare_outdir(cfg, args.out)
    ks = [float(v) for v in args.k_values.split(",")]
    s = cfg["search"]
    rows = neutral_curve(ks, ls=float(cfg["flow"]["slip_length"]),
                         n_roots=int(args.n_roots or s["n_roots"]),
                         jobs=args.jobs)
    meta = reports.meta_header(chash)
    reports.write_csv(outdir / "neutral_curve.csv",
                      {"k": [r["k"] for r in rows],
                       "m_c": [r["m_c"] for r in rows],
                       "re_c": [r["re_c"] for r in rows]}, meta)
    if cfg["output"]["figures"]:
        reports.neutral_curve_figure(outdir / "neutral_curve.png", rows)
    print(f"neutral curve over {len(rows)} k values; minimum Re_c = "
          f"{min(r['re_c'] for r in rows):.1f}")
    return EXIT_OK


def cmd_slip_sweep(args, cfg) -> int:
    outdir, chash = prepare_outdir(cfg, args.out)
    ls_values = [float(v) for v in args.ls_values.split(",")]
    s = cfg["search"]
    rows = slip_sweep(ls_values, convention=s["convention"],
                      n_roots=int(args.n_roots or s["n_roots"]),
                      m_window=tuple(s["m_window"]),
                      re_bracket=tuple(s["re_bracket"]), jobs=args.jobs)
    meta = reports.meta_header(chash, extra={"convention": s["convention"]})
    reports.write_csv(outdir / "slip_sweep.csv",
                      {"ls": [r["ls"] for r in rows],
                       "re_c": [r["re_c"] for r in rows],
                       "m_c": [r["m_c"] for r in rows],
                       "imag_sigma": [r["imag_sigma"] for r in rows]}, meta)
    if cfg["output"]["figures"]:
        reports.slip_sweep_figure(outdir / "slip_sweep.png", rows)
    print(f"slip sweep over {len(rows)} points under the {s['convention']} "
          "flow-rate convention")
    return EXIT_OK


def _evolution_setup(cfg, outdir, cache_dir):
    fcfg, cell = flow_from_config(cfg)
    basis = build_basis(fcfg, cell, selection_from_config(cfg))
    basis.save(outdir / "basis.json")
    ev = cfg["evolution"]
    linop, tensor = build_operators(
        basis, fcfg, cache_dir, base_amplitude=float(ev["base_amplitude"]),
        octave_filter=bool(ev["octave_filter"]))
    dt = ev["dt"]
    if dt is None:
        dt = default_time_step(linop)
    return fcfg, basis, linop, tensor, float(dt)


def _write_diagnostic_bundle(outdir, times, C, basis, fcfg, linop, tensor,
                             cfg, chash, base_amplitude):
    meta = reports.meta_header(chash, basis.checksum)
    writer = _series_writer(cfg["output"]["format"])
    obs = diagnostics.trajectory_observables(times, C, basis, fcfg,
                                             base_amplitude)
    writer(outdir / "series", obs, meta)
    np.savez_compressed(outdir / "coefficients.npz", t=times, C=C,
                        basis_checksum=basis.checksum, config_hash=chash)
    led = diagnostics.energy_ledger(times, C, basis, fcfg, base_amplitude)
    writer(outdir / "ledger",
           {"t": led.times, "E_kin": led.e_kin, "dEdt": led.dedt,
            "W_p": led.w_p, "W_d": led.w_d, "residual": led.residual}, meta)
    force = diagnostics.force_accounting(times, C, basis, fcfg, linop, tensor,
                                         base_amplitude)
    writer(outdir / "force",
           {"t": force.times, "f_inertial": force.f_inertial,
            "f_boundary": force.f_boundary, "slope_top": force.slope_top,
            "slope_bottom": force.slope_bottom}, meta)
    reports.write_json(outdir / "force_summary.json",
                       {"window_averages": force.window_averages(),
                        "max_identity_gap": force.max_identity_gap(),
                        "f0": force.f0}, meta)
    z = np.linspace(-1.0, 1.0, 201)
    prof = diagnostics.counter_flow_profile(C[-1], basis, z)
    reports.write_csv(outdir / "counterflow.csv",
                      {"z": z, "v_x": prof["v_x"]},
                      {**meta, "slope_top": prof["slope_top"],
                       "slope_bottom": prof["slope_bottom"],
                       "t": times[-1]})
    if cfg["output"]["figures"]:
        figdir = outdir / "figures"
        figdir.mkdir(exist_ok=True)
        reports.line_figure(figdir / "flow_rate.png", obs["t"],
                            {"Q/Q_P": obs["Q_rel"]}, "t", "Q / Q_P")
        reports.line_figure(figdir / "energy.png", obs["t"],
                            {"E_kin": obs["E_kin"]}, "t", "kinetic energy")
        reports.line_figure(figdir / "ledger.png", led.times,
                            {"W_p": led.w_p, "W_d": led.w_d,
                             "dE/dt": led.dedt}, "t", "power")
        reports.line_figure(figdir / "force.png", force.times,
                            {"inertial": force.f_inertial,
                             "boundary": force.f_boundary}, "t",
                            "force / F0")
        reports.profile_figure(figdir / "counterflow.png", z,
                               {"v_x^c": prof["v_x"]},
                               title=f"counter flow at t = {times[-1]:.1f}")
        shares = {f: obs[f"share_{f}"] for f in diagnostics.FAMILY_NAMES}
        reports.line_figure(figdir / "family_shares.png", obs["t"], shares,
                            "t", "perturbation energy share")


def _resolve_excited(cfg, basis) -> InitialSpec:
    ev = cfg["evolution"]
    excited = ev["excited"]
    if excited in (None, "2d-antisym", "default"):
        idx = None
    elif isinstance(excited, (list, tuple)):
        idx = tuple(int(i) for i in excited)
    else:
        raise ConfigError("evolution.excited must be '2d-antisym' or an index list")
    return InitialSpec(epsilon_sq=float(ev["epsilon_sq"]),
                       seed=int(ev["seed"]), excited=idx)


def cmd_evolve(args, cfg) -> int:
    outdir, chash = prepare_outdir(cfg, args.out)
    cache = Path(args.cache) if args.cache else outdir / "cache"
    fcfg, basis, linop, tensor, dt = _evolution_setup(cfg, outdir, cache)
    ev = cfg["evolution"]
    cpdir = outdir / "checkpoints"
    cpdir.mkdir(exist_ok=True)
    if args.resume:
        cp = Checkpoint.load(args.resume)
        result = evolve_from_checkpoint(cp, linop, tensor,
                                        t_end=float(ev["t_end"]),
                                        cadence=int(ev["cadence"]),
                                        checkpoint_every=ev["checkpoint_every"],
                                        config_hash=chash)
    else:
        spec = _resolve_excited(cfg, basis)
        c0 = sample_initial(spec, basis)
        result = evolve(c0, linop, tensor, dt, float(ev["t_end"]),
                        cadence=int(ev["cadence"]),
                        checkpoint_every=ev["checkpoint_every"],
                        config_hash=chash, seed=spec.seed)
    for cp in result.checkpoints:
        cp.save(cpdir / f"cp_{cp.step:09d}.json")
    # final state is always restartable
    Checkpoint(step=result.state.step_count, t=result.state.t, dt=result.state.dt,
               c=result.state.c, seed=result.state.seed,
               config_hash=chash).save(cpdir / f"cp_{result.state.step_count:09d}.json")
    _write_diagnostic_bundle(outdir, result.times, result.coefficients, basis,
                             fcfg, linop, tensor, cfg, chash,
                             float(ev["base_amplitude"]))
    if result.aborted:
        print(f"trajectory aborted: {result.abort_reason}; checkpoint written",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"evolved to t = {result.state.t:g} ({result.state.step_count} steps, "
          f"dt = {dt:g}); outputs in {outdir}")
    return EXIT_OK


def cmd_ensemble(args, cfg) -> int:
    outdir, chash = prepare_outdir(cfg, args.out)
    cache = Path(args.cache) if args.cache else outdir / "cache"
    fcfg, basis, linop, tensor, dt = _evolution_setup(cfg, outdir, cache)
    ev = cfg["evolution"]
    spec = _resolve_excited(cfg, basis)
    K = int(args.k_traj or ev["k_trajectories"])
    with warnings.catch_warnings():
        warnings.simplefilter("always", PartialEnsembleWarning)
        result = ensemble_run(K, spec, basis, linop, tensor, dt,
                              float(ev["t_end"]), cadence=int(ev["cadence"]),
                              checkpoint_every=ev["checkpoint_every"],
                              config_hash=chash,
                              base_amplitude=float(ev["base_amplitude"]),
                              jobs=args.jobs)
    meta = reports.meta_header(chash, basis.checksum,
                               extra={"k_requested": K,
                                      "k_completed": result.completed})
    writer = _series_writer(cfg["output"]["format"])
    pois = poiseuille(fcfg, amplitude=float(ev["base_amplitude"]))
    writer(outdir / "ensemble_mean",
           {"t": result.times,
            "Q": result.mean["flow_rate"],
            "Q_rel": result.mean["flow_rate"] / pois.flow_rate,
            "E_kin": result.mean["kinetic_energy"],
            "c_norm": result.mean["coefficient_norm"]}, meta)
    for i, tr in enumerate(result.trajectories):
        tdir = outdir / f"traj_{i:02d}"
        tdir.mkdir(exist_ok=True)
        if tr.aborted:
            reports.write_json(tdir / "aborted.json",
                               {"reason": tr.abort_reason}, meta)
            continue
        _write_diagnostic_bundle(tdir, tr.times, tr.coefficients, basis, fcfg,
                                 linop, tensor, cfg, chash,
                                 float(ev["base_amplitude"]))
    if cfg["output"]["figures"]:
        reports.line_figure(outdir / "ensemble_flow_rate.png", result.times,
                            {"mean Q/Q_P": result.mean["flow_rate"] / pois.flow_rate},
                            "t", "Q / Q_P")
        reports.line_figure(outdir / "ensemble_energy.png", result.times,
                            {"mean E_kin": result.mean["kinetic_energy"]},
                            "t", "kinetic energy")
    print(f"ensemble of {result.completed}/{K} trajectories to t = "
          f"{result.times[-1]:g}; outputs in {outdir}")
    return EXIT_PARTIAL if result.partial else EXIT_OK


def cmd_diagnose(args, cfg) -> int:
    rundir = Path(args.run)
    data = np.load(rundir / "coefficients.npz")
    times, C = data["t"], data["C"]
    basis = BasisSet.load(rundir / "basis.json")
    with open(rundir / "config.resolved.json") as fh:
        run_cfg = json.load(fh)
    fcfg, _ = flow_from_config(run_cfg)
    chash = config_hash(run_cfg)
    cache = Path(args.cache) if args.cache else rundir / "cache"
    ev = run_cfg["evolution"]
    linop, tensor = build_operators(basis, fcfg, cache,
                                    base_amplitude=float(ev["base_amplitude"]),
                                    octave_filter=bool(ev["octave_filter"]))
    outdir = Path(args.out) if args.out else rundir
    outdir.mkdir(parents=True, exist_ok=True)
    _write_diagnostic_bundle(outdir, times, C, basis, fcfg, linop, tensor,
                             run_cfg, chash, float(ev["base_amplitude"]))
    led = diagnostics.energy_ledger(times, C, basis, fcfg,
                                    float(ev["base_amplitude"]))
    print(f"diagnostics for {rundir}: ledger residual "
          f"{led.max_relative_residual():.2e}, integrated mismatch "
          f"{led.integrated_mismatch():.2e}")
    return EXIT_OK


def cmd_export_field(args, cfg) -> int:
    outdir, chash = prepare_outdir(cfg, args.out)
    basis = BasisSet.load(args.basis)
    cp = Checkpoint.load(args.checkpoint)
    fcfg = basis.cfg
    pois = None if args.no_base else poiseuille(fcfg)
    cell = basis.cell
    x = np.linspace(-cell.half_length, cell.half_length, args.nx)
    y = np.linspace(-cell.half_width, cell.half_width, args.ny)
    z = np.linspace(-1.0, 1.0, args.nz)
    grid = diagnostics.field_grid_export(cp.c, basis, x, y, z, pois=pois,
                                         include_pressure=args.pressure)
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    cols = {"x": X.ravel(), "y": Y.ravel(), "z": Z.ravel(),
            "u_x": grid["u"][0].ravel(), "u_y": grid["u"][1].ravel(),
            "u_z": grid["u"][2].ravel(), "omega_y": grid["vorticity"][1].ravel()}
    if args.pressure:
        cols["p"] = grid["pressure"].ravel()
    reports.write_csv(outdir / "field.csv", cols,
                      reports.meta_header(chash, basis.checksum,
                                          extra={"t": cp.t}))
    if cfg["output"]["figures"]:
        jmid = args.ny // 2
        frame = {"t": cp.t, "x": x, "z": z,
                 "u_x": grid["u"][0][:, jmid, :], "u_z": grid["u"][2][:, jmid, :],
                 "vorticity": grid["vorticity"][1][:, jmid, :]}
        reports.frame_figure(outdir / "field.png", frame,
                             title=f"y = 0 slice at t = {cp.t:.2f}")
    print(f"exported {args.nx}x{args.ny}x{args.nz} field to {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="channelmodes",
        description="Hydrodynamic-mode toolkit for channel flow with Navier slip")
    parser.add_argument("--version", action="version",
                        version=f"channelmodes {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for sweeps/ensembles")
    common.add_argument("--seed", type=int, help="root seed override")
    common.add_argument("--format", choices=("csv", "json"),
                        help="series output format")
    common.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering")
    common.add_argument("--cache", help="operator cache directory")
    common.add_argument("--re", type=float, help="Reynolds number override")
    common.add_argument("--ls", type=float, default=None,
                        help="slip length override")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dispersion", parents=[common],
                       help="tabulate dispersion roots for one mode family")
    p.add_argument("--family", required=True,
                   help="1d-sym | 1d-antisym | 2d-sym | 2d-antisym | 3d-sym | 3d-antisym")
    p.add_argument("--m", type=float, default=0.0)
    p.add_argument("--k", type=float, default=0.0)
    p.add_argument("--n", type=int, default=4, help="number of roots")
    p.set_defaults(func=cmd_dispersion)

    p = sub.add_parser("basis", parents=[common],
                       help="build, audit and serialize a mode basis")
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("critical", parents=[common],
                       help="locate the critical state (Re_c, m_c)")
    p.add_argument("--frames", type=int, default=0,
                   help="export N frames of the oscillating critical state")
    p.add_argument("--grid", type=int, nargs=2, default=(64, 129),
                   metavar=("NX", "NZ"))
    p.set_defaults(func=cmd_critical)

    p = sub.add_parser("neutral-curve", parents=[common],
                       help="critical surface over spanwise wavevectors")
    p.add_argument("--k-values", required=True,
                   help="comma-separated spanwise wavevectors")
    p.add_argument("--n-roots", type=int)
    p.set_defaults(func=cmd_neutral_curve)

    p = sub.add_parser("slip-sweep", parents=[common],
                       help="critical state as a function of slip length")
    p.add_argument("--ls-values", required=True,
                   help="comma-separated slip lengths")
    p.add_argument("--n-roots", type=int)
    p.set_defaults(func=cmd_slip_sweep)

    p = sub.add_parser("evolve", parents=[common],
                       help="time-evolve one thermally sampled trajectory")
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("ensemble", parents=[common],
                       help="K-trajectory thermal ensemble with averages")
    p.add_argument("--k-traj", type=int, help="number of trajectories")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("diagnose", parents=[common],
                       help="recompute the diagnostics bundle of a run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("export-field", parents=[common],
                       help="grid a checkpoint's velocity/vorticity field")
    p.add_argument("--basis", required=True, help="basis.json path")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--nx", type=int, default=32)
    p.add_argument("--ny", type=int, default=3)
    p.add_argument("--nz", type=int, default=65)
    p.add_argument("--no-base", action="store_true",
                   help="exclude the Poiseuille base flow")
    p.add_argument("--pressure", action="store_true",
                   help="reconstruct the mode pressure field")
    p.set_defaults(func=cmd_export_field)
    return parser


def _overrides_from_args(args) -> dict:
    over = {}
    if getattr(args, "re", None) is not None:
        over["flow.reynolds"] = args.re
    if getattr(args, "ls", None) is not None:
        over["flow.slip_length"] = args.ls
    if getattr(args, "seed", None) is not None:
        over["evolution.seed"] = args.seed
    if getattr(args, "format", None):
        over["output.format"] = args.format
    if getattr(args, "out", None):
        over["output.directory"] = args.out
    if getattr(args, "no_figures", False):
        over["output.figures"] = False
    return over


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        print("schema sections: flow, cell, basis, search, evolution, output "
              "(see channelmodes.cli.DEFAULT_CONFIG)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DispersionError, BracketError, TrajectoryAbort,
            np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
