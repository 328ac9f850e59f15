"""Command-line entry points: ``run``, ``generate-data``, ``train``, ``couple``, ``diagnose``.

Every subcommand takes ``--manifest``, ``--seed``, ``--threads`` and ``--out-dir``.
Exit codes: 0 success, 2 configuration/usage, 3 CFL violation, 4 non-finite
state or loss, 5 numerical (quadrature, degenerate reference), 6 I/O.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .coupling import Corrector, CouplingConfig, run_coupled
from .diagnostics import (error_norms, kinetic_energy, physical_potential_energy, potential_energy,
                          state_spectrum, total_energy)
from .exceptions import ConfigurationError, DynSRError, SnapshotError
from .fileio import load_snapshot, save_snapshot, write_csv
from .galewsky import GalewskyParams, init_state
from .grid import build_grid
from .manifest import RunManifest, load_manifest
from .nn.unet import UNetConfig
from .regrid import PatchSpec, restrict
from .solver import PhysicalConstants, ShallowWaterModel, total_mass
from .training import DatasetSpec, LossConfig, PairArchive, TrainConfig, generate_pairs

log = logging.getLogger("dynsr")


# -- helpers ---------------------------------------------------------------------------
def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise ConfigurationError("--threads must be >= 1")
    # the solver kernels are serial; only BLAS (network training/inference) is threaded
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _initial_state(m: RunManifest, which: str):
    """Galewsky state on grid ``which``; ``initial = restricted`` restricts it from the fine grid."""
    consts = PhysicalConstants()
    params = GalewskyParams(n_phi=m.n_phi, n_lambda=m.n_lambda, perturbed=m.perturbed)
    grid = build_grid(*m.shape(which))
    if m.initial == "restricted" and which != "fine":
        fine = build_grid(*m.shape("fine"))
        return restrict(init_state(fine, params, consts), fine, grid), grid
    return init_state(grid, params, consts), grid


def _snapshot_writer(out_dir: Path, label: str, grid):
    (out_dir / "snapshots").mkdir(parents=True, exist_ok=True)
    rows = []

    def hook(state):
        save_snapshot(out_dir / "snapshots" / f"{label}_t{int(round(state.t)):09d}.snp", state, grid)
        rows.append((state.t, kinetic_energy(state, grid), potential_energy(state, grid),
                     physical_potential_energy(state, grid), total_energy(state, grid),
                     total_mass(state, grid)))
    return hook, rows


def _write_energies(path, rows):
    write_csv(path, "energies", 1, ("time", "ek", "ep", "ep_gh2_half", "total_energy", "mass"), rows)


def _patch_spec(m: RunManifest):
    return PatchSpec(overlap_fraction=m.overlap_fraction, pixel_size=m.pixel_size)


def _train_config(m: RunManifest):
    return TrainConfig(iterations=m.iterations, batch_size=m.batch_size, lr_initial=m.lr_initial,
                       lr_final=m.lr_final, val_interval=m.val_interval, val_batches=m.val_batches,
                       seed=m.seed, loss=LossConfig(gamma=m.gamma, epsilon=m.epsilon))


# -- commands ----------------------------------------------------------------------------
def cmd_run(m: RunManifest, out_dir: Path):
    """Uncoupled integration on the ``[run] grid``."""
    state, grid = _initial_state(m, m.run_grid)
    model = ShallowWaterModel(grid, filter_lat=m.filter_lat)
    hook, rows = _snapshot_writer(out_dir, m.run_grid, grid)
    hook(state)
    model.integrate(state, m.dt(m.run_grid), m.t_end, hook=hook, hook_interval=m.output_interval)
    _write_energies(out_dir / "energies.csv", rows)
    return 0


def cmd_generate_data(m: RunManifest, out_dir: Path):
    spec = DatasetSpec(tau=m.tau, horizon=m.data_horizon, patches_per_snapshot=m.patches_per_snapshot,
                       seed=m.seed)
    fine, coarse = build_grid(*m.fine), build_grid(*m.coarse)
    target = m.path(m.pairs) if m.pairs else out_dir / "pairs"
    generate_pairs(spec, fine, coarse, m.dt_fine, m.dt_coarse, out_dir=target,
                   filter_lat=m.filter_lat, progress=lambda v, s: log.info("variant %s (%s) done", v, s))
    return 0


def cmd_train(m: RunManifest, out_dir: Path):
    pairs = m.path(m.pairs) if m.pairs else out_dir / "pairs"
    archive = PairArchive.load(pairs)
    ckpt = m.path(m.checkpoint) if m.checkpoint else out_dir / "corrector.ckpt"
    est = Corrector(net_config=UNetConfig(residual=m.residual, seed=m.seed), patch_spec=_patch_spec(m),
                    train_config=_train_config(m), patches_per_snapshot=m.patches_per_snapshot,
                    mode=m.correction_mode,
                    velocity_scales=(m.q_u, m.q_v) if m.q_u is not None else None)
    est.fit(archive, metrics_path=out_dir / "metrics.csv", checkpoint_path=ckpt,
            log=lambda it, loss, val: log.info("iter %d train %.4g val %.4g", it, loss, val))
    return 0


def cmd_couple(m: RunManifest, out_dir: Path):
    """Coarse run with a correction every ``tau``; identical to ``run`` when disabled."""
    state, grid = _initial_state(m, m.run_grid)
    model = ShallowWaterModel(grid, filter_lat=m.filter_lat)
    corrector = None
    if m.correction_enabled:
        ckpt = m.path(m.checkpoint) if m.checkpoint else out_dir / "corrector.ckpt"
        corrector = Corrector.load(ckpt, mode=m.correction_mode)
    cfg = CouplingConfig(tau=m.tau, correction_enabled=m.correction_enabled, mode=m.correction_mode)
    hook, rows = _snapshot_writer(out_dir, m.run_grid, grid)
    res = run_coupled(state, model, m.dt(m.run_grid), m.t_end, cfg, corrector,
                      snapshot_interval=m.output_interval, snapshot_hook=hook)
    _write_energies(out_dir / "energies.csv", rows)
    res.write_corrections(out_dir / "corrections.csv")
    return 0


def _snapshots(directory: Path):
    files = sorted((directory / "snapshots").glob("*.snp")) if (directory / "snapshots").is_dir() \
        else sorted(directory.glob("*.snp"))
    if not files:
        raise SnapshotError(f"no snapshots found in {directory}")
    return [load_snapshot(f) for f in files]


def cmd_diagnose(m: RunManifest, out_dir: Path, run_dirs, reference):
    ref_by_time = {}
    if reference is not None:
        for st, g in _snapshots(Path(reference)):
            ref_by_time[round(st.t, 6)] = (st, g)
    norm_rows, energy_rows, spec_rows = [], [], []
    for rd in run_dirs:
        label = Path(rd).name
        for st, grid in _snapshots(Path(rd)):
            energy_rows.append((label, st.t, kinetic_energy(st, grid), potential_energy(st, grid),
                                physical_potential_energy(st, grid), total_energy(st, grid),
                                total_mass(st, grid)))
            sp = state_spectrum(st, grid, run_id=label)
            spec_rows += [(label, st.t, int(n), ke, en) for n, ke, en in zip(sp.n, sp.ke, sp.en)]
            hit = ref_by_time.get(round(st.t, 6))
            if hit is not None:
                ref, rgrid = hit
                if rgrid != grid:
                    ref = restrict(ref, rgrid, grid)
                for row in error_norms(st, ref, grid):
                    norm_rows.append((label, st.t, row.field, row.l2, row.lmax, int(row.degenerate)))
    write_csv(out_dir / "norms.csv", "norms", 1, ("run", "time", "field", "l2", "lmax", "degenerate"), norm_rows)
    write_csv(out_dir / "energies.csv", "energies", 1,
              ("run", "time", "ek", "ep", "ep_gh2_half", "total_energy", "mass"), energy_rows)
    write_csv(out_dir / "spectra.csv", "spectra", 1, ("run", "time", "n", "ke", "en"), spec_rows)
    return 0


# -- argument parsing ----------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="dynsr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "generate-data", "train", "couple", "diagnose"):
        sp = sub.add_parser(name)
        sp.add_argument("--manifest", required=name != "diagnose", help="experiment manifest file")
        sp.add_argument("--seed", type=int, default=None, help="override [seeds] seed")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (1 = bitwise reproducible)")
        sp.add_argument("--out-dir", default=None, help="override [paths] out_dir")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "diagnose":
            sp.add_argument("--run", dest="runs", action="append", required=True,
                            help="directory holding a run's snapshots (repeatable)")
            sp.add_argument("--reference", default=None, help="reference run directory")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        m = load_manifest(args.manifest) if args.manifest else RunManifest()
        m = m.with_overrides(seed=args.seed)
        out_dir = Path(args.out_dir) if args.out_dir else m.path(m.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        limiter = _limit_threads(args.threads)
        try:
            if args.command == "run":
                return cmd_run(m, out_dir)
            if args.command == "generate-data":
                return cmd_generate_data(m, out_dir)
            if args.command == "train":
                return cmd_train(m, out_dir)
            if args.command == "couple":
                return cmd_couple(m, out_dir)
            return cmd_diagnose(m, out_dir, args.runs, args.reference)
        finally:
            if limiter is not None:
                limiter.unregister()
    except DynSRError as exc:
        print(f"dynsr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dynsr {args.command}: I/O error: {exc}", file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
