"""Coarse solver periodically corrected by the trained network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diagnostics import kinetic_energy, l2_norm
from .exceptions import CheckpointError, ConfigurationError, DegenerateReferenceError
from .fileio import write_csv
from .grid import SphericalGrid
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.unet import UNet, UNetConfig
from .regrid import (PatchSpec, PatchTensor, centers_to_stagger, extract_patches, sample_back,
                     stagger_to_centers)
from .solver import ShallowWaterModel, SweState, _count
from .training import (PairArchive, TrainConfig, VelocityNormalizer, build_samples, fit_normalizer,
                       train)


def apply_correction(state: SweState, net: UNet, grid: SphericalGrid, normalizer: VelocityNormalizer,
                     spec: PatchSpec, batch_size: int = 16, mode: str = "increment") -> SweState:
    """Replace the cell-centred velocity by the network output; ``h`` and ``t`` are untouched.

    ``mode="increment"`` maps only the change back to the faces, so the face
    velocities are not smoothed by the centre/face averaging round trip.
    ``mode="direct"`` averages the corrected centre field to the faces.
    """
    if mode not in ("increment", "direct"):
        raise ConfigurationError(f"unknown correction mode {mode!r}")
    if net.config.in_channels != 2:
        raise CheckpointError("corrector network must have two channels")
    uc, vc = stagger_to_centers(state)
    un, vn = normalizer.normalize(uc, vc)
    patches = extract_patches(un, vn, grid, spec)
    x = np.stack([p.values for p in patches]).astype(np.float32)
    y = np.concatenate([net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    out = [PatchTensor(y[k].astype(np.float64), p.source_coords, p.patch_id, p.geometry)
           for k, p in enumerate(patches)]
    uo, vo = normalizer.denormalize(*sample_back(out, grid))
    if mode == "direct":
        u, v = centers_to_stagger(uo, vo)
    else:
        du, dv = centers_to_stagger(uo - uc, vo - vc)
        u, v = state.u + du, state.v + dv
    return SweState(state.h.copy(), u, v, state.t)


@dataclass(frozen=True)
class CouplingConfig:
    tau: float = 43200.0
    correction_enabled: bool = True
    log_energy: bool = True
    mode: str = "increment"
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.mode not in ("increment", "direct"):
            raise ConfigurationError(f"unknown correction mode {self.mode!r}")


@dataclass
class CorrectionEvent:
    time: float
    l2_change: float          # area-weighted RMS of the centre velocity change (m/s)
    delta_ek: float           # kinetic energy after minus before
    max_correction: float     # max |change| over face velocities (m/s)
    l2_u_before: float = float("nan")
    l2_u_after: float = float("nan")
    l2_v_before: float = float("nan")
    l2_v_after: float = float("nan")


@dataclass
class CoupledResult:
    final: SweState
    trajectory: list = field(default_factory=list)    # (t, state) post-correction
    events: list = field(default_factory=list)

    def write_corrections(self, path):
        write_csv(path, "corrections", 1,
                  ("time", "l2_velocity_change", "delta_ek", "max_abs_correction",
                   "l2_u_before", "l2_u_after", "l2_v_before", "l2_v_after"),
                  [(e.time, e.l2_change, e.delta_ek, e.max_correction, e.l2_u_before, e.l2_u_after,
                    e.l2_v_before, e.l2_v_after) for e in self.events])


def run_coupled(initial: SweState, model: ShallowWaterModel, dt: float, t_end: float,
                config: CouplingConfig, corrector: Optional["Corrector"] = None,
                snapshot_interval: Optional[float] = None,
                snapshot_hook: Optional[Callable[[SweState], None]] = None,
                reference: Optional[Callable[[float], Optional[SweState]]] = None) -> CoupledResult:
    """Alternate ``integrate(tau)`` and the correction until ``t_end``.

    Snapshots are taken every ``snapshot_interval`` (default ``tau``) after any
    correction due at that time. ``reference(t)`` may return a reference state
    for logging the ``u`` and ``v`` errors before and after each event.
    """
    grid = model.grid
    if config.correction_enabled and corrector is None:
        raise ConfigurationError("correction enabled but no corrector given")
    n_tau = _count(config.tau, dt, "tau")
    interval = snapshot_interval if snapshot_interval is not None else config.tau
    n_snap = _count(interval, dt, "snapshot interval")
    if n_snap == 0 or n_tau == 0:
        raise ConfigurationError("tau and snapshot interval must be positive")
    n_total = _count(t_end - initial.t, dt, "integration span")

    result = CoupledResult(initial)
    state = initial.copy()
    result.trajectory.append((state.t, state.copy()))
    if snapshot_hook is not None:
        snapshot_hook(state.copy())
    stops = sorted({k for k in range(n_tau, n_total + 1, n_tau)} | {k for k in range(n_snap, n_total + 1, n_snap)})
    done = 0
    t0 = initial.t
    for stop in stops:
        state = model.integrate(state, dt, t0 + stop * dt) if stop > done else state
        done = stop
        if config.correction_enabled and stop % n_tau == 0:
            state = _correct(state, grid, corrector, config, result, reference)
        if stop % n_snap == 0:
            result.trajectory.append((state.t, state.copy()))
            if snapshot_hook is not None:
                snapshot_hook(state.copy())
    result.final = state
    return result


def _correct(state, grid, corrector, config, result, reference):
    new = corrector.predict(state, grid)
    ucb, vcb = stagger_to_centers(state)
    uca, vca = stagger_to_centers(new)
    rms = float(np.sqrt(np.sum(grid.cell_area * ((uca - ucb) ** 2 + (vca - vcb) ** 2)) / grid.total_area))
    dek = kinetic_energy(new, grid) - kinetic_energy(state, grid) if config.log_energy else float("nan")
    mx = float(max(np.max(np.abs(new.u - state.u)), np.max(np.abs(new.v - state.v))))
    ev = CorrectionEvent(state.t, rms, dek, mx)
    ref = reference(state.t) if reference is not None else None
    if ref is not None:
        uref, vref = stagger_to_centers(ref)
        ev.l2_u_before, ev.l2_u_after = _l2_pair(ucb, uca, uref, grid)
        ev.l2_v_before, ev.l2_v_after = _l2_pair(vcb, vca, vref, grid)
    result.events.append(ev)
    return new


def _l2_pair(before, after, ref, grid):
    try:
        return l2_norm(before, ref, grid), l2_norm(after, ref, grid)
    except DegenerateReferenceError:
        return float("nan"), float("nan")


# -- estimator wrapper ---------------------------------------------------------------------
class Corrector(BaseEstimator):
    """Learned velocity corrector with a scikit-learn style interface.

    ``fit`` takes a :class:`~dynsr.training.PairArchive`; ``predict`` maps a
    coarse state to its corrected state. ``velocity_scales=(q_u, q_v)`` fixes
    the normaliser instead of fitting it on the training split.
    """

    def __init__(self, net_config=None, patch_spec=None, train_config=None, quantile=0.95,
                 patches_per_snapshot=8, mode="increment", velocity_scales=None):
        self.net_config = net_config
        self.velocity_scales = velocity_scales
        self.patches_per_snapshot = patches_per_snapshot
        self.patch_spec = patch_spec
        self.train_config = train_config
        self.quantile = quantile
        self.mode = mode

    def _spec(self):
        return self.patch_spec or PatchSpec()

    def fit(self, X: PairArchive, y=None, metrics_path=None, checkpoint_path=None, log=None):
        cfg = self.train_config or TrainConfig()
        spec = self._spec()
        if self.velocity_scales is not None:
            self.normalizer_ = VelocityNormalizer.from_scales(*self.velocity_scales, quantile=self.quantile)
        else:
            self.normalizer_ = fit_normalizer(X, self.quantile)
        rng = np.random.default_rng(cfg.seed)
        per = self.patches_per_snapshot
        tr = build_samples(X.split("train"), self.normalizer_, X.grid, spec, per, rng)
        va = build_samples(X.split("val"), self.normalizer_, X.grid, spec, per, rng)
        res = train(tr, va if len(va) else None, self.normalizer_, self.net_config or UNetConfig(),
                    cfg, metrics_path=metrics_path, checkpoint_path=checkpoint_path, log=log,
                    checkpoint_meta={"patch_spec": _spec_dict(spec)})
        self.net_ = res.net
        self.optimizer_ = res.optimizer
        self.history_ = res.history
        return self

    def predict(self, state: SweState, grid: SphericalGrid) -> SweState:
        check_is_fitted(self, ("net_", "normalizer_"))
        return apply_correction(state, self.net_, grid, self.normalizer_, self._spec(), mode=self.mode)

    def save(self, path, step=None):
        check_is_fitted(self, ("net_", "normalizer_"))
        meta = {"normalizer": {"q_u": self.normalizer_.q_u, "q_v": self.normalizer_.q_v},
                "patch_spec": _spec_dict(self._spec())}
        step = step if step is not None else getattr(self.optimizer_, "step_count", 0)
        save_checkpoint(path, self.net_, getattr(self, "optimizer_", None), step, meta)

    @classmethod
    def load(cls, path, mode="increment"):
        net, opt, step, meta = load_checkpoint(path)
        if "normalizer" not in meta:
            raise CheckpointError(f"{path}: checkpoint carries no normaliser constants")
        spec = PatchSpec(**meta["patch_spec"]) if "patch_spec" in meta else PatchSpec()
        obj = cls(net_config=net.config, patch_spec=spec, mode=mode)
        obj.net_ = net
        obj.optimizer_ = opt
        obj.normalizer_ = VelocityNormalizer.from_scales(meta["normalizer"]["q_u"], meta["normalizer"]["q_v"])
        return obj

    @classmethod
    def from_parts(cls, net: UNet, normalizer: VelocityNormalizer, patch_spec: PatchSpec | None = None,
                   mode="increment"):
        obj = cls(net_config=net.config, patch_spec=patch_spec, mode=mode)
        obj.net_ = net
        obj.normalizer_ = normalizer
        return obj


def _spec_dict(spec: PatchSpec):
    return {"grid_rows": spec.grid_rows, "grid_cols": spec.grid_cols,
            "overlap_fraction": spec.overlap_fraction, "pixel_size": spec.pixel_size}
