"""Paired coarse/fine data, velocity normalisation, the mixed loss and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, TrainingError
from .fileio import load_snapshot, save_snapshot, write_csv
from .galewsky import GalewskyParams, init_state
from .grid import SphericalGrid
from .nn.checkpoint import save_checkpoint
from .nn.optim import Adam
from .nn.unet import UNet, UNetConfig
from .regrid import PatchSpec, patch_layout, rasterize, restrict, sample_patch, stagger_to_centers
from .solver import PhysicalConstants, ShallowWaterModel, SweState

TRAIN_VARIANTS = tuple((p, l) for p in (-1, 1) for l in range(8))
VALIDATION_VARIANTS = ((0, 0),)


# -- dataset -------------------------------------------------------------------------
@dataclass(frozen=True)
class DatasetSpec:
    train_variants: tuple = TRAIN_VARIANTS
    val_variants: tuple = VALIDATION_VARIANTS
    tau: float = 43200.0
    horizon: float = 8 * 86400.0
    patches_per_snapshot: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_variants", tuple(tuple(v) for v in self.train_variants))
        object.__setattr__(self, "val_variants", tuple(tuple(v) for v in self.val_variants))
        if set(self.train_variants) & set(self.val_variants):
            raise ConfigurationError("training and validation variants overlap")
        for v in self.train_variants + self.val_variants:
            GalewskyParams(n_phi=v[0], n_lambda=v[1])
        if self.tau <= 0 or self.horizon < 0:
            raise ConfigurationError("tau must be positive and horizon non-negative")
        ratio = self.horizon / self.tau
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError(f"horizon {self.horizon} is not a multiple of tau {self.tau}")
        if self.patches_per_snapshot < 1:
            raise ConfigurationError("patches_per_snapshot must be positive")

    @property
    def pairs_per_variant(self) -> int:
        return int(round(self.horizon / self.tau))

    @property
    def snapshots_per_run(self) -> int:
        return self.pairs_per_variant + 1

    @property
    def n_pairs(self) -> int:
        return self.pairs_per_variant * len(self.train_variants)


@dataclass
class PairRecord:
    variant: tuple
    split: str
    time: float
    coarse: SweState        # coarse run after one tau from the restricted fine state
    target: SweState        # restricted fine state at the same time


@dataclass
class PairArchive:
    records: list
    grid: SphericalGrid

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def __len__(self):
        return len(self.records)

    def save(self, directory):
        """Snapshot files plus ``pairs.csv`` (variant, time, split, paths)."""
        d = Path(directory)
        (d / "snapshots").mkdir(parents=True, exist_ok=True)
        rows = []
        for r in self.records:
            stem = f"{r.split}_p{r.variant[0]:+d}_l{r.variant[1]}_t{int(round(r.time)):09d}"
            ip, tp = f"snapshots/{stem}_input.snp", f"snapshots/{stem}_target.snp"
            save_snapshot(d / ip, r.coarse, self.grid)
            save_snapshot(d / tp, r.target, self.grid)
            rows.append((r.split, r.variant[0], r.variant[1], float(r.time), ip, tp))
        write_csv(d / "pairs.csv", "pairs", 1,
                  ("split", "n_phi", "n_lambda", "time", "input_path", "target_path"), rows)

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        lines = [ln for ln in (d / "pairs.csv").read_text().splitlines() if not ln.startswith("#")]
        records, grid = [], None
        for row in csv.DictReader(lines):
            coarse, grid = load_snapshot(d / row["input_path"])
            target, _ = load_snapshot(d / row["target_path"])
            records.append(PairRecord((int(row["n_phi"]), int(row["n_lambda"])), row["split"],
                                      float(row["time"]), coarse, target))
        if grid is None:
            raise ConfigurationError(f"pair archive {d} is empty")
        return cls(records, grid)


def generate_variant(variant, split, spec: DatasetSpec, fine_grid, coarse_grid, dt_fine,
                     dt_coarse, consts=None, filter_lat=60.0, trajectory_hook=None):
    """Pairs of one test-case variant; each pair spans exactly one ``tau``.

    The fine run is continuous. The coarse run restarts every ``tau`` from the
    restricted fine state, so a pair holds one interval of divergence.
    """
    consts = consts or PhysicalConstants()
    fine_model = ShallowWaterModel(fine_grid, consts, filter_lat=filter_lat)
    coarse_model = ShallowWaterModel(coarse_grid, consts, filter_lat=filter_lat)
    fine = init_state(fine_grid, GalewskyParams(n_phi=variant[0], n_lambda=variant[1]), consts)
    start = restrict(fine, fine_grid, coarse_grid)
    if trajectory_hook is not None:
        trajectory_hook(fine)
    records = []
    for k in range(1, spec.pairs_per_variant + 1):
        t_next = k * spec.tau
        fine = fine_model.integrate(fine, dt_fine, t_next)
        if trajectory_hook is not None:
            trajectory_hook(fine)
        coarse = coarse_model.integrate(start, dt_coarse, t_next)
        target = restrict(fine, fine_grid, coarse_grid)
        records.append(PairRecord(tuple(variant), split, t_next, coarse, target))
        start = target
    return records


def generate_pairs(spec: DatasetSpec, fine_grid, coarse_grid, dt_fine, dt_coarse, consts=None,
                   out_dir=None, filter_lat=60.0, progress: Optional[Callable] = None):
    records = []
    jobs = [(v, "train") for v in spec.train_variants] + [(v, "val") for v in spec.val_variants]
    for variant, split in jobs:
        try:
            records += generate_variant(variant, split, spec, fine_grid, coarse_grid, dt_fine,
                                        dt_coarse, consts, filter_lat)
        except Exception as exc:
            exc.args = (f"variant {variant} ({split}): {exc.args[0] if exc.args else exc}",)
            raise
        if progress is not None:
            progress(variant, split)
    archive = PairArchive(records, coarse_grid)
    if out_dir is not None:
        archive.save(out_dir)
    return archive


# -- normalisation ---------------------------------------------------------------------
class VelocityNormalizer(TransformerMixin, BaseEstimator):
    """Divide each velocity component by a quantile of its magnitude.

    ``X`` has one row per sample and columns ``(u, v)``. The quantile uses the
    nearest-rank rule on the sorted magnitudes. Scaling is odd, so signs are kept.
    """

    def __init__(self, quantile=0.95):
        self.quantile = quantile

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not 0.0 < self.quantile <= 1.0:
            raise ConfigurationError(f"quantile must be in (0, 1], got {self.quantile}")
        scale = np.quantile(np.abs(X), self.quantile, axis=0, method="inverted_cdf")
        if np.any(scale <= 0):
            raise ConfigurationError(f"degenerate normalisation scale {scale}")
        self.scale_ = np.asarray(scale, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=np.float64)
        return X / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=np.float64)
        return X * self.scale_

    @property
    def q_u(self):
        return float(self.scale_[0])

    @property
    def q_v(self):
        return float(self.scale_[1])

    @classmethod
    def from_scales(cls, q_u, q_v, quantile=0.95):
        obj = cls(quantile)
        obj.scale_ = np.array([q_u, q_v], dtype=np.float64)
        if np.any(obj.scale_ <= 0):
            raise ConfigurationError("normalisation scales must be positive")
        obj.n_features_in_ = 2
        return obj

    def normalize(self, uc, vc):
        check_is_fitted(self, "scale_")
        return np.asarray(uc) / self.scale_[0], np.asarray(vc) / self.scale_[1]

    def denormalize(self, un, vn):
        check_is_fitted(self, "scale_")
        return np.asarray(un) * self.scale_[0], np.asarray(vn) * self.scale_[1]


def fit_normalizer(archive: PairArchive, quantile=0.95, split="train") -> VelocityNormalizer:
    recs = archive.split(split)
    if not recs:
        raise ConfigurationError(f"no '{split}' pairs to fit the normaliser")
    cols = []
    for r in recs:
        for s in (r.coarse, r.target):
            uc, vc = stagger_to_centers(s)
            cols.append(np.column_stack([uc.ravel(), vc.ravel()]))
    return VelocityNormalizer(quantile).fit(np.concatenate(cols))


# -- losses ----------------------------------------------------------------------------
@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.1
    epsilon: float = 1e-12
    cap: float = 1.0

    def __post_init__(self):
        if self.gamma < 0 or self.epsilon <= 0 or self.cap <= 0:
            raise ConfigurationError("need gamma >= 0, epsilon > 0, cap > 0")


def _cells(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[0] != 2:
        raise ConfigurationError(f"pred {pred.shape} and target {target.shape} must be (2, ...)")
    return pred.reshape(2, -1), target.reshape(2, -1)


def loss_abs(pred, target):
    """Mean over cells of the summed squared component errors."""
    p, t = _cells(pred, target)
    return float(np.sum((p - t) ** 2) / p.shape[1])


def loss_rel(pred, target, cfg: LossConfig = LossConfig()):
    """Mean over cells of the summed capped relative errors; lies in ``[0, 2 cap]``."""
    p, t = _cells(pred, target)
    ratio = np.abs(p - t) / (np.abs(t) + cfg.epsilon)
    return float(np.sum(np.minimum(cfg.cap, ratio)) / p.shape[1])


def total_loss(pred, target, cfg: LossConfig = LossConfig()):
    return loss_abs(pred, target) + cfg.gamma * loss_rel(pred, target, cfg)


def total_loss_and_grad(pred, target, cfg: LossConfig = LossConfig()):
    """Loss and its gradient with respect to ``pred`` (sub-gradient 0 where the cap is active)."""
    shape = np.shape(pred)
    p, t = _cells(pred, target)
    n = p.shape[1]
    err = p - t
    denom = np.abs(t) + cfg.epsilon
    ratio = np.abs(err) / denom
    active = ratio < cfg.cap
    la = np.sum(err**2) / n
    lr = np.sum(np.minimum(cfg.cap, ratio)) / n
    grad = 2.0 * err / n + cfg.gamma * np.where(active, np.sign(err) / denom, 0.0) / n
    return float(la + cfg.gamma * lr), grad.reshape(shape)


# -- patch samples ---------------------------------------------------------------------
@dataclass
class PatchSamples:
    """Network inputs with the cell targets their outputs are compared against."""

    x: np.ndarray                 # (N, 2, S, S) float32, normalised
    geometry: list                # PatchGeometry per sample
    target: list                  # (2, ncells) normalised target per sample
    source: list = field(default_factory=list)   # (record index, patch id)

    def __len__(self):
        return len(self.geometry)


def build_samples(records, normalizer: VelocityNormalizer, grid, patch_spec: PatchSpec,
                  per_snapshot: Optional[int], rng) -> PatchSamples:
    """Draw ``per_snapshot`` patches without replacement from every snapshot (all if None)."""
    layout = patch_layout(grid, patch_spec)
    xs, geos, tgts, src = [], [], [], []
    for ri, r in enumerate(records):
        ui, vi = normalizer.normalize(*stagger_to_centers(r.coarse))
        ut, vt = normalizer.normalize(*stagger_to_centers(r.target))
        if per_snapshot is None or per_snapshot >= len(layout):
            chosen = np.arange(len(layout))
        else:
            chosen = np.sort(rng.choice(len(layout), size=per_snapshot, replace=False))
        for pi in chosen:
            geo = layout[pi]
            xs.append(rasterize(ui, vi, geo).astype(np.float32))
            tgts.append(np.stack([ut.ravel()[geo.cells], vt.ravel()[geo.cells]]))
            geos.append(geo)
            src.append((ri, geo.patch_id))
    x = np.stack(xs) if xs else np.zeros((0, 2, patch_spec.pixel_size, patch_spec.pixel_size),
                                         np.float32)
    return PatchSamples(x, geos, tgts, src)


def sample_adjoint(grad_cells, geometry, size):
    """Transpose of :func:`~dynsr.regrid.sample_patch`: cell gradients back onto pixels."""
    index, weight = geometry.sampler(size)
    out = np.empty((grad_cells.shape[0], size * size))
    for c in range(grad_cells.shape[0]):
        out[c] = np.bincount(index.ravel(), (grad_cells[c][:, None] * weight).ravel(),
                             minlength=size * size)
    return out.reshape(grad_cells.shape[0], size, size)


def batch_loss(net: UNet, samples: PatchSamples, idx, cfg: LossConfig, backward=False):
    """Loss over all cells of the batch; accumulates gradients into ``net`` when asked."""
    y = net.forward(samples.x[idx])
    size = y.shape[-1]
    preds = [sample_patch(y[k], samples.geometry[i]) for k, i in enumerate(idx)]
    pred = np.concatenate(preds, axis=1)
    target = np.concatenate([samples.target[i] for i in idx], axis=1)
    loss, g = total_loss_and_grad(pred, target, cfg)
    if backward:
        dy = np.empty(y.shape, dtype=np.float64)
        off = 0
        for k, i in enumerate(idx):
            n = preds[k].shape[1]
            dy[k] = sample_adjoint(g[:, off:off + n], samples.geometry[i], size)
            off += n
        net.backward(dy.astype(y.dtype))
    return loss


# -- training loop ---------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    val_interval: int = 200
    val_batches: int = 10
    extra_validation: tuple = (100,)
    checkpoint_interval: int = 1000
    seed: int = 0
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.val_interval < 1:
            raise ConfigurationError("invalid iteration/batch/validation settings")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ConfigurationError("learning rates must be positive")


def lr_schedule(iteration, cfg: TrainConfig):
    """Exponential decay from ``lr_initial`` at 0 to ``lr_final`` at ``iterations``."""
    if cfg.iterations == 0:
        return cfg.lr_initial
    frac = min(max(iteration / cfg.iterations, 0.0), 1.0)
    return cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** frac


@dataclass
class TrainResult:
    net: UNet
    optimizer: Adam
    normalizer: VelocityNormalizer
    history: list

    def validation_curve(self):
        return [(r["iteration"], r["val_loss"]) for r in self.history if not math.isnan(r["val_loss"])]


def _val_batches(n, cfg: TrainConfig, rng):
    if n == 0:
        return []
    bs = min(cfg.batch_size, n)
    return [np.sort(rng.choice(n, size=bs, replace=False)) for _ in range(cfg.val_batches)]


def train(train_samples: PatchSamples, val_samples: Optional[PatchSamples] = None,
          normalizer: Optional[VelocityNormalizer] = None, net_config: Optional[UNetConfig] = None,
          cfg: TrainConfig = TrainConfig(), net: Optional[UNet] = None, optimizer=None,
          metrics_path=None, checkpoint_path=None, log: Optional[Callable] = None,
          checkpoint_meta: Optional[dict] = None) -> TrainResult:
    """Minibatch Adam on randomly drawn patches; validation on fixed batches."""
    if len(train_samples) == 0:
        raise ConfigurationError("no training samples")
    net = net or UNet(net_config or UNetConfig())
    optimizer = optimizer or Adam()
    rng = np.random.default_rng(cfg.seed)
    val_idx = _val_batches(len(val_samples) if val_samples is not None else 0, cfg,
                           np.random.default_rng(cfg.seed + 1))
    bs = min(cfg.batch_size, len(train_samples))
    val_at = set(range(0, cfg.iterations + 1, cfg.val_interval)) | set(cfg.extra_validation) | {cfg.iterations}
    params = dict(net.named_parameters())
    history = []

    def validate():
        if not val_idx:
            return float("nan")
        return float(np.mean([batch_loss(net, val_samples, b, cfg.loss) for b in val_idx]))

    def checkpoint(step):
        if checkpoint_path is not None:
            meta = dict(checkpoint_meta or {})
            if normalizer is not None:
                meta["normalizer"] = {"q_u": normalizer.q_u, "q_v": normalizer.q_v}
            save_checkpoint(checkpoint_path, net, optimizer, step, meta)

    for it in range(cfg.iterations + 1):
        val = validate() if it in val_at else float("nan")
        if it == cfg.iterations:
            history.append({"iteration": it, "lr": lr_schedule(it, cfg),
                            "train_loss": float("nan"), "val_loss": val})
            break
        idx = np.sort(rng.choice(len(train_samples), size=bs, replace=False))
        net.zero_grad()
        loss = batch_loss(net, train_samples, idx, cfg.loss, backward=True)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it} (batch {it}: samples {idx.tolist()})",
                                iteration=it, batch_id=it)
        lr = lr_schedule(it, cfg)
        optimizer.step(params, dict(net.named_gradients()), lr)
        history.append({"iteration": it, "lr": lr, "train_loss": loss, "val_loss": val})
        if log is not None and (it in val_at):
            log(it, loss, val)
        if cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0:
            checkpoint(it + 1)
    checkpoint(cfg.iterations)
    if metrics_path is not None:
        write_metrics(metrics_path, history)
    return TrainResult(net, optimizer, normalizer, history)


def write_metrics(path, history):
    write_csv(path, "training-metrics", 1, ("iteration", "lr", "train_loss", "val_loss"),
              [(r["iteration"], r["lr"], r["train_loss"], r["val_loss"]) for r in history])
