import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dynsr.exceptions import ConfigurationError, TrainingError
from dynsr.fileio import read_csv
from dynsr.grid import build_grid
from dynsr.nn import UNet, UNetConfig, load_checkpoint
from dynsr.regrid import PatchSpec, patch_layout, restrict, sample_patch
from dynsr.training import (DatasetSpec, LossConfig, PairArchive, PatchSamples, TrainConfig,
                            VelocityNormalizer, batch_loss, build_samples, fit_normalizer,
                            generate_pairs, generate_variant, loss_abs, loss_rel, lr_schedule,
                            sample_adjoint, total_loss, total_loss_and_grad, train)

FINE = build_grid(32, 64)
COARSE = build_grid(16, 32)
TINY_NET = UNetConfig(widths=(4, 8, 8), seed=0)
TINY_PATCH = PatchSpec(pixel_size=16)


@pytest.fixture(scope="module")
def archive():
    spec = DatasetSpec(train_variants=((1, 2), (-1, 5)), val_variants=((0, 0),), tau=3600.0,
                       horizon=7200.0)
    return generate_pairs(spec, FINE, COARSE, 360.0, 720.0)


# -- dataset ----------------------------------------------------------------------------
def test_pairs_per_variant_schedule():
    assert DatasetSpec(horizon=2 * 86400.0).pairs_per_variant == 4


def test_desk_dataset_pair_count():
    spec = DatasetSpec()
    assert len(spec.train_variants) == 16
    assert spec.pairs_per_variant == 16
    assert spec.n_pairs == 256


@pytest.mark.parametrize("kw", [
    {"train_variants": ((0, 0),), "val_variants": ((0, 0),)},
    {"horizon": 50000.0},
    {"train_variants": ((2, 0),)},
    {"patches_per_snapshot": 0},
])
def test_dataset_spec_validation(kw):
    with pytest.raises(ConfigurationError):
        DatasetSpec(**kw)


def test_archive_layout(archive):
    assert len(archive) == 6
    assert len(archive.split("train")) == 4 and len(archive.split("val")) == 2
    assert [r.time for r in archive.split("val")] == [3600.0, 7200.0]


def test_targets_are_restricted_fine_states(archive):
    got = []
    spec = DatasetSpec(train_variants=((1, 2),), val_variants=(), tau=3600.0, horizon=7200.0)
    generate_variant((1, 2), "train", spec, FINE, COARSE, 360.0, 720.0, trajectory_hook=got.append)
    for rec, fine in zip(archive.split("train")[:2], got[1:]):
        expect = restrict(fine, FINE, COARSE)
        assert np.array_equal(rec.target.u, expect.u) and np.array_equal(rec.target.h, expect.h)


def test_archive_round_trip(archive, tmp_path):
    archive.save(tmp_path)
    back = PairArchive.load(tmp_path)
    assert back.grid == COARSE and len(back) == len(archive)
    for a, b in zip(archive.records, back.records):
        assert a.variant == b.variant and a.split == b.split and a.time == b.time
        assert a.coarse.bitwise_equal(b.coarse) and a.target.bitwise_equal(b.target)
    schema, version, rows = read_csv(tmp_path / "pairs.csv")
    assert schema == "pairs" and version == 1 and rows[0]["input_path"].endswith("_input.snp")


def test_one_step_pairs_nearly_identical():
    spec = DatasetSpec(train_variants=((0, 1),), val_variants=(), tau=720.0, horizon=720.0)
    rec = generate_variant((0, 1), "train", spec, FINE, COARSE, 360.0, 720.0)[0]
    norm = VelocityNormalizer.from_scales(30.0, 10.0)
    from dynsr.regrid import stagger_to_centers
    a = np.stack(norm.normalize(*stagger_to_centers(rec.coarse)))
    b = np.stack(norm.normalize(*stagger_to_centers(rec.target)))
    assert loss_abs(a, b) < 1e-3


# -- normaliser ---------------------------------------------------------------------------
def test_nearest_rank_quantile():
    x = np.column_stack([np.arange(1.0, 101.0), -np.arange(1.0, 101.0)])
    n = VelocityNormalizer(0.95).fit(x)
    assert n.q_u == 95.0 and n.q_v == 95.0


def test_constant_magnitude_normalises_to_unit():
    x = np.column_stack([np.full(50, 3.0) * np.sign(np.arange(50) - 24.5), np.full(50, -2.0)])
    n = VelocityNormalizer().fit(x)
    assert n.q_u == 3.0 and np.all(np.abs(n.transform(x)) == 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_normalisation_odd_and_invertible(seed):
    x = np.random.default_rng(seed).normal(size=(40, 2)) * [20.0, 3.0]
    n = VelocityNormalizer().fit(x)
    assert np.array_equal(n.transform(-x), -n.transform(x))
    assert np.allclose(n.inverse_transform(n.transform(x)), x, rtol=1e-15)


def test_normaliser_estimator_protocol():
    n = VelocityNormalizer(quantile=0.9)
    assert clone(n).get_params() == {"quantile": 0.9}
    with pytest.raises(NotFittedError):
        n.transform(np.ones((2, 2)))
    with pytest.raises(ConfigurationError):
        VelocityNormalizer(quantile=0.0).fit(np.ones((3, 2)))
    with pytest.raises(ConfigurationError):
        VelocityNormalizer().fit(np.zeros((3, 2)))


def test_fit_normalizer_uses_train_split(archive):
    n = fit_normalizer(archive)
    assert 1.0 < n.q_u < 100.0 and 0.0 < n.q_v < n.q_u
    with pytest.raises(ConfigurationError):
        fit_normalizer(archive, split="test")


# -- losses ---------------------------------------------------------------------------------
def _one_cell(eu, ev, tu=1.0, tv=1.0):
    target = np.array([[tu], [tv]])
    return target + np.array([[eu], [ev]]), target


def test_loss_examples():
    assert loss_abs(*_one_cell(0.1, 0.0)) == pytest.approx(0.01, rel=1e-12)
    assert loss_rel(*_one_cell(0.05, 0.0)) == pytest.approx(0.05 / (1 + 1e-12), rel=1e-12)
    # one cell with u error 0.1 on |u'| = 2: absolute part 0.01, relative part 0.05
    pred, target = _one_cell(0.1, 0.0, tu=2.0)
    assert loss_abs(pred, target) == pytest.approx(0.01, rel=1e-12)
    assert loss_rel(pred, target) == pytest.approx(0.05, rel=1e-11)
    assert total_loss(pred, target) == pytest.approx(0.015, rel=1e-12)
    assert total_loss(pred, target, LossConfig(gamma=0.0)) == loss_abs(pred, target)


def test_loss_zero_at_target():
    t = np.random.default_rng(0).normal(size=(2, 5, 7))
    assert loss_abs(t, t) == 0.0 and loss_rel(t, t) == 0.0 and total_loss(t, t) == 0.0


def test_relative_clipped_at_zero_target():
    assert loss_rel(np.array([[0.3], [0.0]]), np.zeros((2, 1))) == 1.0
    assert loss_rel(np.array([[-7.0], [1e-9]]), np.zeros((2, 1))) == 2.0


def test_absolute_loss_homogeneous():
    r = np.random.default_rng(1)
    t, e = r.normal(size=(2, 30)), r.normal(size=(2, 30))
    assert loss_abs(t + 2 * e, t) == pytest.approx(4 * loss_abs(t + e, t), rel=1e-13)


def test_relative_loss_range_ten_thousand_trials():
    r = np.random.default_rng(2)
    for _ in range(10_000):
        n = r.integers(1, 6)
        scale = 10.0 ** r.uniform(-8, 3)
        p, t = r.normal(size=(2, n)) * scale, r.normal(size=(2, n)) * scale
        t[r.random(size=t.shape) < 0.1] = 0.0
        assert 0.0 <= loss_rel(p, t) <= 2.0


def test_loss_shape_validation():
    with pytest.raises(ConfigurationError):
        loss_abs(np.zeros((3, 4)), np.zeros((3, 4)))
    with pytest.raises(ConfigurationError):
        LossConfig(gamma=-1.0)


def test_loss_gradient_finite_differences():
    r = np.random.default_rng(3)
    t = r.normal(size=(2, 20))
    p = t + 0.01 * r.normal(size=(2, 20))
    p[:, :3] = t[:, :3] + 5.0           # capped cells
    _, g = total_loss_and_grad(p, t)
    fd = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        q = p.copy()
        q[idx] += 1e-7
        fp = total_loss(q, t)
        q[idx] -= 2e-7
        fd[idx] = (fp - total_loss(q, t)) / 2e-7
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


# -- samples -------------------------------------------------------------------------------
def test_sample_adjoint_identity():
    geo = patch_layout(COARSE, TINY_PATCH)[5]
    r = np.random.default_rng(4)
    img = r.normal(size=(2, 16, 16))
    g = r.normal(size=(2, len(geo.cells)))
    lhs = np.sum(sample_patch(img, geo) * g)
    rhs = np.sum(img * sample_adjoint(g, geo, 16))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_build_samples_without_replacement(archive):
    n = fit_normalizer(archive)
    s = build_samples(archive.split("train"), n, COARSE, TINY_PATCH, 8, np.random.default_rng(0))
    assert len(s) == 32 and s.x.shape == (32, 2, 16, 16) and s.x.dtype == np.float32
    per_record = {}
    for ri, pid in s.source:
        per_record.setdefault(ri, []).append(pid)
    assert all(len(set(v)) == 8 for v in per_record.values())
    full = build_samples(archive.split("train")[:1], n, COARSE, TINY_PATCH, None, np.random.default_rng(0))
    assert len(full) == 64


# -- training ------------------------------------------------------------------------------
def test_lr_schedule_endpoints():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(cfg.iterations, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert lr_schedule(2500, cfg) == pytest.approx(np.sqrt(1e-9), rel=1e-12)


def _samples(archive):
    n = fit_normalizer(archive)
    r = np.random.default_rng(0)
    return (n, build_samples(archive.split("train"), n, COARSE, TINY_PATCH, 4, r),
            build_samples(archive.split("val"), n, COARSE, TINY_PATCH, 4, r))


def test_zero_iterations_leave_network(archive):
    n, tr, va = _samples(archive)
    net = UNet(TINY_NET)
    before = [p.copy() for _, p in net.parameters()]
    res = train(tr, va, n, cfg=TrainConfig(iterations=0, batch_size=4), net=net)
    assert all(np.array_equal(a, p) for a, (_, p) in zip(before, res.net.parameters()))
    assert np.all(res.net.forward(np.zeros((1, 2, 16, 16), np.float32)) == 0)
    assert len(res.history) == 1 and np.isfinite(res.history[0]["val_loss"])


def test_short_training_writes_outputs(archive, tmp_path):
    n, tr, va = _samples(archive)
    cfg = TrainConfig(iterations=6, batch_size=4, val_interval=4, val_batches=2, extra_validation=(3,),
                      checkpoint_interval=5)
    res = train(tr, va, n, TINY_NET, cfg, metrics_path=tmp_path / "m.csv", checkpoint_path=tmp_path / "c.ckpt")
    assert [it for it, _ in res.validation_curve()] == [0, 3, 4, 6]
    assert all(np.isfinite(r["train_loss"]) for r in res.history[:-1])
    schema, _, rows = read_csv(tmp_path / "m.csv")
    assert schema == "training-metrics" and len(rows) == 7
    net, opt, step, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert step == 6 and opt.step_count == 6 and meta["normalizer"]["q_u"] == n.q_u


def test_training_reproducible(archive):
    n, tr, va = _samples(archive)
    cfg = TrainConfig(iterations=3, batch_size=4, val_batches=1)
    a = train(tr, va, n, TINY_NET, cfg)
    b = train(tr, va, n, TINY_NET, cfg)
    assert all(np.array_equal(p, q) for (_, p), (_, q) in zip(a.net.parameters(), b.net.parameters()))


def test_non_finite_loss_raises(archive):
    n, tr, _ = _samples(archive)
    bad = PatchSamples(tr.x.copy(), tr.geometry, tr.target, tr.source)
    bad.x[:] = np.nan
    with pytest.raises(TrainingError) as info:
        train(bad, None, n, TINY_NET, TrainConfig(iterations=2, batch_size=2))
    assert info.value.iteration == 0 and info.value.exit_code == 4


def test_batch_loss_gradient_matches_finite_difference(archive):
    n, tr, _ = _samples(archive)
    net = UNet(TINY_NET, dtype=np.float64)
    r = np.random.default_rng(5)
    net.set_parameter("out.weight", r.normal(size=(2, 2, 3, 3)) * 0.2)
    tr64 = PatchSamples(tr.x.astype(np.float64), tr.geometry, tr.target, tr.source)
    idx = np.array([0, 3])
    net.zero_grad()
    batch_loss(net, tr64, idx, LossConfig(gamma=0.0), backward=True)
    g = dict(net.gradients())["out.weight"]
    w = dict(net.parameters())["out.weight"]
    k = (1, 0, 2, 1)
    old = w[k]
    w[k] = old + 1e-6
    fp = batch_loss(net, tr64, idx, LossConfig(gamma=0.0))
    w[k] = old - 1e-6
    fm = batch_loss(net, tr64, idx, LossConfig(gamma=0.0))
    w[k] = old
    assert g[k] == pytest.approx((fp - fm) / 2e-6, rel=1e-5)
