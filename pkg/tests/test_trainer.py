"""Training loop, trajectory logs, quadratic testbed, rate fits."""

import json
import math

import numpy as np
import pytest

from stratpix import (ConvergenceConfig, Diverged, FineTuneConfig,
                      InvalidInput, TrainData, ToyModel, apply_model,
                      build_features, build_stratification, census_anchors,
                      dice, feature_dim, fit_rate, forward,
                      gd_steps_closed_form, make_labeled_mask,
                      noise_controlled_descent, pretrain, quad_eigenvalues,
                      quad_summary, sgd_train, step_size, write_jsonl,
                      write_trajectories)
from stratpix.trainer import TRAJECTORY_COLUMNS, StepRecord, TrajectoryLog

from conftest import make_lattice


def _tiny_problem(seed=0, steps=None, num_classes=2, dims=(4, 4),
                  finetune=None):
    rng = np.random.default_rng(seed)
    n = dims[0] * dims[1]
    classes = rng.integers(0, num_classes, size=n)
    classes[:num_classes] = np.arange(num_classes)  # every class present
    lat = make_lattice(dims, classes, num_classes=num_classes,
                       payload=rng.normal(size=n))
    strat = build_stratification(lat, "class")
    data = TrainData(
        lattice=lat, stratification=strat, labels=lat.classes,
        labeled_mask=make_labeled_mask(lat, 0.5, seed=seed),
        n_anchors=8, finetune=finetune or FineTuneConfig())
    model = ToyModel.init(feature_dim(lat), 5, num_classes, 3, seed=seed)
    return lat, strat, data, model


def test_step_size_rules():
    cfg = ConvergenceConfig(T=100, step_rule="constant", constant_step=0.25)
    assert step_size(cfg) == 0.25
    cfg = ConvergenceConfig(T=100, alpha=2.0, l_hat=4.0, sigma_g_hat=1.0,
                            step_rule="prop1")
    # min(1/L, alpha / (sigma sqrt(T))) = min(0.25, 0.2) = 0.2
    assert step_size(cfg) == pytest.approx(0.2)
    cfg = ConvergenceConfig(T=25, alpha=2.0, l_hat=4.0, sigma_g_hat=1.0,
                            step_rule="prop1")
    assert step_size(cfg) == pytest.approx(0.25)
    with pytest.raises(InvalidInput):
        step_size(ConvergenceConfig(T=100, step_rule="prop1"))  # missing rates


def test_convergence_config_validation_and_checkpoints():
    with pytest.raises(InvalidInput):
        ConvergenceConfig(T=0)
    with pytest.raises(InvalidInput):
        ConvergenceConfig(T=10, step_rule="magic")
    cfg = ConvergenceConfig(T=100)
    cps = cfg.checkpoints
    assert len(cps) == 10 and cps[-1] == 99
    cfg = ConvergenceConfig(T=7, checkpoint_every=3)
    assert cfg.checkpoints == [2, 5, 6]


def test_sgd_train_runs_and_is_deterministic():
    lat, strat, data, model = _tiny_problem(seed=1)
    cfg = ConvergenceConfig(T=6, step_rule="constant", constant_step=0.05)
    log1 = sgd_train(model.copy(), data, "sg", cfg, seed=3)
    log2 = sgd_train(model.copy(), data, "sg", cfg, seed=3)
    assert len(log1) == 6 and not log1.diverged
    np.testing.assert_array_equal(log1.column("loss_total"),
                                  log2.column("loss_total"))
    # Different sampler, same seed: different trajectory.
    log3 = sgd_train(model.copy(), data, "ns", cfg, seed=3)
    assert not np.array_equal(log1.column("loss_total"),
                              log3.column("loss_total"))


def test_sgd_train_updates_model_in_place():
    lat, strat, data, model = _tiny_problem(seed=2)
    before = model.theta.copy()
    sgd_train(model, data, "sg",
              ConvergenceConfig(T=3, step_rule="constant", constant_step=0.05),
              seed=0)
    assert not np.array_equal(before, model.theta)


def test_sgd_diverged_carries_partial_log():
    # The bounded loss stack cannot overflow on its own, so corrupt the
    # parameters to exercise the divergence path.
    lat, strat, data, model = _tiny_problem(seed=3)
    model.theta = model.theta * float("nan")
    cfg = ConvergenceConfig(T=50, step_rule="constant", constant_step=0.1)
    with pytest.raises(Diverged) as info:
        sgd_train(model, data, "ns", cfg, seed=0)
    log = info.value.log
    assert log.diverged
    assert len(log.records) == 1  # the bad step is recorded, then aborted
    assert not math.isfinite(log.records[-1].loss_total) or \
        not math.isfinite(log.records[-1].grad_sq_norm)


def test_trajectory_csv_format(tmp_path):
    rec = StepRecord(step=0, loss_total=1.5, loss_contrast=2.0, loss_nn=-0.5,
                     loss_unsup=0.7, loss_sup=0.3, grad_sq_norm=4.0)
    log = TrajectoryLog(seed=9, records=[rec])
    path = write_trajectories([log], tmp_path / "t.csv")
    lines = path.read_text().split("\n")
    assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
    assert lines[0] == ("seed,step,loss_total,loss_contrast,loss_nn,"
                        "loss_unsup,loss_sup,grad_sq_norm")
    assert lines[1].startswith("9,0,1.5,2.0,-0.5,0.7,0.3,4.0")

    jpath = write_jsonl(log, tmp_path / "t.jsonl")
    obj = json.loads(jpath.read_text().splitlines()[0])
    assert obj["seed"] == 9 and obj["grad_sq_norm"] == 4.0
    assert "wall_clock" not in obj


def test_wall_clock_never_serialized(tmp_path):
    lat, strat, data, model = _tiny_problem(seed=4)
    log = sgd_train(model, data, "sg",
                    ConvergenceConfig(T=2, step_rule="constant",
                                      constant_step=0.01), seed=0)
    assert log.wall_clock is not None and log.wall_clock > 0
    p1 = write_trajectories([log], tmp_path / "a.csv")
    text = p1.read_text()
    assert "wall" not in text
    log.wall_clock = 123456.0
    p2 = write_trajectories([log], tmp_path / "b.csv")
    assert p2.read_text() == text


def test_pretrain_decreases_instance_loss():
    lat, strat, data, model = _tiny_problem(seed=5)
    losses = pretrain(model, data, steps=30, seed=0, n_anchors=4, lr=0.05)
    assert len(losses) == 30
    assert np.mean(losses[-5:]) <= np.mean(losses[:5])


def test_census_anchors_covers_every_pixel():
    lat = make_lattice((3, 3), np.zeros(9))
    anchors = census_anchors(lat)
    np.testing.assert_array_equal(anchors.all_pixels(), np.arange(9))


def test_make_labeled_mask_fraction_and_determinism():
    lat = make_lattice((8, 8), np.zeros(64))
    m1 = make_labeled_mask(lat, 0.25, seed=3)
    m2 = make_labeled_mask(lat, 0.25, seed=3)
    assert m1.sum() == 16
    np.testing.assert_array_equal(m1, m2)
    assert not np.array_equal(m1, make_labeled_mask(lat, 0.25, seed=4))
    with pytest.raises(InvalidInput):
        make_labeled_mask(lat, 0.0)


def test_dice_metric():
    pred = np.array([0, 0, 1, 1])
    true = np.array([0, 0, 0, 0])
    assert dice(pred, true, 0) == pytest.approx(2 * 2 / (2 + 4))
    assert dice(pred, true, 1) == 0.0
    assert dice(pred, pred, 1) == 1.0
    assert dice(np.array([0]), np.array([0]), 5) == 1.0  # empty vs empty


def test_quad_eigenvalues():
    lam = quad_eigenvalues(16)
    assert lam[0] == pytest.approx(0.05) and lam[-1] == pytest.approx(1.0)
    assert np.all(np.diff(lam) > 0)
    np.testing.assert_array_equal(quad_eigenvalues(1), [1.0])


def test_noiseless_descent_matches_closed_form():
    dim, T, thr = 8, 300, 1e-3
    runs = noise_controlled_descent(dim, [0.0], T, seeds=[0, 1], threshold=thr)
    expected = gd_steps_closed_form(dim, T, thr)
    for r in runs:
        assert r.reached and r.steps == expected
    # Identical across seeds: no noise is consumed at sigma = 0.
    np.testing.assert_array_equal(runs[0].grad_sq_traj, runs[1].grad_sq_traj)


def test_noise_slows_convergence_and_monotone_summary():
    runs = noise_controlled_descent(8, [0.0, 0.3, 1.2], 400,
                                    seeds=range(8), threshold=1e-3)
    table = quad_summary(runs)
    means = [e["mean_steps"] for e in table]
    assert means[0] <= means[1] <= means[2]
    assert means[0] < means[2]


def test_fit_rate_recovers_planted_coefficients():
    t = np.arange(1, 2001, dtype=np.float64)
    # Build a trajectory whose running average is exactly 3/t + 0.5/sqrt(t).
    running = 3.0 / t + 0.5 / np.sqrt(t)
    totals = running * t
    traj = np.diff(totals, prepend=0.0)
    c1, c2 = fit_rate(traj)
    assert c1 == pytest.approx(3.0, rel=1e-8)
    assert c2 == pytest.approx(0.5, rel=1e-8)


def test_forward_normalizes_embeddings():
    lat = make_lattice((2, 2), np.array([0, 1, 0, 1]),
                       payload=np.arange(1.0, 5.0))
    model = ToyModel.init(feature_dim(lat), 4, 2, 3, seed=0)
    rep = forward(model, lat)
    norms = np.linalg.norm(rep.embeddings, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    # Zero weights still produce finite outputs (safe norm floor).
    model.theta = np.zeros_like(model.theta)
    rep0 = forward(model, lat)
    assert np.isfinite(rep0.embeddings).all()


def test_degenerate_embedding_rows_get_zero_gradient():
    # An all-zero feature row at zero-bias init yields a zero raw
    # embedding; its unit row stays zero and its normalization VJP must
    # vanish rather than blow up by the safe-norm floor.
    from stratpix import apply_model, backward
    lat = make_lattice((2, 2), np.array([0, 1, 0, 1]),
                       payload=np.arange(4.0))  # pixel 0 features are 0
    model = ToyModel.init(feature_dim(lat), 4, 2, 3, seed=0)
    out = apply_model(model, build_features(lat))
    assert np.linalg.norm(out.embeddings[0]) == 0.0
    d_unit = np.ones_like(out.embeddings)
    grad = backward(model, out, d_unit=d_unit)
    assert np.isfinite(grad).all()
    assert np.abs(grad).max() < 1e6


def test_build_features_scaling():
    lat = make_lattice((3, 5), np.zeros(15), payload=np.ones(15))
    feats = build_features(lat)
    assert feats.shape == (15, 3)
    assert feats[:, 0].max() == pytest.approx(1.0)  # rows scaled by dim-1
    assert feats[:, 1].max() == pytest.approx(1.0)
    assert (feats[:, 2] == 1.0).all()
