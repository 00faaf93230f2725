import math

import numpy as np
import pytest
import torch

from ofsiren import optim
from ofsiren.flow_field import synth_flow
from ofsiren.optim import (NonFiniteGradient, NumericalAbort, TrainConfig, TrainState, adam_step,
                           cosine_lr, evaluate_psnr, fit, read_log)
from ofsiren.siren_net import SirenConfig, init_siren
from ofsiren.video_store import SceneSpec, VideoTensor, split_observed


class ScalarModel:
    """Stand-in exposing one scalar parameter the way SirenModel does."""

    def __init__(self, value):
        self.p = torch.tensor([value], dtype=torch.float64)

    def parameter_list(self):
        return [self.p]

    def parameter_names(self):
        return ["p"]


def gray_video(T=8, H=16, W=16, value=0.5):
    video = VideoTensor(np.full((T, H, W, 3), value))
    split_observed(video, 2)
    return video


def static_flow(video):
    return synth_flow(SceneSpec(motion="static", dims=video.dims))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lam=2.0)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")


def test_cosine_schedule_points():
    assert cosine_lr(0, 100, 2e-3) == 2e-3
    assert cosine_lr(100, 100, 2e-3) == 0.0
    assert cosine_lr(50, 100, 2e-3) == pytest.approx(1e-3, rel=1e-15)
    vals = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1.0)
    with pytest.raises(ValueError):
        cosine_lr(-1, 100, 1.0)


def test_adam_zero_gradient_keeps_parameters():
    m = ScalarModel(3.0)
    state = TrainState(0, [torch.zeros(1, dtype=torch.float64)], [torch.zeros(1, dtype=torch.float64)],
                       np.random.default_rng(0))
    adam_step(m, [torch.zeros(1, dtype=torch.float64)], state, lr=0.1)
    assert m.p.item() == 3.0
    assert state.step == 1


def test_adam_first_step_by_hand():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    m = ScalarModel(1.0)
    state = TrainState(0, [torch.zeros(1, dtype=torch.float64)], [torch.zeros(1, dtype=torch.float64)],
                       np.random.default_rng(0))
    adam_step(m, [torch.ones(1, dtype=torch.float64)], state, lr, b1, b2, eps)
    # hand recurrence: m1 = 0.1, v1 = 0.001, both bias-corrected to 1
    m1, v1 = (1 - b1) * 1.0, (1 - b2) * 1.0
    expect = 1.0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    assert m.p.item() == pytest.approx(expect, rel=1e-15)
    assert m.p.item() == pytest.approx(1.0 - lr, rel=1e-6)


def test_adam_rejects_nonfinite_and_leaves_model():
    model = init_siren(SirenConfig(3, 4, 30.0), seed=0)
    before = [p.detach().clone() for p in model.parameter_list()]
    state = TrainState.fresh(model, 0)
    grads = [torch.zeros_like(p) for p in model.parameter_list()]
    grads[3][1] = math.inf
    with pytest.raises(NonFiniteGradient, match="layer1.bias"):
        adam_step(model, grads, state, 0.1)
    assert state.step == 0
    for p, q in zip(model.parameter_list(), before):
        assert torch.equal(p, q)


def test_adam_deterministic():
    grads_rng = np.random.default_rng(5)
    a = init_siren(SirenConfig(3, 4, 30.0), seed=1)
    b = init_siren(SirenConfig(3, 4, 30.0), seed=1)
    grads = [torch.from_numpy(grads_rng.normal(size=p.shape)) for p in a.parameter_list()]
    adam_step(a, grads, TrainState.fresh(a, 0), 1e-3)
    adam_step(b, grads, TrainState.fresh(b, 0), 1e-3)
    for p, q in zip(a.parameter_list(), b.parameter_list()):
        assert torch.equal(p, q)


def test_trivial_fit_reaches_40db_and_descends():
    video = gray_video()
    model = init_siren(SirenConfig(3, 16, 30.0), seed=0)
    result = fit(model, video, static_flow(video),
                 TrainConfig(max_lr=1e-3, epochs=200, batch_size=256, lam=0.0, seed=0))
    observed, _ = evaluate_psnr(model, video)
    assert observed >= 40.0
    losses = np.array([h.obs_loss for h in result.history])
    windows = losses.reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_steps_per_epoch_and_schedule_end(translating_scene):
    video, spec = translating_scene
    model = init_siren(SirenConfig(2, 4, 10.0), seed=0)
    cfg = TrainConfig(max_lr=1e-3, epochs=2, batch_size=4096, lam=0.12, seed=0)
    result = fit(model, video, synth_flow(spec), cfg)
    # 8 observed 48x48 frames = 18432 samples = 5 batches per epoch
    assert result.state.step == 10
    assert result.history[-1].lr == cosine_lr(9, 10, 1e-3)


def test_fit_deterministic_and_first_step_identical():
    video = gray_video(value=0.3)
    cfg = TrainConfig(max_lr=1e-3, epochs=3, batch_size=100, lam=0.12, seed=4)
    runs = []
    for _ in range(2):
        m = init_siren(SirenConfig(3, 8, 30.0), seed=4)
        runs.append((m, fit(m, video, static_flow(video), cfg)))
    (m1, r1), (m2, r2) = runs
    assert [h.row() for h in r1.history] == [h.row() for h in r2.history]
    for p, q in zip(m1.parameter_list(), m2.parameter_list()):
        assert torch.equal(p, q)


def test_resume_matches_uninterrupted(tmp_path, translating_scene):
    video, spec = translating_scene
    flow = synth_flow(spec)
    cfg = TrainConfig(max_lr=1e-3, epochs=4, batch_size=2048, lam=0.12, seed=2, checkpoint_every=2)
    full = init_siren(SirenConfig(3, 8, 30.0), seed=2)
    fit(full, video, flow, cfg, out_dir=tmp_path / "full")

    part = init_siren(SirenConfig(3, 8, 30.0), seed=2)
    # stop after two epochs by interrupting at the start of the third
    calls = {"n": 0}
    real = optim.loss_terms

    def interrupting(*a, **k):
        calls["n"] += 1
        if calls["n"] > 2 * 9:
            raise KeyboardInterrupt
        return real(*a, **k)

    optim.loss_terms = interrupting
    try:
        with pytest.raises(KeyboardInterrupt):
            fit(part, video, flow, cfg, out_dir=tmp_path / "part")
    finally:
        optim.loss_terms = real
    resumed = init_siren(SirenConfig(3, 8, 30.0), seed=2)
    fit(resumed, video, flow, cfg, out_dir=tmp_path / "part", resume=True)

    assert [h.row() for h in read_log(tmp_path / "full" / "train_log.csv")] == \
        [h.row() for h in read_log(tmp_path / "part" / "train_log.csv")]
    for p, q in zip(full.parameter_list(), resumed.parameter_list()):
        assert torch.equal(p, q)


def test_nan_loss_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    video = gray_video()
    model = init_siren(SirenConfig(3, 8, 30.0), seed=0)
    cfg = TrainConfig(max_lr=1e-3, epochs=5, batch_size=256, lam=0.12, seed=0)
    real = optim.loss_terms
    calls = {"n": 0}
    snapshot = {}

    def poisoned(model_, batch, loss_cfg, *a, **k):
        calls["n"] += 1
        if calls["n"] == 4 * 2 + 1:  # first step of the third epoch
            snapshot["params"] = [p.detach().clone() for p in model_.parameter_list()]
            total, report = real(model_, batch, loss_cfg)
            report.total = math.nan
            return total * math.nan, report
        return real(model_, batch, loss_cfg, *a, **k)

    monkeypatch.setattr(optim, "loss_terms", poisoned)
    with pytest.raises(NumericalAbort, match="last good checkpoint") as info:
        fit(model, video, static_flow(video), cfg, out_dir=tmp_path)
    assert info.value.checkpoint.exists()
    for p, q in zip(model.parameter_list(), snapshot["params"]):
        assert torch.equal(p, q)
    state = TrainState.load(tmp_path / "train_state.npz", model)
    assert state.epoch == 2 and state.step == 8


def test_eval_cadence_logs_psnr():
    video = gray_video()
    model = init_siren(SirenConfig(3, 8, 30.0), seed=0)
    cfg = TrainConfig(max_lr=1e-3, epochs=5, batch_size=512, lam=0.12, seed=0, eval_every=2)
    hist = fit(model, video, static_flow(video), cfg).history
    has = [not math.isnan(h.observed_psnr) for h in hist]
    assert has == [False, True, False, True, True]


def test_float32_precision_runs():
    video = gray_video()
    cfg = TrainConfig(max_lr=1e-3, epochs=2, batch_size=512, lam=0.12, seed=0, precision="float32")
    model = init_siren(SirenConfig(3, 8, 30.0), seed=0, dtype=cfg.dtype)
    hist = fit(model, video, static_flow(video), cfg).history
    assert model.dtype == torch.float32
    assert all(math.isfinite(h.total) for h in hist)
