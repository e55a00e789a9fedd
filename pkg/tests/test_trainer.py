import numpy as np
import pytest

from ucdr import trainer
from ucdr.model import ModelDims, init


def test_lr_schedule_endpoints():
    assert trainer.lr_at(0, 1e-3, 1e-6, 20) == pytest.approx(1e-3, rel=1e-12)
    assert trainer.lr_at(20, 1e-3, 1e-6, 20) == pytest.approx(1e-6, rel=1e-12)
    assert trainer.lr_at(57, 1e-3, 1e-6, 20) == pytest.approx(1e-6, rel=1e-12)
    assert trainer.lr_at(10, 1e-3, 1e-6, 20) == pytest.approx(3.16228e-5, rel=1e-5)


def test_lr_schedule_is_monotone():
    lrs = [trainer.lr_at(e, 0.05, 1e-4, 20) for e in range(30)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def scalar_state(theta):
    dims = ModelDims(1, (), 1, 1)
    model = init(dims, 0)
    flat = np.zeros(model.params.size)
    flat[0] = theta
    return trainer.TrainState(model.with_params(model.params.with_flat(flat)), np.zeros(model.params.size))


def test_nesterov_two_steps_on_quadratic():
    # f(theta) = theta^2 from theta = 1 with lr 0.1, mu 0.9
    state = scalar_state(1.0)
    for step in range(2):
        g = np.zeros(state.velocity.shape)
        g[0] = 2.0 * state.model.params.flat()[0]
        trainer.sgd_nesterov_step(state, g, 0.1, 0.9)
        if step == 0:
            assert state.model.params.flat()[0] == pytest.approx(0.62, abs=1e-12)
    # v2 = 0.9 * -0.2 - 0.124 = -0.304; theta2 = 0.62 - 0.2736 - 0.124
    assert state.velocity[0] == pytest.approx(-0.304, abs=1e-12)
    assert state.model.params.flat()[0] == pytest.approx(0.2224, abs=1e-12)


def test_zero_momentum_is_plain_sgd():
    state = scalar_state(1.0)
    g = np.zeros(state.velocity.shape)
    g[0] = 2.0
    trainer.sgd_nesterov_step(state, g, 0.1, 0.0)
    assert state.model.params.flat()[0] == pytest.approx(0.8, abs=1e-15)


def test_zero_gradient_leaves_parameters():
    state = scalar_state(0.3)
    before = state.model.params.flat().copy()
    trainer.sgd_nesterov_step(state, np.zeros_like(before), 0.1, 0.9)
    np.testing.assert_array_equal(state.model.params.flat(), before)


def test_non_finite_gradient_aborts():
    state = scalar_state(0.3)
    g = np.zeros(state.velocity.shape)
    g[0] = np.nan
    with pytest.raises(trainer.TrainingError):
        trainer.sgd_nesterov_step(state, g, 0.1, 0.9)
    assert state.diverged


def test_early_stop_after_patience(tiny, monkeypatch):
    ds, sem, split, cfg = tiny
    curve = {e: 0.1 * e for e in range(4)}

    def fake_val(model, q, s, k):
        fake_val.calls += 1
        return curve.get(fake_val.calls - 1, 0.0)

    fake_val.calls = 0
    monkeypatch.setattr(trainer, "validation_map", fake_val)
    _, logs, state = trainer.train(ds, split, sem, cfg.replace(max_epochs=100, patience=15))
    assert state.best_epoch == 3
    assert logs[-1].epoch == 18
    assert len(logs) == 19


def test_training_is_deterministic(tiny):
    ds, sem, split, cfg = tiny
    cfg = cfg.replace(patience=4)
    m1, logs1, _ = trainer.train(ds, split, sem, cfg)
    m2, logs2, _ = trainer.train(ds, split, sem, cfg)
    assert m1 == m2
    assert logs1 == logs2
    m3, _, _ = trainer.train(ds, split, sem, cfg.replace(seed=1))
    assert m3 != m1


def test_epoch_log_invariants(tiny):
    ds, sem, split, cfg = tiny
    cfg = cfg.replace(patience=4)
    _, logs, state = trainer.train(ds, split, sem, cfg)
    assert [r.epoch for r in logs] == list(range(len(logs)))
    for r in logs:
        expected = r.ce_mix + cfg.gamma1 * r.mp + cfg.gamma2 * r.sn
        assert r.loss == pytest.approx(expected, rel=1e-9, abs=1e-12)
        assert r.lr == trainer.lr_at(r.epoch, cfg.lr_start, cfg.lr_end, cfg.decay_epochs)
        assert 0.0 <= r.val_map <= 1.0
    assert state.best_val_map == max(r.val_map for r in logs)


def test_resume_matches_uninterrupted_run(tiny, tmp_path):
    ds, sem, split, cfg = tiny
    _, full_logs, full_state = trainer.train(ds, split, sem, cfg.replace(max_epochs=5, patience=5))
    _, head, state = trainer.train(ds, split, sem, cfg.replace(max_epochs=2, patience=2))
    trainer.save_checkpoint(state, tmp_path / "last.ckpt")
    resumed = trainer.load_checkpoint(tmp_path / "last.ckpt")
    _, tail, end = trainer.train(ds, split, sem, cfg.replace(max_epochs=5, patience=5), resume=resumed)
    assert tail[0].epoch == 2
    assert tail[0].lr == trainer.lr_at(2, cfg.lr_start, cfg.lr_end, cfg.decay_epochs)
    assert head + tail == full_logs
    assert end.model == full_state.model


def test_checkpoint_save_load_save_is_identical(tiny, tmp_path):
    ds, sem, split, cfg = tiny
    _, _, state = trainer.train(ds, split, sem, cfg.replace(max_epochs=1))
    trainer.save_checkpoint(state, tmp_path / "a.ckpt")
    trainer.save_checkpoint(trainer.load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_training_loss_goes_down(tiny):
    ds, sem, split, cfg = tiny
    _, logs, _ = trainer.train(ds, split, sem, cfg.replace(max_epochs=6, patience=6, use_mixup=False))
    assert logs[-1].loss < logs[0].loss


def test_write_log_is_reproducible(tiny, tmp_path):
    ds, sem, split, cfg = tiny
    _, logs, _ = trainer.train(ds, split, sem, cfg.replace(max_epochs=2, patience=2))
    trainer.write_log(logs, tmp_path / "a.csv")
    _, logs2, _ = trainer.train(ds, split, sem, cfg.replace(max_epochs=2, patience=2))
    trainer.write_log(logs2, tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    assert text.splitlines()[0] == "epoch,loss,ce_mix,mp,sn,lr,val_map"


def test_latent_dim_must_match_semantics(tiny):
    ds, sem, split, cfg = tiny
    with pytest.raises(ValueError):
        trainer.train(ds, split, sem, cfg.replace(latent_dim=sem.dim + 1))
