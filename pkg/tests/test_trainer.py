import dataclasses

import numpy as np
import pytest

import wpsseg.trainer as trainer_mod
from wpsseg.datagen import generate_split
from wpsseg.model import StepBatch, init_params, loss_only
from wpsseg.trainer import (METRICS_HEADER, ConfigError, TrainConfig, TrainingAborted, metrics_csv, poly_lr,
                            sgd_step, train)


def small_cfg(**kw):
    base = dict(crop=32, batch_clean=4, batch_degraded=4, epochs=2, seed=5, tau=0.5)
    return TrainConfig(**(base | kw))


def test_clean_only_never_touches_degraded(tiny_scenes):
    res = train(small_cfg(mode="clean_only"), tiny_scenes, 4)
    assert all(r["l_d"] == 0 for r in res.rows)
    assert res.data.degraded_reads == 0 and res.data.clean_reads > 0


def test_semi_reads_degraded_and_can_be_confident(tiny_scenes):
    res = train(small_cfg(tau=0.3), tiny_scenes, 4)
    assert res.data.degraded_reads == len(res.rows) * 4
    assert any(r["confident_fraction"] > 0 for r in res.rows)


def test_gamma_zero_teacher_tracks_student_each_step(tiny_scenes):
    cfg = small_cfg(gamma=0.0)
    ckpt = None
    for _ in range(3):
        ckpt = train(cfg, tiny_scenes, 4, resume=ckpt, max_steps=1).checkpoint
        assert ckpt.teacher.equal(ckpt.student)


def test_teacher_changes_only_inside_ema(tiny_scenes, monkeypatch):
    calls = []
    real = trainer_mod.ema_update

    def spy(teacher, student, gamma):
        calls.append(teacher.checksum())
        if len(calls) > 1:
            # nothing touched the teacher since the previous EMA call
            assert calls[-1] == spy.after
        real(teacher, student, gamma)
        spy.after = teacher.checksum()

    monkeypatch.setattr(trainer_mod, "ema_update", spy)
    res = train(small_cfg(), tiny_scenes, 4)
    assert len(calls) == len(res.rows) == len(res.traces)
    assert all(t.ema_applied for t in res.traces)
    assert [t.step for t in res.traces] == list(range(len(res.traces)))


def test_teacher_starts_as_student_copy(tiny_scenes):
    res = train(small_cfg(gamma=0.999999), tiny_scenes, 4, max_steps=1)
    init = init_params(4, 5)
    assert np.allclose(res.checkpoint.teacher["dec.conv2.w"], init["dec.conv2.w"], atol=1e-5)


def test_two_runs_bit_identical(tiny_scenes):
    a = train(small_cfg(), tiny_scenes, 4, tiny_scenes[:4])
    b = train(small_cfg(), tiny_scenes, 4, tiny_scenes[:4])
    assert metrics_csv(a.rows, {}) == metrics_csv(b.rows, {})
    assert a.checkpoint.student.equal(b.checkpoint.student)
    assert a.checkpoint.teacher.equal(b.checkpoint.teacher)


def test_resume_equals_uninterrupted(tiny_scenes):
    cfg = small_cfg(epochs=3)
    full = train(cfg, tiny_scenes, 4)
    half = train(cfg, tiny_scenes, 4, max_steps=3)
    rest = train(cfg, tiny_scenes, 4, resume=half.checkpoint)
    assert rest.checkpoint.step == full.checkpoint.step
    assert [r["step"] for r in rest.rows] == list(range(3, full.checkpoint.step))
    assert metrics_csv(half.rows + rest.rows) == metrics_csv(full.rows)
    assert rest.checkpoint.student.equal(full.checkpoint.student)


def test_epoch_end_rows_carry_val_miou(tiny_scenes):
    res = train(small_cfg(), tiny_scenes, 4, tiny_scenes[:4])
    vals = [r["val_miou"] for r in res.rows]
    assert vals[1] is not None and vals[3] is not None and vals[0] is None and vals[2] is None


def test_csv_header_and_config_line(tiny_scenes):
    res = train(small_cfg(), tiny_scenes, 4, max_steps=2)
    lines = metrics_csv(res.rows, {"tau": 0.5}).splitlines()
    assert lines[0] == '# config={"tau": 0.5}'
    assert lines[1] == ",".join(METRICS_HEADER)
    assert len(lines) == 4


def test_lr_follows_poly_schedule(tiny_scenes):
    res = train(small_cfg(), tiny_scenes, 4)
    total = len(res.rows)
    assert [r["lr"] for r in res.rows] == [poly_lr(1e-3, s, total) for s in range(total)]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_aborts_with_trace(tiny_scenes):
    ok = train(small_cfg(), tiny_scenes, 4, max_steps=1).checkpoint
    ok.student["enc.conv1.w"][...] = np.inf
    with pytest.raises(TrainingAborted) as exc:
        train(small_cfg(), tiny_scenes, 4, resume=ok)
    assert exc.value.trace.step == 1 and "enc.conv1.w" in str(exc.value)


@pytest.mark.parametrize("bad", [dict(tau=0.0), dict(gamma=1.0), dict(batch_clean=0), dict(crop=31),
                                 dict(mode="full"), dict(ld_normalize="x"), dict(keep_prob=1.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        dataclasses.replace(TrainConfig(), **bad).validate()


def _params_and_grads():
    p = init_params(3, 0, np.float64)
    g = p.zeros_like()
    for k in g:
        g[k][...] = np.random.default_rng(len(k)).normal(size=g[k].shape)
    return p, g


def test_sgd_without_momentum_is_vanilla():
    p, g = _params_and_grads()
    before = p.copy()
    sgd_step(p, g, {}, 0.1, momentum=0.0)
    for k in p:
        np.testing.assert_array_equal(p[k], before[k] - 0.1 * g[k])


def test_head_multiplier_scales_decoder_group():
    p, g = _params_and_grads()
    before = p.copy()
    sgd_step(p, g, {}, 1e-3, head_lr_mult=40.0)
    for k in p:
        lr = 4e-2 if k.startswith("dec.") else 1e-3
        np.testing.assert_allclose(p[k], before[k] - lr * g[k], rtol=1e-14)


def test_momentum_accumulates():
    p, g = _params_and_grads()
    state = {}
    sgd_step(p, g, state, 0.0)
    sgd_step(p, g, state, 0.0)
    np.testing.assert_allclose(state["dec.conv2.w"], 1.9 * g["dec.conv2.w"])


def test_freeze_encoder_leaves_encoder_bits():
    p, g = _params_and_grads()
    before = p.copy()
    sgd_step(p, g, {}, 0.1, freeze_encoder=True)
    for k in p:
        assert np.array_equal(p[k], before[k]) == k.startswith("enc.")


def test_loss_on_probe_batch_drops_20_percent_in_200_steps():
    scenes = generate_split(64, 8, 0, size=64, num_classes=6)
    cfg = TrainConfig()
    probe = StepBatch(np.stack([s.clean for s in scenes[:8]]), np.stack([s.label for s in scenes[:8]]))
    start = loss_only(init_params(6, cfg.seed), probe)
    res = train(cfg, scenes, 6, max_steps=200)
    end = loss_only(res.checkpoint.student, probe)
    assert end <= 0.8 * start, (start, end)


def test_pseudo_labels_use_configured_tau(tiny_scenes):
    p = init_params(4, 0)
    data = trainer_mod.TrainData(tiny_scenes, 4)
    cfg = small_cfg(tau=0.3)
    batch = trainer_mod.build_step_batch(cfg, data, p, 0, 0, [0, 1, 2, 3], [0, 1, 2, 3])
    assert batch.conf1.dtype == np.uint8 and set(np.unique(batch.conf1)) <= {0, 1}
    assert batch.strong1.shape == batch.clean.shape == (4, 3, 32, 32)
    assert batch.mask1.shape == (4, 32) and np.all(batch.mask1 + batch.mask2 == 1)
