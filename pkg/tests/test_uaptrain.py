import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uapforge import gradcore as gc, spkmodel, uaptrain
from uapforge.audio import AudioClip
from uapforge.optim import AdamState
from uapforge.spkmodel import EnrollmentSet, SpeakerModel
from uapforge.uaptrain import AttackConfig, Patch


def oracle_phi(x, y):
    # written from the piecewise definition, independent of the library branch order
    x, y = float(x), float(y)
    sx = (x > 0) - (x < 0)
    sy = (y > 0) - (y < 0)
    if abs(y) > abs(x):
        return math.expm1(abs(y) - abs(x))
    if sx * sy == -1:
        return math.expm1(abs(y))
    return 0.0


@pytest.mark.parametrize("x, y, want", [
    (0.1, 0.2, math.exp(0.1) - 1),
    (0.2, 0.1, 0.0),
    (0.2, -0.1, math.exp(0.1) - 1),
    (0.0, 0.0, 0.0),
])
def test_phi_examples(x, y, want):
    assert uaptrain.phi(x, y) == pytest.approx(want, abs=1e-12)


def test_phi_random_oracle():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.02, 0.02, size=(1000, 2))
    pts[::10, 1] = 0.0
    pts[5::10, 0] = 0.0
    for x, y in pts:
        assert abs(uaptrain.phi(float(x), float(y)) - oracle_phi(float(x), float(y))) <= 1e-12


def test_exp_tv_closed_forms():
    assert uaptrain.exp_tv_loss(np.zeros(16)).item() == 0.0
    assert uaptrain.exp_tv_loss(np.full(16, 0.004)).item() == 0.0
    a = 0.007
    alt = np.tile([a, -a], 8)
    assert uaptrain.exp_tv_loss(alt).item() == pytest.approx(math.exp(a) - 1, rel=1e-12)


def test_exp_tv_matches_scalar_sum():
    p = np.random.default_rng(1).uniform(-0.01, 0.01, size=40)
    want = sum(oracle_phi(p[i], p[(i + 1) % 40]) for i in range(40)) / 40
    assert uaptrain.exp_tv_loss(p).item() == pytest.approx(want, rel=1e-12)
    open_sum = sum(oracle_phi(p[i], p[i + 1]) for i in range(39)) / 40
    assert uaptrain.exp_tv_loss(p, circular=False).item() == pytest.approx(open_sum, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-0.01, 0.01, allow_nan=False), min_size=2, max_size=64), st.integers(0, 63))
def test_exp_tv_nonnegative_and_rotation_invariant(values, shift):
    p = np.array(values)
    base = uaptrain.exp_tv_loss(p).item()
    assert base >= 0.0
    assert uaptrain.exp_tv_loss(np.roll(p, shift)).item() == pytest.approx(base, rel=1e-12, abs=1e-18)


def test_exp_tv_gradient():
    p = np.random.default_rng(2).uniform(-0.01, 0.01, size=24)
    rep = gc.finite_diff_check(lambda t: uaptrain.exp_tv_loss(t), p, rel_tol=1e-4)
    assert rep.passed, rep


def test_l2_closed_forms():
    assert uaptrain.l2_loss(np.zeros(8)).item() == 0.0
    one_hot = np.zeros(8)
    one_hot[3] = -0.5
    assert uaptrain.l2_loss(one_hot).item() == pytest.approx(0.5 / 8, rel=1e-15)
    assert uaptrain.l2_loss(np.full(16, 0.3)).item() == pytest.approx(0.3 / 4, rel=1e-14)


@pytest.fixture(scope="module")
def tiny():
    return SpeakerModel.init(3, seed=4, kernels=[8, 4], strides=[4, 2], channels=[1, 4, 4], emb_dim=6)


@pytest.fixture(scope="module")
def clip():
    return np.random.default_rng(5).normal(size=256) * 0.3


def test_fooling_loss_zero_patch_is_one(tiny, clip):
    assert uaptrain.fooling_loss(tiny, clip, np.zeros(32)).item() == pytest.approx(1.0, abs=1e-12)


def test_fooling_loss_range(tiny, clip):
    rng = np.random.default_rng(6)
    for _ in range(10):
        v = uaptrain.fooling_loss(tiny, clip, rng.normal(size=32)).item()
        assert -1.0 <= v <= 1.0


def test_fooling_loss_gradient(tiny, clip):
    clean = spkmodel.embed(tiny, clip)
    p0 = np.random.default_rng(7).uniform(-0.05, 0.05, size=16)
    rep = gc.finite_diff_check(lambda p: uaptrain.fooling_loss(tiny, clip, p, clean), p0, rel_tol=1e-3)
    assert rep.passed, rep


def test_tiling_consistency(tiny):
    rng = np.random.default_rng(8)
    p = rng.uniform(-0.01, 0.01, size=64)
    x = rng.normal(size=128) * 0.2
    via_tile = uaptrain.fooling_loss(tiny, x, p).item()
    explicit = uaptrain.fooling_loss(tiny, x, np.concatenate([p, p])).item()
    assert via_tile == explicit
    adv = spkmodel.embed(tiny, x + np.concatenate([p, p]))
    assert via_tile == pytest.approx(float(np.dot(spkmodel.embed(tiny, x), adv)), abs=1e-15)


def test_total_loss_compositions(tiny, clip):
    cfg = AttackConfig(patch_len=32)
    assert uaptrain.total_loss(tiny, [clip], np.zeros(32), cfg).item() == pytest.approx(1.0, abs=1e-12)
    p = np.random.default_rng(9).uniform(-0.01, 0.01, size=32)
    reg_only = AttackConfig(patch_len=32, w_fooling=0.0, w_exptv=1.0)
    assert uaptrain.total_loss(tiny, [clip], p, reg_only).item() == pytest.approx(
        uaptrain.exp_tv_loss(p).item(), rel=1e-14)
    single = uaptrain.total_loss(tiny, [clip], p, cfg).item()
    assert uaptrain.total_loss(tiny, [clip] * 3, p, cfg).item() == pytest.approx(single, rel=1e-14)
    fool_only = AttackConfig(patch_len=32, w_exptv=0.0)
    assert uaptrain.total_loss(tiny, [clip], p, fool_only).item() == uaptrain.fooling_loss(tiny, clip, p).item()
    with pytest.raises(ValueError):
        uaptrain.total_loss(tiny, [], p, cfg)


def test_adam_first_step_is_sign():
    patch = Patch(np.zeros(5))
    adam = AdamState.zeros_like(patch.values)
    uaptrain.adam_step(patch, np.array([2.0, -3.0, 0.5, -1e-3, 7.0]), adam, 1e-3)
    np.testing.assert_allclose(patch.values, -1e-3 * np.array([1, -1, 1, -1, 1]), rtol=1e-4)


def test_adam_clamps_to_epsilon():
    patch = Patch(np.full(3, 0.0099))
    adam = AdamState.zeros_like(patch.values)
    uaptrain.adam_step(patch, np.full(3, -1.0), adam, 0.0101)
    assert np.all(patch.values == 0.01)


def test_adam_zero_grad_and_nan():
    patch = Patch(np.array([0.001, -0.002]))
    adam = AdamState.zeros_like(patch.values)
    for _ in range(20):
        uaptrain.adam_step(patch, np.zeros(2), adam, 3e-3)
    np.testing.assert_array_equal(patch.values, [0.001, -0.002])
    with pytest.raises(FloatingPointError):
        uaptrain.adam_step(patch, np.array([np.nan, 0.0]), adam, 3e-3)
    with pytest.raises(ValueError):
        uaptrain.adam_step(patch, np.zeros(3), adam, 3e-3)


def test_attack_config_defaults_and_validation():
    cfg = AttackConfig()
    assert (cfg.lr, cfg.epochs, cfg.batch, cfg.epsilon, cfg.w_fooling, cfg.w_exptv, cfg.patch_len) == (
        3e-3, 250, 64, 0.01, 1.0, 30.0, 3200)
    with pytest.raises(ValueError):
        AttackConfig(loss_variant="pesq")
    with pytest.raises(ValueError):
        AttackConfig(w_exptv=-1)
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg


def test_patch_round_trip_and_errors(tmp_path):
    p = Patch(np.random.default_rng(10).uniform(-0.01, 0.01, 3200), config={"seed": 1})
    uaptrain.save_patch(p, tmp_path / "p.bin")
    back = uaptrain.load_patch(tmp_path / "p.bin")
    assert back.values.tobytes() == p.values.tobytes() and back.epsilon == p.epsilon
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(uaptrain.PatchFormatError):
        uaptrain.load_patch(tmp_path / "t.bin")


def test_patch_wav_export_bounds(tmp_path):
    from uapforge.audio import read_wav
    import wave
    p = Patch(np.tile([0.01, -0.01, 0.004], 100))
    uaptrain.export_patch_wav(p, tmp_path / "p.wav")
    with wave.open(str(tmp_path / "p.wav"), "rb") as wf:
        ints = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    assert np.max(np.abs(ints)) == 328
    assert len(read_wav(tmp_path / "p.wav")) == 300


def _toy_setup():
    model = SpeakerModel.init(2, seed=11, kernels=[8, 4], strides=[4, 2], channels=[1, 4, 4], emb_dim=4)
    rng = np.random.default_rng(12)
    clips = [AudioClip(rng.normal(size=320) * 0.2, speaker_id=f"s{i % 2}") for i in range(8)]
    enr = spkmodel.build_enrollment(model, {"s0": [c.samples for c in clips[0::2]],
                                            "s1": [c.samples for c in clips[1::2]]}, enroll_count=4)
    return model, clips, enr


def test_train_uap_toy_run():
    model, clips, enr = _toy_setup()
    cfg = AttackConfig(patch_len=32, epochs=10, batch=4, lr=3e-3, epsilon=0.05, seed=3)
    val = uaptrain.ValidationSet(enr, clips)
    patch, log = uaptrain.train_uap(model, clips, cfg, validation=val)
    epochs = [r for r in log if not r.get("final")]
    assert epochs[0]["val_fooling_rate"] == 0.0
    assert epochs[9]["fooling_loss"] < epochs[0]["fooling_loss"]
    assert np.max(np.abs(patch.values)) <= 0.05
    again, _ = uaptrain.train_uap(model, clips, cfg)
    assert again.values.tobytes() == patch.values.tobytes()


def test_train_uap_resume_matches_uninterrupted(tmp_path):
    model, clips, _ = _toy_setup()
    full_cfg = AttackConfig(patch_len=32, epochs=4, batch=4, epsilon=0.05, seed=5)
    full, _ = uaptrain.train_uap(model, clips, full_cfg)
    ck = tmp_path / "state.npz"

    calls = []

    def interrupt(rec):
        calls.append(rec)
        if len(calls) == 2:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        uaptrain.train_uap(model, clips, full_cfg, log_fn=interrupt, checkpoint_path=ck)
    state = uaptrain.load_state(ck)
    assert state.epoch == 2
    resumed, log = uaptrain.train_uap(model, clips, full_cfg, resume=state)
    assert resumed.values.tobytes() == full.values.tobytes()
    assert [r["epoch"] for r in log] == [0, 1, 2, 3]
