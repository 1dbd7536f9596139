import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal as sps

from nervehand import synthgen
from nervehand.synthgen import FS, GestureSpec


def band_power(x, lo=25.0, hi=600.0):
    """Power in [lo, hi] Hz from a periodogram, computed independently of the generator."""
    f, p = sps.periodogram(x, fs=FS)
    sel = (f >= lo) & (f <= hi)
    return p[sel].sum()


def test_fist_single_rep_envelopes_identical():
    env = synthgen.synth_intent(GestureSpec("fist", (1, 1, 1, 1, 1), repetitions=1), 3)
    assert np.all(env == env[0])
    assert env.max() == 1.0


def test_inactive_finger_stays_zero():
    env = synthgen.synth_intent(synthgen.GESTURES["pointing"], 7)
    assert not env[1].any()
    assert env[0].any() and env[2].any()


def test_trapezoid_shape():
    env = synthgen.synth_intent(GestureSpec("t", (1, 0, 0, 0, 0), repetitions=1, hold_s=1.0), 0)[0]
    start = np.argmax(env > 0)
    ramp = int(0.3 * FS)
    assert np.allclose(np.diff(env[start:start + ramp]), 1 / ramp)
    assert np.all(env[start + ramp - 1:start + ramp - 1 + FS] == 1.0)
    assert env[-1] == 0.0


def test_plateau_time_oracle():
    spec = GestureSpec("thumb", (1, 0, 0, 0, 0), repetitions=10, hold_s=2.0)
    env = synthgen.synth_intent(spec, 11)
    plateau_s = np.sum(env[0] > 0.99) / FS
    # a few ramp samples also exceed 0.99 (about 6 ms per repetition)
    assert plateau_s == pytest.approx(20.0, abs=0.1)


def test_rest_jitter_depends_on_seed():
    spec = synthgen.SINGLE_FINGER[0]
    a = synthgen.synth_intent(spec, 1)
    b = synthgen.synth_intent(spec, 2)
    assert a.shape != b.shape or not np.array_equal(a, b)
    assert a.shape[1] % synthgen.GLOVE_STEP == 0


@pytest.mark.parametrize("bits", ["00000", "1111", "111111"])
def test_gesture_spec_rejects_bad_masks(bits):
    with pytest.raises(ValueError):
        GestureSpec.from_bits("x", bits)


def test_gesture_spec_rejects_zero_reps():
    with pytest.raises(ValueError):
        GestureSpec("x", (1, 0, 0, 0, 0), repetitions=0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        synthgen.synth_signal(np.zeros((5, 100)), "cyborg", None, 0)


def test_able_thumb_plateau_energy_ratio():
    spec = GestureSpec("thumb", (1, 0, 0, 0, 0), repetitions=3)
    intents = synthgen.synth_intent(spec, 5)
    gains = np.zeros((16, 5))
    gains[0, 0] = 1.0
    gains[:, 1:] = synthgen.mixing_matrix("able", 5)[:, 1:]
    sig, _ = synthgen.synth_signal(intents, "able", 20.0, 5, gains=gains)
    x = sig[0].astype(float)
    plateau = intents[0] == 1.0
    rest = intents.sum(axis=0) == 0
    ratio = band_power(x[plateau]) / band_power(x[rest]) * rest.sum() / plateau.sum()
    assert ratio >= 5.0


def test_able_default_gains_thumb_channel_ratio():
    intents = synthgen.synth_intent(synthgen.SINGLE_FINGER[0], 2)
    sig, meta = synthgen.synth_signal(intents, "able", 20.0, 2)
    g = np.array(meta["gains"])
    c = int(np.argmax(g[:8, 0]))
    x = sig[c].astype(float)
    on, off = intents[0] == 1.0, intents[0] == 0.0
    assert np.mean(x[on] ** 2) >= 5 * np.mean(x[off] ** 2)


def test_null_intent_is_stationary_noise():
    intents = np.zeros((5, 6 * FS))
    sig, _ = synthgen.synth_signal(intents, "amputee", None, 9)
    for ch in sig.astype(float):
        # skip the filter warm-up second
        powers = [band_power(ch[i * FS:(i + 1) * FS]) for i in range(1, 6)]
        db = 10 * np.log10(np.array(powers) / np.mean(powers))
        assert np.all(np.abs(db) <= 3.0)


def test_signal_determinism():
    intents = synthgen.synth_intent(synthgen.FIST, 4)
    a, ma = synthgen.synth_signal(intents, "amputee", None, 4)
    b, mb = synthgen.synth_signal(intents, "amputee", None, 4)
    assert np.array_equal(a, b) and ma == mb
    assert a.dtype == np.int16 and a.shape == (16, intents.shape[1])


def test_mixing_matrix_layout():
    g = synthgen.mixing_matrix("able", 0)
    assert not g[8:].any()
    assert not g[0:4, 3:].any() and not g[4:8, :3].any()
    amp = synthgen.mixing_matrix("amputee", 0)
    assert np.all(amp.max(axis=1) > 0)
    assert np.array_equal(amp, synthgen.mixing_matrix("amputee", 0))


def test_able_noise_device_uncorrelated_with_intent():
    spec = GestureSpec("fist", (1, 1, 1, 1, 1), repetitions=4)
    intents = synthgen.synth_intent(spec, 8)
    assert intents.shape[1] >= 10 * FS
    sig, _ = synthgen.synth_signal(intents, "able", 20.0, 8)
    for ch in sig[8:].astype(float):
        for f in range(5):
            assert abs(np.corrcoef(ch, intents[f])[0, 1]) < 0.05


@pytest.fixture(scope="module")
def small_split():
    return synthgen.build_dataset(synthgen.SINGLE_FINGER, 4, "amputee", seed=0)


def test_dataset_shape_and_ratio(small_split):
    assert len(small_split.train_sessions) + len(small_split.validation_sessions) == 20
    assert len(small_split.validation_sessions) == 5
    assert 0.7 <= small_split.ratio() <= 0.9


def test_validation_is_latest_session_per_gesture(small_split):
    for v in small_split.validation_sessions:
        same = [s.index for s in small_split.train_sessions if s.gesture == v.gesture]
        assert v.index > max(same)


def test_labels_are_thresholded_angles(small_split):
    for s in small_split.train_sessions + small_split.validation_sessions:
        assert np.array_equal(s.labels, s.glove_angle > 0.5)
        assert s.labels.shape[1] * synthgen.GLOVE_STEP == s.signal.shape[1]


def test_dataset_determinism(small_split):
    again = synthgen.build_dataset(synthgen.SINGLE_FINGER, 4, "amputee", seed=0)
    for a, b in zip(small_split.train_sessions, again.train_sessions):
        assert np.array_equal(a.signal, b.signal) and np.array_equal(a.labels, b.labels)


def test_dataset_rejects_too_few_sessions():
    with pytest.raises(ValueError):
        synthgen.build_dataset(synthgen.SINGLE_FINGER, 3)
    with pytest.raises(ValueError):
        synthgen.build_dataset([], 4)


@given(st.integers(0, 10**6), st.floats(0.05, 0.95))
def test_label_threshold_property(seed, thr):
    intents = synthgen.synth_intent(GestureSpec("m", (0, 1, 0, 1, 0), repetitions=1, hold_s=0.2), seed)
    angle, labels = synthgen.glove_from_intent(intents, thr)
    assert np.array_equal(labels, angle > thr)


def test_label_at_maps_raw_to_glove_sample(small_split):
    s = small_split.train_sessions[0]
    idx = np.array([0, 199, 200, 10**9])
    got = s.label_at(idx)
    assert np.array_equal(got[0], s.labels[:, 0])
    assert np.array_equal(got[1], s.labels[:, 0])
    assert np.array_equal(got[2], s.labels[:, 1])
    assert np.array_equal(got[3], s.labels[:, -1])


def test_save_load_round_trip(tmp_path):
    split = synthgen.build_dataset([GestureSpec("thumb", (1, 0, 0, 0, 0), repetitions=1)], 4, "able", seed=3)
    synthgen.save_dataset(split, tmp_path)
    back = synthgen.load_dataset(tmp_path)
    for a, b in zip(split.train_sessions + split.validation_sessions,
                    back.train_sessions + back.validation_sessions):
        assert np.array_equal(a.signal, b.signal)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.glove_angle, b.glove_angle)
    assert back.meta["mode"] == "able"
