"""Synthetic nerve-like recordings with known per-finger ground truth.

Each channel is amplitude-modulated band-limited noise::

    x_c(t) = carrier_c(t) * sum_f G[c, f] * intent_f(t) + noise_c(t)

with carrier and noise both 25-600 Hz filtered white noise.  Sessions are
stored as int16 ADC counts (``COUNTS_PER_UNIT`` counts per signal unit) so the
in-memory data is exactly what the wire format carries.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import framing

FS = 10_000
GLOVE_HZ = 50
GLOVE_STEP = FS // GLOVE_HZ
N_CHANNELS = 16
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
COUNTS_PER_UNIT = 1000.0
RISE_S = 0.3
LABEL_THRESHOLD = 0.5
DEFAULT_SNR_DB = {"able": 20.0, "amputee": 10.0}
MODES = ("able", "amputee")
_CARRIER_SOS = signal.butter(4, [25, 600], btype="bandpass", fs=FS, output="sos")


@dataclass(frozen=True)
class GestureSpec:
    name: str
    finger_mask: tuple
    repetitions: int = 10
    hold_s: float = 2.0

    def __post_init__(self):
        mask = tuple(bool(int(b)) for b in self.finger_mask)
        if len(mask) != 5:
            raise ValueError("finger_mask needs 5 entries")
        if not any(mask):
            raise ValueError("at least one finger must be active")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        object.__setattr__(self, "finger_mask", mask)

    @classmethod
    def from_bits(cls, name: str, bits: str, **kw) -> "GestureSpec":
        return cls(name, tuple(c == "1" for c in bits), **kw)


SINGLE_FINGER = [GestureSpec.from_bits(f, "".join("1" if i == j else "0" for j in range(5)))
                 for i, f in enumerate(FINGERS)]
FIST = GestureSpec.from_bits("fist", "11111")
MULTI_FINGER = [
    FIST,
    GestureSpec.from_bits("index_pinch", "11000"),
    GestureSpec.from_bits("pointing", "10111"),
    GestureSpec.from_bits("hook_em_horns", "10110"),
]
DEFAULT_GESTURES = SINGLE_FINGER + MULTI_FINGER
GESTURES = {g.name: g for g in DEFAULT_GESTURES}


def _trapezoid(hold_s: float, fs: int = FS) -> np.ndarray:
    ramp = int(round(RISE_S * fs))
    hold = int(round(hold_s * fs))
    up = np.arange(1, ramp + 1) / ramp
    return np.concatenate([up, np.ones(hold), up[::-1] - 1 / ramp])


def synth_intent(spec: GestureSpec, rng_seed: int, fs: int = FS) -> np.ndarray:
    """Per-finger intent envelopes (5, N): rest, then ``repetitions`` trapezoids
    each followed by a jittered 1-2 s rest.  N is a whole number of glove samples."""
    rng = np.random.default_rng([rng_seed, 0x1A7])
    trap = _trapezoid(spec.hold_s, fs)
    pieces = [np.zeros(int(round(rng.uniform(1.0, 2.0) * fs)))]
    for _ in range(spec.repetitions):
        pieces.append(trap)
        pieces.append(np.zeros(int(round(rng.uniform(1.0, 2.0) * fs))))
    env = np.concatenate(pieces)
    env = np.pad(env, (0, -env.size % GLOVE_STEP))
    out = np.zeros((5, env.size))
    out[np.array(spec.finger_mask)] = env
    return out


def _bandnoise(rng: np.random.Generator, shape) -> np.ndarray:
    x = signal.sosfilt(_CARRIER_SOS, rng.standard_normal(shape), axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def mixing_matrix(mode: str, seed: int) -> np.ndarray:
    """Seed-deterministic (16, 5) gains from finger intent to channel amplitude."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng([seed, 0x6A1])
    g = np.zeros((N_CHANNELS, 5))
    if mode == "able":
        # device 0: channels 0-3 median group, 4-7 ulnar group; device 1 unattached
        g[0:4, 0:3] = rng.uniform(0.2, 1.0, (4, 3))
        g[4:8, 3:5] = rng.uniform(0.2, 1.0, (4, 2))
        for c in range(8):
            g[c, rng.integers(0, 3) if c < 4 else 3 + rng.integers(0, 2)] += 1.0
        return g
    g = rng.uniform(0.0, 0.4, (N_CHANNELS, 5))
    for c in range(N_CHANNELS):
        g[c, c % 5] += 1.0
    return g * rng.uniform(0.5, 1.5, (N_CHANNELS, 1))


def synth_signal(intents: np.ndarray, mode: str, snr_db: float | None, rng_seed: int,
                 gains: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """16-channel signal (16, N) in int16 counts plus metadata (mixing matrix, noise levels).

    ``snr_db`` relates a channel's strongest single-finger activation power to
    its noise power.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if snr_db is None:
        snr_db = DEFAULT_SNR_DB[mode]
    g = mixing_matrix(mode, rng_seed) if gains is None else np.asarray(gains, dtype=float)
    rng = np.random.default_rng([rng_seed, 0x516])
    n = intents.shape[1]
    carrier = _bandnoise(rng, (N_CHANNELS, n))
    noise = _bandnoise(rng, (N_CHANNELS, n))
    ref = np.max(g, axis=1)
    ref = np.where(ref > 0, ref, 1.0)
    noise_std = ref / 10 ** (snr_db / 20)
    x = carrier * (g @ intents) + noise * noise_std[:, None]
    counts = np.clip(np.round(x * COUNTS_PER_UNIT), -32768, 32767).astype(np.int16)
    meta = {"mode": mode, "snr_db": float(snr_db), "seed": int(rng_seed),
            "gains": g.tolist(), "noise_std": noise_std.tolist()}
    return counts, meta


@dataclass(eq=False)
class GestureSession:
    gesture: str
    index: int
    signal: np.ndarray  # (16, N) int16
    glove_angle: np.ndarray  # (5, M) at 50 Hz
    labels: np.ndarray  # (5, M) bool
    mode: str
    meta: dict = field(default_factory=dict)

    @property
    def duration_s(self) -> float:
        return self.signal.shape[1] / FS

    def label_at(self, raw_index) -> np.ndarray:
        """Labels (…, 5) of the glove sample at or before raw sample ``raw_index``."""
        m = np.clip(np.asarray(raw_index) // GLOVE_STEP, 0, self.labels.shape[1] - 1)
        return self.labels[:, m].T


def glove_from_intent(intents: np.ndarray, threshold: float = LABEL_THRESHOLD):
    angle = intents[:, ::GLOVE_STEP].copy()
    return angle, angle > threshold


@dataclass
class DatasetSplit:
    train_sessions: list
    validation_sessions: list
    meta: dict = field(default_factory=dict)

    def ratio(self) -> float:
        """Train fraction of all samples."""
        tr = sum(s.signal.shape[1] for s in self.train_sessions)
        va = sum(s.signal.shape[1] for s in self.validation_sessions)
        return tr / (tr + va)


def build_dataset(gestures, sessions_per_gesture: int = 4, mode: str = "amputee",
                  seed: int = 0, snr_db: float | None = None,
                  threshold: float = LABEL_THRESHOLD) -> DatasetSplit:
    """Sessions for every gesture; the chronologically last one per gesture validates.

    All sessions share the subject's mixing matrix; each session perturbs every
    channel gain by up to +/-3 dB (posture changes).
    """
    gestures = list(gestures)
    if not gestures:
        raise ValueError("need at least one gesture")
    if sessions_per_gesture < 4:
        raise ValueError("sessions_per_gesture must be >= 4")
    base = mixing_matrix(mode, seed)
    rng = np.random.default_rng([seed, 0xDA7A])
    train, val = [], []
    for gi, spec in enumerate(gestures):
        for s in range(sessions_per_gesture):
            sess_seed = int(rng.integers(0, 2**31))
            perturb = 10 ** (rng.uniform(-3, 3, (N_CHANNELS, 1)) / 20)
            intents = synth_intent(spec, sess_seed)
            sig, meta = synth_signal(intents, mode, snr_db, sess_seed, gains=base * perturb)
            angle, labels = glove_from_intent(intents, threshold)
            meta.update(gesture=spec.name, session=s, finger_mask=[int(b) for b in spec.finger_mask])
            sess = GestureSession(spec.name, gi * sessions_per_gesture + s, sig, angle, labels, mode, meta)
            (val if s == sessions_per_gesture - 1 else train).append(sess)
    meta = {"mode": mode, "seed": seed, "sessions_per_gesture": sessions_per_gesture,
            "gestures": [g.name for g in gestures], "threshold": threshold,
            "snr_db": DEFAULT_SNR_DB[mode] if snr_db is None else snr_db}
    return DatasetSplit(train, val, meta)


# -- serialization -------------------------------------------------------------

def session_stream(sess: GestureSession) -> list[framing.TimedBytes]:
    """Wire stream of a session: two 8-channel devices, nominal clocks."""
    duration = sess.signal.shape[1] / FS
    streams = []
    for dev in range(N_CHANNELS // framing.CHANNELS):
        cfg = framing.DeviceConfig(dev)
        src = sess.signal[dev * 8:(dev + 1) * 8].T
        streams.append(framing.emulate_device(cfg, src, duration))
    return framing.merge_streams(streams)


def save_dataset(split: DatasetSplit, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sessions = sorted(split.train_sessions + split.validation_sessions, key=lambda s: s.index)
    val_ids = {s.index for s in split.validation_sessions}
    entries = []
    for sess in sessions:
        stem = f"session_{sess.index:03d}"
        framing.write_nrvraw(out / f"{stem}.nrvraw", session_stream(sess))
        with open(out / f"{stem}.labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + list(FINGERS) + ["angle_" + f for f in FINGERS])
            for m in range(sess.labels.shape[1]):
                w.writerow([f"{m / GLOVE_HZ:.2f}"] + [int(b) for b in sess.labels[:, m]]
                           + [repr(float(a)) for a in sess.glove_angle[:, m]])
        entries.append({"file": stem, "gesture": sess.gesture, "index": sess.index,
                        "split": "validation" if sess.index in val_ids else "train",
                        "n_samples": int(sess.signal.shape[1]), "meta": sess.meta})
    manifest = dict(split.meta, sessions=entries)
    (out / "meta.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_session(directory, entry: dict, mode: str) -> GestureSession:
    directory = Path(directory)
    blocks, _ = framing.decode_stream(framing.read_nrvraw(directory / f"{entry['file']}.nrvraw"))
    per_dev: dict[int, list] = {}
    for b in blocks:
        per_dev.setdefault(b.device_id, []).append(b.samples)
    sig = np.concatenate([np.concatenate(per_dev[d]) for d in sorted(per_dev)], axis=1).T
    n = entry["n_samples"]
    padded = np.zeros((sig.shape[0], n), dtype=np.int16)
    padded[:, :min(n, sig.shape[1])] = sig[:, :n]
    labels, angles = [], []
    with open(directory / f"{entry['file']}.labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        labels.append([r == "1" for r in row[1:6]])
        angles.append([float(a) for a in row[6:11]])
    return GestureSession(entry["gesture"], entry["index"], padded,
                          np.array(angles).T, np.array(labels, dtype=bool).T, mode, entry["meta"])


def load_dataset(directory) -> DatasetSplit:
    directory = Path(directory)
    manifest = json.loads((directory / "meta.json").read_text())
    train, val = [], []
    for entry in manifest["sessions"]:
        sess = load_session(directory, entry, manifest["mode"])
        (val if entry["split"] == "validation" else train).append(sess)
    meta = {k: v for k, v in manifest.items() if k != "sessions"}
    return DatasetSplit(train, val, meta)
