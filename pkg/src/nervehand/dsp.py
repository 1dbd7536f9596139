"""Pre-processing chain: anti-alias lowpass, 2x decimation, 25-600 Hz bandpass and
sliding-window time-domain features.

Feature order per channel (``FEATURE_NAMES``)::

    MAV IAV RMS VAR WL ZC SSC WAMP LOG DAMV SSI MAX SKEW KURT

Feature rows of a window matrix are channel-major: row ``ch * 14 + k``.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

RAW_RATE_HZ = 10_000
DECIMATION = 2
RATE_HZ = RAW_RATE_HZ // DECIMATION
WINDOW = 500  # 100 ms at 5 kHz
STRIDE = 100  # 20 ms at 5 kHz
SEQ_LEN = 50
FEATURE_NAMES = (
    "MAV", "IAV", "RMS", "VAR", "WL", "ZC", "SSC", "WAMP",
    "LOG", "DAMV", "SSI", "MAX", "SKEW", "KURT",
)
N_FEATURES = len(FEATURE_NAMES)


@dataclass(frozen=True)
class FilterSpec:
    kind: str  # "lowpass" | "bandpass"
    order: int
    cutoffs_hz: tuple
    fs: float

    def __post_init__(self):
        if self.kind not in ("lowpass", "bandpass"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.order < 2 or self.order % 2:
            raise ValueError("filter order must be an even integer >= 2")
        want = 1 if self.kind == "lowpass" else 2
        if len(self.cutoffs_hz) != want:
            raise ValueError(f"{self.kind} needs {want} cutoff(s)")
        nyq = self.fs / 2
        if not all(0 < c < nyq for c in self.cutoffs_hz):
            raise ValueError(f"cutoffs {self.cutoffs_hz} must lie strictly inside (0, {nyq})")
        if self.kind == "bandpass" and not self.cutoffs_hz[0] < self.cutoffs_hz[1]:
            raise ValueError("bandpass cutoffs must be increasing")
        if self.kind == "bandpass" and self.order % 4:
            raise ValueError("bandpass order must be a multiple of 4")


ANTI_ALIAS = FilterSpec("lowpass", 4, (0.8 * RATE_HZ / 2,), RAW_RATE_HZ)
BANDPASS = FilterSpec("bandpass", 4, (25.0, 600.0), RATE_HZ)


def design_butterworth(spec: FilterSpec) -> np.ndarray:
    """Second-order sections (n_sections, 6) of a digital Butterworth filter.

    ``spec.order`` is the order of the overall transfer function, so a 4th-order
    bandpass comes from a 2nd-order prototype.
    """
    if spec.kind == "lowpass":
        return signal.butter(spec.order, spec.cutoffs_hz[0], btype="lowpass", fs=spec.fs, output="sos")
    return signal.butter(spec.order // 2, list(spec.cutoffs_hz), btype="bandpass", fs=spec.fs, output="sos")


def sos_response(sos: np.ndarray, freqs_hz, fs: float) -> np.ndarray:
    """Complex frequency response evaluated directly from the section coefficients."""
    z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
    h = np.ones_like(z)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 / z + b2 / z**2) / (a0 + a1 / z + a2 / z**2)
    return h


def sos_poles(sos: np.ndarray) -> np.ndarray:
    return np.concatenate([np.roots(sec[3:]) for sec in sos])


def format_sos(sos: np.ndarray) -> str:
    lines = ["b0 b1 b2 a0 a1 a2"]
    lines += [" ".join(f"{c:+.17e}" for c in sec) for sec in sos]
    return "\n".join(lines)


class SosFilter:
    """Stateful multichannel SOS filter; time runs along axis 0."""

    def __init__(self, sos: np.ndarray, channels: int):
        self.sos = np.asarray(sos, dtype=float)
        self.channels = channels
        self.zi = np.zeros((self.sos.shape[0], 2, channels))

    def reset(self):
        self.zi[:] = 0.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] == 0:
            return np.zeros((0, self.channels))
        y, self.zi = signal.sosfilt(self.sos, x, axis=0, zi=self.zi)
        return y


class Preprocessor:
    """anti-alias -> keep every 2nd sample -> bandpass, streaming.

    Chunked calls give bit-identical output to a single call over the whole
    signal: filter state and decimation phase carry across chunks.
    """

    def __init__(self, channels: int = 16, anti_alias: FilterSpec = ANTI_ALIAS,
                 bandpass: FilterSpec = BANDPASS):
        self.channels = channels
        self.lowpass = SosFilter(design_butterworth(anti_alias), channels)
        self.bandpass = SosFilter(design_butterworth(bandpass), channels)
        self._phase = 0  # raw samples seen modulo DECIMATION

    def process(self, raw: np.ndarray) -> np.ndarray:
        """``raw``: (n, channels) at 10 kHz. Returns (m, channels) at 5 kHz."""
        x = np.asarray(raw, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.channels:
            raise ValueError(f"expected (n, {self.channels}) samples, got {x.shape}")
        y = self.lowpass(x)
        start = (-self._phase) % DECIMATION
        self._phase = (self._phase + len(x)) % DECIMATION
        return self.bandpass(y[start::DECIMATION])

    def decimation_offsets(self, n: int) -> np.ndarray:
        """Indices into the next ``n``-sample raw chunk that survive decimation."""
        return np.arange((-self._phase) % DECIMATION, n, DECIMATION)


def process_chunk(pre: Preprocessor, chunk) -> np.ndarray:
    return pre.process(chunk.samples)


# -- features ----------------------------------------------------------------

@dataclass(frozen=True)
class FeatureParams:
    deadzone: float = 0.01
    wamp_threshold: float = 0.05
    log_guard: float = 1e-6


FLAT_REL = 1e-10


def window_features(w: np.ndarray, params: FeatureParams = FeatureParams()) -> np.ndarray:
    """Features of windows ``w`` shaped (..., n). Returns (..., 14)."""
    # contiguous copy: reductions then sum in the same order for any leading shape
    w = np.ascontiguousarray(w, dtype=float)
    n = w.shape[-1]
    a = np.abs(w)
    d = np.diff(w, axis=-1)
    ad = np.abs(d)
    iav = a.sum(-1)
    mav = iav / n
    ssi = (w * w).sum(-1)
    rms = np.sqrt(ssi / n)
    mean = w.mean(-1, keepdims=True)
    c = w - mean
    c2 = c * c
    m2 = c2.mean(-1)
    wl = ad.sum(-1)
    zc = ((w[..., :-1] * w[..., 1:] < 0) & (ad >= params.deadzone)).sum(-1)
    ssc = ((d[..., :-1] * -d[..., 1:]) >= params.deadzone).sum(-1)
    wamp = (ad >= params.wamp_threshold).sum(-1)
    log = np.exp(np.log(a + params.log_guard).mean(-1))
    damv = wl / (n - 1)
    mx = a.max(-1)
    # skew/kurt are scale-free: normalizing first keeps tiny windows from underflowing
    u = c / np.where(mx > 0, mx, 1.0)[..., None]
    u2 = u * u
    s2 = u2.mean(-1)
    # variance lost in rounding counts as zero: skew/kurt would be pure noise
    flat = s2 <= FLAT_REL**2
    safe = np.where(flat, 1.0, s2)
    skew = np.where(flat, 0.0, (u2 * u).mean(-1) / safe**1.5)
    kurt = np.where(flat, 0.0, (u2 * u2).mean(-1) / safe**2 - 3.0)
    return np.stack(
        [mav, iav, rms, m2, wl, zc, ssc, wamp, log, damv, ssi, mx, skew, kurt], axis=-1
    ).astype(float)


def extract_features(x: np.ndarray, window: int = WINDOW, stride: int = STRIDE,
                     params: FeatureParams = FeatureParams(),
                     scale: np.ndarray | None = None) -> np.ndarray:
    """Batch extraction over a (n, channels) signal.

    Returns (n_vectors, channels * 14); vector ``k`` covers samples
    ``[k * stride, k * stride + window)``.
    """
    x = np.asarray(x, dtype=float)
    if scale is not None:
        x = x / scale
    n, ch = x.shape
    if n < window:
        return np.zeros((0, ch * N_FEATURES))
    count = (n - window) // stride + 1
    out = np.empty((count, ch, N_FEATURES))
    step = 256  # bounds the temporary memory of the strided view
    views = np.lib.stride_tricks.sliding_window_view(x, window, axis=0)[::stride]
    for i in range(0, count, step):
        out[i:i + step] = window_features(views[i:i + step], params)
    return out.reshape(count, ch * N_FEATURES)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray  # (channels * 14,)
    window_end_sample_index: int  # decimated-sample index one past the window
    acq_timestamp_ns: int  # newest contributing sample


class FeatureExtractor:
    """Streaming counterpart of :func:`extract_features`.

    Keeps the last ``window`` samples and their acquisition timestamps; emits a
    vector every ``stride`` samples once the first window is full.
    """

    def __init__(self, channels: int = 16, window: int = WINDOW, stride: int = STRIDE,
                 params: FeatureParams = FeatureParams(), scale: np.ndarray | None = None):
        if window < stride:
            raise ValueError("window must be >= stride")
        self.channels = channels
        self.window = window
        self.stride = stride
        self.params = params
        self.scale = None if scale is None else np.asarray(scale, dtype=float)
        self._buf = np.zeros((0, channels))
        self._ts = np.zeros(0, dtype=np.int64)
        self._seen = 0  # samples pushed so far
        self._next_end = window

    def push(self, x: np.ndarray, timestamps_ns: np.ndarray | None = None) -> list[FeatureVector]:
        x = np.asarray(x, dtype=float)
        if timestamps_ns is None:
            timestamps_ns = np.zeros(len(x), dtype=np.int64)
        if self.scale is not None:
            x = x / self.scale
        self._buf = np.concatenate([self._buf, x])
        self._ts = np.concatenate([self._ts, np.asarray(timestamps_ns, dtype=np.int64)])
        self._seen += len(x)
        out = []
        while self._next_end <= self._seen:
            start_local = self._next_end - self.window - (self._seen - len(self._buf))
            w = self._buf[start_local:start_local + self.window]
            vals = window_features(w.T, self.params).reshape(-1)
            out.append(FeatureVector(vals, self._next_end, int(self._ts[start_local + self.window - 1])))
            self._next_end += self.stride
        # retain only what the next window needs
        drop = self._next_end - self.window - (self._seen - len(self._buf))
        drop = min(max(drop, 0), len(self._buf))
        if drop:
            self._buf = self._buf[drop:]
            self._ts = self._ts[drop:]
        return out


class FeatureWindow:
    """Rolling feature matrix (rows x 50), columns oldest -> newest."""

    def __init__(self, rows: int = 16 * N_FEATURES, length: int = SEQ_LEN):
        self.rows = rows
        self.length = length
        self._cols: deque = deque(maxlen=length)
        self.newest_timestamp_ns = 0
        self.version = 0

    def push(self, v: FeatureVector) -> "FeatureWindow":
        vals = np.asarray(v.values, dtype=float)
        if vals.shape != (self.rows,):
            raise ValueError(f"feature vector must have {self.rows} entries, got {vals.shape}")
        self._cols.append(vals)
        self.newest_timestamp_ns = v.acq_timestamp_ns
        self.version += 1
        return self

    @property
    def full(self) -> bool:
        return len(self._cols) == self.length

    def __len__(self):
        return len(self._cols)

    def matrix(self) -> np.ndarray:
        if not self._cols:
            return np.zeros((self.rows, 0))
        return np.stack(self._cols, axis=1)


def push_feature(window: FeatureWindow, v: FeatureVector) -> FeatureWindow:
    return window.push(v)


def write_feature_csv(path, vectors: list[FeatureVector], channels: int = 16):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ch"] + [f"f{i + 1}" for i in range(N_FEATURES)])
        for v in vectors:
            vals = v.values.reshape(channels, N_FEATURES)
            for ch in range(channels):
                w.writerow([v.acq_timestamp_ns, ch] + [repr(float(x)) for x in vals[ch]])


def channel_rms(signals: list[np.ndarray]) -> np.ndarray:
    """Per-channel RMS over a list of (n, channels) signals."""
    ss = sum((np.asarray(s, dtype=float) ** 2).sum(0) for s in signals)
    n = sum(len(s) for s in signals)
    rms = np.sqrt(ss / max(n, 1))
    return np.where(rms > 0, rms, 1.0)
