"""Turning recorded sessions into labelled feature windows and trained decoders."""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from . import dsp
from .model import TINY, ModelConfig, ModelParams, TrainSpec, WindowSet, train
from .synthgen import GestureSession

# newest raw sample of feature e is 2 * (e * STRIDE + WINDOW - 1)
_RAW_PER_FEATURE = dsp.DECIMATION * dsp.STRIDE
_RAW_FIRST_END = dsp.DECIMATION * (dsp.WINDOW - 1)


def filtered(session: GestureSession) -> np.ndarray:
    """Decimated, band-passed signal (n, 16) of one session."""
    pre = dsp.Preprocessor(session.signal.shape[0])
    return pre.process(session.signal.T)


def fit_channel_scale(sessions: Sequence[GestureSession]) -> np.ndarray:
    """Per-channel RMS of the filtered training signal; features are computed on signal / scale."""
    return dsp.channel_rms([filtered(s) for s in sessions])


def session_features(session: GestureSession, channel_scale=None, gains=None,
                     signal: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Feature sequence (rows, T) and the labels (T, 5) of each feature's newest sample.

    ``gains`` multiplies each filtered channel first (filtering is linear, so
    this equals recording the session with those electrode gains).
    """
    x = filtered(session) if signal is None else signal
    if gains is not None:
        x = x * gains
    feats = dsp.extract_features(x, scale=channel_scale)
    raw_idx = _RAW_FIRST_END + _RAW_PER_FEATURE * np.arange(len(feats))
    return feats.T, session.label_at(raw_idx).astype(float)


def gain_draws(n_copies: int, channels: int, seed: int, db: float = 3.0) -> np.ndarray:
    """Per-channel gains uniform in +/-``db`` decibels, shape (n_copies, channels)."""
    rng = np.random.default_rng([seed, 0xA06])
    return 10 ** (rng.uniform(-db, db, (n_copies, channels)) / 20)


def window_sets(train_sessions, val_sessions, channel_scale, step: int = 1,
                seq_len: int = dsp.SEQ_LEN, augment: int = 0,
                seed: int = 0) -> tuple[WindowSet, WindowSet]:
    """Training and validation windows.

    ``augment`` adds that many gain-perturbed copies of every training
    session, mimicking the electrode-gain drift between sessions.
    """
    feats, labels = [], []
    for i, s in enumerate(train_sessions):
        x = filtered(s)
        gains = [None] + list(gain_draws(augment, x.shape[1], seed * 100003 + i))
        for g in gains:
            f, l = session_features(s, channel_scale, g, signal=x)
            feats.append(f)
            labels.append(l)
    tr = WindowSet(feats, labels, seq_len, step)
    pairs = [session_features(s, channel_scale) for s in val_sessions]
    va = WindowSet([p[0] for p in pairs], [p[1] for p in pairs], seq_len, 1)
    return tr, va


def feature_stats(ws: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std per feature row over the columns the training windows cover."""
    cols = np.concatenate([f[:, ws.seq_len - 1:] if f.shape[1] >= ws.seq_len else f[:, :0]
                           for f in ws.features], axis=1)
    mean = cols.mean(axis=1)
    std = cols.std(axis=1)
    return mean, np.where(std > 1e-12, std, 1.0)


def fit_decoder(train_sessions, val_sessions, cfg: ModelConfig = TINY, spec: TrainSpec = TrainSpec(),
                step: int = 2, augment: int = 0, init_seed: int = 0, progress=None,
                channel_scale=None):
    """Full training recipe: channel scaling, feature standardization, Adam.

    Returns ``(params, log, val_set)``.
    """
    if channel_scale is None:
        channel_scale = fit_channel_scale(train_sessions)
    tr, va = window_sets(train_sessions, val_sessions, channel_scale, step, cfg.seq_len,
                         augment, init_seed)
    params = ModelParams.init(cfg, init_seed)
    params.in_mean, params.in_std = feature_stats(tr)
    params.meta = dict(params.meta, channel_scale=[float(v) for v in channel_scale])
    params, log = train(params, spec, tr, va, progress)
    params.meta = dict(params.meta, train_log=log)
    return params, log, va
