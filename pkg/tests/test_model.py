import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nervehand import model
from nervehand.model import ModelConfig, ModelParams, TrainSpec, WindowSet

SMALL = ModelConfig(input_channels=6, seq_len=7, conv_out=4, conv_kernel=3, gru_hidden=4,
                    linear_hidden=3, dropout_p=0.5)


def randomized(cfg, seed):
    p = ModelParams.init(cfg, seed)
    r = np.random.default_rng(seed + 1)
    p.in_mean = r.standard_normal(cfg.input_channels) * 0.1
    p.in_std = r.uniform(0.5, 2.0, cfg.input_channels)
    return p


# -- forward ---------------------------------------------------------------

def sig(v):
    return 1 / (1 + math.exp(-v))


def reference_forward(p: ModelParams, x):
    """Scalar-loop evaluation of conv -> GRU -> GRU -> linear stack for one window."""
    cfg = p.config
    I, T, C, K, H = cfg.input_channels, cfg.seq_len, cfg.conv_out, cfg.conv_kernel, cfg.gru_hidden
    a = p.arrays
    xn = [[(x[i][t] - p.in_mean[i]) / p.in_std[i] for t in range(T)] for i in range(I)]
    conv = []
    for t in range(T):
        row = []
        for c in range(C):
            s = a["conv_b"][c]
            for i in range(I):
                for k in range(K):
                    tt = t + k - K // 2
                    if 0 <= tt < T:
                        s += a["conv_w"][c, i, k] * xn[i][tt]
            row.append(max(s, 0.0))
        conv.append(row)

    def gru(seq, W, U, b):
        h = [0.0] * H
        out = []
        for xt in seq:
            def gate(block, j):
                return b[block * H + j] + sum(W[block * H + j, m] * xt[m] for m in range(len(xt)))
            uh = [[sum(U[blk * H + j, m] * h[m] for m in range(H)) for j in range(H)] for blk in range(3)]
            r = [sig(gate(0, j) + uh[0][j]) for j in range(H)]
            z = [sig(gate(1, j) + uh[1][j]) for j in range(H)]
            n = [math.tanh(gate(2, j) + r[j] * uh[2][j]) for j in range(H)]
            h = [(1 - z[j]) * n[j] + z[j] * h[j] for j in range(H)]
            out.append(h)
        return out

    enc = gru(conv, a["enc_W"], a["enc_U"], a["enc_b"])
    dec = gru(enc, a["dec_W"], a["dec_U"], a["dec_b"])
    last = dec[-1]
    l1 = [max(a["lin1_b"][j] + sum(a["lin1_w"][j, m] * last[m] for m in range(H)), 0.0)
          for j in range(cfg.linear_hidden)]
    return [sig(a["lin2_b"][o] + sum(a["lin2_w"][o, m] * l1[m] for m in range(cfg.linear_hidden)))
            for o in range(cfg.outputs)]


def test_matches_unrolled_reference(rng):
    for seed in range(3):
        p = randomized(SMALL, seed)
        x = rng.standard_normal((6, 7)) * 2
        np.testing.assert_allclose(model.forward(p, x), reference_forward(p, x), rtol=0, atol=1e-10)


def test_zero_network_outputs_half(rng):
    p = ModelParams.zeros(model.TINY)
    out = model.forward(p, rng.standard_normal((224, 50)) * 100)
    assert np.array_equal(out, np.full(5, 0.5))


def test_inference_is_deterministic_and_pure(rng):
    p = ModelParams.init(model.TINY, 4)
    before = {k: v.copy() for k, v in p.arrays.items()}
    x = rng.standard_normal((224, 50))
    a, b = model.forward(p, x), model.forward(p, x)
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], p.arrays[k]) for k in before)


def test_batch_equals_single(rng):
    p = randomized(SMALL, 2)
    x = rng.standard_normal((5, 6, 7))
    batch = model.forward_batch(p, x)
    for i in range(5):
        np.testing.assert_allclose(batch[i], model.forward(p, x[i]), atol=1e-14)


@given(st.integers(0, 1000), st.floats(0.01, 50))
def test_outputs_in_open_unit_interval(seed, scale):
    p = randomized(SMALL, seed)
    x = np.random.default_rng(seed).standard_normal((6, 7)) * scale
    out = model.forward(p, x)
    assert np.all((out > 0) & (out < 1))


def test_dropout_only_when_training(rng):
    p = randomized(SMALL, 0)
    x = rng.standard_normal((3, 6, 7))
    a = model.forward_batch(p, x, training=True, dropout_seed=1)
    b = model.forward_batch(p, x, training=True, dropout_seed=2)
    assert not np.array_equal(a, b)
    assert np.array_equal(model.forward_batch(p, x, training=True, dropout_seed=1), a)


def test_rejects_wrong_input_shape():
    with pytest.raises(ValueError):
        model.forward(ModelParams.init(SMALL), np.zeros((6, 8)))


def test_non_finite_input_names_layer():
    x = np.zeros((6, 7))
    x[0, 0] = np.inf
    with pytest.raises(FloatingPointError, match="conv"):
        model.forward(randomized(SMALL, 0), x)


# -- gradients ---------------------------------------------------------------

def fd_loss(p, x, y, wd, training, seed):
    _, c = model.forward_batch(p, x, training, seed, return_cache=True)
    return model.bce_loss(c["logits"], y, np.array(p.config.finger_mask)) + wd * p.sq_norm()


@pytest.mark.parametrize("training", [False, True])
def test_gradients_match_finite_differences(rng, training):
    p = randomized(SMALL, 7)
    x = rng.standard_normal((3, 6, 7))
    y = (rng.random((3, 5)) > 0.5).astype(float)
    wd = 1e-3
    _, g = model.loss_and_grad(p, x, y, wd, training, 5)
    h = 1e-5
    for name in model.PARAM_ORDER:
        arr = p.arrays[name]
        num = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = fd_loss(p, x, y, wd, training, 5)
            arr[idx] = old - h
            lm = fd_loss(p, x, y, wd, training, 5)
            arr[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        err = np.abs(num - g[name]) / np.maximum(np.abs(num) + np.abs(g[name]), 1e-8)
        assert err.max() < 1e-4, name


def test_duplicated_sample_gradient(rng):
    p = randomized(SMALL, 1)
    x = rng.standard_normal((1, 6, 7))
    y = np.array([[1, 0, 1, 0, 1]], dtype=float)
    _, g1 = model.loss_and_grad(p, x, y)
    _, g2 = model.loss_and_grad(p, np.concatenate([x, x]), np.concatenate([y, y]))
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-12, atol=1e-15)


def test_matched_prediction_is_stationary(rng):
    p = randomized(SMALL, 3)
    x = rng.standard_normal((4, 6, 7))
    y = model.forward_batch(p, x)
    _, g = model.loss_and_grad(p, x, y)
    assert all(np.max(np.abs(v)) < 1e-15 for v in g.values())
    wd = 0.01
    _, g = model.loss_and_grad(p, x, y, weight_decay=wd)
    for k, v in g.items():
        np.testing.assert_allclose(v, 2 * wd * p.arrays[k], atol=1e-15)


def test_masked_heads_have_zero_gradient(rng):
    cfg = ModelConfig(**{**SMALL.__dict__, "finger_mask": (False, True, False, False, True)})
    p = randomized(cfg, 0)
    x = rng.standard_normal((4, 6, 7))
    y = (rng.random((4, 5)) > 0.5).astype(float)
    _, g = model.loss_and_grad(p, x, y)
    for f in (0, 2, 3):
        assert not g["lin2_w"][f].any() and g["lin2_b"][f] == 0
    assert g["lin2_w"][1].any() and g["lin2_w"][4].any()
    # labels of unowned fingers do not matter
    y2 = y.copy()
    y2[:, [0, 2, 3]] = 1 - y2[:, [0, 2, 3]]
    l1, _ = model.loss_and_grad(p, x, y)
    l2, _ = model.loss_and_grad(p, x, y2)
    assert l1 == l2


# -- optimisation ------------------------------------------------------------

def test_degenerate_adam_is_sign_sgd(rng):
    p = randomized(SMALL, 0)
    start = {k: v.copy() for k, v in p.arrays.items()}
    g = {k: rng.standard_normal(v.shape) for k, v in p.arrays.items()}
    opt = model.Adam(p, lr=0.01, beta1=0.0, beta2=0.0, eps=1e-300)
    opt.step(p, g)
    for k in g:
        np.testing.assert_allclose(p.arrays[k], start[k] - 0.01 * np.sign(g[k]), rtol=0, atol=1e-15)


def test_adam_bias_correction_first_step(rng):
    p = randomized(SMALL, 0)
    start = {k: v.copy() for k, v in p.arrays.items()}
    g = {k: rng.standard_normal(v.shape) for k, v in p.arrays.items()}
    model.Adam(p, lr=1e-3, beta1=0.99, beta2=0.999, eps=0.0).step(p, g)
    # first bias-corrected step moves every coordinate by exactly lr
    for k in g:
        np.testing.assert_allclose(start[k] - p.arrays[k], 1e-3 * np.sign(g[k]), rtol=1e-9)


def test_plateau_drops_exactly_once():
    s = model.PlateauScheduler(1e-3, patience=2, factor=10)
    lrs = [s.step(v) for v in [1.0, 0.8, 0.8, 0.81, 0.7, 0.6, 0.5]]
    assert s.drops == 1
    assert lrs == pytest.approx([1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4])


def test_single_bad_epoch_does_not_drop():
    s = model.PlateauScheduler(1e-3, patience=2)
    for v in [1.0, 1.1, 0.9, 0.95, 0.8]:
        s.step(v)
    assert s.drops == 0


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch=0), dict(lr0=0.0)])
def test_train_spec_validation(kw):
    with pytest.raises(ValueError):
        TrainSpec(**kw)


def toy_set(n, seed, cfg=model.TINY):
    """Single-finger windows: the first five feature rows shift up when the finger is on."""
    r = np.random.default_rng(seed)
    y = np.zeros((n, 5))
    y[:, 0] = r.random(n) < 0.5
    x = r.standard_normal((n, cfg.input_channels, cfg.seq_len))
    x[:, :5, :] += (2 * y[:, :1] - 1)[:, :, None]
    return x, y


def logistic_baseline(x, y, iters=300, lr=0.5):
    """Logistic regression on time-averaged rows (plain gradient descent)."""
    f = x.mean(axis=2)
    f = np.hstack([f, np.ones((len(f), 1))])
    w = np.zeros(f.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-f @ w))
        w -= lr * f.T @ (p - y) / len(f)
    return lambda xs: np.hstack([xs.mean(axis=2), np.ones((len(xs), 1))]) @ w > 0


def test_one_epoch_on_separable_toy_set():
    x, y = toy_set(1200, 0)
    xt, yt = toy_set(300, 1)
    baseline = logistic_baseline(x, y[:, 0])
    assert (baseline(xt) == (yt[:, 0] > 0.5)).mean() > 0.9
    cfg = ModelConfig(dropout_p=0.2, finger_mask=(True, False, False, False, False))
    spec = TrainSpec(epochs=1, batch=16, lr0=1e-3, weight_decay=0.0)
    trained, log = model.train(ModelParams.init(cfg, 0), spec, WindowSet.from_arrays(x, y))
    acc = ((model.forward_batch(trained, xt)[:, 0] > 0.5) == (yt[:, 0] > 0.5)).mean()
    assert acc > 0.9
    assert len(log) == 1 and log[0]["lr"] == 1e-3


def test_training_is_reproducible():
    x, y = toy_set(64, 1, SMALL)
    ws = WindowSet.from_arrays(x, y)
    spec = TrainSpec(epochs=2, batch=8, rng_seed=3)
    a, la = model.train(ModelParams.init(SMALL, 1), spec, ws, ws)
    b, lb = model.train(ModelParams.init(SMALL, 1), spec, ws, ws)
    assert la == lb
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    assert {"train_loss", "val_loss", "val_acc", "lr"} <= set(la[0])


def test_train_rejects_empty_set():
    with pytest.raises(ValueError):
        model.train(ModelParams.init(SMALL), TrainSpec(), WindowSet([], []))


def test_window_set_cuts_and_labels():
    f = np.arange(3 * 10, dtype=float).reshape(3, 10)
    lab = np.arange(10 * 5, dtype=float).reshape(10, 5)
    ws = WindowSet([f], [lab], seq_len=4, step=3)
    assert [e for _, e in ws.index] == [3, 6, 9]
    x, y = ws.batch([1])
    assert np.array_equal(x[0], f[:, 3:7]) and np.array_equal(y[0], lab[6])


# -- size ----------------------------------------------------------------------

def shape_sum(cfg):
    return sum(int(np.prod(s)) for s in model.param_shapes(cfg).values())


def test_count_closed_form_minimal():
    cfg = ModelConfig(input_channels=2, seq_len=3, conv_out=1, conv_kernel=1, gru_hidden=1,
                      linear_hidden=1, outputs=5)
    # conv 2+1, encoder 3*(1+1+1), decoder 3*(1+1+1), linear1 1+1, linear2 5+5
    assert model.parameter_count(cfg) == 3 + 9 + 9 + 2 + 10
    assert ModelParams.init(cfg).count() == model.parameter_count(cfg)


def test_conv_out_zero_rejected():
    with pytest.raises(ValueError):
        ModelConfig(conv_out=0)


@pytest.mark.parametrize("cfg", [model.TINY, model.FULL_SCALE, SMALL])
def test_count_matches_shapes(cfg):
    assert model.parameter_count(cfg) == shape_sum(cfg)


def test_full_scale_size():
    assert 1_520_000 <= model.parameter_count(model.FULL_SCALE) <= 1_680_000


def test_gru_term_scales_quadratically():
    def gru_term(h):
        cfg = ModelConfig(conv_out=128, gru_hidden=h, linear_hidden=64)
        s = model.param_shapes(cfg)
        return sum(int(np.prod(s[k])) for k in ("enc_W", "enc_U", "enc_b", "dec_W", "dec_U", "dec_b"))
    def closed_form(h, c=128):
        return 3 * (c * h + h * h + h) + 3 * (2 * h * h + h)
    ratio = gru_term(768) / gru_term(384)
    assert ratio == closed_form(768) / closed_form(384)
    # the quadratic terms dominate: ratio approaches 4 from below
    assert 3.7 <= ratio < 4.0


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    p = randomized(SMALL, 9)
    p.meta = {"channel_scale": [1.5, 2.0]}
    a = model.save_checkpoint(tmp_path / "a.ckpt", p)
    q = model.load_checkpoint(a)
    b = model.save_checkpoint(tmp_path / "b.ckpt", q)
    assert a.read_bytes() == b.read_bytes()
    assert q.config == p.config and q.meta == p.meta
    assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in p.arrays)
    assert np.array_equal(q.in_std, p.in_std)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"hello world")
    with pytest.raises(ValueError):
        model.load_checkpoint(path)
    good = model.save_checkpoint(tmp_path / "g.ckpt", randomized(SMALL, 0))
    path.write_bytes(good.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        model.load_checkpoint(path)


def test_with_mask_changes_only_mask():
    p = randomized(SMALL, 0)
    q = model.with_mask(p, (1, 0, 0, 0, 0))
    assert q.config.finger_mask == (True, False, False, False, False)
    assert p.config.finger_mask == (True,) * 5
