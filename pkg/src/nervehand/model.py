"""Conv + stacked-GRU + linear decoder in numpy, with exact backpropagation and Adam.

Layer order (also the checkpoint order)::

    conv_w (C, I, K)  conv_b (C)
    enc_W  (3H, C)    enc_U  (3H, H)   enc_b (3H)
    dec_W  (3H, H)    dec_U  (3H, H)   dec_b (3H)
    lin1_w (L, H)     lin1_b (L)
    lin2_w (O, L)     lin2_b (O)

GRU gate blocks are stacked as [reset, update, candidate] along the first axis.
Inputs are standardized with fixed per-row ``in_mean`` / ``in_std`` buffers
that are stored with the parameters but never trained.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

PARAM_ORDER = (
    "conv_w", "conv_b",
    "enc_W", "enc_U", "enc_b",
    "dec_W", "dec_U", "dec_b",
    "lin1_w", "lin1_b",
    "lin2_w", "lin2_b",
)
CKPT_MAGIC = b"NRVCKPT\x00"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 224
    seq_len: int = 50
    conv_out: int = 8
    conv_kernel: int = 3
    gru_hidden: int = 16
    linear_hidden: int = 16
    outputs: int = 5
    dropout_p: float = 0.5
    finger_mask: tuple = (True, True, True, True, True)

    def __post_init__(self):
        object.__setattr__(self, "finger_mask", tuple(bool(b) for b in self.finger_mask))
        for name in ("input_channels", "seq_len", "conv_out", "gru_hidden", "linear_hidden", "outputs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd (same padding)")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if len(self.finger_mask) != self.outputs or not any(self.finger_mask):
            raise ValueError("finger_mask must have one entry per output and own at least one")


TINY = ModelConfig(dropout_p=0.2)  # 50% dropout over 8 conv channels starves the GRU
FULL_SCALE = ModelConfig(conv_out=128, conv_kernel=3, gru_hidden=384, linear_hidden=64, dropout_p=0.5)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    C, I, K = cfg.conv_out, cfg.input_channels, cfg.conv_kernel
    H, L, O = cfg.gru_hidden, cfg.linear_hidden, cfg.outputs
    return {
        "conv_w": (C, I, K), "conv_b": (C,),
        "enc_W": (3 * H, C), "enc_U": (3 * H, H), "enc_b": (3 * H,),
        "dec_W": (3 * H, H), "dec_U": (3 * H, H), "dec_b": (3 * H,),
        "lin1_w": (L, H), "lin1_b": (L,),
        "lin2_w": (O, L), "lin2_b": (O,),
    }


def parameter_count(cfg: ModelConfig) -> int:
    C, I, K = cfg.conv_out, cfg.input_channels, cfg.conv_kernel
    H, L, O = cfg.gru_hidden, cfg.linear_hidden, cfg.outputs
    conv = C * I * K + C
    gru = 3 * (C * H + H * H + H) + 3 * (H * H + H * H + H)
    return conv + gru + (H * L + L) + (L * O + O)


_FAN_IN = {
    "conv_w": lambda c: c.input_channels * c.conv_kernel,
    "conv_b": lambda c: c.input_channels * c.conv_kernel,
    "enc_W": lambda c: c.gru_hidden, "enc_U": lambda c: c.gru_hidden, "enc_b": lambda c: c.gru_hidden,
    "dec_W": lambda c: c.gru_hidden, "dec_U": lambda c: c.gru_hidden, "dec_b": lambda c: c.gru_hidden,
    "lin1_w": lambda c: c.gru_hidden, "lin1_b": lambda c: c.gru_hidden,
    "lin2_w": lambda c: c.linear_hidden, "lin2_b": lambda c: c.linear_hidden,
}


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    arrays: dict
    in_mean: np.ndarray
    in_std: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer."""
        rng = np.random.default_rng([seed, 0x6E7])
        arrays = {}
        for name, shape in param_shapes(cfg).items():
            bound = 1.0 / np.sqrt(_FAN_IN[name](cfg))
            arrays[name] = rng.uniform(-bound, bound, shape)
        return cls(cfg, arrays, np.zeros(cfg.input_channels), np.ones(cfg.input_channels))

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelParams":
        arrays = {n: np.zeros(s) for n, s in param_shapes(cfg).items()}
        return cls(cfg, arrays, np.zeros(cfg.input_channels), np.ones(cfg.input_channels))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                           self.in_mean.copy(), self.in_std.copy(), json.loads(json.dumps(self.meta)))

    def __getitem__(self, name):
        return self.arrays[name]

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def sq_norm(self) -> float:
        return float(sum(np.sum(a * a) for a in self.arrays.values()))

    def check_finite(self):
        for name in PARAM_ORDER:
            if not np.all(np.isfinite(self.arrays[name])):
                raise FloatingPointError(f"non-finite values in parameter {name}")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite activations in layer {layer}")
    return x


def _gru_forward(x, W, U, b, H):
    """x: (B, T, I). Returns outputs (B, T, H) and the per-step cache."""
    B, T, _ = x.shape
    xw = x @ W.T + b
    h = np.zeros((B, H))
    outs = np.empty((B, T, H))
    cache = []
    for t in range(T):
        hu = h @ U.T
        r = sigmoid(xw[:, t, :H] + hu[:, :H])
        z = sigmoid(xw[:, t, H:2 * H] + hu[:, H:2 * H])
        un = hu[:, 2 * H:]
        n = np.tanh(xw[:, t, 2 * H:] + r * un)
        h_new = (1.0 - z) * n + z * h
        cache.append((h, r, z, n, un))
        outs[:, t] = h_new
        h = h_new
    return outs, cache


def _gru_backward(dout, x, W, U, cache, H):
    """dout: (B, T, H) gradient w.r.t. every output. Returns dx, dW, dU, db."""
    B, T, _ = dout.shape
    dxw = np.empty((B, T, 3 * H))
    dU = np.zeros_like(U)
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, r, z, n, un = cache[t]
        dh = dout[:, t] + dh_next
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        dr = dan * un
        dun = dan * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dhu = np.concatenate([dar, daz, dun], axis=1)
        dxw[:, t, :H] = dar
        dxw[:, t, H:2 * H] = daz
        dxw[:, t, 2 * H:] = dan
        dU += dhu.T @ h_prev
        dh_next = dh_prev + dhu @ U
    flat = dxw.reshape(B * T, 3 * H)
    dW = flat.T @ x.reshape(B * T, -1)
    db = flat.sum(0)
    dx = dxw @ W
    return dx, dW, dU, db


def _dropout_masks(cfg: ModelConfig, B: int, seed) -> tuple:
    keep = 1.0 - cfg.dropout_p
    rng = np.random.default_rng(seed)
    m1 = (rng.random((B, cfg.seq_len, cfg.conv_out)) < keep) / keep
    m2 = (rng.random((B, cfg.gru_hidden)) < keep) / keep
    return m1, m2


def _as_batch(x, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.input_channels, cfg.seq_len):
        raise ValueError(f"input must be ({cfg.input_channels}, {cfg.seq_len}) per sample, got {x.shape[1:]}")
    return x


def forward_batch(params: ModelParams, x, training: bool = False, dropout_seed=0,
                  return_cache: bool = False):
    """Probabilities (B, 5) for windows ``x`` shaped (B, rows, 50)."""
    cfg = params.config
    p = params.arrays
    x = _as_batch(x, cfg)
    B, I, T = x.shape
    C, K, H = cfg.conv_out, cfg.conv_kernel, cfg.gru_hidden
    xn = (x - params.in_mean[:, None]) / params.in_std[:, None]
    pad = K // 2
    xp = np.pad(xn, ((0, 0), (0, 0), (pad, pad)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)  # (B, I, T, K)
    cols = cols.transpose(0, 2, 1, 3).reshape(B, T, I * K)
    conv_pre = _finite(cols @ p["conv_w"].reshape(C, I * K).T + p["conv_b"], "conv")
    conv = np.maximum(conv_pre, 0.0)
    if training and cfg.dropout_p > 0:
        m1, m2 = _dropout_masks(cfg, B, dropout_seed)
    else:
        m1 = m2 = None
    enc_in = conv * m1 if m1 is not None else conv
    enc, enc_cache = _gru_forward(enc_in, p["enc_W"], p["enc_U"], p["enc_b"], H)
    _finite(enc, "encoder GRU")
    dec, dec_cache = _gru_forward(enc, p["dec_W"], p["dec_U"], p["dec_b"], H)
    last = _finite(dec[:, -1], "decoder GRU")
    lin_in = last * m2 if m2 is not None else last
    z1 = _finite(lin_in @ p["lin1_w"].T + p["lin1_b"], "linear1")
    a1 = np.maximum(z1, 0.0)
    logits = _finite(a1 @ p["lin2_w"].T + p["lin2_b"], "linear2")
    probs = sigmoid(logits)
    if not return_cache:
        return probs
    cache = dict(cols=cols, conv_pre=conv_pre, conv=conv, m1=m1, m2=m2, enc_in=enc_in,
                 enc=enc, enc_cache=enc_cache, dec_cache=dec_cache, last=last,
                 lin_in=lin_in, z1=z1, a1=a1, logits=logits)
    return probs, cache


def forward(params: ModelParams, window, training: bool = False, dropout_seed=0) -> np.ndarray:
    """Probabilities [5] for one (rows, 50) window."""
    return forward_batch(params, np.asarray(window)[None], training, dropout_seed)[0]


def bce_loss(logits: np.ndarray, labels: np.ndarray, mask) -> float:
    """Mean binary cross-entropy over owned outputs, computed from logits."""
    mask = np.asarray(mask, dtype=bool)
    z = logits[:, mask]
    y = np.asarray(labels, dtype=float)[:, mask]
    per = np.logaddexp(0.0, z) - y * z
    return float(per.mean())


def loss_and_grad(params: ModelParams, x, labels, weight_decay: float = 0.0,
                  training: bool = False, dropout_seed=0, return_probs: bool = False):
    """Loss = mean BCE over owned fingers + weight_decay * ||theta||^2, and its exact gradient."""
    cfg = params.config
    p = params.arrays
    probs, c = forward_batch(params, x, training, dropout_seed, return_cache=True)
    labels = np.asarray(labels, dtype=float)
    if labels.ndim == 1:
        labels = labels[None]
    mask = np.array(cfg.finger_mask)
    B = probs.shape[0]
    loss = bce_loss(c["logits"], labels, mask) + weight_decay * params.sq_norm()
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss at output layer")
    C, K, H = cfg.conv_out, cfg.conv_kernel, cfg.gru_hidden
    I, T = cfg.input_channels, cfg.seq_len
    g = {}
    dlogits = (probs - labels) * mask / (B * mask.sum())
    g["lin2_w"] = dlogits.T @ c["a1"]
    g["lin2_b"] = dlogits.sum(0)
    da1 = dlogits @ p["lin2_w"]
    dz1 = da1 * (c["z1"] > 0)
    g["lin1_w"] = dz1.T @ c["lin_in"]
    g["lin1_b"] = dz1.sum(0)
    dlin_in = dz1 @ p["lin1_w"]
    dlast = dlin_in * c["m2"] if c["m2"] is not None else dlin_in
    ddec = np.zeros((B, T, H))
    ddec[:, -1] = dlast
    denc, g["dec_W"], g["dec_U"], g["dec_b"] = _gru_backward(
        ddec, c["enc"], p["dec_W"], p["dec_U"], c["dec_cache"], H)
    denc_in, g["enc_W"], g["enc_U"], g["enc_b"] = _gru_backward(
        denc, c["enc_in"], p["enc_W"], p["enc_U"], c["enc_cache"], H)
    dconv = denc_in * c["m1"] if c["m1"] is not None else denc_in
    dpre = dconv * (c["conv_pre"] > 0)
    flat = dpre.reshape(B * T, C)
    g["conv_w"] = (flat.T @ c["cols"].reshape(B * T, I * K)).reshape(C, I, K)
    g["conv_b"] = flat.sum(0)
    if weight_decay:
        for name in PARAM_ORDER:
            g[name] = g[name] + 2.0 * weight_decay * p[name]
    for name in PARAM_ORDER:
        if not np.all(np.isfinite(g[name])):
            raise FloatingPointError(f"non-finite gradient in layer {name}")
    if return_probs:
        return loss, g, probs
    return loss, g


def backward(params: ModelParams, batch, labels, weight_decay: float = 0.0,
             training: bool = False, dropout_seed=0) -> dict:
    return loss_and_grad(params, batch, labels, weight_decay, training, dropout_seed)[1]


# -- optimisation ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainSpec:
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    batch: int = 64
    epochs: int = 5
    lr0: float = 1e-3
    plateau_patience: int = 2
    lr_drop_factor: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")


class Adam:
    """Adam with bias correction; the L2 term is already part of the gradient."""

    def __init__(self, params: ModelParams, lr: float, beta1: float, beta2: float, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, params: ModelParams, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            params.arrays[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class PlateauScheduler:
    """Divides the learning rate by ``factor`` once the monitored loss has failed
    to improve for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, patience: int = 2, factor: float = 10.0):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.bad = 0
        self.drops = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr /= self.factor
                self.drops += 1
                self.bad = 0
        return self.lr


class WindowSet:
    """Feature windows (rows, 50) cut lazily from per-session feature sequences.

    ``features``: list of (rows, T_i) arrays; ``labels``: list of (T_i, 5) arrays
    aligned with the feature columns.  Sample ``j`` ends at column ``ends[j]``.
    """

    def __init__(self, features: list, labels: list, seq_len: int = 50, step: int = 1):
        self.features = [np.asarray(f, dtype=float) for f in features]
        self.labels = [np.asarray(l, dtype=float) for l in labels]
        self.seq_len = seq_len
        idx = []
        for s, f in enumerate(self.features):
            for e in range(seq_len - 1, f.shape[1], step):
                idx.append((s, e))
        self.index = np.array(idx, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_arrays(cls, x: np.ndarray, y: np.ndarray) -> "WindowSet":
        """Pre-cut windows x (N, rows, T) and labels y (N, 5)."""
        ws = cls([], [], seq_len=x.shape[2])
        ws.features = [np.ascontiguousarray(w) for w in x]
        ws.labels = [np.asarray(l, dtype=float)[None] for l in y]
        ws.index = np.stack([np.arange(len(x)), np.full(len(x), x.shape[2] - 1)], 1)
        return ws

    def __len__(self):
        return len(self.index)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        L = self.seq_len
        xs, ys = [], []
        for s, e in self.index[idx]:
            xs.append(self.features[s][:, e - L + 1:e + 1])
            lab = self.labels[s]
            ys.append(lab[min(e, len(lab) - 1)] if len(lab) > 1 else lab[0])
        return np.stack(xs), np.stack(ys)

    def all_labels(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))[1] if len(self) else np.zeros((0, 5))


def predict(params: ModelParams, data: WindowSet, batch: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(data), batch):
        x, _ = data.batch(np.arange(i, min(i + batch, len(data))))
        out.append(forward_batch(params, x))
    return np.concatenate(out) if out else np.zeros((0, params.config.outputs))


def _accuracy(probs, labels, mask):
    mask = np.asarray(mask, dtype=bool)
    return float(((probs[:, mask] > 0.5) == (labels[:, mask] > 0.5)).mean())


def train(params: ModelParams, spec: TrainSpec, train_set: WindowSet, val_set: WindowSet | None = None,
          progress=None) -> tuple[ModelParams, list[dict]]:
    """Mini-batch Adam with the plateau learning-rate schedule. Returns trained params and a per-epoch log."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    params = params.copy()
    mask = params.config.finger_mask
    rng = np.random.default_rng([spec.rng_seed, 0x7A1])
    opt = Adam(params, spec.lr0, spec.beta1, spec.beta2, spec.eps)
    sched = PlateauScheduler(spec.lr0, spec.plateau_patience, spec.lr_drop_factor)
    log = []
    n = len(train_set)
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        losses, correct, total = [], 0.0, 0
        lr_used = opt.lr
        for b in range(0, n, spec.batch):
            idx = order[b:b + spec.batch]
            x, y = train_set.batch(idx)
            seed = int(rng.integers(0, 2**63))
            loss, g, probs = loss_and_grad(params, x, y, spec.weight_decay, True, seed, return_probs=True)
            opt.step(params, g)
            losses.append(loss)
            correct += _accuracy(probs, y, mask) * len(idx)
            total += len(idx)
        params.check_finite()
        entry = {"epoch": epoch + 1, "lr": lr_used, "train_loss": float(np.mean(losses)),
                 "train_acc": correct / total}
        if val_set is not None and len(val_set):
            vp = predict(params, val_set)
            vy = val_set.all_labels()
            logits = np.log(np.clip(vp, 1e-300, None)) - np.log(np.clip(1 - vp, 1e-300, None))
            entry["val_loss"] = bce_loss(logits, vy, mask)
            entry["val_acc"] = _accuracy(vp, vy, mask)
        opt.lr = sched.step(entry["train_loss"])
        log.append(entry)
        if progress:
            progress(entry)
    return params, log


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams) -> Path:
    """magic | u16 version | u32 header length | JSON header | float64 LE arrays."""
    header = {"version": CKPT_VERSION, "config": asdict(params.config), "order": list(PARAM_ORDER),
              "shapes": {k: list(v) for k, v in param_shapes(params.config).items()},
              "meta": params.meta}
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(hb)), hb]
    for name in PARAM_ORDER:
        parts.append(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(params.in_mean, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(params.in_std, dtype="<f8").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 6
    header = json.loads(data[off:off + hlen])
    off += hlen
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()})
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, "<f8", n, off).astype(float).reshape(shape)
        off += 8 * n
    I = cfg.input_channels
    in_mean = np.frombuffer(data, "<f8", I, off).astype(float)
    in_std = np.frombuffer(data, "<f8", I, off + 8 * I).astype(float)
    if off + 16 * I != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    return ModelParams(cfg, arrays, in_mean, in_std, header.get("meta", {}))


def with_mask(params: ModelParams, mask) -> ModelParams:
    out = params.copy()
    out.config = replace(out.config, finger_mask=tuple(bool(b) for b in mask))
    return out
