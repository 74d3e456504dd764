"""Small convolutional DOA classifier in plain numpy.

Tensors are NHWC float64. Each of the three convolution stages runs
conv(3x3, same) -> batch norm -> max pool -> dropout -> leaky ReLU, then two
dense layers of 128 with leaky ReLU and a linear 72-way output.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

REFERENCE_PARAM_COUNT = 36008
# Audit for the default config, (weights + biases + batch-norm scale/shift):
#   conv1 3*3*24*16 + 16 = 3472    bn1 2*16 = 32
#   conv2 3*3*16*16 + 16 = 2320    bn2 32
#   conv3 3*3*16*16 + 16 = 2320    bn3 32
#   fc1   16*128 + 128   = 2176
#   fc2   128*128 + 128  = 16512
#   out   128*72 + 72    = 9288
#   total                = 36184   (+176, +0.49 % vs 36008)
AUDITED_PARAM_COUNT = 36184


class ShapeError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


class NotAModelFile(ModelFileError):
    pass


class CorruptModelFile(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ParamCountMismatch(ModelFileError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (15, 15, 24)
    conv_channels: tuple = (16, 16, 16)
    kernel: int = 3
    pools: tuple = (2, 2, 3)
    fc_widths: tuple = (128, 128)
    classes: int = 72
    leaky_slope: float = 0.01
    dropout_rate: float = 0.5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        for name in ("input_shape", "conv_channels", "pools", "fc_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.conv_channels) != len(self.pools):
            raise ShapeError("conv_channels and pools must have the same length")
        if self.kernel % 2 != 1:
            raise ShapeError(f"kernel must be odd for same padding, got {self.kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def shape_chain(self) -> list[tuple]:
        """Spatial/channel shape after every stage; raises naming the failing stage."""
        h, w, c = self.input_shape
        chain = [(h, w, c)]
        for i, (ch, pool) in enumerate(zip(self.conv_channels, self.pools), start=1):
            if h // pool < 1 or w // pool < 1:
                raise ShapeError(
                    f"stage conv{i}: pooling {pool}x{pool} on a {h}x{w} map leaves nothing"
                )
            h, w, c = h // pool, w // pool, ch
            chain.append((h, w, c))
        chain.append((h * w * c,))
        chain.extend((n,) for n in self.fc_widths)
        chain.append((self.classes,))
        return chain

    @property
    def flat_size(self) -> int:
        return self.shape_chain()[len(self.conv_channels) + 1][0]


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @property
    def n_conv(self) -> int:
        return len(self.config.conv_channels)

    @property
    def dense_names(self) -> list[str]:
        return [f"fc{i + 1}" for i in range(len(self.config.fc_widths))] + ["out"]

    def copy(self) -> "Model":
        return Model(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


def model_init(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> Model:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases, identity batch norm."""
    cfg.shape_chain()
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    c_in = cfg.input_shape[2]
    k = cfg.kernel
    for i, c_out in enumerate(cfg.conv_channels, start=1):
        fan_in = k * k * c_in
        lim = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.w"] = rng.uniform(-lim, lim, size=(k, k, c_in, c_out))
        params[f"conv{i}.b"] = np.zeros(c_out)
        params[f"bn{i}.gamma"] = np.ones(c_out)
        params[f"bn{i}.beta"] = np.zeros(c_out)
        buffers[f"bn{i}.mean"] = np.zeros(c_out)
        buffers[f"bn{i}.var"] = np.ones(c_out)
        c_in = c_out
    widths = [cfg.flat_size, *cfg.fc_widths, cfg.classes]
    names = [f"fc{i + 1}" for i in range(len(cfg.fc_widths))] + ["out"]
    for name, n_in, n_out in zip(names, widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / n_in)
        params[f"{name}.w"] = rng.uniform(-lim, lim, size=(n_in, n_out))
        params[f"{name}.b"] = np.zeros(n_out)
    return Model(cfg, params, buffers)


def param_count(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


# ------------------------------------------------------------------------- layers

def _conv_forward(x, w, b):
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, wd, c = x.shape
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, h, w, c, k, k)
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, k * k * c)
    out = cols @ w.reshape(k * k * c, -1) + b
    return out.reshape(n, h, wd, -1), cols


def _conv_backward(dout, cols, x_shape, w):
    k = w.shape[0]
    p = k // 2
    n, h, wd, c = x_shape
    d2 = dout.reshape(n * h * wd, -1)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(k * k * c, -1).T).reshape(n, h, wd, k, k, c)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + wd, :], dw, db


def _pool_forward(x, k):
    n, h, w, c = x.shape
    ho, wo = h // k, w // k
    xr = x[:, :ho * k, :wo * k, :].reshape(n, ho, k, wo, k, c)
    xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
    arg = np.argmax(xr, axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape, k):
    n, h, w, c = x_shape
    ho, wo = h // k, w // k
    dwin = np.zeros((n, ho, wo, c, k * k))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * k, wo * k, c)
    dx = np.zeros(x_shape)
    dx[:, :ho * k, :wo * k, :] = dwin
    return dx


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


# ------------------------------------------------------------------------ forward

def _forward(model: Model, x, training: bool, rng, update_stats: bool, keep: bool):
    cfg = model.config
    P, B = model.params, model.buffers
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != cfg.input_shape:
        raise ShapeError(f"expected input of shape (batch, {cfg.input_shape}), got {x.shape}")
    drop = training and cfg.dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("training with dropout needs an rng")
    caches = []
    h = x
    for i in range(1, model.n_conv + 1):
        cache = {"x_shape": h.shape}
        z, cache["cols"] = _conv_forward(h, P[f"conv{i}.w"], P[f"conv{i}.b"])
        if training:
            mu = z.mean(axis=(0, 1, 2))
            var = z.var(axis=(0, 1, 2))
            if update_stats:
                m = cfg.bn_momentum
                B[f"bn{i}.mean"] = m * B[f"bn{i}.mean"] + (1 - m) * mu
                B[f"bn{i}.var"] = m * B[f"bn{i}.var"] + (1 - m) * var
        else:
            mu, var = B[f"bn{i}.mean"], B[f"bn{i}.var"]
        inv = 1.0 / np.sqrt(var + cfg.bn_eps)
        zhat = (z - mu) * inv
        y = P[f"bn{i}.gamma"] * zhat + P[f"bn{i}.beta"]
        cache.update(zhat=zhat, inv=inv, bn_shape=y.shape)
        pooled, cache["arg"] = _pool_forward(y, cfg.pools[i - 1])
        if drop:
            mask = (rng.random(pooled.shape) >= cfg.dropout_rate) / (1.0 - cfg.dropout_rate)
            pooled = pooled * mask
            cache["drop"] = mask
        cache["pre_act"] = pooled
        h = _leaky(pooled, cfg.leaky_slope)
        caches.append(cache)
    h = h.reshape(h.shape[0], -1)
    for name in model.dense_names:
        cache = {"x": h}
        z = h @ P[f"{name}.w"] + P[f"{name}.b"]
        cache["pre_act"] = z
        h = z if name == "out" else _leaky(z, cfg.leaky_slope)
        caches.append(cache)
    return h, (caches if keep else None)


def forward(model: Model, x, training: bool = False, rng=None, update_stats: bool = False) -> np.ndarray:
    """Logits, shape (batch, classes). Inference uses the running batch-norm statistics."""
    logits, _ = _forward(model, x, training, rng, update_stats, keep=False)
    return logits


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def _backward(model: Model, caches, dlogits):
    cfg = model.config
    P = model.params
    grads = {}
    g = dlogits
    n_conv = model.n_conv
    for name, cache in zip(reversed(model.dense_names), reversed(caches[n_conv:])):
        if name != "out":
            g = g * np.where(cache["pre_act"] > 0, 1.0, cfg.leaky_slope)
        grads[f"{name}.w"] = cache["x"].T @ g
        grads[f"{name}.b"] = g.sum(axis=0)
        g = g @ P[f"{name}.w"].T
    g = g.reshape((g.shape[0], *caches[n_conv - 1]["pre_act"].shape[1:]))
    for i in range(n_conv, 0, -1):
        cache = caches[i - 1]
        g = g * np.where(cache["pre_act"] > 0, 1.0, cfg.leaky_slope)
        if "drop" in cache:
            g = g * cache["drop"]
        g = _pool_backward(g, cache["arg"], cache["bn_shape"], cfg.pools[i - 1])
        zhat, inv = cache["zhat"], cache["inv"]
        grads[f"bn{i}.gamma"] = (g * zhat).sum(axis=(0, 1, 2))
        grads[f"bn{i}.beta"] = g.sum(axis=(0, 1, 2))
        dzhat = g * P[f"bn{i}.gamma"]
        m = zhat.shape[0] * zhat.shape[1] * zhat.shape[2]
        g = (inv / m) * (
            m * dzhat - dzhat.sum(axis=(0, 1, 2)) - zhat * (dzhat * zhat).sum(axis=(0, 1, 2))
        )
        g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_backward(
            g, cache["cols"], cache["x_shape"], P[f"conv{i}.w"]
        )
    return {k: grads[k] for k in P}


def loss_and_grads(model: Model, x, labels, rng=None, update_stats: bool = False):
    """Mean softmax cross-entropy of a training-mode forward pass and its exact gradients."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.config.classes:
        raise ValueError("labels out of range")
    logits, caches = _forward(model, x, True, rng, update_stats, keep=True)
    loss = cross_entropy(logits, labels)
    d = softmax(logits)
    d[np.arange(len(labels)), labels] -= 1.0
    return loss, _backward(model, caches, d / len(labels))


# -------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Model, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in model.params.items()},
            {k: np.zeros_like(p) for k, p in model.params.items()},
            lr=lr,
            **kw,
        )

    def update(self, params: dict, grads: dict) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train_step(model: Model, adam: AdamState, x, labels, rng) -> float:
    """One Adam step on a mini-batch (updates ``model`` and ``adam`` in place)."""
    loss, grads = loss_and_grads(model, x, labels, rng, update_stats=True)
    adam.update(model.params, grads)
    return loss


def predict(model: Model, feature_maps) -> np.ndarray:
    """Class indices; ties go to the lowest index."""
    x = np.asarray(getattr(feature_maps, "values", feature_maps), dtype=np.float64)
    single = x.ndim == 3
    out = np.argmax(forward(model, x), axis=-1)
    return int(out[0]) if single else out


def predict_batched(model: Model, x, batch: int = 256) -> np.ndarray:
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.argmax(forward(model, x[i:i + batch]), axis=-1) for i in range(0, len(x), batch)])


# ------------------------------------------------------------------ serialization
#
# Container, little endian:
#   8s  magic b"SIDOANN\0"
#   u32 format version (1)
#   u32 config length L, then L bytes of UTF-8 JSON (sorted keys)
#   u64 learnable parameter count
#   u32 tensor count T, then T tensors: u16 name length, name, u8 ndim,
#       u32 dims..., f8 data row-major (parameters in declared order, then buffers)
#   u8  optimizer flag; when 1: u64 step, f8 lr, beta1, beta2, eps, then the first
#       and second moments of every parameter (data only, parameter order)

MODEL_MAGIC = b"SIDOANN\0"
MODEL_VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def model_bytes(model: Model, adam: AdamState | None = None) -> bytes:
    fh = io.BytesIO()
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    fh.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(cfg)) + cfg)
    fh.write(struct.pack("<Q", param_count(model)))
    tensors = list(model.params.items()) + list(model.buffers.items())
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(fh, name, arr)
    if adam is None:
        fh.write(b"\x00")
    else:
        fh.write(b"\x01" + struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        for moments in (adam.m, adam.v):
            for name in model.params:
                fh.write(np.ascontiguousarray(moments[name], dtype="<f8").tobytes())
    return fh.getvalue()


def save_model(model: Model, path, adam: AdamState | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_bytes(model, adam))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptModelFile("corrupt container: file is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def load_model(path, with_optimizer: bool = False):
    """Read a model container. Returns ``Model`` or ``(Model, AdamState | None)``."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MODEL_MAGIC) or raw[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise NotAModelFile(f"{path}: not a model file")
    r = _Reader(raw)
    r.take(len(MODEL_MAGIC))
    version, cfg_len = r.unpack("II")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{path}: model format version {version}, expected {MODEL_VERSION}")
    try:
        cfg = ModelConfig(**json.loads(r.take(cfg_len).decode()))
    except (ValueError, TypeError) as exc:
        raise CorruptModelFile(f"corrupt container: bad config block ({exc})") from exc
    (count,) = r.unpack("Q")
    reference = model_init(cfg, 0)
    (n_tensors,) = r.unpack("I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        tensors[name] = r.array(shape)
    params = {k: tensors.get(k) for k in reference.params}
    buffers = {k: tensors.get(k) for k in reference.buffers}
    if any(v is None for v in (*params.values(), *buffers.values())):
        raise CorruptModelFile("corrupt container: missing tensors")
    for k, v in params.items():
        if v.shape != reference.params[k].shape:
            raise CorruptModelFile(f"corrupt container: tensor {k} has shape {v.shape}")
    model = Model(cfg, params, buffers)
    if param_count(model) != count:
        raise ParamCountMismatch(
            f"{path}: header declares {count} parameters, tensors hold {param_count(model)}"
        )
    (flag,) = r.unpack("B")
    adam = None
    if flag:
        step, lr, b1, b2, eps = r.unpack("Q4d")
        m = {k: r.array(p.shape) for k, p in params.items()}
        v = {k: r.array(p.shape) for k, p in params.items()}
        adam = AdamState(m, v, step, lr, b1, b2, eps)
    if r.pos != len(raw):
        raise CorruptModelFile("corrupt container: trailing bytes")
    return (model, adam) if with_optimizer else model
