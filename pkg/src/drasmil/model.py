"""Gated-attention MIL bag classifier with hand-written backpropagation."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from drasmil.seeding import make_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DRASMIL1"


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    attn_V: np.ndarray  # L x M
    attn_U: np.ndarray  # L x M
    attn_w: np.ndarray  # L
    head_layers: list  # [(W, b), ...], W is out x in

    def __post_init__(self):
        if self.attn_V.shape != self.attn_U.shape or self.attn_V.ndim != 2:
            raise ShapeError("attn_V and attn_U must be identical L x M matrices")
        if self.attn_w.shape != (self.attn_V.shape[0],):
            raise ShapeError("attn_w length must equal L")
        if not self.head_layers:
            raise ShapeError("head needs at least one layer")
        width = self.M
        for W, b in self.head_layers:
            if W.ndim != 2 or W.shape[1] != width or b.shape != (W.shape[0],):
                raise ShapeError("head layer widths do not chain")
            width = W.shape[0]
        if width != 2:
            raise ShapeError("final head layer must output 2 logits")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise NumericError("non-finite parameter")

    @property
    def L(self) -> int:
        return self.attn_V.shape[0]

    @property
    def M(self) -> int:
        return self.attn_V.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = [self.attn_V, self.attn_U, self.attn_w]
        for W, b in self.head_layers:
            out += [W, b]
        return out

    def with_arrays(self, arrays) -> "ModelParams":
        arrays = list(arrays)
        layers = [(arrays[i], arrays[i + 1]) for i in range(3, len(arrays), 2)]
        return ModelParams(arrays[0], arrays[1], arrays[2], layers)

    def copy(self) -> "ModelParams":
        return self.with_arrays(a.copy() for a in self.arrays())

    @classmethod
    def init(cls, M: int = 1024, L: int = 256, seed: int = 0, hidden: int | None = None):
        """Glorot-uniform init; head is M -> hidden (default M//2) -> 2."""
        hidden = max(1, M // 2) if hidden is None else hidden
        rng = make_rng(seed, "init")

        def glorot(rows, cols):
            lim = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-lim, lim, size=(rows, cols))

        V = glorot(L, M)
        U = glorot(L, M)
        w = glorot(1, L)[0]
        layers = [(glorot(hidden, M), np.zeros(hidden)), (glorot(2, hidden), np.zeros(2))]
        return cls(V, U, w, layers)


@dataclass
class AttentionResult:
    scores: np.ndarray
    logits: np.ndarray
    bag_embedding: np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float = 0.0038
    weight_decay: float = 0.00079
    dropout: float = 0.020
    loss_mode: str = "cross_entropy"
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.loss_mode not in ("cross_entropy", "balanced_cross_entropy"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    z = np.exp(x - x.max())
    return z / z.sum()


def _check_features(params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ShapeError("features must be a non-empty K x M matrix")
    if features.shape[1] != params.M:
        raise ShapeError(f"feature width {features.shape[1]} != M={params.M}")
    if not np.isfinite(features).all():
        raise NumericError("non-finite features")
    return features


def _attention_parts(params, h):
    t = np.tanh(h @ params.attn_V.T)
    g = _sigmoid(h @ params.attn_U.T)
    logits = (t * g) @ params.attn_w
    return t, g, logits


def attention_forward(params: ModelParams, features: np.ndarray) -> AttentionResult:
    h = _check_features(params, features)
    _, _, logits = _attention_parts(params, h)
    scores = _softmax(logits)
    return AttentionResult(scores, logits, scores @ h)


def _head_forward(params, z, mask=None):
    acts = [z]
    pres = []
    x = z
    n = len(params.head_layers)
    for i, (W, b) in enumerate(params.head_layers):
        pre = W @ x + b
        pres.append(pre)
        if i < n - 1:
            x = np.maximum(pre, 0.0)
            if mask is not None:
                x = x * mask
            acts.append(x)
        else:
            x = pre
    return x, acts, pres


def classify(params: ModelParams, bag_embedding: np.ndarray, dropout_off: bool = True,
             dropout: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    z = np.asarray(bag_embedding, dtype=np.float64)
    if z.shape != (params.M,):
        raise ShapeError(f"embedding length {z.shape} != ({params.M},)")
    mask = None
    if not dropout_off and dropout > 0:
        mask = dropout_mask(params, dropout, rng or np.random.default_rng())
    return _head_forward(params, z, mask)[0]


def predict(params: ModelParams, features: np.ndarray):
    """Attention result and class logits for one bag, dropout off."""
    att = attention_forward(params, features)
    return att, classify(params, att.bag_embedding)


def positive_probability(logits: np.ndarray) -> float:
    return float(_softmax(np.asarray(logits, dtype=np.float64))[1])


def dropout_mask(params: ModelParams, p: float, rng: np.random.Generator) -> np.ndarray:
    width = params.head_layers[0][0].shape[0]
    return (rng.random(width) >= p) / (1.0 - p)


def class_weights(class_counts) -> np.ndarray:
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.shape != (2,) or (counts <= 0).any():
        raise ConfigError("balanced loss needs positive counts for both classes")
    return counts.sum() / (2.0 * counts)


def loss(logits, label: int, loss_mode: str = "cross_entropy", class_counts=None) -> float:
    if label not in (0, 1):
        raise ValueError(f"invalid label {label!r}")
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    ce = float(m + np.log(np.exp(logits - m).sum()) - logits[label])
    if loss_mode == "balanced_cross_entropy":
        return ce * class_weights(class_counts)[label]
    if loss_mode != "cross_entropy":
        raise ConfigError(f"unknown loss_mode {loss_mode!r}")
    return ce


@dataclass
class Gradients:
    params: ModelParams
    features: np.ndarray
    loss: float


def gradients(params: ModelParams, features: np.ndarray, label: int,
              config: TrainConfig | None = None, class_counts=None, mask=None) -> Gradients:
    """Exact gradient of the bag loss; dropout is off unless a fixed ``mask`` is given."""
    config = config or TrainConfig()
    h = _check_features(params, features)
    t, g, s = _attention_parts(params, h)
    a = _softmax(s)
    z = a @ h
    logits, acts, pres = _head_forward(params, z, mask)
    value = loss(logits, label, config.loss_mode, class_counts)
    scale = 1.0
    if config.loss_mode == "balanced_cross_entropy":
        scale = class_weights(class_counts)[label]

    dlogit = _softmax(logits)
    dlogit[label] -= 1.0
    dlogit *= scale

    head_grads = []
    delta = dlogit
    n = len(params.head_layers)
    for i in range(n - 1, -1, -1):
        W, _ = params.head_layers[i]
        head_grads.append((np.outer(delta, acts[i]), delta.copy()))
        dx = W.T @ delta
        if i > 0:
            if mask is not None:
                dx = dx * mask
            delta = dx * (pres[i - 1] > 0)
        else:
            dz = dx
    head_grads.reverse()

    da = h @ dz
    ds = a * (da - a @ da)
    tg = t * g
    dw = ds @ tg
    back = ds[:, None] * params.attn_w[None, :]
    dVh = back * g * (1.0 - t * t)
    dUh = back * t * g * (1.0 - g)
    dV = dVh.T @ h
    dU = dUh.T @ h
    dh = a[:, None] * dz[None, :] + dVh @ params.attn_V + dUh @ params.attn_U
    return Gradients(ModelParams(dV, dU, dw, head_grads), dh, value)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState,
              learning_rate: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelParams:
    """One Adam update with decoupled weight decay. Mutates ``state``."""
    p_arr = params.arrays()
    g_arr = grads.arrays()
    if len(p_arr) != len(g_arr) or any(p.shape != q.shape for p, q in zip(p_arr, g_arr)):
        raise ShapeError("gradient shapes do not match parameters")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    new = []
    for i, (p, g) in enumerate(zip(p_arr, g_arr)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        step = (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + eps)
        new.append(p - learning_rate * step - learning_rate * weight_decay * p)
    return params.with_arrays(new)


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
            yield {"epoch": i, "train_loss": tr, "val_loss": va}


def mean_loss(params: ModelParams, bags, config: TrainConfig, class_counts=None) -> float:
    total = 0.0
    for bag in bags:
        _, logits = predict(params, bag.features)
        total += loss(logits, bag.label, config.loss_mode, class_counts)
    return total / len(bags)


def train(bags, val, config: TrainConfig, M: int | None = None, L: int = 256,
          init: ModelParams | None = None):
    """Adam, one bag per step; returns the lowest-validation-loss parameters and the log."""
    bags = list(bags)
    val = list(val)
    counts = np.bincount([b.label for b in bags], minlength=2)
    if (counts == 0).any():
        raise ConfigError("training set needs at least one bag of each class")
    if not val:
        raise ConfigError("validation set is empty")
    if init is None:
        M = bags[0].features.shape[1] if M is None else M
        init = ModelParams.init(M=M, L=L, seed=config.seed)
    params = init.copy()
    state = AdamState.zeros_like(params)
    rng = make_rng(config.seed, "train")
    trace = TrainLog()
    best = params.copy()
    best_val = mean_loss(params, val, config, counts)
    stale = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(bags))
        total = 0.0
        for j in order:
            bag = bags[j]
            mask = dropout_mask(params, config.dropout, rng) if config.dropout > 0 else None
            gr = gradients(params, bag.features, bag.label, config, counts, mask)
            total += gr.loss
            params = adam_step(params, gr.params, state, config.learning_rate, config.weight_decay)
        val_loss = mean_loss(params, val, config, counts)
        trace.train_loss.append(total / len(bags))
        trace.val_loss.append(val_loss)
        log.debug("epoch %d train %.5f val %.5f", epoch, total / len(bags), val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = params.copy()
            trace.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, trace


def save_checkpoint(params: ModelParams, path, metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        dims = [params.L, params.M, len(params.head_layers)]
        for W, _ in params.head_layers:
            dims += [W.shape[0], W.shape[1]]
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)


def load_checkpoint(path):
    """Returns ``(params, metadata)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        off = 8
        L, M, n_layers = struct.unpack_from("<3Q", data, off)
        off += 24
        shapes = [(L, M), (L, M), (L,)]
        for _ in range(n_layers):
            out_w, in_w = struct.unpack_from("<2Q", data, off)
            off += 16
            shapes += [(out_w, in_w), (out_w,)]
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape))
            if off + 8 * n > len(data):
                raise CheckpointError(f"{path}: truncated checkpoint")
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off)
                          .astype(np.float64).reshape(shape))
            off += 8 * n
        (mlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + mlen != len(data):
            raise CheckpointError(f"{path}: bad metadata length")
        meta = json.loads(data[off:off + mlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return ModelParams(arrays[0], arrays[1], arrays[2],
                       [(arrays[i], arrays[i + 1]) for i in range(3, len(arrays), 2)]), meta


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
