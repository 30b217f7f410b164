"""Baseline CNN / G-CNN assembly, optimisation and training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .groups import GroupName, get_group
from .layers import Dense, Dropout, EquivariantBatchNorm, GConv3d, Layer, MaxPool3d, OrientationPool, ReLU

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "Network",
    "TrainReport",
    "NonFiniteLossError",
    "build_model",
    "count_parameters",
    "xavier_init",
    "AdamState",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "DESK_WIDTHS",
    "PAPER_WIDTHS",
]

DESK_WIDTHS = (8, 8, 16, 16, 32, 32)
PAPER_WIDTHS = (16, 16, 32, 32, 64, 64)


class NonFiniteLossError(FloatingPointError):
    pass


def scaled_width(width: int, order: int) -> int:
    return max(1, int(round(width / math.sqrt(order))))


@dataclass(frozen=True)
class ModelConfig:
    group_name: str = "Z3"
    base_widths: tuple = DESK_WIDTHS
    kernel: tuple = (3, 3, 3)
    pool_after: tuple = (1, 3, 5)
    dropout_after: tuple = (2, 4)
    dropout_p: float = 0.3
    input_shape: tuple = (1, 6, 24, 24)
    n_classes: int = 2
    width_scale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "group_name", GroupName.parse(self.group_name).value)
        for name in ("base_widths", "kernel", "pool_after", "dropout_after", "input_shape"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not self.base_widths or min(self.base_widths) < 1:
            raise ValueError(f"base_widths must be positive, got {self.base_widths}")
        if len(self.input_shape) != 4:
            raise ValueError(f"input_shape must be (c, D, H, W), got {self.input_shape}")

    @property
    def order(self) -> int:
        return get_group(self.group_name).order

    @property
    def widths(self) -> tuple:
        if not self.width_scale:
            return self.base_widths
        return tuple(scaled_width(w, self.order) for w in self.base_widths)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


class Network:
    """Sequential stack of layers with a hand-chained backward pass."""

    def __init__(self, layers: list[Layer], config: ModelConfig | None = None):
        self.layers = list(layers)
        self.config = config

    def forward(self, x, training: bool = False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield f"{i}.{type(layer).__name__}.{k}", v

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, EquivariantBatchNorm):
                yield f"{i}.{type(layer).__name__}.running_mean", layer.running_mean
                yield f"{i}.{type(layer).__name__}.running_var", layer.running_var

    def parameters(self):
        return [v for _, v in self.named_parameters()]

    def gradients(self):
        return [layer.grads[k] for layer in self.layers for k in layer.params]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def state(self) -> dict:
        out = {k: v.copy() for k, v in self.named_parameters()}
        out.update({k: v.copy() for k, v in self.named_buffers()})
        return out

    def load_state(self, state: dict):
        for i, layer in enumerate(self.layers):
            prefix = f"{i}.{type(layer).__name__}."
            for k in layer.params:
                layer.params[k][...] = state[prefix + k]
            if isinstance(layer, EquivariantBatchNorm):
                layer.running_mean[...] = state[prefix + "running_mean"]
                layer.running_var[...] = state[prefix + "running_var"]

    def predict_logits(self, x, batch_size: int = 64):
        x = T.as_tensor(x, 5, "input")
        return np.concatenate([self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])

    def __repr__(self):
        return "Network(\n  " + "\n  ".join(map(repr, self.layers)) + "\n)"


def xavier_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Xavier/Glorot sample on ``+-sqrt(6 / (fan_in + fan_out))``."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)


def _feature_shape(config: ModelConfig) -> tuple:
    c, *spatial = config.input_shape
    for i in range(1, len(config.base_widths) + 1):
        if i in config.pool_after:
            spatial = [-(-s // 2) for s in spatial]
    return tuple(spatial)


def build_model(config: ModelConfig, rng: np.random.Generator | int | None = 0) -> Network:
    """Assemble ``[gconv -> BN -> ReLU (-> pool) (-> dropout)] x L``, orientation
    pooling and a dense head. The trivial group yields the plain CNN."""
    rng = np.random.default_rng(rng)
    init_rng = rng
    dropout_rng = np.random.default_rng(int(rng.integers(2**63)))
    order = config.order
    widths = config.widths
    c_in = config.input_shape[0]
    if min(config.input_shape[1:]) < 1:
        raise ValueError("input too small")
    layers: list[Layer] = []
    for i, w in enumerate(widths, start=1):
        conv = GConv3d(config.group_name, c_in, w, first_layer=(i == 1), kernel=config.kernel)
        conv.params["filters"][...] = xavier_init(conv.filter_shape, *conv.fan_in_out(), init_rng)
        layers += [conv, EquivariantBatchNorm(w, order), ReLU()]
        if i in config.pool_after:
            layers.append(MaxPool3d(2))
        if i in config.dropout_after:
            layers.append(Dropout(config.dropout_p, rng=dropout_rng))
        c_in = w
    layers.append(OrientationPool(order))
    n_flat = widths[-1] * math.prod(_feature_shape(config))
    head = Dense(n_flat, config.n_classes)
    head.params["weight"][...] = xavier_init(head.params["weight"].shape, n_flat, config.n_classes, init_rng)
    layers.append(head)
    return Network(layers, config)


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter count (conv + bias, BN scale/shift, dense head)."""
    order = config.order
    k = math.prod(config.kernel)
    total = 0
    c_in = config.input_shape[0]
    for i, w in enumerate(config.widths):
        total += w * c_in * (order if i > 0 else 1) * k + w
        total += 2 * w
        c_in = w
    n_flat = config.widths[-1] * math.prod(_feature_shape(config))
    total += n_flat * config.n_classes + config.n_classes
    return total


# -- optimiser -------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state have different lengths")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


# -- training ----------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 when nothing ran
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else math.inf

    def epochs_to_reach(self, reference_loss: float) -> int | None:
        """First epoch (1-based) whose validation loss is <= ``reference_loss``."""
        for i, v in enumerate(self.val_loss, start=1):
            if v <= reference_loss:
                return i
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            w.writerow([i, repr(float(a)), repr(float(b))])
        return buf.getvalue()


def evaluate_loss(net: Network, X, y, batch_size: int = 64) -> float:
    total = 0.0
    for i in range(0, len(X), batch_size):
        logits = net.forward(X[i : i + batch_size], training=False)
        loss, _ = T.softmax_cross_entropy(logits, y[i : i + batch_size])
        total += loss * len(logits)
    return total / len(X)


def train(net: Network, X_train, y_train, X_val, y_val, config: TrainConfig = TrainConfig(),
          augment_fn=None, callback=None) -> TrainReport:
    """Mini-batch Adam with validation-based early stopping.

    ``augment_fn(volume, rng) -> volume`` is applied per sample when
    ``config.augment`` is set. ``callback(epoch, report)`` runs after every
    epoch; a truthy return value ends training. The best-validation
    parameters are restored before returning.
    """
    X_train = T.as_tensor(X_train, 5, "X_train")
    X_val = T.as_tensor(X_val, 5, "X_val")
    y_train = np.asarray(y_train, dtype=np.intp)
    y_val = np.asarray(y_val, dtype=np.intp)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("empty dataset")
    shuffle_rng, aug_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    for layer in net.layers:
        if isinstance(layer, Dropout):
            layer.rng = dropout_rng
    params = net.parameters()
    state = AdamState.zeros_like(params)
    report = TrainReport()
    best_state, best = None, math.inf
    since_best = 0
    n = len(X_train)
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = X_train[idx]
            if config.augment and augment_fn is not None:
                xb = np.stack([augment_fn(v, aug_rng) for v in xb]).astype(T.DTYPE)
            logits = net.forward(xb, training=True)
            loss, grad = T.softmax_cross_entropy(logits, y_train[idx])
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}")
            net.backward(grad)
            adam_step(params, net.gradients(), state, config.learning_rate, config.beta1, config.beta2,
                      config.epsilon)
            running += loss * len(idx)
        val = evaluate_loss(net, X_val, y_val)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(running / n)
        report.val_loss.append(val)
        log.debug("epoch %d train %.4f val %.4f", epoch, running / n, val)
        if val < best:
            best, best_state, since_best = val, net.state(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
        if callback is not None and callback(epoch, report):
            break
        if since_best >= config.patience:
            report.stopped_early = True
            break
    if best_state is not None:
        net.load_state(best_state)
    return report


# -- checkpoints -------------------------------------------------------------

_MAGIC = "OCTOCONV-CHECKPOINT 1"


def save_checkpoint(net: Network, path) -> Path:
    """Text manifest, an ``END`` line, then little-endian float32 buffers."""
    path = Path(path)
    state = net.state()
    cfg = asdict(net.config) if net.config is not None else {}
    lines = [_MAGIC, f"group: {cfg.get('group_name', 'Z3')}", f"config: {json.dumps(cfg, sort_keys=True)}"]
    for i, layer in enumerate(net.layers):
        lines.append(f"layer {i} {layer!r}")
    for name, arr in state.items():
        lines.append(f"tensor {name} {' '.join(map(str, arr.shape)) or '-'}")
    lines.append("END")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\nEND\n")
    if not sep:
        raise ValueError(f"{path}: missing END marker")
    lines = head.decode().splitlines()
    if lines[0] != _MAGIC:
        raise ValueError(f"{path}: not an octoconv checkpoint")
    cfg = None
    specs = []
    for line in lines[1:]:
        if line.startswith("config: "):
            cfg = json.loads(line[len("config: ") :])
        elif line.startswith("tensor "):
            _, name, *dims = line.split()
            shape = () if dims == ["-"] else tuple(int(d) for d in dims)
            specs.append((name, shape))
    if cfg is None:
        raise ValueError(f"{path}: manifest has no config line")
    net = build_model(ModelConfig(**cfg), rng=0)
    state, offset = {}, 0
    for name, shape in specs:
        count = math.prod(shape)
        state[name] = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
    if offset != len(body):
        raise ValueError(f"{path}: buffer length {len(body)} does not match manifest ({offset})")
    net.load_state(state)
    return net


def config_from_mapping(cls, mapping: dict):
    """Build a config dataclass from string-valued key/value pairs."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    defaults = cls()
    for key, raw in mapping.items():
        if key not in known:
            continue
        default = getattr(defaults, key)
        if isinstance(default, bool):
            val = str(raw).strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            val = int(raw)
        elif isinstance(default, float):
            val = float(raw)
        elif isinstance(default, tuple):
            val = tuple(int(v) for v in str(raw).replace(",", " ").split())
        else:
            val = str(raw).strip()
        kwargs[key] = val
    return replace(defaults, **kwargs)
