"""Fully-connected feature extractor with hand-written forward/backward passes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .episodes import LabeledDataset
from .errors import ConfigurationError, ContractViolation, ShapeError, TrainingError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "fewshot-calib-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray  # (fan_out,)


@dataclass
class MlpParams:
    """Layer stack; ReLU between layers, linear output.

    ``version`` is bumped by every in-place update so a forward cache can tell
    when it has gone stale.
    """

    layers: list[Layer]
    version: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeError(f"layer {i}: bias does not match weight rows")
            if i and layer.weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ShapeError(
                    f"layer {i} fan_in {layer.weight.shape[1]} != previous fan_out "
                    f"{self.layers[i - 1].weight.shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    def bump(self) -> None:
        self.version += 1

    def equals(self, other: "MlpParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b)
        )


@dataclass
class Gradients:
    """Gradients shaped like ``MlpParams`` plus named buffers for attached heads."""

    layers: list[Layer]
    head: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out


@dataclass
class ForwardCache:
    params: MlpParams
    version: int
    inputs: np.ndarray
    pre: list[np.ndarray]  # pre-activation of every layer
    post: list[np.ndarray]  # input to every layer


def init_mlp(in_dim: int, hidden: tuple[int, ...] = (64, 64), out_dim: int = 16, seed: int = 0) -> MlpParams:
    """He-style uniform init: ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden, out_dim]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append(Layer(rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers)


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"input dimension {x.shape[1]} != network fan_in {params.in_dim}")
    pre, post = [], []
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        post.append(h)
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, ForwardCache(params, params.version, x, pre, post)


def backward(cache: ForwardCache, upstream: np.ndarray, params: MlpParams | None = None) -> tuple[Gradients, np.ndarray]:
    """Backpropagate ``upstream = dL/dfeatures``. Returns parameter and input gradients.

    ReLU'(0) is taken as 0.
    """
    if params is not None and params is not cache.params:
        raise ContractViolation("forward cache belongs to a different parameter set")
    if cache.version != cache.params.version:
        raise ContractViolation(
            f"stale forward cache (cache version {cache.version}, params version {cache.params.version})"
        )
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} != feature shape {cache.pre[-1].shape}")
    grads = [None] * len(cache.params.layers)
    for i in range(len(cache.params.layers) - 1, -1, -1):
        layer = cache.params.layers[i]
        if i != len(cache.params.layers) - 1:
            g = g * (cache.pre[i] > 0)
        grads[i] = Layer(g.T @ cache.post[i], g.sum(axis=0))
        g = g @ layer.weight
    return Gradients(grads), g


# ---------------------------------------------------------------------------
# pretraining on base classes


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -np.mean(log_p[np.arange(n), labels])
    p = np.exp(log_p)
    p[np.arange(n), labels] -= 1.0
    return float(loss), p / n


def pretrain(
    params: MlpParams,
    dataset: LabeledDataset,
    config: PretrainConfig,
    return_head: bool = False,
):
    """Fit the extractor on base classes through a temporary linear softmax head.

    Mini-batch SGD with momentum. The input ``params`` is left untouched; the
    head is discarded unless ``return_head`` is set.
    """
    if len(dataset) == 0:
        raise ConfigurationError("pretraining needs a non-empty dataset")
    if config.epochs < 0 or config.batch_size < 1 or config.lr < 0:
        raise ConfigurationError(f"invalid pretraining config {config}")
    rng = np.random.default_rng(config.seed)
    net = params.copy()
    num_classes = int(dataset.labels.max()) + 1
    d = net.out_dim
    bound = np.sqrt(6.0 / d)
    head_w = rng.uniform(-bound, bound, (num_classes, d))
    head_b = np.zeros(num_classes)

    values = net.arrays() + [head_w, head_b]
    velocity = [np.zeros_like(v) for v in values]
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            feats, cache = forward(net, dataset.inputs[idx])
            logits = feats @ head_w.T + head_b
            loss, dlogits = _softmax_xent(logits, dataset.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError("pretraining loss became non-finite", epoch)
            total += loss * idx.size
            grads, _ = backward(cache, dlogits @ head_w)
            grad_list = grads.arrays() + [dlogits.T @ feats, dlogits.sum(axis=0)]
            for v, vel, g in zip(values, velocity, grad_list):
                vel *= config.momentum
                vel -= config.lr * g
                v += vel
            net.bump()
        if not np.isfinite(total) or not all(np.all(np.isfinite(v)) for v in values):
            raise TrainingError("pretraining diverged", epoch)
        log.debug("pretrain epoch %d loss %.4f", epoch, total / n)
    if return_head:
        return net, (head_w, head_b)
    return net


def head_accuracy(params: MlpParams, head, dataset: LabeledDataset) -> float:
    feats, _ = forward(params, dataset.inputs)
    logits = feats @ head[0].T + head[1]
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# ---------------------------------------------------------------------------
# checkpoints: text header with layer shapes, then row-major values


def save_params(params: MlpParams, path) -> None:
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}", f"layers {len(params.layers)}"]
    for layer in params.layers:
        fan_out, fan_in = layer.weight.shape
        lines.append(f"layer {fan_out} {fan_in}")
        for row in layer.weight:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in layer.bias))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_params(path) -> MlpParams:
    with open(path) as f:
        lines = f.read().splitlines()
    try:
        magic, version = lines[0].split()
        if magic != CHECKPOINT_MAGIC or version != f"v{CHECKPOINT_VERSION}":
            raise ConfigurationError(f"{path}: not a v{CHECKPOINT_VERSION} checkpoint")
        count = int(lines[1].split()[1])
        pos = 2
        layers = []
        for _ in range(count):
            tag, fan_out, fan_in = lines[pos].split()
            if tag != "layer":
                raise ConfigurationError(f"{path}:{pos + 1}: expected layer header")
            fan_out, fan_in = int(fan_out), int(fan_in)
            rows = [[float(v) for v in lines[pos + 1 + r].split()] for r in range(fan_out)]
            weight = np.array(rows, dtype=np.float64).reshape(fan_out, fan_in)
            bias = np.array([float(v) for v in lines[pos + 1 + fan_out].split()], dtype=np.float64)
            layers.append(Layer(weight, bias))
            pos += fan_out + 2
    except (IndexError, ValueError) as exc:
        raise ConfigurationError(f"{path}: malformed checkpoint ({exc})") from None
    return MlpParams(layers)
