"""Per-episode finetuning: backbone -> calibration -> prototype classifier, full-batch Adam."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import dcm
from .backbone import MlpParams, backward, forward
from .classifier import (
    ClassifierHead,
    Prototypes,
    compute_prototypes,
    cross_entropy,
    logits,
    logits_backward,
    probabilities,
)
from .episodes import Episode
from .errors import ConfigurationError, NumericError, ShapeError, TrainingError
from .sampling import ProposalConfig, augment_support

TEMPERATURE_FLOOR = 1e-3


@dataclass(frozen=True)
class AblationFlags:
    backbone: bool = False
    scale: bool = False
    feature_norm: bool = False
    selected_sampling: bool = False

    @property
    def name(self) -> str:
        parts = [tag for tag, on in (("B", self.backbone), ("FN", self.feature_norm),
                                     ("S", self.scale), ("SS", self.selected_sampling)) if on]
        return "+".join(parts) if parts else "none"

    @classmethod
    def parse(cls, name: str) -> "AblationFlags":
        if name == "none":
            return cls()
        tags = set(name.split("+"))
        unknown = tags - {"B", "FN", "S", "SS"}
        if unknown:
            raise ConfigurationError(f"unknown ablation tag(s) {sorted(unknown)} in {name!r}")
        return cls("B" in tags, "S" in tags, "FN" in tags, "SS" in tags)


ABLATION_ROWS = ("none", "B", "B+FN", "B+FN+S", "B+FN+S+SS")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 5e-5
    epochs: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flags: AblationFlags = AblationFlags(True, True, True, True)
    freeze_temperature: bool = False
    temperature: float = 10.0
    head_mode: str = "cosine"
    sigma_walk: float = 0.1
    max_chain_len: int = 20
    dcm_epsilon: float = dcm.DEFAULT_EPSILON
    # refit mu/sigma from the current support features every epoch
    refit_stats: bool = True
    # differentiate through mu/sigma instead of treating them as constants
    stats_grad: bool = False
    # let the loss gradient flow through the support-mean prototypes
    proto_grad: bool = True
    # record query metrics every epoch (read-only; never feeds training)
    track_query: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.stats_grad and not self.refit_stats:
            raise ConfigurationError("stats_grad requires refit_stats")
        ClassifierHead(self.temperature, self.head_mode)
        ProposalConfig(self.sigma_walk, self.max_chain_len, self.seed)


class Adam:
    """Bias-corrected adaptive-moment updates over named groups of arrays, in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, list[np.ndarray]] = {}
        self.v: dict[str, list[np.ndarray]] = {}

    def step(self, groups: dict[str, list[np.ndarray]], grads: dict[str, list[np.ndarray]], enabled) -> None:
        enabled = set(enabled)
        for name in enabled:
            for g in grads.get(name, ()):
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient in parameter group '{name}'", name)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, values in groups.items():
            if name not in enabled or name not in grads:
                continue
            if name not in self.m:
                self.m[name] = [np.zeros_like(v) for v in values]
                self.v[name] = [np.zeros_like(v) for v in values]
            for value, g, m, v in zip(values, grads[name], self.m[name], self.v[name]):
                if value.shape != g.shape:
                    raise ShapeError(f"group '{name}': gradient {g.shape} vs value {value.shape}")
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class EpochTrace:
    epoch: int
    support_loss: float
    support_acc: float
    query_loss: float | None = None
    query_acc: float | None = None
    mean_chain_length: float | None = None
    bias_norm: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepOutput:
    loss: float
    accuracy: float
    prototypes: Prototypes
    state: dcm.DcmState | None
    grads: dict[str, list[np.ndarray]] = field(default_factory=dict)
    input_grad: np.ndarray | None = None
    chain_lengths: np.ndarray | None = None


@dataclass
class FinetuneResult:
    params: MlpParams
    scale: np.ndarray
    temperature: float
    traces: list[EpochTrace]
    query_accuracy: float
    query_loss: float
    query_logits: np.ndarray
    query_predictions: np.ndarray
    prototypes: Prototypes
    state: dcm.DcmState | None


class FinetuneAborted(TrainingError):
    def __init__(self, message: str, epoch: int, traces: list[EpochTrace]):
        super().__init__(message, epoch)
        self.traces = traces


def _embed(params, x, config: FinetuneConfig, scale, state, refit):
    feats, cache = forward(params, x)
    if not config.flags.feature_norm:
        return feats, cache, None, None, feats
    if refit or state is None or not state.fitted:
        mu, sigma = dcm.fit_stats(feats, config.dcm_epsilon)
        state = dcm.DcmState(mu, sigma, scale, config.dcm_epsilon)
    else:
        state = dcm.DcmState(state.mu, state.sigma, scale, config.dcm_epsilon)
    normalized = dcm.normalize(feats, state)
    return feats, cache, state, normalized, normalized * scale


def _support_prototypes(g, labels, num_ways, head, config: FinetuneConfig, epoch):
    protos = compute_prototypes(g, labels, num_ways)
    if not config.flags.selected_sampling:
        return protos, protos.counts.astype(np.float64), None
    proposal = ProposalConfig(config.sigma_walk, config.max_chain_len, config.seed)
    aug = augment_support(g, labels, protos, head, proposal, epoch)
    augmented = compute_prototypes(aug.features, aug.labels, num_ways, augmented=True)
    return augmented, augmented.counts.astype(np.float64), aug.chain_lengths


def support_step(
    params: MlpParams,
    scale: np.ndarray,
    temperature: float,
    x: np.ndarray,
    y: np.ndarray,
    num_ways: int,
    config: FinetuneConfig,
    state: dcm.DcmState | None = None,
    epoch: int = 0,
    need_grad: bool = True,
    input_grad: bool = False,
) -> StepOutput:
    """One full-batch forward/backward pass of the support loss.

    Gradients are returned for every group (``backbone``, ``scale``,
    ``temperature``) whether or not the group is trainable; the optimizer
    decides what to apply. Accepted selected-sampling points enter the
    prototypes as constants.
    """
    head = ClassifierHead(temperature, config.head_mode)
    refit = config.refit_stats or state is None
    feats, cache, state, normalized, g = _embed(params, x, config, scale, state, refit)
    protos, counts, chain_lengths = _support_prototypes(g, y, num_ways, head, config, epoch)

    z = logits(g, protos, head)
    probs = probabilities(z)
    ce = cross_entropy(probs, y)
    acc = float(np.mean(np.argmax(z, axis=1) == y))
    out = StepOutput(ce.loss, acc, protos, state, chain_lengths=chain_lengths)
    if not need_grad:
        return out

    d_g, d_w, d_tau = logits_backward(g, protos, head, ce.grad_logits)
    if config.proto_grad:
        d_g = d_g + d_w[y] / counts[y][:, None]
    grads: dict[str, list[np.ndarray]] = {"temperature": [np.array([d_tau])]}
    if config.flags.feature_norm:
        grads["scale"] = [dcm.scale_gradient(d_g, normalized)]
        if config.stats_grad:
            d_f = dcm.stats_gradient_full(d_g, feats, state)
        else:
            d_f = dcm.stats_gradient_passthrough(d_g, state)
    else:
        grads["scale"] = [np.zeros_like(scale)]
        d_f = d_g
    if config.flags.backbone or input_grad:
        bgrads, d_x = backward(cache, d_f, params)
        grads["backbone"] = bgrads.arrays()
        out.input_grad = d_x
    out.grads = grads
    return out


def evaluate_query(
    params: MlpParams,
    scale: np.ndarray,
    temperature: float,
    episode: Episode,
    config: FinetuneConfig,
    state: dcm.DcmState | None,
    epoch: int,
):
    """Score the query set. Statistics and prototypes come from the support set only."""
    head = ClassifierHead(temperature, config.head_mode)
    refit = config.refit_stats or state is None
    _, _, state, _, g_support = _embed(params, episode.support_x, config, scale, state, refit)
    protos, _, _ = _support_prototypes(g_support, episode.support_y, episode.num_ways, head, config, epoch)
    q_feats, _ = forward(params, episode.query_x)
    if config.flags.feature_norm:
        q = dcm.calibrate(q_feats, state)
    else:
        q = q_feats
    z = logits(q, protos, head)
    ce = cross_entropy(probabilities(z), episode.query_y)
    pred = np.argmax(z, axis=1)
    acc = float(np.mean(pred == episode.query_y)) if pred.size else float("nan")
    return ce.loss, acc, z, pred, protos, state


def _bias_norm(params, scale, state, config, protos, reference) -> float:
    ref_x, ref_y = reference
    feats, _ = forward(params, ref_x)
    g = dcm.calibrate(feats, state) if config.flags.feature_norm else feats
    means = compute_prototypes(g, ref_y, protos.num_ways).weights
    return float(np.mean(np.linalg.norm(protos.weights - means, axis=1)))


def finetune_episode(
    episode: Episode,
    backbone: MlpParams,
    config: FinetuneConfig,
    reference: tuple[np.ndarray, np.ndarray] | None = None,
) -> FinetuneResult:
    """Finetune on one episode's support set and score its query set.

    Each epoch is a single full-batch step. ``reference`` is an optional large
    labeled sample per episode class, used only to report prototype bias.
    The input ``backbone`` is never modified.
    """
    config.validate()
    if backbone.in_dim != episode.support_x.shape[1]:
        raise ShapeError(
            f"backbone expects {backbone.in_dim}-d inputs, episode has {episode.support_x.shape[1]}"
        )
    flags = config.flags
    params = backbone.copy() if flags.backbone else backbone
    scale = np.ones(backbone.out_dim)
    tau = np.array([config.temperature])
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    enabled = set()
    if flags.backbone:
        enabled.add("backbone")
    if flags.scale and flags.feature_norm:
        enabled.add("scale")
    if not config.freeze_temperature:
        enabled.add("temperature")

    traces: list[EpochTrace] = []
    state = None
    for epoch in range(config.epochs):
        step = support_step(
            params, scale, float(tau[0]), episode.support_x, episode.support_y,
            episode.num_ways, config, state, epoch,
        )
        state = step.state
        trace = EpochTrace(epoch + 1, step.loss, step.accuracy)
        if step.chain_lengths is not None:
            trace.mean_chain_length = float(step.chain_lengths.mean())
        if reference is not None:
            trace.bias_norm = _bias_norm(params, scale, state, config, step.prototypes, reference)
        if config.track_query and episode.n_query:
            trace.query_loss, trace.query_acc, *_ = evaluate_query(
                params, scale, float(tau[0]), episode, config, state, epoch
            )
        traces.append(trace)
        if not np.isfinite(step.loss):
            raise FinetuneAborted("support loss became non-finite", epoch + 1, traces)
        groups = {"temperature": [tau], "scale": [scale]}
        if flags.backbone:
            groups["backbone"] = params.arrays()
        try:
            opt.step(groups, step.grads, enabled)
        except NumericError as exc:
            raise FinetuneAborted(str(exc), epoch + 1, traces) from exc
        if flags.backbone:
            params.bump()
        tau[0] = max(tau[0], TEMPERATURE_FLOOR)

    q_loss, q_acc, q_logits, q_pred, protos, state = evaluate_query(
        params, scale, float(tau[0]), episode, config, state, config.epochs
    )
    return FinetuneResult(
        params=params,
        scale=scale,
        temperature=float(tau[0]),
        traces=traces,
        query_accuracy=q_acc,
        query_loss=q_loss,
        query_logits=q_logits,
        query_predictions=q_pred,
        prototypes=protos,
        state=state,
    )


def with_flags(config: FinetuneConfig, row: str | AblationFlags) -> FinetuneConfig:
    flags = AblationFlags.parse(row) if isinstance(row, str) else row
    return replace(config, flags=flags)
