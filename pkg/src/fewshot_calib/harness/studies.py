"""Focused experiments that look inside an episode rather than only at accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import dcm
from ..backbone import forward
from ..classifier import ClassifierHead, compute_prototypes
from ..episodes import SyntheticDomainSpec, generate_novel_dataset, sample_episode
from ..finetune import FinetuneResult, finetune_episode
from ..sampling import ProposalConfig, augment_support
from .aggregate import Aggregate, paired
from .config import RunConfig
from .suite import Workspace, episode_seed


@dataclass
class BiasStudy:
    before: np.ndarray  # mean prototype error per seed, support mean only
    after: np.ndarray  # same after adding the sampled points
    chain_lengths: np.ndarray  # mean chain length per seed

    @property
    def difference(self) -> Aggregate:
        return paired(self.before.tolist(), self.after.tolist())

    @property
    def fraction_improved(self) -> float:
        return float(np.mean(self.after < self.before))


def prototype_error(weights: np.ndarray, true_means: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(weights - true_means, axis=1)))


def strayed_bias_study(
    seeds: int = 500,
    dim: int = 8,
    ways: int = 5,
    shots: int = 5,
    contamination: float = 0.2,
    spread: float = 0.5,
    sigma_walk: float = 0.1,
    max_chain_len: int = 20,
    temperature: float = 10.0,
    space: str = "calibrated",
    base_seed: int = 0,
) -> BiasStudy:
    """Prototype error against the true class means, before and after selected sampling.

    Each seed draws a fresh ``ways``-class support set of ``shots`` points per
    class. In ``calibrated`` space the support is standardized first and the
    true means are mapped through the same affine transform.
    """
    if space not in ("raw", "calibrated"):
        raise ValueError(f"space must be 'raw' or 'calibrated', got {space!r}")
    head = ClassifierHead(temperature)
    spec = SyntheticDomainSpec(dim, 0, ways, spread, contamination_rate=contamination)
    before, after, lengths = [], [], []
    for s in range(seeds):
        seed = episode_seed(base_seed, s)
        ds = generate_novel_dataset(spec, shots, seed)
        f, y, m = ds.inputs, ds.labels, ds.true_means
        if space == "calibrated":
            state = dcm.fit(f)
            f, m = dcm.calibrate(f, state), dcm.calibrate(m, state)
        protos = compute_prototypes(f, y, ways)
        aug = augment_support(f, y, protos, head, ProposalConfig(sigma_walk, max_chain_len, seed))
        new = compute_prototypes(aug.features, aug.labels, ways, augmented=True)
        before.append(prototype_error(protos.weights, m))
        after.append(prototype_error(new.weights, m))
        lengths.append(float(aug.chain_lengths.mean()))
    return BiasStudy(np.array(before), np.array(after), np.array(lengths))


def final_features(result: FinetuneResult, x: np.ndarray) -> np.ndarray:
    """Features of ``x`` in the space the finetuned classifier scores them in."""
    feats, _ = forward(result.params, x)
    return dcm.calibrate(feats, result.state) if result.state is not None else feats


def within_class_variance(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes of the trace of the per-class covariance (population form)."""
    out = []
    for c in np.unique(labels):
        fc = features[labels == c]
        out.append(float(np.sum(np.var(fc, axis=0))))
    return float(np.mean(out))


@dataclass
class FeatureStudy:
    accuracy: dict[str, np.ndarray] = field(default_factory=dict)
    variance: dict[str, np.ndarray] = field(default_factory=dict)

    def gain(self, before: str, after: str) -> Aggregate:
        return paired(self.accuracy[before].tolist(), self.accuracy[after].tolist())

    def fraction_lower_variance(self, before: str, after: str) -> float:
        return float(np.mean(self.variance[after] < self.variance[before]))


def feature_study(ws: Workspace, cfg: RunConfig, rows=("B", "B+FN+S", "B+FN+S+SS")) -> FeatureStudy:
    """Per-episode query accuracy and within-class query-feature variance for each row."""
    acc = {r: [] for r in rows}
    var = {r: [] for r in rows}
    for i in range(cfg.episodes):
        seed = episode_seed(cfg.seed, i)
        ep = sample_episode(ws.novel, cfg.ways, cfg.shot_range(), cfg.queries, seed)
        for r in rows:
            res = finetune_episode(ep, ws.backbone, cfg.finetune_config(r, seed))
            acc[r].append(res.query_accuracy)
            var[r].append(within_class_variance(final_features(res, ep.query_x), ep.query_y))
    return FeatureStudy({r: np.array(v) for r, v in acc.items()}, {r: np.array(v) for r, v in var.items()})
