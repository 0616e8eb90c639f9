"""Selected sampling: greedy random-walk chains that only keep steps which raise p(y|f).

Every support feature seeds one chain. A chain proposes ``f + sigma * z``,
keeps the proposal if the true-class probability strictly increases, and
stops at the first rejection (or at ``max_chain_len`` proposals). Accepted
points are added to the support set when re-estimating prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierHead, Prototypes, as_weights, logits, probabilities
from .errors import ConfigurationError


@dataclass(frozen=True)
class ProposalConfig:
    sigma_walk: float = 0.1
    max_chain_len: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_walk > 0:
            raise ConfigurationError(f"sigma_walk must be positive, got {self.sigma_walk}")
        if self.max_chain_len < 1:
            raise ConfigurationError("max_chain_len must be >= 1")


@dataclass
class ChainResult:
    origin: int
    accepted: np.ndarray  # (n, d)
    probabilities: np.ndarray  # p(y|f) at origin then at every accepted point, length n + 1
    rejected_count: int

    @property
    def length(self) -> int:
        return self.accepted.shape[0]

    @property
    def terminal_probability(self) -> float:
        return float(self.probabilities[-1])


@dataclass
class Augmentation:
    features: np.ndarray  # originals first, then accepted samples in origin order
    labels: np.ndarray
    counts: np.ndarray  # accepted samples per class
    chains: list[ChainResult] = field(default_factory=list)

    @property
    def chain_lengths(self) -> np.ndarray:
        return np.array([c.length for c in self.chains], dtype=np.int64)


def chain_rng(config: ProposalConfig, epoch: int, origin: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, origin) so chains can run in any order."""
    return np.random.default_rng([config.seed, epoch, origin])


def class_probability(features: np.ndarray, label, prototypes, head: ClassifierHead) -> np.ndarray | float:
    f = np.asarray(features, dtype=np.float64)
    p = probabilities(logits(f, prototypes, head))
    if f.ndim == 1:
        return float(p[0, label])
    return p[np.arange(f.shape[0]), label]


def propose(current: np.ndarray, config: ProposalConfig, rng: np.random.Generator) -> np.ndarray:
    return current + config.sigma_walk * rng.standard_normal(current.shape[-1])


def accept(candidate: np.ndarray, current: np.ndarray, label: int, prototypes, head: ClassifierHead) -> bool:
    p = class_probability(np.stack([candidate, current]), np.array([label, label]), prototypes, head)
    return bool(p[0] > p[1])


def run_chain(
    origin: np.ndarray,
    label: int,
    prototypes: Prototypes,
    head: ClassifierHead,
    config: ProposalConfig,
    rng: np.random.Generator | None = None,
    origin_index: int = 0,
    epoch: int = 0,
) -> ChainResult:
    if rng is None:
        rng = chain_rng(config, epoch, origin_index)
    current = np.asarray(origin, dtype=np.float64)
    p_cur = class_probability(current, label, prototypes, head)
    accepted, probs = [], [p_cur]
    rejected = 0
    for _ in range(config.max_chain_len):
        candidate = propose(current, config, rng)
        p_new = class_probability(candidate, label, prototypes, head)
        if not p_new > p_cur:
            rejected = 1
            break
        accepted.append(candidate)
        probs.append(p_new)
        current, p_cur = candidate, p_new
    d = current.shape[0]
    return ChainResult(
        origin_index,
        np.array(accepted).reshape(len(accepted), d),
        np.array(probs),
        rejected,
    )


def augment_support(
    features: np.ndarray,
    labels: np.ndarray,
    prototypes: Prototypes,
    head: ClassifierHead,
    config: ProposalConfig,
    epoch: int = 0,
) -> Augmentation:
    """Run one chain per support feature, all under the same fixed prototypes.

    The chains advance in lockstep so probabilities are evaluated in batches;
    each chain still draws from its own stream, so the result is identical to
    calling ``run_chain`` per origin.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = f.shape
    rngs = [chain_rng(config, epoch, i) for i in range(n)]
    current = f.copy()
    p_cur = class_probability(current, labels, prototypes, head)
    history = [[p_cur[i]] for i in range(n)]
    accepted = [[] for _ in range(n)]
    rejected = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for _ in range(config.max_chain_len):
        if active.size == 0:
            break
        steps = np.stack([rngs[i].standard_normal(d) for i in active])
        cand = current[active] + config.sigma_walk * steps
        p_new = class_probability(cand, labels[active], prototypes, head)
        ok = p_new > p_cur[active]
        for j, i in enumerate(active):
            if ok[j]:
                accepted[i].append(cand[j])
                history[i].append(p_new[j])
            else:
                rejected[i] = 1
        keep = active[ok]
        current[keep] = cand[ok]
        p_cur[keep] = p_new[ok]
        active = keep

    chains = [
        ChainResult(i, np.array(accepted[i]).reshape(len(accepted[i]), d), np.array(history[i]), int(rejected[i]))
        for i in range(n)
    ]
    extra = [c.accepted for c in chains]
    extra_labels = [np.full(c.length, labels[c.origin]) for c in chains]
    num_ways = as_weights(prototypes).shape[0]
    counts = np.bincount(np.concatenate(extra_labels).astype(np.int64), minlength=num_ways) if n else np.zeros(num_ways, np.int64)
    return Augmentation(
        np.concatenate([f] + extra, axis=0),
        np.concatenate([labels] + extra_labels).astype(np.int64),
        counts,
        chains,
    )
