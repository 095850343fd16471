# proud/datagen.py
"""
Synthetic multi-domain classification suites.

Class means sit at equal angles on a circle in the first two input coordinates;
each domain rotates and translates that plane and carries a domain-indicative
nuisance coordinate in the last position, which gives a controllable analogue
of style shift between domains.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from proud.errors import ConfigError, InvalidArgumentError, IsolationError, StratificationError
from proud.schemas import GeneratorConfig

logger = logging.getLogger(__name__)

ROLES = ("labeled", "unlabeled", "test")
MAX_AUGMENT_DEGREES = 5.0
DEFAULT_NOISE_SIGMA: float = GeneratorConfig.model_fields["noise_sigma"].default


# ------------------------------------------------------------------ #
#  DATASETS
# ------------------------------------------------------------------ #
@dataclass
class DomainDataset:
    """
    Samples of one domain.

    ``domain_id`` is the role position inside an arrangement (0 labeled,
    1..T unlabeled, T+1 test); ``source_index`` is the generator domain the
    samples came from.
    """

    domain_id: int
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    source_index: int = 0
    role: str = "labeled"

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise InvalidArgumentError(
                    f"domain {self.domain_id}: {self.labels.shape[0]} labels for {self.inputs.shape[0]} samples"
                )

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index: np.ndarray) -> "DomainDataset":
        labels = None if self.labels is None else self.labels[index]
        return replace(self, inputs=self.inputs[index], labels=labels)

    def class_counts(self, num_classes: int) -> np.ndarray:
        if self.labels is None:
            raise IsolationError(f"domain {self.domain_id} carries no labels")
        return np.bincount(self.labels, minlength=num_classes)

    def require_all_classes(self, num_classes: int) -> None:
        missing = np.flatnonzero(self.class_counts(num_classes) == 0)
        if missing.size:
            raise ConfigError(
                f"domain {self.source_index} is missing classes {missing.tolist()}"
            )


class MetricsCapability:
    """Token handed only to metric code; training code never holds one."""


METRICS = MetricsCapability()


class GroundTruthLedger:
    """Hidden true labels of the unlabeled and test domains, keyed by source index."""

    def __init__(self, labels: Dict[int, np.ndarray]):
        self._labels = {k: np.asarray(v, dtype=np.int64).copy() for k, v in labels.items()}
        self.reads: List[int] = []

    def labels(self, source_index: int, capability: MetricsCapability) -> np.ndarray:
        if not isinstance(capability, MetricsCapability):
            raise IsolationError("hidden labels are readable only by the metrics path")
        self.reads.append(source_index)
        return self._labels[source_index].copy()

    def accuracy(self, source_index: int, predicted: np.ndarray, capability: MetricsCapability) -> float:
        truth = self.labels(source_index, capability)
        return float(np.mean(np.asarray(predicted) == truth))


@dataclass
class Arrangement:
    """One (labeled, test) combination: roles assigned, hidden labels moved to the ledger."""

    labeled: DomainDataset
    unlabeled: List[DomainDataset]
    test: DomainDataset
    ledger: GroundTruthLedger


@dataclass
class DatasetSuite:
    domains: List[DomainDataset]
    num_classes: int
    input_dim: int
    gen_config: Optional[GeneratorConfig] = None
    ground_truth: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def arrange(self, labeled: int, test: int) -> Arrangement:
        """Assign roles for one combination; the remaining domains become unlabeled sources."""
        n = self.n_domains
        if not (0 <= labeled < n and 0 <= test < n):
            raise ConfigError(f"combination ({labeled}, {test}) out of range for {n} domains")
        if labeled == test:
            raise ConfigError("labeled and test domain must differ: training and test domains are disjoint")
        if n < 3:
            raise ConfigError(f"need at least 3 domains for a combination, suite has {n}")

        by_source = {d.source_index: d for d in self.domains}
        sources = [labeled] + [i for i in range(n) if i not in (labeled, test)] + [test]
        roles = ["labeled"] + ["unlabeled"] * (n - 2) + ["test"]
        arranged = []
        for position, (source, role) in enumerate(zip(sources, roles)):
            labels = self.ground_truth[source] if role == "labeled" else None
            arranged.append(
                DomainDataset(
                    domain_id=position,
                    inputs=by_source[source].inputs,
                    labels=labels,
                    source_index=source,
                    role=role,
                )
            )
        arranged[0].require_all_classes(self.num_classes)
        hidden = {s: self.ground_truth[s] for s in sources[1:]}
        return Arrangement(arranged[0], arranged[1:-1], arranged[-1], GroundTruthLedger(hidden))


# ------------------------------------------------------------------ #
#  GENERATION
# ------------------------------------------------------------------ #
def _rotation(degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def class_means(cfg: GeneratorConfig) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(cfg.num_classes) / cfg.num_classes
    means = np.zeros((cfg.num_classes, cfg.input_dim))
    means[:, 0] = cfg.class_separation * np.cos(angles)
    means[:, 1] = cfg.class_separation * np.sin(angles)
    return means


def make_domain_suite(cfg: GeneratorConfig, seed: Optional[int] = None) -> DatasetSuite:
    """Deterministic given (cfg, seed); ``seed`` defaults to ``cfg.seed``."""
    K, p = cfg.num_classes, cfg.input_dim
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    if cfg.n_per_domain < 4 * K:
        raise ConfigError(f"n_per_domain must be at least 4*K = {4 * K}, got {cfg.n_per_domain}")

    seed = cfg.seed if seed is None else seed
    means = class_means(cfg)
    shift_direction = np.array([1.0, 1.0]) / np.sqrt(2.0)

    domains, ground_truth = [], {}
    n_domains = cfg.n_domains
    for t in range(n_domains):
        rng = np.random.default_rng([seed, t])
        counts = [cfg.n_per_domain // K + (k < cfg.n_per_domain % K) for k in range(K)]
        labels = np.repeat(np.arange(K), counts)
        rng.shuffle(labels)

        x = means[labels] + rng.normal(0.0, cfg.noise_sigma, size=(cfg.n_per_domain, p))
        x[:, :2] = x[:, :2] @ _rotation(cfg.domain_rotation_degrees[t]).T
        x[:, :2] += cfg.domain_translation[t] * shift_direction
        x[:, p - 1] = cfg.spurious_strength * (t + 1) + rng.normal(0.0, cfg.noise_sigma, size=cfg.n_per_domain)

        role = "labeled" if t == 0 else "test" if t == n_domains - 1 else "unlabeled"
        domains.append(
            DomainDataset(
                domain_id=t,
                inputs=x,
                labels=labels if role == "labeled" else None,
                source_index=t,
                role=role,
            )
        )
        ground_truth[t] = labels

    logger.debug("generated %d domains of %d samples (K=%d, p=%d)", n_domains, cfg.n_per_domain, K, p)
    return DatasetSuite(domains, K, p, gen_config=cfg, ground_truth=ground_truth)


# ------------------------------------------------------------------ #
#  SPLIT
# ------------------------------------------------------------------ #
def split(
    ds: DomainDataset,
    ratio: Tuple[float, float] = (0.9, 0.1),
    seed: int = 0,
) -> Tuple[DomainDataset, DomainDataset]:
    """Stratified train/validation split; the parts partition ``ds``."""
    train_fraction, val_fraction = ratio
    if train_fraction <= 0 or val_fraction <= 0 or abs(train_fraction + val_fraction - 1.0) > 1e-9:
        raise InvalidArgumentError(f"split fractions must be positive and sum to 1, got {ratio}")
    if ds.labels is None:
        raise StratificationError(f"domain {ds.domain_id} has no labels to stratify on")

    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for k in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == k)
        if members.size < 2:
            raise StratificationError(f"class {k} has {members.size} sample(s); need at least 2 to split")
        members = rng.permutation(members)
        n_train = min(max(int(round(members.size * train_fraction)), 1), members.size - 1)
        train_idx.append(members[:n_train])
        val_idx.append(members[n_train:])

    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return ds.subset(train_idx), ds.subset(val_idx)


# ------------------------------------------------------------------ #
#  AUGMENTATION
# ------------------------------------------------------------------ #
def augment_batch(
    x: np.ndarray,
    strength: float,
    rng: np.random.Generator,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> np.ndarray:
    """
    Per-row in-plane rotation of at most strength*5 degrees plus Gaussian jitter
    of standard deviation strength*noise_sigma (the suite's within-class spread).
    """
    if strength < 0:
        raise InvalidArgumentError(f"augmentation strength must be >= 0, got {strength}")
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()

    limit = np.deg2rad(MAX_AUGMENT_DEGREES * strength)
    theta = rng.uniform(-limit, limit, size=x.shape[0])
    c, s = np.cos(theta), np.sin(theta)
    out = x.copy()
    out[:, 0] = c * x[:, 0] - s * x[:, 1]
    out[:, 1] = s * x[:, 0] + c * x[:, 1]
    return out + rng.normal(0.0, strength * noise_sigma, size=x.shape)


def augment(
    x: Sequence[float],
    strength: float,
    rng: np.random.Generator,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> np.ndarray:
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], strength, rng, noise_sigma)[0]
