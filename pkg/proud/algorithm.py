# proud/algorithm.py
"""
Prototype-based pseudo-labeling with uncertainty-adaptive domain mixing.

Per epoch and per unlabeled domain: soft prototypes from the classifier's
probabilities, a nearest-prototype labeling, one hard refinement and a final
ensemble relabeling (DaPP).  Each pseudo-label carries an entropy uncertainty
that sets how much of the unlabeled sample survives when it is mixed with a
same-class labeled sample (UDMix).  Features are pulled towards cross-domain
class anchors by the prototype merging loss (PML).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr

from proud.autodiff import (
    NORM_FLOOR,
    SGD,
    Tensor,
    add,
    backward,
    cross_entropy,
    l2_normalize,
    no_grad,
    one_hot,
    pairwise_cosine_distance,
    scale,
    stable_softmax,
)
from proud.datagen import DEFAULT_NOISE_SIGMA, METRICS, DomainDataset, GroundTruthLedger, augment_batch
from proud.errors import (
    ConfigError,
    DegenerateVectorError,
    InvalidArgumentError,
    InvariantViolation,
    ShapeError,
)
from proud.model import Model, classify, forward_features, forward_logits, mixup_ce_loss
from proud.schemas import EpochRecord, ProudHyper

logger = logging.getLogger(__name__)

POOLED_DOMAIN = 1  # bank slot of the pooled prototypes in the domain-agnostic variant


# ------------------------------------------------------------------ #
#  TYPES
# ------------------------------------------------------------------ #
@dataclass
class PrototypeBank:
    """C_{t,k} per stored domain t plus the anchors C̄_k = mean over t."""

    prototypes: Dict[int, np.ndarray]
    anchors: np.ndarray
    epoch: int = 0

    @classmethod
    def build(cls, prototypes: Dict[int, np.ndarray], epoch: int = 0) -> "PrototypeBank":
        if not prototypes:
            raise InvalidArgumentError("a prototype bank needs at least one domain")
        stored = {t: np.array(p, dtype=np.float64) for t, p in sorted(prototypes.items())}
        return cls(stored, _mean_over_domains(stored), epoch)

    @property
    def num_classes(self) -> int:
        return self.anchors.shape[0]

    def check_anchors(self) -> None:
        if not np.array_equal(self.anchors, _mean_over_domains(self.prototypes)):
            raise InvariantViolation(f"epoch {self.epoch}: anchors drifted from the stored prototype mean")

    def spread(self) -> float:
        """Mean cosine distance of every stored C_{t,k} to its anchor."""
        anchors = _unit_rows(self.anchors)
        gaps = [1.0 - np.sum(_unit_rows(p) * anchors, axis=1) for p in self.prototypes.values()]
        return float(np.mean(gaps))


def _mean_over_domains(prototypes: Dict[int, np.ndarray]) -> np.ndarray:
    return np.stack([prototypes[t] for t in sorted(prototypes)]).mean(axis=0)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_FLOOR)


@dataclass(frozen=True)
class PseudoLabeledSample:
    x: np.ndarray
    pseudo_label: int
    uncertainty: float
    lambda_eps: float
    domain: int


@dataclass
class PseudoLabeledDataset:
    """D̃_t: one unlabeled domain with pseudo-labels, uncertainties and λ_ε."""

    domain_id: int
    source_index: int
    inputs: np.ndarray
    pseudo_labels: np.ndarray
    uncertainty: np.ndarray
    lambda_eps: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> PseudoLabeledSample:
        return PseudoLabeledSample(
            x=self.inputs[i],
            pseudo_label=int(self.pseudo_labels[i]),
            uncertainty=float(self.uncertainty[i]),
            lambda_eps=float(self.lambda_eps[i]),
            domain=self.domain_id,
        )

    def slice(self, start: int, stop: int, domain_id: int, source_index: int) -> "PseudoLabeledDataset":
        part = slice(start, stop)
        return PseudoLabeledDataset(
            domain_id,
            source_index,
            self.inputs[part],
            self.pseudo_labels[part],
            self.uncertainty[part],
            self.lambda_eps[part],
        )


@dataclass
class EpochStats:
    mean_lambda: Dict[int, float]
    pl_acc: Dict[int, float]
    loss_ce: float
    loss_pml: float
    steps: int


@dataclass
class ProudResult:
    model: Model
    history: List[EpochRecord] = field(default_factory=list)
    bank: Optional[PrototypeBank] = None
    pseudo: List[PseudoLabeledDataset] = field(default_factory=list)


# ------------------------------------------------------------------ #
#  DaPP
# ------------------------------------------------------------------ #
def normalized_features(m: Model, inputs: np.ndarray) -> np.ndarray:
    """ḡ(x) for a batch, without building a graph."""
    with no_grad():
        return l2_normalize(forward_features(m, inputs), axis=1).data


def prototype_distances(prototypes: np.ndarray, m: Model, inputs: np.ndarray) -> np.ndarray:
    """n x K cosine distances from ḡ(x) to each prototype."""
    with no_grad():
        return pairwise_cosine_distance(forward_features(m, inputs), Tensor(prototypes)).data


def live_features(m: Model, ds: DomainDataset) -> Tensor:
    """g(x) for a domain; raises if any sample maps to the zero vector (untrained model)."""
    features = forward_features(m, ds.inputs)
    dead = np.flatnonzero(np.linalg.norm(features.data, axis=1) < NORM_FLOOR)
    if dead.size:
        raise DegenerateVectorError(
            f"domain {ds.domain_id}: {dead.size} sample(s) map to an all-zero feature vector "
            f"(first {dead[:5].tolist()}); pseudo-labeling needs a pretrained model"
        )
    return features


def compute_soft_prototypes(m: Model, ds: DomainDataset) -> np.ndarray:
    """Softmax-probability-weighted means of the normalized features (K x d)."""
    if ds.n == 0:
        raise InvalidArgumentError(f"domain {ds.domain_id} is empty")
    with no_grad():
        features = live_features(m, ds)
        probs = stable_softmax(classify(m, features).data, axis=1)
        normed = l2_normalize(features, axis=1).data
    return (probs.T @ normed) / probs.sum(axis=0)[:, None]


def _ensemble_distances(
    prototypes: np.ndarray,
    m: Model,
    inputs: np.ndarray,
    ensemble_size: int,
    augment_strength: float,
    rng: Optional[np.random.Generator],
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> Tuple[np.ndarray, np.ndarray]:
    """(mean distance over the views, clean-view distance); view 0 is the clean input."""
    if ensemble_size < 1:
        raise InvalidArgumentError(f"ensemble_size must be >= 1, got {ensemble_size}")
    clean = prototype_distances(prototypes, m, inputs)
    if ensemble_size == 1:
        return clean, clean
    rng = np.random.default_rng(0) if rng is None else rng
    total = clean.copy()
    for _ in range(ensemble_size - 1):
        total += prototype_distances(prototypes, m, augment_batch(inputs, augment_strength, rng, noise_sigma))
    return total / ensemble_size, clean


def assign_pseudo_labels(
    prototypes: np.ndarray,
    m: Model,
    ds: DomainDataset,
    ensemble_size: int = 1,
    augment_strength: float = 0.5,
    rng: Optional[np.random.Generator] = None,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> np.ndarray:
    """Nearest prototype by view-averaged cosine distance; ties go to the lowest class."""
    mean_dist, _ = _ensemble_distances(
        prototypes, m, ds.inputs, ensemble_size, augment_strength, rng, noise_sigma
    )
    return np.argmin(mean_dist, axis=1)


def _hard_means(
    normed: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    fallback: Optional[np.ndarray],
) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidArgumentError(f"labels must lie in [0, {num_classes})")
    sums = np.zeros((num_classes, normed.shape[1]))
    np.add.at(sums, labels, normed)
    counts = np.bincount(labels, minlength=num_classes)
    empty = counts == 0
    if empty.any() and fallback is None:
        raise InvariantViolation(f"classes {np.flatnonzero(empty).tolist()} have no samples")
    out = sums / np.maximum(counts, 1)[:, None]
    if empty.any():
        out[empty] = fallback[empty]
    return out


def refine_prototypes(
    m: Model,
    ds: DomainDataset,
    labels: np.ndarray,
    fallback: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Hard per-class means; a class nobody was assigned to keeps its soft prototype."""
    if fallback is None:
        fallback = compute_soft_prototypes(m, ds)
    return _hard_means(normalized_features(m, ds.inputs), labels, m.num_classes, fallback)


def labeled_prototypes(m: Model, ds: DomainDataset) -> np.ndarray:
    """Hard means of ḡ over the true labels of the labeled domain."""
    return _hard_means(normalized_features(m, ds.inputs), ds.labels, m.num_classes, None)


def dapp(
    m: Model,
    ds: DomainDataset,
    hyper: ProudHyper,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, PseudoLabeledDataset]:
    """Soft prototypes, label, refine once, relabel with the augmentation ensemble."""
    rng = np.random.default_rng(0) if rng is None else rng
    soft = compute_soft_prototypes(m, ds)
    first = assign_pseudo_labels(soft, m, ds)
    refined = refine_prototypes(m, ds, first, fallback=soft)

    mean_dist, clean = _ensemble_distances(
        refined,
        m,
        ds.inputs,
        hyper.ensemble_size,
        hyper.augment_strength,
        rng,
        hyper.augment_noise_sigma or DEFAULT_NOISE_SIGMA,
    )
    eps = uncertainty_from_distances(clean, hyper.tau_eps)
    pseudo = PseudoLabeledDataset(
        domain_id=ds.domain_id,
        source_index=ds.source_index,
        inputs=ds.inputs,
        pseudo_labels=np.argmin(mean_dist, axis=1),
        uncertainty=eps,
        lambda_eps=lambda_from_uncertainty(eps, hyper.tau_lambda),
    )
    return refined, pseudo


# ------------------------------------------------------------------ #
#  UNCERTAINTY & MIXING RATIO
# ------------------------------------------------------------------ #
def uncertainty_from_distances(distances: np.ndarray, tau_eps: float) -> np.ndarray:
    """Entropy of softmax(-dist / tau_eps) along the class axis, clipped to [0, ln K]."""
    distances = np.asarray(distances, dtype=np.float64)
    probs = stable_softmax(-distances, temperature=tau_eps, axis=-1)
    return np.clip(entr(probs).sum(axis=-1), 0.0, math.log(distances.shape[-1]))


def estimate_uncertainty(prototypes: np.ndarray, m: Model, x: np.ndarray, tau_eps: float) -> np.ndarray:
    """ε for one input vector (returns a 0-d array) or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    eps = uncertainty_from_distances(prototype_distances(prototypes, m, np.atleast_2d(x)), tau_eps)
    return eps[0] if single else eps


def lambda_from_uncertainty(eps, tau_lambda: float) -> np.ndarray:
    """λ_ε = exp(-ε/τ_λ) / (1 + exp(-ε/τ_λ)); at most 0.5 for ε >= 0."""
    if not tau_lambda > 0:
        raise InvalidArgumentError(f"tau_lambda must be positive, got {tau_lambda}")
    e = np.exp(-np.asarray(eps, dtype=np.float64) / tau_lambda)
    return e / (1.0 + e)


def mixing_ratio(eps, hyper: ProudHyper, rng: np.random.Generator) -> np.ndarray:
    """
    Per-sample λ.  ``uncertainty``: a uniform draw when λ_ε > λ*, else λ_ε.
    ``uniform`` always draws; ``fixed`` returns ``hyper.fixed_lambda``.
    The uniforms are drawn under every policy so rng streams stay aligned.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps < 0):
        raise InvalidArgumentError("uncertainty must be non-negative")
    uniform = rng.uniform(0.0, 1.0, size=eps.shape)
    if hyper.mixing == "uniform":
        return uniform
    if hyper.mixing == "fixed":
        return np.full(eps.shape, hyper.fixed_lambda)
    lam_eps = lambda_from_uncertainty(eps, hyper.tau_lambda)
    return np.where(lam_eps > hyper.lambda_star, uniform, lam_eps)


# ------------------------------------------------------------------ #
#  SampleMatch / UDMix
# ------------------------------------------------------------------ #
def sample_match(
    pseudo_labels: np.ndarray,
    labeled: DomainDataset,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """For every pseudo-label draw a labeled sample of that class uniformly; returns (x_l, y_l)."""
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.intp)
    chosen = np.empty(pseudo_labels.shape[0], dtype=np.intp)
    for k in np.unique(pseudo_labels):
        members = np.flatnonzero(labeled.labels == k)
        if members.size == 0:
            raise ConfigError(f"labeled domain has no sample of class {k}")
        slots = np.flatnonzero(pseudo_labels == k)
        chosen[slots] = members[rng.integers(0, members.size, size=slots.size)]
    return labeled.inputs[chosen], labeled.labels[chosen]


def udmix(
    x_l: np.ndarray,
    y_l: np.ndarray,
    x_u: np.ndarray,
    y_u: np.ndarray,
    lam: np.ndarray,
    num_classes: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """x^m = λ x^u + (1 - λ) x^l per pair; the target is the shared class, one-hot."""
    x_l, x_u = np.asarray(x_l, dtype=np.float64), np.asarray(x_u, dtype=np.float64)
    if x_l.shape != x_u.shape:
        raise ShapeError(f"udmix: paired batches differ in shape {x_l.shape} vs {x_u.shape}")
    if np.any(np.asarray(y_l) != np.asarray(y_u)):
        raise InvariantViolation("udmix: a pair mixes two different classes")
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (x_u.shape[0],))[:, None]
    return lam * x_u + (1.0 - lam) * x_l, one_hot(y_u, num_classes)


# ------------------------------------------------------------------ #
#  PML
# ------------------------------------------------------------------ #
def pml_loss(
    m: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    bank: Union[PrototypeBank, np.ndarray],
    reduction: str = "sum",
) -> Tensor:
    """Cross-entropy over negated cosine distances to the (constant) class anchors."""
    anchors = bank.anchors if isinstance(bank, PrototypeBank) else np.asarray(bank, dtype=np.float64)
    distances = pairwise_cosine_distance(forward_features(m, inputs), Tensor(anchors))
    return cross_entropy(scale(distances, -1.0), one_hot(labels, anchors.shape[0]), reduction=reduction)


# ------------------------------------------------------------------ #
#  TRAINING
# ------------------------------------------------------------------ #
def build_bank(
    m: Model,
    labeled: DomainDataset,
    unlabeled: Sequence[DomainDataset],
    hyper: ProudHyper,
    rng: np.random.Generator,
    epoch: int = 0,
) -> Tuple[PrototypeBank, List[PseudoLabeledDataset]]:
    """Run DaPP on every unlabeled domain (or on their union) and assemble the bank."""
    prototypes: Dict[int, np.ndarray] = {}
    if hyper.anchors_include_labeled:
        prototypes[labeled.domain_id] = labeled_prototypes(m, labeled)

    pseudo: List[PseudoLabeledDataset] = []
    if hyper.domain_aware:
        for ds in unlabeled:
            prototypes[ds.domain_id], d_tilde = dapp(m, ds, hyper, rng)
            pseudo.append(d_tilde)
    else:
        pooled = DomainDataset(
            domain_id=POOLED_DOMAIN,
            inputs=np.concatenate([ds.inputs for ds in unlabeled]),
            source_index=-1,
            role="unlabeled",
        )
        prototypes[POOLED_DOMAIN], merged = dapp(m, pooled, hyper, rng)
        start = 0
        for ds in unlabeled:
            pseudo.append(merged.slice(start, start + ds.n, ds.domain_id, ds.source_index))
            start += ds.n

    bank = PrototypeBank.build(prototypes, epoch)
    bank.check_anchors()
    return bank, pseudo


def train_epoch(
    m: Model,
    labeled: DomainDataset,
    pseudo: Sequence[PseudoLabeledDataset],
    bank: PrototypeBank,
    hyper: ProudHyper,
    rng: np.random.Generator,
    optimizer: Optional[SGD] = None,
    ledger: Optional[GroundTruthLedger] = None,
) -> EpochStats:
    """One pass over the union of the pseudo-labeled domains in shuffled mini-batches."""
    optimizer = optimizer or SGD(m.parameters(), hyper.lr, hyper.momentum, hyper.weight_decay)
    K = m.num_classes
    inputs = np.concatenate([d.inputs for d in pseudo])
    labels = np.concatenate([d.pseudo_labels for d in pseudo])
    eps = np.concatenate([d.uncertainty for d in pseudo])
    owner = np.concatenate([np.full(len(d), i) for i, d in enumerate(pseudo)])

    lam_sum = np.zeros(len(pseudo))
    order = rng.permutation(inputs.shape[0])
    ce_losses, pml_losses = [], []
    for start in range(0, order.size, hyper.batch_size):
        idx = order[start:start + hyper.batch_size]
        x_u, y_u = inputs[idx], labels[idx]
        x_l, y_l = sample_match(y_u, labeled, rng)
        lam = mixing_ratio(eps[idx], hyper, rng)
        x_m, t_m = udmix(x_l, y_l, x_u, y_u, lam, K)
        np.add.at(lam_sum, owner[idx], lam)

        if idx.size >= 2:
            loss_ce = mixup_ce_loss(m, x_m, t_m, hyper.mixup_alpha, rng, hyper.soft_mixup_targets)
        else:
            loss_ce = cross_entropy(forward_logits(m, x_m), t_m)
        loss = loss_ce
        if hyper.alpha > 0:
            loss_pml = pml_loss(
                m,
                np.concatenate([x_l, x_u]),
                np.concatenate([y_l, y_u]),
                bank,
                reduction=hyper.pml_reduction,
            )
            loss = add(loss_ce, scale(loss_pml, hyper.alpha))
            pml_losses.append(loss_pml.item())

        optimizer.step(backward(loss))
        ce_losses.append(loss_ce.item())
        logger.debug("batch %d loss_ce=%.4f", start // hyper.batch_size, ce_losses[-1])

    counts = np.array([len(d) for d in pseudo])
    mean_lambda = {d.domain_id: float(lam_sum[i] / max(counts[i], 1)) for i, d in enumerate(pseudo)}
    pl_acc: Dict[int, float] = {}
    if ledger is not None:
        pl_acc = {d.domain_id: ledger.accuracy(d.source_index, d.pseudo_labels, METRICS) for d in pseudo}
    return EpochStats(
        mean_lambda=mean_lambda,
        pl_acc=pl_acc,
        loss_ce=float(np.mean(ce_losses)) if ce_losses else 0.0,
        loss_pml=float(np.mean(pml_losses)) if pml_losses else 0.0,
        steps=len(ce_losses),
    )


def proud_train(
    m: Model,
    labeled: DomainDataset,
    unlabeled: Sequence[DomainDataset],
    evaluate: Callable[[Model], float],
    hyper: ProudHyper,
    seed: int,
    ledger: Optional[GroundTruthLedger] = None,
) -> ProudResult:
    """
    Epoch loop: rebuild prototypes, pseudo-labels and uncertainties, then train.

    ``evaluate`` is the only path to the test domain; it runs after every epoch.
    """
    if hyper.epochs == 0:
        return ProudResult(model=m)
    if not unlabeled:
        raise ConfigError("ProUD training needs at least one unlabeled domain")

    rng = np.random.default_rng(seed)
    optimizer = SGD(m.parameters(), hyper.lr, hyper.momentum, hyper.weight_decay)
    result = ProudResult(model=m)
    for epoch in range(1, hyper.epochs + 1):
        bank, pseudo = build_bank(m, labeled, unlabeled, hyper, rng, epoch)
        stats = train_epoch(m, labeled, pseudo, bank, hyper, rng, optimizer, ledger)
        test_acc = evaluate(m)
        result.history.append(
            EpochRecord(
                epoch=epoch,
                test_acc=test_acc,
                pl_acc=stats.pl_acc,
                mean_lambda=stats.mean_lambda,
                loss_ce=stats.loss_ce,
                loss_pml=stats.loss_pml,
                prototype_spread=bank.spread(),
            )
        )
        result.bank, result.pseudo = bank, pseudo
        logger.info(
            "epoch %d/%d test_acc=%.4f loss_ce=%.4f loss_pml=%.4f",
            epoch, hyper.epochs, test_acc, stats.loss_ce, stats.loss_pml,
        )
    return result
