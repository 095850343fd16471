# proud/model.py
"""
Feature extractor g (MLP p -> hidden... -> d), classifier h (affine d -> K),
supervised pretraining on the labeled domain and the feature-level mixup
cross-entropy used by the ProUD update.
"""

from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from proud.autodiff import (
    SGD,
    Tensor,
    add,
    backward,
    cross_entropy,
    matmul,
    mul,
    no_grad,
    one_hot,
    relu,
    select_rows,
)
from proud.datagen import DomainDataset
from proud.errors import InvalidArgumentError, ShapeError
from proud.schemas import PretrainConfig, PretrainEpoch

logger = logging.getLogger(__name__)


class Model:
    """f = h o g with named parameters ``g.<i>.weight/bias`` and ``h.weight/bias``."""

    def __init__(self, dims: Sequence[int], num_classes: int, seed: int, params: Dict[str, Tensor]):
        self.dims = list(dims)  # [p, *hidden, d]
        self.num_classes = num_classes
        self.seed = seed
        self.activation = "relu"
        self.params = params

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ShapeError(f"state names {sorted(state)} do not match model {sorted(self.params)}")
        for name, p in self.params.items():
            if state[name].shape != p.data.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]

    def copy(self) -> "Model":
        params = {name: Tensor(p.data.copy(), requires_grad=True) for name, p in self.params.items()}
        return Model(self.dims, self.num_classes, self.seed, params)


def init_model(p: int, hidden: Sequence[int], d: int, K: int, seed: int) -> Model:
    """He-scaled Gaussian weights, zero biases."""
    if any(w <= 0 for w in (p, *hidden, d, K)):
        raise InvalidArgumentError(f"layer widths must be positive, got {(p, *hidden, d, K)}")
    rng = np.random.default_rng(seed)
    dims = [p, *hidden, d]
    params: Dict[str, Tensor] = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"g.{i}.weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), requires_grad=True)
        params[f"g.{i}.bias"] = Tensor(np.zeros((1, fan_out)), requires_grad=True)
    params["h.weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / d), (d, K)), requires_grad=True)
    params["h.bias"] = Tensor(np.zeros((1, K)), requires_grad=True)
    return Model(dims, K, seed, params)


# ------------------------------------------------------------------ #
#  FORWARD
# ------------------------------------------------------------------ #
def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    # bias rows are replicated through a ones column: only scalar broadcasting exists
    ones = Tensor(np.ones((x.shape[0], 1)))
    return add(matmul(x, weight), matmul(ones, bias))


def _as_batch(m: Model, batch) -> Tensor:
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.data.ndim != 2 or batch.shape[1] != m.input_dim:
        raise ShapeError(f"batch of shape {batch.shape} does not match input width {m.input_dim}")
    return batch


def forward_features(m: Model, batch) -> Tensor:
    """
    g(x).  With the zero biases of ``init_model`` an input whose hidden units are
    all inactive maps to the zero vector (a few percent of inputs at init), so
    anything that normalizes features expects a trained model.
    """
    x = _as_batch(m, batch)
    for i in range(m.depth):
        x = _affine(x, m.params[f"g.{i}.weight"], m.params[f"g.{i}.bias"])
        if i < m.depth - 1:
            x = relu(x)
    return x


def classify(m: Model, features: Tensor) -> Tensor:
    return _affine(features, m.params["h.weight"], m.params["h.bias"])


def forward_logits(m: Model, batch) -> Tensor:
    return classify(m, forward_features(m, batch))


def predict(m: Model, inputs: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.argmax(forward_logits(m, inputs).data, axis=1)


def accuracy(m: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(m, inputs) == labels))


# ------------------------------------------------------------------ #
#  SUPERVISED TRAINING
# ------------------------------------------------------------------ #
def supervised_epoch(
    m: Model,
    inputs: np.ndarray,
    targets: np.ndarray,
    optimizer: SGD,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """One shuffled pass of plain cross-entropy SGD; returns the mean batch loss."""
    order = rng.permutation(inputs.shape[0])
    losses = []
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        loss = cross_entropy(forward_logits(m, inputs[idx]), targets[idx])
        optimizer.step(backward(loss))
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else 0.0


def pretrain(
    m: Model,
    train: DomainDataset,
    val: DomainDataset,
    cfg: PretrainConfig,
    seed: int,
) -> Tuple[Model, List[PretrainEpoch]]:
    """Cross-entropy SGD on the labeled split; restores the best validation epoch."""
    rng = np.random.default_rng(seed)
    optimizer = SGD(m.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    targets = one_hot(train.labels, m.num_classes)

    history: List[PretrainEpoch] = []
    best_acc, best_state, stale = -1.0, None, 0
    for epoch in range(1, cfg.epochs + 1):
        loss = supervised_epoch(m, train.inputs, targets, optimizer, cfg.batch_size, rng)
        val_acc = accuracy(m, val.inputs, val.labels)
        history.append(PretrainEpoch(epoch=epoch, train_loss=loss, val_acc=val_acc))
        logger.debug("pretrain epoch %d loss=%.4f val_acc=%.4f", epoch, loss, val_acc)

        if val_acc > best_acc:
            best_acc, best_state, stale = val_acc, m.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                logger.info("pretrain early stop at epoch %d (best val_acc %.4f)", epoch, best_acc)
                break

    if best_state is not None:
        m.load_state_dict(best_state)
    return m, history


def mixup_ce_loss(
    m: Model,
    batch: np.ndarray,
    targets: np.ndarray,
    beta_alpha: float,
    rng: np.random.Generator,
    soft_targets: bool = True,
    mu: Optional[np.ndarray] = None,
    permutation: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Cross-entropy after mixing features g(x_i) with g(x_pi(i)).

    mu ~ Beta(beta_alpha, beta_alpha) per pair. Soft targets mix the one-hot
    rows with the same mu; hard targets keep the row of the dominant partner.
    ``mu`` and ``permutation`` may be pinned (tests, endpoint checks).
    """
    n = np.asarray(batch).shape[0]
    if n < 2:
        raise InvalidArgumentError(f"feature mixup needs at least 2 samples, got {n}")
    if not beta_alpha > 0:
        raise InvalidArgumentError(f"beta_alpha must be positive, got {beta_alpha}")

    perm = rng.permutation(n) if permutation is None else np.asarray(permutation, dtype=np.intp)
    if mu is None:
        mu = rng.beta(beta_alpha, beta_alpha, size=n)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (n,))

    features = forward_features(m, batch)
    weights = np.repeat(mu[:, None], m.feature_dim, axis=1)
    mixed = add(mul(features, weights), mul(select_rows(features, perm), 1.0 - weights))

    targets = np.asarray(targets, dtype=np.float64)
    if soft_targets:
        mixed_targets = mu[:, None] * targets + (1.0 - mu[:, None]) * targets[perm]
    else:
        mixed_targets = np.where((mu >= 0.5)[:, None], targets, targets[perm])
    return cross_entropy(classify(m, mixed), mixed_targets)
