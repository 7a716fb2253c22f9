"""Losses and SGD training for base nets, epinets, and ensembles.

All runs are deterministic functions of (data, config, seed): parameter
init, per-epoch shuffles, and per-step index draws each use their own
derived seed stream. Frozen parameters are excluded from the optimizer
and receive no gradients, so their bytes never change.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .enn import marginal_probs_batch
from .epinet import BaseNet, EpinetModel
from .ensemble import EnsembleModel
from .errors import ContractError, NonFiniteError, TrainingError
from .layers import ConvNet
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Optimization settings, recorded verbatim in every checkpoint."""

    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 20
    ridge: float = 1e-4
    n_train_z: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.n_train_z < 1:
            raise ContractError("batch_size and n_train_z must be >= 1")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.ridge < 0:
            raise ContractError(f"ridge must be >= 0, got {self.ridge}")

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Momentum SGD over an explicit trainable-parameter list."""

    def __init__(self, params, learning_rate: float, momentum: float = 0.9):
        self.params = [p for p in params if p.requires_grad]
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.learning_rate * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    return logits.log_softmax().gather_rows(labels).mean().scale(-1.0)


def xent_ridge_loss(model: EpinetModel, batch, zs, ridge: float) -> Tensor:
    """Cross-entropy over (example, index) pairs plus a ridge penalty.

    ``zs`` holds one fresh index per example; the ridge term applies to
    the learnable epinet weights only (base frozen, prior fixed).
    """
    xs, ys = batch
    xs = np.asarray(xs, dtype=np.float32)
    ys = np.asarray(ys, dtype=np.int64)
    if len(xs) == 0:
        raise ContractError("empty batch")
    if ridge < 0:
        raise ContractError(f"ridge must be >= 0, got {ridge}")
    loss = cross_entropy(model.training_logits(xs, zs), ys)
    if ridge > 0:
        penalty = None
        for p in model.learnable_params():
            term = p.mul(p).sum()
            penalty = term if penalty is None else penalty.add(term)
        loss = loss.add(penalty.scale(ridge))
    return loss


def _shuffled_batches(n: int, batch_size: int, seed, epoch: int):
    perm = np.random.default_rng(np.random.SeedSequence([*_seed_list(seed), 7, epoch])).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _seed_list(seed):
    return list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]


def _train_accuracy(model, images, labels) -> float:
    probs = marginal_probs_batch(model, images, n_index=1, seed=0)
    return float((probs.argmax(axis=1) == labels).mean())


def train_base(data, config: TrainConfig, *, channels=(4,), kernel=3, stride=2,
               num_classes=None, model_id: str = "base") -> BaseNet:
    """Supervised SGD training of a small convnet; returns it frozen.

    ``data`` is an ImageDataset (or anything with .images/.labels).
    ``num_classes`` may exceed the labels present so the net can carry
    logits for classes it never trains on.
    """
    images = np.asarray(data.images, dtype=np.float32)
    labels = np.asarray(data.labels, dtype=np.int64)
    if len(images) == 0:
        raise ContractError("empty training set")
    classes = int(num_classes) if num_classes is not None else int(labels.max()) + 1
    net = ConvNet(images.shape[1:], channels, classes, kernel=kernel, stride=stride,
                  seed=config.seed)
    model = BaseNet(net, model_id=model_id)
    opt = SGD(net.params(), config.learning_rate, config.momentum)
    losses = []
    step = 0
    for epoch in range(config.epochs):
        for idx in _shuffled_batches(len(images), config.batch_size, config.seed, epoch):
            try:
                loss = cross_entropy(net.logits(Tensor(images[idx])), labels[idx])
                loss.backward()
            except NonFiniteError as e:
                raise TrainingError(f"{model_id}: diverged at step {step}: {e}") from e
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
            step += 1
    model.train_record = {
        "final_train_accuracy": _train_accuracy(model, images, labels),
        "steps": step,
        "final_loss": losses[-1] if losses else None,
        "config": config.to_dict(),
    }
    model.freeze()
    return model


def train_epinet(base: BaseNet, data, config: TrainConfig, *, index_dim=8, hidden=(50, 50),
                 prior_mlp_scale=1.0, prior_conv_scale=0.5, prior_conv_channels=4,
                 model_id: str = "epinet") -> EpinetModel:
    """Train the learnable epinet on top of a frozen base net.

    One fresh Gaussian index per example per step (times ``n_train_z``).
    Base and prior parameters are byte-compared after training; any drift
    is an internal error.
    """
    images = np.asarray(data.images, dtype=np.float32)
    labels = np.asarray(data.labels, dtype=np.int64)
    if len(images) == 0:
        raise ContractError("empty training set")
    model = EpinetModel(base, index_dim=index_dim, hidden=hidden,
                        prior_mlp_scale=prior_mlp_scale, prior_conv_scale=prior_conv_scale,
                        prior_conv_channels=prior_conv_channels, seed=config.seed,
                        model_id=model_id)
    base_bytes = base.param_bytes()
    prior_bytes = model.prior_param_bytes()
    opt = SGD(model.learnable_params(), config.learning_rate, config.momentum)
    step = 0
    for epoch in range(config.epochs):
        for idx in _shuffled_batches(len(images), config.batch_size, config.seed, epoch):
            xs, ys = images[idx], labels[idx]
            if config.n_train_z > 1:
                xs = np.repeat(xs, config.n_train_z, axis=0)
                ys = np.repeat(ys, config.n_train_z, axis=0)
            zs = np.random.default_rng(
                np.random.SeedSequence([*_seed_list(config.seed), 11, step])
            ).standard_normal((len(xs), index_dim), dtype=np.float32)
            try:
                loss = xent_ridge_loss(model, (xs, ys), zs, config.ridge)
                loss.backward()
            except NonFiniteError as e:
                raise TrainingError(f"{model_id}: diverged at step {step}: {e}") from e
            opt.step()
            opt.zero_grad()
            step += 1
    if base.param_bytes() != base_bytes:
        raise TrainingError(f"{model_id}: frozen base parameters changed during training")
    if model.prior_param_bytes() != prior_bytes:
        raise TrainingError(f"{model_id}: fixed prior parameters changed during training")
    return model


def train_ensemble(data, config: TrainConfig, members: int, *, channels=(4,), kernel=3,
                   stride=2, num_classes=None, model_id: str = "ensemble") -> EnsembleModel:
    """Train ``members`` independent base nets with derived seeds.

    Member i trains with seed = config.seed + i, giving distinct
    parameters and independent data shuffles.
    """
    if members < 1:
        raise ContractError(f"members must be >= 1, got {members}")
    nets = []
    for i in range(members):
        member_cfg = replace(config, seed=config.seed + i)
        nets.append(train_base(data, member_cfg, channels=channels, kernel=kernel,
                               stride=stride, num_classes=num_classes,
                               model_id=f"{model_id}_member{i:02d}"))
    return EnsembleModel(nets, model_id=model_id)
