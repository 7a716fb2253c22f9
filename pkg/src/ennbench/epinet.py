"""Additive epinet models.

An epinet adds an index-conditioned correction to a frozen base network:

    logits(x, z) = base(x) + learnable(features(x), z) + prior(features(x), z)

The learnable and prior MLPs consume the concatenation of features and
index, emit a (classes x index_dim) matrix, and contract it with z; the
prior also includes ``index_dim`` small convnets whose logits are combined
linearly by z. The prior is fixed at construction and never trained; the
feature vector (flattened input image plus the base net's last-layer
features) is detached, so no gradient ever reaches the base network.
"""

from __future__ import annotations

import numpy as np

from .enn import DiscreteReference, EnnModel, EpistemicIndex, GaussianReference, index_batch
from .errors import ContractError
from .layers import ConvNet, Dense, ReLU, Sequential, build_mlp
from .tensor import Tensor, index_contract

# N*K*C*index_dim elements processed per chunk in the batched grid path.
_GRID_CHUNK_ELEMS = 8_000_000


class BaseNet(EnnModel):
    """Index-independent ENN wrapping a ConvNet, with a feature tap.

    The single-member discrete reference makes predictive averaging exact:
    marginal probabilities equal the plain softmax of the net's logits.
    """

    def __init__(self, net: ConvNet, model_id: str = "base"):
        self.net = net
        self.model_id = model_id
        self.reference = DiscreteReference(1)
        self.num_classes = net.classes
        self.frozen = False
        self.train_record: dict = {}

    # Index argument accepted (and ignored) so BaseNet satisfies the
    # (x, z) -> logits interface.
    def logits(self, x, z=None) -> np.ndarray:
        return self.batch_logits(np.asarray(x)[None])[0]

    def batch_logits(self, xs) -> np.ndarray:
        return self.net.logits(Tensor(np.asarray(xs, dtype=np.float32))).data

    def batch_features(self, xs) -> np.ndarray:
        return self.net.features(Tensor(np.asarray(xs, dtype=np.float32))).data

    def logit_grid(self, xs, zs) -> np.ndarray:
        logits = self.batch_logits(xs)
        return np.repeat(logits[:, None, :], len(zs), axis=1)

    @property
    def feature_dim(self) -> int:
        return self.net.feature_dim

    def params(self):
        return self.net.params()

    def param_count(self) -> int:
        return self.net.param_count()

    def freeze(self) -> None:
        self.net.set_trainable(False)
        self.frozen = True

    def param_bytes(self):
        return [p.data.tobytes() for p in self.params()]

    def state(self):
        meta = {"train_record": dict(self.train_record), "model_id": self.model_id}
        return "convnet", {**self.net.arch(), **meta}, {
            name: p.data for name, p in self.net.named_params().items()
        }


class EpinetModel(EnnModel):
    """Frozen base net plus learnable and fixed-prior epinet corrections."""

    def __init__(self, base: BaseNet, *, index_dim: int = 8, hidden=(50, 50),
                 prior_mlp_scale: float = 1.0, prior_conv_scale: float = 0.5,
                 prior_conv_channels: int = 4, seed: int = 0, scheme="uniform-fan-in",
                 model_id: str = "epinet"):
        if index_dim < 1:
            raise ContractError(f"index_dim must be >= 1, got {index_dim}")
        base.freeze()
        self.base = base
        self.model_id = model_id
        self.index_dim = index_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.prior_mlp_scale = float(prior_mlp_scale)
        self.prior_conv_scale = float(prior_conv_scale)
        self.prior_conv_channels = int(prior_conv_channels)
        self.seed = seed
        self.num_classes = base.num_classes
        self.reference = GaussianReference(index_dim)

        c, h, w = base.net.image_shape
        self.feature_dim = c * h * w + base.feature_dim
        sizes = [self.feature_dim + index_dim, *self.hidden, self.num_classes * index_dim]
        self.learnable = build_mlp(sizes, seed=[seed, 0], scheme=scheme)
        self.prior_mlp = build_mlp(sizes, seed=[seed, 1], scheme=scheme)
        self.prior_mlp.set_trainable(False)
        self.prior_convs = []
        for i in range(index_dim):
            net = ConvNet(base.net.image_shape, [prior_conv_channels], self.num_classes,
                          kernel=base.net.kernel, stride=base.net.stride,
                          scheme=scheme, seed=[seed, 2, i])
            net.set_trainable(False)
            self.prior_convs.append(net)

    # -- parameter access --------------------------------------------------

    def learnable_params(self):
        return self.learnable.params()

    def prior_params(self):
        out = self.prior_mlp.params()
        for net in self.prior_convs:
            out.extend(net.params())
        return out

    def param_count(self) -> int:
        return (self.base.param_count() + self.learnable.param_count()
                + self.prior_mlp.param_count()
                + sum(net.param_count() for net in self.prior_convs))

    def prior_param_bytes(self):
        return [p.data.tobytes() for p in self.prior_params()]

    def zero_learnable(self) -> None:
        """Set every learnable weight to zero (the epinet then adds nothing
        beyond the prior)."""
        for p in self.learnable_params():
            p.data[...] = 0.0

    # -- features ------------------------------------------------------------

    def features(self, xs) -> np.ndarray:
        """Detached (N, F) feature matrix: [flattened image, base features]."""
        xs = np.asarray(xs, dtype=np.float32)
        flat = xs.reshape(len(xs), -1)
        return np.concatenate([flat, self.base.batch_features(xs)], axis=1)

    # -- forward paths ---------------------------------------------------------

    @staticmethod
    def _contract_pairs(mlp: Sequential, inp: np.ndarray, zs: np.ndarray, classes: int) -> np.ndarray:
        out = mlp(Tensor(inp)).data
        h3 = out.reshape(len(inp), classes, -1)
        return np.einsum("ncd,nd->nc", h3, zs, optimize=True)

    def _conv_prior_table(self, xs) -> np.ndarray:
        """(N, index_dim, C) per-example logits of the prior convnets."""
        return np.stack([net.logits(Tensor(np.asarray(xs, dtype=np.float32))).data
                         for net in self.prior_convs], axis=1)

    def logits(self, x, z) -> np.ndarray:
        """Eq-style additive logits for a single (input, index) pair."""
        if isinstance(z, EpistemicIndex):
            z = z.value
        z = np.asarray(z, dtype=np.float32).reshape(-1)
        if z.shape != (self.index_dim,):
            raise ContractError(f"index has dimension {z.shape[0]}, expected {self.index_dim}")
        xs = np.asarray(x, dtype=np.float32)[None]
        zs = z[None]
        phi = self.features(xs)
        inp = np.concatenate([phi, zs], axis=1)
        base = self.base.batch_logits(xs)
        learn = self._contract_pairs(self.learnable, inp, zs, self.num_classes)
        prior = self.prior_mlp_scale * self._contract_pairs(self.prior_mlp, inp, zs, self.num_classes)
        prior = prior + self.prior_conv_scale * np.einsum(
            "ndc,nd->nc", self._conv_prior_table(xs), zs, optimize=True
        )
        return (base + learn + prior)[0]

    @staticmethod
    def _mlp_grid(mlp: Sequential, phi: np.ndarray, zs: np.ndarray) -> np.ndarray:
        """Evaluate an MLP on every (row of phi, row of zs) pair: (N, K, out).

        The first dense layer is split into feature and index halves so the
        (N, K) grid never materializes the concatenated inputs.
        """
        first = mlp.layers[0]
        w, b = first.w.data, first.b.data
        f = phi.shape[1]
        h = (phi @ w[:f])[:, None, :] + (zs @ w[f:])[None, :, :] + b
        for layer in mlp.layers[1:]:
            if isinstance(layer, ReLU):
                h = np.maximum(h, 0.0)
            elif isinstance(layer, Dense):
                h = h @ layer.w.data + layer.b.data
            else:
                raise ContractError(f"unsupported layer {layer!r} in epinet MLP")
        return h

    def logit_grid(self, xs, zs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float32)
        zs = np.asarray(zs, dtype=np.float32)
        n, k = len(xs), len(zs)
        base = self.base.batch_logits(xs)
        phi = self.features(xs)
        conv_table = self._conv_prior_table(xs)
        out = np.empty((n, k, self.num_classes), dtype=np.float32)
        chunk = max(1, _GRID_CHUNK_ELEMS // max(1, n * self.num_classes * self.index_dim))
        for start in range(0, k, chunk):
            zc = zs[start : start + chunk]
            learn = self._mlp_grid(self.learnable, phi, zc)
            prior = self._mlp_grid(self.prior_mlp, phi, zc)
            learn = learn.reshape(n, len(zc), self.num_classes, self.index_dim)
            prior = prior.reshape(n, len(zc), self.num_classes, self.index_dim)
            total = np.einsum("nkcd,kd->nkc", learn, zc, optimize=True)
            total += self.prior_mlp_scale * np.einsum("nkcd,kd->nkc", prior, zc, optimize=True)
            total += self.prior_conv_scale * np.einsum("ndc,kd->nkc", conv_table, zc, optimize=True)
            out[:, start : start + chunk] = total + base[:, None, :]
        return out

    def training_logits(self, xs, zs) -> Tensor:
        """Graph-building forward for paired (x_i, z_i) training examples.

        Only the learnable MLP participates in the graph; base and prior
        contributions enter as constants.
        """
        xs = np.asarray(xs, dtype=np.float32)
        zs = np.asarray(zs, dtype=np.float32)
        if zs.ndim != 2 or zs.shape != (len(xs), self.index_dim):
            raise ContractError(
                f"index batch shape {zs.shape} != ({len(xs)}, {self.index_dim})"
            )
        phi = self.features(xs)
        inp = np.concatenate([phi, zs], axis=1)
        base = self.base.batch_logits(xs)
        prior = self.prior_mlp_scale * self._contract_pairs(self.prior_mlp, inp, zs, self.num_classes)
        prior = prior + self.prior_conv_scale * np.einsum(
            "ndc,nd->nc", self._conv_prior_table(xs), zs, optimize=True
        )
        head = self.learnable(Tensor(inp))
        learn = index_contract(head, zs, self.num_classes)
        return learn.add(Tensor(base + prior))

    # -- persistence -------------------------------------------------------------

    def named_params(self) -> dict:
        named = {f"base.{k}": p for k, p in self.base.net.named_params().items()}
        for i, layer in enumerate(self.learnable.layers):
            if isinstance(layer, Dense):
                named[f"learnable.{i}.w"] = layer.w
                named[f"learnable.{i}.b"] = layer.b
        for i, layer in enumerate(self.prior_mlp.layers):
            if isinstance(layer, Dense):
                named[f"prior_mlp.{i}.w"] = layer.w
                named[f"prior_mlp.{i}.b"] = layer.b
        for j, net in enumerate(self.prior_convs):
            for k, p in net.named_params().items():
                named[f"prior_conv{j}.{k}"] = p
        return named

    def state(self):
        arch = {
            "base": self.base.net.arch(),
            "index_dim": self.index_dim,
            "hidden": list(self.hidden),
            "prior_mlp_scale": self.prior_mlp_scale,
            "prior_conv_scale": self.prior_conv_scale,
            "prior_conv_channels": self.prior_conv_channels,
            "model_id": self.model_id,
        }
        return "epinet", arch, {name: p.data for name, p in self.named_params().items()}


def epinet_logits(model: EpinetModel, x, z) -> np.ndarray:
    """Additive logits base + learnable + prior for one (input, index)."""
    return model.logits(x, z)


def epinet_variance_probe(model: EpinetModel, x, n_index: int, seed=0) -> np.ndarray:
    """Empirical per-class variance of logits over sampled indices.

    Zero exactly when the learnable weights are zero and both prior scales
    are zero. Diagnostic only; not part of the predictive path.
    """
    if n_index < 2:
        raise ContractError(f"variance probe needs n_index >= 2, got {n_index}")
    zs = index_batch(model.reference, n_index, seed)
    grid = model.logit_grid(np.asarray(x, dtype=np.float32)[None], zs)[0].astype(np.float64)
    return grid.var(axis=0)
