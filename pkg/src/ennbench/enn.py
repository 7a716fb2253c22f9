"""ENN interface and Monte-Carlo predictive machinery.

A model is anything exposing ``logits(x, z)`` together with a reference
distribution for the epistemic index z. Marginal class probabilities
integrate the per-index softmax over sampled indices; joint probabilities
over a batch average the per-index product of softmax terms, which lets
index-dependent models express more than products of marginals.

All probability math runs in float64 log domain: marginal probabilities
are exp(log-mean-exp of per-index log-softmax), so discrete references
enumerated exactly and repeated identical index draws reduce to the
single-pass softmax with no rounding drift. Each evaluation call derives
its own random stream from its seed argument; models are read-only during
evaluation and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

DEFAULT_N_INDEX = 1000


@dataclass(frozen=True)
class GaussianReference:
    """Standard Gaussian reference distribution of dimension ``dim``."""

    dim: int

    kind = "gaussian"

    def draw_batch(self, n: int, seed) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return rng.standard_normal((n, self.dim), dtype=np.float32)


@dataclass(frozen=True)
class DiscreteReference:
    """Uniform distribution over ``size`` members (ensemble mixtures)."""

    size: int

    kind = "discrete"

    def enumerate_members(self) -> np.ndarray:
        return np.arange(self.size)


@dataclass(frozen=True)
class EpistemicIndex:
    """A single draw z from a reference distribution, tagged with its origin."""

    value: object
    kind: str


def draw_index(reference, seed=0) -> EpistemicIndex:
    """Draw one epistemic index from ``reference``."""
    if isinstance(reference, GaussianReference):
        return EpistemicIndex(reference.draw_batch(1, seed)[0], "gaussian")
    if isinstance(reference, DiscreteReference):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return EpistemicIndex(int(rng.integers(reference.size)), "discrete")
    raise ContractError(f"unknown reference distribution {reference!r}")


def index_batch(reference, n_index: int, seed) -> np.ndarray:
    """Index draws for predictive averaging.

    Discrete references are enumerated exactly (every member once, so
    mixture predictions carry no Monte-Carlo noise); Gaussian references
    sample ``n_index`` i.i.d. draws.
    """
    if n_index < 1:
        raise ContractError(f"n_index must be >= 1, got {n_index}")
    if isinstance(reference, DiscreteReference):
        return reference.enumerate_members()
    if isinstance(reference, GaussianReference):
        return reference.draw_batch(n_index, seed)
    raise ContractError(f"unknown reference distribution {reference!r}")


class EnnModel:
    """Base class for epistemic models: (input, index) -> class logits.

    Subclasses set ``reference`` and ``num_classes`` and implement
    ``logits``; ``logit_grid`` has a generic (slow) fallback that
    subclasses override with batched paths. ``class_mask``, when set,
    restricts probabilities to a class subset before the softmax.
    """

    reference = None
    num_classes = 0
    class_mask = None

    def logits(self, x, z):
        raise NotImplementedError

    def logit_grid(self, xs, zs) -> np.ndarray:
        """Logits for every (input, index) pair: (N, K, C) float32."""
        rows = []
        for x in xs:
            rows.append([self.logits(x, z) for z in zs])
        return np.asarray(rows, dtype=np.float32)


class RestrictedEnn(EnnModel):
    """A model whose probabilities are renormalized over a class subset.

    Logits are unchanged; the mask is applied inside every softmax, so
    probabilities are supported only on the subset and equal the full
    model's probabilities renormalized there.
    """

    def __init__(self, inner: EnnModel, subset):
        subset = np.unique(np.asarray(subset, dtype=np.int64))
        if subset.size == 0:
            raise ContractError("class subset must be non-empty")
        if subset.min() < 0 or subset.max() >= inner.num_classes:
            raise ContractError(
                f"class subset {subset.tolist()} out of range for {inner.num_classes} classes"
            )
        if inner.class_mask is not None and not np.isin(subset, inner.class_mask).all():
            raise ContractError("subset must lie within the existing class restriction")
        self.inner = inner
        self.reference = inner.reference
        self.num_classes = inner.num_classes
        self.class_mask = subset

    def logits(self, x, z):
        return self.inner.logits(x, z)

    def logit_grid(self, xs, zs):
        return self.inner.logit_grid(xs, zs)


def restrict_classes(model: EnnModel, subset) -> EnnModel:
    """Restrict a model's predictions to a subset of class ids."""
    return RestrictedEnn(model, subset)


# -- probability math ---------------------------------------------------------


def masked_log_softmax(logits, class_mask=None, temperature: float = 1.0) -> np.ndarray:
    """Float64 log-softmax over the last axis, optionally masked/re-scaled.

    Masked-out classes get probability zero (-inf log-probability);
    ``temperature`` divides the logits before the softmax.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    lt = np.asarray(logits, dtype=np.float64)
    if temperature != 1.0:
        lt = lt / temperature
    if class_mask is None:
        shifted = lt - lt.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    mask = np.asarray(class_mask)
    sub = lt[..., mask]
    shifted = sub - sub.max(axis=-1, keepdims=True)
    sub_lp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = np.full(lt.shape, -np.inf)
    out[..., mask] = sub_lp
    return out


def log_mean_exp(a: np.ndarray, axis: int) -> np.ndarray:
    """Stable log(mean(exp(a))) along ``axis``; exact for constant slices.

    Slices that are -inf everywhere (fully masked classes) stay -inf.
    """
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    mean = np.exp(a - safe_m).mean(axis=axis)
    m = np.squeeze(m, axis=axis)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), np.log(mean) + np.squeeze(safe_m, axis=axis), m)


def marginal_log_probs(model: EnnModel, xs, n_index: int = DEFAULT_N_INDEX, seed=0,
                       temperature: float = 1.0) -> np.ndarray:
    """(N, C) float64 log of the index-averaged class probabilities."""
    zs = index_batch(model.reference, n_index, seed)
    grid = model.logit_grid(np.asarray(xs), zs)
    lp = masked_log_softmax(grid, model.class_mask, temperature)
    return log_mean_exp(lp, axis=1)


def marginal_probs_batch(model: EnnModel, xs, n_index: int = DEFAULT_N_INDEX, seed=0,
                         temperature: float = 1.0) -> np.ndarray:
    """Index-averaged class probabilities for a batch of inputs: (N, C)."""
    return np.exp(marginal_log_probs(model, xs, n_index, seed, temperature))


def marginal_probs(model: EnnModel, x, n_index: int = DEFAULT_N_INDEX, seed=0,
                   temperature: float = 1.0) -> np.ndarray:
    """Class probabilities for one input, averaged over sampled indices.

    Non-negative and sums to 1 (within float rounding); deterministic
    given ``seed``. Discrete references are enumerated exactly.
    """
    x = np.asarray(x)
    return marginal_probs_batch(model, x[None], n_index, seed, temperature)[0]


def joint_logprob(model: EnnModel, xs, ys, n_index: int = DEFAULT_N_INDEX, seed=0,
                  temperature: float = 1.0) -> float:
    """Log-probability the model assigns to the label combination ``ys``.

    Computes log of the index average of prod_t softmax(logits(x_t, z))[y_t]
    via log-sum-exp in float64; never -inf for finite logits at unmasked
    labels. With one input this reduces to the log marginal probability.
    """
    xs = np.asarray(xs)
    ys = np.asarray(ys, dtype=np.int64)
    if len(xs) != len(ys):
        raise ContractError(f"got {len(xs)} inputs but {len(ys)} labels")
    if len(xs) < 1:
        raise ContractError("joint_logprob needs at least one input")
    zs = index_batch(model.reference, n_index, seed)
    grid = model.logit_grid(xs, zs)
    lp = masked_log_softmax(grid, model.class_mask, temperature)
    per_index = lp[np.arange(len(xs)), :, ys].sum(axis=0)  # (K,)
    return float(log_mean_exp(per_index, axis=0))
