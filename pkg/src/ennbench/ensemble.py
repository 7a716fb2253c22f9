"""Deep ensembles expressed as ENNs with a uniform-discrete reference.

The epistemic index selects a member, so marginal predictions are the
uniform mixture over members and joint predictions are mixtures of
per-member products (not products of mixtures).
"""

from __future__ import annotations

import numpy as np

from .enn import DiscreteReference, EnnModel, EpistemicIndex
from .epinet import BaseNet
from .errors import ContractError


class EnsembleModel(EnnModel):
    """Uniform mixture over independently trained base nets."""

    def __init__(self, members, model_id: str = "ensemble"):
        members = list(members)
        if not members:
            raise ContractError("ensemble needs at least one member")
        classes = members[0].num_classes
        if any(m.num_classes != classes for m in members):
            raise ContractError("ensemble members disagree on class count")
        self.members = members
        self.model_id = model_id
        self.num_classes = classes
        self.reference = DiscreteReference(len(members))

    def _member(self, z) -> BaseNet:
        if isinstance(z, EpistemicIndex):
            z = z.value
        m = int(z)
        if m < 0 or m >= len(self.members):
            raise ContractError(f"member id {m} out of range [0, {len(self.members)})")
        return self.members[m]

    def logits(self, x, z) -> np.ndarray:
        return self._member(z).logits(x)

    def logit_grid(self, xs, zs) -> np.ndarray:
        return np.stack([self._member(z).batch_logits(xs) for z in zs], axis=1)

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.members)


def ensemble_logits(model: EnsembleModel, x, z) -> np.ndarray:
    """Logits of member ``z`` for one input."""
    return model.logits(x, z)


def subensemble(model: EnsembleModel, k: int, order=None) -> EnsembleModel:
    """First ``k`` members by a fixed order (default: pool order).

    Sub-ensembles taken from the same order are nested, so size-k results
    are deterministic and monotone in k.
    """
    m = len(model.members)
    if k < 1 or k > m:
        raise ContractError(f"sub-ensemble size {k} out of range [1, {m}]")
    if order is None:
        order = list(range(m))
    order = [int(i) for i in order]
    if sorted(order) != list(range(m)):
        raise ContractError("order must be a permutation of the member ids")
    members = [model.members[order[i]] for i in range(k)]
    return EnsembleModel(members, model_id=f"{model.model_id}_k{k}")
