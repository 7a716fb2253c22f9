"""Shared test helpers: gradient-check oracle and table-driven toy models."""

import numpy as np
import pytest

from ennbench import DiscreteReference, EnnModel, ImageDataset, Tensor


def finite_difference_grads(f, arrays, h=1e-3):
    """Central-difference gradients of scalar f(arrays), computed in 64-bit.

    Independent of the autodiff path: evaluates the forward function only.
    """
    grads = []
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f(arrays)
            flat[j] = orig - h
            down = f(arrays)
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(build_loss, arrays, h=1e-3, rtol=1e-3, tiny=1e-4, atol=1e-5):
    """Backward grads vs central differences on a float64 copy of the graph.

    ``build_loss`` maps a list of Tensors to a scalar Tensor. Relative
    error must stay under ``rtol``; entries whose analytic gradient is
    below ``tiny`` in magnitude are held to ``atol`` absolutely instead.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()

    def forward(arrs):
        return float(build_loss([Tensor(a) for a in arrs]).data)

    fd = finite_difference_grads(forward, arrays, h=h)
    for t, g_fd in zip(tensors, fd):
        g_an = np.zeros_like(g_fd) if t.grad is None else t.grad
        denom = np.maximum(np.abs(g_an), np.abs(g_fd))
        small = denom < tiny
        rel = np.abs(g_an - g_fd) / np.where(small, 1.0, denom)
        assert np.all(rel[~small] < rtol), f"relative grad error {rel[~small].max():g}"
        assert np.all(np.abs(g_an - g_fd)[small] < atol), (
            f"absolute grad error {np.abs(g_an - g_fd)[small].max():g}"
        )


class TableModel(EnnModel):
    """Index-independent model with fixed per-example logits.

    Inputs are integer row ids into the logit table, so metric tests can
    script exact predictive distributions.
    """

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float32)
        self.num_classes = self.table.shape[1]
        self.reference = DiscreteReference(1)

    def logits(self, x, z=None):
        return self.table[int(np.asarray(x).reshape(()))]

    def logit_grid(self, xs, zs):
        rows = self.table[np.asarray(xs, dtype=np.int64).reshape(len(xs))]
        return np.repeat(rows[:, None, :], len(zs), axis=1)


class MixtureTableModel(EnnModel):
    """Discrete-reference model: member m holds its own logit table."""

    def __init__(self, tables):
        self.tables = np.asarray(tables, dtype=np.float32)  # (M, N, C)
        self.num_classes = self.tables.shape[2]
        self.reference = DiscreteReference(self.tables.shape[0])

    def logits(self, x, z):
        return self.tables[int(z), int(np.asarray(x).reshape(()))]

    def logit_grid(self, xs, zs):
        idx = np.asarray(xs, dtype=np.int64).reshape(len(xs))
        return np.stack([self.tables[int(z)][idx] for z in zs], axis=1)


def table_dataset(labels, split="test"):
    """Dataset whose 'images' are row ids 0..N-1 for table models."""
    labels = np.asarray(labels, dtype=np.int64)
    return ImageDataset(np.arange(len(labels)), labels, split, {"generator": "table"})


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
