"""Losses, SGD trainers, freezing and determinism contracts."""

import math

import numpy as np
import pytest

from ennbench import (SGD, BaseNet, ContractError, EpinetModel, TrainConfig, TrainingError,
                      build_small_convnet, generate_dataset, marginal_nll, train_base,
                      train_ensemble, train_epinet, xent_ridge_loss)


def toy_data(n=240, classes=2, seed=0):
    return generate_dataset(n, classes, seed=seed)


def quick_config(**kw):
    base = dict(learning_rate=0.05, momentum=0.9, batch_size=64, epochs=6,
                ridge=1e-4, n_train_z=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestXentRidgeLoss:
    def test_uniform_logits_give_log_c(self):
        base = BaseNet(build_small_convnet((1, 8, 8), [2], 5, seed=0, scheme="zeros"))
        model = EpinetModel(base, index_dim=2, hidden=(4,), prior_mlp_scale=0.0,
                            prior_conv_scale=0.0, seed=1)
        model.zero_learnable()
        xs = np.random.default_rng(0).random((6, 1, 8, 8)).astype(np.float32)
        ys = np.arange(6) % 5
        zs = np.zeros((6, 2), dtype=np.float32)
        loss = xent_ridge_loss(model, (xs, ys), zs, ridge=0.0)
        assert abs(loss.item() - math.log(5)) < 1e-7

    def test_crafted_single_example_matches_hand_value(self):
        # 2 classes; zero base and priors; single dense learnable head.
        base = BaseNet(build_small_convnet((1, 4, 4), [1], 2, seed=0, scheme="zeros"))
        model = EpinetModel(base, index_dim=1, hidden=(), prior_mlp_scale=0.0,
                            prior_conv_scale=0.0, seed=2)
        model.zero_learnable()
        w = model.learnable.layers[0].w
        w.data[0, :] = [0.8, -0.4]  # first pixel feeds both head outputs
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        x[0, 0, 0, 0] = 1.0
        z = np.array([[2.0]], dtype=np.float32)
        # logits = head(x,z) contracted with z: [0.8, -0.4] * 2 = [1.6, -0.8]
        logits = np.array([1.6, -0.8])
        expected = -(logits[1] - np.log(np.exp(logits).sum()))
        lam = 0.01
        expected += lam * float((w.data ** 2).sum())
        loss = xent_ridge_loss(model, (x, np.array([1])), z, ridge=lam)
        assert abs(loss.item() - expected) < 1e-6

    def test_ridge_shrinks_weights_when_data_gradient_is_zero(self):
        # a zero index vector kills the contraction, so only the ridge term
        # produces gradients
        base = BaseNet(build_small_convnet((1, 4, 4), [1], 3, seed=3))
        model = EpinetModel(base, index_dim=2, hidden=(4,), prior_mlp_scale=0.0,
                            prior_conv_scale=0.0, seed=4)
        xs = np.random.default_rng(1).random((4, 1, 4, 4)).astype(np.float32)
        ys = np.array([0, 1, 2, 0])
        zs = np.zeros((4, 2), dtype=np.float32)
        opt = SGD(model.learnable_params(), learning_rate=0.1, momentum=0.0)
        norms = []
        for _ in range(4):
            loss = xent_ridge_loss(model, (xs, ys), zs, ridge=0.05)
            loss.backward()
            opt.step()
            opt.zero_grad()
            norms.append(sum(float((p.data ** 2).sum()) for p in model.learnable_params()))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_empty_batch_rejected(self):
        base = BaseNet(build_small_convnet((1, 4, 4), [1], 2, seed=0))
        model = EpinetModel(base, index_dim=1, seed=0)
        with pytest.raises(ContractError, match="empty"):
            xent_ridge_loss(model, (np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=int)),
                            np.zeros((0, 1), dtype=np.float32), ridge=0.0)


class TestTrainBase:
    def test_separable_two_class_toy_reaches_high_accuracy(self):
        data = toy_data(n=240, classes=2, seed=5)
        model = train_base(data, quick_config(), channels=(4,), num_classes=2)
        assert model.train_record["final_train_accuracy"] >= 0.99

    def test_zero_epochs_returns_initialized_net_unchanged(self):
        data = toy_data(n=60, classes=2, seed=6)
        cfg = quick_config(epochs=0, seed=11)
        fresh = build_small_convnet((1, 16, 16), [4], 2, seed=11)
        model = train_base(data, cfg, channels=(4,), num_classes=2)
        for trained, init in zip(model.params(), fresh.params()):
            assert trained.data.tobytes() == init.data.tobytes()

    def test_same_config_and_seed_bit_identical(self):
        data = toy_data(n=120, classes=2, seed=7)
        a = train_base(data, quick_config(epochs=2))
        b = train_base(data, quick_config(epochs=2))
        assert a.param_bytes() == b.param_bytes()

    def test_near_zero_head_initial_loss_is_log_c(self):
        from ennbench import Tensor, cross_entropy

        data = toy_data(n=64, classes=4, seed=8)
        net = build_small_convnet((1, 16, 16), [4], 4, seed=0, scheme="zeros")
        loss = cross_entropy(net.logits(Tensor(data.images)), data.labels)
        assert abs(loss.item() - math.log(4)) < 0.01 * math.log(4)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_reports_step(self):
        data = toy_data(n=64, classes=2, seed=9)
        with pytest.raises(TrainingError, match="step"):
            train_base(data, quick_config(learning_rate=1e40, epochs=3))

    def test_returned_model_is_frozen(self):
        model = train_base(toy_data(n=60, seed=10), quick_config(epochs=1))
        assert model.frozen
        assert all(not p.requires_grad for p in model.params())


class TestTrainEpinet:
    def setup_method(self):
        self.train = toy_data(n=240, classes=3, seed=12)
        self.held = toy_data(n=120, classes=3, seed=13)
        self.base = train_base(self.train, quick_config(), channels=(4,), num_classes=3)

    def test_base_and_prior_bytes_identical_pre_post(self):
        before = self.base.param_bytes()
        model = train_epinet(self.base, self.train, quick_config(epochs=2), index_dim=4)
        assert self.base.param_bytes() == before
        # prior bytes captured after construction inside train_epinet; verify
        # a fresh construction with the same seed matches what survived
        twin = EpinetModel(self.base, index_dim=4, seed=quick_config().seed)
        assert model.prior_param_bytes() == twin.prior_param_bytes()

    def test_training_reduces_held_out_marginal_nll(self):
        untrained = EpinetModel(self.base, index_dim=4, seed=0)
        before = marginal_nll(untrained, self.held, n_index=200, seed=1)
        trained = train_epinet(self.base, self.train, quick_config(epochs=6), index_dim=4)
        after = marginal_nll(trained, self.held, n_index=200, seed=1)
        assert after < before

    def test_determinism(self):
        a = train_epinet(self.base, self.train, quick_config(epochs=2), index_dim=2)
        b = train_epinet(self.base, self.train, quick_config(epochs=2), index_dim=2)
        assert ([p.data.tobytes() for p in a.learnable_params()]
                == [p.data.tobytes() for p in b.learnable_params()])

    def test_default_uses_one_index_per_example(self):
        assert TrainConfig().n_train_z == 1


class TestTrainEnsemble:
    def test_members_differ_and_seeds_derive_from_base_seed(self):
        data = toy_data(n=120, classes=2, seed=14)
        pool = train_ensemble(data, quick_config(epochs=1, seed=100), members=3)
        byte_sets = [tuple(m.param_bytes()) for m in pool.members]
        assert len(set(byte_sets)) == 3
        solo = train_base(data, quick_config(epochs=1, seed=101), model_id="ensemble_member01")
        assert pool.members[1].param_bytes() == solo.param_bytes()

    def test_member_count_contract(self):
        with pytest.raises(ContractError):
            train_ensemble(toy_data(n=20, seed=0), quick_config(epochs=0), members=0)
