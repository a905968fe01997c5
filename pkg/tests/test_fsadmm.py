"""Round logic: local SGD, exchanges, multipliers, KD and baselines."""
import numpy as np
import pytest

from fsdfl.data import make_synthetic, partition_k_class, sample_shared
from fsdfl.fsadmm import (ConfigError, DeviceState, HyperParams,
                          MultiplierStore, _mix_params, cmfd_round,
                          decfedavg_round, decfedprox_round, device_rng,
                          dfedavgm_round, exchange_outputs, kd_aggregate,
                          local_sgd, make_devices, propalg_round,
                          update_multiplier, virtual_target)
from fsdfl.graph import build_ring
from fsdfl.nnmodel import (ModelSpec, ModelState, forward_batch,
                           grad_local_loss, init_params)

HP = HyperParams(eta=5e-3, rho_hat=5e-3, nu=0.01)


def _setup(n=4, num_classes=4, seed=0, shared_count=30):
    splits = make_synthetic(num_classes, 40, 6, seed=seed)
    part = partition_k_class(splits.train, n, 1, seed=seed)
    shared = sample_shared(splits.pool, shared_count, seed=seed)
    spec = ModelSpec(input_dim=6, hidden_dims=(8,), num_classes=num_classes)
    w0 = init_params(spec, seed)
    devices = make_devices([w0] * n, splits.train, part, shared)
    return devices, build_ring(n), shared


class TestHyperParams:
    def test_nu_range(self):
        with pytest.raises(ConfigError):
            HyperParams(eta=0.1, rho_hat=0.1, nu=1.0)

    def test_negative_eta(self):
        with pytest.raises(ConfigError):
            HyperParams(eta=-0.1, rho_hat=0.1)

    def test_zero_batch(self):
        with pytest.raises(ConfigError):
            HyperParams(eta=0.1, rho_hat=0.1, local_batch=0)


class TestLocalSgd:
    def test_deterministic(self):
        devs, _, _ = _setup()
        a, _ = local_sgd(devs[0], HP, device_rng(1, 0, 1))
        b, _ = local_sgd(devs[0], HP, device_rng(1, 0, 1))
        assert np.array_equal(a.w, b.w)

    def test_step_count(self):
        devs, _, _ = _setup()
        _, steps = local_sgd(devs[0], HP, device_rng(1, 0, 1))
        assert steps == HP.local_steps

    def test_summed_full_batch_step(self):
        # batch covering all local data: one step is w - eta * sum-gradient
        devs, _, _ = _setup()
        dev = devs[0]
        hp = HyperParams(eta=1e-3, rho_hat=0.0, local_steps=1,
                         local_batch=len(dev.data_x))
        g = grad_local_loss(dev.model, dev.data_x, dev.data_y)
        w_tilde, _ = local_sgd(dev, hp, device_rng(1, 0, 1))
        assert np.allclose(w_tilde.w, dev.model.w - hp.eta * g, atol=1e-15)

    def test_prox_pull(self):
        devs, _, _ = _setup()
        dev = devs[0]
        hp = HyperParams(eta=1e-3, rho_hat=0.0, local_steps=1,
                         local_batch=len(dev.data_x))
        center = np.zeros_like(dev.model.w)
        alpha = 0.25
        g = grad_local_loss(dev.model, dev.data_x, dev.data_y)
        expected = dev.model.w - hp.eta * (g + 2 * alpha * (dev.model.w - center))
        w_tilde, _ = local_sgd(dev, hp, device_rng(1, 0, 1),
                               prox_center=center, prox_alpha=alpha)
        assert np.allclose(w_tilde.w, expected, atol=1e-15)

    def test_momentum_velocity_recursion(self):
        # two full-batch steps: v1 = g1, v2 = eps*g1 + g2
        devs, _, _ = _setup()
        dev = devs[0]
        eps = 0.9
        hp = HyperParams(eta=1e-3, rho_hat=0.0, local_steps=2,
                         local_batch=len(dev.data_x))
        g1 = grad_local_loss(dev.model, dev.data_x, dev.data_y)
        w1 = dev.model.w - hp.eta * g1
        g2 = grad_local_loss(ModelState(spec=dev.model.spec, w=w1),
                             dev.data_x, dev.data_y)
        local_sgd(dev, hp, device_rng(1, 0, 1), momentum=eps)
        assert np.allclose(dev.velocity, eps * g1 + g2, atol=1e-15)


class TestExchange:
    def test_neighbor_means_and_bytes(self):
        devs, topo, shared = _setup()
        outputs = np.stack([forward_batch(d.model, shared.inputs) for d in devs])
        means, total = exchange_outputs(outputs, topo, HP)
        neigh = topo.neighbor_sets()
        for i in range(topo.n):
            expected = outputs[sorted(neigh[i])].mean(axis=0)
            assert np.array_equal(means[i], expected)
        # ring(4): 8 directed links, each q_out * K * |Ds| bytes
        assert total == 8 * (HP.q_out * 4 * len(shared))


class TestMultiplier:
    def test_update_rule(self):
        devs, _, shared = _setup()
        dev = devs[0]
        K = dev.model.spec.num_classes
        own = np.full((len(shared), K), 0.3)
        mean = np.full((len(shared), K), 0.1)
        update_multiplier(dev, mean, own, HP)
        assert np.allclose(dev.multiplier.values, 0.2, atol=1e-15)

    def test_fixed_point_residual_over_nu(self):
        # constant residual r: lam converges to r / nu
        nu = 0.5
        hp = HyperParams(eta=0.0, rho_hat=0.0, nu=nu)
        devs, _, shared = _setup()
        dev = devs[0]
        K = dev.model.spec.num_classes
        r = 0.07
        own = np.full((len(shared), K), r)
        zero = np.zeros((len(shared), K))
        for _ in range(100):
            update_multiplier(dev, zero, own, hp)
        assert np.allclose(dev.multiplier.values, r / nu, atol=1e-12)

    def test_virtual_target(self):
        devs, _, shared = _setup()
        dev = devs[0]
        K = dev.model.spec.num_classes
        dev.multiplier = MultiplierStore(values=np.full((len(shared), K), 0.2))
        mean = np.full((len(shared), K), 0.5)
        assert np.allclose(virtual_target(dev, mean), 0.3, atol=1e-15)


class TestKdAggregate:
    def test_fixed_point_when_targets_match(self):
        # uniform outputs and uniform targets: zero distillation gradient
        spec = ModelSpec(input_dim=6, hidden_dims=(), num_classes=4)
        m = ModelState(spec=spec, w=np.zeros(spec.param_count))
        devs, _, shared = _setup()
        dev = devs[0]
        dev.model = m
        targets = np.full((len(shared), 4), 0.25)
        out, steps = kd_aggregate(dev, m, shared, targets, HP)
        assert np.array_equal(out.w, m.w)
        assert steps == int(np.ceil(len(shared) / HP.kd_batch))

    def test_moves_toward_targets(self):
        devs, topo, shared = _setup()
        dev = devs[0]
        hp = HyperParams(eta=5e-3, rho_hat=0.1)
        targets = np.zeros((len(shared), 4))
        targets[:, 0] = 1.0
        before = forward_batch(dev.model, shared.inputs)
        out, _ = kd_aggregate(dev, dev.model, shared, targets, hp)
        after = forward_batch(out, shared.inputs)
        assert np.linalg.norm(after - targets) < np.linalg.norm(before - targets)


class TestRounds:
    def test_propalg_deterministic(self):
        a, topo, shared = _setup()
        b, _, _ = _setup()
        propalg_round(a, topo, shared, HP, 1, global_seed=7)
        propalg_round(b, topo, shared, HP, 1, global_seed=7)
        for da, db in zip(a, b):
            assert np.array_equal(da.model.w, db.model.w)
            assert np.array_equal(da.multiplier.values, db.multiplier.values)

    def test_cmfd_is_propalg_with_zero_multiplier(self):
        a, topo, shared = _setup()
        b, _, _ = _setup()
        for t in range(1, 6):
            propalg_round(a, topo, shared, HP, t, global_seed=3,
                          force_zero_multiplier=True)
            cmfd_round(b, topo, shared, HP, t, global_seed=3)
        for da, db in zip(a, b):
            assert np.array_equal(da.model.w, db.model.w)
            assert not da.multiplier.values.any()

    def test_trace_counters(self):
        devs, topo, shared = _setup()
        tr = propalg_round(devs, topo, shared, HP, 1, global_seed=0,
                           keep_outputs=True)
        n, K = topo.n, 4
        assert tr.bytes_outputs == 2 * topo.n * HP.q_out * K * len(shared)
        assert tr.local_grad_steps == n * HP.local_steps
        assert tr.kd_grad_steps == n * int(np.ceil(len(shared) / HP.kd_batch))
        assert tr.outputs_start.shape == (n, len(shared), K)
        assert tr.outputs_tilde.shape == (n, len(shared), K)
        assert tr.multipliers.shape == (n, len(shared), K)

    def test_mix_identical_params_is_identity(self):
        devs, topo, _ = _setup()
        tilde = [d.model for d in devs]
        for beta in (0.0, 0.3, 1.0):
            mixed, _ = _mix_params(tilde, topo, beta, HP)
            for m, t in zip(mixed, tilde):
                assert np.allclose(m.w, t.w, atol=1e-15)

    def test_decfedavg_beta_zero_is_pure_local(self):
        a, topo, _ = _setup()
        b, _, _ = _setup()
        decfedavg_round(a, topo, HP, beta=0.0, round_idx=1, global_seed=2)
        for dev in b:
            w_tilde, _ = local_sgd(dev, HP, device_rng(2, dev.id, 1))
            dev.model = w_tilde
        for da, db in zip(a, b):
            assert np.array_equal(da.model.w, db.model.w)

    def test_decfedprox_byte_accounting_doubles(self):
        devs, topo, _ = _setup()
        tr_avg = decfedavg_round(devs, topo, HP, beta=0.5, round_idx=1,
                                 global_seed=0)
        devs2, _, _ = _setup()
        tr_prox = decfedprox_round(devs2, topo, HP, prox_alpha=0.01, beta=0.5,
                                   round_idx=1, global_seed=0)
        assert tr_prox.bytes_params == 2 * tr_avg.bytes_params

    def test_dfedavgm_velocity_persists(self):
        devs, topo, _ = _setup()
        dfedavgm_round(devs, topo, HP, beta=0.5, epsilon=0.9, round_idx=1,
                       global_seed=0)
        assert all(d.velocity is not None for d in devs)

    def test_param_baselines_need_same_spec(self):
        devs, topo, _ = _setup()
        other = ModelSpec(input_dim=6, hidden_dims=(4,), num_classes=4)
        devs[1].model = init_params(other, 0)
        with pytest.raises(ConfigError):
            decfedavg_round(devs, topo, HP, beta=0.5, round_idx=1, global_seed=0)
