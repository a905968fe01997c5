"""Round logic: function-space D-ADMM with KD aggregation, plus baselines.

One round is barrier-synchronous. Every device first runs local SGD, then
exchanges either its shared-set outputs (propalg / cmfd) or its parameters
(the parameter-averaging baselines) with its graph neighbors. Each device
owns a deterministic RNG stream derived from (global_seed, device_id,
round), so serial and parallel execution are indistinguishable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Partition, SharedSet
from .graph import Topology
from .nnmodel import (ModelState, ShapeError, _grad_ce, _grad_kd,
                      forward_batch)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    eta: float                # local SGD learning rate
    rho_hat: float            # KD coefficient (eta * rho in the scaled form)
    nu: float = 0.0           # multiplier decay; 0 = plain ADMM
    local_batch: int = 20
    local_steps: int = 10
    kd_batch: int = 20
    q_out: int = 8            # bytes per shared output value
    q_param: int = 8          # bytes per shared parameter value

    def __post_init__(self):
        if self.eta < 0 or self.rho_hat < 0:
            raise ConfigError("eta and rho_hat must be non-negative")
        if not (0.0 <= self.nu < 1.0):
            raise ConfigError("nu must lie in [0, 1)")
        if min(self.local_batch, self.local_steps, self.kd_batch) < 1:
            raise ConfigError("batch/step counts must be positive")


@dataclass
class MultiplierStore:
    """Scaled multiplier values, one row per shared sample, one column per class."""

    values: np.ndarray

    @classmethod
    def zeros(cls, n_shared: int, num_classes: int) -> "MultiplierStore":
        return cls(values=np.zeros((n_shared, num_classes)))


@dataclass
class DeviceState:
    id: int
    model: ModelState
    data_x: np.ndarray
    data_y: np.ndarray
    multiplier: MultiplierStore
    velocity: np.ndarray | None = None   # heavy-ball state for dfedavgm


@dataclass
class RoundTrace:
    round_idx: int
    bytes_outputs: int = 0
    bytes_params: int = 0
    local_grad_steps: int = 0
    kd_grad_steps: int = 0
    outputs_start: np.ndarray | None = None   # (n, |Ds|, K), f at round-start w
    outputs_tilde: np.ndarray | None = None   # (n, |Ds|, K), f after local SGD
    multipliers: np.ndarray | None = None     # (n, |Ds|, K), post-update


def device_rng(global_seed: int, device_id: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([global_seed, device_id, round_idx]))


def make_devices(models: list[ModelState], dataset: Dataset, partition: Partition,
                 shared: SharedSet) -> list[DeviceState]:
    K = models[0].spec.num_classes
    devs = []
    for i, m in enumerate(models):
        idx = list(partition.assignment[i])
        devs.append(DeviceState(
            id=i, model=m,
            data_x=dataset.inputs[idx], data_y=dataset.labels[idx],
            multiplier=MultiplierStore.zeros(len(shared), K)))
    return devs


def _minibatches(n: int, batch: int, steps: int, rng: np.random.Generator):
    for _ in range(steps):
        if batch >= n:
            yield np.arange(n)
        else:
            yield rng.choice(n, size=batch, replace=False)


def local_sgd(dev: DeviceState, hp: HyperParams,
              rng: np.random.Generator,
              prox_center: np.ndarray | None = None, prox_alpha: float = 0.0,
              momentum: float = 0.0) -> tuple[ModelState, int]:
    """Mini-batch SGD on the local cross entropy; returns (w_tilde, step count).

    Each step uses the summed gradient over its batch. The optional
    proximal pull 2*alpha*(w - center) and heavy-ball momentum serve the
    DecFedProx and DFedAvgM baselines; both default to off.
    """
    if len(dev.data_x) == 0:
        raise ConfigError(f"device {dev.id} has no local data")
    w = dev.model.w.copy()
    v = dev.velocity
    steps = 0
    spec = dev.model.spec
    for idx in _minibatches(len(dev.data_x), hp.local_batch, hp.local_steps, rng):
        g = _grad_ce(spec, w, dev.data_x[idx], dev.data_y[idx])
        if prox_center is not None:
            g = g + 2.0 * prox_alpha * (w - prox_center)
        if momentum > 0.0:
            v = g if v is None else momentum * v + g
            g = v
        w = w - hp.eta * g
        steps += 1
    if momentum > 0.0:
        dev.velocity = v
    return ModelState(spec=dev.model.spec, w=w), steps


def exchange_outputs(outputs: np.ndarray, topology: Topology,
                     hp: HyperParams) -> tuple[list[np.ndarray], int]:
    """Neighbor-mean shared-set outputs per device, plus total bytes moved.

    outputs has shape (n, |Ds|, K); each device receives every neighbor's
    full output matrix, so the per-link payload is q_out * K * |Ds| bytes.
    """
    n, n_shared, K = outputs.shape
    if n != topology.n:
        raise ShapeError(f"outputs for {n} devices but topology has {topology.n}")
    neigh = topology.neighbor_sets()
    means = [outputs[sorted(neigh[i])].mean(axis=0) for i in range(n)]
    per_msg = hp.q_out * K * n_shared
    total = sum(len(neigh[i]) for i in range(n)) * per_msg
    return means, total


def update_multiplier(dev: DeviceState, neighbor_mean: np.ndarray,
                      own_outputs: np.ndarray, hp: HyperParams) -> MultiplierStore:
    """lam <- (1 - nu) lam + f(x; w_tilde_i) - mean_j f(x; w_tilde_j)."""
    if neighbor_mean.shape != dev.multiplier.values.shape \
            or own_outputs.shape != dev.multiplier.values.shape:
        raise ShapeError("multiplier update shape mismatch")
    dev.multiplier = MultiplierStore(
        values=(1.0 - hp.nu) * dev.multiplier.values + own_outputs - neighbor_mean)
    return dev.multiplier


def virtual_target(dev: DeviceState, neighbor_mean: np.ndarray) -> np.ndarray:
    """z = neighbor mean - multiplier; entries may leave the simplex."""
    return neighbor_mean - dev.multiplier.values


def kd_aggregate(dev: DeviceState, w_tilde: ModelState, shared: SharedSet,
                 targets: np.ndarray, hp: HyperParams) -> tuple[ModelState, int]:
    """One pass over the shared set, pulling outputs toward the targets."""
    if targets.shape != (len(shared), dev.model.spec.num_classes):
        raise ShapeError(f"targets must be ({len(shared)}, K), got {targets.shape}")
    w = w_tilde.w.copy()
    steps = 0
    for start in range(0, len(shared), hp.kd_batch):
        idx = slice(start, start + hp.kd_batch)
        g = _grad_kd(w_tilde.spec, w, shared.inputs[idx], targets[idx])
        w = w - 0.5 * hp.rho_hat * g
        steps += 1
    return ModelState(spec=w_tilde.spec, w=w), steps


def propalg_round(devices: list[DeviceState], topology: Topology,
                  shared: SharedSet, hp: HyperParams, round_idx: int,
                  global_seed: int, force_zero_multiplier: bool = False,
                  keep_outputs: bool = False) -> RoundTrace:
    """One synchronous round of the function-space D-ADMM algorithm.

    With force_zero_multiplier the multiplier path is disabled and the
    target degenerates to the plain neighbor mean (the CMFD rule).
    """
    trace = RoundTrace(round_idx=round_idx)
    if keep_outputs:
        trace.outputs_start = np.stack(
            [forward_batch(d.model, shared.inputs) for d in devices])

    tilde: list[ModelState] = []
    for dev in devices:
        rng = device_rng(global_seed, dev.id, round_idx)
        w_tilde, steps = local_sgd(dev, hp, rng)
        tilde.append(w_tilde)
        trace.local_grad_steps += steps

    outputs = np.stack([forward_batch(m, shared.inputs) for m in tilde])
    means, trace.bytes_outputs = exchange_outputs(outputs, topology, hp)

    for dev, w_tilde in zip(devices, tilde):
        if not force_zero_multiplier:
            update_multiplier(dev, means[dev.id], outputs[dev.id], hp)
        z = virtual_target(dev, means[dev.id])
        dev.model, steps = kd_aggregate(dev, w_tilde, shared, z, hp)
        trace.kd_grad_steps += steps

    if keep_outputs:
        trace.outputs_tilde = outputs
        trace.multipliers = np.stack([d.multiplier.values for d in devices])
    return trace


def cmfd_round(devices: list[DeviceState], topology: Topology, shared: SharedSet,
               hp: HyperParams, round_idx: int, global_seed: int,
               keep_outputs: bool = False) -> RoundTrace:
    """Neighbor-mean distillation: propalg with the multiplier forced to zero."""
    return propalg_round(devices, topology, shared, hp, round_idx, global_seed,
                         force_zero_multiplier=True, keep_outputs=keep_outputs)


def _check_same_spec(devices: list[DeviceState]) -> None:
    spec = devices[0].model.spec
    if any(d.model.spec != spec for d in devices):
        raise ConfigError("parameter averaging requires identical model specs")


def _mix_params(tilde: list[ModelState], topology: Topology, beta: float,
                hp: HyperParams) -> tuple[list[ModelState], int]:
    neigh = topology.neighbor_sets()
    W = np.stack([m.w for m in tilde])
    mixed = []
    for i, m in enumerate(tilde):
        mean = W[sorted(neigh[i])].mean(axis=0)
        mixed.append(ModelState(spec=m.spec, w=(1.0 - beta) * m.w + beta * mean))
    per_msg = hp.q_param * W.shape[1]
    total = sum(len(neigh[i]) for i in range(topology.n)) * per_msg
    return mixed, total


def decfedavg_round(devices: list[DeviceState], topology: Topology,
                    hp: HyperParams, beta: float, round_idx: int,
                    global_seed: int) -> RoundTrace:
    """Local SGD, then w_i <- (1-beta) w_i + beta * neighbor mean."""
    _check_same_spec(devices)
    trace = RoundTrace(round_idx=round_idx)
    tilde = []
    for dev in devices:
        rng = device_rng(global_seed, dev.id, round_idx)
        w_tilde, steps = local_sgd(dev, hp, rng)
        tilde.append(w_tilde)
        trace.local_grad_steps += steps
    mixed, trace.bytes_params = _mix_params(tilde, topology, beta, hp)
    for dev, m in zip(devices, mixed):
        dev.model = m
    return trace


def decfedprox_round(devices: list[DeviceState], topology: Topology,
                     hp: HyperParams, prox_alpha: float, beta: float,
                     round_idx: int, global_seed: int) -> RoundTrace:
    """FedProx-style: local SGD with a proximal pull to the frozen neighbor mean."""
    _check_same_spec(devices)
    trace = RoundTrace(round_idx=round_idx)
    neigh = topology.neighbor_sets()
    W = np.stack([d.model.w for d in devices])
    centers = [W[sorted(neigh[i])].mean(axis=0) for i in range(topology.n)]
    tilde = []
    for dev in devices:
        rng = device_rng(global_seed, dev.id, round_idx)
        w_tilde, steps = local_sgd(dev, hp, rng, prox_center=centers[dev.id],
                                   prox_alpha=prox_alpha)
        tilde.append(w_tilde)
        trace.local_grad_steps += steps
    mixed, trace.bytes_params = _mix_params(tilde, topology, beta, hp)
    for dev, m in zip(devices, mixed):
        dev.model = m
    # the frozen centers also travel over the links once per round
    trace.bytes_params *= 2
    return trace


def dfedavgm_round(devices: list[DeviceState], topology: Topology,
                   hp: HyperParams, beta: float, epsilon: float,
                   round_idx: int, global_seed: int) -> RoundTrace:
    """Heavy-ball local SGD (velocity persists across rounds), then averaging.

    The momentum placement is a reconstruction: the source only states that
    a momentum term enters the parameter-averaging process.
    """
    _check_same_spec(devices)
    trace = RoundTrace(round_idx=round_idx)
    tilde = []
    for dev in devices:
        rng = device_rng(global_seed, dev.id, round_idx)
        w_tilde, steps = local_sgd(dev, hp, rng, momentum=epsilon)
        tilde.append(w_tilde)
        trace.local_grad_steps += steps
    mixed, trace.bytes_params = _mix_params(tilde, topology, beta, hp)
    for dev, m in zip(devices, mixed):
        dev.model = m
    return trace
